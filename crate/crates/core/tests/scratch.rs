// Temporary calibration harness; removed once the case data is frozen.

use hybridsim_core::casefile::{load_case, validate_case};
use hybridsim_core::coordinator::{run_case, RunOptions, SimulationMode};
use std::path::Path;

fn case_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases/nine_bus_feeder.hyb")
}

#[test]
fn motor_base_calibration() {
    let case = load_case(&case_path()).unwrap();
    let problems = validate_case(&case);
    assert!(problems.is_empty(), "{problems:#?}");
    let g = &case.motor_groups[0];
    for v in [1.0_f64, 0.95, 1.05] {
        let s = g.spim.running_power_system(v).unwrap();
        println!(
            "v={v:.3}  S_sys={s:.4}  S_group3ph={:.4}  slip={:?}",
            s / 3.0,
            g.spim.balance_slip(v)
        );
    }
    let s1 = g.spim.running_power_system(1.0).unwrap() / 3.0;
    let target_p = 0.625 / 3.0;
    println!(
        "mbase now {}, for P_g={target_p:.4} want mbase={:.4}",
        g.spim.mbase,
        g.spim.mbase * target_p / s1.re
    );
}

#[test]
fn whole_net_three_phase_solves() {
    use hybridsim_core::net::Representation;
    use hybridsim_core::phasor::{MateSystem, PhasorSubsystem};
    let case = load_case(&case_path()).unwrap();
    // Rebuild the initialization path by hand: power flow, devices, seed.
    let init = hybridsim_core::coordinator::debug_initialize(&case).unwrap();
    let mut sub = PhasorSubsystem::new(
        case.net.clone(),
        Representation::ThreePhase,
        init.0,
        init.1,
        init.2,
    )
    .unwrap();
    let v = init.3;
    sub.v = hybridsim_core::phasor::VoltageSolution::Abc(
        v.iter()
            .map(|x| hybridsim_core::net::ThreePhasePhasor::balanced(*x))
            .collect(),
    );
    let mut mate = MateSystem::single(sub);
    let rep = mate.solve_network().unwrap();
    println!("whole-net abc solve: passes={} residual={:.3e}", rep.passes, rep.residual);
}

#[test]
fn hybrid_no_switch_runs() {
    let case = load_case(&case_path()).unwrap();
    let opts = RunOptions::new(SimulationMode::HybridNoSwitch);
    let result = run_case(&case, &opts).unwrap();
    let col = |name: &str| result.columns.iter().position(|c| c == name).unwrap();
    let (ta, tb, tc) = (col("v11_a_mag"), col("v11_b_mag"), col("v11_c_mag"));
    let tpos = col("v11_pos_mag");
    let (ma, mb, mc) = (
        col("motor_MA_status"),
        col("motor_MB_status"),
        col("motor_MC_status"),
    );
    let (aa, ab, ac) = (col("v11_a_ang"), col("v11_b_ang"), col("v11_c_ang"));
    for row in &result.rows {
        let t = row[0];
        let near = |x: f64| (t - x).abs() < 2.6e-3;
        if near(0.3) || near(0.305) || near(0.5) || near(0.52) || near(0.55)
            || near(0.6) || near(0.8) || near(1.0) || near(1.5) || near(2.0)
        {
            let ph = hybridsim_core::net::ThreePhasePhasor::new(
                hybridsim_core::Cx::from_polar(row[ta], row[aa]),
                hybridsim_core::Cx::from_polar(row[tb], row[ab]),
                hybridsim_core::Cx::from_polar(row[tc], row[ac]),
            );
            let s = hybridsim_core::net::phase_to_seq(&ph);
            println!(
                "t={t:.3} v11 pos={:.4} a={:.4} b={:.4} c={:.4} |s2|={:.4} |s0|={:.4} M=({:.0},{:.0},{:.0}) stage={:.0}",
                row[tpos], row[ta], row[tb], row[tc], s.s2.norm(), s.s0.norm(),
                row[ma], row[mb], row[mc],
                row[*result.columns.iter().position(|c| c == "stage").map(|x| x).as_ref().unwrap()]
            );
        }
    }
    for e in &result.events {
        println!("EV {e}");
    }
    for (l, s) in &result.timings {
        println!("TIME {l} {s:.3}");
    }
}

#[test]
fn hybrid_no_reconcile_runs() {
    let case = load_case(&case_path()).unwrap();
    let mut opts = RunOptions::new(SimulationMode::HybridSwitch);
    opts.reconcile = false;
    let result = run_case(&case, &opts).unwrap();
    let col = |name: &str| result.columns.iter().position(|c| c == name).unwrap();
    let (ta, tb, tc) = (col("v11_a_mag"), col("v11_b_mag"), col("v11_c_mag"));
    let (ma, mb, mc) = (
        col("motor_MA_status"),
        col("motor_MB_status"),
        col("motor_MC_status"),
    );
    for row in &result.rows {
        let t = row[0];
        let near = |x: f64| (t - x).abs() < 2.6e-3;
        if near(0.5) || near(0.52) || near(0.535) || near(0.55) || near(0.57) || near(0.6)
            || near(0.7) || near(1.0) || near(2.0)
        {
            println!(
                "t={t:.3} shadow v11 a={:.4} b={:.4} c={:.4} M=({:.0},{:.0},{:.0})",
                row[ta], row[tb], row[tc], row[ma], row[mb], row[mc],
            );
        }
    }
    for e in &result.events {
        println!("EV {e}");
    }
}

#[test]
fn hybrid_switch_runs() {
    let case = load_case(&case_path()).unwrap();
    let opts = RunOptions::new(SimulationMode::HybridSwitch);
    let result = run_case(&case, &opts).unwrap();
    for e in &result.events {
        println!("EV {e}");
    }
    for (l, s) in &result.timings {
        println!("TIME {l} {s:.3}");
    }
    let col = |name: &str| result.columns.iter().position(|c| c == name).unwrap();
    let tpos5 = col("v5_pos_mag");
    let tpos7 = col("v7_pos_mag");
    for row in &result.rows {
        let t = row[0];
        let near = |x: f64| (t - x).abs() < 2.6e-3;
        if near(0.75) || near(0.8) || near(0.85) || near(1.0) || near(1.5) || near(2.0) {
            println!("t={t:.3} v5={:.5} v7={:.5}", row[tpos5], row[tpos7]);
        }
    }
}

#[test]
fn ts_only_runs() {
    let case = load_case(&case_path()).unwrap();
    let opts = RunOptions::new(SimulationMode::TsOnly);
    let result = run_case(&case, &opts).unwrap();
    println!("columns: {:?}", result.columns);
    for row in result.rows.iter().take(3) {
        println!("{row:7.4?}");
    }
    for row in result.rows.iter().rev().take(1) {
        println!("last {row:7.4?}");
    }
    for e in &result.events {
        println!("EV {e}");
    }
}

//! Point-on-wave engine hosting for the co-simulation boundary.
//!
//! `EmtEngine` wraps an [`EmtCircuit`] with the handful of operations the
//! coordinator needs across an interaction interval: energize from a phasor
//! snapshot behind Thévenin sources, pre-roll until the waveforms settle,
//! then advance one phasor step at a time while returning extracted boundary
//! injections, monitored voltages, and motor events. Both the in-process and
//! the socket transport host exactly this type, so the arithmetic is
//! identical regardless of where the engine runs.

use std::collections::BTreeMap;

use crate::emt::{EmtCircuit, EmtStallEvent, Spim, SpimParams};
use crate::net::{BusId, NetworkModel, Phase, SequencePhasor, ThreePhasePhasor};
use crate::{Cx, Error, Result};

/// A scheduled shunt fault in the point-on-wave model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmtFault {
    pub bus: BusId,
    pub phase: Phase,
    /// Fault resistance, pu.
    pub r: f64,
    pub t_on: f64,
    pub t_off: f64,
}

/// Everything needed to construct the detailed-side engine. The coordinator
/// builds one of these and either instantiates the engine directly or ships
/// the same definition to a server thread.
#[derive(Debug, Clone)]
pub struct EmtSideConfig {
    pub net: NetworkModel,
    /// Per-phase shunt load admittance by bus, pu.
    pub loads: Vec<(BusId, Cx)>,
    pub motors: Vec<SpimParams>,
    /// Buses carrying boundary sources (the dummy buses of the split).
    pub ports: Vec<BusId>,
    /// Buses whose extracted voltages ride back on every reply.
    pub monitored: Vec<BusId>,
    pub faults: Vec<EmtFault>,
    pub dt: f64,
    pub f0: f64,
    /// Absolute time of the first engine sample (pre-roll included).
    pub t_start: f64,
    /// Pre-roll duration before the first exchange, s.
    pub warmup: f64,
    /// Largest tolerated deviation between the settled waveforms and the
    /// phasor snapshot they were initialized from, pu.
    pub warmup_tolerance: f64,
}

/// Per-port data for energization: the Thévenin looking into the other
/// side, and the open-circuit voltage driving the source.
#[derive(Debug, Clone, PartialEq)]
pub struct PortBoundary {
    /// Dummy bus the source sits on.
    pub bus: BusId,
    pub z1: Cx,
    pub z2: Cx,
    /// `None` when the zero-sequence port is open.
    pub z0: Option<Cx>,
    pub v_oc: ThreePhasePhasor,
}

/// What comes back from one advanced interval (or from energization).
#[derive(Debug, Clone)]
pub struct IntervalReply {
    /// Absolute time of the newest solved sample.
    pub t: f64,
    /// Extracted sequence currents injected by each boundary source into
    /// the detailed network, in port order.
    pub injections: Vec<(BusId, SequencePhasor)>,
    /// Extracted phase voltages at the monitored buses.
    pub monitored: Vec<(BusId, ThreePhasePhasor)>,
    pub stalls: Vec<EmtStallEvent>,
    /// (motor id, running) in declaration order.
    pub motor_status: Vec<(String, bool)>,
    /// Raw per-sample monitored voltages for the interval, oldest first,
    /// one `[a, b, c]` triple of sample vectors per monitored bus. Empty
    /// unless waveform capture was requested.
    pub waveforms: Vec<(BusId, [Vec<f64>; 3])>,
}

pub struct EmtEngine {
    circuit: EmtCircuit,
    buses: Vec<BusId>,
    ports: Vec<BusId>,
    monitored: Vec<BusId>,
    warmup: f64,
    warmup_tolerance: f64,
    snapshot: Vec<(BusId, ThreePhasePhasor)>,
    halted: bool,
}

impl EmtEngine {
    pub fn new(cfg: &EmtSideConfig) -> Result<EmtEngine> {
        if cfg.warmup < 1.0 / cfg.f0 {
            return Err(Error::topology(format!(
                "engine pre-roll {} s is shorter than one fundamental cycle",
                cfg.warmup
            )));
        }
        // Motors get placeholder states here; energization re-derives them
        // from the actual snapshot voltages.
        let motors = cfg
            .motors
            .iter()
            .map(|p| {
                Spim::init_steady(p.clone(), Cx::new(1.0, 0.0), cfg.t_start, cfg.dt, cfg.f0)
            })
            .collect();
        let mut circuit = EmtCircuit::new(
            &cfg.net,
            &cfg.loads,
            motors,
            &cfg.ports,
            cfg.dt,
            cfg.f0,
            cfg.t_start,
        )?;
        for f in &cfg.faults {
            circuit.schedule_fault(f.bus, f.phase, f.r, f.t_on, f.t_off)?;
        }
        Ok(EmtEngine {
            circuit,
            buses: cfg.net.buses().iter().map(|b| b.id).collect(),
            ports: cfg.ports.clone(),
            monitored: cfg.monitored.clone(),
            warmup: cfg.warmup,
            warmup_tolerance: cfg.warmup_tolerance,
            snapshot: Vec::new(),
            halted: false,
        })
    }

    /// Set up boundary sources and load every state variable from the phasor
    /// snapshot, then pre-roll until the first exchange instant. Returns the
    /// largest deviation between the settled extracted voltages and the
    /// snapshot, plus the first injection frame.
    pub fn energize(
        &mut self,
        snapshot: &[(BusId, ThreePhasePhasor)],
        ports: &[PortBoundary],
        capture: bool,
    ) -> Result<(f64, IntervalReply)> {
        if ports.len() != self.ports.len() {
            return Err(Error::topology(format!(
                "energization carries {} ports, engine has {}",
                ports.len(),
                self.ports.len()
            )));
        }
        for p in ports {
            self.circuit
                .set_boundary_thevenin(p.bus, p.z1, p.z2, p.z0)?;
            self.circuit.set_boundary_target(p.bus, p.v_oc, 0.0)?;
        }
        let by_bus: BTreeMap<BusId, ThreePhasePhasor> =
            snapshot.iter().cloned().collect();
        for b in &self.buses {
            if !by_bus.contains_key(b) {
                return Err(Error::topology(format!(
                    "phasor snapshot is missing bus {b}"
                )));
            }
        }
        self.circuit
            .init_from_phasors(&|b| by_bus[&b])?;
        self.snapshot = snapshot.to_vec();

        let n = (self.warmup / self.circuit.dt).round() as u64;
        for _ in 0..n {
            self.circuit.step()?;
        }
        let residual = self.settle_residual()?;
        if residual > self.warmup_tolerance {
            return Err(Error::Stage {
                t: self.circuit.time(),
                msg: format!(
                    "point-on-wave pre-roll did not settle: residual {residual:.3e} \
                     exceeds {:.3e}",
                    self.warmup_tolerance
                ),
            });
        }
        let reply = self.collect_reply(0, capture)?;
        Ok((residual, reply))
    }

    /// Largest per-phase deviation between the extracted voltages and the
    /// snapshot the engine was initialized from.
    fn settle_residual(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (b, want) in &self.snapshot {
            let got = self
                .circuit
                .bus_voltage_phasors(*b)?
                .ok_or_else(|| Error::topology("extraction window not yet full"))?;
            worst = worst.max((got - *want).max_norm());
        }
        Ok(worst)
    }

    /// Ramp the boundary sources toward `targets` over `ramp` seconds while
    /// stepping `n` samples, then extract.
    pub fn advance(
        &mut self,
        targets: &[(BusId, ThreePhasePhasor)],
        ramp: f64,
        n: u32,
        capture: bool,
    ) -> Result<IntervalReply> {
        if self.halted {
            return Err(Error::Stage {
                t: self.circuit.time(),
                msg: "engine advanced after halt".into(),
            });
        }
        for (bus, v) in targets {
            self.circuit.set_boundary_target(*bus, *v, ramp)?;
        }
        for _ in 0..n {
            self.circuit.step()?;
        }
        self.collect_reply(n as usize, capture)
    }

    /// Hold the boundary sources at their present parameters and advance.
    pub fn advance_frozen(&mut self, n: u32, capture: bool) -> Result<IntervalReply> {
        if self.halted {
            return Err(Error::Stage {
                t: self.circuit.time(),
                msg: "engine advanced after halt".into(),
            });
        }
        for bus in self.ports.clone() {
            self.circuit.freeze_boundary(bus)?;
        }
        for _ in 0..n {
            self.circuit.step()?;
        }
        self.collect_reply(n as usize, capture)
    }

    /// Swap the boundary source impedances, e.g. after an external-side
    /// topology change. Open-circuit targets are untouched.
    pub fn set_port_impedances(
        &mut self,
        ports: &[(BusId, Cx, Cx, Option<Cx>)],
    ) -> Result<()> {
        for (bus, z1, z2, z0) in ports {
            self.circuit.set_boundary_thevenin(*bus, *z1, *z2, *z0)?;
        }
        Ok(())
    }

    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn time(&self) -> f64 {
        self.circuit.time()
    }

    fn collect_reply(&mut self, interval_samples: usize, capture: bool) -> Result<IntervalReply> {
        let mut injections = Vec::with_capacity(self.ports.len());
        for &b in &self.ports {
            let i = self.circuit.source_injection_sequence(b)?.ok_or_else(|| {
                Error::topology("extraction window not yet full at boundary")
            })?;
            injections.push((b, i));
        }
        let mut monitored = Vec::with_capacity(self.monitored.len());
        for &b in &self.monitored {
            let v = self
                .circuit
                .bus_voltage_phasors(b)?
                .ok_or_else(|| Error::topology("extraction window not yet full"))?;
            monitored.push((b, v));
        }
        let stalls = self.circuit.take_stall_events();
        let motor_status = self
            .circuit
            .motors
            .iter()
            .map(|m| {
                (
                    m.params.id.clone(),
                    m.status == crate::emt::SpimStatus::Running,
                )
            })
            .collect();
        let mut waveforms = Vec::new();
        if capture && interval_samples > 0 {
            for &b in &self.monitored {
                let mut tri: [Vec<f64>; 3] = Default::default();
                for (pi, ph) in Phase::ALL.iter().enumerate() {
                    let (w, _) = self.circuit.voltage_window(b, *ph)?;
                    let n = interval_samples.min(w.len());
                    tri[pi] = w[w.len() - n..].to_vec();
                }
                waveforms.push((b, tri));
            }
        }
        Ok(IntervalReply {
            t: self.circuit.time(),
            injections,
            monitored,
            stalls,
            motor_status,
            waveforms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Branch, Bus, BusKind, NetworkModel, Side};

    fn two_bus_cfg() -> (EmtSideConfig, ThreePhasePhasor, ThreePhasePhasor, Cx) {
        // Dummy bus 1 carries the source; bus 2 is load.
        let z_br = Cx::new(0.01, 0.1);
        let y_load = Cx::new(1.5, -0.5);
        let net = NetworkModel::new(
            vec![
                Bus {
                    id: BusId(1),
                    base_kv: 13.8,
                    kind: BusKind::Dummy,
                    side: Side::Detailed,
                    shunt1: Cx::new(0.0, 0.0),
                    shunt0: Cx::new(0.0, 0.0),
                },
                Bus {
                    id: BusId(2),
                    base_kv: 13.8,
                    kind: BusKind::Load,
                    side: Side::Detailed,
                    shunt1: Cx::new(0.0, 0.0),
                    shunt0: Cx::new(0.0, 0.0),
                },
            ],
            vec![Branch::line(BusId(1), BusId(2), z_br)],
            100.0,
        )
        .unwrap();
        // Steady state for a stiff source 1∠0 behind z_th = j0.02.
        let z_th = Cx::new(0.0, 0.02);
        let e = Cx::new(1.0, 0.0);
        // v2 from the divider e -> z_th + z_br -> load 1/y.
        let z_load = 1.0 / y_load;
        let v2 = e * z_load / (z_th + z_br + z_load);
        let i = (e - v2) / (z_th + z_br);
        let v1 = v2 + z_br * i;
        let cfg = EmtSideConfig {
            net,
            loads: vec![(BusId(2), y_load)],
            motors: vec![],
            ports: vec![BusId(1)],
            monitored: vec![BusId(2)],
            faults: vec![],
            dt: 2e-5,
            f0: 60.0,
            t_start: 0.4,
            warmup: 0.1,
            warmup_tolerance: 0.01,
        };
        (
            cfg,
            ThreePhasePhasor::balanced(v1),
            ThreePhasePhasor::balanced(v2),
            z_th,
        )
    }

    #[test]
    fn energize_settles_on_consistent_snapshot() {
        let (cfg, v1, v2, z_th) = two_bus_cfg();
        let mut eng = EmtEngine::new(&cfg).unwrap();
        let e = Cx::new(1.0, 0.0);
        let (residual, reply) = eng
            .energize(
                &[(BusId(1), v1), (BusId(2), v2)],
                &[PortBoundary {
                    bus: BusId(1),
                    z1: z_th,
                    z2: z_th,
                    z0: Some(z_th),
                    v_oc: ThreePhasePhasor::balanced(e),
                }],
                false,
            )
            .unwrap();
        assert!(residual < 1e-4, "residual {residual:.3e}");
        assert!((reply.t - 0.5).abs() < 1e-9);
        // Injected current should match the divider current.
        let z_br = Cx::new(0.01, 0.1);
        let z_load = 1.0 / Cx::new(1.5, -0.5);
        let v2c = e * z_load / (z_th + z_br + z_load);
        let want = (e - v2c) / (z_th + z_br);
        assert!(
            (reply.injections[0].1.s1 - want).norm() < 1e-4,
            "injection {} vs {}",
            reply.injections[0].1.s1,
            want
        );
        // Monitored bus rides along.
        assert_eq!(reply.monitored[0].0, BusId(2));
        assert!((reply.monitored[0].1.a - v2c).norm() < 1e-4);
    }

    #[test]
    fn inconsistent_snapshot_fails_the_settle_check() {
        let (cfg, v1, v2, z_th) = two_bus_cfg();
        let mut eng = EmtEngine::new(&cfg).unwrap();
        // Open-circuit target far from the snapshot's operating point.
        let err = eng.energize(
            &[(BusId(1), v1), (BusId(2), v2)],
            &[PortBoundary {
                bus: BusId(1),
                z1: z_th,
                z2: z_th,
                z0: Some(z_th),
                v_oc: ThreePhasePhasor::balanced(Cx::new(1.3, 0.0)),
            }],
            false,
        );
        assert!(matches!(err, Err(Error::Stage { .. })), "{err:?}");
    }

    #[test]
    fn advance_tracks_a_target_step() {
        let (cfg, v1, v2, z_th) = two_bus_cfg();
        let mut eng = EmtEngine::new(&cfg).unwrap();
        let e = Cx::new(1.0, 0.0);
        eng.energize(
            &[(BusId(1), v1), (BusId(2), v2)],
            &[PortBoundary {
                bus: BusId(1),
                z1: z_th,
                z2: z_th,
                z0: Some(z_th),
                v_oc: ThreePhasePhasor::balanced(e),
            }],
            false,
        )
        .unwrap();
        // Step the open-circuit voltage down 5% over one phasor interval,
        // then hold for a couple of cycles so the window clears the ramp.
        let e2 = Cx::new(0.95, 0.0);
        let t2 = ThreePhasePhasor::balanced(e2);
        let n = (0.005f64 / 2e-5).round() as u32;
        eng.advance(&[(BusId(1), t2)], 0.005, n, false).unwrap();
        let mut last = None;
        for _ in 0..10 {
            last = Some(eng.advance(&[(BusId(1), t2)], 0.0, n, false).unwrap());
        }
        let reply = last.unwrap();
        let z_br = Cx::new(0.01, 0.1);
        let z_load = 1.0 / Cx::new(1.5, -0.5);
        let v2c = e2 * z_load / (z_th + z_br + z_load);
        assert!(
            (reply.monitored[0].1.a - v2c).norm() < 1e-3,
            "settled at {} vs {}",
            reply.monitored[0].1.a,
            v2c
        );
    }

    #[test]
    fn waveform_capture_covers_the_interval() {
        let (cfg, v1, v2, z_th) = two_bus_cfg();
        let mut eng = EmtEngine::new(&cfg).unwrap();
        eng.energize(
            &[(BusId(1), v1), (BusId(2), v2)],
            &[PortBoundary {
                bus: BusId(1),
                z1: z_th,
                z2: z_th,
                z0: Some(z_th),
                v_oc: ThreePhasePhasor::balanced(Cx::new(1.0, 0.0)),
            }],
            false,
        )
        .unwrap();
        let n = (0.005f64 / 2e-5).round() as u32;
        let reply = eng.advance_frozen(n, true).unwrap();
        assert_eq!(reply.waveforms.len(), 1);
        let (bus, tri) = &reply.waveforms[0];
        assert_eq!(*bus, BusId(2));
        for ph in tri {
            assert_eq!(ph.len(), n as usize);
        }
        // The newest captured sample must agree with the instantaneous value.
        let inst = eng
            .circuit
            .instantaneous_voltage(BusId(2), Phase::A)
            .unwrap();
        assert!((tri[0].last().unwrap() - inst).abs() == 0.0);
    }
}

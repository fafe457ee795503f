//! Orchestration of the three-stage workflow.
//!
//! A run starts with the whole network as a phasor problem (stage 1), splits
//! it into a detailed and an external part once co-simulation begins
//! (stage 2), and — if enabled — reunites the two phasor subsystems after
//! the disturbance has settled (stage 3). During stage 2 the detailed part
//! lives twice: as the point-on-wave engine, which is authoritative, and as
//! a shadow phasor subsystem kept in step so the switch-back criterion can
//! compare the two and the reunited system starts from a consistent state.

pub mod engine;
pub mod transport;

use std::collections::BTreeMap;
use std::time::Instant;

pub use engine::{EmtFault, EmtSideConfig, IntervalReply, PortBoundary};
pub use transport::{spawn_loopback_server, DetailedLink, TransportKind};

use crate::boundary::{refresh_open_circuit, thevenin_external, ExternalThevenin};
use crate::emt::SpimParams;
use crate::net::{
    build_sequence, phase_to_seq, split_network, BranchStatus, BusId, NetworkModel, Phase,
    Representation, Sequence, SequencePhasor, Side, ThreePhasePhasor, ZeroSeqConn,
};
use crate::phasor::{
    solve_with_voltage_loads, AcMotor, AcMotorParams, ConstZLoad, FaultSpec, Link, Machine,
    MachineParams, MateSystem, MotorStatus, NortonEquivalent, PfBusKind, PhasorSubsystem,
    PowerFlowProblem, VoltageSolution,
};
use crate::report::{SimulationResult, WaveformDump};
use crate::{Cx, Error, Result};

/// Which workflow to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulationMode {
    /// Whole network as a positive-sequence phasor problem, no split.
    TsOnly,
    /// Split at the boundary and co-simulate to the end, never switching.
    HybridNoSwitch,
    /// Split, co-simulate, and hand back to phasors when the controller
    /// declares the transient over.
    HybridSwitch,
    /// Detailed network alone under a frozen boundary equivalent.
    EmtOnly,
}

impl SimulationMode {
    pub fn parse(s: &str) -> Option<SimulationMode> {
        match s {
            "ts_only" => Some(SimulationMode::TsOnly),
            "hybrid_no_switch" => Some(SimulationMode::HybridNoSwitch),
            "hybrid_switch" => Some(SimulationMode::HybridSwitch),
            "emt_only" => Some(SimulationMode::EmtOnly),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SimulationMode::TsOnly => "ts_only",
            SimulationMode::HybridNoSwitch => "hybrid_no_switch",
            SimulationMode::HybridSwitch => "hybrid_switch",
            SimulationMode::EmtOnly => "emt_only",
        }
    }
}

/// Knobs that vary per invocation rather than per case.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: SimulationMode,
    /// Drive the shadow subsystem's discrete states from engine events
    /// instead of letting its own triggers act during co-simulation.
    pub reconcile: bool,
    pub transport: TransportKind,
    /// Capture raw point-on-wave samples at the monitored detailed buses.
    pub capture_waveforms: bool,
}

impl RunOptions {
    pub fn new(mode: SimulationMode) -> RunOptions {
        RunOptions {
            mode,
            reconcile: true,
            transport: TransportKind::InProcess,
            capture_waveforms: false,
        }
    }
}

/// Timing frame of a run.
#[derive(Debug, Clone)]
pub struct StagePlan {
    /// When co-simulation begins (hybrid modes), s.
    pub t_hybrid_start: f64,
    pub t_end: f64,
    /// Phasor step, also the exchange interval, s.
    pub dt_ts: f64,
    /// Point-on-wave step, s.
    pub dt_emt: f64,
    /// Engine pre-roll before the first exchange, s.
    pub warmup: f64,
    /// Largest tolerated settle residual after the pre-roll, pu.
    pub warmup_tolerance: f64,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.dt_ts > 0.0) {
            errs.push("dt_ts must be positive".into());
        }
        if !(self.dt_emt > 0.0) {
            errs.push("dt_emt must be positive".into());
        }
        if self.dt_ts > 0.0 && self.dt_emt > 0.0 {
            let ratio = self.dt_ts / self.dt_emt;
            if (ratio - ratio.round()).abs() > 1e-6 || ratio < 1.0 {
                errs.push(format!(
                    "dt_ts must be an integer multiple of dt_emt (ratio {ratio})"
                ));
            }
        }
        if self.t_end <= 0.0 {
            errs.push("t_end must be positive".into());
        }
        if self.t_hybrid_start < 0.0 || self.t_hybrid_start >= self.t_end {
            errs.push("t_hybrid_start must lie inside [0, t_end)".into());
        }
        if self.dt_ts > 0.0 {
            for (label, t) in [
                ("t_hybrid_start", self.t_hybrid_start),
                ("t_end", self.t_end),
            ] {
                let k = t / self.dt_ts;
                if (k - k.round()).abs() > 1e-6 {
                    errs.push(format!("{label} must fall on the phasor step grid"));
                }
            }
        }
        if self.warmup <= 0.0 {
            errs.push("warmup must be positive".into());
        }
        if self.t_hybrid_start > 0.0 && self.warmup > self.t_hybrid_start + 1e-12 {
            errs.push("warmup cannot reach before t = 0".into());
        }
        if !(self.warmup_tolerance > 0.0) {
            errs.push("warmup_tolerance must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Exchange sub-steps per phasor step.
    pub fn substeps(&self) -> u32 {
        (self.dt_ts / self.dt_emt).round() as u32
    }
}

/// Settings of the switch-back decision logic.
#[derive(Debug, Clone)]
pub struct SwitchControllerConfig {
    /// Quiet time required after the last clearing action, s.
    pub t_delay: f64,
    /// Per-step change of the detailed boundary voltage below which the
    /// waveform is considered settled, pu.
    pub eps_rate: f64,
    /// Boundary disagreement between the detailed and external solutions
    /// below which the representations are interchangeable, pu.
    pub eps_dv: f64,
    /// How long the disagreement must stay below `eps_dv`, fundamental
    /// cycles. Meaningful range 2–5.
    pub hold_cycles: f64,
}

impl Default for SwitchControllerConfig {
    fn default() -> Self {
        SwitchControllerConfig {
            t_delay: 0.2,
            eps_rate: 0.005,
            eps_dv: 0.005,
            hold_cycles: 2.0,
        }
    }
}

impl SwitchControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.t_delay < 0.0 {
            errs.push("switch delay must be non-negative".into());
        }
        if !(self.eps_rate > 0.0) {
            errs.push("rate threshold must be positive".into());
        }
        if !(self.eps_dv > 0.0) {
            errs.push("voltage-mismatch threshold must be positive".into());
        }
        if !(2.0..=5.0).contains(&self.hold_cycles) {
            errs.push(format!(
                "hold_cycles {} outside the supported range 2–5",
                self.hold_cycles
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerPhase {
    /// Waiting out the post-clearing delay.
    WaitingDelay,
    /// Waiting for the boundary waveform to stop moving.
    WatchingRate,
    /// Counting consecutive steps of representation agreement.
    WatchingDv,
}

/// Decides when stage 2 may hand back to the pure phasor solver. Armed when
/// co-simulation starts; any fault application re-arms it.
#[derive(Debug, Clone)]
pub struct SwitchController {
    cfg: SwitchControllerConfig,
    f0: f64,
    phase: ControllerPhase,
    t_clear: f64,
    fault_active: bool,
    hold_steps: u32,
    decided: Option<f64>,
}

impl SwitchController {
    pub fn new(cfg: SwitchControllerConfig, f0: f64, t_arm: f64) -> Result<SwitchController> {
        cfg.validate()?;
        if !(f0 > 0.0) {
            return Err(Error::Validation(vec![
                "fundamental frequency must be positive".into(),
            ]));
        }
        Ok(SwitchController {
            cfg,
            f0,
            phase: ControllerPhase::WaitingDelay,
            t_clear: t_arm,
            fault_active: false,
            hold_steps: 0,
            decided: None,
        })
    }

    pub fn phase(&self) -> ControllerPhase {
        self.phase
    }

    pub fn decision(&self) -> Option<f64> {
        self.decided
    }

    pub fn fault_applied(&mut self) {
        self.fault_active = true;
        self.phase = ControllerPhase::WaitingDelay;
        self.hold_steps = 0;
    }

    pub fn fault_cleared(&mut self, t: f64) {
        self.fault_active = false;
        self.t_clear = t;
        self.phase = ControllerPhase::WaitingDelay;
        self.hold_steps = 0;
    }

    /// Feed one step's observations: the largest per-step change of the
    /// detailed boundary voltage and the largest detailed/external
    /// disagreement, both pu over all ports and phases. Returns true on the
    /// step that decides the switch; the decision is latched.
    pub fn observe(&mut self, t: f64, rate: f64, dv: f64, dt: f64) -> bool {
        if self.decided.is_some() || self.fault_active {
            return false;
        }
        if self.phase == ControllerPhase::WaitingDelay
            && t + 1e-9 >= self.t_clear + self.cfg.t_delay
        {
            self.phase = ControllerPhase::WatchingRate;
        }
        if self.phase == ControllerPhase::WatchingRate && rate < self.cfg.eps_rate {
            self.phase = ControllerPhase::WatchingDv;
            self.hold_steps = 0;
        }
        if self.phase == ControllerPhase::WatchingDv {
            if dv < self.cfg.eps_dv {
                self.hold_steps += 1;
                let held = self.hold_steps as f64 * dt;
                if held + 1e-9 >= self.cfg.hold_cycles / self.f0 {
                    self.decided = Some(t);
                    return true;
                }
            } else {
                self.hold_steps = 0;
            }
        }
        false
    }
}

/// What a discrete signal asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    MotorStall,
    MotorRun,
    Breaker,
    Control,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<EventKind> {
        match s {
            "motor_stall" | "stall" => Some(EventKind::MotorStall),
            "motor_run" | "run" => Some(EventKind::MotorRun),
            "breaker" => Some(EventKind::Breaker),
            "control" => Some(EventKind::Control),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EventKind::MotorStall => "stall",
            EventKind::MotorRun => "run",
            EventKind::Breaker => "breaker",
            EventKind::Control => "control",
        }
    }
}

/// A discrete state change carried across the boundary (engine → shadow)
/// or scheduled in the case.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSignal {
    /// When the originating model registered it, s.
    pub t: f64,
    pub kind: EventKind,
    /// Name in the shared device namespace; unresolvable targets fail the
    /// run loudly.
    pub target: String,
    /// Payload; breakers read it as closed (≥ 0.5) or open.
    pub value: f64,
}

/// Pull every signal due at or before `t_boundary` out of `pending`,
/// ordered by (time, target); queue order breaks remaining ties so a later
/// writer lands last.
pub fn due_signals(pending: &mut Vec<EventSignal>, t_boundary: f64) -> Vec<EventSignal> {
    let mut due = Vec::new();
    let mut keep = Vec::new();
    for s in pending.drain(..) {
        if s.t <= t_boundary + 1e-9 {
            due.push(s);
        } else {
            keep.push(s);
        }
    }
    *pending = keep;
    due.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.target.cmp(&b.target))
    });
    due
}

/// Apply one signal to a phasor subsystem. Returns whether anything that
/// affects the network matrix changed; the caller rebuilds once per batch.
pub fn apply_signal(sub: &mut PhasorSubsystem, sig: &EventSignal) -> Result<bool> {
    match sig.kind {
        EventKind::MotorStall | EventKind::MotorRun => {
            let m = sub
                .motors
                .iter_mut()
                .find(|m| m.params.id == sig.target)
                .ok_or_else(|| Error::UnknownTarget(format!("motor {}", sig.target)))?;
            let before = m.status;
            if sig.kind == EventKind::MotorStall {
                m.apply_override(false);
            } else {
                m.apply_override(true);
                m.status = MotorStatus::Running;
            }
            Ok(m.status != before)
        }
        EventKind::Breaker => {
            let (a, b) = parse_branch_target(&sig.target)?;
            let want = if sig.value >= 0.5 {
                BranchStatus::Closed
            } else {
                BranchStatus::Open
            };
            let br = sub
                .net
                .branches_mut()
                .iter_mut()
                .find(|br| {
                    (br.from == a && br.to == b) || (br.from == b && br.to == a)
                })
                .ok_or_else(|| Error::UnknownTarget(format!("branch {}", sig.target)))?;
            let changed = br.status != want;
            br.status = want;
            Ok(changed)
        }
        EventKind::Control => Ok(false),
    }
}

fn parse_branch_target(s: &str) -> Result<(BusId, BusId)> {
    let mut it = s.split('-');
    let a = it.next().and_then(|x| x.parse::<u32>().ok());
    let b = it.next().and_then(|x| x.parse::<u32>().ok());
    match (a, b, it.next()) {
        (Some(a), Some(b), None) => Ok((BusId(a), BusId(b))),
        _ => Err(Error::UnknownTarget(format!(
            "branch target '{s}' (expected from-to)"
        ))),
    }
}

/// A constant-power load anchored to constant impedance at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticLoad {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

/// One single-phase motor group, defined once: the point-on-wave machine
/// parameters plus the trigger settings of its phasor companion. The
/// companion's load curve is derived from the machine so both sides draw
/// the same power at the solved operating point.
#[derive(Debug, Clone)]
pub struct MotorGroup {
    pub spim: SpimParams,
    /// Stall trigger voltage of the phasor companion, pu.
    pub v_stall: f64,
    /// Cycles below the trigger before the companion latches.
    pub stall_cycles: f64,
    /// Voltage floor of the companion's load curve, pu.
    pub v_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    ThreePhase,
    SinglePhase(Phase),
}

#[derive(Debug, Clone)]
pub struct FaultEvent {
    pub bus: BusId,
    pub kind: FaultKind,
    /// Fault impedance, pu; the point-on-wave model uses its real part.
    pub z: Cx,
    pub t_on: f64,
    pub t_off: f64,
}

/// A fully assembled study: network, devices, disturbances, and plan.
#[derive(Debug, Clone)]
pub struct StudyCase {
    pub f0: f64,
    pub net: NetworkModel,
    pub machines: Vec<MachineParams>,
    pub static_loads: Vec<StaticLoad>,
    pub motor_groups: Vec<MotorGroup>,
    pub faults: Vec<FaultEvent>,
    /// Signals scheduled in the case, delivered when their time arrives.
    pub signals: Vec<EventSignal>,
    /// Boundary buses (external side) defining the split.
    pub boundary: Vec<BusId>,
    /// Buses reported in the time series.
    pub monitor: Vec<BusId>,
    pub plan: StagePlan,
    pub controller: SwitchControllerConfig,
}

/// The phasor companion of a motor group, anchored at the solved voltage
/// `vm` so the group draws identical power in both domains at t = 0.
pub fn derive_phasor_motor(g: &MotorGroup, vm: f64) -> Result<AcMotorParams> {
    let s_at = |v: f64| -> Result<Cx> {
        g.spim
            .running_power_system(v)
            .map(|s| s / 3.0)
            .ok_or_else(|| {
                Error::topology(format!(
                    "motor group {} cannot run at {v:.3} pu; check its torque \
                     and rating parameters",
                    g.spim.id
                ))
            })
    };
    let s_nom = s_at(1.0)?;
    let s_lo = s_at(0.95)?;
    let s_hi = s_at(1.05)?;
    let q_nom = s_nom.im;
    if q_nom.abs() < 1e-12 {
        return Err(Error::topology(format!(
            "motor group {} draws no reactive power at nominal voltage",
            g.spim.id
        )));
    }
    let beta1 = (s_hi.im - s_lo.im) / (0.1 * q_nom);
    let beta2 = (s_hi.im + s_lo.im - 2.0 * q_nom) / (0.005 * q_nom);
    let s_op = s_at(vm)?;
    let dv = vm - 1.0;
    let shape = 1.0 + beta1 * dv + beta2 * dv * dv;
    if shape <= 0.0 {
        return Err(Error::topology(format!(
            "motor group {}: reactive curve vanishes at {vm:.3} pu",
            g.spim.id
        )));
    }
    Ok(AcMotorParams {
        id: g.spim.id.clone(),
        bus: g.spim.bus,
        phase: Some(g.spim.phase),
        p0: s_op.re,
        q0: s_op.im / shape,
        beta1,
        beta2,
        y_stall: g.spim.locked_rotor_admittance_system(),
        v_floor: g.v_floor,
        v_stall: g.v_stall,
        stall_cycles: g.stall_cycles,
    })
}

/// Devices and operating point produced from the load-flow solution.
struct Initialized {
    /// Solved bus voltages in network order.
    v: Vec<Cx>,
    machines: Vec<Machine>,
    motors: Vec<AcMotor>,
    loads: Vec<ConstZLoad>,
}

fn initialize(case: &StudyCase) -> Result<Initialized> {
    let net = &case.net;
    let n = net.n_buses();
    let y = build_sequence(net, Sequence::Positive);
    let mut kinds = vec![PfBusKind::Pq; n];
    let mut s_sched = vec![Cx::new(0.0, 0.0); n];
    for m in &case.machines {
        let i = net.bus_index(m.bus)?;
        kinds[i] = if m.is_slack {
            PfBusKind::Slack { vm: m.vset }
        } else {
            PfBusKind::Pv { vm: m.vset }
        };
        if !m.is_slack {
            s_sched[i] += Cx::new(m.pgen, 0.0);
        }
    }
    for l in &case.static_loads {
        s_sched[net.bus_index(l.bus)?] -= Cx::new(l.p, l.q);
    }
    let group_idx: Vec<usize> = case
        .motor_groups
        .iter()
        .map(|g| net.bus_index(g.spim.bus))
        .collect::<Result<Vec<_>>>()?;
    let problem = PowerFlowProblem { y, kinds, s_sched };
    let groups = &case.motor_groups;
    let sol = solve_with_voltage_loads(&problem, &|vm: &[f64]| {
        let mut extra = vec![Cx::new(0.0, 0.0); n];
        for (g, &i) in groups.iter().zip(&group_idx) {
            let v = vm[i].clamp(0.7, 1.3);
            let s = g
                .spim
                .running_power_system(v)
                .or_else(|| g.spim.running_power_system(1.0))
                .unwrap_or(Cx::new(0.0, 0.0));
            extra[i] -= s / 3.0;
        }
        extra
    })?;

    let mut machines = Vec::with_capacity(case.machines.len());
    for mp in &case.machines {
        let i = net.bus_index(mp.bus)?;
        let mut s_gen = sol.s_inj[i];
        for l in &case.static_loads {
            if l.bus == mp.bus {
                s_gen += Cx::new(l.p, l.q);
            }
        }
        for (g, &gi) in groups.iter().zip(&group_idx) {
            if gi == i {
                if let Some(s) = g.spim.running_power_system(sol.v[i].norm()) {
                    s_gen += s / 3.0;
                }
            }
        }
        machines.push(Machine::initialize(mp.clone(), sol.v[i], s_gen)?);
    }

    let mut motors = Vec::with_capacity(groups.len());
    for (g, &i) in groups.iter().zip(&group_idx) {
        let params = derive_phasor_motor(g, sol.v[i].norm())?;
        motors.push(AcMotor::new(params));
    }

    let loads = case
        .static_loads
        .iter()
        .map(|l| {
            let i = net.bus_index(l.bus)?;
            Ok(ConstZLoad::anchored(l.bus, l.p, l.q, sol.v[i].norm()))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Initialized {
        v: sol.v,
        machines,
        motors,
        loads,
    })
}

/// Temporary calibration hook; removed once the shipped case is frozen.
#[doc(hidden)]
pub fn debug_initialize(
    case: &StudyCase,
) -> Result<(Vec<Machine>, Vec<AcMotor>, Vec<ConstZLoad>, Vec<Cx>)> {
    let init = initialize(case)?;
    Ok((init.machines, init.motors, init.loads, init.v))
}

/// Tracks which scheduled faults have been applied and cleared.
struct FaultTracker {
    events: Vec<FaultEvent>,
    applied: Vec<bool>,
    cleared: Vec<bool>,
}

impl FaultTracker {
    fn new(events: &[FaultEvent]) -> FaultTracker {
        FaultTracker {
            events: events.to_vec(),
            applied: vec![false; events.len()],
            cleared: vec![false; events.len()],
        }
    }

    /// Indices of faults whose application is due at `t`.
    fn due_on(&mut self, t: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, f) in self.events.iter().enumerate() {
            if !self.applied[i] && f.t_on <= t + 1e-9 {
                self.applied[i] = true;
                out.push(i);
            }
        }
        out
    }

    /// Indices of faults whose clearing is due at `t`.
    fn due_off(&mut self, t: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, f) in self.events.iter().enumerate() {
            if self.applied[i] && !self.cleared[i] && f.t_off <= t + 1e-9 {
                self.cleared[i] = true;
                out.push(i);
            }
        }
        out
    }

    fn any_active(&self) -> bool {
        self.applied
            .iter()
            .zip(&self.cleared)
            .any(|(a, c)| *a && !*c)
    }
}

fn fault_spec_for(kind: FaultKind, z: Cx, rep: Representation) -> Result<FaultSpec> {
    if z.norm() < 1e-12 {
        return Err(Error::topology("fault impedance must be nonzero"));
    }
    let y = Cx::new(1.0, 0.0) / z;
    Ok(match kind {
        FaultKind::ThreePhase => match rep {
            Representation::PositiveSequence => FaultSpec::PosShunt(y),
            _ => FaultSpec::AllPhase(y),
        },
        FaultKind::SinglePhase(p) => match rep {
            Representation::ThreePhase => FaultSpec::SinglePhase(p, y),
            // Aggregate single-sequence view: stand in a balanced shunt of
            // the same admittance, the conservative planning reading.
            Representation::PositiveSequence => FaultSpec::PosShunt(y),
            Representation::ThreeSequence => {
                return Err(Error::topology(
                    "single-phase fault needs the phase-coordinate representation",
                ))
            }
        },
    })
}

fn phase_tag(p: Phase) -> char {
    match p {
        Phase::A => 'a',
        Phase::B => 'b',
        Phase::C => 'c',
    }
}

fn fault_tag(kind: FaultKind) -> String {
    match kind {
        FaultKind::ThreePhase => "abc".into(),
        FaultKind::SinglePhase(p) => phase_tag(p).to_string(),
    }
}

fn event_line(t: f64, source: &str, kind: &str, target: &str, extra: &str) -> String {
    format!("t={t:.9} source={source} kind={kind} target={target}{extra}")
}

/// Column schema plus filled rows.
struct Recorder {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    buses: Vec<BusId>,
    with_abc: bool,
    bus_base: BTreeMap<u32, usize>,
    machine_base: BTreeMap<String, usize>,
    motor_base: BTreeMap<String, usize>,
    stage_col: usize,
}

impl Recorder {
    fn new(case: &StudyCase, mode: SimulationMode) -> Result<Recorder> {
        let with_abc = mode != SimulationMode::TsOnly;
        let mut columns = vec!["time_s".to_string()];
        let mut bus_base = BTreeMap::new();
        let mut buses = Vec::new();
        for &b in &case.monitor {
            let bus = case
                .net
                .bus(b)
                .map_err(|_| Error::UnknownTarget(format!("monitored bus {b}")))?;
            if mode == SimulationMode::EmtOnly && bus.side != Side::Detailed {
                continue;
            }
            bus_base.insert(b.0, columns.len());
            buses.push(b);
            columns.push(format!("v{b}_pos_mag"));
            columns.push(format!("v{b}_pos_ang"));
            if with_abc {
                for ph in ['a', 'b', 'c'] {
                    columns.push(format!("v{b}_{ph}_mag"));
                    columns.push(format!("v{b}_{ph}_ang"));
                }
            }
        }
        let mut machine_base = BTreeMap::new();
        if mode != SimulationMode::EmtOnly {
            for m in &case.machines {
                machine_base.insert(m.id.clone(), columns.len());
                columns.push(format!("gen_{}_delta_rad", m.id));
                columns.push(format!("gen_{}_omega_pu", m.id));
            }
        }
        let mut motor_base = BTreeMap::new();
        for g in &case.motor_groups {
            motor_base.insert(g.spim.id.clone(), columns.len());
            columns.push(format!("motor_{}_status", g.spim.id));
        }
        let stage_col = columns.len();
        columns.push("stage".to_string());
        Ok(Recorder {
            columns,
            rows: Vec::new(),
            buses,
            with_abc,
            bus_base,
            machine_base,
            motor_base,
            stage_col,
        })
    }

    fn blank(&self, t: f64, stage: u8) -> Vec<f64> {
        let mut row = vec![f64::NAN; self.columns.len()];
        row[0] = t;
        row[self.stage_col] = stage as f64;
        row
    }

    fn set_bus(&self, row: &mut [f64], bus: BusId, pos: Cx, abc: Option<&ThreePhasePhasor>) {
        let Some(&base) = self.bus_base.get(&bus.0) else {
            return;
        };
        row[base] = pos.norm();
        row[base + 1] = pos.arg();
        if self.with_abc {
            if let Some(v) = abc {
                for (k, ph) in v.phases().iter().enumerate() {
                    row[base + 2 + 2 * k] = ph.norm();
                    row[base + 3 + 2 * k] = ph.arg();
                }
            }
        }
    }

    fn set_machine(&self, row: &mut [f64], id: &str, delta: f64, omega: f64) {
        if let Some(&base) = self.machine_base.get(id) {
            row[base] = delta;
            row[base + 1] = omega;
        }
    }

    fn set_motor(&self, row: &mut [f64], id: &str, running: bool) {
        if let Some(&base) = self.motor_base.get(id) {
            row[base] = if running { 1.0 } else { 0.0 };
        }
    }

    fn commit(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }
}

/// Where one recorded step's quantities come from.
enum RowSource<'a> {
    /// Stages 1/3 and the ts-only mode: everything from the phasor system.
    Mate(&'a MateSystem),
    /// Stage 2: engine reply for the detailed side, subsystems for the rest.
    Stage2 {
        shadow: &'a MateSystem,
        external: &'a MateSystem,
        reply: &'a IntervalReply,
    },
    /// Engine only.
    Emt(&'a IntervalReply),
}

fn record_row(rec: &mut Recorder, t: f64, stage: u8, src: RowSource<'_>) {
    let mut row = rec.blank(t, stage);
    match src {
        RowSource::Mate(mate) => {
            for &b in &rec.buses {
                for sub in &mate.subs {
                    if sub.net.contains(b) {
                        let i = sub.net.bus_index(b).expect("contains");
                        let pos = sub.v.pos(i);
                        let abc = sub.v.abc(i);
                        rec.set_bus(&mut row, b, pos, Some(&abc));
                        break;
                    }
                }
            }
            for sub in &mate.subs {
                for m in &sub.machines {
                    rec.set_machine(&mut row, &m.params.id, m.state.delta, m.state.omega);
                }
                for m in &sub.motors {
                    rec.set_motor(&mut row, &m.params.id, m.status == MotorStatus::Running);
                }
            }
        }
        RowSource::Stage2 {
            shadow,
            external,
            reply,
        } => {
            for &b in &rec.buses {
                if let Some((_, v)) = reply.monitored.iter().find(|(rb, _)| *rb == b) {
                    rec.set_bus(&mut row, b, phase_to_seq(v).s1, Some(v));
                } else {
                    for mate in [external, shadow] {
                        for sub in &mate.subs {
                            if sub.net.contains(b) {
                                let i = sub.net.bus_index(b).expect("contains");
                                rec.set_bus(&mut row, b, sub.v.pos(i), Some(&sub.v.abc(i)));
                            }
                        }
                    }
                }
            }
            for sub in &external.subs {
                for m in &sub.machines {
                    rec.set_machine(&mut row, &m.params.id, m.state.delta, m.state.omega);
                }
            }
            for (id, running) in &reply.motor_status {
                rec.set_motor(&mut row, id, *running);
            }
        }
        RowSource::Emt(reply) => {
            for (b, v) in &reply.monitored {
                rec.set_bus(&mut row, *b, phase_to_seq(v).s1, Some(v));
            }
            for (id, running) in &reply.motor_status {
                rec.set_motor(&mut row, id, *running);
            }
        }
    }
    rec.commit(row);
}

/// Time-ordered schedule of case signals.
struct SignalSchedule {
    pending: Vec<EventSignal>,
}

impl SignalSchedule {
    fn new(signals: &[EventSignal]) -> SignalSchedule {
        SignalSchedule {
            pending: signals.to_vec(),
        }
    }

    fn due(&mut self, t: f64) -> Vec<EventSignal> {
        due_signals(&mut self.pending, t)
    }
}

/// One boundary port: the external bus it splits at and the dummy bus that
/// replaces it inside the detailed network.
#[derive(Debug, Clone, Copy)]
struct PortPair {
    boundary: BusId,
    dummy: BusId,
}

fn breaker_links(ports: &[PortPair]) -> Vec<Link> {
    ports
        .iter()
        .map(|p| Link::breaker(1, p.boundary, 0, p.dummy))
        .collect()
}

/// Sequence currents flowing from `dummy` into the detailed network,
/// computed from that subsystem's present solution. This is what the
/// boundary source must supply at the instant of separation.
fn crossing_current(sub: &PhasorSubsystem, dummy: BusId) -> Result<SequencePhasor> {
    let di = sub.net.bus_index(dummy)?;
    let v_d = sub.v.seq(di);
    let mut i = SequencePhasor::ZERO;
    for br in sub.net.branches() {
        if !br.is_closed() || br.is_virtual_breaker {
            continue;
        }
        let other = if br.from == dummy {
            br.to
        } else if br.to == dummy {
            br.from
        } else {
            continue;
        };
        let oi = sub.net.bus_index(other)?;
        let v_o = sub.v.seq(oi);
        i.s1 += (v_d.s1 - v_o.s1) / br.z1 + Cx::new(0.0, br.b1 / 2.0) * v_d.s1;
        i.s2 += (v_d.s2 - v_o.s2) / br.z2 + Cx::new(0.0, br.b1 / 2.0) * v_d.s2;
        if br.z0_conn == ZeroSeqConn::Series && br.z0.norm() > 0.0 {
            i.s0 += (v_d.s0 - v_o.s0) / br.z0 + Cx::new(0.0, br.b0 / 2.0) * v_d.s0;
        }
    }
    let bus = sub.net.bus(dummy)?;
    i.s1 += bus.shunt1 * v_d.s1;
    i.s2 += bus.shunt1 * v_d.s2;
    i.s0 += bus.shunt0 * v_d.s0;
    Ok(i)
}

/// Diagonal Norton view of one Thévenin port.
fn port_norton(th: &ExternalThevenin, p: usize, bus: BusId) -> Result<NortonEquivalent> {
    let (z1, z2, z0) = th.port_z(p)?;
    let v = th.v_oc[p];
    let y1 = Cx::new(1.0, 0.0) / z1;
    let y2 = Cx::new(1.0, 0.0) / z2;
    let (y0, i0) = match z0 {
        Some(z0) => {
            let y = Cx::new(1.0, 0.0) / z0;
            (y, y * v.s0)
        }
        None => (Cx::new(0.0, 0.0), Cx::new(0.0, 0.0)),
    };
    Ok(NortonEquivalent {
        bus,
        y1,
        y2,
        y0,
        i: SequencePhasor {
            s1: y1 * v.s1,
            s2: y2 * v.s2,
            s0: i0,
        },
    })
}

/// Current part only, for the per-step refresh.
fn port_norton_current(th: &ExternalThevenin, p: usize) -> Result<SequencePhasor> {
    let (z1, z2, z0) = th.port_z(p)?;
    let v = th.v_oc[p];
    Ok(SequencePhasor {
        s1: v.s1 / z1,
        s2: v.s2 / z2,
        s0: z0.map(|z| v.s0 / z).unwrap_or(Cx::new(0.0, 0.0)),
    })
}

pub fn run_case(case: &StudyCase, opts: &RunOptions) -> Result<SimulationResult> {
    case.plan.validate()?;
    case.controller.validate()?;
    if !(case.f0 > 0.0) {
        return Err(Error::Validation(vec![
            "fundamental frequency must be positive".into(),
        ]));
    }
    for f in &case.faults {
        if f.z.norm() < 1e-12 {
            return Err(Error::Validation(vec![format!(
                "fault at bus {} has zero impedance; give it a small resistance",
                f.bus
            )]));
        }
        if f.t_off <= f.t_on {
            return Err(Error::Validation(vec![format!(
                "fault at bus {} clears before it is applied",
                f.bus
            )]));
        }
    }
    let init = initialize(case)?;
    match opts.mode {
        SimulationMode::TsOnly => run_ts_only(case, opts, init),
        SimulationMode::EmtOnly => run_emt_only(case, opts, init),
        SimulationMode::HybridNoSwitch | SimulationMode::HybridSwitch => {
            run_hybrid(case, opts, init)
        }
    }
}

fn seed_voltages(
    sub: &mut PhasorSubsystem,
    pf: &BTreeMap<u32, Cx>,
    dummy_of: &BTreeMap<u32, u32>,
) {
    let n = sub.net.n_buses();
    let mut vals = Vec::with_capacity(n);
    for b in sub.net.buses() {
        let key = dummy_of.get(&b.id.0).copied().unwrap_or(b.id.0);
        let v = pf.get(&key).copied().unwrap_or(Cx::new(1.0, 0.0));
        vals.push(v);
    }
    sub.v = match sub.rep {
        Representation::PositiveSequence => VoltageSolution::Pos(vals),
        Representation::ThreeSequence => VoltageSolution::Seq(
            vals.into_iter()
                .map(|v| SequencePhasor {
                    s1: v,
                    s2: Cx::new(0.0, 0.0),
                    s0: Cx::new(0.0, 0.0),
                })
                .collect(),
        ),
        Representation::ThreePhase => VoltageSolution::Abc(
            vals.into_iter().map(ThreePhasePhasor::balanced).collect(),
        ),
    };
}

fn run_ts_only(case: &StudyCase, _opts: &RunOptions, init: Initialized) -> Result<SimulationResult> {
    let t_run = Instant::now();
    let mut rec = Recorder::new(case, SimulationMode::TsOnly)?;
    let mut log = Vec::new();
    let mut faults = FaultTracker::new(&case.faults);
    let mut sigs = SignalSchedule::new(&case.signals);

    let mut sub = PhasorSubsystem::new(
        case.net.clone(),
        Representation::PositiveSequence,
        init.machines,
        init.motors,
        init.loads,
    )?;
    let pf: BTreeMap<u32, Cx> = case
        .net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.0, init.v[i]))
        .collect();
    seed_voltages(&mut sub, &pf, &BTreeMap::new());
    let mut mate = MateSystem::single(sub);
    mate.solve_network()?;
    record_row(&mut rec, 0.0, 1, RowSource::Mate(&mate));

    let n_steps = (case.plan.t_end / case.plan.dt_ts).round() as usize;
    run_phasor_span(
        case, &mut mate, &mut rec, &mut log, &mut faults, &mut sigs, 0, n_steps, 1, true,
    )?;

    let total = t_run.elapsed().as_secs_f64();
    Ok(SimulationResult {
        columns: rec.columns,
        rows: rec.rows,
        events: log,
        timings: vec![("stage1".into(), total), ("total".into(), total)],
        waveforms: None,
    })
}

/// Advance a phasor MATE system over `[k0·dt, (k0+n)·dt]`, applying fault
/// transitions and scheduled signals at each step boundary.
#[allow(clippy::too_many_arguments)]
fn run_phasor_span(
    case: &StudyCase,
    mate: &mut MateSystem,
    rec: &mut Recorder,
    log: &mut Vec<String>,
    faults: &mut FaultTracker,
    sigs: &mut SignalSchedule,
    k0: usize,
    n_steps: usize,
    stage: u8,
    allow_faults: bool,
) -> Result<()> {
    let dt = case.plan.dt_ts;
    for k in k0..k0 + n_steps {
        let t_k = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        apply_phasor_fault_transitions(mate, log, faults, t_k, allow_faults, None)?;
        let due = sigs.due(t_k);
        if !due.is_empty() {
            deliver_to_mate(mate, &due, log, t_k)?;
        }
        let report = mate.step(dt, case.f0)?;
        for ev in &report.stall_events {
            log.push(event_line(
                t_next,
                "phasor",
                "stall",
                &ev.motor,
                &format!(" bus={}", ev.bus),
            ));
        }
        record_row(rec, t_next, stage, RowSource::Mate(mate));
    }
    Ok(())
}

/// Apply due fault transitions to the owning phasor subsystem(s). With a
/// controller present (stage 2) the shadow owns detailed-side faults; the
/// external subsystem owns external-side ones.
fn apply_phasor_fault_transitions(
    mate: &mut MateSystem,
    log: &mut Vec<String>,
    faults: &mut FaultTracker,
    t: f64,
    allow_faults: bool,
    mut controller: Option<&mut SwitchController>,
) -> Result<()> {
    for fi in faults.due_on(t) {
        let f = faults.events[fi].clone();
        if !allow_faults {
            return Err(Error::Stage {
                t,
                msg: format!(
                    "fault at bus {} scheduled after the switch back; stopping \
                     for diagnosis",
                    f.bus
                ),
            });
        }
        let sub = mate
            .subs
            .iter_mut()
            .find(|s| s.net.contains(f.bus))
            .ok_or_else(|| Error::UnknownTarget(format!("fault bus {}", f.bus)))?;
        let spec = fault_spec_for(f.kind, f.z, sub.rep)?;
        sub.apply_fault(f.bus, spec)?;
        if let Some(c) = controller.as_deref_mut() {
            c.fault_applied();
        }
        log.push(event_line(
            t,
            "case",
            "fault_on",
            &format!("bus{}", f.bus.0),
            &format!(" phase={} r={:.6}", fault_tag(f.kind), f.z.re),
        ));
    }
    for fi in faults.due_off(t) {
        let f = faults.events[fi].clone();
        let sub = mate
            .subs
            .iter_mut()
            .find(|s| s.net.contains(f.bus))
            .ok_or_else(|| Error::UnknownTarget(format!("fault bus {}", f.bus)))?;
        sub.clear_fault(f.bus)?;
        if let Some(c) = controller.as_deref_mut() {
            c.fault_cleared(f.t_off);
        }
        log.push(event_line(
            t,
            "case",
            "fault_off",
            &format!("bus{}", f.bus.0),
            "",
        ));
    }
    Ok(())
}

fn deliver_to_mate(
    mate: &mut MateSystem,
    due: &[EventSignal],
    log: &mut Vec<String>,
    t: f64,
) -> Result<()> {
    for sig in due {
        let mut done = false;
        let mut changed = false;
        for sub in mate.subs.iter_mut() {
            match apply_signal(sub, sig) {
                Ok(c) => {
                    changed = c;
                    done = true;
                    break;
                }
                Err(Error::UnknownTarget(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            return Err(Error::UnknownTarget(format!(
                "signal target {} matches no device",
                sig.target
            )));
        }
        log.push(event_line(
            t,
            "case",
            sig.kind.label(),
            &sig.target,
            &format!(" value={:.3}", sig.value),
        ));
        if changed {
            for sub in mate.subs.iter_mut() {
                sub.rebuild()?;
            }
            mate.solve_network()?;
        }
    }
    Ok(())
}

/// Everything stage 2 keeps between interaction steps.
struct Stage2 {
    shadow: MateSystem,
    external: MateSystem,
    link: DetailedLink,
    th: ExternalThevenin,
    ports: Vec<PortPair>,
    controller: SwitchController,
    pending: Vec<EventSignal>,
    last_reply: IntervalReply,
    prev_vde: Vec<ThreePhasePhasor>,
    waveforms: Option<WaveformDump>,
}

fn run_hybrid(case: &StudyCase, opts: &RunOptions, init: Initialized) -> Result<SimulationResult> {
    let t_run = Instant::now();
    let switching = opts.mode == SimulationMode::HybridSwitch;
    let mut rec = Recorder::new(case, opts.mode)?;
    let mut log = Vec::new();
    let mut faults = FaultTracker::new(&case.faults);
    let mut sigs = SignalSchedule::new(&case.signals);
    let mut timings: Vec<(String, f64)> = Vec::new();

    let split = split_network(&case.net, &case.boundary)?;
    let ports: Vec<PortPair> = split
        .breakers
        .iter()
        .map(|&(boundary, dummy)| PortPair { boundary, dummy })
        .collect();
    let dummy_of: BTreeMap<u32, u32> = ports
        .iter()
        .map(|p| (p.dummy.0, p.boundary.0))
        .collect();

    // Devices sort by bus side; the split keeps machines external and motor
    // groups detailed in this workflow.
    let side_of = |b: BusId| case.net.bus(b).ok().map(|bus| bus.side);
    for m in &case.machines {
        if side_of(m.bus) != Some(Side::External) {
            return Err(Error::Validation(vec![format!(
                "machine {} sits on the detailed side; hybrid runs keep \
                 synchronous machines external",
                m.id
            )]));
        }
    }
    for g in &case.motor_groups {
        if side_of(g.spim.bus) != Some(Side::Detailed) {
            return Err(Error::Validation(vec![format!(
                "motor group {} sits on the external side; groups belong to \
                 the detailed network",
                g.spim.id
            )]));
        }
    }
    let mut det_loads = Vec::new();
    let mut ext_loads = Vec::new();
    for l in init.loads {
        match side_of(l.bus) {
            Some(Side::Detailed) => det_loads.push(l),
            _ => ext_loads.push(l),
        }
    }
    for f in &case.faults {
        if side_of(f.bus) == Some(Side::Detailed) && f.kind == FaultKind::ThreePhase {
            return Err(Error::Validation(vec![format!(
                "three-phase fault at detailed bus {} is not supported by the \
                 point-on-wave model yet; use per-phase faults",
                f.bus
            )]));
        }
    }

    let mut det_sub = PhasorSubsystem::new(
        split.detailed.clone(),
        Representation::ThreePhase,
        Vec::new(),
        init.motors,
        det_loads,
    )?;
    let mut ext_sub = PhasorSubsystem::new(
        split.external.clone(),
        Representation::ThreePhase,
        init.machines,
        Vec::new(),
        ext_loads,
    )?;
    let pf: BTreeMap<u32, Cx> = case
        .net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.0, init.v[i]))
        .collect();
    seed_voltages(&mut det_sub, &pf, &dummy_of);
    seed_voltages(&mut ext_sub, &pf, &dummy_of);

    let mut mate = MateSystem::new(vec![det_sub, ext_sub], breaker_links(&ports))?;
    mate.solve_network()?;
    record_row(&mut rec, 0.0, 1, RowSource::Mate(&mate));

    // Stage 1: split MATE system from the start.
    let t_stage1 = Instant::now();
    let n1 = (case.plan.t_hybrid_start / case.plan.dt_ts).round() as usize;
    run_phasor_span(
        case, &mut mate, &mut rec, &mut log, &mut faults, &mut sigs, 0, n1, 1, true,
    )?;
    timings.push(("stage1".into(), t_stage1.elapsed().as_secs_f64()));

    // Stage 2.
    let t_stage2 = Instant::now();
    log.push(event_line(
        case.plan.t_hybrid_start,
        "coordinator",
        "stage",
        "2",
        "",
    ));
    let mut s2 = enter_stage2(case, opts, mate, ports, &mut log, &mut faults)?;
    let mut switched_at: Option<f64> = None;
    let mut k2 = 0usize;
    loop {
        let t_k = case.plan.t_hybrid_start + k2 as f64 * case.plan.dt_ts;
        if t_k >= case.plan.t_end - 1e-9 {
            break;
        }
        let t_next = case.plan.t_hybrid_start + (k2 + 1) as f64 * case.plan.dt_ts;
        let decided = interaction_step(
            case, opts, &mut s2, &mut rec, &mut log, &mut faults, &mut sigs, t_k, t_next,
        )?;
        k2 += 1;
        if decided && switching {
            switched_at = Some(t_next);
            break;
        }
    }
    timings.push(("stage2".into(), t_stage2.elapsed().as_secs_f64()));

    let waveforms = s2.waveforms.take();
    if let Some(t_s) = switched_at {
        // Stage 3: reunite and finish as phasors.
        let t_stage3 = Instant::now();
        log.push(event_line(t_s, "coordinator", "stage", "3", ""));
        let mut mate = enter_stage3(s2)?;
        let k_start = (t_s / case.plan.dt_ts).round() as usize;
        let n3 = ((case.plan.t_end - t_s) / case.plan.dt_ts).round() as usize;
        run_phasor_span(
            case, &mut mate, &mut rec, &mut log, &mut faults, &mut sigs, k_start, n3, 3,
            false,
        )?;
        timings.push(("stage3".into(), t_stage3.elapsed().as_secs_f64()));
    } else {
        s2.link.shutdown()?;
    }

    timings.push(("total".into(), t_run.elapsed().as_secs_f64()));
    Ok(SimulationResult {
        columns: rec.columns,
        rows: rec.rows,
        events: log,
        timings,
        waveforms,
    })
}

fn enter_stage2(
    case: &StudyCase,
    opts: &RunOptions,
    mate: MateSystem,
    ports: Vec<PortPair>,
    log: &mut Vec<String>,
    faults: &mut FaultTracker,
) -> Result<Stage2> {
    let t_entry = case.plan.t_hybrid_start;
    let mut subs = mate.subs;
    if subs.len() != 2 {
        return Err(Error::topology("hybrid run expects exactly two subsystems"));
    }
    let mut ext_sub = subs.pop().expect("two subs");
    let det_sub = subs.pop().expect("two subs");

    // Freeze the detailed solution as the engine's starting point.
    let snapshot: Vec<(BusId, ThreePhasePhasor)> = det_sub
        .net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, det_sub.v.abc(i)))
        .collect();

    // The boundary current at separation, from the detailed side's flows.
    let mut i_src0 = Vec::with_capacity(ports.len());
    for p in &ports {
        i_src0.push(crossing_current(&det_sub, p.dummy)?);
    }

    ext_sub.set_representation(Representation::ThreeSequence)?;
    // Attach the port current first so the open-circuit voltage backs out
    // the true unloaded equivalent rather than the loaded node voltage.
    for (p, i) in ports.iter().zip(&i_src0) {
        ext_sub.set_norton(NortonEquivalent {
            bus: p.boundary,
            y1: Cx::new(0.0, 0.0),
            y2: Cx::new(0.0, 0.0),
            y0: Cx::new(0.0, 0.0),
            i: SequencePhasor {
                s1: -i.s1,
                s2: -i.s2,
                s0: -i.s0,
            },
        })?;
    }
    let th = thevenin_external(&ext_sub, &case.boundary)?;

    let monitored: Vec<BusId> = case
        .monitor
        .iter()
        .copied()
        .filter(|b| det_sub.net.contains(*b))
        .collect();
    let cfg = EmtSideConfig {
        net: det_sub.net.clone(),
        loads: det_sub
            .loads
            .iter()
            .map(|l| (l.bus, l.y1))
            .collect(),
        motors: case.motor_groups.iter().map(|g| g.spim.clone()).collect(),
        ports: ports.iter().map(|p| p.dummy).collect(),
        monitored,
        faults: case
            .faults
            .iter()
            .filter(|f| det_sub.net.contains(f.bus))
            .map(|f| match f.kind {
                FaultKind::SinglePhase(p) => EmtFault {
                    bus: f.bus,
                    phase: p,
                    r: f.z.re,
                    t_on: f.t_on,
                    t_off: f.t_off,
                },
                FaultKind::ThreePhase => unreachable!("validated in run_hybrid"),
            })
            .collect(),
        dt: case.plan.dt_emt,
        f0: case.f0,
        t_start: t_entry - case.plan.warmup,
        warmup: case.plan.warmup,
        warmup_tolerance: case.plan.warmup_tolerance,
    };
    let mut link = DetailedLink::start(&cfg, opts.transport)?;

    let port_data: Vec<PortBoundary> = ports
        .iter()
        .enumerate()
        .map(|(p, pair)| {
            let (z1, z2, z0) = th.port_z(p)?;
            Ok(PortBoundary {
                bus: pair.dummy,
                z1,
                z2,
                z0,
                v_oc: th.v_oc_abc(p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (residual, first_reply) =
        link.energize(&snapshot, &port_data, opts.capture_waveforms)?;
    log.push(event_line(
        t_entry,
        "coordinator",
        "warmup",
        "emt",
        &format!(" residual={residual:.6e}"),
    ));

    // Refresh the external attachment with the engine's own measurement.
    for (p, pair) in ports.iter().enumerate() {
        let i = first_reply.injections[p].1;
        ext_sub.set_norton_current(
            pair.boundary,
            SequencePhasor {
                s1: -i.s1,
                s2: -i.s2,
                s0: -i.s0,
            },
        )?;
    }

    let mut shadow_sub = det_sub;
    for (p, pair) in ports.iter().enumerate() {
        shadow_sub.set_norton(port_norton(&th, p, pair.dummy)?)?;
    }
    if opts.reconcile {
        for m in shadow_sub.motors.iter_mut() {
            let running = m.status == MotorStatus::Running;
            m.apply_override(running);
        }
    }

    let mut controller = SwitchController::new(case.controller.clone(), case.f0, t_entry)?;
    if faults.any_active() {
        controller.fault_applied();
    }

    let prev_vde: Vec<ThreePhasePhasor> = ports
        .iter()
        .map(|p| {
            let i = shadow_sub.net.bus_index(p.dummy).expect("dummy exists");
            shadow_sub.v.abc(i)
        })
        .collect();

    Ok(Stage2 {
        shadow: MateSystem::single(shadow_sub),
        external: MateSystem::single(ext_sub),
        link,
        th,
        ports,
        controller,
        pending: Vec::new(),
        last_reply: first_reply,
        prev_vde,
        waveforms: None,
    })
}

/// One co-simulation interval `[t_k, t_next]`. Returns whether the switch
/// controller decided this step.
#[allow(clippy::too_many_arguments)]
fn interaction_step(
    case: &StudyCase,
    opts: &RunOptions,
    s2: &mut Stage2,
    rec: &mut Recorder,
    log: &mut Vec<String>,
    faults: &mut FaultTracker,
    sigs: &mut SignalSchedule,
    t_k: f64,
    t_next: f64,
) -> Result<bool> {
    // Fault transitions at the interval head. Detailed-side faults go to
    // the shadow (the engine has them scheduled natively); external-side
    // faults change the equivalent seen by the engine, so the cached
    // impedance is rebuilt.
    let mut external_topology_changed = false;
    for fi in faults.due_on(t_k) {
        let f = faults.events[fi].clone();
        s2.controller.fault_applied();
        let extra = format!(" phase={} r={:.6}", fault_tag(f.kind), f.z.re);
        if s2.shadow.subs[0].net.contains(f.bus) {
            let spec = fault_spec_for(f.kind, f.z, Representation::ThreePhase)?;
            s2.shadow.subs[0].apply_fault(f.bus, spec)?;
        } else {
            let spec = fault_spec_for(f.kind, f.z, Representation::ThreeSequence)?;
            s2.external.subs[0].apply_fault(f.bus, spec)?;
            external_topology_changed = true;
        }
        log.push(event_line(
            t_k,
            "case",
            "fault_on",
            &format!("bus{}", f.bus.0),
            &extra,
        ));
    }
    for fi in faults.due_off(t_k) {
        let f = faults.events[fi].clone();
        s2.controller.fault_cleared(f.t_off);
        if s2.shadow.subs[0].net.contains(f.bus) {
            s2.shadow.subs[0].clear_fault(f.bus)?;
        } else {
            s2.external.subs[0].clear_fault(f.bus)?;
            external_topology_changed = true;
        }
        log.push(event_line(
            t_k,
            "case",
            "fault_off",
            &format!("bus{}", f.bus.0),
            "",
        ));
    }
    if external_topology_changed {
        s2.th = thevenin_external(&s2.external.subs[0], &case.boundary)?;
        let mut zs = Vec::with_capacity(s2.ports.len());
        for (p, pair) in s2.ports.iter().enumerate() {
            let (z1, z2, z0) = s2.th.port_z(p)?;
            s2.shadow.subs[0].set_norton(port_norton(&s2.th, p, pair.dummy)?)?;
            zs.push((pair.dummy, z1, z2, z0));
        }
        s2.link.set_port_impedances(&zs)?;
    }

    // ① The engine's last extraction is the injection frame at t_k.
    // ② Feed it to the external subsystem as a pure current and advance it.
    for (p, pair) in s2.ports.iter().enumerate() {
        let i = s2.last_reply.injections[p].1;
        s2.external.subs[0].set_norton_current(
            pair.boundary,
            SequencePhasor {
                s1: -i.s1,
                s2: -i.s2,
                s0: -i.s0,
            },
        )?;
    }
    s2.external.step(case.plan.dt_ts, case.f0)?;

    // ③ New open-circuit voltages from the advanced external state; the
    // impedance blocks stay cached.
    refresh_open_circuit(&mut s2.th, &s2.external.subs[0])?;

    // ④ Ramp the engine's sources toward the new targets across the
    // interval and advance it.
    let targets: Vec<(BusId, ThreePhasePhasor)> = s2
        .ports
        .iter()
        .enumerate()
        .map(|(p, pair)| (pair.dummy, s2.th.v_oc_abc(p)))
        .collect();
    let reply = s2.link.advance(
        &targets,
        case.plan.dt_ts,
        case.plan.substeps(),
        opts.capture_waveforms,
    )?;
    for ev in &reply.stalls {
        log.push(event_line(
            ev.t,
            "emt",
            "stall",
            &ev.motor,
            &format!(" bus={} phase={}", ev.bus, phase_tag(ev.phase)),
        ));
        s2.pending.push(EventSignal {
            t: ev.t,
            kind: EventKind::MotorStall,
            target: ev.motor.clone(),
            value: 0.0,
        });
    }
    if opts.capture_waveforms {
        append_waveforms(&mut s2.waveforms, &reply, case.plan.dt_emt);
    }

    // ⑤ The shadow sees the same external equivalent, as a Norton.
    for (p, pair) in s2.ports.iter().enumerate() {
        s2.shadow.subs[0]
            .set_norton_current(pair.dummy, port_norton_current(&s2.th, p)?)?;
    }

    // ⑥ Deliver due signals to the shadow, then advance it.
    let mut due = sigs.due(t_next);
    due.extend(due_signals(&mut s2.pending, t_next));
    let mut changed = false;
    for sig in &due {
        let from_engine = sig.kind == EventKind::MotorStall || sig.kind == EventKind::MotorRun;
        if from_engine && !opts.reconcile {
            continue;
        }
        let c = apply_signal(&mut s2.shadow.subs[0], sig)?;
        changed = changed || c;
        log.push(event_line(
            t_next,
            "phasor",
            sig.kind.label(),
            &sig.target,
            &format!(" via=reconcile t_signal={:.9}", sig.t),
        ));
    }
    if changed {
        s2.shadow.subs[0].rebuild()?;
    }
    let report = s2.shadow.step(case.plan.dt_ts, case.f0)?;
    for ev in &report.stall_events {
        log.push(event_line(
            t_next,
            "phasor",
            "stall",
            &ev.motor,
            &format!(" bus={}", ev.bus),
        ));
    }
    if std::env::var_os("HYBRIDSIM_TRACE_SHADOW").is_some() {
        for (i, b) in s2.shadow.subs[0].net.buses().iter().enumerate() {
            let abc = s2.shadow.subs[0].v.abc(i);
            eprintln!(
                "shadow t={t_next:.3} bus {} |a|={:.4} |b|={:.4} |c|={:.4}",
                b.id,
                abc.a.norm(),
                abc.b.norm(),
                abc.c.norm()
            );
        }
    }

    // ⑦ Compare the two representations at the boundary and ask the
    // controller.
    let mut rate: f64 = 0.0;
    let mut dv: f64 = 0.0;
    for (p, pair) in s2.ports.iter().enumerate() {
        let di = s2.shadow.subs[0].net.bus_index(pair.dummy)?;
        let v_de = s2.shadow.subs[0].v.abc(di);
        let bi = s2.external.subs[0].net.bus_index(pair.boundary)?;
        let v_ex = s2.external.subs[0].v.abc(bi);
        rate = rate.max((v_de - s2.prev_vde[p]).max_norm());
        dv = dv.max((v_de - v_ex).max_norm());
        s2.prev_vde[p] = v_de;
    }
    if std::env::var_os("HYBRIDSIM_TRACE_SHADOW").is_some() {
        eprintln!(
            "ctl t={t_next:.3} rate={rate:.6} dv={dv:.6} phase={:?}",
            s2.controller.phase()
        );
        for pair in &s2.ports {
            let di = s2.shadow.subs[0].net.bus_index(pair.dummy)?;
            let v_de = s2.shadow.subs[0].v.abc(di);
            let bi = s2.external.subs[0].net.bus_index(pair.boundary)?;
            let v_ex = s2.external.subs[0].v.abc(bi);
            eprintln!(
                "  port de a={:.4}∠{:.1} b={:.4}∠{:.1} c={:.4}∠{:.1} | ex a={:.4}∠{:.1} b={:.4}∠{:.1} c={:.4}∠{:.1}",
                v_de.a.norm(), v_de.a.arg().to_degrees(),
                v_de.b.norm(), v_de.b.arg().to_degrees(),
                v_de.c.norm(), v_de.c.arg().to_degrees(),
                v_ex.a.norm(), v_ex.a.arg().to_degrees(),
                v_ex.b.norm(), v_ex.b.arg().to_degrees(),
                v_ex.c.norm(), v_ex.c.arg().to_degrees(),
            );
        }
    }
    let decided = s2
        .controller
        .observe(t_next, rate, dv, case.plan.dt_ts);
    if decided {
        log.push(event_line(
            t_next,
            "coordinator",
            "switch_decision",
            "stage3",
            &format!(" rate={rate:.6} dv={dv:.6}"),
        ));
    }

    s2.last_reply = reply;
    record_row(
        rec,
        t_next,
        2,
        RowSource::Stage2 {
            shadow: &s2.shadow,
            external: &s2.external,
            reply: &s2.last_reply,
        },
    );
    Ok(decided)
}

fn append_waveforms(dump: &mut Option<WaveformDump>, reply: &IntervalReply, dt: f64) {
    if reply.waveforms.is_empty() {
        return;
    }
    let n = reply.waveforms[0].1[0].len();
    if n == 0 {
        return;
    }
    let dump = dump.get_or_insert_with(|| {
        let mut columns = Vec::new();
        for (b, _) in &reply.waveforms {
            for ph in ['a', 'b', 'c'] {
                columns.push(format!("v{b}_{ph}"));
            }
        }
        WaveformDump {
            dt,
            t0: reply.t - (n as f64 - 1.0) * dt,
            columns,
            samples: Vec::new(),
        }
    });
    for k in 0..n {
        let mut row = Vec::with_capacity(dump.columns.len());
        for (_, tri) in &reply.waveforms {
            for ph in tri {
                row.push(ph[k]);
            }
        }
        dump.samples.push(row);
    }
}

fn enter_stage3(s2: Stage2) -> Result<MateSystem> {
    let Stage2 {
        mut shadow,
        mut external,
        link,
        ports,
        ..
    } = s2;
    link.switch_notice_and_shutdown()?;
    for pair in &ports {
        shadow.subs[0].remove_norton(pair.dummy)?;
        external.subs[0].remove_norton(pair.boundary)?;
    }
    external.subs[0].set_representation(Representation::ThreePhase)?;
    for m in shadow.subs[0].motors.iter_mut() {
        m.release_override();
    }
    let shadow_sub = shadow.subs.pop().expect("single");
    let ext_sub = external.subs.pop().expect("single");
    let mut mate = MateSystem::new(vec![shadow_sub, ext_sub], breaker_links(&ports))?;
    mate.solve_network()?;
    Ok(mate)
}

impl DetailedLink {
    fn switch_notice_and_shutdown(mut self) -> Result<()> {
        self.switch_notice()?;
        self.shutdown()
    }
}

fn run_emt_only(case: &StudyCase, opts: &RunOptions, init: Initialized) -> Result<SimulationResult> {
    let t_run = Instant::now();
    let mut rec = Recorder::new(case, SimulationMode::EmtOnly)?;
    let mut log = Vec::new();

    let split = split_network(&case.net, &case.boundary)?;
    let ports: Vec<PortPair> = split
        .breakers
        .iter()
        .map(|&(boundary, dummy)| PortPair { boundary, dummy })
        .collect();
    let dummy_of: BTreeMap<u32, u32> = ports
        .iter()
        .map(|p| (p.dummy.0, p.boundary.0))
        .collect();
    for f in &case.faults {
        if case.net.bus(f.bus).ok().map(|b| b.side) != Some(Side::Detailed) {
            return Err(Error::Validation(vec![format!(
                "emt_only cannot represent the external-side fault at bus {}",
                f.bus
            )]));
        }
    }

    let side_of = |b: BusId| case.net.bus(b).ok().map(|bus| bus.side);
    let mut det_loads = Vec::new();
    let mut ext_loads = Vec::new();
    for l in init.loads {
        match side_of(l.bus) {
            Some(Side::Detailed) => det_loads.push(l),
            _ => ext_loads.push(l),
        }
    }

    // The external equivalent is computed once, from the initial operating
    // point, and then held for the whole run.
    let mut det_sub = PhasorSubsystem::new(
        split.detailed.clone(),
        Representation::ThreePhase,
        Vec::new(),
        init.motors,
        det_loads.clone(),
    )?;
    let mut ext_sub = PhasorSubsystem::new(
        split.external.clone(),
        Representation::ThreeSequence,
        init.machines,
        Vec::new(),
        ext_loads,
    )?;
    let pf: BTreeMap<u32, Cx> = case
        .net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.0, init.v[i]))
        .collect();
    seed_voltages(&mut det_sub, &pf, &dummy_of);
    seed_voltages(&mut ext_sub, &pf, &dummy_of);
    let mut i_src0 = Vec::with_capacity(ports.len());
    for p in &ports {
        i_src0.push(crossing_current(&det_sub, p.dummy)?);
    }
    for (p, i) in ports.iter().zip(&i_src0) {
        ext_sub.set_norton(NortonEquivalent {
            bus: p.boundary,
            y1: Cx::new(0.0, 0.0),
            y2: Cx::new(0.0, 0.0),
            y0: Cx::new(0.0, 0.0),
            i: SequencePhasor {
                s1: -i.s1,
                s2: -i.s2,
                s0: -i.s0,
            },
        })?;
    }
    let th = thevenin_external(&ext_sub, &case.boundary)?;

    let monitored: Vec<BusId> = case
        .monitor
        .iter()
        .copied()
        .filter(|b| det_sub.net.contains(*b))
        .collect();
    let cfg = EmtSideConfig {
        net: split.detailed.clone(),
        loads: det_loads.iter().map(|l| (l.bus, l.y1)).collect(),
        motors: case.motor_groups.iter().map(|g| g.spim.clone()).collect(),
        ports: ports.iter().map(|p| p.dummy).collect(),
        monitored,
        faults: case
            .faults
            .iter()
            .map(|f| match f.kind {
                FaultKind::SinglePhase(p) => Ok(EmtFault {
                    bus: f.bus,
                    phase: p,
                    r: f.z.re,
                    t_on: f.t_on,
                    t_off: f.t_off,
                }),
                FaultKind::ThreePhase => Err(Error::Validation(vec![format!(
                    "three-phase fault at bus {} is not supported by the \
                     point-on-wave model yet; use per-phase faults",
                    f.bus
                )])),
            })
            .collect::<Result<Vec<_>>>()?,
        dt: case.plan.dt_emt,
        f0: case.f0,
        t_start: 0.0,
        warmup: case.plan.warmup,
        warmup_tolerance: case.plan.warmup_tolerance,
    };
    let mut link = DetailedLink::start(&cfg, opts.transport)?;
    let snapshot: Vec<(BusId, ThreePhasePhasor)> = det_sub
        .net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, det_sub.v.abc(i)))
        .collect();
    let port_data: Vec<PortBoundary> = ports
        .iter()
        .enumerate()
        .map(|(p, pair)| {
            let (z1, z2, z0) = th.port_z(p)?;
            Ok(PortBoundary {
                bus: pair.dummy,
                z1,
                z2,
                z0,
                v_oc: th.v_oc_abc(p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (residual, first_reply) =
        link.energize(&snapshot, &port_data, opts.capture_waveforms)?;
    let t0 = case.plan.warmup;
    log.push(event_line(
        t0,
        "coordinator",
        "warmup",
        "emt",
        &format!(" residual={residual:.6e}"),
    ));
    record_row(&mut rec, t0, 2, RowSource::Emt(&first_reply));

    let mut waveforms = None;
    let n_steps = ((case.plan.t_end - t0) / case.plan.dt_ts).round() as usize;
    for k in 0..n_steps {
        let t_next = t0 + (k + 1) as f64 * case.plan.dt_ts;
        let reply = link.advance_frozen(case.plan.substeps(), opts.capture_waveforms)?;
        for ev in &reply.stalls {
            log.push(event_line(
                ev.t,
                "emt",
                "stall",
                &ev.motor,
                &format!(" bus={} phase={}", ev.bus, phase_tag(ev.phase)),
            ));
        }
        if opts.capture_waveforms {
            append_waveforms(&mut waveforms, &reply, case.plan.dt_emt);
        }
        record_row(&mut rec, t_next, 2, RowSource::Emt(&reply));
    }
    link.shutdown()?;

    let total = t_run.elapsed().as_secs_f64();
    Ok(SimulationResult {
        columns: rec.columns,
        rows: rec.rows,
        events: log,
        timings: vec![("stage2".into(), total), ("total".into(), total)],
        waveforms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SwitchControllerConfig {
        SwitchControllerConfig::default()
    }

    #[test]
    fn controller_waits_out_the_clearing_delay() {
        let dt = 0.005;
        let mut c = SwitchController::new(cfg(), 60.0, 0.3).unwrap();
        // Fault at 0.5, cleared at 0.57.
        let mut decided_at = None;
        let mut k = 0;
        loop {
            let t = 0.3 + (k + 1) as f64 * dt;
            if t > 2.0 {
                break;
            }
            if (t - 0.5).abs() < 1e-9 {
                c.fault_applied();
            }
            if (t - 0.57).abs() < 1e-9 {
                c.fault_cleared(t);
            }
            if c.observe(t, 1e-4, 1e-4, dt) {
                decided_at = Some(t);
                break;
            }
            k += 1;
        }
        let t_dec = decided_at.expect("should decide");
        assert!(
            t_dec >= 0.57 + 0.2,
            "decided at {t_dec} before the delay elapsed"
        );
        // Quiet signals: delay ends at 0.77, then 7 agreeing steps.
        assert!((t_dec - (0.77 + 7.0 * dt)).abs() < 2.0 * dt, "{t_dec}");
    }

    #[test]
    fn controller_restarts_the_hold_on_excursion() {
        let dt = 0.005;
        let mut c = SwitchController::new(cfg(), 60.0, 0.0).unwrap();
        // Past the delay immediately (armed at 0, delay 0.2).
        let mut t = 0.2;
        for _ in 0..5 {
            t += dt;
            assert!(!c.observe(t, 1e-4, 1e-4, dt));
        }
        assert_eq!(c.phase(), ControllerPhase::WatchingDv);
        // Excursion resets the counter.
        t += dt;
        assert!(!c.observe(t, 1e-4, 0.02, dt));
        // Needs 7 more agreeing steps now.
        let mut decided = None;
        for k in 0..10 {
            t += dt;
            if c.observe(t, 1e-4, 1e-4, dt) {
                decided = Some(k + 1);
                break;
            }
        }
        assert_eq!(decided, Some(7));
    }

    #[test]
    fn controller_rearms_on_refault() {
        let dt = 0.005;
        let mut c = SwitchController::new(cfg(), 60.0, 0.0).unwrap();
        let mut t = 0.25;
        for _ in 0..3 {
            t += dt;
            c.observe(t, 1e-4, 1e-4, dt);
        }
        c.fault_applied();
        // While the fault is on, nothing moves.
        t += dt;
        assert!(!c.observe(t, 1e-4, 1e-4, dt));
        assert_eq!(c.phase(), ControllerPhase::WaitingDelay);
        c.fault_cleared(t);
        let t_clear = t;
        let mut decided_at = None;
        for _ in 0..200 {
            t += dt;
            if c.observe(t, 1e-4, 1e-4, dt) {
                decided_at = Some(t);
                break;
            }
        }
        assert!(decided_at.unwrap() >= t_clear + 0.2);
    }

    #[test]
    fn controller_ignores_rate_until_it_settles() {
        let dt = 0.005;
        let mut c = SwitchController::new(cfg(), 60.0, 0.0).unwrap();
        let mut t = 0.25;
        // Rate stays high: the dv counter must not start.
        for _ in 0..50 {
            t += dt;
            assert!(!c.observe(t, 0.05, 1e-4, dt));
        }
        assert_eq!(c.phase(), ControllerPhase::WatchingRate);
    }

    #[test]
    fn hold_cycles_outside_range_is_rejected() {
        let mut c = cfg();
        c.hold_cycles = 8.0;
        assert!(matches!(
            SwitchController::new(c, 60.0, 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn due_signals_order_by_time_then_target_keeping_queue_order() {
        let mk = |t: f64, target: &str, value: f64| EventSignal {
            t,
            kind: EventKind::MotorStall,
            target: target.into(),
            value,
        };
        let mut pending = vec![
            mk(0.52, "b", 0.0),
            mk(0.51, "a", 1.0),
            mk(0.51, "a", 2.0),
            mk(0.60, "z", 0.0),
        ];
        let due = due_signals(&mut pending, 0.55);
        assert_eq!(due.len(), 3);
        assert_eq!(due[0].target, "a");
        assert_eq!(due[0].value, 1.0);
        assert_eq!(due[1].target, "a");
        assert_eq!(due[1].value, 2.0, "queue order must break ties");
        assert_eq!(due[2].target, "b");
        assert_eq!(pending.len(), 1);
    }

    #[test]
    fn branch_target_parsing() {
        assert_eq!(
            parse_branch_target("5-10").unwrap(),
            (BusId(5), BusId(10))
        );
        assert!(parse_branch_target("5").is_err());
        assert!(parse_branch_target("5-x").is_err());
    }
}

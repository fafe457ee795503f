//! Plain-text study definition (`.hyb`).
//!
//! A case file is line-oriented and split into bracketed sections:
//!
//! ```text
//! [buses]      id=5 kv=230 kind=boundary side=external
//! [branches]   from=4 to=5 z1=0.010+0.085j b1=0.176
//! [machines]   id=G1 bus=1 h=23.64 xd=0.1460 ... pgen=0.716 vset=1.04 slack=true
//! [loads]      bus=8 p=1.00 q=0.35
//! [motors]     id=MA bus=11 phase=a mbase=0.75 rs=0.04 ... v_stall=0.55
//! [boundary]   5
//! [events]     fault bus=10 phase=c r=0.02 t_on=0.5 t_off=0.57
//!              signal t=1.2 kind=breaker target=5-10 value=0
//! [config]     t_end = 2.0
//! ```
//!
//! Record lines are `key=value` tokens separated by whitespace; `#` starts
//! a comment. Complex values are written `re+imj` (`0.01+0.085j`, `0.3j`,
//! `1.5`). Every parse failure carries the offending line number.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::coordinator::{
    EventKind, EventSignal, FaultEvent, FaultKind, MotorGroup, StagePlan, StaticLoad, StudyCase,
    SwitchControllerConfig,
};
use crate::emt::SpimParams;
use crate::net::{
    split_network, Branch, BranchStatus, Bus, BusId, BusKind, NetworkModel, Phase, Side,
    ZeroSeqConn,
};
use crate::phasor::MachineParams;
use crate::{Cx, Error, Result};

/// Parse `re+imj` style complex literals; plain reals and pure
/// imaginaries (`2j`) are accepted.
pub fn parse_complex(s: &str) -> Option<Cx> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Some(body) = s.strip_suffix('j').or_else(|| s.strip_suffix('J')) {
        // Find the sign that separates real and imaginary parts, skipping a
        // leading sign and exponent signs.
        let bytes = body.as_bytes();
        let mut split = None;
        for k in (1..bytes.len()).rev() {
            let c = bytes[k] as char;
            if (c == '+' || c == '-') && !matches!(bytes[k - 1] as char, 'e' | 'E') {
                split = Some(k);
                break;
            }
        }
        match split {
            Some(k) => {
                let re: f64 = body[..k].parse().ok()?;
                let im_str = &body[k..];
                let im: f64 = if im_str == "+" {
                    1.0
                } else if im_str == "-" {
                    -1.0
                } else {
                    im_str.parse().ok()?
                };
                Some(Cx::new(re, im))
            }
            None => {
                let im: f64 = if body.is_empty() {
                    1.0
                } else if body == "-" {
                    -1.0
                } else {
                    body.parse().ok()?
                };
                Some(Cx::new(0.0, im))
            }
        }
    } else {
        s.parse().ok().map(|re| Cx::new(re, 0.0))
    }
}

/// key=value tokens of one record line.
struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
    seen: BTreeSet<&'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line_no: usize, text: &'a str) -> Result<Fields<'a>> {
        let mut map = BTreeMap::new();
        for tok in text.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                Error::case(line_no, format!("expected key=value, found '{tok}'"))
            })?;
            if map.insert(k, v).is_some() {
                return Err(Error::case(line_no, format!("duplicate key '{k}'")));
            }
        }
        Ok(Fields {
            line: line_no,
            map,
            seen: BTreeSet::new(),
        })
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.seen.insert(key);
        self.map.get(key).copied()
    }

    fn req(&mut self, key: &'static str) -> Result<&'a str> {
        self.raw(key)
            .ok_or_else(|| Error::case(self.line, format!("missing required key '{key}'")))
    }

    fn req_f64(&mut self, key: &'static str) -> Result<f64> {
        let line = self.line;
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| Error::case(line, format!("'{key}={v}' is not a number")))
    }

    fn opt_f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let line = self.line;
        match self.raw(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::case(line, format!("'{key}={v}' is not a number"))),
            None => Ok(default),
        }
    }

    fn req_cx(&mut self, key: &'static str) -> Result<Cx> {
        let line = self.line;
        let v = self.req(key)?;
        parse_complex(v)
            .ok_or_else(|| Error::case(line, format!("'{key}={v}' is not a complex number")))
    }

    fn opt_cx(&mut self, key: &'static str, default: Cx) -> Result<Cx> {
        let line = self.line;
        match self.raw(key) {
            Some(v) => parse_complex(v)
                .ok_or_else(|| Error::case(line, format!("'{key}={v}' is not a complex number"))),
            None => Ok(default),
        }
    }

    fn req_bus(&mut self, key: &'static str) -> Result<BusId> {
        let line = self.line;
        let v = self.req(key)?;
        v.parse::<u32>()
            .map(BusId)
            .map_err(|_| Error::case(line, format!("'{key}={v}' is not a bus id")))
    }

    fn opt_bool(&mut self, key: &'static str, default: bool) -> Result<bool> {
        let line = self.line;
        match self.raw(key) {
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::case(line, format!("'{key}={v}' is not a boolean"))),
            None => Ok(default),
        }
    }

    /// Every supplied key must have been consumed by a getter.
    fn finish(self) -> Result<()> {
        for k in self.map.keys() {
            if !self.seen.contains(k) {
                return Err(Error::case(self.line, format!("unknown key '{k}'")));
            }
        }
        Ok(())
    }
}

fn parse_phase(line: usize, s: &str) -> Result<Phase> {
    match s {
        "a" | "A" => Ok(Phase::A),
        "b" | "B" => Ok(Phase::B),
        "c" | "C" => Ok(Phase::C),
        _ => Err(Error::case(line, format!("unknown phase '{s}'"))),
    }
}

#[derive(Default)]
struct RawConfig {
    values: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::case(*line, format!("'{key} = {v}' is not a number"))),
            None => Ok(default),
        }
    }

    fn buses(&self, key: &str) -> Result<Option<Vec<BusId>>> {
        match self.values.get(key) {
            Some((line, v)) => {
                let mut out = Vec::new();
                for tok in v.split_whitespace() {
                    out.push(BusId(tok.parse::<u32>().map_err(|_| {
                        Error::case(*line, format!("'{tok}' in '{key}' is not a bus id"))
                    })?));
                }
                Ok(Some(out))
            }
            None => Ok(None),
        }
    }
}

/// Parse a case from text. IO-free so tests and the browser build can feed
/// strings directly.
pub fn parse_case(text: &str) -> Result<StudyCase> {
    let mut section = String::new();
    let mut buses: Vec<Bus> = Vec::new();
    let mut branches: Vec<Branch> = Vec::new();
    let mut machines: Vec<MachineParams> = Vec::new();
    let mut static_loads: Vec<StaticLoad> = Vec::new();
    let mut motor_groups: Vec<MotorGroup> = Vec::new();
    let mut faults: Vec<FaultEvent> = Vec::new();
    let mut signals: Vec<EventSignal> = Vec::new();
    let mut boundary: Vec<BusId> = Vec::new();
    let mut config = RawConfig::default();

    for (k, raw_line) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = match raw_line.split_once('#') {
            Some((head, _)) => head.trim(),
            None => raw_line.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            match section.as_str() {
                "buses" | "branches" | "machines" | "loads" | "motors" | "boundary"
                | "events" | "config" => {}
                other => {
                    return Err(Error::case(line_no, format!("unknown section '[{other}]'")))
                }
            }
            continue;
        }
        match section.as_str() {
            "" => {
                return Err(Error::case(
                    line_no,
                    "content before the first section header",
                ))
            }
            "buses" => {
                let mut f = Fields::parse(line_no, line)?;
                let id = f.req_bus("id")?;
                let base_kv = f.opt_f64("kv", 1.0)?;
                let kind = match f.raw("kind") {
                    Some(s) => BusKind::parse(s)
                        .ok_or_else(|| Error::case(line_no, format!("unknown bus kind '{s}'")))?,
                    None => BusKind::Load,
                };
                let side = match f.raw("side") {
                    Some(s) => Side::parse(s)
                        .ok_or_else(|| Error::case(line_no, format!("unknown side '{s}'")))?,
                    None => Side::External,
                };
                let shunt1 = f.opt_cx("shunt1", Cx::new(0.0, 0.0))?;
                let shunt0 = f.opt_cx("shunt0", shunt1)?;
                f.finish()?;
                buses.push(Bus {
                    id,
                    base_kv,
                    kind,
                    side,
                    shunt1,
                    shunt0,
                });
            }
            "branches" => {
                let mut f = Fields::parse(line_no, line)?;
                let from = f.req_bus("from")?;
                let to = f.req_bus("to")?;
                let z1 = f.req_cx("z1")?;
                let z2 = f.opt_cx("z2", z1)?;
                let z0 = f.opt_cx("z0", z1)?;
                let b1 = f.opt_f64("b1", 0.0)?;
                let b0 = f.opt_f64("b0", 0.0)?;
                let tap = f.opt_f64("tap", 1.0)?;
                let status = match f.raw("status") {
                    Some("closed") | None => BranchStatus::Closed,
                    Some("open") => BranchStatus::Open,
                    Some(s) => {
                        return Err(Error::case(
                            line_no,
                            format!("unknown branch status '{s}'"),
                        ))
                    }
                };
                let z0_conn = match f.raw("z0_conn") {
                    Some(s) => ZeroSeqConn::parse(s).ok_or_else(|| {
                        Error::case(line_no, format!("unknown z0 connection '{s}'"))
                    })?,
                    None => ZeroSeqConn::Series,
                };
                f.finish()?;
                branches.push(Branch {
                    from,
                    to,
                    z1,
                    z2,
                    z0,
                    b1,
                    b0,
                    tap,
                    status,
                    is_virtual_breaker: false,
                    z0_conn,
                });
            }
            "machines" => {
                let mut f = Fields::parse(line_no, line)?;
                let id = f.req("id")?.to_string();
                let bus = f.req_bus("bus")?;
                let h = f.req_f64("h")?;
                let d = f.opt_f64("d", 0.0)?;
                let ra = f.opt_f64("ra", 0.0)?;
                let xd = f.req_f64("xd")?;
                let xq = f.req_f64("xq")?;
                let xdp = f.req_f64("xdp")?;
                let td0p = f.req_f64("td0p")?;
                let tq0p = f.opt_f64("tq0p", 0.0)?;
                let xqp = f.opt_f64("xqp", if tq0p > 0.0 { xq } else { xdp })?;
                let x2 = f.opt_f64("x2", xdp)?;
                let ka = f.opt_f64("ka", 25.0)?;
                let ta = f.opt_f64("ta", 0.2)?;
                let efd_max = f.opt_f64("efd_max", 5.0)?;
                let efd_min = f.opt_f64("efd_min", -5.0)?;
                let pgen = f.req_f64("pgen")?;
                let vset = f.req_f64("vset")?;
                let is_slack = f.opt_bool("slack", false)?;
                f.finish()?;
                machines.push(MachineParams {
                    id,
                    bus,
                    h,
                    d,
                    ra,
                    xd,
                    xq,
                    xdp,
                    xqp,
                    td0p,
                    tq0p,
                    x2,
                    ka,
                    ta,
                    efd_max,
                    efd_min,
                    pgen,
                    vset,
                    is_slack,
                });
            }
            "loads" => {
                let mut f = Fields::parse(line_no, line)?;
                let bus = f.req_bus("bus")?;
                let p = f.req_f64("p")?;
                let q = f.opt_f64("q", 0.0)?;
                f.finish()?;
                static_loads.push(StaticLoad { bus, p, q });
            }
            "motors" => {
                let mut f = Fields::parse(line_no, line)?;
                let id = f.req("id")?.to_string();
                let bus = f.req_bus("bus")?;
                let phase = {
                    let s = f.req("phase")?;
                    parse_phase(line_no, s)?
                };
                let spim = SpimParams {
                    id,
                    bus,
                    phase,
                    mbase: f.req_f64("mbase")?,
                    rs: f.req_f64("rs")?,
                    x1: f.req_f64("x1")?,
                    xm: f.req_f64("xm")?,
                    r2: f.req_f64("r2")?,
                    x2: f.req_f64("x2")?,
                    h: f.req_f64("h")?,
                    t_const: f.req_f64("t_const")?,
                    t_quad: f.req_f64("t_quad")?,
                    stall_speed: f.opt_f64("stall_speed", 0.5)?,
                    stall_cycles: f.opt_f64("stall_cycles", 1.0)?,
                };
                let group = MotorGroup {
                    spim,
                    v_stall: f.opt_f64("v_stall", 0.55)?,
                    stall_cycles: f.opt_f64("v_stall_cycles", 2.0)?,
                    v_floor: f.opt_f64("v_floor", 0.35)?,
                };
                f.finish()?;
                motor_groups.push(group);
            }
            "boundary" => {
                for tok in line.split_whitespace() {
                    boundary.push(BusId(tok.parse::<u32>().map_err(|_| {
                        Error::case(line_no, format!("'{tok}' is not a bus id"))
                    })?));
                }
            }
            "events" => {
                let (tag, rest) = line.split_once(char::is_whitespace).ok_or_else(|| {
                    Error::case(line_no, "event lines start with 'fault' or 'signal'")
                })?;
                match tag {
                    "fault" => {
                        let mut f = Fields::parse(line_no, rest)?;
                        let bus = f.req_bus("bus")?;
                        let kind = match f.raw("phase") {
                            Some("abc") | None => FaultKind::ThreePhase,
                            Some(s) => FaultKind::SinglePhase(parse_phase(line_no, s)?),
                        };
                        let r = f.req_f64("r")?;
                        let x = f.opt_f64("x", 0.0)?;
                        let t_on = f.req_f64("t_on")?;
                        let t_off = f.req_f64("t_off")?;
                        f.finish()?;
                        faults.push(FaultEvent {
                            bus,
                            kind,
                            z: Cx::new(r, x),
                            t_on,
                            t_off,
                        });
                    }
                    "signal" => {
                        let mut f = Fields::parse(line_no, rest)?;
                        let t = f.req_f64("t")?;
                        let kind = {
                            let s = f.req("kind")?;
                            EventKind::parse(s).ok_or_else(|| {
                                Error::case(line_no, format!("unknown signal kind '{s}'"))
                            })?
                        };
                        let target = f.req("target")?.to_string();
                        let value = f.opt_f64("value", 0.0)?;
                        f.finish()?;
                        signals.push(EventSignal {
                            t,
                            kind,
                            target,
                            value,
                        });
                    }
                    other => {
                        return Err(Error::case(
                            line_no,
                            format!("unknown event record '{other}'"),
                        ))
                    }
                }
            }
            "config" => {
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::case(line_no, "config lines take the form key = value")
                })?;
                let key = key.trim().to_string();
                if config
                    .values
                    .insert(key.clone(), (line_no, value.trim().to_string()))
                    .is_some()
                {
                    return Err(Error::case(line_no, format!("duplicate config key '{key}'")));
                }
            }
            _ => unreachable!("section names validated above"),
        }
    }

    let mva_base = config.f64_or("mva_base", 100.0)?;
    let net = NetworkModel::new(buses, branches, mva_base)?;
    let monitor = match config.buses("monitor")? {
        Some(list) => list,
        None => net.buses().iter().map(|b| b.id).collect(),
    };
    let plan = StagePlan {
        t_hybrid_start: config.f64_or("t_hybrid_start", 0.0)?,
        t_end: config.f64_or("t_end", 2.0)?,
        dt_ts: config.f64_or("dt_ts", 0.005)?,
        dt_emt: config.f64_or("dt_emt", 2.0e-5)?,
        warmup: config.f64_or("warmup", 0.1)?,
        warmup_tolerance: config.f64_or("warmup_tolerance", 0.05)?,
    };
    let defaults = SwitchControllerConfig::default();
    let controller = SwitchControllerConfig {
        t_delay: config.f64_or("t_delay", defaults.t_delay)?,
        eps_rate: config.f64_or("eps_rate", defaults.eps_rate)?,
        eps_dv: config.f64_or("eps_dv", defaults.eps_dv)?,
        hold_cycles: config.f64_or("hold_cycles", defaults.hold_cycles)?,
    };
    let f0 = config.f64_or("f0", 60.0)?;
    let known = [
        "mva_base",
        "monitor",
        "t_hybrid_start",
        "t_end",
        "dt_ts",
        "dt_emt",
        "warmup",
        "warmup_tolerance",
        "t_delay",
        "eps_rate",
        "eps_dv",
        "hold_cycles",
        "f0",
    ];
    for (key, (line, _)) in &config.values {
        if !known.contains(&key.as_str()) {
            return Err(Error::case(*line, format!("unknown config key '{key}'")));
        }
    }

    Ok(StudyCase {
        f0,
        net,
        machines,
        static_loads,
        motor_groups,
        faults,
        signals,
        boundary,
        monitor,
        plan,
        controller,
    })
}

pub fn load_case(path: &Path) -> Result<StudyCase> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text)
}

/// Deep consistency checks beyond what parsing enforces. Returns every
/// problem found, not just the first.
pub fn validate_case(case: &StudyCase) -> Vec<String> {
    let mut problems = Vec::new();
    let net = &case.net;

    if let Err(e) = case.plan.validate() {
        push_validation(&mut problems, e);
    }
    if let Err(e) = case.controller.validate() {
        push_validation(&mut problems, e);
    }
    if !(case.f0 > 0.0) {
        problems.push("fundamental frequency must be positive".into());
    }

    let mut ids = BTreeSet::new();
    let mut slacks = 0;
    for m in &case.machines {
        if !ids.insert(m.id.clone()) {
            problems.push(format!("duplicate device id '{}'", m.id));
        }
        if !net.contains(m.bus) {
            problems.push(format!("machine {} references unknown bus {}", m.id, m.bus));
        }
        if m.is_slack {
            slacks += 1;
        }
    }
    if !case.machines.is_empty() && slacks != 1 {
        problems.push(format!(
            "exactly one machine must be the slack; found {slacks}"
        ));
    }
    for g in &case.motor_groups {
        if !ids.insert(g.spim.id.clone()) {
            problems.push(format!("duplicate device id '{}'", g.spim.id));
        }
        if !net.contains(g.spim.bus) {
            problems.push(format!(
                "motor group {} references unknown bus {}",
                g.spim.id, g.spim.bus
            ));
        }
    }
    for l in &case.static_loads {
        if !net.contains(l.bus) {
            problems.push(format!("load references unknown bus {}", l.bus));
        }
    }
    for b in &case.monitor {
        if !net.contains(*b) {
            problems.push(format!("monitored bus {b} does not exist"));
        }
    }

    for f in &case.faults {
        if !net.contains(f.bus) {
            problems.push(format!("fault references unknown bus {}", f.bus));
        }
        if f.z.norm() < 1e-12 {
            problems.push(format!(
                "fault at bus {} needs a nonzero impedance",
                f.bus
            ));
        }
        if f.t_off <= f.t_on {
            problems.push(format!(
                "fault at bus {} clears at {} before it is applied at {}",
                f.bus, f.t_off, f.t_on
            ));
        }
    }

    let motor_ids: BTreeSet<&str> = case
        .motor_groups
        .iter()
        .map(|g| g.spim.id.as_str())
        .collect();
    for s in &case.signals {
        match s.kind {
            EventKind::MotorStall | EventKind::MotorRun => {
                if !motor_ids.contains(s.target.as_str()) {
                    problems.push(format!(
                        "signal at t={} targets unknown motor '{}'",
                        s.t, s.target
                    ));
                }
            }
            EventKind::Breaker => {
                let ok = s.target.split_once('-').is_some_and(|(a, b)| {
                    match (a.parse::<u32>(), b.parse::<u32>()) {
                        (Ok(a), Ok(b)) => net.branches().iter().any(|br| {
                            (br.from == BusId(a) && br.to == BusId(b))
                                || (br.from == BusId(b) && br.to == BusId(a))
                        }),
                        _ => false,
                    }
                });
                if !ok {
                    problems.push(format!(
                        "signal at t={} targets unknown branch '{}'",
                        s.t, s.target
                    ));
                }
            }
            EventKind::Control => {}
        }
    }

    // Split-dependent conventions only apply when a boundary is declared.
    if !case.boundary.is_empty() {
        for b in &case.boundary {
            match net.bus(*b) {
                Ok(bus) => {
                    if bus.side != Side::External {
                        problems.push(format!(
                            "boundary bus {b} must be marked side=external"
                        ));
                    }
                }
                Err(_) => problems.push(format!("boundary bus {b} does not exist")),
            }
        }
        match split_network(net, &case.boundary) {
            Ok(split) => {
                let side_of = |b: BusId| net.bus(b).ok().map(|bus| bus.side);
                for m in &case.machines {
                    if side_of(m.bus) != Some(Side::External) {
                        problems.push(format!(
                            "machine {} must sit on the external side",
                            m.id
                        ));
                    }
                }
                for g in &case.motor_groups {
                    if side_of(g.spim.bus) != Some(Side::Detailed) {
                        problems.push(format!(
                            "motor group {} must sit on the detailed side",
                            g.spim.id
                        ));
                    }
                }
                for f in &case.faults {
                    if side_of(f.bus) == Some(Side::Detailed)
                        && f.kind == FaultKind::ThreePhase
                    {
                        problems.push(format!(
                            "three-phase fault at detailed bus {} cannot be \
                             represented point-on-wave; use per-phase faults",
                            f.bus
                        ));
                    }
                }
                if split.detailed.n_buses() < 2 {
                    problems.push(
                        "the detailed side holds no buses beyond the boundary ports".into(),
                    );
                }
                if case.plan.t_hybrid_start <= 0.0 {
                    problems.push(
                        "a boundary is declared but t_hybrid_start is unset".into(),
                    );
                }
            }
            Err(e) => problems.push(format!("boundary split failed: {e}")),
        }
    }

    problems
}

fn push_validation(problems: &mut Vec<String>, e: Error) {
    match e {
        Error::Validation(list) => problems.extend(list),
        other => problems.push(other.to_string()),
    }
}

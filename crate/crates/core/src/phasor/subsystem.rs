//! One phasor-domain subsystem: a network in a chosen representation plus
//! the devices attached to it, with a factorized augmented admittance
//! matrix.
//!
//! Constant-impedance loads, machine internal admittances, fault shunts and
//! Norton equivalents are folded into the matrix; machines (compensation
//! term) and motors (voltage-dependent power) enter through the injection
//! vector. The network fixed point and the state integration loop live in
//! the multi-area solver that owns subsystems of this type.

use std::collections::BTreeMap;

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};

use crate::net::{
    build_sequence, build_three_phase, phase_to_seq, seq_diag_to_phase, seq_to_phase, BusId,
    NetworkModel, Phase, Representation, Sequence, SequencePhasor, ThreePhasePhasor,
};
use crate::phasor::{AcMotor, Machine};
use crate::{Cx, Error, Result};

/// Constant-impedance load, anchored at the power-flow voltage.
#[derive(Debug, Clone)]
pub struct ConstZLoad {
    pub bus: BusId,
    /// Positive/negative-sequence admittance (grounded-wye assumption).
    pub y1: Cx,
    /// Zero-sequence admittance.
    pub y0: Cx,
}

impl ConstZLoad {
    /// Anchor a constant-PQ load at voltage magnitude `vm` so that it draws
    /// exactly `p + jq` there.
    pub fn anchored(bus: BusId, p: f64, q: f64, vm: f64) -> ConstZLoad {
        let y1 = Cx::new(p, -q) / Cx::new(vm * vm, 0.0);
        ConstZLoad { bus, y1, y0: y1 }
    }
}

/// Norton equivalent attached at a boundary bus: per-sequence admittance
/// folded into the matrix plus a per-sequence current injection.
#[derive(Debug, Clone)]
pub struct NortonEquivalent {
    pub bus: BusId,
    pub y1: Cx,
    pub y2: Cx,
    pub y0: Cx,
    pub i: SequencePhasor,
}

/// Shunt fault description, as an admittance to ground.
#[derive(Debug, Clone, Copy)]
pub enum FaultSpec {
    /// Positive-sequence shunt only (aggregate approximation).
    PosShunt(Cx),
    /// Same admittance on all three phases.
    AllPhase(Cx),
    /// Shunt on a single phase; needs the phase-coordinate representation.
    SinglePhase(Phase, Cx),
}

/// Bus voltages in the subsystem's representation.
#[derive(Debug, Clone)]
pub enum VoltageSolution {
    Pos(Vec<Cx>),
    Seq(Vec<SequencePhasor>),
    Abc(Vec<ThreePhasePhasor>),
}

impl VoltageSolution {
    pub fn flat(rep: Representation, n: usize) -> VoltageSolution {
        let one = Cx::new(1.0, 0.0);
        match rep {
            Representation::PositiveSequence => VoltageSolution::Pos(vec![one; n]),
            Representation::ThreeSequence => {
                VoltageSolution::Seq(vec![SequencePhasor::positive(one); n])
            }
            Representation::ThreePhase => {
                VoltageSolution::Abc(vec![ThreePhasePhasor::balanced(one); n])
            }
        }
    }

    pub fn rep(&self) -> Representation {
        match self {
            VoltageSolution::Pos(_) => Representation::PositiveSequence,
            VoltageSolution::Seq(_) => Representation::ThreeSequence,
            VoltageSolution::Abc(_) => Representation::ThreePhase,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            VoltageSolution::Pos(v) => v.len(),
            VoltageSolution::Seq(v) => v.len(),
            VoltageSolution::Abc(v) => v.len(),
        }
    }

    /// Positive-sequence component at bus index `i`.
    pub fn pos(&self, i: usize) -> Cx {
        match self {
            VoltageSolution::Pos(v) => v[i],
            VoltageSolution::Seq(v) => v[i].s1,
            VoltageSolution::Abc(v) => phase_to_seq(&v[i]).s1,
        }
    }

    pub fn seq(&self, i: usize) -> SequencePhasor {
        match self {
            VoltageSolution::Pos(v) => SequencePhasor::positive(v[i]),
            VoltageSolution::Seq(v) => v[i],
            VoltageSolution::Abc(v) => phase_to_seq(&v[i]),
        }
    }

    pub fn abc(&self, i: usize) -> ThreePhasePhasor {
        match self {
            VoltageSolution::Pos(v) => ThreePhasePhasor::balanced(v[i]),
            VoltageSolution::Seq(v) => seq_to_phase(&v[i]),
            VoltageSolution::Abc(v) => v[i],
        }
    }

    /// Re-express in another representation (information present in the
    /// source carries over; missing sequence content becomes zero).
    pub fn convert(&self, rep: Representation) -> VoltageSolution {
        let n = self.n();
        match rep {
            Representation::PositiveSequence => {
                VoltageSolution::Pos((0..n).map(|i| self.pos(i)).collect())
            }
            Representation::ThreeSequence => {
                VoltageSolution::Seq((0..n).map(|i| self.seq(i)).collect())
            }
            Representation::ThreePhase => {
                VoltageSolution::Abc((0..n).map(|i| self.abc(i)).collect())
            }
        }
    }

    /// Largest per-bus difference, measured in phase coordinates so mixed
    /// comparisons are meaningful.
    pub fn max_diff(&self, other: &VoltageSolution) -> f64 {
        assert_eq!(self.n(), other.n());
        (0..self.n())
            .map(|i| (self.abc(i) - other.abc(i)).max_norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        match self {
            VoltageSolution::Pos(v) => v.iter().all(|c| c.re.is_finite() && c.im.is_finite()),
            VoltageSolution::Seq(v) => v.iter().all(|s| s.is_finite()),
            VoltageSolution::Abc(v) => v.iter().all(|p| p.is_finite()),
        }
    }
}

/// Factorized augmented admittance system.
enum AugmentedSystem {
    Pos {
        y: DMatrix<Cx>,
        lu: LU<Cx, Dyn, Dyn>,
    },
    Seq {
        y: [DMatrix<Cx>; 3],
        lu: [LU<Cx, Dyn, Dyn>; 3],
    },
    Abc {
        y: DMatrix<Cx>,
        lu: LU<Cx, Dyn, Dyn>,
    },
}

pub struct PhasorSubsystem {
    pub net: NetworkModel,
    pub rep: Representation,
    pub machines: Vec<Machine>,
    pub motors: Vec<AcMotor>,
    pub loads: Vec<ConstZLoad>,
    faults: BTreeMap<BusId, FaultSpec>,
    nortons: Vec<NortonEquivalent>,
    system: AugmentedSystem,
    /// Last accepted network solution (also the next initial guess).
    pub v: VoltageSolution,
}

impl PhasorSubsystem {
    pub fn new(
        net: NetworkModel,
        rep: Representation,
        machines: Vec<Machine>,
        motors: Vec<AcMotor>,
        loads: Vec<ConstZLoad>,
    ) -> Result<PhasorSubsystem> {
        for m in &machines {
            if !net.contains(m.params.bus) {
                return Err(Error::topology(format!(
                    "machine {} references missing bus {}",
                    m.params.id, m.params.bus
                )));
            }
        }
        for m in &motors {
            if !net.contains(m.params.bus) {
                return Err(Error::topology(format!(
                    "motor {} references missing bus {}",
                    m.params.id, m.params.bus
                )));
            }
        }
        for l in &loads {
            if !net.contains(l.bus) {
                return Err(Error::topology(format!(
                    "load references missing bus {}",
                    l.bus
                )));
            }
        }
        let n = net.n_buses();
        let mut sub = PhasorSubsystem {
            net,
            rep,
            machines,
            motors,
            loads,
            faults: BTreeMap::new(),
            nortons: Vec::new(),
            system: AugmentedSystem::Pos {
                y: DMatrix::zeros(0, 0),
                lu: DMatrix::<Cx>::zeros(0, 0).lu(),
            },
            v: VoltageSolution::flat(rep, n),
        };
        sub.rebuild()?;
        Ok(sub)
    }

    pub fn n_buses(&self) -> usize {
        self.net.n_buses()
    }

    /// Change representation, carrying the stored voltages over as a warm
    /// start, and refactorize.
    pub fn set_representation(&mut self, rep: Representation) -> Result<()> {
        if self.rep != rep {
            self.rep = rep;
            self.v = self.v.convert(rep);
            self.rebuild()?;
        }
        Ok(())
    }

    pub fn apply_fault(&mut self, bus: BusId, spec: FaultSpec) -> Result<()> {
        if !self.net.contains(bus) {
            return Err(Error::UnknownTarget(format!("fault bus {bus}")));
        }
        match (self.rep, &spec) {
            (Representation::ThreePhase, _) => {}
            (_, FaultSpec::SinglePhase(..)) => {
                return Err(Error::topology(
                    "single-phase fault needs the phase-coordinate representation",
                ));
            }
            _ => {}
        }
        self.faults.insert(bus, spec);
        self.rebuild()
    }

    pub fn clear_fault(&mut self, bus: BusId) -> Result<()> {
        self.faults.remove(&bus);
        self.rebuild()
    }

    pub fn has_fault(&self, bus: BusId) -> bool {
        self.faults.contains_key(&bus)
    }

    /// Attach or replace a Norton equivalent at `bus` (refactorizes).
    pub fn set_norton(&mut self, norton: NortonEquivalent) -> Result<()> {
        if !self.net.contains(norton.bus) {
            return Err(Error::UnknownTarget(format!("Norton bus {}", norton.bus)));
        }
        let bus = norton.bus;
        self.nortons.retain(|n| n.bus != bus);
        self.nortons.push(norton);
        self.rebuild()
    }

    /// Update only the current source of an existing Norton equivalent — no
    /// refactorization.
    pub fn set_norton_current(&mut self, bus: BusId, i: SequencePhasor) -> Result<()> {
        match self.nortons.iter_mut().find(|n| n.bus == bus) {
            Some(n) => {
                n.i = i;
                Ok(())
            }
            None => Err(Error::UnknownTarget(format!(
                "no Norton equivalent at bus {bus}"
            ))),
        }
    }

    pub fn remove_norton(&mut self, bus: BusId) -> Result<()> {
        self.nortons.retain(|n| n.bus != bus);
        self.rebuild()
    }

    /// Buses whose zero-sequence node has no attachment at all: no branch
    /// path, shunt, grounded device, Norton, or grounded fault. Such nodes
    /// would make the zero-sequence (and hence the phase-coordinate) matrix
    /// singular; since nothing can drive zero-sequence current into them,
    /// pinning `v0 = 0` with a unit shunt is exact.
    fn zero_sequence_floating(&self) -> Vec<bool> {
        let n = self.net.n_buses();
        let idx = |bus: BusId| self.net.bus_index(bus).expect("validated");
        let y0 = build_sequence(&self.net, Sequence::Zero);
        let mut attached = vec![false; n];
        for i in 0..n {
            for j in 0..n {
                if y0[(i, j)].norm() > 0.0 {
                    attached[i] = true;
                    break;
                }
            }
        }
        for l in &self.loads {
            if l.y0.norm() > 0.0 {
                attached[idx(l.bus)] = true;
            }
        }
        for m in &self.motors {
            // A stalled group is a grounded shunt on its phase(s).
            if m.folded_admittance().is_some() {
                attached[idx(m.params.bus)] = true;
            }
        }
        for nq in &self.nortons {
            if nq.y0.norm() > 0.0 {
                attached[idx(nq.bus)] = true;
            }
        }
        for (&bus, f) in &self.faults {
            match f {
                FaultSpec::AllPhase(_) | FaultSpec::SinglePhase(..) => {
                    attached[idx(bus)] = true;
                }
                FaultSpec::PosShunt(_) => {}
            }
        }
        attached.iter().map(|a| !a).collect()
    }

    /// Rebuild the augmented admittance matrices and refactorize.
    pub fn rebuild(&mut self) -> Result<()> {
        let n = self.net.n_buses();
        let idx = |bus: BusId| self.net.bus_index(bus).expect("validated");
        let zero_floating = match self.rep {
            Representation::PositiveSequence => Vec::new(),
            _ => self.zero_sequence_floating(),
        };
        self.system = match self.rep {
            Representation::PositiveSequence => {
                let mut y = build_sequence(&self.net, Sequence::Positive);
                for l in &self.loads {
                    let i = idx(l.bus);
                    y[(i, i)] += l.y1;
                }
                for m in &self.machines {
                    let i = idx(m.params.bus);
                    y[(i, i)] += m.params.y_internal();
                }
                for m in &self.motors {
                    if let Some(ys) = m.folded_admittance() {
                        let i = idx(m.params.bus);
                        // Balanced equivalent of the locked-rotor phase
                        // admittance.
                        y[(i, i)] += ys / 3.0;
                    }
                }
                for nq in &self.nortons {
                    let i = idx(nq.bus);
                    y[(i, i)] += nq.y1;
                }
                for (&bus, f) in &self.faults {
                    let i = idx(bus);
                    match f {
                        FaultSpec::PosShunt(yf) | FaultSpec::AllPhase(yf) => y[(i, i)] += yf,
                        FaultSpec::SinglePhase(..) => unreachable!("rejected at apply"),
                    }
                }
                let lu = y.clone().lu();
                AugmentedSystem::Pos { y, lu }
            }
            Representation::ThreeSequence => {
                let mut y1 = build_sequence(&self.net, Sequence::Positive);
                let mut y2 = build_sequence(&self.net, Sequence::Negative);
                let mut y0 = build_sequence(&self.net, Sequence::Zero);
                for l in &self.loads {
                    let i = idx(l.bus);
                    y1[(i, i)] += l.y1;
                    y2[(i, i)] += l.y1;
                    y0[(i, i)] += l.y0;
                }
                for m in &self.machines {
                    let i = idx(m.params.bus);
                    y1[(i, i)] += m.params.y_internal();
                    y2[(i, i)] += m.params.y_negative();
                }
                for m in &self.motors {
                    if let Some(ys) = m.folded_admittance() {
                        let i = idx(m.params.bus);
                        // Diagonal (balanced-equivalent) part of the stalled
                        // group's sequence coupling; the grounded-wye
                        // connection gives it a zero-sequence path too.
                        y1[(i, i)] += ys / 3.0;
                        y2[(i, i)] += ys / 3.0;
                        y0[(i, i)] += ys / 3.0;
                    }
                }
                for nq in &self.nortons {
                    let i = idx(nq.bus);
                    y1[(i, i)] += nq.y1;
                    y2[(i, i)] += nq.y2;
                    y0[(i, i)] += nq.y0;
                }
                for (&bus, f) in &self.faults {
                    let i = idx(bus);
                    match f {
                        FaultSpec::PosShunt(yf) => y1[(i, i)] += yf,
                        FaultSpec::AllPhase(yf) => {
                            y1[(i, i)] += yf;
                            y2[(i, i)] += yf;
                            y0[(i, i)] += yf;
                        }
                        FaultSpec::SinglePhase(..) => unreachable!("rejected at apply"),
                    }
                }
                for (i, floating) in zero_floating.iter().enumerate() {
                    if *floating {
                        y0[(i, i)] += Cx::new(1.0, 0.0);
                    }
                }
                let lu = [y1.clone().lu(), y2.clone().lu(), y0.clone().lu()];
                AugmentedSystem::Seq { y: [y1, y2, y0], lu }
            }
            Representation::ThreePhase => {
                let mut y = build_three_phase(&self.net);
                let zero = Cx::new(0.0, 0.0);
                let add_block = |y: &mut DMatrix<Cx>, i: usize, m: &nalgebra::Matrix3<Cx>| {
                    for r in 0..3 {
                        for c in 0..3 {
                            y[(3 * i + r, 3 * i + c)] += m[(r, c)];
                        }
                    }
                };
                for l in &self.loads {
                    let i = idx(l.bus);
                    add_block(&mut y, i, &seq_diag_to_phase(l.y0, l.y1, l.y1));
                }
                for m in &self.machines {
                    let i = idx(m.params.bus);
                    add_block(
                        &mut y,
                        i,
                        &seq_diag_to_phase(zero, m.params.y_internal(), m.params.y_negative()),
                    );
                }
                for m in &self.motors {
                    if let Some(ys) = m.folded_admittance() {
                        let i = idx(m.params.bus);
                        match m.params.phase {
                            // Locked rotor sits on the group's own phase.
                            Some(ph) => {
                                y[(3 * i + ph.index(), 3 * i + ph.index())] += ys;
                            }
                            None => {
                                for p in 0..3 {
                                    y[(3 * i + p, 3 * i + p)] += ys / 3.0;
                                }
                            }
                        }
                    }
                }
                for nq in &self.nortons {
                    let i = idx(nq.bus);
                    add_block(&mut y, i, &seq_diag_to_phase(nq.y0, nq.y1, nq.y2));
                }
                for (&bus, f) in &self.faults {
                    let i = idx(bus);
                    match f {
                        FaultSpec::PosShunt(yf) => {
                            add_block(&mut y, i, &seq_diag_to_phase(zero, *yf, zero))
                        }
                        FaultSpec::AllPhase(yf) => {
                            for p in 0..3 {
                                y[(3 * i + p, 3 * i + p)] += yf;
                            }
                        }
                        FaultSpec::SinglePhase(ph, yf) => {
                            y[(3 * i + ph.index(), 3 * i + ph.index())] += yf;
                        }
                    }
                }
                let one = Cx::new(1.0, 0.0);
                for (i, floating) in zero_floating.iter().enumerate() {
                    if *floating {
                        add_block(&mut y, i, &seq_diag_to_phase(one, zero, zero));
                    }
                }
                let lu = y.clone().lu();
                AugmentedSystem::Abc { y, lu }
            }
        };
        if n == 0 {
            return Err(Error::topology("empty subsystem"));
        }
        Ok(())
    }

    /// Device current injections at the candidate voltages, per bus in
    /// sequence coordinates (generator convention). Includes machines,
    /// motors and Norton current sources; everything else is in the matrix.
    pub fn device_injections(&self, v: &VoltageSolution) -> Vec<SequencePhasor> {
        let mut inj = vec![SequencePhasor::ZERO; self.net.n_buses()];
        for m in &self.machines {
            let i = self.net.bus_index(m.params.bus).expect("validated");
            inj[i].s1 += m.injection(v.pos(i));
        }
        for m in &self.motors {
            let i = self.net.bus_index(m.params.bus).expect("validated");
            if v.rep() == Representation::ThreePhase {
                let s = m.injection_abc(&v.abc(i));
                inj[i].s1 += s.s1;
                inj[i].s2 += s.s2;
                inj[i].s0 += s.s0;
            } else {
                inj[i].s1 += m.injection(v.pos(i));
            }
        }
        for nq in &self.nortons {
            let i = self.net.bus_index(nq.bus).expect("validated");
            inj[i].s1 += nq.i.s1;
            inj[i].s2 += nq.i.s2;
            inj[i].s0 += nq.i.s0;
        }
        inj
    }

    fn solve_one(
        lu: &LU<Cx, Dyn, Dyn>,
        rhs: DVector<Cx>,
        label: &str,
        allow_open: bool,
    ) -> Result<DVector<Cx>> {
        if lu.is_invertible() {
            lu.solve(&rhs)
                .ok_or_else(|| Error::Singular(label.into()))
        } else if allow_open || rhs.iter().map(|c| c.norm()).fold(0.0, f64::max) < 1e-12 {
            // No ground path in this sequence network: the component is
            // open and carries no voltage response.
            Ok(DVector::zeros(rhs.len()))
        } else {
            Err(Error::Singular(label.into()))
        }
    }

    /// Solve the linear network for given per-bus injections plus optional
    /// extra injections (MATE link currents).
    pub fn solve_injections(
        &self,
        inj: &[SequencePhasor],
        extra: &[(usize, SequencePhasor)],
    ) -> Result<VoltageSolution> {
        let n = self.net.n_buses();
        let mut total: Vec<SequencePhasor> = inj.to_vec();
        for (i, s) in extra {
            total[*i].s1 += s.s1;
            total[*i].s2 += s.s2;
            total[*i].s0 += s.s0;
        }
        match &self.system {
            AugmentedSystem::Pos { lu, .. } => {
                let rhs = DVector::from_iterator(n, total.iter().map(|s| s.s1));
                let x = Self::solve_one(lu, rhs, "positive-sequence network", false)?;
                Ok(VoltageSolution::Pos(x.iter().copied().collect()))
            }
            AugmentedSystem::Seq { lu, .. } => {
                let rhs1 = DVector::from_iterator(n, total.iter().map(|s| s.s1));
                let rhs2 = DVector::from_iterator(n, total.iter().map(|s| s.s2));
                let rhs0 = DVector::from_iterator(n, total.iter().map(|s| s.s0));
                let x1 = Self::solve_one(&lu[0], rhs1, "positive-sequence network", false)?;
                let x2 = Self::solve_one(&lu[1], rhs2, "negative-sequence network", true)?;
                let x0 = Self::solve_one(&lu[2], rhs0, "zero-sequence network", true)?;
                Ok(VoltageSolution::Seq(
                    (0..n)
                        .map(|i| SequencePhasor::new(x1[i], x2[i], x0[i]))
                        .collect(),
                ))
            }
            AugmentedSystem::Abc { lu, .. } => {
                let mut rhs = DVector::zeros(3 * n);
                for i in 0..n {
                    let p = seq_to_phase(&total[i]);
                    rhs[3 * i] = p.a;
                    rhs[3 * i + 1] = p.b;
                    rhs[3 * i + 2] = p.c;
                }
                let x = Self::solve_one(lu, rhs, "phase-coordinate network", false)?;
                Ok(VoltageSolution::Abc(
                    (0..n)
                        .map(|i| {
                            ThreePhasePhasor::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
                        })
                        .collect(),
                ))
            }
        }
    }

    /// ∞-norm of `Y·v − i` over all solved components; the network fixed
    /// point is accepted when this falls under the solver tolerance.
    pub fn residual(&self, v: &VoltageSolution, inj: &[SequencePhasor]) -> f64 {
        let n = self.net.n_buses();
        let mut worst = 0.0_f64;
        match (&self.system, v) {
            (AugmentedSystem::Pos { y, .. }, VoltageSolution::Pos(vv)) => {
                for i in 0..n {
                    let mut acc = -inj[i].s1;
                    for k in 0..n {
                        acc += y[(i, k)] * vv[k];
                    }
                    worst = worst.max(acc.norm());
                }
            }
            (AugmentedSystem::Seq { y, lu }, VoltageSolution::Seq(vv)) => {
                for (s, pick) in [
                    (0usize, 0usize), // positive
                    (1, 1),           // negative
                    (2, 2),           // zero
                ] {
                    if !lu[s].is_invertible() {
                        continue;
                    }
                    for i in 0..n {
                        let want = match pick {
                            0 => inj[i].s1,
                            1 => inj[i].s2,
                            _ => inj[i].s0,
                        };
                        let mut acc = -want;
                        for k in 0..n {
                            let vk = match pick {
                                0 => vv[k].s1,
                                1 => vv[k].s2,
                                _ => vv[k].s0,
                            };
                            acc += y[s][(i, k)] * vk;
                        }
                        worst = worst.max(acc.norm());
                    }
                }
            }
            (AugmentedSystem::Abc { y, .. }, VoltageSolution::Abc(vv)) => {
                for i in 0..n {
                    let p = seq_to_phase(&inj[i]);
                    let want = [p.a, p.b, p.c];
                    for r in 0..3 {
                        let mut acc = -want[r];
                        for k in 0..n {
                            let ph = vv[k].phases();
                            for c in 0..3 {
                                acc += y[(3 * i + r, 3 * k + c)] * ph[c];
                            }
                        }
                        worst = worst.max(acc.norm());
                    }
                }
            }
            _ => panic!("voltage solution representation mismatch"),
        }
        worst
    }

    /// Column of the inverse augmented matrix for a unit injection at bus
    /// index `i` in sequence `seq`, expressed as the per-bus response of
    /// that same sequence component. `None` when the sequence network has
    /// no ground path (open port).
    pub fn seq_column(&self, seq: Sequence, i: usize) -> Option<Vec<Cx>> {
        let n = self.net.n_buses();
        match &self.system {
            AugmentedSystem::Pos { lu, .. } => {
                if seq != Sequence::Positive {
                    return None;
                }
                if !lu.is_invertible() {
                    return None;
                }
                let mut e = DVector::zeros(n);
                e[i] = Cx::new(1.0, 0.0);
                lu.solve(&e).map(|x| x.iter().copied().collect())
            }
            AugmentedSystem::Seq { lu, .. } => {
                let k = match seq {
                    Sequence::Positive => 0,
                    Sequence::Negative => 1,
                    Sequence::Zero => 2,
                };
                if !lu[k].is_invertible() {
                    return None;
                }
                let mut e = DVector::zeros(n);
                e[i] = Cx::new(1.0, 0.0);
                lu[k].solve(&e).map(|x| x.iter().copied().collect())
            }
            AugmentedSystem::Abc { lu, .. } => {
                if !lu.is_invertible() {
                    return None;
                }
                let unit = match seq {
                    Sequence::Positive => SequencePhasor::positive(Cx::new(1.0, 0.0)),
                    Sequence::Negative => {
                        SequencePhasor::new(Cx::new(0.0, 0.0), Cx::new(1.0, 0.0), Cx::new(0.0, 0.0))
                    }
                    Sequence::Zero => {
                        SequencePhasor::new(Cx::new(0.0, 0.0), Cx::new(0.0, 0.0), Cx::new(1.0, 0.0))
                    }
                };
                let p = seq_to_phase(&unit);
                let mut rhs = DVector::zeros(3 * n);
                rhs[3 * i] = p.a;
                rhs[3 * i + 1] = p.b;
                rhs[3 * i + 2] = p.c;
                let x = lu.solve(&rhs)?;
                Some(
                    (0..n)
                        .map(|k| {
                            let ph = ThreePhasePhasor::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                            let s = phase_to_seq(&ph);
                            match seq {
                                Sequence::Positive => s.s1,
                                Sequence::Negative => s.s2,
                                Sequence::Zero => s.s0,
                            }
                        })
                        .collect(),
                )
            }
        }
    }

    /// Thévenin self/transfer impedance between two buses of this subsystem
    /// in one sequence network: response at `at` to a unit injection at
    /// `from`.
    pub fn transfer_impedance(&self, seq: Sequence, from: usize, at: usize) -> Option<Cx> {
        self.seq_column(seq, from).map(|col| col[at])
    }

    /// Phase-coordinate column: full per-bus response to a unit current
    /// injected on one phase at bus index `i`. Only available in the
    /// phase-coordinate representation.
    pub fn phase_column(&self, i: usize, ph: Phase) -> Option<Vec<ThreePhasePhasor>> {
        let n = self.net.n_buses();
        match &self.system {
            AugmentedSystem::Abc { lu, .. } => {
                if !lu.is_invertible() {
                    return None;
                }
                let mut rhs = DVector::zeros(3 * n);
                rhs[3 * i + ph.index()] = Cx::new(1.0, 0.0);
                let x = lu.solve(&rhs)?;
                Some(
                    (0..n)
                        .map(|k| ThreePhasePhasor::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    pub fn nortons(&self) -> &[NortonEquivalent] {
        &self.nortons
    }

    pub fn bus_voltage(&self, bus: BusId) -> Option<SequencePhasor> {
        self.net.bus_index(bus).ok().map(|i| self.v.seq(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Branch, Bus, BusKind, Side};
    use crate::phasor::{AcMotorParams, MachineParams};

    fn bus(id: u32, kind: BusKind) -> Bus {
        Bus {
            id: BusId(id),
            base_kv: 230.0,
            kind,
            side: Side::External,
            shunt1: Cx::new(0.0, 0.0),
            shunt0: Cx::new(0.0, 0.0),
        }
    }

    fn machine_params(bus: u32) -> MachineParams {
        MachineParams {
            id: "g".into(),
            bus: BusId(bus),
            h: 5.0,
            d: 0.0,
            ra: 0.0,
            xd: 1.0,
            xq: 0.8,
            xdp: 0.25,
            xqp: 0.35,
            td0p: 6.0,
            tq0p: 0.6,
            x2: 0.25,
            ka: 50.0,
            ta: 0.1,
            efd_max: 4.0,
            efd_min: -4.0,
            pgen: 0.8,
            vset: 1.0,
            is_slack: true,
        }
    }

    fn two_bus_system() -> PhasorSubsystem {
        // Machine at 1, constant-Z load at 2, line j0.1.
        let net = NetworkModel::new(
            vec![bus(1, BusKind::Generator), bus(2, BusKind::Load)],
            vec![Branch::line(BusId(1), BusId(2), Cx::new(0.0, 0.1))],
            100.0,
        )
        .unwrap();
        let v2 = Cx::new(0.98, -0.02);
        let machine = Machine::initialize(
            machine_params(1),
            Cx::new(1.0, 0.0),
            Cx::new(0.8, 0.3),
        )
        .unwrap();
        let load = ConstZLoad::anchored(BusId(2), 0.8, 0.2, v2.norm());
        PhasorSubsystem::new(
            net,
            Representation::PositiveSequence,
            vec![machine],
            vec![],
            vec![load],
        )
        .unwrap()
    }

    /// Direct fixed point on the subsystem alone (the production loop lives
    /// in the multi-area solver).
    fn converge(sub: &mut PhasorSubsystem) -> f64 {
        for _ in 0..30 {
            let inj = sub.device_injections(&sub.v);
            let v = sub.solve_injections(&inj, &[]).unwrap();
            sub.v = v;
        }
        let inj = sub.device_injections(&sub.v);
        sub.residual(&sub.v, &inj)
    }

    #[test]
    fn fixed_point_reaches_solver_tolerance() {
        let mut sub = two_bus_system();
        let res = converge(&mut sub);
        assert!(res < 1e-10, "residual {res}");
    }

    #[test]
    fn seq_and_abc_representations_agree_with_pos() {
        let mut sub = two_bus_system();
        converge(&mut sub);
        let v_pos = sub.v.clone();
        sub.set_representation(Representation::ThreeSequence).unwrap();
        converge(&mut sub);
        assert!(sub.v.max_diff(&v_pos) < 1e-9);
        sub.set_representation(Representation::ThreePhase).unwrap();
        converge(&mut sub);
        assert!(sub.v.max_diff(&v_pos) < 1e-9);
    }

    #[test]
    fn all_phase_fault_depresses_voltage() {
        let mut sub = two_bus_system();
        converge(&mut sub);
        let before = sub.v.pos(1).norm();
        sub.apply_fault(BusId(2), FaultSpec::AllPhase(Cx::new(20.0, 0.0)))
            .unwrap();
        converge(&mut sub);
        let during = sub.v.pos(1).norm();
        assert!(during < 0.6 * before, "sag {before} -> {during}");
        sub.clear_fault(BusId(2)).unwrap();
        let res = converge(&mut sub);
        assert!(res < 1e-10);
        assert!((sub.v.pos(1).norm() - before).abs() < 1e-6);
    }

    #[test]
    fn single_phase_fault_requires_phase_coordinates() {
        let mut sub = two_bus_system();
        let err = sub.apply_fault(BusId(2), FaultSpec::SinglePhase(Phase::C, Cx::new(20.0, 0.0)));
        assert!(err.is_err());
        sub.set_representation(Representation::ThreePhase).unwrap();
        sub.apply_fault(BusId(2), FaultSpec::SinglePhase(Phase::C, Cx::new(20.0, 0.0)))
            .unwrap();
        converge(&mut sub);
        let abc = sub.v.abc(1);
        assert!(abc.c.norm() < abc.a.norm(), "phase c should sag hardest");
        assert!(abc.a.norm() > 0.8, "unfaulted phases should hold up");
    }

    #[test]
    fn norton_source_raises_boundary_voltage() {
        // Passive single bus with a load, fed only by a Norton equivalent.
        let net = NetworkModel::new(vec![bus(1, BusKind::Boundary)], vec![], 100.0).unwrap();
        let load = ConstZLoad {
            bus: BusId(1),
            y1: Cx::new(1.0, -0.3),
            y0: Cx::new(1.0, -0.3),
        };
        let mut sub = PhasorSubsystem::new(
            net,
            Representation::PositiveSequence,
            vec![],
            vec![],
            vec![load],
        )
        .unwrap();
        let y_n = Cx::new(0.0, -10.0);
        let v_src = Cx::new(1.0, 0.0);
        sub.set_norton(NortonEquivalent {
            bus: BusId(1),
            y1: y_n,
            y2: y_n,
            y0: y_n,
            i: SequencePhasor::positive(y_n * v_src),
        })
        .unwrap();
        let inj = sub.device_injections(&sub.v);
        let v = sub.solve_injections(&inj, &[]).unwrap();
        // Voltage divider: v = y_n·v_src / (y_load + y_n).
        let want = y_n * v_src / (Cx::new(1.0, -0.3) + y_n);
        assert!((v.pos(0) - want).norm() < 1e-12);
    }

    #[test]
    fn motor_injection_is_voltage_dependent() {
        let net = NetworkModel::new(
            vec![bus(1, BusKind::Generator), bus(2, BusKind::Load)],
            vec![Branch::line(BusId(1), BusId(2), Cx::new(0.0, 0.05))],
            100.0,
        )
        .unwrap();
        let machine =
            Machine::initialize(machine_params(1), Cx::new(1.0, 0.0), Cx::new(0.3, 0.1)).unwrap();
        let motor = AcMotor::new(AcMotorParams {
            id: "m".into(),
            bus: BusId(2),
            phase: None,
            p0: 0.3,
            q0: 0.1,
            beta1: -1.0,
            beta2: 4.0,
            y_stall: Cx::new(3.0, -15.0),
            v_floor: 0.35,
            v_stall: 0.55,
            stall_cycles: 2.0,
        });
        let mut sub = PhasorSubsystem::new(
            net,
            Representation::PositiveSequence,
            vec![machine],
            vec![motor],
            vec![],
        )
        .unwrap();
        let res = converge(&mut sub);
        assert!(res < 1e-10, "residual {res}");
        // Drawn power at the solved voltage matches the motor model.
        let v2 = sub.v.pos(1);
        let i_m = sub.motors[0].injection(v2);
        let s = v2 * (-i_m).conj();
        let want = sub.motors[0].power(v2.norm());
        assert!((s - want).norm() < 1e-10);
    }
}

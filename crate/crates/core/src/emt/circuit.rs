//! Instantaneous-value network solution: trapezoidal companion models
//! assembled into a real nodal conductance matrix, one unknown per bus and
//! phase.
//!
//! Supported elements: coupled three-phase series R–L branches (from the
//! sequence impedance data), line-charging capacitor blocks, bus shunts
//! (coupled R–L or capacitor blocks, with independent zero-sequence values
//! for grounding banks), per-phase shunt loads (R parallel L or C),
//! switchable fault resistors, boundary Thévenin sources (three-phase R–L
//! behind ramped sinusoids), and single-phase induction motors. The conductance matrix is refactorized
//! only when topology changes (switching, Thévenin update); everything else
//! moves through history sources on the right-hand side.

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn, Matrix3, Vector3};

use crate::emt::{Spim, SpimStatus};
use crate::net::{
    seq_diag_to_phase, BusId, NetworkModel, Phase, SequencePhasor, ThreePhasePhasor, ZeroSeqConn,
};
use crate::{Cx, Error, Result};

/// A motor stall detected inside the instantaneous simulation.
#[derive(Debug, Clone)]
pub struct EmtStallEvent {
    pub t: f64,
    pub motor: String,
    pub bus: BusId,
    pub phase: Phase,
}

struct RlBranch {
    from: usize,
    to: usize,
    r: Matrix3<f64>,
    l: Matrix3<f64>,
    g: Matrix3<f64>,
    /// `I − 2·G·R`, the current-feedback part of the history.
    a: Matrix3<f64>,
    i: Vector3<f64>,
    h: Vector3<f64>,
}

struct ShuntCapBlock {
    bus: usize,
    g: Matrix3<f64>,
    /// Capacitance block (for phasor initialization).
    c: Matrix3<f64>,
    h: Vector3<f64>,
}

/// Coupled three-phase R–L shunt from a bus to ground, built from per-bus
/// shunt admittances (positive/negative vs zero sequence). Sequences with no
/// path are given a very large series impedance, mirroring the blocked-path
/// treatment of series branches; the phase-coordinate coupling is what
/// realizes zero-sequence-only grounding (a wye-grounded transformer winding
/// behind a delta) in instantaneous values.
struct ShuntRl {
    bus: usize,
    r: Matrix3<f64>,
    l: Matrix3<f64>,
    g: Matrix3<f64>,
    a: Matrix3<f64>,
    h: Vector3<f64>,
}

/// Per-phase shunt load: conductance in parallel with an inductor or
/// capacitor, from the load admittance `g + jb`.
struct ShuntLoad {
    node: usize,
    g_r: f64,
    /// Companion conductance of the reactive part.
    g_x: f64,
    /// True for inductive (b < 0), false for capacitive.
    inductive: bool,
    h: f64,
    /// Present reactive-element current (for history updates).
    i_x: f64,
}

struct FaultSwitch {
    node: usize,
    g: f64,
    on_sample: u64,
    off_sample: u64,
    active: bool,
}

struct BoundarySource {
    bus_id: BusId,
    bus: usize,
    r: Matrix3<f64>,
    l: Matrix3<f64>,
    g: Matrix3<f64>,
    a: Matrix3<f64>,
    i: Vector3<f64>,
    h: Vector3<f64>,
    mag0: [f64; 3],
    mag1: [f64; 3],
    ang0: [f64; 3],
    ang1: [f64; 3],
    t0: f64,
    t1: f64,
}

impl BoundarySource {
    fn value_at(&self, t: f64, w0: f64) -> Vector3<f64> {
        let frac = if self.t1 > self.t0 {
            ((t - self.t0) / (self.t1 - self.t0)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        Vector3::from_fn(|p, _| {
            let m = self.mag0[p] + frac * (self.mag1[p] - self.mag0[p]);
            let th = self.ang0[p] + frac * (self.ang1[p] - self.ang0[p]);
            m * (w0 * t + th).cos()
        })
    }

    /// Ramped phasor parameters at time `t` (magnitude, angle per phase).
    fn params_at(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let frac = if self.t1 > self.t0 {
            ((t - self.t0) / (self.t1 - self.t0)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let mut m = [0.0; 3];
        let mut a = [0.0; 3];
        for p in 0..3 {
            m[p] = self.mag0[p] + frac * (self.mag1[p] - self.mag0[p]);
            a[p] = self.ang0[p] + frac * (self.ang1[p] - self.ang0[p]);
        }
        (m, a)
    }
}

/// Sliding one-cycle waveform memory for one scalar signal.
struct Ring {
    data: Vec<f64>,
    cursor: usize,
}

impl Ring {
    fn new(n: usize) -> Ring {
        Ring {
            data: vec![0.0; n],
            cursor: 0,
        }
    }
    fn push(&mut self, x: f64) {
        self.data[self.cursor] = x;
        self.cursor = (self.cursor + 1) % self.data.len();
    }
    /// Contents oldest-first.
    fn ordered(&self) -> Vec<f64> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(self.data[(self.cursor + k) % n]);
        }
        out
    }
    fn newest(&self) -> f64 {
        let n = self.data.len();
        self.data[(self.cursor + n - 1) % n]
    }
}

pub struct EmtCircuit {
    pub f0: f64,
    pub dt: f64,
    w0: f64,
    net_buses: Vec<BusId>,
    n_nodes: usize,
    g_mat: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    branches: Vec<RlBranch>,
    caps: Vec<ShuntCapBlock>,
    shunt_rls: Vec<ShuntRl>,
    loads: Vec<ShuntLoad>,
    faults: Vec<FaultSwitch>,
    sources: Vec<BoundarySource>,
    pub motors: Vec<Spim>,
    /// Absolute sample counter: the last solved sample is `sample·dt`.
    sample: u64,
    samples_run: u64,
    /// Per-node voltage memory plus per-source per-phase current memory,
    /// each one fundamental cycle deep.
    v_rings: Vec<Ring>,
    src_rings: Vec<[Ring; 3]>,
    events: Vec<EmtStallEvent>,
}

impl EmtCircuit {
    /// Samples per fundamental cycle at this step size.
    pub fn samples_per_cycle(&self) -> usize {
        (1.0 / (self.f0 * self.dt)).round() as usize
    }

    pub fn new(
        net: &NetworkModel,
        loads: &[(BusId, Cx)],
        motors: Vec<Spim>,
        boundary_buses: &[BusId],
        dt: f64,
        f0: f64,
        start_time: f64,
    ) -> Result<EmtCircuit> {
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let n_buses = net.n_buses();
        let n_nodes = 3 * n_buses;
        let idx = |b: BusId| net.bus_index(b);

        let mut branches = Vec::new();
        let mut caps = Vec::new();
        for br in net.branches() {
            if !br.is_closed() {
                continue;
            }
            if br.is_virtual_breaker {
                return Err(Error::topology(
                    "virtual breakers cannot enter the instantaneous network",
                ));
            }
            if (br.tap - 1.0).abs() > 1e-12 {
                return Err(Error::topology(format!(
                    "off-nominal tap on {}–{} not supported in the instantaneous network",
                    br.from, br.to
                )));
            }
            let z0 = match br.z0_conn {
                ZeroSeqConn::Series => br.z0,
                // An open zero-sequence path is approximated by a very
                // large series impedance in that sequence.
                ZeroSeqConn::Blocked => Cx::new(0.0, 1e6),
                _ => {
                    return Err(Error::topology(format!(
                        "zero-sequence grounding of {}–{} not supported in the instantaneous network",
                        br.from, br.to
                    )));
                }
            };
            let zb = seq_diag_to_phase(z0, br.z1, br.z2);
            let r = Matrix3::from_fn(|i, j| zb[(i, j)].re);
            let l = Matrix3::from_fn(|i, j| zb[(i, j)].im / w0);
            let m = r + l * (2.0 / dt);
            let g = m.try_inverse().ok_or_else(|| {
                Error::Singular(format!("series branch {}–{}", br.from, br.to))
            })?;
            let a = Matrix3::identity() - g * r * 2.0;
            branches.push(RlBranch {
                from: idx(br.from)?,
                to: idx(br.to)?,
                r,
                l,
                g,
                a,
                i: Vector3::zeros(),
                h: Vector3::zeros(),
            });
            for (end, b1, b0) in [(br.from, br.b1, br.b0), (br.to, br.b1, br.b0)] {
                if b1 != 0.0 || b0 != 0.0 {
                    let bb = seq_diag_to_phase(
                        Cx::new(0.0, b0 / 2.0),
                        Cx::new(0.0, b1 / 2.0),
                        Cx::new(0.0, b1 / 2.0),
                    );
                    let c = Matrix3::from_fn(|i, j| bb[(i, j)].im / w0);
                    caps.push(ShuntCapBlock {
                        bus: idx(end)?,
                        g: c * (2.0 / dt),
                        c,
                        h: Vector3::zeros(),
                    });
                }
            }
        }
        let mut shunt_rls = Vec::new();
        for b in net.buses() {
            let (y1, y0) = (b.shunt1, b.shunt0);
            if y1.norm() == 0.0 && y0.norm() == 0.0 {
                continue;
            }
            let bi = idx(b.id)?;
            if y1.im > 0.0 || y0.im > 0.0 {
                // Capacitive bank: susceptance-only blocks ride on the
                // capacitor companion model.
                if y1.re != 0.0 || y0.re != 0.0 || y1.im < 0.0 || y0.im < 0.0 {
                    return Err(Error::topology(format!(
                        "bus {} shunt mixes capacitive and dissipative parts; \
                         not supported in the instantaneous network",
                        b.id
                    )));
                }
                let bb = seq_diag_to_phase(y0, y1, y1);
                let c = Matrix3::from_fn(|i, j| bb[(i, j)].im / w0);
                caps.push(ShuntCapBlock {
                    bus: bi,
                    g: c * (2.0 / dt),
                    c,
                    h: Vector3::zeros(),
                });
            } else {
                let z_of = |y: Cx| {
                    if y.norm() == 0.0 {
                        Cx::new(0.0, 1e6)
                    } else {
                        Cx::new(1.0, 0.0) / y
                    }
                };
                let zb = seq_diag_to_phase(z_of(y0), z_of(y1), z_of(y1));
                let r = Matrix3::from_fn(|i, j| zb[(i, j)].re);
                let l = Matrix3::from_fn(|i, j| zb[(i, j)].im / w0);
                let m = r + l * (2.0 / dt);
                let g = m
                    .try_inverse()
                    .ok_or_else(|| Error::Singular(format!("shunt at bus {}", b.id)))?;
                let a = Matrix3::identity() - g * r * 2.0;
                shunt_rls.push(ShuntRl {
                    bus: bi,
                    r,
                    l,
                    g,
                    a,
                    h: Vector3::zeros(),
                });
            }
        }

        let mut shunt_loads = Vec::new();
        for (bus, y) in loads {
            let bi = idx(*bus)?;
            for p in 0..3 {
                let node = 3 * bi + p;
                let (g_x, inductive) = if y.im < 0.0 {
                    // Inductor: L = −1/(ω0·b); companion dt/(2L).
                    let l = -1.0 / (w0 * y.im);
                    (dt / (2.0 * l), true)
                } else if y.im > 0.0 {
                    let c = y.im / w0;
                    (2.0 * c / dt, false)
                } else {
                    (0.0, true)
                };
                shunt_loads.push(ShuntLoad {
                    node,
                    g_r: y.re,
                    g_x,
                    inductive,
                    h: 0.0,
                    i_x: 0.0,
                });
            }
        }

        let mut sources = Vec::new();
        for b in boundary_buses {
            let bi = idx(*b)?;
            // Placeholder impedance until the coordinator provides the real
            // Thévenin data.
            let zb = seq_diag_to_phase(Cx::new(0.0, 0.1), Cx::new(0.0, 0.1), Cx::new(0.0, 0.1));
            let r = Matrix3::from_fn(|i, j| zb[(i, j)].re);
            let l = Matrix3::from_fn(|i, j| zb[(i, j)].im / w0);
            let m = r + l * (2.0 / dt);
            let g = m.try_inverse().ok_or_else(|| {
                Error::Singular(format!("boundary source at bus {b}"))
            })?;
            let a = Matrix3::identity() - g * r * 2.0;
            sources.push(BoundarySource {
                bus_id: *b,
                bus: bi,
                r,
                l,
                g,
                a,
                i: Vector3::zeros(),
                h: Vector3::zeros(),
                mag0: [1.0; 3],
                mag1: [1.0; 3],
                ang0: [0.0, -2.0 * std::f64::consts::PI / 3.0, 2.0 * std::f64::consts::PI / 3.0],
                ang1: [0.0, -2.0 * std::f64::consts::PI / 3.0, 2.0 * std::f64::consts::PI / 3.0],
                t0: start_time,
                t1: start_time,
            });
        }
        if sources.is_empty() && motors.is_empty() && shunt_loads.is_empty() {
            return Err(Error::topology("instantaneous network has no devices"));
        }

        for m in &motors {
            idx(m.params.bus)?;
        }

        let n_cycle = (1.0 / (f0 * dt)).round() as usize;
        let mut circuit = EmtCircuit {
            f0,
            dt,
            w0,
            net_buses: net.buses().iter().map(|b| b.id).collect(),
            n_nodes,
            g_mat: DMatrix::zeros(n_nodes, n_nodes),
            lu: DMatrix::<f64>::zeros(0, 0).lu(),
            branches,
            caps,
            shunt_rls,
            loads: shunt_loads,
            faults: Vec::new(),
            sources,
            motors,
            sample: (start_time / dt).round() as u64,
            samples_run: 0,
            v_rings: (0..n_nodes).map(|_| Ring::new(n_cycle)).collect(),
            src_rings: (0..boundary_buses.len())
                .map(|_| [Ring::new(n_cycle), Ring::new(n_cycle), Ring::new(n_cycle)])
                .collect(),
            events: Vec::new(),
        };
        circuit.refactorize()?;
        Ok(circuit)
    }

    pub fn time(&self) -> f64 {
        self.sample as f64 * self.dt
    }

    fn bus_index(&self, bus: BusId) -> Result<usize> {
        self.net_buses
            .iter()
            .position(|b| *b == bus)
            .ok_or_else(|| Error::UnknownTarget(format!("bus {bus} in instantaneous network")))
    }

    pub fn node(&self, bus: BusId, phase: Phase) -> Result<usize> {
        Ok(3 * self.bus_index(bus)? + phase.index())
    }

    fn refactorize(&mut self) -> Result<()> {
        let n = self.n_nodes;
        let mut g = DMatrix::<f64>::zeros(n, n);
        let add3 = |g: &mut DMatrix<f64>, bi: usize, bj: usize, m: &Matrix3<f64>, sign: f64| {
            for r in 0..3 {
                for c in 0..3 {
                    g[(3 * bi + r, 3 * bj + c)] += sign * m[(r, c)];
                }
            }
        };
        for br in &self.branches {
            add3(&mut g, br.from, br.from, &br.g, 1.0);
            add3(&mut g, br.to, br.to, &br.g, 1.0);
            add3(&mut g, br.from, br.to, &br.g, -1.0);
            add3(&mut g, br.to, br.from, &br.g, -1.0);
        }
        for c in &self.caps {
            add3(&mut g, c.bus, c.bus, &c.g, 1.0);
        }
        for s in &self.shunt_rls {
            add3(&mut g, s.bus, s.bus, &s.g, 1.0);
        }
        for l in &self.loads {
            g[(l.node, l.node)] += l.g_r + l.g_x;
        }
        for s in &self.sources {
            add3(&mut g, s.bus, s.bus, &s.g, 1.0);
        }
        for m in &self.motors {
            let node = self.node(m.params.bus, m.params.phase)?;
            g[(node, node)] += m.conductance_system(self.dt, self.f0);
        }
        for f in &self.faults {
            if f.active {
                g[(f.node, f.node)] += f.g;
            }
        }
        let lu = g.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("instantaneous network matrix".into()));
        }
        self.g_mat = g;
        self.lu = lu;
        Ok(())
    }

    /// Replace a boundary source's Thévenin impedance (per sequence; `None`
    /// means an open sequence, approximated by a very large impedance).
    pub fn set_boundary_thevenin(
        &mut self,
        bus: BusId,
        z1: Cx,
        z2: Cx,
        z0: Option<Cx>,
    ) -> Result<()> {
        let w0 = self.w0;
        let dt = self.dt;
        let s = self
            .sources
            .iter_mut()
            .find(|s| s.bus_id == bus)
            .ok_or_else(|| Error::UnknownTarget(format!("boundary source at bus {bus}")))?;
        let z0 = z0.unwrap_or(Cx::new(0.0, 1e6));
        let zb = seq_diag_to_phase(z0, z1, z2);
        s.r = Matrix3::from_fn(|i, j| zb[(i, j)].re);
        s.l = Matrix3::from_fn(|i, j| zb[(i, j)].im / w0);
        let m = s.r + s.l * (2.0 / dt);
        s.g = m
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("boundary source at bus {bus}")))?;
        s.a = Matrix3::identity() - s.g * s.r * 2.0;
        self.refactorize()
    }

    /// Ramp the source's per-phase magnitude and angle linearly from their
    /// present (possibly mid-ramp) values to `target` over `ramp` seconds.
    pub fn set_boundary_target(
        &mut self,
        bus: BusId,
        target: ThreePhasePhasor,
        ramp: f64,
    ) -> Result<()> {
        let t = self.time();
        let s = self
            .sources
            .iter_mut()
            .find(|s| s.bus_id == bus)
            .ok_or_else(|| Error::UnknownTarget(format!("boundary source at bus {bus}")))?;
        let (m_now, a_now) = s.params_at(t);
        let phases = target.phases();
        for p in 0..3 {
            s.mag0[p] = m_now[p];
            s.ang0[p] = a_now[p];
            s.mag1[p] = phases[p].norm();
            // Continuity: take the angle branch nearest the present one.
            let mut th = phases[p].arg();
            while th - a_now[p] > std::f64::consts::PI {
                th -= 2.0 * std::f64::consts::PI;
            }
            while th - a_now[p] < -std::f64::consts::PI {
                th += 2.0 * std::f64::consts::PI;
            }
            s.ang1[p] = th;
        }
        s.t0 = t;
        s.t1 = t + ramp.max(0.0);
        Ok(())
    }

    /// Hold the boundary source at its present ramped value.
    pub fn freeze_boundary(&mut self, bus: BusId) -> Result<()> {
        let t = self.time();
        let s = self
            .sources
            .iter_mut()
            .find(|s| s.bus_id == bus)
            .ok_or_else(|| Error::UnknownTarget(format!("boundary source at bus {bus}")))?;
        let (m_now, a_now) = s.params_at(t);
        s.mag0 = m_now;
        s.mag1 = m_now;
        s.ang0 = a_now;
        s.ang1 = a_now;
        s.t0 = t;
        s.t1 = t;
        Ok(())
    }

    /// Schedule a single-phase fault resistor. Switching happens at the
    /// samples nearest `t_on` and `t_off`.
    pub fn schedule_fault(
        &mut self,
        bus: BusId,
        phase: Phase,
        r_fault: f64,
        t_on: f64,
        t_off: f64,
    ) -> Result<()> {
        if r_fault <= 0.0 {
            return Err(Error::topology("fault resistance must be positive"));
        }
        let node = self.node(bus, phase)?;
        self.faults.push(FaultSwitch {
            node,
            g: 1.0 / r_fault,
            on_sample: (t_on / self.dt).round() as u64,
            off_sample: (t_off / self.dt).round() as u64,
            active: false,
        });
        Ok(())
    }

    /// Advance one step. Switch states are evaluated for the sample being
    /// solved, so a fault scheduled at sample k first affects the solution
    /// at `t = k·dt`.
    pub fn step(&mut self) -> Result<()> {
        let next = self.sample + 1;
        let mut switched = false;
        for f in &mut self.faults {
            let want = next >= f.on_sample && next < f.off_sample;
            if want != f.active {
                f.active = want;
                switched = true;
            }
        }
        if switched {
            self.refactorize()?;
        }

        let t_next = next as f64 * self.dt;
        let mut rhs = DVector::<f64>::zeros(self.n_nodes);
        for br in &self.branches {
            for p in 0..3 {
                rhs[3 * br.from + p] -= br.h[p];
                rhs[3 * br.to + p] += br.h[p];
            }
        }
        for c in &self.caps {
            for p in 0..3 {
                rhs[3 * c.bus + p] += c.h[p];
            }
        }
        for s in &self.shunt_rls {
            for p in 0..3 {
                rhs[3 * s.bus + p] -= s.h[p];
            }
        }
        for l in &self.loads {
            if l.inductive {
                rhs[l.node] -= l.h;
            } else {
                rhs[l.node] += l.h;
            }
        }
        for s in &self.sources {
            let e = s.value_at(t_next, self.w0);
            let drive = s.g * e;
            for p in 0..3 {
                rhs[3 * s.bus + p] += drive[p] + s.h[p];
            }
        }
        let motor_nodes: Vec<usize> = self
            .motors
            .iter()
            .map(|m| self.node(m.params.bus, m.params.phase))
            .collect::<Result<Vec<_>>>()?;
        for (k, m) in self.motors.iter_mut().enumerate() {
            rhs[motor_nodes[k]] += m.rhs_injection(self.dt, self.f0);
        }

        let v = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("instantaneous network solve".into()))?;

        // Histories for the next step.
        for br in &mut self.branches {
            let u = Vector3::from_fn(|p, _| v[3 * br.from + p] - v[3 * br.to + p]);
            let i_new = br.g * u + br.h;
            br.h = br.g * u + br.a * i_new;
            br.i = i_new;
        }
        for c in &mut self.caps {
            let vb = Vector3::from_fn(|p, _| v[3 * c.bus + p]);
            c.h = c.g * vb * 2.0 - c.h;
        }
        for s in &mut self.shunt_rls {
            let u = Vector3::from_fn(|p, _| v[3 * s.bus + p]);
            let i_new = s.g * u + s.h;
            s.h = s.g * u + s.a * i_new;
        }
        for l in &mut self.loads {
            let vn = v[l.node];
            if l.inductive {
                let i_new = l.g_x * vn + l.h;
                l.h = l.g_x * vn + i_new;
                l.i_x = i_new;
            } else {
                let i_new = l.g_x * vn - l.h;
                l.h = l.g_x * vn + i_new;
                l.i_x = i_new;
            }
        }
        for (si, s) in self.sources.iter_mut().enumerate() {
            let e = s.value_at(t_next, self.w0);
            let u = Vector3::from_fn(|p, _| e[p] - v[3 * s.bus + p]);
            let i_new = s.g * u + s.h;
            s.h = s.g * u + s.a * i_new;
            s.i = i_new;
            for p in 0..3 {
                self.src_rings[si][p].push(i_new[p]);
            }
        }
        for (k, m) in self.motors.iter_mut().enumerate() {
            let stalled = m.finish_step(v[motor_nodes[k]], self.dt, self.f0);
            if stalled {
                self.events.push(EmtStallEvent {
                    t: t_next,
                    motor: m.params.id.clone(),
                    bus: m.params.bus,
                    phase: m.params.phase,
                });
            }
        }
        for node in 0..self.n_nodes {
            self.v_rings[node].push(v[node]);
        }
        self.sample = next;
        self.samples_run += 1;
        Ok(())
    }

    /// True once a full fundamental cycle has been recorded.
    pub fn ready_for_extraction(&self) -> bool {
        self.samples_run >= self.samples_per_cycle() as u64
    }

    /// One cycle of node voltage samples, oldest first, together with the
    /// absolute sample index of the newest entry.
    pub fn voltage_window(&self, bus: BusId, phase: Phase) -> Result<(Vec<f64>, u64)> {
        let node = self.node(bus, phase)?;
        Ok((self.v_rings[node].ordered(), self.sample))
    }

    /// One cycle of boundary source current samples (flowing from the
    /// source into the network), oldest first.
    pub fn source_current_window(&self, bus: BusId, phase: Phase) -> Result<(Vec<f64>, u64)> {
        let si = self
            .sources
            .iter()
            .position(|s| s.bus_id == bus)
            .ok_or_else(|| Error::UnknownTarget(format!("boundary source at bus {bus}")))?;
        Ok((self.src_rings[si][phase.index()].ordered(), self.sample))
    }

    pub fn boundary_buses(&self) -> Vec<BusId> {
        self.sources.iter().map(|s| s.bus_id).collect()
    }

    /// Most recent solved voltage at a node (zero before the first step).
    pub fn instantaneous_voltage(&self, bus: BusId, phase: Phase) -> Result<f64> {
        Ok(self.v_rings[self.node(bus, phase)?].newest())
    }

    /// Present reactive-element current of each per-phase shunt load at a
    /// node, in the order the loads were supplied to `new`.
    pub fn shunt_reactive_currents(&self, bus: BusId, phase: Phase) -> Result<Vec<f64>> {
        let node = self.node(bus, phase)?;
        Ok(self
            .loads
            .iter()
            .filter(|l| l.node == node)
            .map(|l| l.i_x)
            .collect())
    }

    pub fn take_stall_events(&mut self) -> Vec<EmtStallEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn any_motor_stalled(&self) -> bool {
        self.motors.iter().any(|m| m.status == SpimStatus::Stalled)
    }

    /// Set every dynamic history so the circuit starts on the sinusoidal
    /// steady state implied by the per-bus voltage phasors (and the source
    /// targets already configured). Motors are re-created at their local
    /// steady state.
    pub fn init_from_phasors(&mut self, v_of: &dyn Fn(BusId) -> ThreePhasePhasor) -> Result<()> {
        let t = self.time();
        let w0 = self.w0;
        let rot = Cx::from_polar(1.0, w0 * t);
        let inst = |ph: Cx| (ph * rot).re;
        let net_buses = self.net_buses.clone();
        let vph: Vec<ThreePhasePhasor> = net_buses.iter().map(|b| v_of(*b)).collect();

        for br in &mut self.branches {
            let u = [
                vph[br.from].a - vph[br.to].a,
                vph[br.from].b - vph[br.to].b,
                vph[br.from].c - vph[br.to].c,
            ];
            // Z = R + jω0·L in phase coordinates.
            let z = Matrix3::from_fn(|i, j| Cx::new(br.r[(i, j)], w0 * br.l[(i, j)]));
            let zinv = z
                .try_inverse()
                .ok_or_else(|| Error::Singular("branch impedance".into()))?;
            let i_ph = zinv * nalgebra::Vector3::new(u[0], u[1], u[2]);
            let i0 = Vector3::from_fn(|p, _| inst(i_ph[p]));
            let u0 = Vector3::from_fn(|p, _| inst(u[p]));
            br.i = i0;
            br.h = br.g * u0 + br.a * i0;
        }
        for c in &mut self.caps {
            let vb = vph[c.bus].phases();
            let i_ph: Vec<Cx> = (0..3)
                .map(|r| {
                    (0..3)
                        .map(|k| Cx::new(0.0, w0 * c.c[(r, k)]) * vb[k])
                        .sum()
                })
                .collect();
            let v0 = Vector3::from_fn(|p, _| inst(vb[p]));
            let i0 = Vector3::from_fn(|p, _| inst(i_ph[p]));
            c.h = c.g * v0 + i0;
        }
        for s in &mut self.shunt_rls {
            let vb = vph[s.bus].phases();
            let z = Matrix3::from_fn(|i, j| Cx::new(s.r[(i, j)], w0 * s.l[(i, j)]));
            let zinv = z
                .try_inverse()
                .ok_or_else(|| Error::Singular("bus shunt impedance".into()))?;
            let i_ph = zinv * nalgebra::Vector3::new(vb[0], vb[1], vb[2]);
            let i0 = Vector3::from_fn(|p, _| inst(i_ph[p]));
            let u0 = Vector3::from_fn(|p, _| inst(vb[p]));
            s.h = s.g * u0 + s.a * i0;
        }
        for l in &mut self.loads {
            let bus = l.node / 3;
            let ph = l.node % 3;
            let vp = vph[bus].phases()[ph];
            let v0 = inst(vp);
            if l.g_x == 0.0 {
                l.h = 0.0;
                l.i_x = 0.0;
            } else if l.inductive {
                // i = v/(jω0·L); companion g_x = dt/(2L).
                let lval = self.dt / (2.0 * l.g_x);
                let i_ph = vp / Cx::new(0.0, w0 * lval);
                let i0 = inst(i_ph);
                l.i_x = i0;
                l.h = l.g_x * v0 + i0;
            } else {
                let cval = l.g_x * self.dt / 2.0;
                let i_ph = vp * Cx::new(0.0, w0 * cval);
                let i0 = inst(i_ph);
                l.i_x = i0;
                l.h = l.g_x * v0 + i0;
            }
        }
        for s in &mut self.sources {
            let (m, a) = s.params_at(t);
            let e_ph: Vec<Cx> = (0..3).map(|p| Cx::from_polar(m[p], a[p])).collect();
            let vb = vph[s.bus].phases();
            let z = Matrix3::from_fn(|i, j| Cx::new(s.r[(i, j)], w0 * s.l[(i, j)]));
            let zinv = z
                .try_inverse()
                .ok_or_else(|| Error::Singular("boundary source impedance".into()))?;
            let u_ph = nalgebra::Vector3::new(e_ph[0] - vb[0], e_ph[1] - vb[1], e_ph[2] - vb[2]);
            let i_ph = zinv * u_ph;
            let i0 = Vector3::from_fn(|p, _| inst(i_ph[p]));
            let u0 = Vector3::from_fn(|p, _| inst(u_ph[p]));
            s.i = i0;
            s.h = s.g * u0 + s.a * i0;
        }
        let dt = self.dt;
        let f0 = self.f0;
        for m in &mut self.motors {
            let bus_pos = net_buses.iter().position(|b| *b == m.params.bus).unwrap();
            let vp = vph[bus_pos].phases()[m.params.phase.index()];
            *m = Spim::init_steady(m.params.clone(), vp, t, dt, f0);
        }
        Ok(())
    }

    /// Extracted phasor of a node voltage, or `None` before a full cycle of
    /// samples exists.
    pub fn voltage_phasor(&self, bus: BusId, phase: Phase) -> Result<Option<Cx>> {
        if !self.ready_for_extraction() {
            return Ok(None);
        }
        let (w, last) = self.voltage_window(bus, phase)?;
        Ok(Some(crate::boundary::extract_phasor(
            &w,
            last,
            self.dt,
            self.f0,
        )))
    }

    /// Extracted three-phase voltage phasor set at a bus.
    pub fn bus_voltage_phasors(&self, bus: BusId) -> Result<Option<ThreePhasePhasor>> {
        let a = self.voltage_phasor(bus, Phase::A)?;
        let b = self.voltage_phasor(bus, Phase::B)?;
        let c = self.voltage_phasor(bus, Phase::C)?;
        Ok(match (a, b, c) {
            (Some(a), Some(b), Some(c)) => Some(ThreePhasePhasor::new(a, b, c)),
            _ => None,
        })
    }

    /// Extracted per-sequence injection current of a boundary source
    /// (positive into the network).
    pub fn source_injection_sequence(&self, bus: BusId) -> Result<Option<SequencePhasor>> {
        if !self.ready_for_extraction() {
            return Ok(None);
        }
        let mut phases = [Cx::new(0.0, 0.0); 3];
        for p in Phase::ALL {
            let (w, last) = self.source_current_window(bus, p)?;
            phases[p.index()] = crate::boundary::extract_phasor(&w, last, self.dt, self.f0);
        }
        let abc = ThreePhasePhasor::new(phases[0], phases[1], phases[2]);
        Ok(Some(crate::net::phase_to_seq(&abc)))
    }
}

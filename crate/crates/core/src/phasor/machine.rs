//! Two-axis synchronous machine with a first-order exciter and constant
//! mechanical power.
//!
//! The stator is interfaced to the network as the exact dq algebraic
//! solution; a constant admittance `1/(ra + j·xd')` is folded into the
//! positive-sequence Y matrix and the injection carries the compensation
//! term, which keeps the network fixed point fast even for salient machines.

use crate::{Cx, Result};
use crate::net::BusId;

#[derive(Debug, Clone)]
pub struct MachineParams {
    pub id: String,
    pub bus: BusId,
    /// Inertia constant, s (on system base).
    pub h: f64,
    /// Damping coefficient, pu torque per pu speed deviation.
    pub d: f64,
    pub ra: f64,
    pub xd: f64,
    pub xq: f64,
    pub xdp: f64,
    pub xqp: f64,
    pub td0p: f64,
    /// `tq0p == 0` marks a machine without q-axis transient dynamics
    /// (`ed' ≡ 0`, `xq' = xq`).
    pub tq0p: f64,
    /// Negative-sequence reactance.
    pub x2: f64,
    /// Exciter gain / time constant / ceiling.
    pub ka: f64,
    pub ta: f64,
    pub efd_max: f64,
    pub efd_min: f64,
    /// Dispatch for the power flow.
    pub pgen: f64,
    pub vset: f64,
    pub is_slack: bool,
}

impl MachineParams {
    /// Effective q-axis transient reactance: `xq` when q-axis dynamics are
    /// absent.
    pub fn xqp_eff(&self) -> f64 {
        if self.tq0p > 0.0 {
            self.xqp
        } else {
            self.xq
        }
    }

    /// Admittance folded into the positive-sequence network.
    pub fn y_internal(&self) -> Cx {
        Cx::new(1.0, 0.0) / Cx::new(self.ra, self.xdp)
    }

    /// Passive negative-sequence admittance.
    pub fn y_negative(&self) -> Cx {
        Cx::new(1.0, 0.0) / Cx::new(self.ra, self.x2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MachineState {
    /// Rotor angle, rad.
    pub delta: f64,
    /// Speed, pu (1.0 synchronous).
    pub omega: f64,
    pub eqp: f64,
    pub edp: f64,
    pub efd: f64,
    /// Mechanical power, pu (constant; no governor).
    pub pm: f64,
    /// Exciter reference voltage.
    pub vref: f64,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub params: MachineParams,
    pub state: MachineState,
}

/// dq currents and electrical power at one operating point.
#[derive(Debug, Clone, Copy)]
pub struct StatorSolution {
    pub id: f64,
    pub iq: f64,
    /// Network-frame stator current (generator convention, into network).
    pub i_net: Cx,
    /// Air-gap electrical power.
    pub pe: f64,
}

impl Machine {
    /// Solve the stator algebra for terminal voltage `v` (positive-sequence,
    /// network frame).
    pub fn stator(&self, v: Cx) -> StatorSolution {
        let p = &self.params;
        let s = &self.state;
        let rot = Cx::from_polar(1.0, s.delta - std::f64::consts::FRAC_PI_2);
        let vdq = v / rot;
        let (vd, vq) = (vdq.re, vdq.im);
        let xqp = p.xqp_eff();
        let det = p.ra * p.ra + p.xdp * xqp;
        let ed = s.edp - vd;
        let eq = s.eqp - vq;
        let id = (p.ra * ed + xqp * eq) / det;
        let iq = (-p.xdp * ed + p.ra * eq) / det;
        let i_net = Cx::new(id, iq) * rot;
        let pe = s.edp * id + s.eqp * iq + (xqp - p.xdp) * id * iq;
        StatorSolution { id, iq, i_net, pe }
    }

    /// Network injection including the folded-admittance compensation term.
    pub fn injection(&self, v: Cx) -> Cx {
        self.stator(v).i_net + self.params.y_internal() * v
    }

    /// State derivatives at terminal voltage `v`; `f0` is the system
    /// frequency in Hz.
    pub fn derivs(&self, v: Cx, f0: f64) -> [f64; 5] {
        let p = &self.params;
        let s = &self.state;
        let sol = self.stator(v);
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let d_delta = w0 * (s.omega - 1.0);
        let d_omega = (s.pm - sol.pe - p.d * (s.omega - 1.0)) / (2.0 * p.h);
        let d_eqp = (s.efd - s.eqp - (p.xd - p.xdp) * sol.id) / p.td0p;
        let d_edp = if p.tq0p > 0.0 {
            (-s.edp + (p.xq - p.xqp) * sol.iq) / p.tq0p
        } else {
            0.0
        };
        let mut d_efd = (p.ka * (s.vref - v.norm()) - s.efd) / p.ta;
        // Anti-windup at the ceiling.
        if (s.efd >= p.efd_max && d_efd > 0.0) || (s.efd <= p.efd_min && d_efd < 0.0) {
            d_efd = 0.0;
        }
        [d_delta, d_omega, d_eqp, d_edp, d_efd]
    }

    /// Initialize all states so every derivative is zero at the power-flow
    /// operating point (`v` terminal voltage, `s_gen` complex power output).
    pub fn initialize(params: MachineParams, v: Cx, s_gen: Cx) -> Result<Machine> {
        let i = (s_gen / v).conj();
        // Rotor angle from the q-axis internal voltage.
        let e = v + Cx::new(params.ra, params.xq) * i;
        let delta = e.arg();
        let rot = Cx::from_polar(1.0, delta - std::f64::consts::FRAC_PI_2);
        let idq = i / rot;
        let vdq = v / rot;
        let (id, iq) = (idq.re, idq.im);
        let (vd, vq) = (vdq.re, vdq.im);
        let xqp = if params.tq0p > 0.0 {
            params.xqp
        } else {
            params.xq
        };
        let eqp = vq + params.ra * iq + params.xdp * id;
        let edp = vd + params.ra * id - xqp * iq;
        let efd = eqp + (params.xd - params.xdp) * id;
        let vref = v.norm() + efd / params.ka;
        let pe = edp * id + eqp * iq + (xqp - params.xdp) * id * iq;
        let state = MachineState {
            delta,
            omega: 1.0,
            eqp,
            edp,
            efd,
            pm: pe,
            vref,
        };
        Ok(Machine { params, state })
    }

    /// Trapezoidal update given the derivative vectors at both ends of the
    /// step. Returns the new state (pm and vref are parameters in state
    /// clothing and never move).
    pub fn apply_trapezoid(&self, f_n: &[f64; 5], f_n1: &[f64; 5], dt: f64) -> MachineState {
        let s = &self.state;
        let half = dt / 2.0;
        let mut next = MachineState {
            delta: s.delta + half * (f_n[0] + f_n1[0]),
            omega: s.omega + half * (f_n[1] + f_n1[1]),
            eqp: s.eqp + half * (f_n[2] + f_n1[2]),
            edp: s.edp + half * (f_n[3] + f_n1[3]),
            efd: s.efd + half * (f_n[4] + f_n1[4]),
            pm: s.pm,
            vref: s.vref,
        };
        next.efd = next.efd.clamp(self.params.efd_min, self.params.efd_max);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_params() -> MachineParams {
        MachineParams {
            id: "g1".into(),
            bus: BusId(1),
            h: 6.4,
            d: 0.0,
            ra: 0.0,
            xd: 0.8958,
            xq: 0.8645,
            xdp: 0.1198,
            xqp: 0.1969,
            td0p: 6.0,
            tq0p: 0.535,
            x2: 0.15,
            ka: 25.0,
            ta: 0.2,
            efd_max: 5.0,
            efd_min: -5.0,
            pgen: 1.63,
            vset: 1.025,
            is_slack: false,
        }
    }

    #[test]
    fn initialization_zeroes_derivatives() {
        let v = Cx::from_polar(1.025, 0.065);
        let s = Cx::new(1.63, 0.067);
        let m = Machine::initialize(test_params(), v, s).unwrap();
        let f = m.derivs(v, 60.0);
        for (i, fi) in f.iter().enumerate() {
            assert!(fi.abs() < 1e-9, "derivative {i} = {fi}");
        }
    }

    #[test]
    fn initialization_reproduces_dispatch() {
        let v = Cx::from_polar(1.025, 0.065);
        let s = Cx::new(1.63, 0.067);
        let m = Machine::initialize(test_params(), v, s).unwrap();
        let sol = m.stator(v);
        let s_out = v * sol.i_net.conj();
        assert!((s_out - s).norm() < 1e-10);
    }

    #[test]
    fn pm_drop_decelerates() {
        let v = Cx::from_polar(1.025, 0.065);
        let s = Cx::new(1.63, 0.067);
        let mut m = Machine::initialize(test_params(), v, s).unwrap();
        m.state.pm -= 0.5;
        let f = m.derivs(v, 60.0);
        assert!(f[1] < 0.0, "omega derivative should turn negative");
    }

    #[test]
    fn salient_round_rotor_special_case() {
        // tq0p == 0 forces ed' = 0 at initialization.
        let mut p = test_params();
        p.tq0p = 0.0;
        let v = Cx::from_polar(1.04, 0.0);
        let s = Cx::new(0.716, 0.27);
        let m = Machine::initialize(p, v, s).unwrap();
        assert!(m.state.edp.abs() < 1e-12);
        let f = m.derivs(v, 60.0);
        for fi in f {
            assert!(fi.abs() < 1e-9);
        }
    }
}

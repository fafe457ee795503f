//! Single-phase induction motor for the instantaneous-value simulation.
//!
//! Cross-field formulation in the stationary frame: the single stator
//! winding excites the α axis only; rotor fluxes on both axes are state
//! variables, and the backward-rotating field emerges from the asymmetry.
//! The stator branch is eliminated into a series `Rs + X'/ω0` companion
//! with a back-EMF held over the (20 µs scale) step, so the motor appears
//! to the network as a conductance plus a history source on one phase.
//!
//! The classical double-revolving-field equivalent circuit of the same
//! machine serves as the independent steady-state reference: it provides
//! the initialization point, the locked-rotor impedance, and the data for
//! fitting the phasor-domain performance model.

use crate::net::{BusId, Phase};
use crate::Cx;

/// Instantaneous torque is `TORQUE_GAIN·(Xm/Xr)·ψβ·i`. The magnitude 2
/// reconciles the peak-valued waveform convention with phasor-pu powers
/// (time averages carry a ½ the phasor products do not), and the sign makes
/// motoring torque positive; both are pinned by the test comparing the
/// average against the double-revolving-field circuit.
const TORQUE_GAIN: f64 = -2.0;

/// Machine and load parameters. Impedances are on the motor's own base;
/// `mbase` converts to system base (`Z_system = Z_motor / mbase`).
#[derive(Debug, Clone)]
pub struct SpimParams {
    pub id: String,
    pub bus: BusId,
    pub phase: Phase,
    /// Motor MVA base as a fraction of the system base.
    pub mbase: f64,
    /// Stator resistance / leakage reactance, motor base.
    pub rs: f64,
    pub x1: f64,
    /// Magnetizing reactance, motor base.
    pub xm: f64,
    /// Rotor resistance / leakage reactance, motor base.
    pub r2: f64,
    pub x2: f64,
    /// Inertia constant, s (motor base).
    pub h: f64,
    /// Load torque `t_const + t_quad·ω²`, pu torque on motor base.
    pub t_const: f64,
    pub t_quad: f64,
    /// Speed threshold and hold time (cycles) for the stall latch.
    pub stall_speed: f64,
    pub stall_cycles: f64,
}

impl SpimParams {
    pub fn xs(&self) -> f64 {
        self.x1 + self.xm
    }
    pub fn xr(&self) -> f64 {
        self.x2 + self.xm
    }
    /// Stator transient reactance `Xs − Xm²/Xr`, motor base.
    pub fn x_transient(&self) -> f64 {
        self.xs() - self.xm * self.xm / self.xr()
    }

    /// Terminal impedance of the double-revolving-field equivalent circuit
    /// at slip `s`, motor base.
    pub fn circuit_impedance(&self, s: f64) -> Cx {
        let zf = Self::field_branch(self.xm, self.r2, self.x2, s);
        let zb = Self::field_branch(self.xm, self.r2, self.x2, 2.0 - s);
        Cx::new(self.rs, self.x1) + (zf + zb) * 0.5
    }

    fn field_branch(xm: f64, r2: f64, x2: f64, s: f64) -> Cx {
        let zr = Cx::new(r2 / s, x2);
        let jm = Cx::new(0.0, xm);
        jm * zr / (zr + jm)
    }

    /// Average electromagnetic torque at slip `s` and terminal voltage
    /// magnitude `v` (motor base, pu torque).
    pub fn circuit_torque(&self, s: f64, v: f64) -> f64 {
        let z = self.circuit_impedance(s);
        let i2 = (v / z.norm()).powi(2);
        let pf = 0.5 * Self::field_branch(self.xm, self.r2, self.x2, s).re;
        let pb = 0.5 * Self::field_branch(self.xm, self.r2, self.x2, 2.0 - s).re;
        i2 * (pf - pb)
    }

    /// Find the steady slip where the developed torque balances the load
    /// torque at voltage `v`. Returns `None` when no balance exists below
    /// the breakdown point (the motor cannot run at this voltage).
    pub fn balance_slip(&self, v: f64) -> Option<f64> {
        let margin = |s: f64| {
            let w = 1.0 - s;
            self.circuit_torque(s, v) - (self.t_const + self.t_quad * w * w)
        };
        // Breakdown slip: torque margin peaks somewhere below ~0.3 for
        // machine-like parameters; scan for a sign change from the low-slip
        // side.
        let mut lo = 1e-4;
        if margin(lo) > 0.0 {
            return Some(lo);
        }
        let mut hi = None;
        let mut s = lo;
        while s < 0.4 {
            if margin(s) > 0.0 {
                hi = Some(s);
                break;
            }
            s += 1e-3;
        }
        let mut hi = hi?;
        // margin(lo) < 0 < margin(hi): bisect to the stable intersection.
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if margin(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Locked-rotor admittance in system-base pu (for the phasor-domain
    /// stalled representation).
    pub fn locked_rotor_admittance_system(&self) -> Cx {
        let z_sys = self.circuit_impedance(1.0) / Cx::new(1.0 / self.mbase, 0.0);
        Cx::new(1.0, 0.0) / z_sys
    }

    /// Complex power drawn at steady state for voltage magnitude `v`
    /// (system-base pu, load convention). `None` when the motor cannot run.
    pub fn running_power_system(&self, v: f64) -> Option<Cx> {
        let s = self.balance_slip(v)?;
        let z = self.circuit_impedance(s);
        let i = Cx::new(v, 0.0) / z;
        let s_motor = Cx::new(v, 0.0) * i.conj();
        Some(s_motor * self.mbase)
    }
}

/// Steady-state phasor operating point of the cross-field model, used to
/// initialize instantaneous states and to cross-check the equivalent
/// circuit.
#[derive(Debug, Clone, Copy)]
pub struct SpimPhasorPoint {
    /// Stator current phasor (motor base, load convention).
    pub i_s: Cx,
    /// Rotor flux phasors in the stationary frame.
    pub psi_a: Cx,
    pub psi_b: Cx,
    /// Average developed torque, pu.
    pub torque_avg: f64,
}

/// Cross-field steady state at terminal voltage phasor `v` (motor base)
/// and rotor speed `w` (pu).
pub fn cross_field_point(p: &SpimParams, v: Cx, w: f64) -> SpimPhasorPoint {
    let xr = p.xr();
    let a = Cx::new(p.r2 / xr, 1.0); // j + Rr/Xr
    let k = Cx::new(p.r2 * p.xm / xr, 0.0);
    // ψβ = w·ψα / a;  ψα·(a + w²/a) = k·I.
    let c_psi = k / (a + Cx::new(w * w, 0.0) / a);
    // V = (Rs + jX')·I + j(Xm/Xr)·ψα.
    let zs = Cx::new(p.rs, p.x_transient());
    let i_s = v / (zs + Cx::new(0.0, p.xm / xr) * c_psi);
    let psi_a = c_psi * i_s;
    let psi_b = psi_a * Cx::new(w, 0.0) / a;
    // The instantaneous torque averages to ½·gain·(Xm/Xr)·Re(Ψβ·I*).
    let torque_avg = 0.5 * TORQUE_GAIN * (p.xm / xr) * (psi_b * i_s.conj()).re;
    SpimPhasorPoint {
        i_s,
        psi_a,
        psi_b,
        torque_avg,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpimStatus {
    Running,
    Stalled,
}

/// Instantaneous-value motor with its stator companion.
#[derive(Debug, Clone)]
pub struct Spim {
    pub params: SpimParams,
    /// Rotor fluxes in the stationary frame, motor base.
    pub psi_a: f64,
    pub psi_b: f64,
    /// Rotor speed, pu.
    pub speed: f64,
    pub status: SpimStatus,
    /// Stator current at the last accepted sample (motor base).
    pub i_s: f64,
    /// Companion history for the stator branch.
    hist: f64,
    /// Back-EMF held for the step in progress.
    e_held: f64,
    /// Consecutive samples below the stall speed.
    low_speed_samples: u32,
    /// Set once the stall latch has fired (one event per motor).
    stall_reported: bool,
}

impl Spim {
    /// Stator companion conductance in **system** base for step `dt`:
    /// `1/(R + 2L/dt)` of the series `Rs + X'/ω0` branch.
    pub fn conductance_system(&self, dt: f64, f0: f64) -> f64 {
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let p = &self.params;
        let r = p.rs / p.mbase;
        let l = p.x_transient() / p.mbase / w0;
        1.0 / (r + 2.0 * l / dt)
    }

    /// Initialize at the cross-field steady state balancing the load torque
    /// for the terminal voltage phasor `v_sys` (system base, peak-equals-pu
    /// convention with absolute time reference `cos(ω0·t + φ)` at `t`).
    pub fn init_steady(params: SpimParams, v_sys: Cx, t: f64, dt: f64, f0: f64) -> Spim {
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let rot = Cx::from_polar(1.0, w0 * t);
        let vm = v_sys.norm();
        let (speed, pt) = match params.balance_slip(vm) {
            Some(s) => {
                let w = 1.0 - s;
                (w, cross_field_point(&params, v_sys, w))
            }
            None => {
                // No running point at this voltage: start locked.
                (0.0, cross_field_point(&params, v_sys, 0.0))
            }
        };
        let inst = |ph: Cx| (ph * rot).re;
        let i_s0 = inst(pt.i_s);
        let psi_a0 = inst(pt.psi_a);
        let psi_b0 = inst(pt.psi_b);
        let e_b_ph = Cx::new(0.0, params.xm / params.xr()) * pt.psi_a;
        let e_b0 = inst(e_b_ph);
        let v0 = inst(v_sys);
        let mut m = Spim {
            params,
            psi_a: psi_a0,
            psi_b: psi_b0,
            speed,
            status: if speed > 0.5 {
                SpimStatus::Running
            } else {
                SpimStatus::Stalled
            },
            i_s: i_s0,
            hist: 0.0,
            e_held: e_b0,
            low_speed_samples: 0,
            stall_reported: false,
        };
        // Companion history consistent with the sinusoidal steady state.
        let g = m.conductance_system(dt, f0);
        let r_sys = m.params.rs / m.params.mbase;
        let u0 = v0 - e_b0;
        let i_sys = i_s0 * m.params.mbase;
        m.hist = g * u0 + (1.0 - 2.0 * g * r_sys) * i_sys;
        m
    }

    fn e_b(&self) -> f64 {
        let p = &self.params;
        let i_ar = (self.psi_a - p.xm * self.i_s) / p.xr();
        (p.xm / p.xr()) * (-p.r2 * i_ar - self.speed * self.psi_b)
    }

    /// History current for the next solve (system base): the motor draws
    /// `g·v − rhs_inject` from its node, so the assembled network adds `g`
    /// on the diagonal and this value to the right-hand side. The stator
    /// current is `i = g·(v − e) + hist`, so the node sees `g·e − hist`.
    pub fn rhs_injection(&mut self, dt: f64, f0: f64) -> f64 {
        self.e_held = self.e_b();
        let g = self.conductance_system(dt, f0);
        g * self.e_held - self.hist
    }

    /// Complete the step once the node voltage `v` (system base) is known.
    /// Returns true when the stall latch fires on this sample.
    pub fn finish_step(&mut self, v: f64, dt: f64, f0: f64) -> bool {
        let p = self.params.clone();
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let g = self.conductance_system(dt, f0);
        let r_sys = p.rs / p.mbase;
        let u = v - self.e_held;
        let i_sys = g * u + self.hist;
        self.hist = g * u + (1.0 - 2.0 * g * r_sys) * i_sys;
        let i_new = i_sys / p.mbase;
        let i_old = self.i_s;
        self.i_s = i_new;

        // Rotor fluxes: trapezoidal step of the linear system
        // ψ' = A·ψ + b(i_s), speed held over the step.
        let xr = p.xr();
        let a11 = -w0 * p.r2 / xr;
        let a12 = -w0 * self.speed;
        let a21 = w0 * self.speed;
        let a22 = a11;
        let b_of = |i: f64| w0 * p.r2 * p.xm * i / xr;
        let h = dt / 2.0;
        // (I − h·A)·ψ' = (I + h·A)·ψ + h·(b_n + b_{n+1}).
        let r1 = (1.0 + h * a11) * self.psi_a + h * a12 * self.psi_b + h * (b_of(i_old) + b_of(i_new));
        let r2 = h * a21 * self.psi_a + (1.0 + h * a22) * self.psi_b;
        let m11 = 1.0 - h * a11;
        let m12 = -h * a12;
        let m21 = -h * a21;
        let m22 = 1.0 - h * a22;
        let det = m11 * m22 - m12 * m21;
        let psi_a_new = (r1 * m22 - r2 * m12) / det;
        let psi_b_new = (m11 * r2 - m21 * r1) / det;
        let te_old = TORQUE_GAIN * (p.xm / xr) * self.psi_b * i_old;
        self.psi_a = psi_a_new;
        self.psi_b = psi_b_new;
        let te_new = TORQUE_GAIN * (p.xm / xr) * self.psi_b * self.i_s;

        // Mechanical trapezoid; the load torque is evaluated at the entry
        // speed (negligible lag at microsecond steps).
        let tl = p.t_const + p.t_quad * self.speed * self.speed;
        self.speed += dt / (4.0 * p.h) * ((te_old - tl) + (te_new - tl));
        if self.speed < 0.0 {
            // A seized compressor does not spin backwards.
            self.speed = 0.0;
        }

        // Stall latch: sustained low speed for the hold window, one-way.
        let hold = ((p.stall_cycles / f0) / dt).round().max(1.0) as u32;
        if self.speed < p.stall_speed {
            self.low_speed_samples = self.low_speed_samples.saturating_add(1);
        } else {
            self.low_speed_samples = 0;
        }
        if self.status == SpimStatus::Running && self.low_speed_samples >= hold {
            self.status = SpimStatus::Stalled;
        }
        if self.status == SpimStatus::Stalled && !self.stall_reported {
            self.stall_reported = true;
            return true;
        }
        false
    }

    /// Stator current in system base (load convention, into the motor).
    pub fn current_system(&self) -> f64 {
        self.i_s * self.params.mbase
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn test_params() -> SpimParams {
        SpimParams {
            id: "m".into(),
            bus: BusId(1),
            phase: Phase::A,
            mbase: 0.25,
            rs: 0.04,
            x1: 0.09,
            xm: 2.2,
            r2: 0.045,
            x2: 0.07,
            h: 0.04,
            t_const: 0.55,
            t_quad: 0.18,
            stall_speed: 0.5,
            stall_cycles: 1.0,
        }
    }

    /// The cross-field phasor solution and the double-revolving-field
    /// equivalent circuit are two derivations of the same machine; their
    /// terminal impedances must agree to rounding.
    #[test]
    fn cross_field_matches_equivalent_circuit() {
        let p = test_params();
        for s in [0.01, 0.03, 0.1, 0.5, 1.0] {
            let w = 1.0 - s;
            let v = Cx::new(1.0, 0.0);
            let pt = cross_field_point(&p, v, w);
            let z_cf = v / pt.i_s;
            let z_eq = p.circuit_impedance(s);
            assert!(
                (z_cf - z_eq).norm() < 1e-12,
                "slip {s}: {z_cf} vs {z_eq}"
            );
        }
    }

    #[test]
    fn average_torque_matches_field_powers() {
        let p = test_params();
        for s in [0.02, 0.05, 0.2, 0.8] {
            let pt = cross_field_point(&p, Cx::new(1.0, 0.0), 1.0 - s);
            let want = p.circuit_torque(s, 1.0);
            assert!(
                (pt.torque_avg - want).abs() < 1e-12,
                "slip {s}: {} vs {want}",
                pt.torque_avg
            );
        }
    }

    #[test]
    fn locked_rotor_draw_is_several_times_rated() {
        let p = test_params();
        let i_lr = 1.0 / p.circuit_impedance(1.0).norm();
        let i_rated = 1.0 / p.circuit_impedance(p.balance_slip(1.0).unwrap()).norm();
        let ratio = i_lr / i_rated;
        assert!((4.0..8.0).contains(&ratio), "locked-rotor ratio {ratio}");
    }

    #[test]
    fn balance_slip_vanishes_at_low_voltage() {
        let p = test_params();
        assert!(p.balance_slip(1.0).is_some());
        assert!(p.balance_slip(0.2).is_none());
    }

    #[test]
    fn torque_speed_curve_cannot_restart_from_standstill() {
        // With the α winding alone, developed torque at zero speed averages
        // zero — the latch keeps a stalled machine stalled.
        let p = test_params();
        let t0 = p.circuit_torque(1.0, 1.0);
        assert!(t0.abs() < 1e-12, "standstill torque {t0}");
    }

    /// Time-domain sanity: initialized at steady state and driven by the
    /// matching sinusoid, current and speed stay on the phasor solution.
    #[test]
    fn steady_state_holds_in_time_domain() {
        let p = test_params();
        let f0 = 60.0;
        let dt = 20e-6;
        let v_ph = Cx::new(0.98, 0.05);
        let mut m = Spim::init_steady(p.clone(), v_ph, 0.0, dt, f0);
        assert_eq!(m.status, SpimStatus::Running);
        let w_ref = m.speed;
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let steps = (0.5 / dt) as usize;
        let mut worst_i = 0.0_f64;
        let pt = cross_field_point(&p, v_ph / Cx::new(1.0, 0.0), w_ref);
        for k in 0..steps {
            let t_next = (k + 1) as f64 * dt;
            let _ = m.rhs_injection(dt, f0);
            let v = (v_ph * Cx::from_polar(1.0, w0 * t_next)).re;
            let stalled = m.finish_step(v, dt, f0);
            assert!(!stalled);
            if k > steps / 2 {
                let i_want = (pt.i_s * Cx::from_polar(1.0, w0 * t_next)).re;
                worst_i = worst_i.max((m.i_s - i_want).abs());
            }
        }
        assert!(
            (m.speed - w_ref).abs() < 0.02,
            "speed wandered {} -> {}",
            w_ref,
            m.speed
        );
        assert!(worst_i < 0.05, "current deviation {worst_i}");
    }

    /// Undervoltage collapse: a deep sag drives the speed down and fires
    /// the stall latch; recovery of the voltage does not restart it.
    #[test]
    fn deep_sag_stalls_and_latches() {
        let p = test_params();
        let f0 = 60.0;
        let dt = 20e-6;
        let mut m = Spim::init_steady(p, Cx::new(1.0, 0.0), 0.0, dt, f0);
        let w0 = 2.0 * std::f64::consts::PI * f0;
        let mut stalled_at = None;
        for k in 0..((0.4 / dt) as usize) {
            let t_next = (k + 1) as f64 * dt;
            let _ = m.rhs_injection(dt, f0);
            let vmag = if t_next < 0.25 { 0.25 } else { 1.0 };
            let v = vmag * (w0 * t_next).cos();
            if m.finish_step(v, dt, f0) {
                stalled_at = Some(t_next);
            }
        }
        let t_stall = stalled_at.expect("motor should have stalled");
        assert!(t_stall < 0.25, "stall latched during the sag, at {t_stall}");
        assert_eq!(m.status, SpimStatus::Stalled);
        assert!(m.speed < 0.1, "speed pinned near zero, got {}", m.speed);
        // Locked-rotor current magnitude after recovery matches the circuit.
        let i_lr = 1.0 / m.params.circuit_impedance(1.0).norm();
        let tail: f64 = m.i_s.abs();
        assert!(
            tail < 1.5 * i_lr,
            "locked current {tail} vs steady {i_lr}"
        );
    }
}

//! Performance-style air-conditioner motor model for the phasor domain.
//!
//! Running motors draw constant P with a quadratic voltage sensitivity on Q;
//! stalled motors collapse to the locked-rotor impedance. Status can flip
//! either autonomously (sustained low voltage) or by an external override
//! from the detailed simulation, and stalling is one-way.
//!
//! A motor is either a balanced aggregate (`phase = None`) or a
//! single-phase group riding on one phase (`phase = Some(p)`). Groups are
//! exact in the phase-coordinate representation; in sequence
//! representations they fall back to the balanced equivalent (the diagonal
//! part of their sequence coupling), which is what a conventional
//! positive-sequence study sees.

use crate::net::{phase_to_seq, BusId, Phase, SequencePhasor, ThreePhasePhasor};
use crate::Cx;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotorStatus {
    Running,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct AcMotorParams {
    pub id: String,
    pub bus: BusId,
    /// Phase carrying this group, or None for a balanced aggregate.
    pub phase: Option<Phase>,
    /// Rated active power draw of the whole group, pu on system base.
    pub p0: f64,
    /// Reactive draw at nominal voltage, pu.
    pub q0: f64,
    /// Q(v) sensitivity: `q = q0·(1 + b1·(v−1) + b2·(v−1)²)`.
    pub beta1: f64,
    pub beta2: f64,
    /// Locked-rotor phase admittance, pu on system base: the stalled group
    /// draws `i_ph = y_stall·v_ph` on its phase, i.e. power
    /// `|v|²·conj(y_stall)/3` in three-phase pu.
    pub y_stall: Cx,
    /// Below this voltage the running model continues as constant impedance
    /// anchored at the floor, so the injection stays bounded through faults.
    pub v_floor: f64,
    /// Autonomous stall trigger: voltage threshold and hold time in cycles.
    pub v_stall: f64,
    pub stall_cycles: f64,
}

#[derive(Debug, Clone)]
pub struct AcMotor {
    pub params: AcMotorParams,
    pub status: MotorStatus,
    /// True once the coordinator has taken charge of this motor's status;
    /// the autonomous trigger is then disabled.
    pub override_active: bool,
    /// Consecutive steps with v below the stall threshold.
    low_v_steps: u32,
}

impl AcMotor {
    pub fn new(params: AcMotorParams) -> AcMotor {
        AcMotor {
            params,
            status: MotorStatus::Running,
            override_active: false,
            low_v_steps: 0,
        }
    }

    /// Complex power drawn at voltage magnitude `v` (load convention,
    /// positive = consumed). For a single-phase group `v` is its own phase
    /// voltage; for an aggregate it is the positive-sequence magnitude.
    pub fn power(&self, v: f64) -> Cx {
        let p = &self.params;
        match self.status {
            MotorStatus::Stalled => {
                let s = Cx::new(v * v / 3.0, 0.0) * p.y_stall.conj();
                Cx::new(s.re, s.im)
            }
            MotorStatus::Running => {
                let dv = v - 1.0;
                let q = p.q0 * (1.0 + p.beta1 * dv + p.beta2 * dv * dv);
                if v >= p.v_floor {
                    Cx::new(p.p0, q)
                } else {
                    // Constant-impedance continuation below the floor.
                    let dvf = p.v_floor - 1.0;
                    let qf = p.q0 * (1.0 + p.beta1 * dvf + p.beta2 * dvf * dvf);
                    let scale = (v / p.v_floor).powi(2);
                    Cx::new(p.p0 * scale, qf * scale)
                }
            }
        }
    }

    /// Current injected into the network (generator convention, so a load
    /// injects the negative of its drawn current). Stalled motors inject
    /// nothing: their locked-rotor admittance is folded into the network
    /// matrix instead, which keeps the network fixed point contractive.
    pub fn injection(&self, v: Cx) -> Cx {
        if self.status == MotorStatus::Stalled {
            return Cx::new(0.0, 0.0);
        }
        let vm = v.norm();
        if vm < 1e-9 {
            return Cx::new(0.0, 0.0);
        }
        let s = self.power(vm);
        -(s / v).conj()
    }

    /// Full injection in sequence coordinates given the bus's phase
    /// voltages; used by phase-coordinate subsystems. A balanced aggregate
    /// injects a pure positive-sequence current; a single-phase group
    /// injects on its own phase (which couples all three sequences).
    pub fn injection_abc(&self, v: &ThreePhasePhasor) -> SequencePhasor {
        match self.params.phase {
            None => SequencePhasor::positive(self.injection(phase_to_seq(v).s1)),
            Some(ph) => {
                if self.status == MotorStatus::Stalled {
                    return SequencePhasor::ZERO;
                }
                let vp = v.phase(ph);
                let vm = vp.norm();
                if vm < 1e-9 {
                    return SequencePhasor::ZERO;
                }
                // Single-phase power S = v·i*/3 in three-phase pu, so the
                // phase current carries a factor 3.
                let s = self.power(vm);
                let ip = -(s * 3.0 / vp).conj();
                let mut abc = ThreePhasePhasor::ZERO;
                match ph {
                    Phase::A => abc.a = ip,
                    Phase::B => abc.b = ip,
                    Phase::C => abc.c = ip,
                }
                phase_to_seq(&abc)
            }
        }
    }

    /// Locked-rotor phase admittance to fold into the network matrix,
    /// present once stalled. Placement is representation-dependent: on the
    /// group's own phase diagonal in phase coordinates, or `y/3` per
    /// sequence as the balanced equivalent.
    pub fn folded_admittance(&self) -> Option<Cx> {
        match self.status {
            MotorStatus::Stalled => Some(self.params.y_stall),
            MotorStatus::Running => None,
        }
    }

    /// The voltage magnitude this motor's stall watchdog monitors: its own
    /// phase voltage when phase-resolved information is available,
    /// otherwise the positive-sequence magnitude.
    pub fn monitored_voltage(&self, v_abc: &ThreePhasePhasor) -> f64 {
        match self.params.phase {
            Some(ph) => v_abc.phase(ph).norm(),
            None => phase_to_seq(v_abc).s1.norm(),
        }
    }

    /// Advance the autonomous stall watchdog by one step of length `dt`
    /// at system frequency `f0`. Returns true if the motor stalled on this
    /// step.
    pub fn observe(&mut self, v: f64, dt: f64, f0: f64) -> bool {
        if self.override_active || self.status == MotorStatus::Stalled {
            return false;
        }
        if v < self.params.v_stall {
            self.low_v_steps += 1;
        } else {
            self.low_v_steps = 0;
        }
        let hold_steps = ((self.params.stall_cycles / f0) / dt).ceil() as u32;
        if self.low_v_steps >= hold_steps.max(1) {
            self.status = MotorStatus::Stalled;
            true
        } else {
            false
        }
    }

    /// External status command from the detailed simulation. Stalling is
    /// one-way: a run command on a stalled motor is ignored.
    pub fn apply_override(&mut self, run: bool) {
        self.override_active = true;
        if !run && self.status == MotorStatus::Running {
            self.status = MotorStatus::Stalled;
        }
    }

    pub fn release_override(&mut self) {
        self.override_active = false;
        self.low_v_steps = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motor() -> AcMotor {
        AcMotor::new(AcMotorParams {
            id: "m1".into(),
            bus: BusId(11),
            phase: None,
            p0: 0.2,
            q0: 0.1,
            beta1: -1.5,
            beta2: 6.0,
            y_stall: Cx::new(2.4, -12.0),
            v_floor: 0.35,
            v_stall: 0.55,
            stall_cycles: 2.0,
        })
    }

    #[test]
    fn running_power_at_nominal() {
        let m = motor();
        let s = m.power(1.0);
        assert!((s.re - 0.2).abs() < 1e-12);
        assert!((s.im - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stalled_power_is_constant_impedance() {
        let mut m = motor();
        m.apply_override(false);
        assert_eq!(m.status, MotorStatus::Stalled);
        let s1 = m.power(1.0);
        let s05 = m.power(0.5);
        assert!((s05.re - s1.re * 0.25).abs() < 1e-12);
        assert!((s05.im - s1.im * 0.25).abs() < 1e-12);
        // Locked-rotor draw: s = |v|²·conj(y)/3.
        assert!((s1 - Cx::new(0.8, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn autonomous_stall_needs_sustained_low_voltage() {
        let mut m = motor();
        let dt = 0.005;
        let f0 = 60.0;
        // 2 cycles at 60 Hz = 33.3 ms = 7 steps of 5 ms (ceil).
        for _ in 0..6 {
            assert!(!m.observe(0.4, dt, f0));
        }
        assert!(m.observe(0.4, dt, f0));
        assert_eq!(m.status, MotorStatus::Stalled);
    }

    #[test]
    fn recovery_resets_the_watchdog() {
        let mut m = motor();
        let dt = 0.005;
        for _ in 0..5 {
            m.observe(0.4, dt, 60.0);
        }
        m.observe(0.9, dt, 60.0);
        for _ in 0..6 {
            assert!(!m.observe(0.4, dt, 60.0));
        }
        assert_eq!(m.status, MotorStatus::Running);
    }

    #[test]
    fn override_disables_autonomous_trigger() {
        let mut m = motor();
        m.apply_override(true);
        for _ in 0..100 {
            assert!(!m.observe(0.2, 0.005, 60.0));
        }
        assert_eq!(m.status, MotorStatus::Running);
    }

    #[test]
    fn stall_is_one_way() {
        let mut m = motor();
        m.apply_override(false);
        m.apply_override(true);
        assert_eq!(m.status, MotorStatus::Stalled);
    }

    #[test]
    fn injection_matches_power() {
        let m = motor();
        let v = Cx::from_polar(0.97, 0.3);
        let i = m.injection(v);
        let s_drawn = v * (-i).conj();
        let s = m.power(0.97);
        assert!((s_drawn - s).norm() < 1e-12);
    }

    #[test]
    fn phase_group_injection_couples_sequences_and_conserves_power() {
        let mut m = motor();
        m.params.phase = Some(Phase::B);
        let v = ThreePhasePhasor::new(
            Cx::from_polar(1.01, 0.02),
            Cx::from_polar(0.93, -2.1),
            Cx::from_polar(0.99, 2.15),
        );
        let inj = m.injection_abc(&v);
        // Single-phase current splits equally across the sequences.
        assert!((inj.s1.norm() - inj.s2.norm()).abs() < 1e-12);
        assert!((inj.s1.norm() - inj.s0.norm()).abs() < 1e-12);
        // Drawn power (sequence power sum) equals the performance curve at
        // the group's own phase voltage.
        let vs = crate::net::phase_to_seq(&v);
        let s_drawn = -(vs.s1 * inj.s1.conj() + vs.s2 * inj.s2.conj() + vs.s0 * inj.s0.conj());
        let s = m.power(v.b.norm());
        assert!((s_drawn - s).norm() < 1e-12, "got {s_drawn}, want {s}");
        // The watchdog monitors phase B, not the positive sequence.
        assert!((m.monitored_voltage(&v) - 0.93).abs() < 1e-12);
    }
}

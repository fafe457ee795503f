//! Symmetrical-component (Fortescue) transforms.
//!
//! Internal matrix ordering is (zero, positive, negative); the exchange
//! structs follow the "120" labeling with fields ordered positive, negative,
//! zero. The synthesis matrix uses the operator `α = 1∠120°`:
//!
//! ```text
//! [a]   [1  1   1 ] [s0]
//! [b] = [1  α²  α ] [s1]
//! [c]   [1  α   α²] [s2]
//! ```
//!
//! and the analysis matrix is its inverse with the 1/3 factor (power-variant
//! convention), so `phase_to_seq(seq_to_phase(s)) == s` exactly up to
//! rounding.

use crate::Cx;
use nalgebra::Matrix3;

/// The rotation operator `α = e^{j2π/3}`.
pub fn alpha() -> Cx {
    Cx::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0)
}

/// Complex three-vector in sequence (012) coordinates, pu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequencePhasor {
    /// Positive sequence.
    pub s1: Cx,
    /// Negative sequence.
    pub s2: Cx,
    /// Zero sequence.
    pub s0: Cx,
}

/// Complex three-vector in phase (abc) coordinates, pu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreePhasePhasor {
    pub a: Cx,
    pub b: Cx,
    pub c: Cx,
}

impl SequencePhasor {
    pub const ZERO: SequencePhasor = SequencePhasor {
        s1: Cx::new(0.0, 0.0),
        s2: Cx::new(0.0, 0.0),
        s0: Cx::new(0.0, 0.0),
    };

    pub fn new(s1: Cx, s2: Cx, s0: Cx) -> Self {
        SequencePhasor { s1, s2, s0 }
    }

    /// Pure positive-sequence set.
    pub fn positive(s1: Cx) -> Self {
        SequencePhasor {
            s1,
            s2: Cx::new(0.0, 0.0),
            s0: Cx::new(0.0, 0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.s0, self.s1, self.s2]
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl ThreePhasePhasor {
    pub const ZERO: ThreePhasePhasor = ThreePhasePhasor {
        a: Cx::new(0.0, 0.0),
        b: Cx::new(0.0, 0.0),
        c: Cx::new(0.0, 0.0),
    };

    pub fn new(a: Cx, b: Cx, c: Cx) -> Self {
        ThreePhasePhasor { a, b, c }
    }

    /// Balanced positive-sequence set with phase-a value `a`.
    pub fn balanced(a: Cx) -> Self {
        let al = alpha();
        ThreePhasePhasor {
            a,
            b: a * al * al,
            c: a * al,
        }
    }

    pub fn phase(&self, p: Phase) -> Cx {
        match p {
            Phase::A => self.a,
            Phase::B => self.b,
            Phase::C => self.c,
        }
    }

    pub fn phases(&self) -> [Cx; 3] {
        [self.a, self.b, self.c]
    }

    pub fn is_finite(&self) -> bool {
        self.phases()
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Largest phase magnitude, useful for convergence monitoring.
    pub fn max_norm(&self) -> f64 {
        self.phases().iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

impl std::ops::Sub for ThreePhasePhasor {
    type Output = ThreePhasePhasor;
    fn sub(self, rhs: ThreePhasePhasor) -> ThreePhasePhasor {
        ThreePhasePhasor {
            a: self.a - rhs.a,
            b: self.b - rhs.b,
            c: self.c - rhs.c,
        }
    }
}

/// Phase label for single-phase elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Some(Phase::A),
            "b" => Some(Phase::B),
            "c" => Some(Phase::C),
            _ => None,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::A => write!(f, "a"),
            Phase::B => write!(f, "b"),
            Phase::C => write!(f, "c"),
        }
    }
}

/// Fortescue synthesis matrix `A` (column order zero, positive, negative).
pub fn synthesis_matrix() -> Matrix3<Cx> {
    let one = Cx::new(1.0, 0.0);
    let a = alpha();
    let a2 = a * a;
    Matrix3::new(one, one, one, one, a2, a, one, a, a2)
}

/// Analysis matrix `A⁻¹ = (1/3)·[[1,1,1],[1,α,α²],[1,α²,α]]`.
pub fn analysis_matrix() -> Matrix3<Cx> {
    let w = Cx::new(1.0 / 3.0, 0.0);
    let a = alpha();
    let a2 = a * a;
    Matrix3::new(w, w, w, w, w * a, w * a2, w, w * a2, w * a)
}

/// `[a,b,c]ᵀ = A·[s0,s1,s2]ᵀ`.
pub fn seq_to_phase(s: &SequencePhasor) -> ThreePhasePhasor {
    let a = alpha();
    let a2 = a * a;
    ThreePhasePhasor {
        a: s.s0 + s.s1 + s.s2,
        b: s.s0 + a2 * s.s1 + a * s.s2,
        c: s.s0 + a * s.s1 + a2 * s.s2,
    }
}

/// Exact inverse of [`seq_to_phase`].
pub fn phase_to_seq(p: &ThreePhasePhasor) -> SequencePhasor {
    let a = alpha();
    let a2 = a * a;
    let third = 1.0 / 3.0;
    SequencePhasor {
        s0: (p.a + p.b + p.c) * third,
        s1: (p.a + a * p.b + a2 * p.c) * third,
        s2: (p.a + a2 * p.b + a * p.c) * third,
    }
}

/// Transform a diagonal sequence admittance (or impedance) `diag(m0, m1, m2)`
/// into its 3×3 phase-coordinate block `A·diag·A⁻¹`.
pub fn seq_diag_to_phase(m0: Cx, m1: Cx, m2: Cx) -> Matrix3<Cx> {
    let a = synthesis_matrix();
    let ainv = analysis_matrix();
    let mut d = Matrix3::zeros();
    d[(0, 0)] = m0;
    d[(1, 1)] = m1;
    d[(2, 2)] = m2;
    a * d * ainv
}

//! Admittance matrix construction for every supported representation.
//!
//! Virtual breakers never appear here; they are solved in the MATE link
//! subsystem. Singular islands are not detected at build time — a floating
//! bus produces a singular factorization at solve time, which is where the
//! topology error is raised.

use super::fortescue::seq_diag_to_phase;
use super::{Branch, NetworkModel, Representation, Sequence, ZeroSeqConn};
use crate::Cx;
use nalgebra::DMatrix;

/// One sequence network block selector paired with its matrix.
#[derive(Debug, Clone)]
pub struct SeqBlock {
    pub seq: Sequence,
    pub y: DMatrix<Cx>,
}

/// Admittance matrices for a network in a given representation.
///
/// `PositiveSequence` holds one n×n block, `ThreeSequence` three n×n blocks
/// (positive, negative, zero — decoupled for balanced impedance data), and
/// `ThreePhase` a single 3n×3n phase-coordinate matrix with bus blocks in
/// (a, b, c) order.
#[derive(Debug, Clone)]
pub enum YbusSet {
    PositiveSequence(DMatrix<Cx>),
    ThreeSequence([DMatrix<Cx>; 3]),
    ThreePhase(DMatrix<Cx>),
}

impl YbusSet {
    pub fn rep(&self) -> Representation {
        match self {
            YbusSet::PositiveSequence(_) => Representation::PositiveSequence,
            YbusSet::ThreeSequence(_) => Representation::ThreeSequence,
            YbusSet::ThreePhase(_) => Representation::ThreePhase,
        }
    }
}

/// Series admittance of a branch in one sequence network, or `None` when the
/// branch contributes no series element there.
fn series_admittance(br: &Branch, seq: Sequence) -> Option<Cx> {
    if !br.is_closed() || br.is_virtual_breaker {
        return None;
    }
    let z = match seq {
        Sequence::Positive => br.z1,
        Sequence::Negative => br.z2,
        Sequence::Zero => match br.z0_conn {
            ZeroSeqConn::Series => br.z0,
            _ => return None,
        },
    };
    if z.norm() == 0.0 {
        return None;
    }
    Some(Cx::new(1.0, 0.0) / z)
}

/// Per-end shunt admittance contributed by a branch in one sequence network
/// (line charging plus zero-sequence grounding paths), as (from, to) pair.
fn branch_shunts(br: &Branch, seq: Sequence) -> (Cx, Cx) {
    if !br.is_closed() || br.is_virtual_breaker {
        return (Cx::new(0.0, 0.0), Cx::new(0.0, 0.0));
    }
    let half = |b: f64| Cx::new(0.0, b / 2.0);
    match seq {
        Sequence::Positive | Sequence::Negative => (half(br.b1), half(br.b1)),
        Sequence::Zero => {
            let mut from = half(br.b0);
            let mut to = half(br.b0);
            match br.z0_conn {
                ZeroSeqConn::ShuntFrom => {
                    if br.z0.norm() > 0.0 {
                        from += Cx::new(1.0, 0.0) / br.z0;
                    }
                }
                ZeroSeqConn::ShuntTo => {
                    if br.z0.norm() > 0.0 {
                        to += Cx::new(1.0, 0.0) / br.z0;
                    }
                }
                _ => {}
            }
            (from, to)
        }
    }
}

fn bus_shunt(net: &NetworkModel, i: usize, seq: Sequence) -> Cx {
    let b = &net.buses()[i];
    match seq {
        Sequence::Positive | Sequence::Negative => b.shunt1,
        Sequence::Zero => b.shunt0,
    }
}

/// Build one sequence-network admittance matrix (n×n).
pub fn build_sequence(net: &NetworkModel, seq: Sequence) -> DMatrix<Cx> {
    let n = net.n_buses();
    let mut y = DMatrix::zeros(n, n);
    for br in net.branches() {
        let fi = net.bus_index(br.from).expect("validated");
        let ti = net.bus_index(br.to).expect("validated");
        if let Some(ys) = series_admittance(br, seq) {
            let t = br.tap;
            y[(fi, fi)] += ys / (t * t);
            y[(ti, ti)] += ys;
            y[(fi, ti)] -= ys / t;
            y[(ti, fi)] -= ys / t;
        }
        let (sf, st) = branch_shunts(br, seq);
        y[(fi, fi)] += sf;
        y[(ti, ti)] += st;
    }
    for i in 0..n {
        y[(i, i)] += bus_shunt(net, i, seq);
    }
    y
}

/// Build the 3n×3n phase-coordinate matrix from the sequence data, one
/// similarity transform per branch element.
pub fn build_three_phase(net: &NetworkModel) -> DMatrix<Cx> {
    let n = net.n_buses();
    let zero = Cx::new(0.0, 0.0);
    let mut y = DMatrix::zeros(3 * n, 3 * n);
    let add_block = |y: &mut DMatrix<Cx>, bi: usize, bj: usize, m: &nalgebra::Matrix3<Cx>| {
        for r in 0..3 {
            for c in 0..3 {
                y[(3 * bi + r, 3 * bj + c)] += m[(r, c)];
            }
        }
    };
    for br in net.branches() {
        let fi = net.bus_index(br.from).expect("validated");
        let ti = net.bus_index(br.to).expect("validated");
        let ys0 = series_admittance(br, Sequence::Zero).unwrap_or(zero);
        let ys1 = series_admittance(br, Sequence::Positive).unwrap_or(zero);
        let ys2 = series_admittance(br, Sequence::Negative).unwrap_or(zero);
        if ys0 != zero || ys1 != zero || ys2 != zero {
            let yb = seq_diag_to_phase(ys0, ys1, ys2);
            let t = br.tap;
            add_block(&mut y, fi, fi, &(yb / Cx::new(t * t, 0.0)));
            add_block(&mut y, ti, ti, &yb);
            let off = yb / Cx::new(t, 0.0);
            add_block(&mut y, fi, ti, &(-off));
            add_block(&mut y, ti, fi, &(-off));
        }
        let (sf0, st0) = branch_shunts(br, Sequence::Zero);
        let (sf1, st1) = branch_shunts(br, Sequence::Positive);
        let (sf2, st2) = branch_shunts(br, Sequence::Negative);
        if (sf0, sf1, sf2) != (zero, zero, zero) {
            add_block(&mut y, fi, fi, &seq_diag_to_phase(sf0, sf1, sf2));
        }
        if (st0, st1, st2) != (zero, zero, zero) {
            add_block(&mut y, ti, ti, &seq_diag_to_phase(st0, st1, st2));
        }
    }
    for i in 0..n {
        let s0 = bus_shunt(net, i, Sequence::Zero);
        let s1 = bus_shunt(net, i, Sequence::Positive);
        if (s0, s1) != (zero, zero) {
            add_block(&mut y, i, i, &seq_diag_to_phase(s0, s1, s1));
        }
    }
    y
}

/// Build the admittance matrices of `net` for representation `rep`.
pub fn build_ybus(net: &NetworkModel, rep: Representation) -> YbusSet {
    match rep {
        Representation::PositiveSequence => {
            YbusSet::PositiveSequence(build_sequence(net, Sequence::Positive))
        }
        Representation::ThreeSequence => YbusSet::ThreeSequence([
            build_sequence(net, Sequence::Positive),
            build_sequence(net, Sequence::Negative),
            build_sequence(net, Sequence::Zero),
        ]),
        Representation::ThreePhase => YbusSet::ThreePhase(build_three_phase(net)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Branch, BranchStatus, Bus, BusId, BusKind, Side};

    fn bus(id: u32) -> Bus {
        Bus {
            id: BusId(id),
            base_kv: 230.0,
            kind: BusKind::Load,
            side: Side::External,
            shunt1: Cx::new(0.0, 0.0),
            shunt0: Cx::new(0.0, 0.0),
        }
    }

    fn two_bus(z1: Cx) -> NetworkModel {
        NetworkModel::new(
            vec![bus(1), bus(2)],
            vec![Branch::line(BusId(1), BusId(2), z1)],
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn two_bus_line_hand_computed() {
        // z = j0.1 ⇒ y = -10j; Y = [[-10j, 10j], [10j, -10j]]
        let net = two_bus(Cx::new(0.0, 0.1));
        let y = build_sequence(&net, Sequence::Positive);
        let tol = 1e-12;
        assert!((y[(0, 0)] - Cx::new(0.0, -10.0)).norm() < tol);
        assert!((y[(0, 1)] - Cx::new(0.0, 10.0)).norm() < tol);
        assert!((y[(1, 0)] - Cx::new(0.0, 10.0)).norm() < tol);
        assert!((y[(1, 1)] - Cx::new(0.0, -10.0)).norm() < tol);
    }

    #[test]
    fn open_branch_contributes_nothing() {
        let mut net = two_bus(Cx::new(0.0, 0.1));
        // Rebuild with the branch opened.
        let mut br = net.branches()[0].clone();
        br.status = BranchStatus::Open;
        net = NetworkModel::new(net.buses().to_vec(), vec![br], 100.0).unwrap();
        let y = build_sequence(&net, Sequence::Positive);
        assert!(y.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn balanced_line_negative_block_equals_positive() {
        let net = two_bus(Cx::new(0.01, 0.12));
        if let YbusSet::ThreeSequence([y1, y2, _]) = build_ybus(&net, Representation::ThreeSequence)
        {
            assert_eq!(y1, y2);
        } else {
            panic!("wrong variant");
        }
    }

    #[test]
    fn positive_build_equals_seq1_block() {
        let net = two_bus(Cx::new(0.02, 0.2));
        let y1 = build_sequence(&net, Sequence::Positive);
        if let YbusSet::ThreeSequence([s1, _, _]) = build_ybus(&net, Representation::ThreeSequence)
        {
            assert_eq!(y1, s1);
        } else {
            panic!("wrong variant");
        }
    }

    #[test]
    fn structural_symmetry_without_taps() {
        let mut br = Branch::line(BusId(1), BusId(2), Cx::new(0.01, 0.1));
        br.z0 = Cx::new(0.03, 0.3);
        br.b1 = 0.2;
        br.b0 = 0.1;
        let net = NetworkModel::new(vec![bus(1), bus(2)], vec![br], 100.0).unwrap();
        for seq in Sequence::ALL {
            let y = build_sequence(&net, seq);
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y[(i, j)], y[(j, i)]);
                }
            }
        }
        let y3 = build_three_phase(&net);
        for i in 0..6 {
            for j in 0..6 {
                assert!((y3[(i, j)] - y3[(j, i)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_zero_sequence_is_open() {
        let mut br = Branch::line(BusId(1), BusId(2), Cx::new(0.0, 0.1));
        br.z0_conn = ZeroSeqConn::Blocked;
        let net = NetworkModel::new(vec![bus(1), bus(2)], vec![br], 100.0).unwrap();
        let y0 = build_sequence(&net, Sequence::Zero);
        assert!(y0.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn shunt_to_grounds_the_to_side_only() {
        let mut br = Branch::line(BusId(1), BusId(2), Cx::new(0.0, 0.1));
        br.z0 = Cx::new(0.0, 0.05);
        br.z0_conn = ZeroSeqConn::ShuntTo;
        let net = NetworkModel::new(vec![bus(1), bus(2)], vec![br], 100.0).unwrap();
        let y0 = build_sequence(&net, Sequence::Zero);
        assert!(y0[(0, 0)].norm() < 1e-15);
        assert!((y0[(1, 1)] - Cx::new(0.0, -20.0)).norm() < 1e-12);
        assert!(y0[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn virtual_breaker_never_stamped() {
        let mut br = Branch::line(BusId(1), BusId(2), Cx::new(0.0, 0.0));
        br.is_virtual_breaker = true;
        let net = NetworkModel::new(vec![bus(1), bus(2)], vec![br], 100.0).unwrap();
        let y = build_sequence(&net, Sequence::Positive);
        assert!(y.iter().all(|c| c.norm() == 0.0));
    }
}

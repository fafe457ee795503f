//! Bus splitting: divide a network into a detailed and an external subsystem
//! joined by virtual breakers.
//!
//! For each boundary bus a dummy bus is created on the detailed side; every
//! branch that connected the boundary bus to a detailed-side bus is
//! re-terminated at the dummy, and a zero-impedance virtual breaker links the
//! (boundary, dummy) pair. The original boundary bus stays in the external
//! subsystem.

use super::{Branch, BranchStatus, Bus, BusId, BusKind, NetworkModel, Side, ZeroSeqConn};
use crate::{Cx, Error, Result};
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub detailed: NetworkModel,
    pub external: NetworkModel,
    /// (boundary bus in external, dummy bus in detailed) per virtual breaker.
    pub breakers: Vec<(BusId, BusId)>,
}

/// Split `net` at `boundary_buses`. Bus membership comes from each bus's
/// `side` field; boundary buses must be marked `External` (they stay with the
/// external system). A branch between a detailed and an external bus that
/// does not terminate at a boundary bus is a crossing violation.
pub fn split_network(net: &NetworkModel, boundary_buses: &[BusId]) -> Result<SplitResult> {
    if boundary_buses.is_empty() {
        return Err(Error::topology("boundary bus set is empty"));
    }
    let boundary: BTreeSet<BusId> = boundary_buses.iter().copied().collect();
    for &b in &boundary {
        let bus = net.bus(b)?;
        if bus.side != Side::External {
            return Err(Error::topology(format!(
                "boundary bus {b} must belong to the external side"
            )));
        }
    }

    // Crossing check: every detailed<->external branch must end at a boundary bus.
    let mut crossings = Vec::new();
    for br in net.branches() {
        let sf = net.bus(br.from)?.side;
        let st = net.bus(br.to)?.side;
        if sf != st {
            let ext_end = if sf == Side::External { br.from } else { br.to };
            if !boundary.contains(&ext_end) {
                crossings.push(format!("{}-{}", br.from, br.to));
            }
        }
    }
    if !crossings.is_empty() {
        return Err(Error::topology(format!(
            "boundary set does not separate the graph; crossing branches: {}",
            crossings.join(", ")
        )));
    }

    // Allocate dummy ids deterministically above the current maximum.
    let mut next_id = net.max_bus_id() + 1;
    let mut breakers = Vec::new();
    let mut detailed_buses: Vec<Bus> = Vec::new();
    let mut external_buses: Vec<Bus> = Vec::new();
    for bus in net.buses() {
        match bus.side {
            Side::Detailed => detailed_buses.push(bus.clone()),
            Side::External => external_buses.push(bus.clone()),
        }
    }
    for &b in &boundary {
        let src = net.bus(b)?;
        let dummy_id = BusId(next_id);
        next_id += 1;
        detailed_buses.push(Bus {
            id: dummy_id,
            base_kv: src.base_kv,
            kind: BusKind::Dummy,
            side: Side::Detailed,
            shunt1: Cx::new(0.0, 0.0),
            shunt0: Cx::new(0.0, 0.0),
        });
        breakers.push((b, dummy_id));
    }
    let dummy_of = |b: BusId| -> Option<BusId> {
        breakers
            .iter()
            .find(|(orig, _)| *orig == b)
            .map(|(_, d)| *d)
    };

    let mut detailed_branches: Vec<Branch> = Vec::new();
    let mut external_branches: Vec<Branch> = Vec::new();
    for br in net.branches() {
        let sf = net.bus(br.from)?.side;
        let st = net.bus(br.to)?.side;
        match (sf, st) {
            (Side::Detailed, Side::Detailed) => detailed_branches.push(br.clone()),
            (Side::External, Side::External) => external_branches.push(br.clone()),
            _ => {
                // Re-terminate the external (boundary) end at the dummy bus.
                let mut nb = br.clone();
                if sf == Side::External {
                    nb.from = dummy_of(br.from).expect("crossing already checked");
                } else {
                    nb.to = dummy_of(br.to).expect("crossing already checked");
                }
                detailed_branches.push(nb);
            }
        }
    }

    let detailed = NetworkModel::new(detailed_buses, detailed_branches, net.mva_base)?;
    let external = NetworkModel::new(external_buses, external_branches, net.mva_base)?;
    for (name, sub) in [("detailed", &detailed), ("external", &external)] {
        if !sub.is_connected() {
            return Err(Error::topology(format!(
                "{name} subsystem is not internally connected after splitting"
            )));
        }
    }
    Ok(SplitResult {
        detailed,
        external,
        breakers,
    })
}

/// The virtual-breaker link branch for a (boundary, dummy) pair.
pub fn breaker_branch(boundary: BusId, dummy: BusId) -> Branch {
    Branch {
        from: boundary,
        to: dummy,
        z1: Cx::new(0.0, 0.0),
        z2: Cx::new(0.0, 0.0),
        z0: Cx::new(0.0, 0.0),
        b1: 0.0,
        b0: 0.0,
        tap: 1.0,
        status: BranchStatus::Closed,
        is_virtual_breaker: true,
        z0_conn: ZeroSeqConn::Series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::BusKind;

    fn bus(id: u32, side: Side) -> Bus {
        Bus {
            id: BusId(id),
            base_kv: 100.0,
            kind: if side == Side::Detailed {
                BusKind::Load
            } else {
                BusKind::Generator
            },
            side,
            shunt1: Cx::new(0.0, 0.0),
            shunt0: Cx::new(0.0, 0.0),
        }
    }

    fn z() -> Cx {
        Cx::new(0.0, 0.1)
    }

    #[test]
    fn two_bus_full_split() {
        // boundary = bus 1 (external), detailed = bus 2.
        let net = NetworkModel::new(
            vec![bus(1, Side::External), bus(2, Side::Detailed)],
            vec![Branch::line(BusId(1), BusId(2), z())],
            100.0,
        )
        .unwrap();
        let r = split_network(&net, &[BusId(1)]).unwrap();
        assert_eq!(r.external.n_buses(), 1);
        assert_eq!(r.detailed.n_buses(), 2); // bus 2 + dummy
        assert_eq!(r.breakers.len(), 1);
        assert_eq!(r.breakers[0].0, BusId(1));
        assert_eq!(r.breakers[0].1, BusId(3));
    }

    #[test]
    fn four_bus_chain_counts_conserved() {
        // 1 - 2 - 3 - 4 split at bus 2 (external side keeps 1, 2).
        let net = NetworkModel::new(
            vec![
                bus(1, Side::External),
                bus(2, Side::External),
                bus(3, Side::Detailed),
                bus(4, Side::Detailed),
            ],
            vec![
                Branch::line(BusId(1), BusId(2), z()),
                Branch::line(BusId(2), BusId(3), z()),
                Branch::line(BusId(3), BusId(4), z()),
            ],
            100.0,
        )
        .unwrap();
        let r = split_network(&net, &[BusId(2)]).unwrap();
        // |detailed| + |external| = |original| + |boundary|
        assert_eq!(
            r.detailed.n_buses() + r.external.n_buses(),
            net.n_buses() + 1
        );
        // Every original branch assigned exactly once.
        assert_eq!(
            r.detailed.branches().len() + r.external.branches().len(),
            net.branches().len()
        );
        // The 2-3 branch now terminates at the dummy.
        let dummy = r.breakers[0].1;
        assert!(r
            .detailed
            .branches()
            .iter()
            .any(|b| (b.from == dummy && b.to == BusId(3)) || (b.to == dummy && b.from == BusId(3))));
    }

    #[test]
    fn non_separating_boundary_lists_crossings() {
        // 1(ext) - 2(det) and 1 - 3(det): split at nothing that separates.
        let net = NetworkModel::new(
            vec![bus(1, Side::External), bus(2, Side::Detailed), bus(3, Side::External)],
            vec![
                Branch::line(BusId(1), BusId(2), z()),
                Branch::line(BusId(3), BusId(2), z()),
                Branch::line(BusId(1), BusId(3), z()),
            ],
            100.0,
        )
        .unwrap();
        let err = split_network(&net, &[BusId(1)]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3-2"), "unexpected message: {msg}");
    }

    #[test]
    fn empty_boundary_rejected() {
        let net = NetworkModel::new(vec![bus(1, Side::External)], vec![], 100.0).unwrap();
        assert!(split_network(&net, &[]).is_err());
    }
}

//! Static network data model: buses, branches, per-unit bases, admittance
//! construction for every supported phasor representation, and splitting into
//! detailed/external subsystems joined by virtual breakers.

pub mod fortescue;
pub mod split;
pub mod ybus;

pub use fortescue::{
    phase_to_seq, seq_diag_to_phase, seq_to_phase, Phase, SequencePhasor, ThreePhasePhasor,
};
pub use split::{split_network, SplitResult};
pub use ybus::{build_sequence, build_three_phase, build_ybus, SeqBlock, YbusSet};

use crate::{Cx, Error, Result};
use std::collections::BTreeMap;

/// Bus identifier, unique within a [`NetworkModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BusId(pub u32);

impl std::fmt::Display for BusId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Load,
    Generator,
    Boundary,
    Dummy,
}

impl BusKind {
    pub fn parse(s: &str) -> Option<BusKind> {
        match s.to_ascii_lowercase().as_str() {
            "load" => Some(BusKind::Load),
            "generator" | "gen" => Some(BusKind::Generator),
            "boundary" => Some(BusKind::Boundary),
            "dummy" => Some(BusKind::Dummy),
            _ => None,
        }
    }
}

/// Which side of the detailed/external split a bus belongs to. Assigned
/// explicitly in the case file rather than inferred from graph cuts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Detailed,
    External,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s.to_ascii_lowercase().as_str() {
            "detailed" | "de" => Some(Side::Detailed),
            "external" | "ex" => Some(Side::External),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: BusId,
    /// Voltage base, kV (line-line).
    pub base_kv: f64,
    pub kind: BusKind,
    /// Subsystem membership from the case file.
    pub side: Side,
    /// Shunt admittance, positive/negative sequence (pu).
    pub shunt1: Cx,
    /// Shunt admittance, zero sequence (pu).
    pub shunt0: Cx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchStatus {
    Closed,
    Open,
}

/// Zero-sequence connectivity of a branch. Transformers with a delta winding
/// block zero-sequence flow; a grounded-wye winding provides a shunt path to
/// ground on its side through the transformer impedance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroSeqConn {
    /// Normal series element in the zero-sequence network (lines, Yg-Yg).
    Series,
    /// No zero-sequence path at all (delta-delta or ungrounded).
    Blocked,
    /// Shunt path `1/z0` to ground at the from-bus only (Yg on from side,
    /// delta on to side).
    ShuntFrom,
    /// Shunt path `1/z0` to ground at the to-bus only.
    ShuntTo,
}

impl ZeroSeqConn {
    pub fn parse(s: &str) -> Option<ZeroSeqConn> {
        match s.to_ascii_lowercase().as_str() {
            "series" => Some(ZeroSeqConn::Series),
            "blocked" => Some(ZeroSeqConn::Blocked),
            "shunt_from" => Some(ZeroSeqConn::ShuntFrom),
            "shunt_to" => Some(ZeroSeqConn::ShuntTo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series impedance per sequence (pu). `z2` defaults to `z1` for static
    /// branches.
    pub z1: Cx,
    pub z2: Cx,
    pub z0: Cx,
    /// Total line charging susceptance per sequence (pu).
    pub b1: f64,
    pub b0: f64,
    /// Off-nominal tap ratio on the from side; 1.0 if none.
    pub tap: f64,
    pub status: BranchStatus,
    /// Virtual breakers are zero-impedance links solved in the MATE link
    /// subsystem; they are never stamped into a Y matrix.
    pub is_virtual_breaker: bool,
    pub z0_conn: ZeroSeqConn,
}

impl Branch {
    /// Plain series line with equal sequence data and no charging.
    pub fn line(from: BusId, to: BusId, z1: Cx) -> Branch {
        Branch {
            from,
            to,
            z1,
            z2: z1,
            z0: z1,
            b1: 0.0,
            b0: 0.0,
            tap: 1.0,
            status: BranchStatus::Closed,
            is_virtual_breaker: false,
            z0_conn: ZeroSeqConn::Series,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.status == BranchStatus::Closed
    }
}

/// Phasor-domain modeling representation of a (sub)network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    PositiveSequence,
    ThreeSequence,
    ThreePhase,
}

/// Sequence network selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sequence {
    Positive,
    Negative,
    Zero,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::Positive, Sequence::Negative, Sequence::Zero];
}

/// Immutable network topology and impedance data. Construct once, share
/// freely; splitting produces new values.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    index: BTreeMap<BusId, usize>,
    /// System MVA base; all impedances are pu on this base.
    pub mva_base: f64,
}

impl NetworkModel {
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>, mva_base: f64) -> Result<NetworkModel> {
        let mut index = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if b.base_kv <= 0.0 {
                return Err(Error::topology(format!(
                    "bus {} has non-positive base_kv {}",
                    b.id, b.base_kv
                )));
            }
            if index.insert(b.id, i).is_some() {
                return Err(Error::topology(format!("duplicate bus id {}", b.id)));
            }
        }
        for br in &branches {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(Error::topology(format!(
                        "branch {}-{} references unknown bus {}",
                        br.from, br.to, end
                    )));
                }
            }
            if br.is_closed() && !br.is_virtual_breaker && br.z1.norm() == 0.0 {
                return Err(Error::topology(format!(
                    "closed branch {}-{} has zero impedance; only virtual breakers may be \
                     zero-impedance links",
                    br.from, br.to
                )));
            }
        }
        Ok(NetworkModel {
            buses,
            branches,
            index,
            mva_base,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Mutable branch access for switching actions; callers must rebuild
    /// any factorization derived from this model afterwards.
    pub fn branches_mut(&mut self) -> &mut [Branch] {
        &mut self.branches
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Dense matrix index of a bus.
    pub fn bus_index(&self, id: BusId) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::topology(format!("unknown bus {id}")))
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus> {
        self.bus_index(id).map(|i| &self.buses[i])
    }

    pub fn contains(&self, id: BusId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn max_bus_id(&self) -> u32 {
        self.buses.iter().map(|b| b.id.0).max().unwrap_or(0)
    }

    /// True if every bus can reach every other through closed, non-breaker
    /// branches.
    pub fn is_connected(&self) -> bool {
        if self.buses.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.buses.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let id = self.buses[i].id;
            for br in &self.branches {
                if !br.is_closed() {
                    continue;
                }
                let other = if br.from == id {
                    br.to
                } else if br.to == id {
                    br.from
                } else {
                    continue;
                };
                let j = self.index[&other];
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

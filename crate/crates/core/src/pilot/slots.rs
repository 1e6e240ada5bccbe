//! Per-node core/GPU occupancy and first-fit placement.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::events::NodeShare;

/// Resource shape of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Request {
    pub ranks: u32,
    pub cores_per_rank: u32,
    /// Whole-task GPU count.
    pub gpus: u32,
}

impl Request {
    pub fn cores(&self) -> u32 {
        self.ranks * self.cores_per_rank
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankSlot {
    pub node: u32,
    pub cores: Vec<u32>,
    pub gpus: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub uid: String,
    /// Indexed by rank.
    pub ranks: Vec<RankSlot>,
}

impl Placement {
    pub fn cores(&self) -> u32 {
        self.ranks.iter().map(|r| r.cores.len() as u32).sum()
    }

    pub fn gpus(&self) -> u32 {
        self.ranks.iter().map(|r| r.gpus.len() as u32).sum()
    }

    /// Per-node totals in ascending node order.
    pub fn shares(&self) -> Vec<NodeShare> {
        let mut by_node: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
        for r in &self.ranks {
            let e = by_node.entry(r.node).or_default();
            e.0 += r.cores.len() as u32;
            e.1 += r.gpus.len() as u32;
        }
        by_node
            .into_iter()
            .map(|(node, (cores, gpus))| NodeShare { node, cores, gpus })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotError {
    /// A slot in the placement is already held or does not exist.
    Conflict { node: u32 },
    /// A slot being released is not held by the given holder.
    NotHeld { node: u32 },
}

/// Core and GPU occupancy of every node. A slot is either free or held by
/// exactly one holder id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSlotMap {
    cores_per_node: u32,
    gpus_per_node: u32,
    cores: Vec<Vec<Option<u64>>>,
    gpus: Vec<Vec<Option<u64>>>,
}

impl NodeSlotMap {
    pub fn new(nodes: u32, cores_per_node: u32, gpus_per_node: u32) -> Self {
        NodeSlotMap {
            cores_per_node,
            gpus_per_node,
            cores: vec![vec![None; cores_per_node as usize]; nodes as usize],
            gpus: vec![vec![None; gpus_per_node as usize]; nodes as usize],
        }
    }

    pub fn nodes(&self) -> u32 {
        self.cores.len() as u32
    }

    pub fn cores_per_node(&self) -> u32 {
        self.cores_per_node
    }

    pub fn gpus_per_node(&self) -> u32 {
        self.gpus_per_node
    }

    pub fn free_cores(&self, node: u32) -> u32 {
        self.cores[node as usize].iter().filter(|s| s.is_none()).count() as u32
    }

    pub fn free_gpus(&self, node: u32) -> u32 {
        self.gpus[node as usize].iter().filter(|s| s.is_none()).count() as u32
    }

    pub fn held_cores(&self) -> u32 {
        (0..self.nodes())
            .map(|n| self.cores_per_node - self.free_cores(n))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.iter().chain(&self.gpus).flatten().all(Option::is_none)
    }

    fn node_is_free(&self, node: u32) -> bool {
        self.free_cores(node) == self.cores_per_node && self.free_gpus(node) == self.gpus_per_node
    }

    pub fn acquire(&mut self, p: &Placement, holder: u64) -> Result<(), SlotError> {
        for r in &p.ranks {
            let n = r.node as usize;
            let conflict = SlotError::Conflict { node: r.node };
            let cores = self.cores.get(n).ok_or(conflict)?;
            let gpus = &self.gpus[n];
            let busy = |v: &Vec<Option<u64>>, i: &u32| v.get(*i as usize).is_none_or(Option::is_some);
            if r.cores.iter().any(|c| busy(cores, c)) || r.gpus.iter().any(|g| busy(gpus, g)) {
                return Err(conflict);
            }
        }
        for r in &p.ranks {
            let n = r.node as usize;
            for c in &r.cores {
                self.cores[n][*c as usize] = Some(holder);
            }
            for g in &r.gpus {
                self.gpus[n][*g as usize] = Some(holder);
            }
        }
        Ok(())
    }

    pub fn release(&mut self, p: &Placement, holder: u64) -> Result<(), SlotError> {
        for r in &p.ranks {
            let n = r.node as usize;
            let held = |v: &Vec<Option<u64>>, i: &u32| v.get(*i as usize) == Some(&Some(holder));
            let ok = self.cores.get(n).is_some_and(|cs| r.cores.iter().all(|c| held(cs, c)))
                && r.gpus.iter().all(|g| held(&self.gpus[n], g));
            if !ok {
                return Err(SlotError::NotHeld { node: r.node });
            }
        }
        for r in &p.ranks {
            let n = r.node as usize;
            for c in &r.cores {
                self.cores[n][*c as usize] = None;
            }
            for g in &r.gpus {
                self.gpus[n][*g as usize] = None;
            }
        }
        Ok(())
    }

    fn free_run(&self, node: u32, len: u32, taken: &[bool]) -> Option<u32> {
        let slots = &self.cores[node as usize];
        let mut start = 0;
        let mut run = 0;
        for (i, s) in slots.iter().enumerate() {
            if s.is_none() && !taken[i] {
                if run == 0 {
                    start = i as u32;
                }
                run += 1;
                if run == len {
                    return Some(start);
                }
            } else {
                run = 0;
            }
        }
        None
    }
}

/// Whether `req` could ever be placed on an empty pilot of this geometry.
pub fn fits_pilot(req: &Request, slots: &NodeSlotMap) -> bool {
    let empty = NodeSlotMap::new(slots.nodes(), slots.cores_per_node, slots.gpus_per_node);
    schedule("", req, &empty).is_some()
}

/// First-fit placement, or `None` when the task must wait.
///
/// A task whose cores and GPUs fit one node goes to the lowest-index node
/// where every rank finds a contiguous free core run and enough GPUs are
/// free. Larger tasks take the lowest-index fully free nodes, packing
/// `cores_per_node / cores_per_rank` ranks per node.
pub fn schedule(uid: &str, req: &Request, slots: &NodeSlotMap) -> Option<Placement> {
    if req.ranks == 0 || req.cores_per_rank == 0 || req.cores_per_rank > slots.cores_per_node {
        return None;
    }
    let single = req.cores() <= slots.cores_per_node && req.gpus <= slots.gpus_per_node;
    let ranks = if single {
        (0..slots.nodes()).find_map(|n| place_on_node(req, slots, n))?
    } else {
        place_whole_nodes(req, slots)?
    };
    Some(Placement {
        uid: uid.to_string(),
        ranks,
    })
}

fn place_on_node(req: &Request, slots: &NodeSlotMap, node: u32) -> Option<Vec<RankSlot>> {
    if slots.free_cores(node) < req.cores() || slots.free_gpus(node) < req.gpus {
        return None;
    }
    let mut taken = vec![false; slots.cores_per_node as usize];
    let mut out = Vec::with_capacity(req.ranks as usize);
    for _ in 0..req.ranks {
        let start = slots.free_run(node, req.cores_per_rank, &taken)?;
        let cores: Vec<u32> = (start..start + req.cores_per_rank).collect();
        for c in &cores {
            taken[*c as usize] = true;
        }
        out.push(RankSlot {
            node,
            cores,
            gpus: Vec::new(),
        });
    }
    let mut free_gpus = slots.gpus[node as usize]
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| i as u32);
    for j in 0..req.gpus {
        out[(j % req.ranks) as usize].gpus.push(free_gpus.next()?);
    }
    Some(out)
}

fn place_whole_nodes(req: &Request, slots: &NodeSlotMap) -> Option<Vec<RankSlot>> {
    let per_node = slots.cores_per_node / req.cores_per_rank;
    let needed = req.ranks.div_ceil(per_node);
    let nodes: Vec<u32> = (0..slots.nodes())
        .filter(|n| slots.node_is_free(*n))
        .take(needed as usize)
        .collect();
    if (nodes.len() as u32) < needed {
        return None;
    }
    // GPUs are dealt round-robin over the task's nodes, then over the
    // ranks on each node.
    let used = nodes.len() as u32;
    let mut out: Vec<RankSlot> = (0..req.ranks)
        .map(|r| {
            let start = (r % per_node) * req.cores_per_rank;
            RankSlot {
                node: nodes[(r / per_node) as usize],
                cores: (start..start + req.cores_per_rank).collect(),
                gpus: Vec::new(),
            }
        })
        .collect();
    for (i, _) in nodes.iter().enumerate() {
        let i = i as u32;
        let share = req.gpus / used + u32::from(i < req.gpus % used);
        if share > slots.gpus_per_node {
            return None;
        }
        let first = i * per_node;
        let on_node = per_node.min(req.ranks - first);
        for g in 0..share {
            out[(first + g % on_node) as usize].gpus.push(g);
        }
    }
    Some(out)
}

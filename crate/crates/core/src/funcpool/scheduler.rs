//! Worker-group dispatch policy: strict FIFO intake, lowest-id idle
//! workers, optional reuse of previously built groups.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerStatus {
    Idle,
    Busy,
}

/// A group formed for one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch<T> {
    pub item: T,
    pub gid: u64,
    pub epoch: u64,
    /// World ranks in intra-rank order.
    pub members: Vec<u32>,
    /// False when the group came from the cache.
    pub constructed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TooLarge {
    pub k: usize,
    pub capacity: usize,
}

#[derive(Debug)]
pub struct GroupScheduler<T> {
    /// Index 0 is the master and never changes.
    status: Vec<WorkerStatus>,
    queue: VecDeque<(T, usize)>,
    active: BTreeMap<u64, (u64, Vec<u32>)>,
    cache: Option<HashMap<Vec<u32>, u64>>,
    next_gid: u64,
    next_epoch: u64,
}

impl<T> GroupScheduler<T> {
    /// `size` counts the master, so there are `size - 1` workers.
    pub fn new(size: usize, cache_groups: bool) -> Self {
        GroupScheduler {
            status: vec![WorkerStatus::Idle; size.max(1)],
            queue: VecDeque::new(),
            active: BTreeMap::new(),
            cache: cache_groups.then(HashMap::new),
            next_gid: 1,
            next_epoch: 1,
        }
    }

    pub fn capacity(&self) -> usize {
        self.status.len() - 1
    }

    pub fn worker_status(&self, rank: u32) -> Option<WorkerStatus> {
        if rank == 0 {
            return None;
        }
        self.status.get(rank as usize).copied()
    }

    pub fn busy_count(&self) -> usize {
        self.status[1..].iter().filter(|s| **s == WorkerStatus::Busy).count()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn active_groups(&self) -> impl Iterator<Item = (u64, &[u32])> {
        self.active.iter().map(|(epoch, (_, m))| (*epoch, m.as_slice()))
    }

    /// Accepts an invocation needing `k` workers and returns whatever can be
    /// dispatched now.
    pub fn submit(&mut self, item: T, k: usize) -> Result<Vec<Dispatch<T>>, TooLarge> {
        if k == 0 || k > self.capacity() {
            return Err(TooLarge {
                k,
                capacity: self.capacity(),
            });
        }
        self.queue.push_back((item, k));
        Ok(self.pump())
    }

    /// Frees the group of `epoch` and dispatches queued work that now fits.
    /// Unknown epochs are ignored.
    pub fn complete(&mut self, epoch: u64) -> Vec<Dispatch<T>> {
        if let Some((_, members)) = self.active.remove(&epoch) {
            for m in members {
                self.status[m as usize] = WorkerStatus::Idle;
            }
        }
        self.pump()
    }

    fn pump(&mut self) -> Vec<Dispatch<T>> {
        let mut out = Vec::new();
        while let Some((_, k)) = self.queue.front() {
            let k = *k;
            let idle: Vec<u32> = (1..self.status.len() as u32)
                .filter(|r| self.status[*r as usize] == WorkerStatus::Idle)
                .take(k)
                .collect();
            if idle.len() < k {
                break;
            }
            let (item, _) = self.queue.pop_front().unwrap();
            for m in &idle {
                self.status[*m as usize] = WorkerStatus::Busy;
            }
            let (gid, constructed) = match self.cache.as_mut().and_then(|c| c.get(&idle)) {
                Some(gid) => (*gid, false),
                None => {
                    let gid = self.next_gid;
                    self.next_gid += 1;
                    if let Some(c) = self.cache.as_mut() {
                        c.insert(idle.clone(), gid);
                    }
                    (gid, true)
                }
            };
            let epoch = self.next_epoch;
            self.next_epoch += 1;
            self.active.insert(epoch, (gid, idle.clone()));
            out.push(Dispatch {
                item,
                gid,
                epoch,
                members: idle,
                constructed,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowest_ids_form_the_group() {
        let mut s = GroupScheduler::new(9, false);
        let d = s.submit("a", 4).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].members, vec![1, 2, 3, 4]);
        assert_eq!(s.busy_count(), 4);
    }

    #[test]
    fn second_large_task_waits_for_capacity() {
        let mut s = GroupScheduler::new(9, false);
        let first = s.submit("a", 5).unwrap();
        assert!(s.submit("b", 5).unwrap().is_empty());
        assert_eq!(s.queued(), 1);
        let next = s.complete(first[0].epoch);
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].item, "b");
        assert_eq!(next[0].members, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn minimal_pool_takes_single_rank_tasks_only() {
        let mut s: GroupScheduler<()> = GroupScheduler::new(2, false);
        assert_eq!(s.capacity(), 1);
        assert!(s.submit((), 1).is_ok());
        assert_eq!(s.submit((), 2), Err(TooLarge { k: 2, capacity: 1 }));
        assert!(s.submit((), 0).is_err());
    }

    #[test]
    fn two_concurrent_groups_of_four_on_eight_workers() {
        let mut s = GroupScheduler::new(9, false);
        let a = s.submit(1, 4).unwrap();
        let b = s.submit(2, 4).unwrap();
        assert_eq!(a[0].members, vec![1, 2, 3, 4]);
        assert_eq!(b[0].members, vec![5, 6, 7, 8]);
        assert_eq!(s.worker_status(0), None);
    }

    #[test]
    fn cache_reuses_groups_with_identical_members() {
        let mut s = GroupScheduler::new(5, true);
        let a = s.submit(1, 2).unwrap().remove(0);
        assert!(a.constructed);
        s.complete(a.epoch);
        let b = s.submit(2, 2).unwrap().remove(0);
        assert!(!b.constructed);
        assert_eq!(b.gid, a.gid);
        assert_ne!(b.epoch, a.epoch);
        s.complete(b.epoch);
        let c = s.submit(3, 3).unwrap().remove(0);
        assert!(c.constructed);
    }

    #[test]
    fn head_of_line_blocks_smaller_followers() {
        let mut s = GroupScheduler::new(5, false);
        let a = s.submit("a", 3).unwrap().remove(0);
        assert!(s.submit("b", 3).unwrap().is_empty());
        // one worker is idle, but FIFO keeps "c" behind "b"
        assert!(s.submit("c", 1).unwrap().is_empty());
        let next: Vec<_> = s.complete(a.epoch).into_iter().map(|d| d.item).collect();
        assert_eq!(next, vec!["b", "c"]);
    }
}

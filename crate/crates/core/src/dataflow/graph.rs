use std::collections::{BTreeSet, HashMap, VecDeque};

use super::DataflowError;
use crate::task::{validate_task, TaskDescription};

/// Dependency DAG over a fixed task list. Each node keeps a counter of
/// producers that are not yet DONE.
#[derive(Debug, Clone)]
pub struct TaskGraph {
    tasks: Vec<TaskDescription>,
    index: HashMap<String, usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    pending: Vec<usize>,
    done: Vec<bool>,
}

impl TaskGraph {
    pub fn build(tasks: Vec<TaskDescription>) -> Result<TaskGraph, DataflowError> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            let report = validate_task(t);
            if !report.is_ok() {
                return Err(DataflowError::InvalidTask {
                    uid: t.uid.clone(),
                    reason: report.to_string(),
                });
            }
            if index.insert(t.uid.clone(), i).is_some() {
                return Err(DataflowError::DuplicateUid(t.uid.clone()));
            }
        }
        let n = tasks.len();
        let mut producers = vec![Vec::new(); n];
        let mut consumers = vec![Vec::new(); n];
        for (i, t) in tasks.iter().enumerate() {
            for dep in &t.depends_on {
                let &p = index.get(dep).ok_or_else(|| DataflowError::UnknownDependency {
                    task: t.uid.clone(),
                    dependency: dep.clone(),
                })?;
                producers[i].push(p);
                consumers[p].push(i);
            }
        }
        let pending = producers.iter().map(Vec::len).collect();
        let g = TaskGraph {
            tasks,
            index,
            producers,
            consumers,
            pending,
            done: vec![false; n],
        };
        if let Some(cycle) = g.find_cycle() {
            return Err(DataflowError::CycleDetected(cycle));
        }
        Ok(g)
    }

    /// One cycle as a uid path whose last element depends on the first.
    fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on the current path, 2 = finished
        let mut color = vec![0u8; self.tasks.len()];
        let mut path: Vec<usize> = Vec::new();
        for start in 0..self.tasks.len() {
            if color[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            color[start] = 1;
            path.push(start);
            while let Some((node, edge)) = stack.last_mut() {
                let node = *node;
                if let Some(&next) = self.producers[node].get(*edge) {
                    *edge += 1;
                    match color[next] {
                        0 => {
                            color[next] = 1;
                            path.push(next);
                            stack.push((next, 0));
                        }
                        1 => {
                            let from = path.iter().position(|&p| p == next).unwrap();
                            let mut cycle: Vec<String> =
                                path[from..].iter().map(|&i| self.tasks[i].uid.clone()).collect();
                            // producers were followed, so reverse into dependency order
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    color[node] = 2;
                    path.pop();
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskDescription] {
        &self.tasks
    }

    pub fn task(&self, uid: &str) -> Option<&TaskDescription> {
        self.index.get(uid).map(|&i| &self.tasks[i])
    }

    fn idx(&self, uid: &str) -> Result<usize, DataflowError> {
        self.index
            .get(uid)
            .copied()
            .ok_or_else(|| DataflowError::UnknownUid(uid.to_string()))
    }

    /// Producers of `uid` that are not yet DONE.
    pub fn counter(&self, uid: &str) -> Result<usize, DataflowError> {
        Ok(self.pending[self.idx(uid)?])
    }

    /// Tasks with no producers, in input order.
    pub fn roots(&self) -> Vec<String> {
        (0..self.tasks.len())
            .filter(|&i| self.producers[i].is_empty())
            .map(|i| self.tasks[i].uid.clone())
            .collect()
    }

    /// Marks `completed` DONE and returns the consumers whose counters reach
    /// zero, in input order. A second call for the same uid returns nothing.
    pub fn resolve_dependencies(&mut self, completed: &str) -> Result<Vec<String>, DataflowError> {
        let c = self.idx(completed)?;
        if self.done[c] {
            return Ok(Vec::new());
        }
        self.done[c] = true;
        let mut ready = Vec::new();
        for &k in &self.consumers[c] {
            self.pending[k] -= 1;
            if self.pending[k] == 0 {
                ready.push(k);
            }
        }
        ready.sort_unstable();
        Ok(ready.into_iter().map(|i| self.tasks[i].uid.clone()).collect())
    }

    /// Every task reachable from `failed` through consumer edges, excluding
    /// `failed` itself, each paired with the dependency path that reached it
    /// first (breadth-first, consumers in input order).
    pub fn propagate_failure(&self, failed: &str) -> Result<Vec<(String, Vec<String>)>, DataflowError> {
        let f = self.idx(failed)?;
        let mut parent: HashMap<usize, usize> = HashMap::new();
        let mut seen = BTreeSet::from([f]);
        let mut queue = VecDeque::from([f]);
        let mut order = Vec::new();
        while let Some(n) = queue.pop_front() {
            let mut next = self.consumers[n].clone();
            next.sort_unstable();
            for k in next {
                if seen.insert(k) {
                    parent.insert(k, n);
                    order.push(k);
                    queue.push_back(k);
                }
            }
        }
        Ok(order
            .into_iter()
            .map(|k| {
                let mut chain = vec![self.tasks[k].uid.clone()];
                let mut cur = k;
                while let Some(&p) = parent.get(&cur) {
                    chain.push(self.tasks[p].uid.clone());
                    cur = p;
                }
                chain.reverse();
                (self.tasks[k].uid.clone(), chain)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(uid: &str, deps: &[&str]) -> TaskDescription {
        TaskDescription::function(uid, "noop").after(deps.iter().copied())
    }

    fn diamond() -> TaskGraph {
        TaskGraph::build(vec![t("A", &[]), t("B", &["A"]), t("C", &["A"]), t("D", &["B", "C"])]).unwrap()
    }

    #[test]
    fn diamond_resolution() {
        let mut g = diamond();
        assert_eq!(g.roots(), vec!["A"]);
        assert_eq!(g.resolve_dependencies("A").unwrap(), vec!["B", "C"]);
        assert!(g.resolve_dependencies("B").unwrap().is_empty());
        assert_eq!(g.counter("D").unwrap(), 1);
        assert_eq!(g.resolve_dependencies("C").unwrap(), vec!["D"]);
        assert!(g.resolve_dependencies("C").unwrap().is_empty());
    }

    #[test]
    fn diamond_failure_reaches_everything_downstream() {
        let g = diamond();
        let failed: Vec<String> = g.propagate_failure("A").unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(failed, vec!["B", "C", "D"]);
        let chains = g.propagate_failure("A").unwrap();
        assert_eq!(chains[2].1, vec!["A", "B", "D"]);
    }

    #[test]
    fn independent_failure_touches_nothing_else() {
        let g = TaskGraph::build(vec![t("X", &[]), t("Y", &[])]).unwrap();
        assert!(g.propagate_failure("X").unwrap().is_empty());
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            TaskGraph::build(vec![t("a", &[]), t("a", &[])]).unwrap_err(),
            DataflowError::DuplicateUid("a".into())
        );
        assert_eq!(
            TaskGraph::build(vec![t("a", &["zz"])]).unwrap_err(),
            DataflowError::UnknownDependency {
                task: "a".into(),
                dependency: "zz".into()
            }
        );
        let err = TaskGraph::build(vec![t("a", &["c"]), t("b", &["a"]), t("c", &["b"]), t("d", &[])]).unwrap_err();
        let DataflowError::CycleDetected(cycle) = err else {
            panic!("expected a cycle, got {err:?}");
        };
        assert_eq!(cycle.len(), 3);
        // each element depends on the one before it, wrapping around
        let g: HashMap<&str, Vec<&str>> = HashMap::from([("a", vec!["c"]), ("b", vec!["a"]), ("c", vec!["b"])]);
        for i in 0..3 {
            let (prev, cur) = (&cycle[i], &cycle[(i + 1) % 3]);
            assert!(g[cur.as_str()].contains(&prev.as_str()), "{cycle:?}");
        }
        assert!(matches!(
            TaskGraph::build(vec![t("a", &["a"])]).unwrap_err(),
            DataflowError::InvalidTask { .. }
        ));
        assert_eq!(
            diamond().resolve_dependencies("Q").unwrap_err(),
            DataflowError::UnknownUid("Q".into())
        );
    }

    fn random_dag(n: usize, edges: &[(usize, usize)]) -> Vec<TaskDescription> {
        // edges only point from lower to higher index, so the graph is acyclic
        (0..n)
            .map(|i| {
                let mut deps: Vec<String> = edges
                    .iter()
                    .filter(|(a, b)| *b == i && a < b)
                    .map(|(a, _)| format!("n{a}"))
                    .collect();
                deps.sort();
                deps.dedup();
                TaskDescription::function(format!("n{i}"), "noop").after(deps)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn each_node_becomes_ready_exactly_once(
            edges in proptest::collection::vec((0usize..50, 0usize..50), 0..200),
            seed in any::<u64>(),
        ) {
            let tasks = random_dag(50, &edges);
            let mut g = TaskGraph::build(tasks.clone()).unwrap();
            let mut ready: Vec<String> = g.roots();
            let mut became_ready: HashMap<String, usize> =
                ready.iter().map(|u| (u.clone(), 1)).collect();
            let mut done: BTreeSet<String> = BTreeSet::new();
            let mut rng = seed;
            while !ready.is_empty() {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let pick = (rng >> 33) as usize % ready.len();
                let uid = ready.swap_remove(pick);
                let newly = g.resolve_dependencies(&uid).unwrap();
                done.insert(uid);
                // brute-force indegree oracle over the original descriptions
                for t in &tasks {
                    let open = t.depends_on.iter().filter(|d| !done.contains(*d)).count();
                    prop_assert_eq!(g.counter(&t.uid).unwrap(), open);
                }
                for u in newly {
                    *became_ready.entry(u.clone()).or_default() += 1;
                    ready.push(u);
                }
            }
            prop_assert_eq!(became_ready.len(), 50);
            prop_assert!(became_ready.values().all(|c| *c == 1));
        }

        #[test]
        fn failure_set_equals_reachability(
            edges in proptest::collection::vec((0usize..50, 0usize..50), 0..200),
            root in 0usize..50,
        ) {
            let tasks = random_dag(50, &edges);
            let g = TaskGraph::build(tasks.clone()).unwrap();
            // DFS oracle over the reversed dependency lists
            let mut reach = BTreeSet::new();
            let mut stack = vec![format!("n{root}")];
            while let Some(u) = stack.pop() {
                for t in &tasks {
                    if t.depends_on.contains(&u) && reach.insert(t.uid.clone()) {
                        stack.push(t.uid.clone());
                    }
                }
            }
            let got: BTreeSet<String> = g
                .propagate_failure(&format!("n{root}"))
                .unwrap()
                .into_iter()
                .map(|x| x.0)
                .collect();
            prop_assert_eq!(got, reach);
        }
    }
}

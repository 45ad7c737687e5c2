//! Tree-structured dynamic scheduler.
//!
//! Process `i` has parent `(i - 1) / fanout`, so the tree is a complete
//! `fanout`-ary heap rooted at process 0. At the start of a stage a share
//! of the tasks is dealt out statically to all processes. The rest stays
//! with the root. A process whose queue runs dry asks its parent, which
//! hands down part of its own queue, asking further up when it is empty
//! too. Every process is both a worker and, for its children, a
//! distributor.

use crate::error::{Error, Result};
use skyvi_core::config::RuntimeConfig;
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Policy {
    pub fanout: usize,
    pub initial_fraction: f64,
    pub refill_fraction: f64,
}

impl From<&RuntimeConfig> for Policy {
    fn from(c: &RuntimeConfig) -> Self {
        Policy {
            fanout: c.fanout,
            initial_fraction: c.initial_fraction,
            refill_fraction: c.refill_fraction,
        }
    }
}

impl Default for Policy {
    fn default() -> Self {
        Policy::from(&RuntimeConfig::default())
    }
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if self.fanout == 0 {
            return Err(Error::invalid("fanout must be at least 1"));
        }
        for (name, v) in [("initial_fraction", self.initial_fraction), ("refill_fraction", self.refill_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerNode {
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub children_ids: Vec<usize>,
    pub local_queue: VecDeque<u64>,
    pub fan_out: usize,
}

/// A task as the scheduler sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskRef {
    pub id: u64,
    /// Used only to balance the static deal.
    pub work: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub task: Option<u64>,
    /// Requests and replies exchanged between tree neighbors.
    pub messages: u32,
}

#[derive(Clone, Debug)]
pub struct Dtree {
    nodes: Vec<SchedulerNode>,
    subtree: Vec<usize>,
    depth: Vec<usize>,
    policy: Policy,
}

impl Dtree {
    pub fn new(processes: usize, policy: Policy) -> Result<Self> {
        policy.validate()?;
        if processes == 0 {
            return Err(Error::invalid("need at least one process"));
        }
        let f = policy.fanout;
        let mut nodes: Vec<SchedulerNode> = (0..processes)
            .map(|i| SchedulerNode {
                node_id: i,
                parent_id: (i > 0).then(|| (i - 1) / f),
                children_ids: Vec::new(),
                local_queue: VecDeque::new(),
                fan_out: f,
            })
            .collect();
        let mut depth = vec![0; processes];
        for i in 1..processes {
            let p = (i - 1) / f;
            nodes[p].children_ids.push(i);
            depth[i] = depth[p] + 1;
        }
        let mut subtree = vec![1; processes];
        for i in (1..processes).rev() {
            subtree[(i - 1) / f] += subtree[i];
        }
        Ok(Dtree {
            nodes,
            subtree,
            depth,
            policy,
        })
    }

    pub fn nodes(&self) -> &[SchedulerNode] {
        &self.nodes
    }

    pub fn processes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of levels.
    pub fn height(&self) -> usize {
        self.depth.iter().max().map_or(0, |d| d + 1)
    }

    /// `ceil(log_fanout(n)) + 1`; a chain for fanout 1.
    pub fn height_bound(processes: usize, fanout: usize) -> usize {
        if fanout == 1 {
            return processes;
        }
        let mut levels = 0;
        let mut reach = 1usize;
        while reach < processes {
            reach = reach.saturating_mul(fanout);
            levels += 1;
        }
        levels + 1
    }

    /// Tasks still queued anywhere in the tree.
    pub fn remaining(&self) -> usize {
        self.nodes.iter().map(|n| n.local_queue.len()).sum()
    }

    /// Starts a stage. The first `initial_fraction` of the tasks go one at
    /// a time to the process with the least dealt work so far (lowest id on
    /// ties); the rest queue at the root in the given order.
    pub fn load_stage(&mut self, tasks: &[TaskRef]) -> Result<()> {
        if self.remaining() > 0 {
            return Err(Error::invalid(format!("{} tasks of the previous stage are still queued", self.remaining())));
        }
        let n_static = (self.policy.initial_fraction * tasks.len() as f64).floor() as usize;
        let mut dealt = vec![0.0f64; self.nodes.len()];
        for t in &tasks[..n_static] {
            let p = (0..dealt.len())
                .min_by(|&a, &b| dealt[a].total_cmp(&dealt[b]).then(a.cmp(&b)))
                .expect("at least one process");
            dealt[p] += t.work;
            self.nodes[p].local_queue.push_back(t.id);
        }
        self.nodes[0].local_queue.extend(tasks[n_static..].iter().map(|t| t.id));
        Ok(())
    }

    /// Next task for `node`: from its own queue, or handed down from the
    /// nearest ancestor with a nonempty queue. Each node on the way down
    /// passes `max(1, ceil(refill_fraction * queue * share))` tasks to the
    /// child, where share is the child's fraction of the node's subtree.
    /// `None` when the request reached an empty root.
    pub fn request(&mut self, node: usize) -> Grant {
        if let Some(t) = self.nodes[node].local_queue.pop_front() {
            return Grant {
                task: Some(t),
                messages: 0,
            };
        }
        let mut path = vec![node];
        let mut cur = node;
        while self.nodes[cur].local_queue.is_empty() {
            match self.nodes[cur].parent_id {
                Some(p) => {
                    path.push(p);
                    cur = p;
                }
                None => {
                    return Grant {
                        task: None,
                        messages: 2 * (path.len() - 1) as u32,
                    }
                }
            }
        }
        for w in path.windows(2).rev() {
            let (child, parent) = (w[0], w[1]);
            let avail = self.nodes[parent].local_queue.len();
            let share = self.subtree[child] as f64 / self.subtree[parent] as f64;
            let g = ((self.policy.refill_fraction * avail as f64 * share).ceil() as usize).clamp(1, avail);
            let moved: Vec<u64> = self.nodes[parent].local_queue.drain(..g).collect();
            self.nodes[child].local_queue.extend(moved);
        }
        Grant {
            task: self.nodes[node].local_queue.pop_front(),
            messages: 2 * (path.len() - 1) as u32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: u64) -> Vec<TaskRef> {
        (0..n).map(|id| TaskRef { id, work: 1.0 }).collect()
    }

    #[test]
    fn tree_shape() {
        let t = Dtree::new(13, Policy { fanout: 3, ..Policy::default() }).unwrap();
        assert_eq!(t.nodes()[0].children_ids, vec![1, 2, 3]);
        assert_eq!(t.nodes()[4].parent_id, Some(1));
        assert_eq!(t.height(), 3);
        assert_eq!(Dtree::height_bound(13, 3), 4);
        assert_eq!(Dtree::height_bound(1, 4), 1);
        assert_eq!(Dtree::height_bound(16, 4), 3);
    }

    #[test]
    fn single_process_drains_in_order() {
        let mut t = Dtree::new(1, Policy::default()).unwrap();
        t.load_stage(&refs(5)).unwrap();
        let got: Vec<Grant> = (0..6).map(|_| t.request(0)).collect();
        assert_eq!(got.iter().map(|g| g.task).collect::<Vec<_>>(), vec![Some(0), Some(1), Some(2), Some(3), Some(4), None]);
        assert!(got.iter().all(|g| g.messages == 0));
    }

    #[test]
    fn refill_passes_share_down() {
        // 5 nodes, fanout 2: 0 -> {1, 2}, 1 -> {3, 4}
        let mut t = Dtree::new(5, Policy { fanout: 2, initial_fraction: 0.0, refill_fraction: 0.5 }).unwrap();
        t.load_stage(&refs(20)).unwrap();
        let g = t.request(3);
        // root gives ceil(0.5 * 20 * 3/5) = 6 to node 1, which gives
        // ceil(0.5 * 6 * 1/3) = 1 to node 3
        assert_eq!(g, Grant { task: Some(0), messages: 4 });
        assert_eq!(t.nodes()[1].local_queue.len(), 5);
        assert_eq!(t.nodes()[0].local_queue.len(), 14);
        assert_eq!(t.request(4).messages, 2);
    }

    #[test]
    fn load_refuses_while_tasks_remain() {
        let mut t = Dtree::new(2, Policy::default()).unwrap();
        t.load_stage(&refs(4)).unwrap();
        assert!(t.load_stage(&refs(1)).is_err());
    }
}

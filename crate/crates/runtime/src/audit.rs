//! History checker for per-block linearizability of a versioned store.
//!
//! Operations carry invocation and response times from one global logical
//! clock. With unique stamps per block, a history is linearizable per block
//! when it can be ordered by stamp consistently with real time, which comes
//! down to the checks below.

use skyvi_core::model::ParamVec;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Get,
    Put,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpRecord {
    pub thread: usize,
    pub block: u64,
    pub kind: OpKind,
    /// Written or observed value.
    pub value: ParamVec,
    /// Returned stamp.
    pub stamp: u64,
    pub invoked: u64,
    pub returned: u64,
}

fn same_bits(a: &ParamVec, b: &ParamVec) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Violations found in `history`; empty when every block's history is
/// linearizable. `initial` holds each block's value at stamp 0.
///
/// Per block:
/// - put stamps are distinct and follow real-time order;
/// - every get returns bit for bit the value of the put with its stamp
///   (or the initial value for stamp 0), so no read is torn;
/// - a get's put was invoked before the get returned;
/// - no put with a larger stamp returned before the get was invoked;
/// - gets in real-time order see nondecreasing stamps.
pub fn audit(history: &[OpRecord], initial: &HashMap<u64, ParamVec>) -> Vec<String> {
    let mut v = Vec::new();
    let mut by_block: HashMap<u64, Vec<&OpRecord>> = HashMap::new();
    for op in history {
        if op.returned < op.invoked {
            v.push(format!("{op:?} returned before it was invoked"));
        }
        by_block.entry(op.block).or_default().push(op);
    }
    let mut blocks: Vec<_> = by_block.into_iter().collect();
    blocks.sort_by_key(|(b, _)| *b);
    for (block, ops) in blocks {
        let Some(init) = initial.get(&block) else {
            v.push(format!("block {block} has no initial value"));
            continue;
        };
        let mut puts: Vec<&OpRecord> = ops.iter().copied().filter(|o| o.kind == OpKind::Put).collect();
        puts.sort_by_key(|o| o.stamp);
        let mut put_at: HashMap<u64, &OpRecord> = HashMap::new();
        for p in &puts {
            if p.stamp == 0 || put_at.insert(p.stamp, p).is_some() {
                v.push(format!("block {block}: put stamp {} reused", p.stamp));
            }
        }
        for w in puts.windows(2) {
            // w[0].stamp < w[1].stamp, so w[1] must not finish before w[0] starts
            if w[1].returned < w[0].invoked {
                v.push(format!("block {block}: stamp {} put completed before stamp {} began", w[1].stamp, w[0].stamp));
            }
        }
        let gets: Vec<&OpRecord> = ops.iter().copied().filter(|o| o.kind == OpKind::Get).collect();
        for g in &gets {
            let source = if g.stamp == 0 { Some(init) } else { put_at.get(&g.stamp).map(|p| &p.value) };
            match source {
                None => v.push(format!("block {block}: get saw stamp {} that no put produced", g.stamp)),
                Some(val) if !same_bits(val, &g.value) => {
                    v.push(format!("block {block}: torn or wrong value at stamp {}", g.stamp))
                }
                _ => {}
            }
            if let Some(p) = put_at.get(&g.stamp) {
                if p.invoked > g.returned {
                    v.push(format!("block {block}: get returned stamp {} before its put began", g.stamp));
                }
            }
            if let Some(newer) = puts.iter().find(|p| p.stamp > g.stamp && p.returned < g.invoked) {
                v.push(format!("block {block}: get saw stamp {} after stamp {} had completed", g.stamp, newer.stamp));
            }
        }
        for a in &gets {
            for b in &gets {
                if a.returned < b.invoked && a.stamp > b.stamp {
                    v.push(format!("block {block}: later get saw older stamp {} after {}", b.stamp, a.stamp));
                }
            }
        }
    }
    v
}

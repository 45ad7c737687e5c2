//! Shared source parameters as versioned blocks.
//!
//! Each block sits behind its own lock, so a read never sees half of a
//! write, and every put bumps the block's stamp by one. Besides the live
//! value each block keeps a staged copy taken by [`ParamStore::begin_stage`]
//! while no task is running. Tasks read their inputs from the staged copy,
//! which makes a stage's results independent of the order in which its
//! tasks finish.

use parking_lot::Mutex;
use skyvi_core::model::ParamVec;
use skyvi_core::Error as CoreError;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Versioned {
    pub value: ParamVec,
    pub stamp: u64,
}

#[derive(Debug)]
struct Block {
    live: Versioned,
    staged: Versioned,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    index: HashMap<u64, usize>,
    ids: Vec<u64>,
    blocks: Vec<Mutex<Block>>,
}

impl ParamStore {
    /// Blocks start at stamp 0. Later duplicates of an id are ignored.
    pub fn new(initial: impl IntoIterator<Item = (u64, ParamVec)>) -> Self {
        let mut s = ParamStore::default();
        for (id, value) in initial {
            if s.index.contains_key(&id) {
                continue;
            }
            s.index.insert(id, s.blocks.len());
            s.ids.push(id);
            let v = Versioned { value, stamp: 0 };
            s.blocks.push(Mutex::new(Block { live: v, staged: v }));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    fn block(&self, id: u64) -> Result<&Mutex<Block>, CoreError> {
        self.index.get(&id).map(|&i| &self.blocks[i]).ok_or(CoreError::UnknownSource(id))
    }

    /// Latest committed block.
    pub fn get(&self, id: u64) -> Result<Versioned, CoreError> {
        Ok(self.block(id)?.lock().live)
    }

    /// Replaces the block and returns its new stamp.
    pub fn put(&self, id: u64, value: ParamVec) -> Result<u64, CoreError> {
        let mut b = self.block(id)?.lock();
        b.live = Versioned {
            value,
            stamp: b.live.stamp + 1,
        };
        Ok(b.live.stamp)
    }

    /// Block as of the last [`begin_stage`](Self::begin_stage).
    pub fn get_staged(&self, id: u64) -> Result<Versioned, CoreError> {
        Ok(self.block(id)?.lock().staged)
    }

    pub fn begin_stage(&self) {
        for b in &self.blocks {
            let mut b = b.lock();
            b.staged = b.live;
        }
    }

    /// Live values in insertion order.
    pub fn snapshot(&self) -> Vec<(u64, ParamVec)> {
        self.ids.iter().zip(&self.blocks).map(|(&id, b)| (id, b.lock().live.value)).collect()
    }

    pub fn staged_snapshot(&self) -> Vec<(u64, ParamVec)> {
        self.ids.iter().zip(&self.blocks).map(|(&id, b)| (id, b.lock().staged.value)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staged_copy_lags_live_value() {
        let s = ParamStore::new([(3, [0.0; 27]), (9, [1.0; 27]), (3, [5.0; 27])]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.get(3).unwrap().value, [0.0; 27]);
        assert_eq!(s.put(3, [2.0; 27]).unwrap(), 1);
        assert_eq!(s.get_staged(3).unwrap(), Versioned { value: [0.0; 27], stamp: 0 });
        s.begin_stage();
        assert_eq!(s.get_staged(3).unwrap(), Versioned { value: [2.0; 27], stamp: 1 });
        assert!(matches!(s.get(4), Err(CoreError::UnknownSource(4))));
        assert!(s.put(4, [0.0; 27]).is_err());
    }
}

//! Size-class buffer pool. Freed buffers go back to their class's free list
//! and are never released for the life of the pool.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MIN_CLASS: usize = 256;

pub fn size_class(bytes: usize) -> usize {
    bytes.max(MIN_CLASS).next_power_of_two()
}

/// A pool-owned byte buffer; `len()` is the requested size, the backing
/// capacity is the full size class.
#[derive(Debug, PartialEq, Eq)]
pub struct PoolBuffer {
    data: Vec<u8>,
}

impl PoolBuffer {
    pub fn class(&self) -> usize {
        self.data.capacity()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub allocations_from_os: u64,
    pub reuses: u64,
    pub frees: u64,
    pub pooled_bytes: usize,
}

#[derive(Debug, Default)]
pub struct PoolAllocator {
    free_lists: BTreeMap<usize, Vec<Vec<u8>>>,
    stats: PoolStats,
}

impl PoolAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a zero-filled buffer of exactly `bytes` bytes.
    pub fn alloc(&mut self, bytes: usize) -> Result<PoolBuffer> {
        if bytes == 0 {
            return Err(Error::ZeroSizedAlloc);
        }
        let class = size_class(bytes);
        let mut data = match self.free_lists.get_mut(&class).and_then(Vec::pop) {
            Some(mut v) => {
                self.stats.reuses += 1;
                self.stats.pooled_bytes -= class;
                v.clear();
                v
            }
            None => {
                self.stats.allocations_from_os += 1;
                Vec::with_capacity(class)
            }
        };
        data.resize(bytes, 0);
        Ok(PoolBuffer { data })
    }

    pub fn free(&mut self, buf: PoolBuffer) {
        let class = buf.class();
        self.stats.frees += 1;
        self.stats.pooled_bytes += class;
        self.free_lists.entry(class).or_default().push(buf.data);
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn free_count(&self, class: usize) -> usize {
        self.free_lists.get(&class).map_or(0, Vec::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classes_are_powers_of_two_from_256() {
        assert_eq!(size_class(1), 256);
        assert_eq!(size_class(256), 256);
        assert_eq!(size_class(257), 512);
        assert_eq!(size_class(1000), 1024);
    }

    #[test]
    fn first_alloc_hits_os() {
        let mut p = PoolAllocator::new();
        let b = p.alloc(1024).unwrap();
        assert_eq!(b.len(), 1024);
        assert_eq!(p.stats().allocations_from_os, 1);
        assert!(matches!(p.alloc(0), Err(Error::ZeroSizedAlloc)));
    }

    #[test]
    fn free_then_alloc_reuses() {
        let mut p = PoolAllocator::new();
        let mut b = p.alloc(1024).unwrap();
        b.as_mut_slice()[0] = 7;
        p.free(b);
        let b = p.alloc(1024).unwrap();
        assert_eq!(p.stats().reuses, 1);
        assert_eq!(p.stats().allocations_from_os, 1);
        assert_eq!(b.as_slice()[0], 0, "reused buffers are zeroed");
    }

    #[test]
    fn replayed_sequence_makes_no_new_allocations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let script: Vec<(bool, usize)> = (0..500).map(|_| (rng.gen_bool(0.55), rng.gen_range(1..10_000))).collect();
        let run = |p: &mut PoolAllocator| {
            let mut live: Vec<PoolBuffer> = Vec::new();
            for &(alloc, size) in &script {
                if alloc || live.is_empty() {
                    live.push(p.alloc(size).unwrap());
                } else {
                    let b = live.swap_remove(size % live.len());
                    p.free(b);
                }
            }
            for b in live {
                p.free(b);
            }
        };
        let mut p = PoolAllocator::new();
        run(&mut p);
        let first = p.stats().allocations_from_os;
        run(&mut p);
        assert_eq!(p.stats().allocations_from_os, first);
        assert!(p.stats().reuses > 0);
    }
}

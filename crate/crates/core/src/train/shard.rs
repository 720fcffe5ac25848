//! Uniform sharding of the prototype table across simulated workers.

use std::ops::Range;

use crate::error::{invalid, Result};

/// Contiguous ranges of prototype positions, one per shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardAssignment {
    ranges: Vec<Range<usize>>,
}

impl ShardAssignment {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn count(&self) -> usize {
        self.ranges.len()
    }

    pub fn total(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Shard holding position `k`.
    pub fn shard_of(&self, k: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&k))
    }
}

/// Splits `n` prototypes into `d` contiguous shards whose sizes differ by at
/// most one, larger shards first.
pub fn shard_prototypes(n: usize, d: usize) -> Result<ShardAssignment> {
    if d == 0 {
        return Err(invalid("shard count must be at least 1"));
    }
    if d > n {
        return Err(invalid(format!("{d} shards for {n} prototypes")));
    }
    let (base, extra) = (n / d, n % d);
    let mut start = 0;
    let ranges = (0..d)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(ShardAssignment { ranges })
}

/// Per-query partial sums of `terms(i, k)` over each shard, with `k`
/// restricted to positions where `include(i, k)` holds. Entry `[s][i]` is
/// the sum for shard `s` and query `i`, reduced in ascending position.
pub fn sharded_negative_sums(
    shards: &ShardAssignment,
    n_queries: usize,
    include: impl Fn(usize, usize) -> bool,
    terms: impl Fn(usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    shards
        .ranges()
        .iter()
        .map(|range| {
            (0..n_queries)
                .map(|i| range.clone().filter(|&k| include(i, k)).map(|k| terms(i, k)).sum())
                .collect()
        })
        .collect()
}

/// Combines per-shard partials for query `i` in ascending shard order.
pub fn combine_partials(partials: &[Vec<f64>], i: usize) -> f64 {
    partials.iter().map(|p| p[i]).sum()
}

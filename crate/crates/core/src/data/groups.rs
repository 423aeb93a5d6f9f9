//! Ranking-group allocation per (market, period) cell.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::record::TraderRecord;
use crate::error::{Error, Result};
use crate::par::Exec;

/// A set of records ranked jointly. `members` are row indices into the split
/// the group was allocated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingGroup {
    pub group_id: usize,
    pub market: u32,
    pub period: u32,
    pub members: Vec<usize>,
}

impl RankingGroup {
    pub fn records<'a>(&self, split: &'a [TraderRecord]) -> Vec<&'a TraderRecord> {
        self.members.iter().map(|&i| &split[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    /// One risky plus up to `size - 1` normals per group, until either pool
    /// of the cell runs dry; leftovers are discarded.
    Train,
    /// A single sample of `min(|cell|, size - 1)` records per cell.
    Test,
    /// Every record of the cell, in shuffled chunks of at most `size`.
    TestExhaustive,
}

/// Seed of the RNG stream for one cell, so cells can be processed in any
/// order or in parallel with identical results.
fn cell_seed(seed: u64, market: u32, period: u32) -> u64 {
    let mut z = seed ^ ((market as u64) << 32 | period as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn allocate_groups(
    split: &[TraderRecord],
    group_size: usize,
    mode: GroupMode,
    seed: u64,
) -> Result<Vec<RankingGroup>> {
    allocate_groups_with(split, group_size, mode, seed, Exec::default())
}

pub fn allocate_groups_with(
    split: &[TraderRecord],
    group_size: usize,
    mode: GroupMode,
    seed: u64,
    exec: Exec,
) -> Result<Vec<RankingGroup>> {
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {group_size}")));
    }
    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in split.iter().enumerate() {
        cells.entry((r.market, r.period)).or_default().push(i);
    }
    let cells: Vec<((u32, u32), Vec<usize>)> = cells.into_iter().collect();
    let per_cell = exec.map(&cells, |((market, period), rows)| {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, *market, *period));
        let groups: Vec<Vec<usize>> = match mode {
            GroupMode::Train => {
                let mut risky: Vec<usize> = rows.iter().copied().filter(|&i| split[i].is_risky()).collect();
                let mut normal: Vec<usize> = rows.iter().copied().filter(|&i| !split[i].is_risky()).collect();
                risky.shuffle(&mut rng);
                normal.shuffle(&mut rng);
                let mut out = Vec::new();
                while let (Some(&r), false) = (risky.last(), normal.is_empty()) {
                    risky.pop();
                    let take = normal.len().min(group_size - 1);
                    let mut g = vec![r];
                    g.extend(normal.drain(normal.len() - take..));
                    out.push(g);
                }
                out
            }
            GroupMode::Test => {
                let take = rows.len().min(group_size - 1);
                let mut pool = rows.clone();
                pool.shuffle(&mut rng);
                pool.truncate(take);
                if pool.is_empty() {
                    vec![]
                } else {
                    vec![pool]
                }
            }
            GroupMode::TestExhaustive => {
                let mut pool = rows.clone();
                pool.shuffle(&mut rng);
                pool.chunks(group_size).map(|c| c.to_vec()).collect()
            }
        };
        groups.into_iter().map(move |m| (*market, *period, m)).collect::<Vec<_>>()
    });
    Ok(per_cell
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(group_id, (market, period, members))| RankingGroup {
            group_id,
            market,
            period,
            members,
        })
        .collect())
}

//! K-modes clustering of users on categorical features.
//!
//! Cluster ids replace raw user ids as the user-side cohort when individual
//! users have too few samples for stable quantile estimates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ecdf::ClusterMap;
use crate::{par, seed, RadError, Result};

/// Maps a numeric value to a range code.
///
/// With boundaries `[b0, b1, ..., bm]` the code is the index of the last
/// boundary `<= value`; values below `b0` clamp to 0 and values past `bm`
/// land in the last bucket.
pub fn bucketize_numeric(value: f64, boundaries: &[f64]) -> Result<u32> {
    if boundaries.is_empty() {
        return Err(RadError::invalid("empty bucket specification"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RadError::invalid("bucket boundaries must be strictly ascending"));
    }
    let at_or_below = boundaries.partition_point(|&b| b <= value);
    Ok(at_or_below.saturating_sub(1) as u32)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KModesConfig {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KModesConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_iter: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KModesModel {
    pub k: usize,
    pub modes: Vec<Vec<u32>>,
    pub assignment: BTreeMap<u64, u32>,
    pub iterations: usize,
    /// Total Hamming mismatch between users and their modes.
    pub cost: u64,
    /// Cost after each iteration.
    pub cost_history: Vec<u64>,
}

fn hamming(a: &[u32], b: &[u32]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

/// Nearest mode by Hamming distance; ties go to the lowest cluster id.
fn nearest(modes: &[Vec<u32>], x: &[u32]) -> (u32, u64) {
    let mut best = (0u32, u64::MAX);
    for (c, m) in modes.iter().enumerate() {
        let d = hamming(m, x);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// Per-attribute majority, ties to the smallest code.
fn mode_of<'a>(rows: impl Iterator<Item = &'a [u32]>, arity: usize) -> Vec<u32> {
    let mut counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); arity];
    for row in rows {
        for (slot, &v) in row.iter().enumerate() {
            *counts[slot].entry(v).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| {
            c.into_iter()
                .fold((0u32, 0usize), |best, (v, n)| if n > best.1 { (v, n) } else { best })
                .0
        })
        .collect()
}

/// Fits k-modes on `users` (user id to categorical codes).
pub fn fit_kmodes(users: &BTreeMap<u64, Vec<u32>>, cfg: &KModesConfig) -> Result<KModesModel> {
    if cfg.k == 0 {
        return Err(RadError::invalid("k must be at least 1"));
    }
    let ids: Vec<u64> = users.keys().copied().collect();
    let rows: Vec<&[u32]> = users.values().map(Vec::as_slice).collect();
    let arity = rows.first().map(|r| r.len()).unwrap_or(0);
    if arity == 0 {
        return Err(RadError::invalid("k-modes needs at least one categorical feature"));
    }
    if rows.iter().any(|r| r.len() != arity) {
        return Err(RadError::invalid("users have differing feature counts"));
    }
    let distinct: BTreeSet<&[u32]> = rows.iter().copied().collect();
    if cfg.k > distinct.len() {
        return Err(RadError::invalid(format!(
            "k = {} exceeds the {} distinct user feature vectors",
            cfg.k,
            distinct.len()
        )));
    }

    // Seeded choice of k distinct records as initial modes.
    let mut pool: Vec<&[u32]> = distinct.into_iter().collect();
    let mut rng = seed::rng(cfg.seed, "kmodes.init", 0);
    pool.shuffle(&mut rng);
    let mut modes: Vec<Vec<u32>> = pool[..cfg.k].iter().map(|r| r.to_vec()).collect();

    let mut labels: Vec<u32> = vec![u32::MAX; rows.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let assigned = par::map(&rows, |r| nearest(&modes, r));
        let changed = assigned.iter().zip(&labels).filter(|(a, &l)| a.0 != l).count();
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }

        // Re-seed empty clusters with the records farthest from their modes.
        let mut reseeded = false;
        let mut sizes = vec![0usize; cfg.k];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        for c in 0..cfg.k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..rows.len())
                .filter(|&i| sizes[labels[i] as usize] > 1)
                .max_by(|&a, &b| {
                    hamming(rows[a], &modes[labels[a] as usize])
                        .cmp(&hamming(rows[b], &modes[labels[b] as usize]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                sizes[labels[i] as usize] -= 1;
                sizes[c] = 1;
                labels[i] = c as u32;
                modes[c] = rows[i].to_vec();
                reseeded = true;
            }
        }

        for (c, mode) in modes.iter_mut().enumerate() {
            let members = rows.iter().zip(&labels).filter(|(_, &l)| l as usize == c).map(|(r, _)| *r);
            let mut members = members.peekable();
            if members.peek().is_some() {
                *mode = mode_of(members, arity);
            }
        }
        let cost: u64 = rows.iter().zip(&labels).map(|(r, &l)| hamming(r, &modes[l as usize])).sum();
        history.push(cost);
        if (changed == 0 && !reseeded) || iterations >= cfg.max_iter {
            break;
        }
    }

    let cost = *history.last().unwrap_or(&0);
    Ok(KModesModel {
        k: cfg.k,
        modes,
        assignment: ids.into_iter().zip(labels).collect(),
        iterations,
        cost,
        cost_history: history,
    })
}

impl KModesModel {
    /// Nearest mode for a (possibly unseen) user; unseen category codes count as mismatches.
    pub fn assign(&self, features: &[u32]) -> Result<u32> {
        let arity = self.modes.first().map(Vec::len).unwrap_or(0);
        if features.len() != arity {
            return Err(RadError::invalid(format!(
                "feature arity {} does not match model arity {arity}",
                features.len()
            )));
        }
        Ok(nearest(&self.modes, features).0)
    }

    pub fn cluster_map(&self) -> ClusterMap {
        self.assignment.clone()
    }
}

/// Writes `user_id,cluster_id` rows.
pub fn write_cluster_map(path: &Path, map: &ClusterMap) -> Result<()> {
    let file = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| RadError::io(path, e);
    writeln!(w, "user_id,cluster_id").map_err(io)?;
    for (u, c) in map {
        writeln!(w, "{u},{c}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cluster_map(path: &Path) -> Result<ClusterMap> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut map = ClusterMap::new();
    for row in rdr.records() {
        let row = row?;
        let bad = || RadError::BadArtifact {
            path: path.into(),
            reason: format!("bad cluster row {:?}", row),
        };
        let u: u64 = row.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let c: u32 = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        map.insert(u, c);
    }
    Ok(map)
}

//! Error and ranking metrics: MAE, XAUC, grouped XAUC and 1-Wasserstein.
//!
//! XAUC is the continuous-outcome analogue of AUC: over every pair of records
//! whose true values differ, a pair scores 1 when the prediction orders it the
//! same way, 1/2 when the predictions tie, and 0 otherwise. Pairs with tied
//! truths are excluded. Counts are kept as integers so the fast
//! `O(n log n)` path and pair enumeration agree exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{par, RadError, Result};

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(RadError::invalid(format!(
            "prediction/truth length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(RadError::EmptyInput("mae of no records".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Integer pair counts behind an XAUC value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied_pred: u64,
    pub discordant: u64,
}

impl PairCounts {
    pub fn pairs(&self) -> u64 {
        self.concordant + self.tied_pred + self.discordant
    }

    pub fn xauc(&self) -> Option<f64> {
        let pairs = self.pairs();
        (pairs > 0).then(|| (2 * self.concordant + self.tied_pred) as f64 / (2 * pairs) as f64)
    }
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< idx`.
    fn prefix(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Pair counts in `O(n log n)`: sweep records by ascending truth and query a
/// Fenwick tree of prediction ranks for earlier (strictly smaller truth) records.
pub fn pair_counts(pred: &[f64], truth: &[f64]) -> PairCounts {
    let n = pred.len().min(truth.len());
    if n < 2 {
        return PairCounts::default();
    }
    let mut by_pred: Vec<usize> = (0..n).collect();
    by_pred.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank = vec![0usize; n];
    let mut distinct = 0usize;
    for (k, &i) in by_pred.iter().enumerate() {
        if k > 0 && pred[i] != pred[by_pred[k - 1]] {
            distinct += 1;
        }
        rank[i] = distinct;
    }
    let mut by_truth: Vec<usize> = (0..n).collect();
    by_truth.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));

    let mut tree = Fenwick::new(distinct + 1);
    let mut inserted = 0u64;
    let mut counts = PairCounts::default();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && truth[by_truth[end]] == truth[by_truth[start]] {
            end += 1;
        }
        for &i in &by_truth[start..end] {
            let below = tree.prefix(rank[i]);
            let at_or_below = tree.prefix(rank[i] + 1);
            counts.concordant += below;
            counts.tied_pred += at_or_below - below;
            counts.discordant += inserted - at_or_below;
        }
        for &i in &by_truth[start..end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    counts
}

pub fn xauc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(RadError::invalid("prediction/truth length mismatch"));
    }
    pair_counts(pred, truth)
        .xauc()
        .ok_or_else(|| RadError::EmptyInput("xauc needs at least one pair with distinct truths".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupXauc {
    pub group: u64,
    pub xauc: f64,
    pub pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedXauc {
    /// Mean of per-group XAUC weighted by valid pair count.
    pub pair_weighted: f64,
    /// Unweighted mean over groups with at least one valid pair.
    pub group_mean: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
    pub total_pairs: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_group: Vec<GroupXauc>,
}

/// XAUC within each group, averaged over groups. Groups without a valid
/// pair are skipped and counted.
pub fn grouped_xauc(pred: &[f64], truth: &[f64], groups: &[u64]) -> Result<GroupedXauc> {
    if pred.len() != truth.len() || pred.len() != groups.len() {
        return Err(RadError::invalid("prediction/truth/group length mismatch"));
    }
    let mut members: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let members: Vec<(u64, Vec<usize>)> = members.into_iter().collect();
    let counts = par::map(&members, |(_, idx)| {
        let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
        pair_counts(&p, &t)
    });
    let mut per_group = Vec::new();
    let mut skipped = 0;
    let (mut weighted, mut mean, mut total) = (0.0, 0.0, 0u64);
    for ((g, _), c) in members.iter().zip(&counts) {
        match c.xauc() {
            Some(x) => {
                weighted += x * c.pairs() as f64;
                mean += x;
                total += c.pairs();
                per_group.push(GroupXauc {
                    group: *g,
                    xauc: x,
                    pairs: c.pairs(),
                });
            }
            None => skipped += 1,
        }
    }
    if per_group.is_empty() {
        return Err(RadError::EmptyInput("no group has a pair with distinct truths".into()));
    }
    Ok(GroupedXauc {
        pair_weighted: weighted / total as f64,
        group_mean: mean / per_group.len() as f64,
        groups_used: per_group.len(),
        groups_skipped: skipped,
        total_pairs: total,
        per_group,
    })
}

/// XGAUC: XAUC of watch-time predictions within each user.
pub fn xgauc(pred: &[f64], truth: &[f64], users: &[u64]) -> Result<GroupedXauc> {
    grouped_xauc(pred, truth, users)
}

/// Grouped XAUC of quantile-space predictions. Use user ids as groups to get
/// User Group XAUC and video ids to get Video Group XAUC.
pub fn group_xauc_cdf(pred_quantiles: &[f64], truth: &[f64], groups: &[u64]) -> Result<GroupedXauc> {
    grouped_xauc(pred_quantiles, truth, groups)
}

/// 1-Wasserstein distance between two empirical distributions: the integral
/// of `|F_a - F_b|` over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(RadError::EmptyInput("wasserstein1 needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Metrics of one label kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub mae: f64,
    pub xauc: f64,
    /// Pair-weighted XGAUC over users.
    pub xgauc: f64,
    pub xgauc_group_mean: f64,
    pub xgauc_pairs: u64,
    pub user_group_xauc: Option<f64>,
    pub user_group_xauc_pairs: Option<u64>,
    pub video_group_xauc: Option<f64>,
    pub video_group_xauc_pairs: Option<u64>,
    pub wasserstein: Option<f64>,
}

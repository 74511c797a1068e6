//! Informativeness test for geo-temporal embeddings: rank the catalog by
//! `t . m_j` and compare hit rates with a random ranking.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TestCase, UserHistory};
use crate::embedding::{EmbeddingMatrix, GtSource};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiagError {
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("no geo-temporal vector for user {user} at {key}")]
    MissingGt { user: String, key: String },
    #[error("target item {0} is not in the catalog")]
    UnknownTarget(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Picks one history interaction uniformly and returns its geo-temporal
/// vector.
pub fn sample_user_gt<R: Rng>(history: &UserHistory, gt: &GtSource, rng: &mut R) -> Result<Vec<f64>, DiagError> {
    if history.is_empty() {
        return Err(DiagError::EmptyHistory(history.user_id.clone()));
    }
    let i = rng.random_range(0..history.len());
    gt_vector(history, i, gt)
}

fn gt_vector(history: &UserHistory, i: usize, gt: &GtSource) -> Result<Vec<f64>, DiagError> {
    let (ts, loc) = (history.timestamps[i], &history.locations[i]);
    let row = gt.row_of(ts, loc).ok_or_else(|| DiagError::MissingGt {
        user: history.user_id.clone(),
        key: gt.key(ts, loc).to_string(),
    })?;
    Ok(gt.matrix.row_f64(row))
}

fn scores(t: &[f64], m: &EmbeddingMatrix) -> Result<Vec<f64>, DiagError> {
    if t.len() != m.dim() {
        return Err(DiagError::DimMismatch(t.len(), m.dim()));
    }
    Ok((0..m.len()).map(|j| m.row(j).iter().zip(t).map(|(&a, b)| a as f64 * b).sum()).collect())
}

/// Catalog row indices sorted by `t . m_j` descending; equal scores are
/// ordered by ascending key.
pub fn rank_by_dot(t: &[f64], m: &EmbeddingMatrix) -> Result<Vec<usize>, DiagError> {
    let s = scores(t, m)?;
    let keys = m.keys();
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then_with(|| keys[a].cmp(&keys[b])));
    Ok(order)
}

/// 1-based rank of row `target` under [`rank_by_dot`], without sorting.
pub fn rank_of(t: &[f64], m: &EmbeddingMatrix, target: usize) -> Result<usize, DiagError> {
    let s = scores(t, m)?;
    let keys = m.keys();
    let st = s[target];
    let ahead = (0..m.len())
        .filter(|&j| s[j] > st || (s[j] == st && keys[j] < keys[target]))
        .count();
    Ok(ahead + 1)
}

/// One test user: candidate geo-temporal vectors (one per history
/// interaction) and the catalog row of the held-out target.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagQuery {
    pub user_id: String,
    pub gt_choices: Vec<Vec<f64>>,
    pub target: usize,
}

/// Builds one query per test case from its input history.
pub fn build_queries(cases: &[TestCase], items: &EmbeddingMatrix, gt: &GtSource) -> Result<Vec<DiagQuery>, DiagError> {
    cases
        .iter()
        .map(|c| {
            if c.input.is_empty() {
                return Err(DiagError::EmptyHistory(c.input.user_id.clone()));
            }
            let target = items
                .position(&c.target.item_id)
                .ok_or_else(|| DiagError::UnknownTarget(c.target.item_id.clone()))?;
            let gt_choices = (0..c.input.len()).map(|i| gt_vector(&c.input, i, gt)).collect::<Result<_, _>>()?;
            Ok(DiagQuery { user_id: c.input.user_id.clone(), gt_choices, target })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub ks: Vec<usize>,
    pub seed: u64,
    pub n_random_trials: usize,
    pub bootstrap_resamples: usize,
    /// Sampled history items per user; their hits are averaged. The plain
    /// test uses one.
    pub samples_per_user: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { ks: vec![10, 20, 50, 100], seed: 7, n_random_trials: 100, bootstrap_resamples: 1000, samples_per_user: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub k: usize,
    pub hr_geotemporal: f64,
    /// Analytic `k / N`; the improvement is computed against this value.
    pub hr_random: f64,
    pub hr_random_empirical: f64,
    pub improvement_pct: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub records: Vec<DiagRecord>,
    pub n_users: usize,
    pub catalog_size: usize,
    pub seed: u64,
}

pub fn improvement_pct(hr: f64, baseline: f64) -> f64 {
    (hr - baseline) / baseline * 100.0
}

fn user_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run_informativeness(
    queries: &[DiagQuery],
    catalog: &EmbeddingMatrix,
    cfg: &DiagConfig,
) -> Result<DiagnosticReport, DiagError> {
    let n = catalog.len();
    if queries.is_empty() || n == 0 {
        return Err(DiagError::InvalidConfig("need at least one user and one item".into()));
    }
    if cfg.ks.iter().any(|&k| k == 0) || cfg.samples_per_user == 0 {
        return Err(DiagError::InvalidConfig("k and samples_per_user must be positive".into()));
    }

    // ranks[u][s]: target rank for the s-th sampled vector of user u.
    let ranks: Vec<Vec<usize>> = queries
        .par_iter()
        .enumerate()
        .map(|(u, q)| {
            if q.gt_choices.is_empty() {
                return Err(DiagError::EmptyHistory(q.user_id.clone()));
            }
            let mut rng = user_rng(cfg.seed, u as u64);
            (0..cfg.samples_per_user)
                .map(|_| rank_of(q.gt_choices.choose(&mut rng).expect("non-empty"), catalog, q.target))
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut boot_rng = user_rng(cfg.seed, u64::MAX);
    let n_users = queries.len();
    let resamples: Vec<Vec<usize>> = (0..cfg.bootstrap_resamples)
        .map(|_| (0..n_users).map(|_| boot_rng.random_range(0..n_users)).collect())
        .collect();

    let mut random_rng = user_rng(cfg.seed, u64::MAX - 1);
    let mut records = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let per_user: Vec<f64> = ranks
            .iter()
            .map(|rs| rs.iter().filter(|&&r| r <= k).count() as f64 / rs.len() as f64)
            .collect();
        let hr = per_user.iter().sum::<f64>() / n_users as f64;
        let hr_random = k.min(n) as f64 / n as f64;
        let trials = cfg.n_random_trials.max(1);
        let random_hits: usize = (0..trials * n_users).filter(|_| random_rng.random_range(0..n) < k).count();
        let hr_random_empirical = random_hits as f64 / (trials * n_users) as f64;

        let point = improvement_pct(hr, hr_random);
        let mut boot: Vec<f64> = resamples
            .iter()
            .map(|idx| improvement_pct(idx.iter().map(|&i| per_user[i]).sum::<f64>() / n_users as f64, hr_random))
            .collect();
        boot.sort_by(f64::total_cmp);
        let (lo, hi) = if boot.is_empty() {
            (point, point)
        } else {
            (percentile(&boot, 0.025), percentile(&boot, 0.975))
        };
        records.push(DiagRecord {
            k,
            hr_geotemporal: hr,
            hr_random,
            hr_random_empirical,
            improvement_pct: point,
            ci_low: lo.min(point),
            ci_high: hi.max(point),
        });
    }
    Ok(DiagnosticReport { records, n_users, catalog_size: n, seed: cfg.seed })
}

/// Linear-interpolated quantile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

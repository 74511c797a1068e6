//! Negative samplers: temporal window, semantic pool, and uniform.
//!
//! All samplers work on dense catalog indices and never return an item from
//! the excluded set (the anchor user's history).

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, IteratorRandom};
use rand::Rng;

use crate::corpus::{Catalog, Interaction, SECONDS_PER_DAY};
use crate::embedding::{cosine_sim, EmbeddingError};
use crate::losses::Provenance;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("no candidate negatives left for user {user} ({provenance:?})")]
    EmptyPool { user: String, provenance: Provenance },
    #[error("invalid sampler argument: {0}")]
    Invalid(String),
    #[error("item {0} is not in the catalog")]
    UnknownItem(String),
    #[error("{0}")]
    Embedding(String),
}

impl From<EmbeddingError> for SampleError {
    fn from(e: EmbeddingError) -> Self {
        SampleError::Embedding(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    pub items: Vec<usize>,
    pub provenance: Provenance,
    /// Set when the pool was smaller than the request and draws repeat.
    pub with_replacement: bool,
}

fn draw<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> (Vec<usize>, bool) {
    if pool.len() >= n {
        (pool.choose_multiple(rng, n).copied().collect(), false)
    } else {
        ((0..n).map(|_| *pool.choose(rng).expect("non-empty pool")).collect(), true)
    }
}

/// Time-sorted interaction index for window queries.
#[derive(Clone, Debug)]
pub struct WindowIndex {
    /// `(timestamp, user, item index)`, sorted by timestamp.
    events: Vec<(i64, String, usize)>,
}

impl WindowIndex {
    pub fn new(log: &[Interaction], catalog: &Catalog) -> Result<Self, SampleError> {
        let mut events = log
            .iter()
            .map(|r| {
                let item = catalog.index_of(&r.item_id).ok_or_else(|| SampleError::UnknownItem(r.item_id.clone()))?;
                Ok((r.timestamp_utc, r.user_id.clone(), item))
            })
            .collect::<Result<Vec<_>, SampleError>>()?;
        events.sort();
        Ok(Self { events })
    }

    /// Distinct items other users consumed in `[ts - window, ts)`, minus
    /// `exclude`, ascending.
    pub fn pool(&self, user: &str, ts: i64, window_days: i64, exclude: &HashSet<usize>) -> Vec<usize> {
        let lo = ts - window_days * SECONDS_PER_DAY;
        let start = self.events.partition_point(|e| e.0 < lo);
        let end = self.events.partition_point(|e| e.0 < ts);
        self.events[start..end]
            .iter()
            .filter(|(_, u, item)| u != user && !exclude.contains(item))
            .map(|e| e.2)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Items consumed by other users in the window before `ts`, excluding every
/// item in the anchor user's history (`exclude`).
pub fn sample_window_negatives<R: Rng>(
    index: &WindowIndex,
    user: &str,
    ts: i64,
    window_days: i64,
    n_neg: usize,
    exclude: &HashSet<usize>,
    rng: &mut R,
) -> Result<Negatives, SampleError> {
    if window_days <= 0 || n_neg == 0 {
        return Err(SampleError::Invalid("window_days and n_neg must be positive".into()));
    }
    let pool = index.pool(user, ts, window_days, exclude);
    if pool.is_empty() {
        return Err(SampleError::EmptyPool { user: user.to_string(), provenance: Provenance::TemporalWindow });
    }
    let (items, with_replacement) = draw(&pool, n_neg, rng);
    Ok(Negatives { items, provenance: Provenance::TemporalWindow, with_replacement })
}

/// Catalog indices sorted by cosine similarity to `t`, least similar first;
/// ties by ascending index.
pub fn least_similar_order(t: &[f64], rows: &[Vec<f64>]) -> Result<Vec<usize>, SampleError> {
    let sims = rows.iter().map(|m| cosine_sim(t, m)).collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Uniform draw from the least similar `pool_fraction` of the catalog (by
/// cosine to `t`), minus `exclude`. `rows[j]` is the metadata vector of item
/// `j`.
pub fn sample_semantic_negatives<R: Rng>(
    t: &[f64],
    rows: &[Vec<f64>],
    pool_fraction: f64,
    n_neg: usize,
    exclude: &HashSet<usize>,
    user: &str,
    rng: &mut R,
) -> Result<Negatives, SampleError> {
    if !(pool_fraction > 0.0 && pool_fraction <= 1.0) || n_neg == 0 {
        return Err(SampleError::Invalid(format!("pool_fraction {pool_fraction} must be in (0, 1], n_neg > 0")));
    }
    let order = least_similar_order(t, rows)?;
    let size = ((pool_fraction * rows.len() as f64).ceil() as usize).clamp(1, rows.len().max(1));
    let pool: Vec<usize> = order.into_iter().take(size).filter(|j| !exclude.contains(j)).collect();
    if pool.is_empty() {
        return Err(SampleError::EmptyPool { user: user.to_string(), provenance: Provenance::SemanticPool });
    }
    let (items, with_replacement) = draw(&pool, n_neg, rng);
    Ok(Negatives { items, provenance: Provenance::SemanticPool, with_replacement })
}

/// Uniform draw from `0..catalog_size` minus `exclude`, without replacement
/// when possible.
pub fn sample_uniform_negatives<R: Rng>(
    catalog_size: usize,
    n_neg: usize,
    exclude: &HashSet<usize>,
    user: &str,
    rng: &mut R,
) -> Result<Negatives, SampleError> {
    let available = catalog_size - exclude.iter().filter(|&&j| j < catalog_size).count();
    if available == 0 {
        return Err(SampleError::EmptyPool { user: user.to_string(), provenance: Provenance::Uniform });
    }
    // Rejection sampling is fast while most of the catalog is allowed.
    if available * 2 >= catalog_size && n_neg <= available {
        let mut picked = Vec::with_capacity(n_neg);
        while picked.len() < n_neg {
            let j = rng.random_range(0..catalog_size);
            if !exclude.contains(&j) && !picked.contains(&j) {
                picked.push(j);
            }
        }
        return Ok(Negatives { items: picked, provenance: Provenance::Uniform, with_replacement: false });
    }
    let pool: Vec<usize> = (0..catalog_size).filter(|j| !exclude.contains(j)).collect();
    if pool.len() >= n_neg {
        let items = pool.iter().copied().choose_multiple(rng, n_neg);
        return Ok(Negatives { items, provenance: Provenance::Uniform, with_replacement: false });
    }
    let (items, with_replacement) = draw(&pool, n_neg, rng);
    Ok(Negatives { items, provenance: Provenance::Uniform, with_replacement })
}

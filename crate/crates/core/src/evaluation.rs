//! Leave-one-out ranking metrics, full-catalog evaluation and improvement
//! tables.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use geotrec_autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, Split, SplitMode, UserHistory};
use crate::embedding::GtSource;
use crate::model::{Architecture, ModelError, ModelState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("no geo-temporal vector for {0}")]
    MissingContext(String),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
}

/// 1 if `target` is among the first `k` entries of `ranked`.
pub fn hr_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&j| j == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the top `k`, else 0.
pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&j| j == target) {
        Some(p) => ndcg_from_rank(p + 1, k),
        None => 0.0,
    }
}

/// Distinct items across every user's top `k`, over the catalog size.
pub fn coverage_at_k(lists: &[Vec<usize>], catalog_size: usize, k: usize) -> f64 {
    if catalog_size == 0 {
        return 0.0;
    }
    let union: BTreeSet<usize> = lists.iter().flat_map(|l| l.iter().take(k).copied()).collect();
    union.len() as f64 / catalog_size as f64
}

/// One held-out prediction in catalog indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: String,
    pub input: Vec<usize>,
    /// `[L, d_t]` history contexts, present when tokens carry `t`.
    pub input_gt: Option<Tensor>,
    pub target: usize,
    /// Context of the target interaction, present when candidates carry `t`.
    pub target_gt: Option<Vec<f64>>,
    /// Items removed from the ranking (seen-item filtering).
    pub filtered: Vec<usize>,
}

/// Anything that assigns a score to every catalog item for a case.
pub trait Scorer: Sync {
    fn catalog_size(&self) -> usize;
    fn scores(&self, case: &EvalCase) -> Result<Vec<f64>, EvalError>;
}

/// Scores a fixed vector for every user (e.g. item popularity).
pub struct StaticScorer(pub Vec<f64>);

impl Scorer for StaticScorer {
    fn catalog_size(&self) -> usize {
        self.0.len()
    }
    fn scores(&self, _case: &EvalCase) -> Result<Vec<f64>, EvalError> {
        Ok(self.0.clone())
    }
}

/// A trained model with its context-free candidate matrix cached.
pub struct ModelScorer<'a> {
    pub model: &'a ModelState,
    reprs: Tensor,
    with_context: bool,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelState, with_context: bool) -> Result<Self, EvalError> {
        if with_context && !model.variant.architecture.fuses_gt() {
            return Err(EvalError::VariantMismatch(format!(
                "{} has no context path at inference",
                model.variant.architecture.name()
            )));
        }
        Ok(Self { model, reprs: model.all_item_reprs()?, with_context })
    }
}

impl Scorer for ModelScorer<'_> {
    fn catalog_size(&self) -> usize {
        self.model.catalog.len()
    }

    fn scores(&self, case: &EvalCase) -> Result<Vec<f64>, EvalError> {
        let input_gt = if self.with_context { case.input_gt.as_ref() } else { None };
        let h = self.model.user_repr(&case.input, input_gt)?;
        let bias = match (&case.target_gt, self.with_context) {
            (Some(t), true) => {
                let shift = self.model.context_shift(t)?;
                shift.iter().zip(&h).map(|(a, b)| a * b).sum()
            }
            _ => 0.0,
        };
        let d = h.len();
        Ok(self.reprs.data().chunks_exact(d).map(|x| x.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + bias).collect())
    }
}

/// Result of ranking the catalog for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// 1-based rank of the target among unfiltered items.
    pub rank: usize,
    /// The best `top_n` unfiltered items.
    pub top: Vec<usize>,
}

/// Ranks by descending score, ties broken by ascending index. Filtered items
/// (other than the target) are skipped.
pub fn rank_scores(scores: &[f64], target: usize, filtered: &[usize], top_n: usize) -> Result<Ranked, EvalError> {
    if target >= scores.len() {
        return Err(EvalError::Invalid(format!("target {target} outside catalog of {}", scores.len())));
    }
    if let Some(j) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::Invalid(format!("NaN score for item {j}")));
    }
    let skip: HashSet<usize> = filtered.iter().copied().filter(|&j| j != target).collect();
    let st = scores[target];
    let better = |j: usize| scores[j] > st || (scores[j] == st && j < target);
    let rank = 1 + (0..scores.len()).filter(|&j| j != target && !skip.contains(&j) && better(j)).count();
    let mut order: Vec<usize> = (0..scores.len()).filter(|j| !skip.contains(j)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if top_n < order.len() {
        order.select_nth_unstable_by(top_n, cmp);
        order.truncate(top_n);
    }
    order.sort_by(cmp);
    Ok(Ranked { rank, top: order })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub split_mode: SplitMode,
    pub with_context: bool,
    pub n_users: usize,
    pub metrics: Vec<KMetrics>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

/// Per-case ranks and top lists plus aggregated metrics.
pub fn evaluate_cases(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    ks: &[usize],
    with_coverage: bool,
) -> Result<(Vec<Ranked>, Vec<KMetrics>), EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Invalid("no evaluation cases".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::Invalid("ks must be non-empty and positive".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let ranked = cases
        .par_iter()
        .map(|c| rank_scores(&scorer.scores(c)?, c.target, &c.filtered, max_k))
        .collect::<Result<Vec<_>, _>>()?;
    let n = cases.len() as f64;
    let metrics = ks
        .iter()
        .map(|&k| {
            let hr = ranked.iter().map(|r| if r.rank <= k { 1.0 } else { 0.0 }).sum::<f64>() / n;
            let ndcg = ranked.iter().map(|r| ndcg_from_rank(r.rank, k)).sum::<f64>() / n;
            let coverage = with_coverage.then(|| {
                let lists: Vec<Vec<usize>> = ranked.iter().map(|r| r.top.clone()).collect();
                coverage_at_k(&lists, scorer.catalog_size(), k)
            });
            KMetrics { k, hr, ndcg, coverage }
        })
        .collect();
    Ok((ranked, metrics))
}

/// Looks up `[L, d_t]` context rows for a run of interactions.
pub fn gt_rows(gt: &GtSource, events: impl Iterator<Item = (i64, String)>) -> Result<Tensor, EvalError> {
    let d = gt.matrix.dim();
    let mut data = Vec::new();
    let mut n = 0;
    for (ts, loc) in events {
        let v = gt.vector(ts, &loc).ok_or_else(|| EvalError::MissingContext(gt.key(ts, &loc).to_string()))?;
        data.extend(v.iter().map(|&x| x as f64));
        n += 1;
    }
    Tensor::new(vec![n, d], data).map_err(|e| EvalError::Invalid(e.to_string()))
}

/// Builds an evaluation case from a history and the interaction to predict.
/// Histories longer than the model's window keep their most recent events.
pub fn make_case(
    model: &ModelState,
    history: &UserHistory,
    target: &Interaction,
    gt: Option<&GtSource>,
    with_context: bool,
    filter_seen: bool,
) -> Result<EvalCase, EvalError> {
    if history.is_empty() {
        return Err(EvalError::Invalid(format!("empty history for user {}", history.user_id)));
    }
    let start = history.len().saturating_sub(model.backbone.max_seq_len);
    let input = history.items[start..].iter().map(|k| model.item_index(k)).collect::<Result<Vec<_>, _>>()?;
    let arch = model.variant.architecture;
    let input_side = arch == Architecture::MetaGt || (arch == Architecture::IdMetaGt && model.variant.gt_input_side);
    let need_gt = || gt.ok_or_else(|| EvalError::MissingContext("geo-temporal embeddings not supplied".into()));
    let input_gt = if with_context && input_side {
        let events = (start..history.len()).map(|i| (history.timestamps[i], history.locations[i].clone()));
        Some(gt_rows(need_gt()?, events)?)
    } else {
        None
    };
    let target_gt = if with_context {
        let t = gt_rows(need_gt()?, std::iter::once((target.timestamp_utc, target.location.clone())))?;
        Some(t.into_data())
    } else {
        None
    };
    let filtered = if filter_seen {
        history.items.iter().filter_map(|k| model.catalog.index_of(k)).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        Vec::new()
    };
    Ok(EvalCase { user: history.user_id.clone(), input, input_gt, target: model.item_index(&target.item_id)?, target_gt, filtered })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Defaults to the variant's `gt_at_infer` when unset.
    pub with_context: Option<bool>,
    /// Defaults to on for explorer, off for general.
    pub filter_seen: Option<bool>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], with_context: None, filter_seen: None }
    }
}

/// Full-catalog evaluation of a model on a split's test cases.
pub fn evaluate(
    model: &ModelState,
    split: &Split,
    gt: Option<&GtSource>,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let with_context = opts.with_context.unwrap_or(model.variant.gt_at_infer);
    let filter_seen = opts.filter_seen.unwrap_or(split.mode == SplitMode::Explorer);
    let scorer = ModelScorer::new(model, with_context)?;
    let cases = split
        .test
        .iter()
        .map(|c| make_case(model, &c.input, &c.target, gt, with_context, filter_seen))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, metrics) = evaluate_cases(&scorer, &cases, &opts.ks, split.mode == SplitMode::General)?;
    let mut variant = model.variant.label();
    if model.variant.architecture.fuses_gt() && !with_context && model.variant.gt_at_infer {
        variant.push_str(" (no context)");
    }
    Ok(MetricsReport { variant, split_mode: split.mode, with_context, n_users: cases.len(), metrics })
}

/// Percentage change of `value` over `baseline`, or `None` when the baseline
/// is zero.
pub fn improvement_pct(value: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (value - baseline) / baseline * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Pct(f64),
    ZeroBaseline,
    Missing,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Pct(v) => write!(f, "{v:+.2}"),
            Cell::ZeroBaseline => f.write_str("n/a(0)"),
            Cell::Missing => f.write_str("-"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub split_mode: SplitMode,
    pub baseline: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

#[derive(Clone, Copy)]
enum Metric {
    Ndcg,
    Hr,
    Coverage,
}

fn metric_value(r: &MetricsReport, metric: Metric, k: usize) -> Option<f64> {
    let m = r.at(k)?;
    match metric {
        Metric::Ndcg => Some(m.ndcg),
        Metric::Hr => Some(m.hr),
        Metric::Coverage => m.coverage,
    }
}

/// Column layout: NDCG@5, NDCG@10, HR@1, HR@5, HR@10, then coverage at the
/// HR grid when the baseline reports it.
pub fn improvement_table(reports: &[MetricsReport], baseline: &MetricsReport) -> ImprovementTable {
    let mut cols: Vec<(String, Metric, usize)> = vec![
        ("NDCG@5".into(), Metric::Ndcg, 5),
        ("NDCG@10".into(), Metric::Ndcg, 10),
        ("HR@1".into(), Metric::Hr, 1),
        ("HR@5".into(), Metric::Hr, 5),
        ("HR@10".into(), Metric::Hr, 10),
    ];
    if baseline.metrics.iter().any(|m| m.coverage.is_some()) {
        for k in [1, 5, 10] {
            cols.push((format!("Coverage@{k}"), Metric::Coverage, k));
        }
    }
    let rows = reports
        .iter()
        .map(|r| {
            let cells = cols
                .iter()
                .map(|(_, metric, k)| match (metric_value(r, *metric, *k), metric_value(baseline, *metric, *k)) {
                    (Some(v), Some(b)) => improvement_pct(v, b).map_or(Cell::ZeroBaseline, Cell::Pct),
                    _ => Cell::Missing,
                })
                .collect();
            (r.variant.clone(), cells)
        })
        .collect();
    ImprovementTable {
        split_mode: baseline.split_mode,
        baseline: baseline.variant.clone(),
        columns: cols.into_iter().map(|c| c.0).collect(),
        rows,
    }
}

impl ImprovementTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(&name.replace(',', ";"));
            for c in cells {
                let _ = write!(out, ",{}", match c {
                    Cell::Pct(v) => format!("{v:.2}"),
                    other => other.to_string(),
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.0.len()).chain([7]).max().unwrap_or(7);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(9)).collect();
        let mut out = format!("Improvement (%) over {} [{} split]\n", self.baseline, self.split_mode);
        let _ = write!(out, "{:<name_w$}", "variant");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(out, "{name:<name_w$}");
            for (cell, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, "  {:>w$}", cell.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(ndcg_at_k(&[3, 1, 2], 3, 1), 1.0);
        assert!((ndcg_at_k(&[3, 1, 2], 1, 2) - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[3, 1, 2], 2, 2), 0.0);
        assert_eq!(hr_at_k(&[3, 1, 2], 2, 2), 0.0);
        assert_eq!(hr_at_k(&[3, 1, 2], 2, 3), 1.0);
        assert_eq!(coverage_at_k(&[vec![0], vec![1]], 10, 1), 0.2);
    }

    #[test]
    fn rank_ties_and_filtering() {
        let s = [0.5, 0.9, 0.5, 0.1];
        let r = rank_scores(&s, 2, &[], 4).unwrap();
        assert_eq!(r.rank, 3);
        assert_eq!(r.top, vec![1, 0, 2, 3]);
        let r = rank_scores(&s, 2, &[0, 1, 2], 2).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.top, vec![2, 3]);
    }

    #[test]
    fn identity_table_is_zero_and_zero_baseline_flagged() {
        let rep = |v: f64| MetricsReport {
            variant: "x".into(),
            split_mode: SplitMode::Explorer,
            with_context: false,
            n_users: 1,
            metrics: [1, 5, 10].map(|k| KMetrics { k, hr: v, ndcg: v, coverage: None }).to_vec(),
        };
        let t = improvement_table(&[rep(0.3)], &rep(0.3));
        assert!(t.rows[0].1.iter().all(|c| *c == Cell::Pct(0.0)));
        let t = improvement_table(&[rep(0.3)], &rep(0.0));
        assert!(t.rows[0].1.iter().all(|c| *c == Cell::ZeroBaseline));
        assert!(t.to_text().contains("n/a(0)"));
    }
}

//! Optimization loop: example assembly, Adam, clipping, early stopping.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use geotrec_autograd::{grad_check, GradCheckConfig, GradError, Gradients, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_histories, Catalog, Interaction, Split, SplitMode, UserHistory};
use crate::embedding::{EmbeddingMatrix, GtSource};
use crate::evaluation::{evaluate_cases, gt_rows, make_case, EvalCase, EvalError, ModelScorer};
use crate::io::write_atomic;
use crate::losses::{AuxKind, Provenance};
use crate::model::{Architecture, AuxExample, BackboneConfig, Example, ModelError, ModelState, VariantConfig};
use crate::sampling::{
    sample_semantic_negatives, sample_uniform_negatives, sample_window_negatives, SampleError, WindowIndex,
};

/// Examples per gradient-accumulation group. Fixed so the summation order
/// does not depend on the thread count.
const GROUP: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("sampling negatives for user {user}: {source}")]
    Sample { user: String, source: SampleError },
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: VariantConfig,
    pub backbone: BackboneConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_check_mode: bool,
    pub clip_norm: f64,
    /// Draw fresh negatives, dropout masks and batch order every epoch. When
    /// off, every epoch replays the first epoch's randomness.
    pub resample_each_epoch: bool,
    /// Hold out each user's last training item for early stopping.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: VariantConfig::default(),
            backbone: BackboneConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            grad_check_mode: false,
            clip_norm: 5.0,
            resample_each_epoch: true,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.variant.validate()?;
        self.backbone.validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(TrainError::Invalid("lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(TrainError::Invalid("adam betas must be in [0, 1) and eps > 0".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Invalid("patience, batch_size and max_epochs must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::Invalid("clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything a training run reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub split: &'a Split,
    /// Item universe; defaults to the items of the split when `None`.
    pub catalog: Option<&'a Catalog>,
    pub meta: Option<&'a EmbeddingMatrix>,
    pub gt: Option<&'a GtSource>,
}

/// One user's training sequence in catalog indices.
#[derive(Clone, Debug)]
pub struct UserPlan {
    pub user: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    /// `[n, d_t]` context of every event, when the variant needs it.
    pub gt: Option<Tensor>,
    /// Every item the user consumed in training (never a negative).
    pub exclude: HashSet<usize>,
}

fn sample_err(user: &str) -> impl Fn(SampleError) -> TrainError + '_ {
    move |source| TrainError::Sample { user: user.to_string(), source }
}

/// Shared read-only state for building examples.
pub struct ExampleBuilder<'a> {
    pub variant: &'a VariantConfig,
    pub max_seq_len: usize,
    pub catalog_size: usize,
    pub window: Option<WindowIndex>,
    pub meta_rows: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub temporal_window: usize,
    pub semantic_pool: usize,
    pub uniform: usize,
}

impl ProvenanceCounts {
    fn add(&mut self, p: Provenance) {
        match p {
            Provenance::TemporalWindow => self.temporal_window += 1,
            Provenance::SemanticPool => self.semantic_pool += 1,
            Provenance::Uniform => self.uniform += 1,
        }
    }

    fn merge(&mut self, o: &ProvenanceCounts) {
        self.temporal_window += o.temporal_window;
        self.semantic_pool += o.semantic_pool;
        self.uniform += o.uniform;
    }
}

fn rows_of(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let d = t.cols();
    let data = range.clone().flat_map(|i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![range.len(), d], data).expect("row slice")
}

impl ExampleBuilder<'_> {
    /// Next-item example over the last `max_seq_len + 1` events: inputs are
    /// every event but the last, positives every event but the first.
    pub fn build(&self, plan: &UserPlan, rng: &mut ChaCha8Rng) -> Result<(Example, ProvenanceCounts), TrainError> {
        let n_all = plan.items.len();
        if n_all < 2 {
            return Err(TrainError::Invalid(format!("user {} has fewer than 2 training events", plan.user)));
        }
        let start = n_all.saturating_sub(self.max_seq_len + 1);
        let n = n_all - start;
        let seq = &plan.items[start..];
        let err = sample_err(&plan.user);
        let mut counts = ProvenanceCounts::default();

        let mut negatives = Vec::with_capacity(n - 1);
        for _ in 1..n {
            let neg = sample_uniform_negatives(self.catalog_size, self.variant.ranking_n_neg, &plan.exclude, &plan.user, rng)
                .map_err(&err)?;
            negatives.push(neg.items);
        }
        let gt_of = |range: std::ops::Range<usize>| -> Result<Tensor, TrainError> {
            let t = plan.gt.as_ref().ok_or_else(|| TrainError::Invalid("geo-temporal rows missing".into()))?;
            Ok(rows_of(t, range))
        };
        let input_gt = if self.variant.gt_on_inputs(true) { Some(gt_of(start..n_all - 1)?) } else { None };
        let cand_gt = if self.variant.gt_on_candidates(true) { Some(gt_of(start + 1..n_all)?) } else { None };

        let aux = if self.variant.architecture == Architecture::AuxLoss {
            let anchors = gt_of(start..n_all)?;
            let mut aux_negs = Vec::with_capacity(n);
            for (k, idx) in (start..n_all).enumerate() {
                let negs = match self.variant.aux_kind {
                    AuxKind::Cosine | AuxKind::None => Vec::new(),
                    AuxKind::PairwiseSem => {
                        let rows = self.meta_rows.as_ref().ok_or_else(|| TrainError::Invalid("metadata rows missing".into()))?;
                        let neg = sample_semantic_negatives(
                            anchors.row(k),
                            rows,
                            self.variant.pool_fraction,
                            self.variant.aux_n_neg,
                            &plan.exclude,
                            &plan.user,
                            rng,
                        )
                        .map_err(&err)?;
                        counts.add(neg.provenance);
                        neg.items
                    }
                    AuxKind::Bce | AuxKind::PairwiseRand => {
                        let window = self.window.as_ref().ok_or_else(|| TrainError::Invalid("window index missing".into()))?;
                        let drawn = sample_window_negatives(
                            window,
                            &plan.user,
                            plan.timestamps[idx],
                            self.variant.window_days,
                            self.variant.aux_n_neg,
                            &plan.exclude,
                            rng,
                        );
                        let neg = match drawn {
                            Err(SampleError::EmptyPool { .. }) if self.variant.window_fallback_uniform => {
                                sample_uniform_negatives(self.catalog_size, self.variant.aux_n_neg, &plan.exclude, &plan.user, rng)
                            }
                            other => other,
                        }
                        .map_err(&err)?;
                        counts.add(neg.provenance);
                        neg.items
                    }
                };
                aux_negs.push(negs);
            }
            Some(AuxExample { anchors, positives: seq.to_vec(), negatives: aux_negs })
        } else {
            None
        };

        let ex = Example {
            user: plan.user.clone(),
            inputs: seq[..n - 1].to_vec(),
            input_gt,
            positives: seq[1..].to_vec(),
            negatives,
            cand_gt,
            aux,
        };
        Ok((ex, counts))
    }
}

/// Per-user plans plus validation cases.
pub struct Prepared {
    pub plans: Vec<UserPlan>,
    /// `(history, held-out interaction)` per validated user.
    pub validation: Vec<(UserHistory, Interaction)>,
}

fn index_history(catalog: &Catalog, h: &UserHistory) -> Result<Vec<usize>, TrainError> {
    h.items
        .iter()
        .map(|k| catalog.index_of(k).ok_or_else(|| ModelError::UnknownItem(k.clone()).into()))
        .collect()
}

/// Splits each training history into a training sequence and (when
/// `validate` is set and the history has at least 3 events) a held-out last
/// item.
pub fn prepare(
    split: &Split,
    catalog: &Catalog,
    gt: Option<&GtSource>,
    need_gt: bool,
    validate: bool,
) -> Result<Prepared, TrainError> {
    let mut plans = Vec::new();
    let mut validation = Vec::new();
    for (user, h) in &split.train {
        let exclude: HashSet<usize> = index_history(catalog, h)?.into_iter().collect();
        let seq = if validate && h.len() >= 3 {
            let n = h.len();
            validation.push((h.prefix(n - 1), h.event(n - 1)));
            h.prefix(n - 1)
        } else {
            h.clone()
        };
        if seq.len() < 2 {
            continue;
        }
        let gt_t = if need_gt {
            let src = gt.ok_or_else(|| TrainError::Invalid("variant needs geo-temporal embeddings".into()))?;
            Some(gt_rows(src, seq.timestamps.iter().copied().zip(seq.locations.iter().cloned()))?)
        } else {
            None
        };
        plans.push(UserPlan {
            user: user.clone(),
            items: index_history(catalog, &seq)?,
            timestamps: seq.timestamps.clone(),
            gt: gt_t,
            exclude,
        });
    }
    if plans.is_empty() {
        return Err(TrainError::Invalid("no user has at least 2 training events".into()));
    }
    Ok(Prepared { plans, validation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg10: Option<f64>,
    pub val_hr10: Option<f64>,
    pub mean_grad_norm: f64,
    pub negatives: ProvenanceCounts,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (or the last epoch when
    /// nothing is validated).
    pub model: ModelState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: BTreeMap<usize, Vec<f64>>,
    v: BTreeMap<usize, Vec<f64>>,
}

impl Adam {
    fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn update(&mut self, model: &mut ModelState, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (slot, id) in model.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let p = model.params.get_mut(id).data_mut();
            let m = self.m.entry(slot).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(slot).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

fn graph_err(e: ModelError) -> GradError {
    match e {
        ModelError::Graph(g) => g,
        other => GradError::ShapeMismatch { op: "model", detail: other.to_string() },
    }
}

/// Finite-difference check of the full training loss on `batch`, dropout
/// off.
pub fn check_gradients(
    model: &ModelState,
    batch: &[Example],
    cfg: &GradCheckConfig,
) -> Result<geotrec_autograd::GradCheckReport, TrainError> {
    grad_check(&model.params, |g, store| model.batch_loss(g, store, batch).map_err(graph_err), cfg)
        .map_err(|e| TrainError::GradCheckFailed(e.to_string()))
}

fn user_rng(seed: u64, epoch_key: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch_key << 32) | user as u64);
    rng
}

/// Builds the examples of one epoch in a fixed order.
pub fn build_epoch(
    builder: &ExampleBuilder<'_>,
    plans: &[UserPlan],
    seed: u64,
    epoch_key: u64,
) -> Result<(Vec<(usize, Example)>, ProvenanceCounts), TrainError> {
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.shuffle(&mut user_rng(seed, epoch_key, u32::MAX as usize));
    let built = order
        .par_iter()
        .map(|&u| {
            let mut rng = user_rng(seed, epoch_key, u);
            builder.build(&plans[u], &mut rng).map(|(ex, c)| (u, ex, c))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = ProvenanceCounts::default();
    let examples = built
        .into_iter()
        .map(|(u, ex, c)| {
            counts.merge(&c);
            (u, ex)
        })
        .collect();
    Ok((examples, counts))
}

/// Trains a fresh model and returns the best-validation parameters.
pub fn train(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome, TrainError> {
    train_with_callback(cfg, data, |_| {})
}

pub fn train_with_callback(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let split = data.split;
    let catalog = match data.catalog {
        Some(c) => c.clone(),
        None => {
            let mut log = flatten_histories(&split.train);
            log.extend(split.test.iter().map(|c| c.target.clone()));
            Catalog::from_log(&log)
        }
    };
    let variant = &cfg.variant;
    let gt_dim = data.gt.map(|g| g.matrix.dim());
    let mut model = ModelState::new(variant.clone(), cfg.backbone.clone(), catalog.clone(), data.meta, gt_dim, cfg.seed)?;

    let prepared = prepare(split, &catalog, data.gt, variant.needs_gt(), cfg.validate)?;
    let window = matches!(variant.aux_kind, AuxKind::Bce | AuxKind::PairwiseRand)
        .then(|| WindowIndex::new(&flatten_histories(&split.train), &catalog))
        .transpose()
        .map_err(sample_err("*"))?;
    let meta_rows = (variant.aux_kind == AuxKind::PairwiseSem).then(|| model.meta_rows_f64()).flatten();
    let builder = ExampleBuilder {
        variant,
        max_seq_len: cfg.backbone.max_seq_len,
        catalog_size: catalog.len(),
        window,
        meta_rows,
    };

    let with_context = variant.gt_at_infer;
    let filter_seen = split.mode == SplitMode::Explorer;
    let val_cases: Vec<EvalCase> = prepared
        .validation
        .iter()
        .map(|(h, t)| make_case(&model, h, t, data.gt, with_context, filter_seen))
        .collect::<Result<_, _>>()?;

    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, geotrec_autograd::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let key = if cfg.resample_each_epoch { epoch as u64 } else { 1 };
        let (examples, negatives) = build_epoch(&builder, &prepared.plans, cfg.seed, key)?;

        if cfg.grad_check_mode && epoch == 1 {
            let first: Vec<Example> = examples.iter().take(cfg.batch_size.min(4)).map(|(_, e)| e.clone()).collect();
            let gc = GradCheckConfig { max_coords_per_param: Some(8), ..GradCheckConfig::default() };
            let report = check_gradients(&model, &first, &gc)?;
            if !report.pass {
                let worst = report.worst().map(|p| format!("{} rel err {:.3e}", p.name, p.max_rel_err));
                return Err(TrainError::GradCheckFailed(worst.unwrap_or_default()));
            }
        }

        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut n_batches = 0;
        for batch in examples.chunks(cfg.batch_size) {
            step += 1;
            let groups = batch
                .par_chunks(GROUP)
                .map(|group| {
                    let mut acc = Gradients::default();
                    let mut loss = 0.0;
                    for (u, ex) in group {
                        let mut rng = user_rng(cfg.seed ^ 0xd50f, key, *u);
                        let mut g = Graph::new();
                        let l = model.example_loss(&mut g, &model.params, ex, Some(&mut rng))?;
                        loss += g.value(l).item().map_err(ModelError::from)?;
                        acc.accumulate(&g.backward(l).map_err(ModelError::from)?);
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut grads = Gradients::default();
            let mut batch_loss = 0.0;
            for (l, g) in &groups {
                batch_loss += l;
                grads.accumulate(g);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { what: "loss", epoch, step });
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { what: "gradient", epoch, step });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.update(&mut model, &grads);
            loss_sum += batch_loss;
            norm_sum += norm;
            n_batches += 1;
        }

        let (val_ndcg10, val_hr10) = if val_cases.is_empty() {
            (None, None)
        } else {
            let scorer = ModelScorer::new(&model, with_context)?;
            let (_, m) = evaluate_cases(&scorer, &val_cases, &[10], false)?;
            (Some(m[0].ndcg), Some(m[0].hr))
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            val_ndcg10,
            val_hr10,
            mean_grad_norm: norm_sum / n_batches as f64,
            negatives,
        };
        on_epoch(&rec);
        log.push(rec);

        match val_ndcg10 {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, epoch, model.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, model.params.clone())),
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome { model, log, best_epoch, stopped_early })
}

pub fn write_log_jsonl(path: &Path, log: &[EpochRecord]) -> Result<(), TrainError> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

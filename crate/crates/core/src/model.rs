//! Self-attentive sequential recommender and its context-aware variants.
//!
//! Every variant shares the same causal Transformer encoder. They differ in
//! how item tokens and candidate items are represented:
//!
//! | architecture   | token input            | candidate                  |
//! |----------------|------------------------|----------------------------|
//! | `baseline_id`  | `E[i]`                 | `E[j]`                     |
//! | `metadata_only`| `F(m_i)`               | `F(m_j)`                   |
//! | `meta_gt`      | `F(m_i + t_i)`         | `F(m_j + t)`               |
//! | `id_meta`      | `F1([E[i] ‖ m_i])`     | `F1([E[j] ‖ m_j])`         |
//! | `id_meta_gt`   | `z_i` (`+ F2(t_i)`)    | `z_j + F2(t)`              |
//! | `aux_loss`     | as `id_meta`           | as `id_meta`               |
//!
//! `t` on the candidate side is the context of the interaction being
//! predicted. `m` and `t` are frozen and only ever enter graphs as
//! constants.

use std::collections::BTreeMap;
use std::path::Path;

use geotrec_autograd::{GradError, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::embedding::EmbeddingMatrix;
use crate::io::write_atomic;
use crate::losses::{aux_loss_graph, ranking_loss_graph, AuxKind, AuxParams};

const LN_EPS: f64 = 1e-8;
const CKPT_MAGIC: &[u8; 8] = b"GTCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("sequence of length {len} outside 1..={max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("missing embedding: {0}")]
    MissingEmbedding(String),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 1, max_seq_len: 50, dropout_rate: 0.2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    BaselineId,
    MetadataOnly,
    MetaGt,
    IdMeta,
    IdMetaGt,
    AuxLoss,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::BaselineId,
        Architecture::MetadataOnly,
        Architecture::MetaGt,
        Architecture::IdMeta,
        Architecture::IdMetaGt,
        Architecture::AuxLoss,
    ];

    pub fn uses_ids(self) -> bool {
        !matches!(self, Architecture::MetadataOnly | Architecture::MetaGt)
    }

    pub fn uses_metadata(self) -> bool {
        self != Architecture::BaselineId
    }

    pub fn concat_ids(self) -> bool {
        matches!(self, Architecture::IdMeta | Architecture::IdMetaGt | Architecture::AuxLoss)
    }

    /// Whether geo-temporal vectors can enter the scoring path.
    pub fn fuses_gt(self) -> bool {
        matches!(self, Architecture::MetaGt | Architecture::IdMetaGt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::BaselineId => "baseline_id",
            Architecture::MetadataOnly => "metadata_only",
            Architecture::MetaGt => "meta_gt",
            Architecture::IdMeta => "id_meta",
            Architecture::IdMetaGt => "id_meta_gt",
            Architecture::AuxLoss => "aux_loss",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub architecture: Architecture,
    pub aux_kind: AuxKind,
    pub gt_at_train: bool,
    pub gt_at_infer: bool,
    /// For `id_meta_gt`: also add `F2(t_i)` to history tokens.
    pub gt_input_side: bool,
    pub lambda_aux: f64,
    pub aux: AuxParams,
    pub aux_n_neg: usize,
    pub ranking_n_neg: usize,
    pub window_days: i64,
    pub pool_fraction: f64,
    /// Fall back to uniform negatives when a temporal window is empty.
    pub window_fallback_uniform: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::BaselineId,
            aux_kind: AuxKind::None,
            gt_at_train: false,
            gt_at_infer: false,
            gt_input_side: false,
            lambda_aux: 0.1,
            aux: AuxParams::default(),
            aux_n_neg: 5,
            ranking_n_neg: 1,
            window_days: 7,
            pool_fraction: 0.2,
            window_fallback_uniform: true,
        }
    }
}

impl VariantConfig {
    pub fn new(architecture: Architecture) -> Self {
        let gt = architecture.fuses_gt();
        Self { architecture, gt_at_train: gt, gt_at_infer: gt, ..Self::default() }
    }

    pub fn aux(kind: AuxKind) -> Self {
        Self { aux_kind: kind, ..Self::new(Architecture::AuxLoss) }
    }

    /// GT during training only.
    pub fn train_only(mut self) -> Self {
        self.gt_at_infer = false;
        self
    }

    /// Short display name in the usual variant notation.
    pub fn label(&self) -> String {
        let base = match self.architecture {
            Architecture::BaselineId => "Baseline",
            Architecture::MetadataOnly => "M",
            Architecture::MetaGt => "M+GT",
            Architecture::IdMeta => "Id+M",
            Architecture::IdMetaGt => "Id+M+GT",
            Architecture::AuxLoss => "Id+M",
        };
        let mut s = base.to_string();
        if self.architecture.fuses_gt() && self.gt_at_train && !self.gt_at_infer {
            s.push_str("_train");
        }
        match self.aux_kind {
            AuxKind::None => {}
            AuxKind::Bce => s.push_str("+Loss-BCE"),
            AuxKind::Cosine => s.push_str("+Loss-Cos"),
            AuxKind::PairwiseRand => s.push_str("+Loss-Pairwise_rand"),
            AuxKind::PairwiseSem => s.push_str("+Loss-Pairwise_sem"),
        }
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let aux_arch = self.architecture == Architecture::AuxLoss;
        if (self.aux_kind != AuxKind::None) != aux_arch {
            return Err(ModelError::InvalidConfig("aux_kind must be set exactly for the aux_loss architecture".into()));
        }
        if !self.architecture.fuses_gt() && (self.gt_at_train || self.gt_at_infer || self.gt_input_side) {
            return Err(ModelError::InvalidConfig(format!(
                "{} does not fuse geo-temporal vectors; clear the gt flags",
                self.architecture.name()
            )));
        }
        if self.gt_input_side && self.architecture != Architecture::IdMetaGt {
            return Err(ModelError::InvalidConfig("gt_input_side only applies to id_meta_gt".into()));
        }
        if self.lambda_aux < 0.0 || !self.lambda_aux.is_finite() {
            return Err(ModelError::InvalidConfig("lambda_aux must be >= 0".into()));
        }
        if self.aux_kind == AuxKind::PairwiseRand || self.aux_kind == AuxKind::PairwiseSem {
            if self.aux.margin <= 0.0 {
                return Err(ModelError::InvalidConfig("pairwise margin must be > 0".into()));
            }
        }
        if self.ranking_n_neg == 0 || self.aux_n_neg == 0 || self.window_days <= 0 {
            return Err(ModelError::InvalidConfig("negative counts and window_days must be positive".into()));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(ModelError::InvalidConfig("pool_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Whether history tokens carry `t` in the given phase.
    pub fn gt_on_inputs(&self, training: bool) -> bool {
        let on = if training { self.gt_at_train } else { self.gt_at_infer };
        on && match self.architecture {
            Architecture::MetaGt => true,
            Architecture::IdMetaGt => self.gt_input_side,
            _ => false,
        }
    }

    /// Whether candidates carry `t` in the given phase.
    pub fn gt_on_candidates(&self, training: bool) -> bool {
        let on = if training { self.gt_at_train } else { self.gt_at_infer };
        on && self.architecture.fuses_gt()
    }

    /// Whether training needs geo-temporal vectors at all.
    pub fn needs_gt(&self) -> bool {
        self.gt_at_train || self.gt_at_infer || self.architecture == Architecture::AuxLoss
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln_attn_g: ParamId,
    ln_attn_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_ffn_g: ParamId,
    ln_ffn_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    item_emb: Option<ParamId>,
    f: Option<ParamId>,
    f1: Option<ParamId>,
    f2: Option<ParamId>,
    aux_proj: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_final_g: ParamId,
    ln_final_b: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore, n_layers: usize) -> Result<Self, ModelError> {
        let need = |name: &str| {
            store.find(name).ok_or_else(|| ModelError::Checkpoint(format!("parameter {name} missing")))
        };
        let blocks = (0..n_layers)
            .map(|l| {
                let n = |s: &str| need(&format!("block{l}.{s}"));
                Ok(BlockIds {
                    ln_attn_g: n("ln_attn.gamma")?,
                    ln_attn_b: n("ln_attn.beta")?,
                    wq: n("attn.wq")?,
                    wk: n("attn.wk")?,
                    wv: n("attn.wv")?,
                    wo: n("attn.wo")?,
                    ln_ffn_g: n("ln_ffn.gamma")?,
                    ln_ffn_b: n("ln_ffn.beta")?,
                    w1: n("ffn.w1")?,
                    b1: n("ffn.b1")?,
                    w2: n("ffn.w2")?,
                    b2: n("ffn.b2")?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            item_emb: store.find("item_emb"),
            f: store.find("f"),
            f1: store.find("f1"),
            f2: store.find("f2"),
            aux_proj: store.find("aux_proj"),
            pos: need("pos_emb")?,
            blocks,
            ln_final_g: need("ln_final.gamma")?,
            ln_final_b: need("ln_final.beta")?,
        })
    }
}

/// Catalog-aligned frozen metadata rows.
#[derive(Clone, Debug, PartialEq)]
struct FrozenMeta {
    hash: String,
    rows: Tensor,
}

/// One training sequence with everything sampled up front, so the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user: String,
    /// Input tokens `s_0..s_{L-1}`.
    pub inputs: Vec<usize>,
    /// `[L, d_t]` context of each input interaction, when tokens carry `t`.
    pub input_gt: Option<Tensor>,
    /// Next item for each input position.
    pub positives: Vec<usize>,
    /// `L x n` ranking negatives.
    pub negatives: Vec<Vec<usize>>,
    /// `[L, d_t]` context of each predicted interaction, when candidates
    /// carry `t`.
    pub cand_gt: Option<Tensor>,
    pub aux: Option<AuxExample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxExample {
    /// `[B, d_t]` anchor contexts.
    pub anchors: Tensor,
    /// Item of each anchor interaction.
    pub positives: Vec<usize>,
    /// `B x n` negatives; empty rows for the cosine form.
    pub negatives: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: VariantConfig,
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub items: Vec<String>,
    pub meta_dim: Option<usize>,
    pub meta_hash: Option<String>,
    pub gt_dim: Option<usize>,
}

/// Parameters plus the frozen references a model was built against.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub variant: VariantConfig,
    pub backbone: BackboneConfig,
    pub catalog: Catalog,
    pub params: ParamStore,
    pub seed: u64,
    meta: Option<FrozenMeta>,
    gt_dim: Option<usize>,
    ids: Ids,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, rows, cols, std)
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn align_meta(catalog: &Catalog, meta: &EmbeddingMatrix) -> Result<FrozenMeta, ModelError> {
    let d = meta.dim();
    let mut data = Vec::with_capacity(catalog.len() * d);
    for key in catalog.keys() {
        let row = meta.get(key).ok_or_else(|| ModelError::MissingEmbedding(format!("no metadata row for item {key}")))?;
        data.extend(row.iter().map(|&v| v as f64));
    }
    Ok(FrozenMeta { hash: meta.content_hash(), rows: Tensor::new(vec![catalog.len(), d], data)? })
}

impl ModelState {
    /// Builds a freshly initialized model. `meta` is required for every
    /// architecture except `baseline_id`; `gt_dim` whenever the variant uses
    /// geo-temporal vectors.
    pub fn new(
        variant: VariantConfig,
        backbone: BackboneConfig,
        catalog: Catalog,
        meta: Option<&EmbeddingMatrix>,
        gt_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        variant.validate()?;
        backbone.validate()?;
        if catalog.is_empty() {
            return Err(ModelError::InvalidConfig("empty catalog".into()));
        }
        let arch = variant.architecture;
        let meta = match (arch.uses_metadata(), meta) {
            (true, Some(m)) => Some(align_meta(&catalog, m)?),
            (true, None) => return Err(ModelError::MissingEmbedding("metadata embeddings required".into())),
            (false, _) => None,
        };
        let gt_dim = if variant.needs_gt() {
            Some(gt_dim.ok_or_else(|| ModelError::MissingEmbedding("geo-temporal embeddings required".into()))?)
        } else {
            None
        };
        let d = backbone.d_model;
        let d_m = meta.as_ref().map(|m| m.rows.cols());
        if arch == Architecture::MetaGt && gt_dim != d_m {
            return Err(ModelError::DimMismatch(gt_dim.unwrap_or(0), d_m.unwrap_or(0)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = catalog.len();
        match arch {
            Architecture::BaselineId => {
                store.insert("item_emb", normal(&mut rng, n, d, (1.0 / d as f64).sqrt()));
            }
            Architecture::MetadataOnly | Architecture::MetaGt => {
                let d_m = d_m.expect("metadata");
                if d_m != d {
                    store.insert("f", xavier(&mut rng, d_m, d));
                }
            }
            Architecture::IdMeta | Architecture::IdMetaGt | Architecture::AuxLoss => {
                let d_id = d / 2;
                if d_id == 0 {
                    return Err(ModelError::InvalidConfig("d_model too small for an id half".into()));
                }
                store.insert("item_emb", normal(&mut rng, n, d_id, (1.0 / d_id as f64).sqrt()));
                store.insert("f1", xavier(&mut rng, d_id + d_m.expect("metadata"), d));
                if arch == Architecture::IdMetaGt {
                    store.insert("f2", Tensor::zeros(&[gt_dim.expect("gt"), d]));
                }
                if arch == Architecture::AuxLoss {
                    store.insert("aux_proj", xavier(&mut rng, gt_dim.expect("gt"), d));
                }
            }
        }
        store.insert("pos_emb", normal(&mut rng, backbone.max_seq_len, d, (1.0 / d as f64).sqrt()));
        for l in 0..backbone.n_layers {
            let p = |s: &str| format!("block{l}.{s}");
            store.insert(p("ln_attn.gamma"), Tensor::vector(vec![1.0; d]));
            store.insert(p("ln_attn.beta"), Tensor::zeros(&[d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                store.insert(p(w), xavier(&mut rng, d, d));
            }
            store.insert(p("ln_ffn.gamma"), Tensor::vector(vec![1.0; d]));
            store.insert(p("ln_ffn.beta"), Tensor::zeros(&[d]));
            store.insert(p("ffn.w1"), xavier(&mut rng, d, d));
            store.insert(p("ffn.b1"), Tensor::zeros(&[d]));
            store.insert(p("ffn.w2"), xavier(&mut rng, d, d));
            store.insert(p("ffn.b2"), Tensor::zeros(&[d]));
        }
        store.insert("ln_final.gamma", Tensor::vector(vec![1.0; d]));
        store.insert("ln_final.beta", Tensor::zeros(&[d]));
        let ids = Ids::resolve(&store, backbone.n_layers)?;
        Ok(Self { variant, backbone, catalog, params: store, seed, meta, gt_dim, ids })
    }

    pub fn gt_dim(&self) -> Option<usize> {
        self.gt_dim
    }

    pub fn meta_hash(&self) -> Option<&str> {
        self.meta.as_ref().map(|m| m.hash.as_str())
    }

    /// Catalog-aligned metadata rows.
    pub fn meta_rows_f64(&self) -> Option<Vec<Vec<f64>>> {
        let m = self.meta.as_ref()?;
        Some((0..m.rows.rows()).map(|i| m.rows.row(i).to_vec()).collect())
    }

    /// True when the model's frozen metadata is bit-identical to `meta`.
    pub fn verify_frozen(&self, meta: &EmbeddingMatrix) -> bool {
        match (&self.meta, align_meta(&self.catalog, meta)) {
            (Some(ours), Ok(theirs)) => {
                ours.hash == theirs.hash
                    && ours.rows.data().iter().zip(theirs.rows.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            _ => false,
        }
    }

    /// `(name, numel)` for every trainable tensor, in insertion order.
    pub fn census(&self) -> Vec<(String, usize)> {
        self.params.iter().map(|(_, n, t)| (n.to_string(), t.numel())).collect()
    }

    pub fn item_index(&self, key: &str) -> Result<usize, ModelError> {
        self.catalog.index_of(key).ok_or_else(|| ModelError::UnknownItem(key.to_string()))
    }

    fn meta_rows(&self, g: &mut Graph, items: &[usize], add: Option<&Tensor>) -> Result<Var, ModelError> {
        let meta = self.meta.as_ref().ok_or_else(|| ModelError::MissingEmbedding("metadata".into()))?;
        let d = meta.rows.cols();
        let mut data = Vec::with_capacity(items.len() * d);
        for &i in items {
            if i >= self.catalog.len() {
                return Err(ModelError::UnknownItem(format!("index {i}")));
            }
            data.extend_from_slice(meta.rows.row(i));
        }
        if let Some(t) = add {
            if t.shape() != [items.len(), d] {
                return Err(ModelError::DimMismatch(t.cols(), d));
            }
            for (a, b) in data.iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        Ok(g.constant(Tensor::new(vec![items.len(), d], data)?)?)
    }

    fn check_gt(&self, t: &Tensor, rows: usize) -> Result<(), ModelError> {
        let d_t = self.gt_dim.ok_or_else(|| ModelError::VariantMismatch("model has no geo-temporal input".into()))?;
        if t.shape() != [rows, d_t] {
            return Err(ModelError::DimMismatch(t.cols(), d_t));
        }
        Ok(())
    }

    /// Item representation before any context: `E[j]`, `F(m_j)` or `z_j`.
    /// With `gt`, the variant's context fusion is applied row by row.
    fn item_repr(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[usize],
        gt: Option<&Tensor>,
    ) -> Result<Var, ModelError> {
        if let Some(t) = gt {
            if !self.variant.architecture.fuses_gt() {
                return Err(ModelError::VariantMismatch(format!(
                    "{} cannot take geo-temporal context",
                    self.variant.architecture.name()
                )));
            }
            self.check_gt(t, items.len())?;
        }
        match self.variant.architecture {
            Architecture::BaselineId => {
                let e = g.param(store, self.ids.item_emb.expect("baseline has ids"))?;
                Ok(g.select_rows(e, items)?)
            }
            Architecture::MetadataOnly | Architecture::MetaGt => {
                let x = self.meta_rows(g, items, gt)?;
                match self.ids.f {
                    Some(f) => {
                        let f = g.param(store, f)?;
                        Ok(g.matmul(x, f)?)
                    }
                    None => Ok(x),
                }
            }
            Architecture::IdMeta | Architecture::IdMetaGt | Architecture::AuxLoss => {
                let e = g.param(store, self.ids.item_emb.expect("ids"))?;
                let ie = g.select_rows(e, items)?;
                let m = self.meta_rows(g, items, None)?;
                let cat = g.concat_cols(&[ie, m])?;
                let f1 = g.param(store, self.ids.f1.expect("f1"))?;
                let z = g.matmul(cat, f1)?;
                match gt {
                    Some(t) => {
                        let shift = self.gt_shift(g, store, t)?;
                        Ok(g.add(z, shift)?)
                    }
                    None => Ok(z),
                }
            }
        }
    }

    /// `F2(t)` rows for `id_meta_gt`.
    fn gt_shift(&self, g: &mut Graph, store: &ParamStore, t: &Tensor) -> Result<Var, ModelError> {
        let f2 = self.ids.f2.ok_or_else(|| ModelError::VariantMismatch("no F2 projection".into()))?;
        let t = g.constant(t.clone())?;
        let f2 = g.param(store, f2)?;
        Ok(g.matmul(t, f2)?)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
        let p = self.backbone.dropout_rate;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = g.constant(Tensor::new(shape, mask)?)?;
        Ok(g.mul(x, mask)?)
    }

    /// Causal encoder over `items`; returns `[L, d_model]` hidden states.
    /// `input_gt` adds each token's context as the variant prescribes.
    /// Dropout is active only when `rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[usize],
        input_gt: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let l = items.len();
        let max = self.backbone.max_seq_len;
        if l == 0 || l > max {
            return Err(ModelError::SeqTooLong { len: l, max });
        }
        let tokens = match (self.variant.architecture, input_gt) {
            (Architecture::IdMetaGt, Some(t)) => {
                self.check_gt(t, l)?;
                let z = self.item_repr(g, store, items, None)?;
                let shift = self.gt_shift(g, store, t)?;
                g.add(z, shift)?
            }
            (_, t) => self.item_repr(g, store, items, t)?,
        };
        let pos_idx: Vec<usize> = (0..l).map(|k| max - l + k).collect();
        let pos_table = g.param(store, self.ids.pos)?;
        let pos = g.select_rows(pos_table, &pos_idx)?;
        let mut x = g.add(tokens, pos)?;
        x = self.dropout(g, x, &mut rng)?;
        for b in &self.ids.blocks {
            let ga = g.param(store, b.ln_attn_g)?;
            let ba = g.param(store, b.ln_attn_b)?;
            let q = g.layer_norm(x, ga, ba, LN_EPS)?;
            let attn = self.attention(g, store, b, q, x, &mut rng)?;
            x = g.add(q, attn)?;
            let gf = g.param(store, b.ln_ffn_g)?;
            let bf = g.param(store, b.ln_ffn_b)?;
            x = g.layer_norm(x, gf, bf, LN_EPS)?;
            let w1 = g.param(store, b.w1)?;
            let b1 = g.param(store, b.b1)?;
            let w2 = g.param(store, b.w2)?;
            let b2 = g.param(store, b.b2)?;
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.relu(h)?;
            let h = self.dropout(g, h, &mut rng)?;
            let h = g.matmul(h, w2)?;
            let h = g.add(h, b2)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        let gl = g.param(store, self.ids.ln_final_g)?;
        let bl = g.param(store, self.ids.ln_final_b)?;
        Ok(g.layer_norm(x, gl, bl, LN_EPS)?)
    }

    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &BlockIds,
        q: Var,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let heads = self.backbone.n_heads;
        let dh = self.backbone.d_model / heads;
        let wq = g.param(store, b.wq)?;
        let wk = g.param(store, b.wk)?;
        let wv = g.param(store, b.wv)?;
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(x, wk)?;
        let vp = g.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qp, kp, vp)
            } else {
                (g.slice_cols(qp, h * dh, dh)?, g.slice_cols(kp, h * dh, dh)?, g.slice_cols(vp, h * dh, dh)?)
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax(s, true)?;
            let a = self.dropout(g, a, rng)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let wo = g.param(store, b.wo)?;
        Ok(g.matmul(o, wo)?)
    }

    /// Metadata block of `F1` applied to `m`: the item side of the
    /// auxiliary alignment.
    fn aux_item_side(&self, g: &mut Graph, store: &ParamStore, items: &[usize]) -> Result<Var, ModelError> {
        let d_id = self.backbone.d_model / 2;
        let d_m = self.meta.as_ref().expect("aux has metadata").rows.cols();
        let f1 = g.param(store, self.ids.f1.expect("f1"))?;
        let rows: Vec<usize> = (d_id..d_id + d_m).collect();
        let wm = g.select_rows(f1, &rows)?;
        let m = self.meta_rows(g, items, None)?;
        Ok(g.matmul(m, wm)?)
    }

    /// Ranking loss (plus the weighted auxiliary term for aux variants) of one
    /// example. Dropout is active only when `rng` is given.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &Example,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let l = ex.inputs.len();
        if ex.positives.len() != l || ex.negatives.len() != l {
            return Err(ModelError::InvalidConfig("example positives/negatives must match inputs".into()));
        }
        let n = ex.negatives.first().map_or(0, Vec::len);
        if n == 0 || ex.negatives.iter().any(|r| r.len() != n) {
            return Err(ModelError::InvalidConfig("every position needs the same number of negatives".into()));
        }
        let h = self.encode(g, store, &ex.inputs, ex.input_gt.as_ref(), rng)?;
        let xp = self.item_repr(g, store, &ex.positives, ex.cand_gt.as_ref())?;
        let sp = g.row_dot(h, xp)?;

        let flat: Vec<usize> = ex.negatives.iter().flatten().copied().collect();
        let rep: Vec<usize> = (0..l).flat_map(|p| std::iter::repeat_n(p, n)).collect();
        let neg_gt = match &ex.cand_gt {
            Some(t) => {
                let d = t.cols();
                let data = rep.iter().flat_map(|&p| t.row(p).iter().copied()).collect();
                Some(Tensor::new(vec![rep.len(), d], data)?)
            }
            None => None,
        };
        let xn = self.item_repr(g, store, &flat, neg_gt.as_ref())?;
        let hr = g.select_rows(h, &rep)?;
        let sn = g.row_dot(hr, xn)?;
        let sn = g.reshape(sn, vec![l, n])?;
        let rank = ranking_loss_graph(g, sp, sn)?;

        let Some(aux) = &ex.aux else { return Ok(rank) };
        let form = self
            .variant
            .aux_kind
            .form()
            .ok_or_else(|| ModelError::VariantMismatch("aux example for a model without aux loss".into()))?;
        let proj = self.ids.aux_proj.ok_or_else(|| ModelError::VariantMismatch("no aux projection".into()))?;
        self.check_gt(&aux.anchors, aux.positives.len())?;
        let t = g.constant(aux.anchors.clone())?;
        let p = g.param(store, proj)?;
        let anchors = g.matmul(t, p)?;
        let pos = self.aux_item_side(g, store, &aux.positives)?;
        let negs = if self.variant.aux_kind.needs_negatives() {
            let flat: Vec<usize> = aux.negatives.iter().flatten().copied().collect();
            let k = aux.negatives.first().map_or(0, Vec::len);
            if k == 0 || aux.negatives.len() != aux.positives.len() || aux.negatives.iter().any(|r| r.len() != k) {
                return Err(ModelError::InvalidConfig("aux negatives must be B x n".into()));
            }
            Some(self.aux_item_side(g, store, &flat)?)
        } else {
            None
        };
        let aux_loss = aux_loss_graph(g, anchors, pos, negs, form, &self.variant.aux)?;
        let weighted = g.scale(aux_loss, self.variant.lambda_aux)?;
        Ok(g.add(rank, weighted)?)
    }

    /// Mean of [`Self::example_loss`] over `batch`, without dropout.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[Example]) -> Result<Var, ModelError> {
        let mut total: Option<Var> = None;
        for ex in batch {
            let l = self.example_loss(g, store, ex, None)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| ModelError::InvalidConfig("empty batch".into()))?;
        Ok(g.scale(total, 1.0 / batch.len() as f64)?)
    }

    /// Final hidden state for a history (no dropout).
    pub fn user_repr(&self, items: &[usize], input_gt: Option<&Tensor>) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let h = self.encode(&mut g, &self.params, items, input_gt, None)?;
        Ok(g.value(h).row(items.len() - 1).to_vec())
    }

    /// Context-free representation of every catalog item, `[N, d_model]`.
    pub fn all_item_reprs(&self) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let all: Vec<usize> = (0..self.catalog.len()).collect();
        let x = self.item_repr(&mut g, &self.params, &all, None)?;
        Ok(g.value(x).clone())
    }

    /// Representation of one candidate, with or without the query context.
    pub fn candidate_repr(&self, item: usize, t: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let t = t.map(|v| Tensor::new(vec![1, v.len()], v.to_vec())).transpose()?;
        let x = self.item_repr(&mut g, &self.params, &[item], t.as_ref())?;
        Ok(g.value(x).row(0).to_vec())
    }

    /// The additive shift a context `t` applies to every candidate. Zero for
    /// variants that do not fuse context at the candidate side.
    pub fn context_shift(&self, t: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d = self.backbone.d_model;
        let mut g = Graph::new();
        let tv = Tensor::new(vec![1, t.len()], t.to_vec())?;
        match self.variant.architecture {
            Architecture::MetaGt => {
                self.check_gt(&tv, 1)?;
                let x = g.constant(tv)?;
                let x = match self.ids.f {
                    Some(f) => {
                        let f = g.param(&self.params, f)?;
                        g.matmul(x, f)?
                    }
                    None => x,
                };
                Ok(g.value(x).data().to_vec())
            }
            Architecture::IdMetaGt => {
                let x = self.gt_shift(&mut g, &self.params, &tv)?;
                Ok(g.value(x).data().to_vec())
            }
            _ => Ok(vec![0.0; d]),
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            variant: self.variant.clone(),
            backbone: self.backbone.clone(),
            seed: self.seed,
            items: self.catalog.keys().to_vec(),
            meta_dim: self.meta.as_ref().map(|m| m.rows.cols()),
            meta_hash: self.meta.as_ref().map(|m| m.hash.clone()),
            gt_dim: self.gt_dim,
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_checkpoint_bytes())?;
        Ok(())
    }

    /// Restores a model. `meta` must be the same metadata matrix the model was
    /// trained with (checked by content hash).
    pub fn from_checkpoint_bytes(bytes: &[u8], meta: Option<&EmbeddingMatrix>) -> Result<Self, ModelError> {
        let bad = |s: &str| ModelError::Checkpoint(s.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(nlen)?).map_err(|_| bad("parameter name is not UTF-8"))?.to_string();
            let ndim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        let catalog = Catalog::from_keys(header.items.clone());
        if catalog.keys() != header.items.as_slice() {
            return Err(bad("item list is not sorted and unique"));
        }
        let meta = match (header.meta_hash.as_deref(), meta) {
            (Some(h), Some(m)) => {
                let fm = align_meta(&catalog, m)?;
                if fm.hash != h {
                    return Err(bad("metadata embeddings differ from the ones used in training"));
                }
                Some(fm)
            }
            (Some(_), None) => return Err(ModelError::MissingEmbedding("checkpoint needs metadata embeddings".into())),
            (None, _) => None,
        };
        let ids = Ids::resolve(&store, header.backbone.n_layers)?;
        Ok(Self {
            variant: header.variant,
            backbone: header.backbone,
            catalog,
            params: store,
            seed: header.seed,
            meta,
            gt_dim: header.gt_dim,
            ids,
        })
    }

    pub fn load(path: &Path, meta: Option<&EmbeddingMatrix>) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?, meta)
    }

    /// Named parameter snapshot, for comparisons in tests and tools.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params.iter().map(|(_, n, t)| (n.to_string(), t.data().to_vec())).collect()
    }
}

/// `h . x`.
pub fn score(h: &[f64], x: &[f64]) -> Result<f64, ModelError> {
    if h.len() != x.len() {
        return Err(ModelError::DimMismatch(h.len(), x.len()));
    }
    Ok(h.iter().zip(x).map(|(a, b)| a * b).sum())
}

//! Ranking and auxiliary alignment losses, as plain scalar functions and as
//! graph builders for training.

use geotrec_autograd::{log_sigmoid, GradError, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, EmbeddingError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("zero vector in similarity")]
    ZeroVector,
    #[error(transparent)]
    Graph(#[from] GradError),
}

impl From<EmbeddingError> for LossError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::ZeroVector => LossError::ZeroVector,
            other => LossError::Invalid(other.to_string()),
        }
    }
}

/// `-ln sigmoid(s_pos) - mean_j ln sigmoid(-s_neg_j)`.
pub fn ranking_loss(s_pos: f64, s_negs: &[f64]) -> Result<f64, LossError> {
    if s_negs.is_empty() {
        return Err(LossError::Invalid("ranking loss needs at least one negative".into()));
    }
    if !s_pos.is_finite() || s_negs.iter().any(|s| !s.is_finite()) {
        return Err(LossError::NonFinite("ranking_loss"));
    }
    let neg = s_negs.iter().map(|&s| log_sigmoid(-s)).sum::<f64>() / s_negs.len() as f64;
    Ok(-log_sigmoid(s_pos) - neg)
}

pub fn total_loss(rank: f64, aux: f64, lambda_aux: f64) -> f64 {
    rank + lambda_aux * aux
}

/// Which auxiliary objective an aux-loss model trains with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    #[default]
    None,
    Bce,
    Cosine,
    PairwiseRand,
    PairwiseSem,
}

impl AuxKind {
    pub const ALL: [AuxKind; 4] = [AuxKind::Bce, AuxKind::Cosine, AuxKind::PairwiseRand, AuxKind::PairwiseSem];

    pub fn form(self) -> Option<AuxForm> {
        match self {
            AuxKind::None => None,
            AuxKind::Bce => Some(AuxForm::Bce),
            AuxKind::Cosine => Some(AuxForm::Cosine),
            AuxKind::PairwiseRand | AuxKind::PairwiseSem => Some(AuxForm::Pairwise),
        }
    }

    pub fn needs_negatives(self) -> bool {
        matches!(self, AuxKind::Bce | AuxKind::PairwiseRand | AuxKind::PairwiseSem)
    }
}

impl std::str::FromStr for AuxKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(AuxKind::None),
            "bce" => Ok(AuxKind::Bce),
            "cosine" => Ok(AuxKind::Cosine),
            "pairwise_rand" => Ok(AuxKind::PairwiseRand),
            "pairwise_sem" => Ok(AuxKind::PairwiseSem),
            other => Err(format!("unknown aux kind {other:?}")),
        }
    }
}

/// The loss formula, independent of how negatives were sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxForm {
    Bce,
    Cosine,
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxParams {
    /// Temperature applied to similarities before the sigmoid in BCE.
    pub tau: f64,
    pub margin: f64,
}

impl Default for AuxParams {
    fn default() -> Self {
        Self { tau: 5.0, margin: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TemporalWindow,
    SemanticPool,
    Uniform,
}

/// Anchors with one positive and `n_neg` negatives each.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

/// Scalar reference implementation of the auxiliary losses.
///
/// * BCE: per anchor `-ln s(tau sim+) - mean_j ln s(-tau sim-_j)`, averaged.
/// * Cosine: mean of `1 - sim+`; negatives are ignored.
/// * Pairwise: mean over all (anchor, negative) of `max(0, margin - sim+ + sim-)`.
pub fn aux_loss(batch: &AuxBatch, form: AuxForm, p: &AuxParams) -> Result<f64, LossError> {
    let b = batch.anchors.len();
    if b == 0 || batch.positives.len() != b {
        return Err(LossError::Invalid("aux batch needs one positive per anchor".into()));
    }
    if form != AuxForm::Cosine {
        if batch.negatives.len() != b || batch.negatives.iter().any(Vec::is_empty) {
            return Err(LossError::Invalid("aux batch needs negatives for every anchor".into()));
        }
        if form == AuxForm::Pairwise && p.margin <= 0.0 {
            return Err(LossError::Invalid("pairwise margin must be positive".into()));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (t, pos)) in batch.anchors.iter().zip(&batch.positives).enumerate() {
        let sp = cosine_sim(t, pos)?;
        match form {
            AuxForm::Cosine => {
                total += 1.0 - sp;
                count += 1;
            }
            AuxForm::Bce => {
                let negs = &batch.negatives[i];
                let mut neg = 0.0;
                for m in negs {
                    neg += log_sigmoid(-p.tau * cosine_sim(t, m)?);
                }
                total += -log_sigmoid(p.tau * sp) - neg / negs.len() as f64;
                count += 1;
            }
            AuxForm::Pairwise => {
                for m in &batch.negatives[i] {
                    total += (p.margin - sp + cosine_sim(t, m)?).max(0.0);
                    count += 1;
                }
            }
        }
    }
    let v = total / count as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite("aux_loss"))
    }
}

/// Mean ranking loss over positions. `s_pos` is `[P]`, `s_neg` is `[P, n]`.
pub fn ranking_loss_graph(g: &mut Graph, s_pos: Var, s_neg: Var) -> Result<Var, GradError> {
    let lp = g.log_sigmoid(s_pos)?;
    let neg = g.scale(s_neg, -1.0)?;
    let ln = g.log_sigmoid(neg)?;
    let ln = g.row_mean(ln)?;
    let per = g.add(lp, ln)?;
    let m = g.mean(per)?;
    g.scale(m, -1.0)
}

/// Graph form of [`aux_loss`]. `anchors` and `positives` are `[B, d]`;
/// `negatives` is `[B * n, d]`, anchor-major. Rows are L2-normalized here,
/// so similarities are cosines.
pub fn aux_loss_graph(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
    form: AuxForm,
    p: &AuxParams,
) -> Result<Var, GradError> {
    let a = g.l2_normalize_rows(anchors)?;
    let pos = g.l2_normalize_rows(positives)?;
    let sp = g.row_dot(a, pos)?;
    let b = g.shape(sp)[0];
    if form == AuxForm::Cosine {
        let m = g.mean(sp)?;
        let neg = g.scale(m, -1.0)?;
        return g.add_scalar(neg, 1.0);
    }
    let negatives = negatives.ok_or(GradError::ShapeMismatch { op: "aux_loss", detail: "no negatives".into() })?;
    let rows = g.shape(negatives)[0];
    if b == 0 || rows % b != 0 {
        return Err(GradError::ShapeMismatch { op: "aux_loss", detail: format!("{rows} negatives for {b} anchors") });
    }
    let n = rows / b;
    let neg = g.l2_normalize_rows(negatives)?;
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let a_rep = g.select_rows(a, &rep)?;
    let sn = g.row_dot(a_rep, neg)?;
    let sn = g.reshape(sn, vec![b, n])?;
    match form {
        AuxForm::Bce => {
            let tp = g.scale(sp, p.tau)?;
            let lp = g.log_sigmoid(tp)?;
            let tn = g.scale(sn, -p.tau)?;
            let ln = g.log_sigmoid(tn)?;
            let ln = g.row_mean(ln)?;
            let per = g.add(lp, ln)?;
            let m = g.mean(per)?;
            g.scale(m, -1.0)
        }
        AuxForm::Pairwise => {
            let sp_col = g.reshape(sp, vec![b, 1])?;
            let diff = g.sub(sn, sp_col)?;
            let shifted = g.add_scalar(diff, p.margin)?;
            let hinge = g.relu(shifted)?;
            g.mean(hinge)
        }
        AuxForm::Cosine => unreachable!("handled above"),
    }
}

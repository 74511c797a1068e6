//! Finite-difference verification of analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::ParamStore;
use crate::GradError;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Base step for the central differences.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, tol: 1e-3, max_coords_per_param: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// Parameters the loss does not depend on have an all-zero analytic
    /// gradient; they are still checked.
    pub touched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar computation `f` against
/// central finite differences for every parameter in `params`.
///
/// The numeric derivative is a Richardson-extrapolated central difference
/// (steps `eps` and `2 eps`), which has O(eps^4) truncation error. `f` must
/// be deterministic and must build its computation from `params` through
/// [`Graph::param`].
pub fn grad_check<F>(params: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, GradError>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, params)?;
    let analytic = graph.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.value(out).item()
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (id, name, tensor) in params.iter() {
        let n = tensor.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(max) if max < n => {
                let stride = n as f64 / max as f64;
                (0..max).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.get(id);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let original = tensor.data()[c];
            let mut at = |delta: f64| -> Result<f64, GradError> {
                work.get_mut(id).data_mut()[c] = original + delta;
                let v = eval(&work);
                work.get_mut(id).data_mut()[c] = original;
                v
            };
            let h = cfg.eps;
            let d1 = (at(h)? - at(-h)?) / (2.0 * h);
            let d2 = (at(2.0 * h)? - at(-2.0 * h)?) / (4.0 * h);
            let numeric = (4.0 * d1 - d2) / 3.0;
            let a = grad.map_or(0.0, |g| g.data()[c]);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            coords_checked: coords.len(),
            touched: grad.is_some(),
        });
    }
    let pass = report.iter().all(|p| p.max_rel_err <= cfg.tol);
    Ok(GradCheckReport { params: report, tol: cfg.tol, pass })
}

//! Every op checked against finite differences on random small inputs.

use geotrec_autograd::{grad_check, GradCheckConfig, GradError, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random(&mut rng, &shape))?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> ParamStore, fn(&mut Graph, &ParamStore, u64) -> Result<Var, GradError>);

fn two(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", random(rng, a));
    s.insert("b", random(rng, b));
    s
}

fn pa(g: &mut Graph, p: &ParamStore) -> Var {
    g.param(p, p.find("a").unwrap()).unwrap()
}

fn pb(g: &mut Graph, p: &ParamStore) -> Var {
    g.param(p, p.find("b").unwrap()).unwrap()
}

fn cases() -> Vec<Case> {
    vec![
        ("matmul", |r| two(r, &[3, 4], &[4, 2]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.matmul(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("add", |r| two(r, &[3, 4], &[3, 4]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.add(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("add_row_broadcast", |r| two(r, &[3, 4], &[4]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.add(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("add_col_broadcast", |r| two(r, &[3, 4], &[3, 1]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.add(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("mul_row_broadcast", |r| two(r, &[3, 4], &[1, 4]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.mul(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("mul_scalar", |r| two(r, &[2, 3], &[]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.mul(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("concat", |r| two(r, &[3, 2], &[3, 3]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.concat_cols(&[a, b, a])?;
            weighted_sum(g, y, s)
        }),
        ("slice_transpose", |r| two(r, &[3, 5], &[2]), |g, p, s| {
            let a = pa(g, p);
            let y = g.slice_cols(a, 1, 3)?;
            let t = g.transpose(y)?;
            weighted_sum(g, t, s)
        }),
        ("embedding_lookup", |r| two(r, &[5, 3], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.embedding_lookup(a, &[4, 0, 4, 2])?;
            weighted_sum(g, y, s)
        }),
        ("layer_norm", |r| {
            let mut st = ParamStore::new();
            st.insert("a", random(r, &[3, 5]));
            st.insert("gamma", positive(r, &[5]));
            st.insert("beta", random(r, &[5]));
            st
        }, |g, p, s| {
            let a = pa(g, p);
            let gamma = g.param(p, p.find("gamma").unwrap())?;
            let beta = g.param(p, p.find("beta").unwrap())?;
            let y = g.layer_norm(a, gamma, beta, 1e-8)?;
            weighted_sum(g, y, s)
        }),
        ("relu", |r| two(r, &[4, 4], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.relu(a)?;
            weighted_sum(g, y, s)
        }),
        ("softmax_causal", |r| two(r, &[4, 4], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.softmax(a, true)?;
            weighted_sum(g, y, s)
        }),
        ("softmax_full", |r| two(r, &[3, 4], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.softmax(a, false)?;
            weighted_sum(g, y, s)
        }),
        ("sigmoid", |r| two(r, &[2, 3], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.sigmoid(a)?;
            weighted_sum(g, y, s)
        }),
        ("log", |r| {
            let mut st = ParamStore::new();
            st.insert("a", positive(r, &[2, 3]));
            st
        }, |g, p, s| {
            let a = pa(g, p);
            let y = g.log(a)?;
            weighted_sum(g, y, s)
        }),
        ("log_sigmoid", |r| two(r, &[2, 3], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.log_sigmoid(a)?;
            weighted_sum(g, y, s)
        }),
        ("mean_row_mean", |r| two(r, &[3, 4], &[1]), |g, p, _| {
            let a = pa(g, p);
            let sq = g.mul(a, a)?;
            let rm = g.row_mean(sq)?;
            g.mean(rm)
        }),
        ("row_dot", |r| two(r, &[3, 4], &[3, 4]), |g, p, s| {
            let (a, b) = (pa(g, p), pb(g, p));
            let y = g.row_dot(a, b)?;
            weighted_sum(g, y, s)
        }),
        ("l2_normalize_rows", |r| two(r, &[3, 4], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.l2_normalize_rows(a)?;
            weighted_sum(g, y, s)
        }),
        ("scale_add_scalar_reshape", |r| two(r, &[2, 3], &[1]), |g, p, s| {
            let a = pa(g, p);
            let y = g.scale(a, -2.5)?;
            let y = g.add_scalar(y, 0.75)?;
            let y = g.reshape(y, vec![3, 2])?;
            let y = g.relu(y)?;
            weighted_sum(g, y, s)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_across_seeds() {
    let cfg = GradCheckConfig::default();
    for (name, make, build) in cases() {
        for seed in 0..24u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 11);
            let params = make(&mut rng);
            let report = grad_check(&params, |g, p| build(g, p, seed), &cfg).unwrap();
            assert!(report.pass, "op {name} seed {seed}: {report:?}");
        }
    }
}

/// log_sigmoid is a fused op; compose it from sigmoid then log and compare
/// both the loss and the parameter gradient.
#[test]
fn fused_and_staged_log_sigmoid_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let id = store.insert("w", random(&mut rng, &[4, 3]));
    let x = random(&mut rng, &[2, 4]);

    let run = |fused: bool| {
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let xi = g.constant(x.clone()).unwrap();
        let s = g.matmul(xi, w).unwrap();
        let l = if fused {
            g.log_sigmoid(s).unwrap()
        } else {
            let sg = g.sigmoid(s).unwrap();
            g.log(sg).unwrap()
        };
        let loss = g.mean(l).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item().unwrap(), grads.get(id).unwrap().clone())
    };
    let (lf, gf) = run(true);
    let (ls, gs) = run(false);
    assert!((lf - ls).abs() < 1e-12);
    for (a, b) in gf.data().iter().zip(gs.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Layer norm (unit gain, zero bias) against centering followed by row
/// normalization scaled by sqrt(cols).
#[test]
fn fused_and_staged_layer_norm_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let id = store.insert("x", random(&mut rng, &[3, 4]));
    let weights = random(&mut rng, &[3, 4]);

    let fused = {
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let gamma = g.constant(Tensor::vector(vec![1.0; 4])).unwrap();
        let beta = g.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-8).unwrap();
        let w = g.constant(weights.clone()).unwrap();
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap().get(id).unwrap().clone()
    };
    let staged = {
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let mu = g.row_mean(x).unwrap();
        let mu = g.reshape(mu, vec![3, 1]).unwrap();
        let centered = g.sub(x, mu).unwrap();
        // (x - mean) / std == sqrt(cols) * (x - mean) / ||x - mean||
        let norm = g.l2_normalize_rows(centered).unwrap();
        let y = g.scale(norm, 2.0).unwrap(); // sqrt(cols) for cols = 4
        let w = g.constant(weights.clone()).unwrap();
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap().get(id).unwrap().clone()
    };
    for (a, b) in fused.data().iter().zip(staged.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

//! Random instances and naive reference implementations shared by the
//! integration tests. Nothing here calls into the library's kernels: the
//! references work on dense matrices built straight from the edge list.

#![allow(dead_code)]

use admp::graph::{Graph, NormAdjacency, Split};
use admp::model::{AdmpParams, Flavor, Mode, ModelShape, ParamId};
use admp::train::loss_and_gradients;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdős–Rényi edge list over `n` nodes (u < v).
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

/// Random labelled graph with disjoint non-empty train/val/test masks when
/// `n >= 3`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, p: f64) -> Graph {
    let edges = random_edges(rng, n, p);
    let features = Array2::from_shape_fn((n, d), |_| {
        if rng.gen::<f64>() < 0.3 {
            0.0
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mut split = Split::empty(n);
    for v in 0..n {
        match v % 3 {
            0 => split.train[v] = true,
            1 => split.val[v] = true,
            _ => split.test[v] = true,
        }
    }
    Graph::build(&edges, features, labels, c, split).unwrap().0
}

/// Parameters with every tensor (biases and GIN epsilons included) drawn
/// at random, so no gradient path is trivially zero.
pub fn random_params(rng: &mut ChaCha8Rng, shape: ModelShape) -> AdmpParams {
    let mut params = AdmpParams::init(shape, rng.gen());
    for id in params.ids() {
        if matches!(id, ParamId::Bias(_) | ParamId::Eps(_)) {
            params
                .get_mut(id)
                .value
                .mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
    }
    params
}

pub fn dense_adjacency(g: &Graph) -> Array2<f64> {
    let n = g.n_nodes();
    let mut a = Array2::zeros((n, n));
    for (u, v) in g.edges() {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    a
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` entry by entry.
pub fn dense_gcn_operator(g: &Graph) -> Array2<f64> {
    let a = dense_adjacency(g);
    let n = g.n_nodes();
    let deg: Vec<f64> = (0..n).map(|v| a.row(v).sum() + 1.0).collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let aij = a[[i, j]] + if i == j { 1.0 } else { 0.0 };
        aij / (deg[i] * deg[j]).sqrt()
    })
}

pub fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn log_softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Log-probabilities of exits `0..=L` with no dropout, written directly
/// from the layer equations over dense matrices.
pub fn naive_logprobs(params: &AdmpParams, g: &Graph) -> Vec<Array2<f64>> {
    let a = match params.flavor() {
        Flavor::Gcn => dense_gcn_operator(g),
        Flavor::Gin => dense_adjacency(g),
    };
    let x = g.features().clone();
    let mut out = vec![log_softmax(&naive_matmul(
        &x,
        &params.get(ParamId::Exit(0)).value,
    ))];
    let mut h = x;
    for l in 1..=params.depth() {
        let mut m = naive_matmul(&a, &h);
        if params.flavor() == Flavor::Gin {
            let eps = params.get(ParamId::Eps(l)).value[[0, 0]];
            m = m + &h * (1.0 + eps);
        }
        out.push(log_softmax(&naive_matmul(
            &m,
            &params.get(ParamId::Exit(l)).value,
        )));
        if l < params.depth() {
            let mut pre = naive_matmul(&m, &params.get(ParamId::Weight(l)).value);
            pre += &params.get(ParamId::Bias(l)).value;
            h = pre.mapv(|v| v.max(0.0));
        }
    }
    out
}

/// Sum over exits of the mean training-set negative log-likelihood.
pub fn naive_alm_loss(params: &AdmpParams, g: &Graph) -> f64 {
    let train = &g.split().train;
    let count = train.iter().filter(|&&t| t).count() as f64;
    naive_logprobs(params, g)
        .iter()
        .map(|lp| {
            (0..g.n_nodes())
                .filter(|&v| train[v])
                .map(|v| -lp[[v, g.labels()[v]]])
                .sum::<f64>()
                / count
        })
        .sum()
}

/// Central differences of [`naive_alm_loss`] for one parameter tensor.
pub fn finite_difference(params: &AdmpParams, g: &Graph, id: ParamId, step: f64) -> Array2<f64> {
    let mut p = params.clone();
    let shape = p.get(id).value.dim();
    let mut grad = Array2::zeros(shape);
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let orig = p.get(id).value[[i, j]];
            p.get_mut(id).value[[i, j]] = orig + step;
            let up = naive_alm_loss(&p, g);
            p.get_mut(id).value[[i, j]] = orig - step;
            let down = naive_alm_loss(&p, g);
            p.get_mut(id).value[[i, j]] = orig;
            grad[[i, j]] = (up - down) / (2.0 * step);
        }
    }
    grad
}

/// Core numbers by repeatedly deleting every node of degree `< k`.
pub fn peeling_core_numbers(g: &Graph) -> Vec<usize> {
    let n = g.n_nodes();
    let mut core = vec![0; n];
    let mut alive = vec![true; n];
    let mut k = 0;
    while alive.iter().any(|&a| a) {
        loop {
            let doomed: Vec<usize> = (0..n)
                .filter(|&v| alive[v] && g.neighbors(v).iter().filter(|&&u| alive[u]).count() < k)
                .collect();
            if doomed.is_empty() {
                break;
            }
            for v in doomed {
                alive[v] = false;
            }
        }
        for v in 0..n {
            if alive[v] {
                core[v] = k;
            }
        }
        k += 1;
    }
    core
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Worst tensor-wise relative error between the tape gradient of the
/// all-exit loss and central differences of the dense reference loss.
pub fn check_instance(seed: u64, flavor: Flavor) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(3..=16);
    let d = r.gen_range(1..=8);
    let c = r.gen_range(2..=4);
    let g = random_graph(&mut r, n, d, c, 0.3);
    let shape = ModelShape {
        flavor,
        depth: r.gen_range(0..=3),
        in_dim: d,
        hidden: r.gen_range(1..=8),
        n_classes: c,
    };
    let params = random_params(&mut r, shape);
    let adj = NormAdjacency::new(&g, flavor.norm_kind());
    let objective: Vec<usize> = (0..=shape.depth).collect();
    let (loss, grads) =
        loss_and_gradients(&params, &g, &adj, &objective, Mode::Eval, 0.0, &mut rng(0)).unwrap();
    assert!((loss - naive_alm_loss(&params, &g)).abs() < 1e-12);
    assert_eq!(grads.len(), params.ids().len());
    grads
        .iter()
        .map(|(id, grad)| rel_error(grad, &finite_difference(&params, &g, *id, 1e-5)))
        .fold(0.0, f64::max)
}

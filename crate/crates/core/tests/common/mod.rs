//! Naive reference implementations shared by the integration tests. They use
//! plain loops over `Vec<f64>` and none of the library's batched kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfl_core::numerics::{Activation, Layer, Mlp, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

fn act_grad(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

/// Pre-activations and outputs of every layer for one sample.
pub fn forward_one(m: &Mlp, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre = Vec::new();
    let mut post = vec![x.to_vec()];
    for l in m.layers() {
        let input = post.last().unwrap().clone();
        let mut z = vec![0.0; l.output_dim()];
        for o in 0..l.output_dim() {
            let mut s = l.bias()[o];
            for i in 0..l.input_dim() {
                s += l.weight().get(o, i) * input[i];
            }
            z[o] = s;
        }
        post.push(z.iter().map(|&v| act(l.activation(), v)).collect());
        pre.push(z);
    }
    (pre, post)
}

pub fn output_one(m: &Mlp, x: &[f64]) -> Vec<f64> {
    forward_one(m, x).1.pop().unwrap()
}

/// `(1/B) sum_i J_i^T g_i` in layer-major order (weights row-major, then bias).
pub fn param_grad(m: &Mlp, xs: &[Vec<f64>], gs: &[Vec<f64>]) -> Vec<f64> {
    let layers = m.layers();
    let mut gw: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weight().len()]).collect();
    let mut gb: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.output_dim()]).collect();
    let inv_b = 1.0 / xs.len() as f64;
    for (x, g) in xs.iter().zip(gs) {
        let (pre, post) = forward_one(m, x);
        let mut up = g.clone();
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let delta: Vec<f64> = (0..l.output_dim())
                .map(|o| up[o] * act_grad(l.activation(), pre[li][o]))
                .collect();
            let mut next = vec![0.0; l.input_dim()];
            for o in 0..l.output_dim() {
                gb[li][o] += delta[o] * inv_b;
                for i in 0..l.input_dim() {
                    gw[li][o * l.input_dim() + i] += delta[o] * post[li][i] * inv_b;
                    next[i] += l.weight().get(o, i) * delta[o];
                }
            }
            up = next;
        }
    }
    gw.into_iter().zip(gb).flat_map(|(w, b)| w.into_iter().chain(b)).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn one_hot(y: usize, c: usize) -> Vec<f64> {
    (0..c).map(|j| if j == y { 1.0 } else { 0.0 }).collect()
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, v: &[f64], eps: f64) -> Vec<f64> {
    let mut p = v.to_vec();
    (0..v.len())
        .map(|j| {
            let o = p[j];
            p[j] = o + eps;
            let up = f(&p);
            p[j] = o - eps;
            let down = f(&p);
            p[j] = o;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale == 0.0 {
        0.0
    } else {
        n(&d) / scale
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A random ReLU MLP and batch whose hidden pre-activations all stay at
/// least `margin` away from the kink, so central differences are smooth.
pub fn smooth_instance(seed: u64, margin: f64) -> (Mlp, Tensor) {
    let mut r = rng(seed);
    loop {
        let d = r.random_range(2..7);
        let h = r.random_range(2..9);
        let c = r.random_range(2..6);
        let b = r.random_range(1..5);
        let m = Mlp::two_layer(d, h, c, &mut r);
        // Random biases so the bias gradients are exercised away from zero init.
        let layers: Vec<Layer> = m
            .layers()
            .iter()
            .map(|l| {
                let bias = (0..l.output_dim()).map(|_| r.random_range(-0.5..0.5)).collect();
                Layer::new(l.weight().clone(), bias, l.activation()).unwrap()
            })
            .collect();
        let m = Mlp::from_layers(layers).unwrap();
        let x = random_tensor(b, d, &mut r);
        let ok = x.iter_rows().all(|row| {
            let (pre, _) = forward_one(&m, row);
            pre[..pre.len() - 1].iter().flatten().all(|z| z.abs() > margin)
        });
        if ok {
            return (m, x);
        }
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

/// One SGD step of the composite model `softmax(sum_k G_k(x^k))` trained
/// centrally on `batch`.
pub fn central_step(models: &mut [Mlp], views: &[Tensor], labels: &[usize], batch: &[usize], lr: f64) -> f64 {
    let c = models[0].out_dim();
    let mut gs = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for &i in batch {
        let mut z = vec![0.0; c];
        for (m, v) in models.iter().zip(views) {
            for (a, b) in z.iter_mut().zip(output_one(m, v.row(i))) {
                *a += b;
            }
        }
        let p = softmax(&z);
        loss -= p[labels[i]].ln();
        gs.push(p.iter().zip(one_hot(labels[i], c)).map(|(a, b)| a - b).collect::<Vec<f64>>());
    }
    for (m, v) in models.iter_mut().zip(views) {
        let xs: Vec<Vec<f64>> = batch.iter().map(|&i| v.row(i).to_vec()).collect();
        let g = param_grad(m, &xs, &gs);
        let theta: Vec<f64> = m.flatten().iter().zip(&g).map(|(t, d)| t - lr * d).collect();
        *m = m.unflatten(&theta).unwrap();
    }
    loss / batch.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Labels minimizing the gradient-matching distance over all `c^B`
/// assignments, given the true fused logits of the batch.
pub fn enumerate_labels(model: &Mlp, x: &Tensor, logits: &Tensor, observed: &[f64]) -> Vec<usize> {
    let (b, c) = (x.rows(), logits.cols());
    let xs = rows(x);
    let probs: Vec<Vec<f64>> = logits.iter_rows().map(softmax).collect();
    let mut best = (f64::INFINITY, Vec::new());
    for code in 0..c.pow(b as u32) {
        let ys: Vec<usize> = (0..b).map(|i| code / c.pow(i as u32) % c).collect();
        let gs: Vec<Vec<f64>> = probs
            .iter()
            .zip(&ys)
            .map(|(p, &y)| p.iter().zip(one_hot(y, c)).map(|(a, e)| a - e).collect())
            .collect();
        let sim = param_grad(model, &xs, &gs);
        let d: f64 = sim.iter().zip(observed).map(|(a, o)| (a - o).powi(2)).sum();
        if d < best.0 {
            best = (d, ys);
        }
    }
    best.1
}

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DefenseError;
use crate::numerics::clip_l2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

/// One draw from Laplace(0, b) by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let t = 1.0 - 2.0 * u.abs();
        if t > 0.0 {
            return -b * u.signum() * t.ln();
        }
    }
}

/// Clips `g` to L2 norm `clip`, then adds i.i.d. noise of std `scale`
/// (Gaussian) or scale `scale` (Laplace) to every coordinate.
pub fn dp_noise<R: Rng + ?Sized>(
    g: &[f64],
    kind: NoiseKind,
    scale: f64,
    clip: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DefenseError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(DefenseError::Config(format!("noise scale must be > 0, got {scale}")));
    }
    if !(clip > 0.0) {
        return Err(DefenseError::Config(format!("clip norm must be > 0, got {clip}")));
    }
    let mut out = clip_l2(g, clip);
    match kind {
        NoiseKind::Gaussian => {
            let normal = Normal::new(0.0, scale).expect("positive std");
            out.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        NoiseKind::Laplace => out.iter_mut().for_each(|v| *v += sample_laplace(scale, rng)),
    }
    Ok(out)
}

/// Number of entries kept at drop rate `s`.
pub(crate) fn keep_count(len: usize, s: f64) -> usize {
    if len == 0 {
        return 0;
    }
    // The epsilon absorbs rounding in (1 - s) * len, e.g. 0.001 * 1000.
    (((1.0 - s) * len as f64 - 1e-9).ceil() as usize).clamp(1, len)
}

/// Keeps the largest-magnitude entries, zeroing the rest; ties go to the
/// lower index.
pub fn sparsify(g: &[f64], s: f64) -> Vec<f64> {
    let k = keep_count(g.len(), s);
    if k == g.len() {
        return g.to_vec();
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; g.len()];
    for &i in &order[..k] {
        out[i] = g[i];
    }
    out
}

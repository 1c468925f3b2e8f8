//! Confusional autoencoder for label disguise.
//!
//! The encoder maps a one-hot label to a soft "fake" label, the decoder maps
//! it back. Training minimises
//! `CE(y, dec) - lambda1 * CE(y, enc) - lambda2 * Entropy(enc)`
//! over freshly sampled one-hot batches.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! "COAE"            4 bytes magic
//! version           u32 (currently 1)
//! classes           u32
//! lambda1, lambda2  f64, f64
//! encoder, decoder  each: layer count u32, then per layer
//!                   in u32, out u32, activation u8 (0 identity, 1 relu),
//!                   out*in weights f64 (row-major), out bias f64
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DefenseError;
use crate::numerics::{
    argmax, entropy, one_hot_matrix, softmax_rows, softmax_vjp, Activation, Adam, Layer, Mlp, Tensor, LOG_FLOOR,
};

const MAGIC: &[u8; 4] = b"COAE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoaeLosses {
    pub contrastive: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoaeConfig {
    pub classes: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Hidden width; `(6c)^2` when unset.
    pub hidden: Option<usize>,
    pub max_attempts: usize,
}

impl CoaeConfig {
    pub fn new(classes: usize, lambda1: f64, lambda2: f64, seed: u64) -> Self {
        CoaeConfig {
            classes,
            lambda1,
            lambda2,
            steps: 3000,
            batch: 64,
            lr: 1e-3,
            seed,
            hidden: None,
            max_attempts: 5,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or((6 * self.classes) * (6 * self.classes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: CoaeLosses,
    pub steps: usize,
    pub attempts: usize,
    pub seed: u64,
}

/// A trained encoder/decoder pair. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAe {
    encoder: Mlp,
    decoder: Mlp,
    classes: usize,
    lambda1: f64,
    lambda2: f64,
    report: Option<TrainingReport>,
    /// `Enc(e_k)` for every class.
    fake_labels: Vec<Vec<f64>>,
}

fn ce_row(target: &[f64], p: &[f64]) -> f64 {
    -target
        .iter()
        .zip(p)
        .map(|(t, &q)| if *t == 0.0 { 0.0 } else { t * q.max(LOG_FLOOR).ln() })
        .sum::<f64>()
}

/// `d CE(target, p) / dp` consistent with the floored log.
fn ce_row_grad(target: &[f64], p: &[f64]) -> Vec<f64> {
    target
        .iter()
        .zip(p)
        .map(|(t, &q)| if q > LOG_FLOOR { -t / q } else { 0.0 })
        .collect()
}

fn entropy_row_grad(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&q| if q > LOG_FLOOR { -(q.ln() + 1.0) } else { -(LOG_FLOOR.ln()) })
        .collect()
}

/// Batch-mean CoAE losses for one-hot `y`, fake labels `fake` and
/// reconstructions `recon` (all `[n, c]`, rows on the simplex).
pub fn coae_losses(y: &Tensor, fake: &Tensor, recon: &Tensor, lambda1: f64, lambda2: f64) -> Result<CoaeLosses, DefenseError> {
    if y.shape() != fake.shape() || y.shape() != recon.shape() {
        return Err(DefenseError::Shape(format!(
            "coae_losses: {:?} / {:?} / {:?}",
            y.shape(),
            fake.shape(),
            recon.shape()
        )));
    }
    let weights = vec![1.0 / y.rows().max(1) as f64; y.rows()];
    Ok(weighted_losses(y, fake, recon, &weights, lambda1, lambda2))
}

fn weighted_losses(y: &Tensor, fake: &Tensor, recon: &Tensor, w: &[f64], lambda1: f64, lambda2: f64) -> CoaeLosses {
    let mut contrastive = 0.0;
    let mut ent = 0.0;
    for i in 0..y.rows() {
        contrastive += w[i] * (ce_row(y.row(i), recon.row(i)) - lambda1 * ce_row(y.row(i), fake.row(i)));
        ent += w[i] * entropy(fake.row(i));
    }
    CoaeLosses {
        contrastive,
        entropy: ent,
        total: contrastive - lambda2 * ent,
    }
}

impl CoAe {
    pub fn from_parts(encoder: Mlp, decoder: Mlp, lambda1: f64, lambda2: f64) -> Result<Self, DefenseError> {
        let c = encoder.in_dim();
        if encoder.out_dim() != c || decoder.in_dim() != c || decoder.out_dim() != c || c < 2 {
            return Err(DefenseError::Shape(format!(
                "encoder {}->{} / decoder {}->{} must all match c >= 2",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        let mut coae = CoAe {
            encoder,
            decoder,
            classes: c,
            lambda1,
            lambda2,
            report: None,
            fake_labels: Vec::new(),
        };
        let basis = one_hot_matrix(&(0..c).collect::<Vec<_>>(), c);
        let fake = coae.encode(&basis)?;
        coae.fake_labels = fake.iter_rows().map(<[f64]>::to_vec).collect();
        Ok(coae)
    }

    /// Single-layer encoder and decoder `softmax(sharpness * I x)`: fake
    /// labels are (numerically) the true labels.
    pub fn identity(classes: usize, sharpness: f64) -> Result<Self, DefenseError> {
        let layer = || {
            let mut w = Tensor::zeros(&[classes, classes]);
            for i in 0..classes {
                w.set(i, i, sharpness);
            }
            Layer::new(w, vec![0.0; classes], Activation::Identity)
        };
        let enc = Mlp::from_layers(vec![layer()?])?;
        let dec = Mlp::from_layers(vec![layer()?])?;
        CoAe::from_parts(enc, dec, 0.0, 0.0)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn lambdas(&self) -> (f64, f64) {
        (self.lambda1, self.lambda2)
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// `softmax(Enc(y))` row-wise.
    pub fn encode(&self, y: &Tensor) -> Result<Tensor, DefenseError> {
        Ok(softmax_rows(&self.encoder.predict(y)?))
    }

    /// `softmax(Dec(p))` row-wise.
    pub fn decode(&self, p: &Tensor) -> Result<Tensor, DefenseError> {
        Ok(softmax_rows(&self.decoder.predict(p)?))
    }

    /// Soft fake label for a class index.
    pub fn fake_label(&self, class: usize) -> &[f64] {
        &self.fake_labels[class]
    }

    pub fn fake_labels(&self) -> &[Vec<f64>] {
        &self.fake_labels
    }

    /// Per-class `Entropy(Enc(e_i))`.
    pub fn fake_entropies(&self) -> Vec<f64> {
        self.fake_labels.iter().map(|p| entropy(p)).collect()
    }

    /// `argmax(Dec(Enc(e_i))) == i` for every class.
    pub fn round_trip_holds(&self) -> bool {
        let Ok(t) = Tensor::from_rows(&self.fake_labels) else {
            return false;
        };
        match self.decode(&t) {
            Ok(rec) => rec.iter_rows().enumerate().all(|(i, r)| argmax(r) == i),
            Err(_) => false,
        }
    }

    /// `argmax(Enc(e_i)) != i` for every class.
    pub fn contrast_holds(&self) -> bool {
        self.fake_labels.iter().enumerate().all(|(i, p)| argmax(p) != i)
    }

    pub fn confusion_holds(&self, min_entropy: f64) -> bool {
        self.fake_entropies().iter().all(|&h| h >= min_entropy)
    }

    fn gates_hold(&self) -> bool {
        self.round_trip_holds()
            && (self.lambda1 <= 0.0 || self.contrast_holds())
            && (self.lambda2 < 0.5 || self.confusion_holds(0.5 * std::f64::consts::LN_2))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&self.lambda1.to_le_bytes());
        out.extend_from_slice(&self.lambda2.to_le_bytes());
        for net in [&self.encoder, &self.decoder] {
            out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
            for l in net.layers() {
                out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
                out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
                out.push(l.activation().code());
                for v in l.weight().data().iter().chain(l.bias()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DefenseError> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4)? != MAGIC {
            return Err(DefenseError::Format("missing COAE magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DefenseError::Format(format!("unsupported version {version}")));
        }
        let classes = r.u32()? as usize;
        let lambda1 = r.f64()?;
        let lambda2 = r.f64()?;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let n_layers = r.u32()? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let input = r.u32()? as usize;
                let output = r.u32()? as usize;
                let act = Activation::from_code(r.take(1)?[0])
                    .ok_or_else(|| DefenseError::Format("unknown activation code".into()))?;
                let weights = (0..input * output).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                let bias = (0..output).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                layers.push(Layer::new(Tensor::from_vec(&[output, input], weights)?, bias, act)?);
            }
            nets.push(Mlp::from_layers(layers)?);
        }
        if r.offset != bytes.len() {
            return Err(DefenseError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.offset
            )));
        }
        let decoder = nets.pop().expect("two nets");
        let encoder = nets.pop().expect("two nets");
        let coae = CoAe::from_parts(encoder, decoder, lambda1, lambda2)?;
        if coae.classes != classes {
            return Err(DefenseError::Format(format!(
                "header says {classes} classes, layers say {}",
                coae.classes
            )));
        }
        Ok(coae)
    }

    pub fn save(&self, path: &Path) -> Result<(), DefenseError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DefenseError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DefenseError> {
        let bytes = std::fs::read(path).map_err(|e| DefenseError::Io(format!("{}: {e}", path.display())))?;
        CoAe::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DefenseError> {
        if self.offset + n > self.bytes.len() {
            return Err(DefenseError::Format(format!("truncated at byte {}", self.offset)));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DefenseError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, DefenseError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

/// Loss and flat gradient (encoder params then decoder params) for one
/// batch given as per-class weights. Exposed to the crate for gradient checks.
pub(crate) fn loss_and_grad(
    encoder: &Mlp,
    decoder: &Mlp,
    classes_present: &[usize],
    weights: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<(CoaeLosses, Vec<f64>), DefenseError> {
    let c = encoder.in_dim();
    let m = classes_present.len();
    let y = one_hot_matrix(classes_present, c);
    let enc_acts = encoder.forward(&y)?;
    let fake = softmax_rows(enc_acts.output());
    let dec_acts = decoder.forward(&fake)?;
    let recon = softmax_rows(dec_acts.output());
    let losses = weighted_losses(&y, &fake, &recon, weights, lambda1, lambda2);

    // Row k of every out-gradient carries m * w_k so that the batch mean
    // taken by `backward` equals the weighted sum.
    let mut dec_out = Tensor::zeros(&[m, c]);
    for k in 0..m {
        let v = ce_row_grad(y.row(k), recon.row(k));
        let dz = softmax_vjp(recon.row(k), &v);
        let s = m as f64 * weights[k];
        dec_out.row_mut(k).iter_mut().zip(dz).for_each(|(o, d)| *o = s * d);
    }
    let (dec_grad, d_fake) = decoder.backward(&dec_acts, &dec_out)?;
    let mut enc_out = Tensor::zeros(&[m, c]);
    for k in 0..m {
        let s = m as f64 * weights[k];
        let ce = ce_row_grad(y.row(k), fake.row(k));
        let ent = entropy_row_grad(fake.row(k));
        let dp: Vec<f64> = (0..c)
            .map(|j| d_fake.get(k, j) + s * (-lambda1 * ce[j] - lambda2 * ent[j]))
            .collect();
        let dz = softmax_vjp(fake.row(k), &dp);
        enc_out.row_mut(k).copy_from_slice(&dz);
    }
    let (enc_grad, _) = encoder.backward(&enc_acts, &enc_out)?;
    let mut flat = enc_grad.flat();
    flat.extend(dec_grad.flat());
    Ok((losses, flat))
}

fn train_once(cfg: &CoaeConfig, seed: u64) -> Result<CoAe, DefenseError> {
    let c = cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = cfg.hidden_width();
    let mut encoder = Mlp::two_layer(c, hidden, c, &mut rng);
    let mut decoder = Mlp::two_layer(c, hidden, c, &mut rng);
    let n_enc = encoder.param_count();
    let mut params = encoder.flatten();
    params.extend(decoder.flatten());
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut last = CoaeLosses {
        contrastive: 0.0,
        entropy: 0.0,
        total: 0.0,
    };
    for _ in 0..cfg.steps {
        // A batch of uniform one-hot labels only has c distinct rows, so the
        // networks run once per present class weighted by its frequency.
        let mut counts = vec![0usize; c];
        for _ in 0..cfg.batch {
            counts[rng.random_range(0..c)] += 1;
        }
        let present: Vec<usize> = (0..c).filter(|&k| counts[k] > 0).collect();
        let weights: Vec<f64> = present.iter().map(|&k| counts[k] as f64 / cfg.batch as f64).collect();
        let (losses, grad) = loss_and_grad(&encoder, &decoder, &present, &weights, cfg.lambda1, cfg.lambda2)?;
        if !losses.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DefenseError::TrainingFailed(format!("non-finite loss with seed {seed}")));
        }
        opt.step(&mut params, &grad);
        encoder.set_params(&params[..n_enc])?;
        decoder.set_params(&params[n_enc..])?;
        last = losses;
    }
    let mut coae = CoAe::from_parts(encoder, decoder, cfg.lambda1, cfg.lambda2)?;
    coae.report = Some(TrainingReport {
        losses: last,
        steps: cfg.steps,
        attempts: 0,
        seed,
    });
    Ok(coae)
}

/// Trains a CoAE and checks its gates: round trip on every class, contrast
/// when `lambda1 > 0`, per-class fake-label entropy `>= ln(2)/2` when
/// `lambda2 >= 0.5`. A failed gate retrains with a derived seed.
pub fn train_coae(cfg: &CoaeConfig) -> Result<CoAe, DefenseError> {
    if cfg.classes < 2 {
        return Err(DefenseError::Config(format!("CoAE needs c >= 2, got {}", cfg.classes)));
    }
    if cfg.lambda2 < 0.0 || cfg.lr <= 0.0 || cfg.batch == 0 {
        return Err(DefenseError::Config("lambda2 >= 0, lr > 0 and batch > 0 are required".into()));
    }
    let attempts = cfg.max_attempts.max(1);
    let mut failures = Vec::new();
    for attempt in 0..attempts {
        let seed = cfg.seed.wrapping_add(attempt as u64 * 0x9E37_79B9);
        let mut coae = train_once(cfg, seed)?;
        if coae.gates_hold() {
            if let Some(r) = coae.report.as_mut() {
                r.attempts = attempt + 1;
            }
            return Ok(coae);
        }
        failures.push(format!(
            "seed {seed}: round_trip={} contrast={} min_entropy={:.4}",
            coae.round_trip_holds(),
            coae.contrast_holds(),
            coae.fake_entropies().iter().copied().fold(f64::INFINITY, f64::min)
        ));
    }
    Err(DefenseError::TrainingFailed(failures.join("; ")))
}

//! Mock additively homomorphic ciphertexts and the trusted decryptor.
//!
//! An [`OpaqueVec`] never exposes its payload outside the crate. Parties can
//! only combine ciphertexts with each other and with plaintext values they
//! hold; the only path back to plaintext is [`Ttp::decrypt`], which accepts
//! batch aggregates and nothing else.

use std::fmt;

use serde::Serialize;

use super::ProtocolError;
use crate::numerics::Tensor;

pub type PartyId = usize;

/// What a ciphertext was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    /// Encryption of a public value.
    Constant,
    /// Depends on a single sample's private data.
    Sample { origin: PartyId, sample: usize },
    /// Mean over `count` distinct samples.
    Aggregate { origin: PartyId, count: usize },
}

impl Provenance {
    /// Tag of a value computed from both operands. Per-sample dependence is
    /// sticky: anything touched by a sample ciphertext stays per-sample.
    fn join(self, other: Provenance) -> Provenance {
        match (self, other) {
            (s @ Provenance::Sample { .. }, _) => s,
            (_, s @ Provenance::Sample { .. }) => s,
            (a @ Provenance::Aggregate { .. }, _) => a,
            (_, b) => b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct OpaqueVec {
    payload: Vec<f64>,
    tag: Provenance,
}

impl fmt::Debug for OpaqueVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpaqueVec")
            .field("len", &self.payload.len())
            .field("tag", &self.tag)
            .finish()
    }
}

fn same_len(a: usize, b: usize, context: &str) -> Result<(), ProtocolError> {
    if a != b {
        return Err(ProtocolError::Shape(format!("{context}: lengths {a} and {b}")));
    }
    Ok(())
}

impl OpaqueVec {
    /// Encrypts one sample's private vector.
    pub fn encrypt(values: &[f64], origin: PartyId, sample: usize) -> OpaqueVec {
        OpaqueVec {
            payload: values.to_vec(),
            tag: Provenance::Sample { origin, sample },
        }
    }

    pub fn encrypt_constant(values: &[f64]) -> OpaqueVec {
        OpaqueVec {
            payload: values.to_vec(),
            tag: Provenance::Constant,
        }
    }

    /// Wraps a value computed inside the crate's secure-evaluation boundary.
    pub(crate) fn sealed(payload: Vec<f64>, tag: Provenance) -> OpaqueVec {
        OpaqueVec { payload, tag }
    }

    pub(crate) fn payload(&self) -> &[f64] {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn tag(&self) -> Provenance {
        self.tag
    }

    pub fn add(&self, other: &OpaqueVec) -> Result<OpaqueVec, ProtocolError> {
        same_len(self.len(), other.len(), "OpaqueVec::add")?;
        Ok(OpaqueVec {
            payload: self.payload.iter().zip(&other.payload).map(|(a, b)| a + b).collect(),
            tag: self.tag.join(other.tag),
        })
    }

    pub fn sub(&self, other: &OpaqueVec) -> Result<OpaqueVec, ProtocolError> {
        same_len(self.len(), other.len(), "OpaqueVec::sub")?;
        Ok(OpaqueVec {
            payload: self.payload.iter().zip(&other.payload).map(|(a, b)| a - b).collect(),
            tag: self.tag.join(other.tag),
        })
    }

    pub fn scale(&self, a: f64) -> OpaqueVec {
        OpaqueVec {
            payload: self.payload.iter().map(|v| a * v).collect(),
            tag: self.tag,
        }
    }

    /// `sum_k coeffs[k] * items[k]`.
    pub fn linear_combine(items: &[&OpaqueVec], coeffs: &[f64]) -> Result<OpaqueVec, ProtocolError> {
        if items.is_empty() || items.len() != coeffs.len() {
            return Err(ProtocolError::Shape(format!(
                "linear_combine: {} items, {} coefficients",
                items.len(),
                coeffs.len()
            )));
        }
        let mut out = items[0].scale(coeffs[0]);
        for (v, &a) in items.iter().zip(coeffs).skip(1) {
            same_len(out.len(), v.len(), "linear_combine")?;
            out.payload.iter_mut().zip(&v.payload).for_each(|(o, x)| *o += a * x);
            out.tag = out.tag.join(v.tag);
        }
        Ok(out)
    }

    /// Elementwise product with a plaintext vector.
    pub fn mul_plain(&self, p: &[f64]) -> Result<OpaqueVec, ProtocolError> {
        same_len(self.len(), p.len(), "OpaqueVec::mul_plain")?;
        Ok(OpaqueVec {
            payload: self.payload.iter().zip(p).map(|(a, b)| a * b).collect(),
            tag: self.tag,
        })
    }

    /// `M^T v` for a plaintext `M` of shape `[self.len(), n]`.
    pub fn matvec_transpose_plain(&self, m: &Tensor) -> Result<OpaqueVec, ProtocolError> {
        same_len(self.len(), m.rows(), "OpaqueVec::matvec_transpose_plain")?;
        let mut out = vec![0.0; m.cols()];
        for (i, &v) in self.payload.iter().enumerate() {
            if v != 0.0 {
                out.iter_mut().zip(m.row(i)).for_each(|(o, w)| *o += v * w);
            }
        }
        Ok(OpaqueVec {
            payload: out,
            tag: self.tag,
        })
    }

    /// `M v` for a plaintext `M` of shape `[n, self.len()]`.
    pub fn matvec_plain(&self, m: &Tensor) -> Result<OpaqueVec, ProtocolError> {
        same_len(self.len(), m.cols(), "OpaqueVec::matvec_plain")?;
        Ok(OpaqueVec {
            payload: m
                .iter_rows()
                .map(|r| r.iter().zip(&self.payload).map(|(a, b)| a * b).sum())
                .collect(),
            tag: self.tag,
        })
    }

    /// Row-major `v x^T` for plaintext `x`.
    pub fn outer_plain(&self, x: &[f64]) -> OpaqueVec {
        let mut payload = Vec::with_capacity(self.len() * x.len());
        for &v in &self.payload {
            payload.extend(x.iter().map(|a| v * a));
        }
        OpaqueVec { payload, tag: self.tag }
    }

    pub fn concat(parts: &[OpaqueVec]) -> Result<OpaqueVec, ProtocolError> {
        let first = parts
            .first()
            .ok_or_else(|| ProtocolError::Shape("concat of nothing".into()))?;
        let mut tag = first.tag;
        let mut payload = Vec::with_capacity(parts.iter().map(OpaqueVec::len).sum());
        for p in parts {
            tag = tag.join(p.tag);
            payload.extend_from_slice(&p.payload);
        }
        Ok(OpaqueVec { payload, tag })
    }

    /// Encrypted zero vector carrying `like`'s provenance.
    pub fn zeros_like(like: &OpaqueVec, len: usize) -> OpaqueVec {
        OpaqueVec {
            payload: vec![0.0; len],
            tag: like.tag,
        }
    }

    /// Mean of one ciphertext per distinct sample, owned by `origin`.
    pub fn batch_mean(items: &[OpaqueVec], origin: PartyId) -> Result<OpaqueVec, ProtocolError> {
        if items.is_empty() {
            return Err(ProtocolError::Aggregation("empty batch".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for it in items {
            match it.tag {
                Provenance::Sample { sample, .. } => {
                    if !seen.insert(sample) {
                        return Err(ProtocolError::Aggregation(format!("sample {sample} appears twice")));
                    }
                }
                other => {
                    return Err(ProtocolError::Aggregation(format!(
                        "batch items must be per-sample, got {other:?}"
                    )))
                }
            }
            same_len(items[0].len(), it.len(), "batch_mean")?;
        }
        let inv = 1.0 / items.len() as f64;
        let mut payload = vec![0.0; items[0].len()];
        for it in items {
            payload.iter_mut().zip(&it.payload).for_each(|(o, v)| *o += v);
        }
        payload.iter_mut().for_each(|v| *v *= inv);
        Ok(OpaqueVec {
            payload,
            tag: Provenance::Aggregate {
                origin,
                count: items.len(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecryptRecord {
    pub round: u64,
    pub requester: PartyId,
    pub tag: Provenance,
    pub len: usize,
}

/// Trusted third party holding the decryption key.
#[derive(Debug, Default, Clone)]
pub struct Ttp {
    round: u64,
    expected_count: Option<usize>,
    log: Vec<DecryptRecord>,
}

impl Ttp {
    pub fn new() -> Self {
        Ttp::default()
    }

    /// Starts a round in which every aggregate must cover `batch` samples.
    pub fn begin_round(&mut self, round: u64, batch: usize) {
        self.round = round;
        self.expected_count = Some(batch);
    }

    /// Decrypts a batch aggregate for the party that owns it.
    pub fn decrypt(&mut self, requester: PartyId, v: OpaqueVec) -> Result<Vec<f64>, ProtocolError> {
        match v.tag {
            Provenance::Aggregate { origin, count } => {
                if origin != requester {
                    return Err(ProtocolError::Refused(format!(
                        "party {requester} asked for party {origin}'s aggregate"
                    )));
                }
                if let Some(expected) = self.expected_count {
                    if count != expected {
                        return Err(ProtocolError::Refused(format!(
                            "aggregate over {count} samples in a round of {expected}"
                        )));
                    }
                }
            }
            other => {
                return Err(ProtocolError::Refused(format!("only batch aggregates are decrypted, got {other:?}")));
            }
        }
        self.log.push(DecryptRecord {
            round: self.round,
            requester,
            tag: v.tag,
            len: v.len(),
        });
        Ok(v.payload)
    }

    pub fn audit_log(&self) -> &[DecryptRecord] {
        &self.log
    }
}

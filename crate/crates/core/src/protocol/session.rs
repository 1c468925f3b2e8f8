use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::opaque::{OpaqueVec, PartyId, Provenance, Ttp};
use super::ProtocolError;
use crate::defenses::Defense;
use crate::numerics::{softmax, Activations, Mlp, Tensor, LOG_FLOOR};
use crate::Error;

/// What a passive party's forward hook gets to see.
pub struct ForwardContext<'a> {
    pub round: u64,
    pub party: PartyId,
    pub batch: &'a [usize],
    pub model: &'a Mlp,
    /// The party's full local feature block.
    pub features: &'a Tensor,
    /// Plaintext outputs for the batch, row per slot.
    pub outputs: &'a Tensor,
}

pub struct BackwardContext<'a> {
    pub round: u64,
    pub party: PartyId,
    pub batch: &'a [usize],
}

pub struct ObserveContext<'a> {
    pub round: u64,
    pub party: PartyId,
    pub batch: &'a [usize],
    /// Model before this round's update.
    pub model: &'a Mlp,
    pub features: &'a Tensor,
    /// Decrypted batch-mean parameter gradient.
    pub gradient: &'a [f64],
}

/// One term of a party's encrypted parameter gradient: the Jacobian of the
/// local model at sample `input`, applied to `grad`. `None` contributes zero.
#[derive(Debug, Clone)]
pub struct Contribution {
    pub input: Option<usize>,
    pub grad: OpaqueVec,
}

/// Slot `i` pairs `batch[i]` with `grads[i]`.
pub fn honest_contributions(batch: &[usize], grads: &[OpaqueVec]) -> Vec<Contribution> {
    batch
        .iter()
        .zip(grads)
        .map(|(&i, g)| Contribution {
            input: Some(i),
            grad: g.clone(),
        })
        .collect()
}

/// Attack plug-in points of a passive party. The defaults are honest.
pub trait PassiveHooks {
    fn forward(&mut self, _ctx: &ForwardContext<'_>, outputs: Vec<OpaqueVec>) -> Result<Vec<OpaqueVec>, Error> {
        Ok(outputs)
    }

    fn backward(&mut self, ctx: &BackwardContext<'_>, grads: &[OpaqueVec]) -> Result<Vec<Contribution>, Error> {
        Ok(honest_contributions(ctx.batch, grads))
    }

    fn observe(&mut self, _ctx: &ObserveContext<'_>) -> Result<(), Error> {
        Ok(())
    }
}

pub struct PassiveParty {
    model: Mlp,
    features: Tensor,
    hooks: Option<Box<dyn PassiveHooks>>,
}

impl PassiveParty {
    pub fn new(model: Mlp, features: Tensor) -> Self {
        PassiveParty {
            model,
            features,
            hooks: None,
        }
    }

    pub fn with_hooks(mut self, hooks: Box<dyn PassiveHooks>) -> Self {
        self.hooks = Some(hooks);
        self
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

pub struct ActiveParty {
    model: Mlp,
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    defense: Defense,
    rng: ChaCha8Rng,
}

impl ActiveParty {
    pub fn new(model: Mlp, features: Tensor, labels: Vec<usize>, classes: usize, defense: Defense, seed: u64) -> Self {
        ActiveParty {
            model,
            features,
            labels,
            classes,
            defense,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn defense(&self) -> &Defense {
        &self.defense
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample `g_i = T(softmax(sum_k H_i^k) - target(y_i))` on ciphertexts.
    ///
    /// This is the only place payloads of other parties' ciphertexts are
    /// combined with labels; it stands in for the homomorphic evaluation of
    /// the loss gradient and returns ciphertexts only.
    fn fuse(
        &mut self,
        own: &Tensor,
        passive: &[Vec<OpaqueVec>],
        batch: &[usize],
        active_id: PartyId,
    ) -> Result<(Vec<OpaqueVec>, f64), ProtocolError> {
        let c = self.classes;
        let mut grads = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        for (slot, &sample) in batch.iter().enumerate() {
            let mut logits = own.row(slot).to_vec();
            for outs in passive {
                let h = outs
                    .get(slot)
                    .ok_or_else(|| ProtocolError::Shape(format!("missing slot {slot}")))?;
                if h.len() != c {
                    return Err(ProtocolError::Shape(format!("passive output of length {}", h.len())));
                }
                logits.iter_mut().zip(h.payload()).for_each(|(l, v)| *l += v);
            }
            let p = softmax(&logits);
            let target = self.defense.target(self.labels[sample], c);
            loss -= target
                .iter()
                .zip(&p)
                .filter(|(t, _)| **t != 0.0)
                .map(|(t, q)| t * q.max(LOG_FLOOR).ln())
                .sum::<f64>();
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| a - b).collect();
            let g = self.defense.transform(g, &mut self.rng);
            grads.push(OpaqueVec::sealed(g, Provenance::Sample { origin: active_id, sample }));
        }
        Ok((grads, loss / batch.len() as f64))
    }
}

/// `J_row^T g` as a ciphertext, built only from plaintext-linear operations.
fn opaque_param_grad(model: &Mlp, acts: &Activations, row: usize, g: &OpaqueVec) -> Result<OpaqueVec, Error> {
    let layers = model.layers();
    let mut parts: Vec<OpaqueVec> = Vec::with_capacity(2 * layers.len());
    let mut delta = g.clone();
    for (li, l) in layers.iter().enumerate().rev() {
        let d = l.activation_derivative(acts.pre_activation(li).row(row));
        delta = delta.mul_plain(&d)?;
        parts.push(delta.clone());
        parts.push(delta.outer_plain(acts.layer_input(li).row(row)));
        if li > 0 {
            delta = delta.matvec_transpose_plain(l.weight())?;
        }
    }
    parts.reverse();
    Ok(OpaqueVec::concat(&parts)?)
}

/// Encrypted batch-mean parameter gradient for one party.
fn aggregate_contributions(
    model: &Mlp,
    features: &Tensor,
    batch: &[usize],
    batch_acts: &Activations,
    contributions: &[Contribution],
    owner: PartyId,
) -> Result<OpaqueVec, Error> {
    if contributions.len() != batch.len() {
        return Err(ProtocolError::Shape(format!(
            "{} contributions for a batch of {}",
            contributions.len(),
            batch.len()
        ))
        .into());
    }
    let honest = contributions.iter().zip(batch).all(|(c, &i)| c.input == Some(i));
    let own_acts;
    let (acts, rows): (&Activations, Vec<Option<usize>>) = if honest {
        (batch_acts, (0..batch.len()).map(Some).collect())
    } else {
        let ids: Vec<usize> = contributions.iter().filter_map(|c| c.input).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= features.rows()) {
            return Err(ProtocolError::Batch(format!("contribution input {bad} out of range")).into());
        }
        own_acts = model.forward(&features.select_rows(&ids))?;
        let mut next = 0;
        let rows = contributions
            .iter()
            .map(|c| {
                c.input.map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        (&own_acts, rows)
    };
    let p = model.param_count();
    let items = contributions
        .iter()
        .zip(rows)
        .map(|(c, row)| match row {
            Some(r) => opaque_param_grad(model, acts, r, &c.grad),
            None => Ok(OpaqueVec::zeros_like(&c.grad, p)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OpaqueVec::batch_mean(&items, owner)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: u64,
    /// Decrypted gradient applied by each party, in party order.
    pub gradients: Vec<Vec<f64>>,
    /// Mean training loss against the active party's targets.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub main_accuracy: f64,
    pub backdoor_accuracy: Option<f64>,
    pub clean: usize,
    pub triggered: usize,
}

pub struct VflSession {
    passives: Vec<PassiveParty>,
    active: ActiveParty,
    lr: f64,
    batch_size: usize,
    rng: ChaCha8Rng,
    round: u64,
    ttp: Ttp,
}

impl VflSession {
    pub fn new(
        passives: Vec<PassiveParty>,
        active: ActiveParty,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        if passives.is_empty() {
            return Err(ProtocolError::Setup("need at least one passive party".into()));
        }
        if batch_size == 0 || !(lr >= 0.0 && lr.is_finite()) {
            return Err(ProtocolError::Setup(format!("batch size {batch_size}, lr {lr}")));
        }
        let n = active.features.rows();
        if active.labels.len() != n {
            return Err(ProtocolError::Setup(format!("{} labels for {n} samples", active.labels.len())));
        }
        if let Some(&bad) = active.labels.iter().find(|&&y| y >= active.classes) {
            return Err(ProtocolError::Setup(format!("label {bad} outside 0..{}", active.classes)));
        }
        let c = active.classes;
        let models = passives
            .iter()
            .map(|p| (&p.model, &p.features))
            .chain(std::iter::once((&active.model, &active.features)));
        for (k, (m, x)) in models.enumerate() {
            if x.rows() != n {
                return Err(ProtocolError::Setup(format!("party {k} has {} samples, expected {n}", x.rows())));
            }
            if m.in_dim() != x.cols() || m.out_dim() != c {
                return Err(ProtocolError::Setup(format!(
                    "party {k}: model {}->{} for {} features and {c} classes",
                    m.in_dim(),
                    m.out_dim(),
                    x.cols()
                )));
            }
        }
        Ok(VflSession {
            passives,
            active,
            lr,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            round: 0,
            ttp: Ttp::new(),
        })
    }

    pub fn parties(&self) -> usize {
        self.passives.len() + 1
    }

    pub fn active_id(&self) -> PartyId {
        self.passives.len()
    }

    pub fn samples(&self) -> usize {
        self.active.features.rows()
    }

    pub fn rounds_done(&self) -> u64 {
        self.round
    }

    pub fn passive(&self, k: usize) -> &PassiveParty {
        &self.passives[k]
    }

    pub fn active(&self) -> &ActiveParty {
        &self.active
    }

    /// Model of party `k` in session order.
    pub fn model(&self, k: PartyId) -> &Mlp {
        if k == self.active_id() {
            &self.active.model
        } else {
            &self.passives[k].model
        }
    }

    pub fn audit_log(&self) -> &[super::DecryptRecord] {
        self.ttp.audit_log()
    }

    /// Shuffled minibatches covering every sample once.
    pub fn epoch_plan(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn check_batch(&self, batch: &[usize]) -> Result<(), ProtocolError> {
        if batch.is_empty() {
            return Err(ProtocolError::Batch("empty batch".into()));
        }
        let n = self.samples();
        let mut seen = vec![false; n];
        for &i in batch {
            if i >= n {
                return Err(ProtocolError::Batch(format!("index {i} outside 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(ProtocolError::Batch(format!("index {i} repeated")));
            }
        }
        Ok(())
    }

    pub fn round(&mut self, batch: &[usize]) -> Result<RoundReport, Error> {
        self.check_batch(batch)?;
        let round = self.round;
        let active_id = self.active_id();
        self.ttp.begin_round(round, batch.len());

        let mut passive_acts = Vec::with_capacity(self.passives.len());
        let mut passive_out = Vec::with_capacity(self.passives.len());
        for (k, p) in self.passives.iter_mut().enumerate() {
            let acts = p.model.forward(&p.features.select_rows(batch))?;
            let enc: Vec<OpaqueVec> = acts
                .output()
                .iter_rows()
                .zip(batch)
                .map(|(h, &i)| OpaqueVec::encrypt(h, k, i))
                .collect();
            let enc = match p.hooks.as_mut() {
                Some(hooks) => {
                    let ctx = ForwardContext {
                        round,
                        party: k,
                        batch,
                        model: &p.model,
                        features: &p.features,
                        outputs: acts.output(),
                    };
                    hooks.forward(&ctx, enc)?
                }
                None => enc,
            };
            if enc.len() != batch.len() {
                return Err(ProtocolError::Shape(format!("party {k} sent {} outputs", enc.len())).into());
            }
            passive_acts.push(acts);
            passive_out.push(enc);
        }

        let active_acts = self.active.model.forward(&self.active.features.select_rows(batch))?;
        let (grads, loss) = self.active.fuse(active_acts.output(), &passive_out, batch, active_id)?;

        let mut gradients = Vec::with_capacity(self.parties());
        for (k, (p, acts)) in self.passives.iter_mut().zip(&passive_acts).enumerate() {
            let contributions = match p.hooks.as_mut() {
                Some(hooks) => hooks.backward(&BackwardContext { round, party: k, batch }, &grads)?,
                None => honest_contributions(batch, &grads),
            };
            let agg = aggregate_contributions(&p.model, &p.features, batch, acts, &contributions, k)?;
            let grad = self.ttp.decrypt(k, agg)?;
            if let Some(hooks) = p.hooks.as_mut() {
                hooks.observe(&ObserveContext {
                    round,
                    party: k,
                    batch,
                    model: &p.model,
                    features: &p.features,
                    gradient: &grad,
                })?;
            }
            gradients.push(grad);
        }
        let contributions = honest_contributions(batch, &grads);
        let agg = aggregate_contributions(
            &self.active.model,
            &self.active.features,
            batch,
            &active_acts,
            &contributions,
            active_id,
        )?;
        gradients.push(self.ttp.decrypt(active_id, agg)?);

        for (p, g) in self.passives.iter_mut().zip(&gradients) {
            p.model.apply_gradient(g, self.lr)?;
        }
        self.active.model.apply_gradient(&gradients[active_id], self.lr)?;
        self.round += 1;
        Ok(RoundReport { round, gradients, loss })
    }

    /// One pass over a fresh epoch plan; returns the mean round loss.
    pub fn train_epoch(&mut self, max_rounds: Option<usize>) -> Result<f64, Error> {
        let plan = self.epoch_plan();
        let take = max_rounds.unwrap_or(plan.len()).min(plan.len());
        let mut total = 0.0;
        for batch in &plan[..take] {
            total += self.round(batch)?.loss;
        }
        Ok(if take == 0 { 0.0 } else { total / take as f64 })
    }

    /// Summed logits for feature views given in party order.
    pub fn fused_logits(&self, views: &[Tensor]) -> Result<Tensor, Error> {
        if views.len() != self.parties() {
            return Err(ProtocolError::Shape(format!("{} views for {} parties", views.len(), self.parties())).into());
        }
        let n = views[0].rows();
        let mut sum = Tensor::zeros(&[n, self.active.classes]);
        for (k, v) in views.iter().enumerate() {
            let model = self.model(k);
            if v.rows() != n || v.cols() != model.in_dim() {
                return Err(ProtocolError::Shape(format!(
                    "view {k} has shape {:?}, model expects {} features",
                    v.shape(),
                    model.in_dim()
                ))
                .into());
            }
            sum = sum.add(&model.predict(v)?)?;
        }
        Ok(sum)
    }

    /// Class per sample; decoded through the CoAE when one is installed.
    pub fn predict(&self, views: &[Tensor]) -> Result<Vec<usize>, Error> {
        let logits = self.fused_logits(views)?;
        logits
            .iter_rows()
            .map(|r| self.active.defense.decide(r).map_err(Error::from))
            .collect()
    }

    /// Main accuracy over untriggered samples; when `backdoor_target` is
    /// set, the fraction of triggered samples predicted as that class.
    pub fn evaluate(
        &self,
        views: &[Tensor],
        labels: &[usize],
        trigger_mask: &[bool],
        backdoor_target: Option<usize>,
    ) -> Result<EvalMetrics, Error> {
        if labels.is_empty() || labels.len() != trigger_mask.len() {
            return Err(ProtocolError::Batch(format!(
                "evaluation over {} labels and {} mask entries",
                labels.len(),
                trigger_mask.len()
            ))
            .into());
        }
        let pred = self.predict(views)?;
        if pred.len() != labels.len() {
            return Err(ProtocolError::Shape("views and labels disagree in length".into()).into());
        }
        let (mut clean, mut correct, mut triggered, mut hit) = (0usize, 0usize, 0usize, 0usize);
        for ((&p, &y), &t) in pred.iter().zip(labels).zip(trigger_mask) {
            if t {
                triggered += 1;
                hit += usize::from(Some(p) == backdoor_target);
            } else {
                clean += 1;
                correct += usize::from(p == y);
            }
        }
        let main_accuracy = if clean == 0 { f64::NAN } else { correct as f64 / clean as f64 };
        let backdoor_accuracy = match backdoor_target {
            Some(_) if triggered > 0 => Some(hit as f64 / triggered as f64),
            _ => None,
        };
        Ok(EvalMetrics {
            main_accuracy,
            backdoor_accuracy,
            clean,
            triggered,
        })
    }
}

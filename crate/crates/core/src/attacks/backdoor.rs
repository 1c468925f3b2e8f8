//! Gradient-replacement backdoor and label-substitution helpers.
//!
//! Role mapping: in every round, each batch slot holding a clean target
//! sample (class `tau`) has its output replaced by `H_j` of a randomly drawn
//! triggered sample `j`, and `<slot, j>` goes into the ledger. In the
//! backward pass sample `j`'s Jacobian is driven by `gamma` times the
//! gradient received for that slot, so `j` learns the target's label.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::numerics::{one_hot, Tensor};
use crate::protocol::{
    honest_contributions, BackwardContext, Contribution, ForwardContext, OpaqueVec, PartyId, PassiveHooks,
};
use crate::Error;

/// Turns an encrypted `softmax(z) - e_y` into `softmax(z) - e_tau` by adding
/// the public vector `e_y - e_tau`; the payload is never read.
pub fn replace_gradient_label(g: &OpaqueVec, tau: usize, y: usize) -> Result<OpaqueVec, AttackError> {
    let c = g.len();
    if tau >= c || y >= c {
        return Err(AttackError::Config(format!("labels {tau}, {y} outside 0..{c}")));
    }
    if tau == y {
        return Ok(g.clone());
    }
    let mut shift = one_hot(y, c);
    shift[tau] = -1.0;
    Ok(g.add(&OpaqueVec::encrypt_constant(&shift))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrBackdoorConfig {
    pub target_label: usize,
    /// Clean samples of class `target_label` whose identity is stolen.
    pub targets: Vec<usize>,
    /// Triggered samples that should learn `target_label`.
    pub backdoor: Vec<usize>,
    pub amplify: f64,
    /// Emit standard-normal outputs for backdoor samples.
    pub random_h: bool,
}

impl GrBackdoorConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.amplify > 0.0 && self.amplify.is_finite()) {
            return Err(AttackError::Config(format!("amplify rate must be > 0, got {}", self.amplify)));
        }
        if let Some(j) = self.backdoor.iter().find(|j| self.targets.contains(j)) {
            return Err(AttackError::Config(format!("sample {j} is both target and backdoor")));
        }
        Ok(())
    }
}

/// `<batch slot, backdoor sample>` pairs for one round.
pub type Ledger = Vec<(usize, usize)>;

/// Forward substitution. `h_of(j)` yields the local output for sample `j`;
/// pairs are drawn from `rng` unless `ledger` is given (colluding parties
/// reuse the leader's pairs).
pub fn gr_forward_hook<R: Rng + ?Sized>(
    cfg: &GrBackdoorConfig,
    batch: &[usize],
    mut outputs: Vec<OpaqueVec>,
    party: PartyId,
    h_of: impl Fn(usize) -> Result<Vec<f64>, Error>,
    ledger: Option<&Ledger>,
    rng: &mut R,
) -> Result<(Vec<OpaqueVec>, Ledger), Error> {
    let pairs: Ledger = match ledger {
        Some(l) => l.clone(),
        None => {
            let mut l = Vec::new();
            for (slot, i) in batch.iter().enumerate() {
                if cfg.targets.contains(i) {
                    if cfg.backdoor.is_empty() {
                        return Err(AttackError::Config("target slot present but no backdoor samples".into()).into());
                    }
                    l.push((slot, cfg.backdoor[rng.random_range(0..cfg.backdoor.len())]));
                }
            }
            l
        }
    };
    for &(slot, j) in &pairs {
        if slot >= batch.len() {
            return Err(AttackError::Ledger(format!("slot {slot} outside a batch of {}", batch.len())).into());
        }
        // Keeps the slot's own tag, as the active party expects per-slot data.
        let h = h_of(j)?;
        outputs[slot] = OpaqueVec::encrypt(&h, party, batch[slot]);
    }
    if cfg.random_h {
        for (slot, i) in batch.iter().enumerate() {
            if cfg.backdoor.contains(i) {
                let c = outputs[slot].len();
                let noise: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
                outputs[slot] = OpaqueVec::encrypt(&noise, party, *i);
            }
        }
    }
    Ok((outputs, pairs))
}

/// Backward redirection: pair `<s, j>` trains sample `j` on `gamma * g_s`.
/// With `random_h`, backdoor slots contribute nothing of their own.
pub fn gr_backward_hook(
    cfg: &GrBackdoorConfig,
    batch: &[usize],
    grads: &[OpaqueVec],
    ledger: &Ledger,
) -> Result<Vec<Contribution>, AttackError> {
    let mut out = honest_contributions(batch, grads);
    if cfg.random_h {
        for (slot, i) in batch.iter().enumerate() {
            if cfg.backdoor.contains(i) {
                out[slot].input = None;
            }
        }
    }
    for &(slot, j) in ledger {
        if slot >= batch.len() {
            return Err(AttackError::Ledger(format!("slot {slot} outside a batch of {}", batch.len())));
        }
        out[slot] = Contribution {
            input: Some(j),
            grad: grads[slot].scale(cfg.amplify),
        };
    }
    Ok(out)
}

/// Round-scoped ledger shared by colluding attackers.
#[derive(Debug, Default)]
pub struct SharedLedger {
    round: Option<u64>,
    pairs: Ledger,
}

impl SharedLedger {
    pub fn shared() -> Rc<RefCell<SharedLedger>> {
        Rc::new(RefCell::new(SharedLedger::default()))
    }
}

/// A passive party running the gradient-replacement backdoor.
pub struct GrAttacker {
    cfg: GrBackdoorConfig,
    rng: ChaCha8Rng,
    shared: Rc<RefCell<SharedLedger>>,
    current: Ledger,
}

impl GrAttacker {
    pub fn new(cfg: GrBackdoorConfig, seed: u64) -> Result<Self, AttackError> {
        GrAttacker::colluding(cfg, seed, SharedLedger::shared())
    }

    /// The first attacker to act in a round draws the pairs; the others
    /// holding the same `shared` handle reuse them.
    pub fn colluding(cfg: GrBackdoorConfig, seed: u64, shared: Rc<RefCell<SharedLedger>>) -> Result<Self, AttackError> {
        cfg.validate()?;
        Ok(GrAttacker {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            shared,
            current: Vec::new(),
        })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.current
    }
}

impl PassiveHooks for GrAttacker {
    fn forward(&mut self, ctx: &ForwardContext<'_>, outputs: Vec<OpaqueVec>) -> Result<Vec<OpaqueVec>, Error> {
        let reuse = {
            let s = self.shared.borrow();
            (s.round == Some(ctx.round)).then(|| s.pairs.clone())
        };
        let h_of = |j: usize| -> Result<Vec<f64>, Error> {
            let x = Tensor::from_vec(&[1, ctx.features.cols()], ctx.features.row(j).to_vec())?;
            Ok(ctx.model.predict(&x)?.into_data())
        };
        let (outputs, pairs) = gr_forward_hook(
            &self.cfg,
            ctx.batch,
            outputs,
            ctx.party,
            h_of,
            reuse.as_ref(),
            &mut self.rng,
        )?;
        if reuse.is_none() {
            let mut s = self.shared.borrow_mut();
            s.round = Some(ctx.round);
            s.pairs = pairs.clone();
        }
        self.current = pairs;
        Ok(outputs)
    }

    fn backward(&mut self, ctx: &BackwardContext<'_>, grads: &[OpaqueVec]) -> Result<Vec<Contribution>, Error> {
        Ok(gr_backward_hook(&self.cfg, ctx.batch, grads, &self.current)?)
    }
}

/// Labels of `poisoned` set to `target`.
pub fn active_label_poison(labels: &[usize], poisoned: &[usize], target: usize) -> Vec<usize> {
    let mut out = labels.to_vec();
    for &i in poisoned {
        if let Some(y) = out.get_mut(i) {
            *y = target;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{one_hot_matrix, softmax_ce_grad};

    fn enc_rows(t: &Tensor, batch: &[usize]) -> Vec<OpaqueVec> {
        t.iter_rows().zip(batch).map(|(r, &i)| OpaqueVec::encrypt(r, 0, i)).collect()
    }

    #[test]
    fn replacement_equals_recomputation() {
        let z = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let g2 = softmax_ce_grad(&z, &one_hot_matrix(&[2], 3)).unwrap();
        let g0 = softmax_ce_grad(&z, &one_hot_matrix(&[0], 3)).unwrap();
        let r = replace_gradient_label(&OpaqueVec::encrypt(g2.row(0), 1, 0), 0, 2).unwrap();
        for (a, b) in r.payload().iter().zip(g0.row(0)) {
            assert!((a - b).abs() <= 1e-15);
        }
        let back = replace_gradient_label(&r, 2, 0).unwrap();
        for (a, b) in back.payload().iter().zip(g2.row(0)) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(replace_gradient_label(&r, 3, 0).is_err());
    }

    fn cfg() -> GrBackdoorConfig {
        GrBackdoorConfig {
            target_label: 1,
            targets: vec![2, 5],
            backdoor: vec![7, 8],
            amplify: 10.0,
            random_h: false,
        }
    }

    #[test]
    fn forward_substitutes_target_slots() {
        let batch = [5, 0, 2, 3];
        let h = Tensor::from_vec(&[4, 2], (0..8).map(f64::from).collect()).unwrap();
        let h_of = |j: usize| Ok(vec![100.0 + j as f64, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ledger) = gr_forward_hook(&cfg(), &batch, enc_rows(&h, &batch), 0, h_of, None, &mut rng).unwrap();
        assert_eq!(ledger.len(), 2);
        for &(slot, j) in &ledger {
            assert!([0, 2].contains(&slot));
            assert_eq!(out[slot].payload(), &[100.0 + j as f64, -1.0]);
        }
        assert_eq!(out[1].payload(), h.row(1));

        let none = [0, 1];
        let (_, empty) = gr_forward_hook(&cfg(), &none, enc_rows(&h.select_rows(&[0, 1]), &none), 0, h_of, None, &mut rng)
            .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn backward_redirects_pairs() {
        let batch = [5, 0, 8];
        let grads: Vec<OpaqueVec> = batch.iter().map(|&i| OpaqueVec::encrypt(&[1.0, -1.0], 1, i)).collect();
        let ledger = vec![(0, 7)];
        let c = gr_backward_hook(&cfg(), &batch, &grads, &ledger).unwrap();
        assert_eq!(c[0].input, Some(7));
        assert_eq!(c[0].grad.payload(), &[10.0, -10.0]);
        assert_eq!(c[1].input, Some(0));
        assert_eq!(c[2].input, Some(8));
        let mut rh = cfg();
        rh.random_h = true;
        let c = gr_backward_hook(&rh, &batch, &grads, &ledger).unwrap();
        assert_eq!(c[2].input, None);
        assert!(gr_backward_hook(&cfg(), &batch, &grads, &vec![(3, 7)]).is_err());
        assert_eq!(gr_backward_hook(&cfg(), &batch, &grads, &vec![]).unwrap().len(), 3);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let mut c = cfg();
        c.backdoor.push(2);
        assert!(c.validate().is_err());
        assert!(GrAttacker::new(GrBackdoorConfig { amplify: 0.0, ..cfg() }, 0).is_err());
    }

    #[test]
    fn poison_labels() {
        assert_eq!(active_label_poison(&[0, 1, 2], &[], 1), vec![0, 1, 2]);
        assert_eq!(active_label_poison(&[0, 1, 2], &[0, 1, 2], 1), vec![1, 1, 1]);
    }
}

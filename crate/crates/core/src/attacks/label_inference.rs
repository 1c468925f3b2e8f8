//! Batch label inference by gradient matching.
//!
//! The attacker knows its own model, its batch inputs and the decrypted
//! batch-mean gradient. It searches for dummy labels `y' = softmax(u)` and a
//! dummy foreign contribution `H_a'` whose simulated gradient reproduces the
//! observation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use std::cell::RefCell;
use std::rc::Rc;

use super::AttackError;
use crate::protocol::{ObserveContext, PassiveHooks};
use crate::numerics::{argmax, softmax_rows, softmax_vjp, Activations, Mlp, Optimizer, OptimizerKind, Tensor};

#[derive(Debug, Clone)]
pub struct LabelInferenceState {
    pub u: Tensor,
    pub h_a: Tensor,
    pub iteration: usize,
}

impl LabelInferenceState {
    /// `u, H_a' ~ N(0, 1)`.
    pub fn random(batch: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let u = Tensor::from_vec(&[batch, classes], draw(batch * classes)).expect("finite draws");
        let h_a = Tensor::from_vec(&[batch, classes], draw(batch * classes)).expect("finite draws");
        LabelInferenceState { u, h_a, iteration: 0 }
    }

    pub fn new(u: Tensor, h_a: Tensor) -> Result<Self, AttackError> {
        if u.shape() != h_a.shape() || u.shape().len() != 2 {
            return Err(AttackError::Shape(format!("u {:?} vs H_a' {:?}", u.shape(), h_a.shape())));
        }
        Ok(LabelInferenceState { u, h_a, iteration: 0 })
    }

    /// `y' = softmax(u)` row-wise.
    pub fn soft_labels(&self) -> Tensor {
        softmax_rows(&self.u)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.u.iter_rows().map(argmax).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub d: f64,
    pub grad_u: Tensor,
    pub grad_h: Tensor,
}

/// A frozen passive model and batch, with the forward pass cached.
pub struct GradientMatcher<'a> {
    model: &'a Mlp,
    acts: Activations,
}

impl<'a> GradientMatcher<'a> {
    pub fn new(model: &'a Mlp, x: &Tensor) -> Result<Self, AttackError> {
        Ok(GradientMatcher {
            model,
            acts: model.forward(x)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.acts.batch()
    }

    pub fn h_p(&self) -> &Tensor {
        self.acts.output()
    }

    fn check_state(&self, state: &LabelInferenceState) -> Result<(), AttackError> {
        let want = [self.batch(), self.model.out_dim()];
        if state.u.shape() != want || state.h_a.shape() != want {
            return Err(AttackError::Shape(format!(
                "state {:?} for a batch of shape {want:?}",
                state.u.shape()
            )));
        }
        Ok(())
    }

    /// Per-slot `g_i = softmax(H_p,i + H_a,i') - softmax(u_i)`, plus the two
    /// softmax outputs.
    fn output_grads(&self, state: &LabelInferenceState) -> (Tensor, Tensor, Tensor) {
        let s = softmax_rows(&self.h_p().add(&state.h_a).expect("checked shapes"));
        let p = state.soft_labels();
        let g = s.sub(&p).expect("same shape");
        (g, s, p)
    }

    pub fn simulate(&self, state: &LabelInferenceState) -> Result<Vec<f64>, AttackError> {
        self.check_state(state)?;
        let (g, _, _) = self.output_grads(state);
        Ok(self.model.param_grad_with(&self.acts, &g)?)
    }

    /// `D = |sim - obs|^2` and its gradients with respect to `u` and `H_a'`.
    pub fn match_loss(&self, state: &LabelInferenceState, observed: &[f64]) -> Result<MatchOutput, AttackError> {
        self.check_state(state)?;
        if observed.len() != self.model.param_count() {
            return Err(AttackError::Shape(format!(
                "observed gradient of length {}, model has {} parameters",
                observed.len(),
                self.model.param_count()
            )));
        }
        let (g, s, p) = self.output_grads(state);
        let sim = self.model.param_grad_with(&self.acts, &g)?;
        let r: Vec<f64> = sim.iter().zip(observed).map(|(a, b)| a - b).collect();
        let d = r.iter().map(|v| v * v).sum();
        let adj = self.model.param_grad_adjoint_with(&self.acts, &r)?;
        let (b, c) = (self.batch(), self.model.out_dim());
        let mut grad_u = Tensor::zeros(&[b, c]);
        let mut grad_h = Tensor::zeros(&[b, c]);
        for i in 0..b {
            let dg: Vec<f64> = adj.row(i).iter().map(|v| 2.0 * v).collect();
            grad_h.row_mut(i).copy_from_slice(&softmax_vjp(s.row(i), &dg));
            let du = softmax_vjp(p.row(i), &dg);
            grad_u.row_mut(i).iter_mut().zip(du).for_each(|(o, v)| *o = -v);
        }
        Ok(MatchOutput { d, grad_u, grad_h })
    }
}

/// `d loss(softmax(H_p + H_a'), y') / d theta_p`, batch mean.
pub fn simulate_grad(state: &LabelInferenceState, model: &Mlp, x: &Tensor) -> Result<Vec<f64>, AttackError> {
    GradientMatcher::new(model, x)?.simulate(state)
}

pub fn match_loss(
    state: &LabelInferenceState,
    model: &Mlp,
    x: &Tensor,
    observed: &[f64],
) -> Result<MatchOutput, AttackError> {
    GradientMatcher::new(model, x)?.match_loss(state, observed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            iters: 2000,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub labels: Vec<usize>,
    pub d_initial: f64,
    pub d_final: f64,
    pub iterations: usize,
}

/// Runs gradient descent on `(u, H_a')` from `state`.
pub fn run_inference(
    matcher: &GradientMatcher<'_>,
    observed: &[f64],
    mut state: LabelInferenceState,
    cfg: &InferenceConfig,
) -> Result<(InferenceResult, LabelInferenceState), AttackError> {
    let n = state.u.len();
    let mut opt = Optimizer::new(cfg.optimizer, 2 * n, cfg.lr);
    let mut params: Vec<f64> = state.u.data().iter().chain(state.h_a.data()).copied().collect();
    let mut grad = vec![0.0; 2 * n];
    let mut d_initial = None;
    for it in 0..cfg.iters {
        let out = matcher.match_loss(&state, observed)?;
        if !out.d.is_finite() || !out.grad_u.is_finite() || !out.grad_h.is_finite() {
            return Err(AttackError::Diverged { iteration: it });
        }
        d_initial.get_or_insert(out.d);
        grad[..n].copy_from_slice(out.grad_u.data());
        grad[n..].copy_from_slice(out.grad_h.data());
        opt.step(&mut params, &grad);
        state.u.data_mut().copy_from_slice(&params[..n]);
        state.h_a.data_mut().copy_from_slice(&params[n..]);
        state.iteration += 1;
    }
    let last = matcher.match_loss(&state, observed)?;
    if !last.d.is_finite() {
        return Err(AttackError::Diverged { iteration: cfg.iters });
    }
    Ok((
        InferenceResult {
            labels: state.labels(),
            d_initial: d_initial.unwrap_or(last.d),
            d_final: last.d,
            iterations: state.iteration,
        },
        state,
    ))
}

/// Label per batch slot from a decrypted batch-mean passive gradient.
pub fn infer_labels(
    observed: &[f64],
    model: &Mlp,
    x: &Tensor,
    cfg: &InferenceConfig,
) -> Result<InferenceResult, AttackError> {
    let matcher = GradientMatcher::new(model, x)?;
    let state = LabelInferenceState::random(x.rows(), model.out_dim(), cfg.seed);
    Ok(run_inference(&matcher, observed, state, cfg)?.0)
}

/// Index of the single negative entry of a hard-label softmax gradient.
pub fn label_from_gradient_sign(g: &[f64]) -> Result<usize, AttackError> {
    let neg: Vec<usize> = (0..g.len()).filter(|&j| g[j] < 0.0).collect();
    match neg.as_slice() {
        [j] => Ok(*j),
        _ => Err(AttackError::AmbiguousGradient { negatives: neg.len() }),
    }
}

/// A frozen round as seen by the attacking party.
#[derive(Debug, Clone)]
pub struct Observation {
    pub round: u64,
    pub batch: Vec<usize>,
    pub model: Mlp,
    pub x: Tensor,
    pub gradient: Vec<f64>,
}

/// Honest-behaving hook that records the listed rounds for later inference.
pub struct GradientRecorder {
    rounds: Vec<u64>,
    store: Rc<RefCell<Vec<Observation>>>,
}

impl GradientRecorder {
    pub fn new(rounds: Vec<u64>) -> (Self, Rc<RefCell<Vec<Observation>>>) {
        let store = Rc::new(RefCell::new(Vec::new()));
        (
            GradientRecorder {
                rounds,
                store: Rc::clone(&store),
            },
            store,
        )
    }
}

impl PassiveHooks for GradientRecorder {
    fn observe(&mut self, ctx: &ObserveContext<'_>) -> Result<(), crate::Error> {
        if self.rounds.contains(&ctx.round) {
            self.store.borrow_mut().push(Observation {
                round: ctx.round,
                batch: ctx.batch.to_vec(),
                model: ctx.model.clone(),
                x: ctx.features.select_rows(ctx.batch),
                gradient: ctx.gradient.to_vec(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, one_hot_matrix, softmax_ce_grad};

    fn setup(b: usize, c: usize, seed: u64) -> (Mlp, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Mlp::two_layer(5, 4, c, &mut rng);
        let x = Tensor::from_vec(
            &[b, 5],
            (0..b * 5).map(|i| ((i * 7919 + seed as usize) % 13) as f64 / 13.0).collect(),
        )
        .unwrap();
        (model, x)
    }

    #[test]
    fn fixed_point_has_zero_gradient() {
        let (model, x) = setup(2, 3, 1);
        let m = GradientMatcher::new(&model, &x).unwrap();
        let h_a = Tensor::from_vec(&[2, 3], vec![0.3, -0.2, 0.1, 0.0, 1.0, -1.0]).unwrap();
        let u = m.h_p().add(&h_a).unwrap();
        let st = LabelInferenceState::new(u, h_a).unwrap();
        assert!(m.simulate(&st).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn match_loss_gradients_match_finite_differences() {
        let (model, x) = setup(3, 4, 2);
        let m = GradientMatcher::new(&model, &x).unwrap();
        let observed: Vec<f64> = (0..model.param_count()).map(|i| ((i % 5) as f64 - 2.0) * 0.01).collect();
        let st = LabelInferenceState::random(3, 4, 9);
        let out = m.match_loss(&st, &observed).unwrap();
        let n = st.u.len();
        let mut theta: Vec<f64> = st.u.data().to_vec();
        theta.extend_from_slice(st.h_a.data());
        let f = |v: &[f64]| {
            let s = LabelInferenceState::new(
                Tensor::from_vec(&[3, 4], v[..n].to_vec()).unwrap(),
                Tensor::from_vec(&[3, 4], v[n..].to_vec()).unwrap(),
            )
            .unwrap();
            m.match_loss(&s, &observed).unwrap().d
        };
        let fd = finite_difference_grad(f, &theta, 1e-6).unwrap();
        let analytic: Vec<f64> = out.grad_u.data().iter().chain(out.grad_h.data()).copied().collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn ground_truth_start_stays_put() {
        let (model, x) = setup(2, 3, 4);
        let m = GradientMatcher::new(&model, &x).unwrap();
        let h_a = Tensor::from_vec(&[2, 3], vec![0.1, 0.4, -0.3, 0.2, 0.0, 0.5]).unwrap();
        let labels = [2, 0];
        let logits = m.h_p().add(&h_a).unwrap();
        let g = softmax_ce_grad(&logits, &one_hot_matrix(&labels, 3)).unwrap();
        let observed = model.param_grad_with(&model.forward(&x).unwrap(), &g).unwrap();
        // one-hot is the limit of softmax(u); large logits get within 1e-13
        let mut u = Tensor::zeros(&[2, 3]);
        u.set(0, 2, 40.0);
        u.set(1, 0, 40.0);
        let st = LabelInferenceState::new(u, h_a).unwrap();
        let cfg = InferenceConfig {
            iters: 50,
            ..Default::default()
        };
        let (res, end) = run_inference(&m, &observed, st.clone(), &cfg).unwrap();
        assert!(res.d_initial < 1e-20);
        assert_eq!(res.labels, labels.to_vec());
        for (a, b) in end.h_a.data().iter().zip(st.h_a.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sign_attack() {
        assert_eq!(label_from_gradient_sign(&[0.2, -0.7, 0.5]).unwrap(), 1);
        let g = softmax_ce_grad(&Tensor::from_vec(&[1, 4], vec![3.0, -1.0, 0.0, 2.0]).unwrap(), &one_hot_matrix(&[2], 4))
            .unwrap();
        assert_eq!(label_from_gradient_sign(g.row(0)).unwrap(), 2);
        assert!(matches!(
            label_from_gradient_sign(&[0.2, -0.1, -0.1]),
            Err(AttackError::AmbiguousGradient { negatives: 2 })
        ));
    }
}

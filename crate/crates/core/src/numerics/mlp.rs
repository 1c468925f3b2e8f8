//! Small feed-forward networks with explicit forward and reverse passes.
//!
//! Parameters flatten in a fixed order: layer 0 weights (row-major,
//! `[out, in]`), layer 0 bias, layer 1 weights, layer 1 bias, and so on.
//! Every gradient vector in the crate uses this order.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::{axpy, dot, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
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

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer computing `act(W x + b)` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Tensor,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Vec<f64>, activation: Activation) -> Result<Self, NumericsError> {
        if weight.shape().len() != 2 || weight.rows() != bias.len() {
            return Err(NumericsError::Shape {
                context: "Layer::new",
                expected: format!("weight [out, in] with out = bias length {}", bias.len()),
                got: format!("{:?}", weight.shape()),
            });
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                context: "Layer::new bias",
                index: bias.iter().position(|v| !v.is_finite()).unwrap_or(0),
            });
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
        let data = (0..input * output).map(|_| dist.sample(rng)).collect();
        Layer {
            weight: Tensor::from_vec(&[output, input], data).expect("shape by construction"),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Elementwise `act'(z)`.
    pub fn activation_derivative(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.activation.derivative(v)).collect()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Cached layer values from one forward pass, needed by the reverse pass.
#[derive(Debug, Clone)]
pub struct Activations {
    input: Tensor,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
    digest: u64,
}

impl Activations {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Final layer output `H`.
    pub fn output(&self) -> &Tensor {
        self.post.last().expect("at least one layer")
    }

    pub fn batch(&self) -> usize {
        self.input.rows()
    }

    /// Input seen by `layer` (the network input for layer 0).
    pub fn layer_input(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input
        } else {
            &self.post[layer - 1]
        }
    }

    pub fn pre_activation(&self, layer: usize) -> &Tensor {
        &self.pre[layer]
    }
}

/// Per-layer parameter gradients in flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    layers: Vec<(Tensor, Vec<f64>)>,
}

impl GradBundle {
    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.layers[layer].0
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.layers[layer].1
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NumericsError> {
        if layers.is_empty() {
            return Err(NumericsError::Contract("an Mlp needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NumericsError::Shape {
                    context: "Mlp::from_layers",
                    expected: format!("layer {} input {}", i + 1, pair[0].output_dim()),
                    got: format!("{}", pair[1].input_dim()),
                });
            }
        }
        let mlp = Mlp { layers };
        if mlp.param_count() == 0 {
            return Err(NumericsError::Contract("an Mlp needs at least one parameter".into()));
        }
        Ok(mlp)
    }

    /// Stack of Xavier-initialised layers. `dims` lists every width including
    /// input and output; hidden layers use ReLU and the last layer is linear.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NumericsError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NumericsError::Contract(format!("invalid layer widths {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::xavier(w[0], w[1], act, rng)
            })
            .collect();
        Mlp::from_layers(layers)
    }

    /// `input -> hidden (relu) -> output`.
    pub fn two_layer<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp::new(&[input, hidden, output], rng).expect("nonzero widths")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Copy of this network carrying the given flat parameters.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Mlp, NumericsError> {
        let mut m = self.clone();
        m.set_params(flat)?;
        Ok(m)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NumericsError> {
        self.expect_param_len(flat.len(), "Mlp::set_params")?;
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                context: "Mlp::set_params",
                index: pos,
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Plain gradient step `theta <- theta - lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<(), NumericsError> {
        self.expect_param_len(grad.len(), "Mlp::apply_gradient")?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.data_mut() {
                *w -= lr * grad[offset];
                offset += 1;
            }
            for b in &mut l.bias {
                *b -= lr * grad[offset];
                offset += 1;
            }
        }
        if self.layers.iter().any(|l| !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite())) {
            return Err(NumericsError::NonFinite {
                context: "Mlp::apply_gradient",
                index: 0,
            });
        }
        Ok(())
    }

    fn expect_param_len(&self, len: usize, context: &'static str) -> Result<(), NumericsError> {
        if len != self.param_count() {
            return Err(NumericsError::Shape {
                context,
                expected: format!("{} parameters", self.param_count()),
                got: format!("{len}"),
            });
        }
        Ok(())
    }

    /// FNV-1a over dims and parameter bits; ties activations to a snapshot.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for l in &self.layers {
            eat(l.input_dim() as u64);
            eat(l.output_dim() as u64);
            eat(l.activation.code() as u64);
            l.weight.data().iter().for_each(|v| eat(v.to_bits()));
            l.bias.iter().for_each(|v| eat(v.to_bits()));
        }
        h
    }

    pub fn forward(&self, x: &Tensor) -> Result<Activations, NumericsError> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(NumericsError::Shape {
                context: "Mlp::forward input",
                expected: format!("[batch, {}]", self.in_dim()),
                got: format!("{:?}", x.shape()),
            });
        }
        let batch = x.rows();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let input = post.last().unwrap_or(x);
            let out_dim = l.output_dim();
            let mut z = Tensor::zeros(&[batch, out_dim]);
            for b in 0..batch {
                let xin = input.row(b);
                let zr = z.row_mut(b);
                for (o, zo) in zr.iter_mut().enumerate() {
                    *zo = l.bias[o] + dot(l.weight.row(o), xin);
                }
            }
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = l.activation.apply(*v));
            pre.push(z);
            post.push(a);
        }
        if !post.last().expect("nonempty").is_finite() {
            return Err(NumericsError::NonFinite {
                context: "Mlp::forward output",
                index: 0,
            });
        }
        Ok(Activations {
            input: x.clone(),
            pre,
            post,
            digest: self.digest(),
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        Ok(self.forward(x)?.output().clone())
    }

    fn check_activations(&self, acts: &Activations) -> Result<(), NumericsError> {
        if acts.digest != self.digest() || acts.pre.len() != self.layers.len() {
            return Err(NumericsError::Contract(
                "activations were produced by a different parameter snapshot".into(),
            ));
        }
        Ok(())
    }

    /// Reverse pass. Returns the batch-mean parameter gradient and the
    /// per-sample gradient with respect to each input row.
    pub fn backward(&self, acts: &Activations, out_grad: &Tensor) -> Result<(GradBundle, Tensor), NumericsError> {
        self.check_activations(acts)?;
        let batch = acts.batch();
        if out_grad.shape() != [batch, self.out_dim()] {
            return Err(NumericsError::Shape {
                context: "Mlp::backward out_grad",
                expected: format!("[{batch}, {}]", self.out_dim()),
                got: format!("{:?}", out_grad.shape()),
            });
        }
        let inv_b = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
        let mut grads: Vec<(Tensor, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut upstream = out_grad.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &acts.pre[li];
            let input = if li == 0 { &acts.input } else { &acts.post[li - 1] };
            let mut delta = upstream;
            for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                *d *= l.activation.derivative(zv);
            }
            let mut gw = Tensor::zeros(&[l.output_dim(), l.input_dim()]);
            let mut gb = vec![0.0; l.output_dim()];
            let mut next = Tensor::zeros(&[batch, l.input_dim()]);
            for b in 0..batch {
                let dr = delta.row(b);
                let xin = input.row(b);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d * inv_b, xin, gw.row_mut(o));
                    gb[o] += d * inv_b;
                    axpy(d, l.weight.row(o), next.row_mut(b));
                }
            }
            grads.push((gw, gb));
            upstream = next;
        }
        grads.reverse();
        Ok((GradBundle { layers: grads }, upstream))
    }

    /// `(1/B) * sum_i J_i^T g_i` where `J_i = dH_i/dtheta`; linear in `g`.
    pub fn param_grad_from_output_grads(&self, x: &Tensor, g: &Tensor) -> Result<Vec<f64>, NumericsError> {
        let acts = self.forward(x)?;
        self.param_grad_with(&acts, g)
    }

    pub fn param_grad_with(&self, acts: &Activations, g: &Tensor) -> Result<Vec<f64>, NumericsError> {
        Ok(self.backward(acts, g)?.0.flat())
    }

    /// Adjoint of [`Mlp::param_grad_from_output_grads`]: row `i` is
    /// `J_i r / B`, so that `<param_grad(g), r> == <g, adjoint(r)>`.
    pub fn param_grad_adjoint(&self, x: &Tensor, r: &[f64]) -> Result<Tensor, NumericsError> {
        let acts = self.forward(x)?;
        self.param_grad_adjoint_with(&acts, r)
    }

    /// Forward-mode tangent propagation of the parameter direction `r`.
    pub fn param_grad_adjoint_with(&self, acts: &Activations, r: &[f64]) -> Result<Tensor, NumericsError> {
        self.check_activations(acts)?;
        self.expect_param_len(r.len(), "Mlp::param_grad_adjoint")?;
        let batch = acts.batch();
        let inv_b = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
        let mut tangent: Option<Tensor> = None;
        let mut offset = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weight.len();
            let dw = &r[offset..offset + nw];
            let db = &r[offset + nw..offset + nw + l.bias.len()];
            offset += nw + l.bias.len();
            let input = if li == 0 { &acts.input } else { &acts.post[li - 1] };
            let in_dim = l.input_dim();
            let mut dz = Tensor::zeros(&[batch, l.output_dim()]);
            for b in 0..batch {
                let xin = input.row(b);
                let prev = tangent.as_ref().map(|t| t.row(b));
                let row = dz.row_mut(b);
                for (o, v) in row.iter_mut().enumerate() {
                    let mut s = db[o] + dot(&dw[o * in_dim..(o + 1) * in_dim], xin);
                    if let Some(p) = prev {
                        s += dot(l.weight.row(o), p);
                    }
                    *v = s;
                }
            }
            for (t, &zv) in dz.data_mut().iter_mut().zip(acts.pre[li].data()) {
                *t *= l.activation.derivative(zv);
            }
            tangent = Some(dz);
        }
        Ok(tangent.expect("nonempty").scale(inv_b))
    }
}

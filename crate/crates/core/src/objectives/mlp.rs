use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, Objective};
use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, dot, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output. The ReLU
    /// subgradient at zero is zero.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl Layer {
    /// Weight column for input `i`: the `fan_out` weights leaving that input.
    #[inline]
    fn column<'t>(&self, theta: &'t [f64], i: usize) -> &'t [f64] {
        let start = self.weights + i * self.fan_out;
        &theta[start..start + self.fan_out]
    }
}

/// Fully connected classifier with softmax cross-entropy loss.
///
/// Parameters are laid out layer by layer: the `fan_out × fan_in` weight
/// matrix stored column by column (one column per input unit), then the
/// `fan_out` biases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MLP needs at least two positive layer sizes, got {layer_sizes:?}"
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                layer
            })
            .collect()
    }

    /// Glorot-uniform weights multiplied by `scale`, zero biases.
    pub fn init(&self, seed: u64, scale: f64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vector::zeros(self.param_count());
        for layer in self.layers() {
            let limit = scale * (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut theta[layer.weights..layer.bias] {
                *w = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        theta
    }

    fn validate(&self, theta: &[f64], batch: &Batch<'_>) -> Result<()> {
        check_len("MLP parameters", self.param_count(), theta.len())?;
        let ds = batch.dataset();
        check_len("MLP input features", self.inputs(), ds.features())?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("MLP needs a non-empty batch".into()));
        }
        let classes = self.classes();
        for s in batch.sample_indices() {
            let label = ds.labels()[s];
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    sample: s,
                    label,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Mean negative log-likelihood over the batch and its gradient.
    pub fn value_grad(&self, theta: &[f64], batch: Batch<'_>) -> Result<(f64, Vector)> {
        self.validate(theta, &batch)?;
        let layers = self.layers();
        let mut ws = Workspace::new(&self.layer_sizes);
        let mut grad = Vector::zeros(theta.len());
        let mut total = 0.0;
        let ds = batch.dataset();
        for s in batch.sample_indices() {
            let x = ds.sample(s);
            self.forward(theta, &layers, x, &mut ws);
            total += ws.softmax_loss(ds.labels()[s]);
            self.backward(theta, &layers, x, &mut ws, &mut grad);
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((total / batch.len() as f64, grad))
    }

    /// Mean negative log-likelihood only.
    pub fn value(&self, theta: &[f64], batch: Batch<'_>) -> Result<f64> {
        self.validate(theta, &batch)?;
        let layers = self.layers();
        let mut ws = Workspace::new(&self.layer_sizes);
        let ds = batch.dataset();
        let mut total = 0.0;
        for s in batch.sample_indices() {
            self.forward(theta, &layers, ds.sample(s), &mut ws);
            total += ws.softmax_loss(ds.labels()[s]);
        }
        Ok(total / batch.len() as f64)
    }

    /// Fraction of samples whose largest logit is the label.
    pub fn accuracy(&self, theta: &[f64], batch: Batch<'_>) -> Result<f64> {
        self.validate(theta, &batch)?;
        let layers = self.layers();
        let mut ws = Workspace::new(&self.layer_sizes);
        let ds = batch.dataset();
        let mut hits = 0usize;
        for s in batch.sample_indices() {
            self.forward(theta, &layers, ds.sample(s), &mut ws);
            let logits = ws.acts.last().unwrap();
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
                .unwrap();
            hits += usize::from(best == ds.labels()[s]);
        }
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Sign of every hidden unit for every sample, in batch order.
    fn hidden_pattern(&self, theta: &[f64], batch: &Batch<'_>) -> Vec<bool> {
        let layers = self.layers();
        let mut ws = Workspace::new(&self.layer_sizes);
        let ds = batch.dataset();
        let mut pattern = Vec::new();
        for s in batch.sample_indices() {
            self.forward(theta, &layers, ds.sample(s), &mut ws);
            for hidden in &ws.acts[1..ws.acts.len() - 1] {
                pattern.extend(hidden.iter().map(|&a| a > 0.0));
            }
        }
        pattern
    }

    fn forward(&self, theta: &[f64], layers: &[Layer], x: &[f64], ws: &mut Workspace) {
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input: &[f64] = if l == 0 { x } else { &before[l] };
            let out = &mut after[0];
            out.copy_from_slice(&theta[layer.bias..layer.bias + layer.fan_out]);
            for (i, &xi) in input.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, layer.column(theta, i), out);
                }
            }
            if l < last {
                let act = self.activation;
                out.iter_mut().for_each(|z| *z = act.apply(*z));
            }
        }
    }

    /// Adds this sample's gradient to `grad`; expects `ws.deltas.last()` to
    /// hold `softmax - onehot`.
    fn backward(
        &self,
        theta: &[f64],
        layers: &[Layer],
        x: &[f64],
        ws: &mut Workspace,
        grad: &mut [f64],
    ) {
        for (l, layer) in layers.iter().enumerate().rev() {
            let (lower, upper) = ws.deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            let input: &[f64] = if l == 0 { x } else { &ws.acts[l] };
            for (i, &xi) in input.iter().enumerate() {
                if xi != 0.0 {
                    let start = layer.weights + i * layer.fan_out;
                    axpy(xi, delta, &mut grad[start..start + layer.fan_out]);
                }
            }
            axpy(
                1.0,
                delta,
                &mut grad[layer.bias..layer.bias + layer.fan_out],
            );
            if l > 0 {
                let act = self.activation;
                for (i, (d, &a)) in lower[l].iter_mut().zip(input).enumerate() {
                    *d = dot(layer.column(theta, i), delta) * act.derivative_from_output(a);
                }
            }
        }
    }
}

/// Per-sample activations and back-propagated errors. `acts[0]` is unused
/// because the input is read straight from the dataset.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(sizes: &[usize]) -> Self {
        let buffers = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Workspace {
            acts: buffers(),
            deltas: buffers(),
        }
    }

    /// NLL of `label` under the softmax of the output layer. Leaves
    /// `softmax - onehot` in the last delta buffer.
    fn softmax_loss(&mut self, label: usize) -> f64 {
        let logits = self.acts.last().unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let delta = self.deltas.last_mut().unwrap();
        let mut sum = 0.0;
        for (d, &z) in delta.iter_mut().zip(logits) {
            *d = (z - max).exp();
            sum += *d;
        }
        delta.iter_mut().for_each(|d| *d /= sum);
        delta[label] -= 1.0;
        max + sum.ln() - logits[label]
    }
}

/// [`MlpSpec`] as an [`Objective`]; requires a batch.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        Mlp { spec }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }
}

fn require_batch(batch: Option<Batch<'_>>) -> Result<Batch<'_>> {
    batch.ok_or_else(|| Error::InvalidArgument("MLP objective needs a batch".into()))
}

impl Objective for Mlp {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn is_stochastic(&self) -> bool {
        true
    }

    fn value(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<f64> {
        self.spec.value(theta, require_batch(batch)?)
    }

    fn value_grad(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<(f64, Vector)> {
        self.spec.value_grad(theta, require_batch(batch)?)
    }

    fn smooth_along(
        &self,
        theta: &[f64],
        batch: Option<Batch<'_>>,
        coord: usize,
        h: f64,
    ) -> Result<bool> {
        if self.spec.activation == Activation::Tanh {
            return Ok(true);
        }
        let batch = require_batch(batch)?;
        self.spec.validate(theta, &batch)?;
        let base = self.spec.hidden_pattern(theta, &batch);
        let mut probe = theta.to_vec();
        for shift in [h, -h] {
            probe[coord] = theta[coord] + shift;
            if self.spec.hidden_pattern(&probe, &batch) != base {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

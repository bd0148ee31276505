//! Fully-connected networks, the Adam optimizer, and a generic training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::TensorRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Anything with trainable tensors, in a fixed order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a leaf of `g`, in `parameters()` order.
    fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|t| g.input_ref(t, trainable))
            .collect()
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear
/// output layer. Weights are stored `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let wd: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bd: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::new(wd, vec![fan_in, fan_out])?);
            biases.push(Tensor::new(bd, vec![fan_out])?);
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect();
        let biases = widths.windows(2).map(|w| Tensor::zeros(&[w[1]])).collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// ReLU network computing the identity on `dim` inputs via
    /// `x = relu(x) - relu(-x)`. Every hidden width must be at least `2·dim`.
    pub fn identity(dim: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.is_empty() || hidden.iter().any(|&h| h < 2 * dim) {
            return Err(Error::Config(format!(
                "identity MLP needs hidden widths >= {} (got {hidden:?})",
                2 * dim
            )));
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut mlp = Mlp::zeros(&widths, Activation::Relu)?;
        let last = mlp.weights.len() - 1;
        for (l, w) in mlp.weights.iter_mut().enumerate() {
            let cols = w.shape()[1];
            let data = w.data_mut();
            if l == 0 {
                for i in 0..dim {
                    data[i * cols + i] = 1.0;
                    data[i * cols + dim + i] = -1.0;
                }
            } else if l == last {
                for i in 0..dim {
                    data[i * cols + i] = 1.0;
                    data[(dim + i) * cols + i] = -1.0;
                }
            } else {
                for i in 0..2 * dim {
                    data[i * cols + i] = 1.0;
                }
            }
        }
        Ok(mlp)
    }

    /// Zeroes the output layer so the network computes the constant 0.
    pub fn zero_output_layer(&mut self) {
        let l = self.weights.len() - 1;
        self.weights[l].data_mut().fill(0.0);
        self.biases[l].data_mut().fill(0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("widths nonempty")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn from_parts(
        widths: Vec<usize>,
        activation: Activation,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        if widths.len() < 2 || weights.len() != widths.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Format("MLP layer count mismatch".into()));
        }
        for (l, w) in widths.windows(2).enumerate() {
            if weights[l].shape() != [w[0], w[1]] || biases[l].shape() != [w[1]] {
                return Err(Error::Format(format!(
                    "MLP layer {l}: expected weight [{}, {}] and bias [{}], got {:?} and {:?}",
                    w[0],
                    w[1],
                    w[1],
                    weights[l].shape(),
                    biases[l].shape()
                )));
            }
        }
        Ok(Self {
            widths,
            activation,
            weights,
            biases,
        })
    }

    /// Applies the network to `x` (`[n, in]`) using bound parameter vars laid
    /// out as `[w0, b0, w1, b1, ...]`.
    pub fn apply(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        let layers = self.weights.len();
        debug_assert_eq!(params.len(), 2 * layers);
        let mut h = x;
        for l in 0..layers {
            h = g.affine(h, params[2 * l], params[2 * l + 1])?;
            if l + 1 < layers {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    /// Binds the parameters as constants and applies the network.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let params = self.bind(g, false);
        self.apply(g, &params, x)
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Stored form of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpRecord {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<TensorRecord>,
    pub biases: Vec<TensorRecord>,
}

impl From<&Mlp> for MlpRecord {
    fn from(m: &Mlp) -> Self {
        Self {
            widths: m.widths.clone(),
            activation: m.activation,
            weights: m.weights.iter().map(TensorRecord::from).collect(),
            biases: m.biases.iter().map(TensorRecord::from).collect(),
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Mlp> {
        let weights = r.weights.into_iter().map(Tensor::try_from).collect::<Result<_>>()?;
        let biases = r.biases.into_iter().map(Tensor::try_from).collect::<Result<_>>()?;
        Mlp::from_parts(r.widths, r.activation, weights, biases)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Minimizes: parameters move against the
/// supplied gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_config(lr, AdamConfig::default())
    }

    pub fn with_config(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "training config needs positive epochs/batch and lr >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Loss per epoch, evaluated before that epoch's update.
    pub losses: Vec<f64>,
}

impl TrainingLog {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Runs `epochs` Adam steps on `model`. `loss_fn` receives the model, a fresh
/// graph with the parameters already bound (in `parameters()` order), and
/// the epoch index, and returns a scalar loss var.
///
/// `on_epoch` is consulted after each update; returning `false` stops early.
pub fn fit<M, F, C>(
    model: &mut M,
    epochs: usize,
    learning_rate: f64,
    mut loss_fn: F,
    mut on_epoch: C,
) -> Result<TrainingLog>
where
    M: Parameterized,
    F: FnMut(&M, &mut Graph<'_>, &[Var], usize) -> Result<Var>,
    C: FnMut(&M, usize) -> Result<bool>,
{
    let mut adam = Adam::new(learning_rate);
    let mut log = TrainingLog::default();
    for epoch in 0..epochs {
        let grads: Vec<Vec<f64>> = {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let loss = loss_fn(model, &mut g, &vars, epoch)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_finite: log.last(),
                });
            }
            log.losses.push(value);
            g.backward(loss)?;
            vars.iter()
                .zip(model.parameters())
                .map(|(&v, t)| {
                    g.grad(v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect()
        };
        {
            let mut params = model.parameters_mut();
            let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut slices, &grefs);
        }
        if !on_epoch(model, epoch)? {
            break;
        }
    }
    Ok(log)
}

//! RealNVP-style normalizing flow `g: Z → X` built from affine coupling
//! layers, with exact inverse, log-det-Jacobian, change-of-variables density
//! and maximum-likelihood training.
//!
//! Each coupling layer keeps its frozen coordinates (`mask = 1`) and maps the
//! free ones as `x = z·exp(s) + t`, where `s` and `t` are MLPs of the masked
//! input. Scale logits are clamped to `c·tanh(s/c)`. The log-det of the
//! forward map is the sum of clamped logits on free coordinates, so
//! [`FlowModel::log_det_jacobian`] returns `log|det ∂x/∂z|`.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{check_dim, Generator};
use crate::io::{read_json, write_json};
use crate::nn::{fit, Activation, Mlp, MlpRecord, Parameterized, TrainConfig, TrainingLog};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub dim: usize,
    pub blocks: usize,
    /// Hidden widths of each scale/translation network.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub scale_clamp: f64,
    pub init_seed: u64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            dim: 3,
            blocks: 12,
            hidden: vec![64, 64],
            leaky_slope: 0.01,
            scale_clamp: 2.0,
            init_seed: 0,
        }
    }
}

/// Frozen-coordinate masks cycling through "only coordinate j frozen" and
/// its complement, for j = 0..dim.
pub fn alternating_masks(dim: usize, blocks: usize) -> Vec<Vec<bool>> {
    let mut patterns = Vec::with_capacity(2 * dim);
    for j in 0..dim {
        let single: Vec<bool> = (0..dim).map(|i| i == j).collect();
        let complement: Vec<bool> = single.iter().map(|b| !b).collect();
        patterns.push(single);
        patterns.push(complement);
    }
    (0..blocks).map(|b| patterns[b % patterns.len()].clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    scale_net: Mlp,
    translate_net: Mlp,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, scale_net: Mlp, translate_net: Mlp) -> Result<Self> {
        let d = mask.len();
        if !mask.iter().any(|&m| m) || mask.iter().all(|&m| m) {
            return Err(Error::Config(format!(
                "coupling mask {mask:?} must contain both frozen and free coordinates"
            )));
        }
        for net in [&scale_net, &translate_net] {
            if net.input_dim() != d || net.output_dim() != d {
                return Err(Error::Config(format!(
                    "coupling nets must map {d} -> {d}, got widths {:?}",
                    net.widths()
                )));
            }
        }
        Ok(Self {
            mask,
            scale_net,
            translate_net,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &Mlp {
        &self.translate_net
    }

    fn param_count(&self) -> usize {
        2 * (self.scale_net.weights().len() + self.translate_net.weights().len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    scale_clamp: f64,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Random hidden layers, zero output layers: the flow starts as the
    /// identity map.
    pub fn new(spec: &FlowSpec) -> Result<Self> {
        if spec.dim < 2 || spec.blocks == 0 || !(spec.scale_clamp > 0.0) {
            return Err(Error::Config(format!("invalid flow spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let act = Activation::LeakyRelu {
            slope: spec.leaky_slope,
        };
        let mut widths = vec![spec.dim];
        widths.extend_from_slice(&spec.hidden);
        widths.push(spec.dim);
        let mut layers = Vec::with_capacity(spec.blocks);
        for mask in alternating_masks(spec.dim, spec.blocks) {
            let mut s = Mlp::new(&widths, act, &mut rng)?;
            let mut t = Mlp::new(&widths, act, &mut rng)?;
            s.zero_output_layer();
            t.zero_output_layer();
            layers.push(CouplingLayer::new(mask, s, t)?);
        }
        Ok(Self {
            dim: spec.dim,
            scale_clamp: spec.scale_clamp,
            layers,
        })
    }

    pub fn from_layers(dim: usize, scale_clamp: f64, layers: Vec<CouplingLayer>) -> Result<Self> {
        if layers.is_empty() || !(scale_clamp > 0.0) {
            return Err(Error::Config("flow needs layers and a positive clamp".into()));
        }
        if let Some(l) = layers.iter().find(|l| l.mask.len() != dim) {
            return Err(Error::Config(format!(
                "layer mask {:?} does not match dimension {dim}",
                l.mask
            )));
        }
        Ok(Self {
            dim,
            scale_clamp,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// One coupling layer. Returns the output and the clamped, free-masked
    /// scale logits `s` (`[n, d]`).
    fn coupling(
        &self,
        g: &mut Graph<'_>,
        layer: &CouplingLayer,
        params: &[Var],
        h: Var,
        inverse: bool,
    ) -> Result<(Var, Var)> {
        let n = g.shape(h)[0];
        let d = self.dim;
        let frozen: Vec<f64> = (0..n)
            .flat_map(|_| layer.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect();
        let free: Vec<f64> = frozen.iter().map(|m| 1.0 - m).collect();
        let frozen = g.constant(Tensor::new(frozen, vec![n, d])?);
        let free = g.constant(Tensor::new(free, vec![n, d])?);

        let ns = 2 * layer.scale_net.weights().len();
        let hm = g.mul(h, frozen)?;
        let raw = layer.scale_net.apply(g, &params[..ns], hm)?;
        let c = self.scale_clamp;
        let s = g.scale(raw, 1.0 / c)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, c)?;
        let s = g.mul(s, free)?;
        let t = layer.translate_net.apply(g, &params[ns..], hm)?;
        let t = g.mul(t, free)?;
        let out = if inverse {
            let shifted = g.sub(h, t)?;
            let neg = g.neg(s)?;
            let e = g.exp(neg)?;
            g.mul(shifted, e)?
        } else {
            let e = g.exp(s)?;
            let scaled = g.mul(h, e)?;
            g.add(scaled, t)?
        };
        Ok((out, s))
    }

    fn check_input(&self, g: &Graph<'_>, v: Var) -> Result<()> {
        let shape = g.shape(v);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        if g.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// Applies the flow (`inverse = false`: z → x; `true`: x → z) to `[n, d]`
    /// `input`, returning the output and the per-layer scale logit tensors.
    pub fn transform_bound(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        input: Var,
        inverse: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(g, input)?;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        debug_assert_eq!(off, params.len());
        let mut h = input;
        let mut logits = Vec::with_capacity(self.layers.len());
        let order: Vec<usize> = if inverse {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        for i in order {
            let layer = &self.layers[i];
            let p = &params[offsets[i]..offsets[i] + layer.param_count()];
            let (out, s) = self.coupling(g, layer, p, h, inverse)?;
            if g.value(out).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("flow layer {i}")));
            }
            h = out;
            logits.push(s);
        }
        Ok((h, logits))
    }

    /// Records `g(z)` and the per-row `log|det ∂x/∂z|` (`[n, 1]`).
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<(Var, Var)> {
        let params = self.bind(g, false);
        let (x, logits) = self.transform_bound(g, &params, z, false)?;
        let ld = sum_logits_rows(g, &logits)?;
        Ok((x, ld))
    }

    /// Records `g⁻¹(x)` and the per-row `log|det ∂z/∂x|` (`[n, 1]`).
    pub fn inverse_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Var)> {
        let params = self.bind(g, false);
        let (z, logits) = self.transform_bound(g, &params, x, true)?;
        let ld = sum_logits_rows(g, &logits)?;
        let ld = g.neg(ld)?;
        Ok((z, ld))
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        Ok(self.forward_batch(&Tensor::row(z))?.into_data())
    }

    pub fn forward_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.input_ref(z, false);
        let (x, _) = self.forward_graph(&mut g, zv)?;
        Ok(g.tensor(x))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.inverse_batch(&Tensor::row(x))?.into_data())
    }

    pub fn inverse_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input_ref(x, false);
        let (z, _) = self.inverse_graph(&mut g, xv)?;
        Ok(g.tensor(z))
    }

    /// `log|det ∂x/∂z|` of the forward map at `z`.
    pub fn log_det_jacobian(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z));
        let (_, ld) = self.forward_graph(&mut g, zv)?;
        Ok(g.item(ld))
    }

    /// Change-of-variables log-density `log q_Z(g⁻¹(x)) + log|det ∂z/∂x|`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.log_prob_batch(&Tensor::row(x))?[0])
    }

    pub fn log_prob_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.input_ref(x, false);
        let (z, ld) = self.inverse_graph(&mut g, xv)?;
        let n = g.shape(z)[0];
        let zs = g.value(z);
        let lds = g.value(ld);
        Ok((0..n)
            .map(|i| base_log_prob(&zs[i * self.dim..(i + 1) * self.dim]) + lds[i])
            .collect())
    }

    pub fn mean_log_prob(&self, x: &Tensor) -> Result<f64> {
        let lp = self.log_prob_batch(x)?;
        Ok(lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Mean negative log-likelihood of `x` with parameters bound in `g`.
    pub fn nll_bound(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        let n = g.shape(x)[0] as f64;
        let (z, logits) = self.transform_bound(g, params, x, true)?;
        let sq = g.square(z)?;
        let mut total = g.sum(sq);
        total = g.scale(total, 0.5)?;
        for s in logits {
            let ss = g.sum(s);
            total = g.add(total, ss)?;
        }
        let mean = g.scale(total, 1.0 / n)?;
        let c = g.scalar(0.5 * self.dim as f64 * (2.0 * PI).ln());
        g.add(mean, c)
    }

    /// Maximum-likelihood training with Adam; each epoch draws a fresh batch
    /// from `sampler`.
    pub fn train<S>(&mut self, mut sampler: S, cfg: &TrainConfig) -> Result<TrainingLog>
    where
        S: FnMut(&mut ChaCha8Rng, usize) -> Tensor,
    {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = cfg.batch_size;
        fit(
            self,
            cfg.epochs,
            cfg.learning_rate,
            |m, g, params, _| {
                let x = g.constant(sampler(&mut rng, batch));
                m.nll_bound(g, params, x)
            },
            |_, _| Ok(true),
        )
    }

    pub fn to_record(&self) -> FlowRecord {
        FlowRecord {
            format_version: FORMAT_VERSION,
            kind: "flow".into(),
            input_dim: self.dim,
            scale_clamp: self.scale_clamp,
            layers: self
                .layers
                .iter()
                .map(|l| CouplingRecord {
                    mask: l.mask.iter().map(|&m| u8::from(m)).collect(),
                    scale_net: MlpRecord::from(&l.scale_net),
                    translate_net: MlpRecord::from(&l.translate_net),
                })
                .collect(),
            config_hash: None,
        }
    }

    pub fn from_record(r: FlowRecord) -> Result<Self> {
        if r.format_version != FORMAT_VERSION || r.kind != "flow" {
            return Err(Error::Format(format!(
                "expected flow format {FORMAT_VERSION}, got kind '{}' version {}",
                r.kind, r.format_version
            )));
        }
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                if l.mask.iter().any(|&m| m > 1) {
                    return Err(Error::Format("mask entries must be 0 or 1".into()));
                }
                CouplingLayer::new(
                    l.mask.iter().map(|&m| m == 1).collect(),
                    Mlp::try_from(l.scale_net)?,
                    Mlp::try_from(l.translate_net)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        FlowModel::from_layers(r.input_dim, r.scale_clamp, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_record())
    }

    /// Saves with the hash of the configuration that produced the model.
    pub fn save_tagged(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut r = self.to_record();
        r.config_hash = Some(config_hash.into());
        write_json(path, &r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_record(read_json(path)?)
    }
}

fn sum_logits_rows(g: &mut Graph<'_>, logits: &[Var]) -> Result<Var> {
    let mut acc = g.sum_rows(logits[0])?;
    for &s in &logits[1..] {
        let r = g.sum_rows(s)?;
        acc = g.add(acc, r)?;
    }
    Ok(acc)
}

/// Standard normal log-density on `ℝᵈ`.
pub fn base_log_prob(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

impl Parameterized for FlowModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut p = l.scale_net.parameters();
                p.extend(l.translate_net.parameters());
                p
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let mut p = l.scale_net.parameters_mut();
                p.extend(l.translate_net.parameters_mut());
                p
            })
            .collect()
    }
}

impl Generator for FlowModel {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn generate_graph<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<Var> {
        Ok(self.forward_graph(g, z)?.0)
    }

    fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inverse(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingRecord {
    pub mask: Vec<u8>,
    pub scale_net: MlpRecord,
    pub translate_net: MlpRecord,
}

/// On-disk flow model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRecord {
    pub format_version: u32,
    pub kind: String,
    pub input_dim: usize,
    pub scale_clamp: f64,
    pub layers: Vec<CouplingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

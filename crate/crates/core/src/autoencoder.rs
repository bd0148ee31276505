//! Deterministic autoencoder: the approximately invertible generator
//! (decoder `g`, encoder `e ≈ g⁻¹`) and the per-class reconstruction models
//! used by IM1.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{check_dim, Generator};
use crate::io::{read_json, write_json};
use crate::linalg::distance;
use crate::nn::{fit, Activation, Mlp, MlpRecord, Parameterized, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            data_dim: 3,
            latent_dim: 1,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    encoder: Mlp,
    decoder: Mlp,
}

impl Autoencoder {
    pub fn new(spec: &AutoencoderSpec) -> Result<Self> {
        if spec.latent_dim == 0 || spec.latent_dim > spec.data_dim {
            return Err(Error::Config(format!(
                "latent dimension must be in 1..={}, got {}",
                spec.data_dim, spec.latent_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut enc = vec![spec.data_dim];
        enc.extend_from_slice(&spec.hidden);
        enc.push(spec.latent_dim);
        let mut dec = vec![spec.latent_dim];
        dec.extend(spec.hidden.iter().rev());
        dec.push(spec.data_dim);
        Ok(Self {
            encoder: Mlp::new(&enc, spec.activation, &mut rng)?,
            decoder: Mlp::new(&dec, spec.activation, &mut rng)?,
        })
    }

    /// `k = d` autoencoder whose encoder and decoder are both exactly the
    /// identity (ReLU networks).
    pub fn identity(dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::identity(dim, hidden)?,
            decoder: Mlp::identity(dim, hidden)?,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
            return Err(Error::Config(format!(
                "encoder {:?} and decoder {:?} do not compose",
                encoder.widths(),
                decoder.widths()
            )));
        }
        if decoder.input_dim() > encoder.input_dim() {
            return Err(Error::Config("latent dimension exceeds data dimension".into()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.data_dim(), x.len())?;
        run_mlp(&self.encoder, &Tensor::row(x)).map(Tensor::into_data)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim(), z.len())?;
        run_mlp(&self.decoder, &Tensor::row(z)).map(Tensor::into_data)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }

    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        let z = run_mlp(&self.encoder, x)?;
        run_mlp(&self.decoder, &z)
    }

    /// Per-row Euclidean reconstruction error `‖g(e(x)) − x‖`.
    pub fn reconstruction_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let r = self.reconstruct_batch(x)?;
        Ok((0..x.shape()[0])
            .map(|i| distance(r.row_slice(i), x.row_slice(i)))
            .collect())
    }

    /// Adam on the mean squared reconstruction `E‖g(e(x)) − x‖²`.
    pub fn train<S>(&mut self, mut sampler: S, cfg: &TrainConfig) -> Result<TrainingLog>
    where
        S: FnMut(&mut ChaCha8Rng, usize) -> Tensor,
    {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = cfg.batch_size;
        let n_enc = self.encoder.parameters().len();
        fit(
            self,
            cfg.epochs,
            cfg.learning_rate,
            |m, g, params, _| {
                let x = sampler(&mut rng, batch);
                check_dim(m.data_dim(), x.shape()[1])?;
                let n = x.shape()[0] as f64;
                let xv = g.constant(x);
                let z = m.encoder.apply(g, &params[..n_enc], xv)?;
                let r = m.decoder.apply(g, &params[n_enc..], z)?;
                let diff = g.sub(r, xv)?;
                let sq = g.square(diff)?;
                let total = g.sum(sq);
                g.scale(total, 1.0 / n)
            },
            |_, _| Ok(true),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.record(None))
    }

    pub fn save_tagged(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_json(path, &self.record(Some(config_hash)))
    }

    fn record(&self, config_hash: Option<&str>) -> AutoencoderRecord {
        AutoencoderRecord {
            format_version: crate::flow::FORMAT_VERSION,
            kind: "autoencoder".into(),
            encoder: MlpRecord::from(&self.encoder),
            decoder: MlpRecord::from(&self.decoder),
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: AutoencoderRecord = read_json(path)?;
        if r.kind != "autoencoder" || r.format_version != crate::flow::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected autoencoder, got '{}' version {}",
                r.kind, r.format_version
            )));
        }
        Self::from_parts(Mlp::try_from(r.encoder)?, Mlp::try_from(r.decoder)?)
    }
}

fn run_mlp(net: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input_ref(x, false);
    let y = net.forward(&mut g, xv)?;
    let out = g.tensor(y);
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("autoencoder output".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AutoencoderRecord {
    format_version: u32,
    kind: String,
    encoder: MlpRecord,
    decoder: MlpRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl Parameterized for Autoencoder {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

impl Generator for Autoencoder {
    fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    fn data_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn generate_graph<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<Var> {
        self.decoder.forward(g, z)
    }

    fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encode(x)
    }
}

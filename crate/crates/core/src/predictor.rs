//! Differentiable prediction heads: a binary MLP classifier with a sigmoid
//! output and a scalar MLP regressor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{check_dim, Predictor};
use crate::io::{read_json, write_json};
use crate::nn::{fit, Activation, Mlp, MlpRecord, Parameterized, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl HeadSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }
}

/// Binary classifier `f: X → (0, 1)`, the probability of class 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    net: Mlp,
}

impl MlpClassifier {
    pub fn new(spec: &HeadSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        Ok(Self {
            net: Mlp::new(&spec.widths(), Activation::Relu, &mut rng)?,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Config("classifier net must have one output".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn logit_bound(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        self.net.apply(g, params, x)
    }

    /// `f_t(x)`: `f(x)` for class 1, `1 − f(x)` for class 0.
    pub fn class_probability(&self, x: &[f64], class: u8) -> Result<f64> {
        let p = self.predict(x)?;
        Ok(if class == 1 { p } else { 1.0 - p })
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[u8]) -> Result<f64> {
        let p = self.predict_batch(x)?;
        if p.len() != labels.len() {
            return Err(Error::Dimension {
                expected: p.len(),
                got: labels.len(),
            });
        }
        let hits = p
            .iter()
            .zip(labels)
            .filter(|(&pi, &l)| u8::from(pi >= 0.5) == l)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Adam on mean binary cross-entropy (computed from logits). With
    /// `early_stop`, training halts once validation accuracy reaches the
    /// requested level (checked every `every` epochs).
    pub fn train<S>(
        &mut self,
        mut sampler: S,
        cfg: &TrainConfig,
        early_stop: Option<&EarlyStop>,
    ) -> Result<TrainingLog>
    where
        S: FnMut(&mut ChaCha8Rng, usize) -> (Tensor, Vec<u8>),
    {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = cfg.batch_size;
        fit(
            self,
            cfg.epochs,
            cfg.learning_rate,
            |m, g, params, _| {
                let (x, labels) = sampler(&mut rng, batch);
                if labels.iter().any(|&l| l > 1) {
                    return Err(Error::Config("labels must be 0 or 1".into()));
                }
                let n = labels.len();
                let y = Tensor::new(labels.iter().map(|&l| f64::from(l)).collect(), vec![n, 1])?;
                let xv = g.constant(x);
                let yv = g.constant(y);
                let logit = m.logit_bound(g, params, xv)?;
                let sp = g.softplus(logit)?;
                let yl = g.mul(yv, logit)?;
                let per = g.sub(sp, yl)?;
                Ok(g.mean(per))
            },
            |m, epoch| match early_stop {
                Some(es) if (epoch + 1) % es.every == 0 => {
                    Ok(m.accuracy(&es.inputs, &es.labels)? < es.accuracy)
                }
                _ => Ok(true),
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &HeadRecord::new("classifier", &self.net, None))
    }

    pub fn save_tagged(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_json(path, &HeadRecord::new("classifier", &self.net, Some(config_hash)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: HeadRecord = read_json(path)?;
        Self::from_net(r.into_net("classifier")?)
    }
}

/// Validation-accuracy stopping rule for classifier training.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub inputs: Tensor,
    pub labels: Vec<u8>,
    pub accuracy: f64,
    pub every: usize,
}

impl Parameterized for MlpClassifier {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl Predictor for MlpClassifier {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        check_dim(self.input_dim(), *g.shape(x).last().unwrap_or(&0))?;
        let logit = self.net.forward(g, x)?;
        g.sigmoid(logit)
    }

    fn outputs_probability(&self) -> bool {
        true
    }
}

/// Scalar regressor `f: X → ℝ` with a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRegressor {
    net: Mlp,
}

impl MlpRegressor {
    pub fn new(spec: &HeadSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        Ok(Self {
            net: Mlp::new(&spec.widths(), Activation::Relu, &mut rng)?,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Config("regressor net must have one output".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn rmse(&self, x: &Tensor, targets: &[f64]) -> Result<f64> {
        let p = self.predict_batch(x)?;
        let mse = p
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        Ok(mse.sqrt())
    }

    /// Adam on mean squared error.
    pub fn train<S>(&mut self, mut sampler: S, cfg: &TrainConfig) -> Result<TrainingLog>
    where
        S: FnMut(&mut ChaCha8Rng, usize) -> (Tensor, Vec<f64>),
    {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = cfg.batch_size;
        fit(
            self,
            cfg.epochs,
            cfg.learning_rate,
            |m, g, params, _| {
                let (x, targets) = sampler(&mut rng, batch);
                let n = targets.len();
                let xv = g.constant(x);
                let yv = g.constant(Tensor::new(targets, vec![n, 1])?);
                let out = m.net.apply(g, params, xv)?;
                let diff = g.sub(out, yv)?;
                let sq = g.square(diff)?;
                Ok(g.mean(sq))
            },
            |_, _| Ok(true),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &HeadRecord::new("regressor", &self.net, None))
    }

    pub fn save_tagged(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_json(path, &HeadRecord::new("regressor", &self.net, Some(config_hash)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: HeadRecord = read_json(path)?;
        Self::from_net(r.into_net("regressor")?)
    }
}

impl Parameterized for MlpRegressor {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl Predictor for MlpRegressor {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        check_dim(self.input_dim(), *g.shape(x).last().unwrap_or(&0))?;
        self.net.forward(g, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRecord {
    format_version: u32,
    kind: String,
    net: MlpRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl HeadRecord {
    fn new(kind: &str, net: &Mlp, config_hash: Option<&str>) -> Self {
        Self {
            format_version: crate::flow::FORMAT_VERSION,
            kind: kind.into(),
            net: MlpRecord::from(net),
            config_hash: config_hash.map(str::to_string),
        }
    }

    fn into_net(self, kind: &str) -> Result<Mlp> {
        if self.kind != kind || self.format_version != crate::flow::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected {kind} format {}, got '{}' version {}",
                crate::flow::FORMAT_VERSION,
                self.kind,
                self.format_version
            )));
        }
        Mlp::try_from(self.net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand_distr::{Distribution, Normal};

    fn linear_classifier(w: [f64; 3]) -> MlpClassifier {
        let weights = vec![Tensor::new(w.to_vec(), vec![3, 1]).unwrap()];
        let biases = vec![Tensor::zeros(&[1])];
        MlpClassifier::from_net(Mlp::from_parts(vec![3, 1], Activation::Relu, weights, biases).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_classifier_predicts_half() {
        let c = MlpClassifier::from_net(Mlp::zeros(&[3, 4, 1], Activation::Relu).unwrap()).unwrap();
        assert_eq!(c.predict(&[1.0, -5.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn linear_classifier_closed_form() {
        let c = linear_classifier([0.0, 0.0, 1.0]);
        let p = c.predict(&[0.0, 0.0, 3.0]).unwrap();
        assert!((p - 0.952574).abs() < 1e-6);
        assert_eq!(p, sigmoid(3.0));
        let p0 = c.class_probability(&[0.0, 0.0, 3.0], 0).unwrap();
        assert_eq!(p0 + p, 1.0);
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let c = linear_classifier([1.0, 0.0, 0.0]);
        assert!(matches!(c.predict(&[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let spec = HeadSpec {
            input_dim: 2,
            hidden: vec![16],
            init_seed: 3,
        };
        let mut c = MlpClassifier::new(&spec).unwrap();
        let noise = Normal::new(0.0, 0.3).unwrap();
        let blobs = |rng: &mut ChaCha8Rng, n: usize| {
            let mut data = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let l = (i % 2) as u8;
                let centre = if l == 1 { 2.0 } else { -2.0 };
                data.push(centre + noise.sample(rng));
                data.push(centre + noise.sample(rng));
                labels.push(l);
            }
            (Tensor::new(data, vec![n, 2]).unwrap(), labels)
        };
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 4,
        };
        c.train(blobs, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (x, y) = blobs(&mut rng, 500);
        assert_eq!(c.accuracy(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_heads_unchanged() {
        let spec = HeadSpec {
            input_dim: 3,
            hidden: vec![8],
            init_seed: 1,
        };
        let mut c = MlpClassifier::new(&spec).unwrap();
        let before = c.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.0,
            seed: 1,
        };
        let helix = crate::datasets::HelixSpec::default();
        c.train(
            |rng, n| {
                let x = helix.sample(n, rng);
                let l = (0..n).map(|i| crate::datasets::class_label(x.row_slice(i))).collect();
                (x, l)
            },
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(c, before);

        let mut r = MlpRegressor::new(&spec).unwrap();
        let before = r.clone();
        r.train(
            |rng, n| {
                let x = helix.sample(n, rng);
                let t = (0..n).map(|i| x.row_slice(i)[2]).collect();
                (x, t)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(r, before);
    }

    #[test]
    fn constant_target_regression_converges() {
        let spec = HeadSpec {
            input_dim: 3,
            hidden: vec![16],
            init_seed: 2,
        };
        let mut r = MlpRegressor::new(&spec).unwrap();
        let helix = crate::datasets::HelixSpec::default();
        let cfg = TrainConfig {
            epochs: 10000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 3,
        };
        let log = r.train(|rng, n| (helix.sample(n, rng), vec![1.7; n]), &cfg).unwrap();
        assert!(log.last().unwrap() < log.first().unwrap() * 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = helix.sample(200, &mut rng);
        let rmse = r.rmse(&x, &[1.7; 200]).unwrap();
        assert!(rmse * rmse < 1e-4, "mse {}", rmse * rmse);
    }

    #[test]
    fn load_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let c = linear_classifier([1.0, 2.0, 3.0]);
        c.save(&p).unwrap();
        assert_eq!(MlpClassifier::load(&p).unwrap(), c);
        assert!(MlpRegressor::load(&p).is_err());
    }
}

//! Experiment configuration and the helix pipelines built on it.
//!
//! Every random draw is seeded from `ExperimentConfig::seed` through a fixed
//! stream id per purpose, so one config determines every output byte.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::autoencoder::{Autoencoder, AutoencoderSpec};
use crate::counterfactual::{batch_generate, write_jsonl, AscentConfig, Goal, Space, StepRule, Trajectory, TrajectorySet};
use crate::datasets::{
    class_label, regression_target, HelixOracle, HelixSpec, LabeledSample, ManifoldOracle, HELIX_MAX, HELIX_MIN,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    distance_stats, evaluate_trajectories, median, write_metrics_csv, Aggregates, DistanceStats, EvalContext,
    EvaluationReport, SourceReference, IM1_EPSILON,
};
use crate::flow::{FlowModel, FlowSpec};
use crate::generator::{Generator, Predictor};
use crate::geometry::{mean_profile, metric_step_residual, spectrum_batch, write_spectrum_csv, SpectrumReport, DEFAULT_RATIO_CUT};
use crate::io::{config_hash, write_json};
use crate::linalg::dot;
use crate::nn::{Activation, AdamConfig, TrainConfig, TrainingLog};
use crate::predictor::{EarlyStop, HeadSpec, MlpClassifier, MlpRegressor};
use crate::regression::{Direction, RegressionTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainSection {
    fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub noise_width: f64,
    pub n_starts: usize,
    pub n_heldout: usize,
    pub n_reference: usize,
    pub n_spectrum: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            noise_width: 0.0,
            n_starts: 1000,
            n_heldout: 2000,
            n_reference: 2000,
            n_spectrum: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub scale_clamp: f64,
    pub train: TrainSection,
}

impl Default for FlowSection {
    fn default() -> Self {
        let spec = FlowSpec::default();
        Self {
            blocks: spec.blocks,
            hidden: spec.hidden,
            leaky_slope: spec.leaky_slope,
            scale_clamp: spec.scale_clamp,
            train: TrainSection {
                epochs: 5000,
                batch_size: 500,
                learning_rate: 1e-4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    pub train: TrainSection,
    /// Stop once held-out accuracy reaches this level.
    pub early_stop_accuracy: Option<f64>,
    pub check_every: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            train: TrainSection {
                epochs: 2000,
                batch_size: 500,
                learning_rate: 1e-3,
            },
            early_stop_accuracy: Some(0.99),
            check_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorSection {
    pub hidden: Vec<usize>,
    pub train: TrainSection,
}

impl Default for RegressorSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            train: TrainSection {
                epochs: 3000,
                batch_size: 500,
                learning_rate: 1e-3,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainSection,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let spec = AutoencoderSpec::default();
        Self {
            latent_dim: spec.latent_dim,
            hidden: spec.hidden,
            activation: spec.activation,
            train: TrainSection {
                epochs: 3000,
                batch_size: 500,
                learning_rate: 1e-3,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentSection {
    pub input: AscentConfig,
    pub latent: AscentConfig,
}

impl Default for AscentSection {
    fn default() -> Self {
        let toy = Goal::FlipPrediction {
            level: 0.9,
            tolerance: 0.05,
        };
        let base = AscentConfig {
            space: Space::Input,
            goal: toy,
            learning_rate: 1e-2,
            max_steps: 2000,
            optimizer: StepRule::Adam(AdamConfig::default()),
        };
        Self {
            latent: AscentConfig {
                space: Space::Latent,
                learning_rate: 5e-2,
                ..base.clone()
            },
            input: base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub k: usize,
    pub epsilon: f64,
    pub ratio_cut: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            k: 10,
            epsilon: IM1_EPSILON,
            ratio_cut: DEFAULT_RATIO_CUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSection {
    pub direction: Direction,
    pub target: f64,
    pub stop_tolerance: f64,
    pub n_starts: usize,
    /// Parameter range `[lo, hi)` the starts are drawn from.
    pub start_range: [f64; 2],
}

impl Default for RegressionSection {
    fn default() -> Self {
        Self {
            direction: Direction::Maximize,
            target: Direction::Maximize.default_target(),
            stop_tolerance: 0.05,
            n_starts: 200,
            start_range: [-1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub noise_widths: Vec<f64>,
    /// Flow training epochs per sweep run.
    pub epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            noise_widths: vec![0.3, 0.1, 0.03],
            epochs: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Flow,
    Autoencoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Settings of the stand-alone `generate` step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub space: Space,
    pub generator: GeneratorKind,
    pub task: Task,
    /// Dataset CSV with start points; sampled from the helix when absent.
    pub starts_csv: Option<PathBuf>,
    pub n_starts: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            space: Space::Latent,
            generator: GeneratorKind::Flow,
            task: Task::Classification,
            starts_csv: None,
            n_starts: 200,
        }
    }
}

/// Pass/fail levels checked by the toy pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub input_median_min: f64,
    pub latent_median_max: f64,
    pub median_ratio_min: f64,
    pub input_success_min: f64,
    pub latent_success_min: f64,
    pub rank_one_min: usize,
    pub leading_ratio_min: f64,
    pub tangent_cos_min: f64,
    pub oracle_gap_min: f64,
    pub latent_distance_factor_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            input_median_min: 0.5,
            latent_median_max: 0.05,
            median_ratio_min: 20.0,
            input_success_min: 1.0,
            latent_success_min: 0.99,
            rank_one_min: 95,
            leading_ratio_min: 100.0,
            tangent_cos_min: 0.95,
            oracle_gap_min: 0.3,
            latent_distance_factor_min: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub flow: FlowSection,
    pub classifier: ClassifierSection,
    pub oracle: ClassifierSection,
    pub regressor: RegressorSection,
    pub oracle_regressor: RegressorSection,
    pub autoencoder: AutoencoderSection,
    pub class_autoencoder: AutoencoderSection,
    pub ascent: AscentSection,
    pub evaluation: EvaluationSection,
    pub regression: RegressionSection,
    pub sweep: SweepSection,
    pub ae_starts: usize,
    pub generate: GenerateSection,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            flow: FlowSection::default(),
            classifier: ClassifierSection::default(),
            oracle: ClassifierSection {
                hidden: vec![64],
                ..ClassifierSection::default()
            },
            regressor: RegressorSection::default(),
            oracle_regressor: RegressorSection {
                hidden: vec![32],
                ..RegressorSection::default()
            },
            autoencoder: AutoencoderSection::default(),
            class_autoencoder: AutoencoderSection {
                train: TrainSection {
                    epochs: 2000,
                    batch_size: 250,
                    learning_rate: 1e-3,
                },
                ..AutoencoderSection::default()
            },
            ascent: AscentSection::default(),
            evaluation: EvaluationSection::default(),
            regression: RegressionSection::default(),
            sweep: SweepSection::default(),
            ae_starts: 200,
            generate: GenerateSection::default(),
            thresholds: Thresholds::default(),
        }
    }
}

/// Recursive merge of `patch` into `base`. Tagged objects (`mode`/`kind`)
/// whose tag changes are replaced wholesale.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retagged = ["mode", "kind"]
                .iter()
                .any(|t| p.get(*t).is_some_and(|v| b.get(*t) != Some(v)));
            if retagged {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `key.path=value`; the value is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for key in path.split('.').rev() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in override '{assignment}'")));
        }
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(config, patch);
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the optional JSON file, then `--set` overrides, then
    /// the seed override. Unknown keys anywhere are errors.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = file {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !patch.is_object() {
                return Err(Error::Config(format!("{}: config must be a JSON object", p.display())));
            }
            merge(&mut v, patch);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let mut cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ascent.input.validate()?;
        self.ascent.latent.validate()?;
        if self.ascent.input.space != Space::Input || self.ascent.latent.space != Space::Latent {
            return Err(Error::Config("ascent.input/latent must use spaces input/latent".into()));
        }
        let d = &self.data;
        if d.n_starts == 0 || d.n_heldout == 0 || d.n_spectrum == 0 || d.n_reference < self.evaluation.k {
            return Err(Error::Config(
                "sample counts must be positive and n_reference >= evaluation.k".into(),
            ));
        }
        HelixSpec::new(d.noise_width)?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    fn rng(&self, stream: Stream) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream_seed(stream))
    }

    fn stream_seed(&self, stream: Stream) -> u64 {
        // splitmix64 finalizer over (seed, stream)
        let mut z = self
            .seed
            .wrapping_add((stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Copy)]
enum Stream {
    FlowInit,
    FlowTrain,
    ClassifierInit,
    ClassifierTrain,
    OracleInit,
    OracleTrain,
    Heldout,
    Starts,
    Reference,
    Spectrum,
    ClassAeInit,
    ClassAeTrain,
    AeInit,
    AeTrain,
    AeStarts,
    RegressorInit,
    RegressorTrain,
    OracleRegressorInit,
    OracleRegressorTrain,
    RegressionStarts,
    GenerateStarts,
    MetricStep,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row_slice(i).to_vec()).collect()
}

fn labels_of(t: &Tensor) -> Vec<u8> {
    (0..t.shape()[0]).map(|i| class_label(t.row_slice(i))).collect()
}

/// Loss trace summary of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Accuracy (classifiers), RMSE (regressors) or mean reconstruction
    /// error (autoencoders) on held-out data.
    pub heldout_metric: Option<f64>,
}

impl ModelSummary {
    fn from_log(log: &TrainingLog, heldout_metric: Option<f64>) -> Result<Self> {
        Ok(Self {
            epochs_run: log.losses.len(),
            initial_loss: log.first().ok_or(Error::Empty("training log"))?,
            final_loss: log.last().ok_or(Error::Empty("training log"))?,
            heldout_metric,
        })
    }
}

pub fn train_flow(cfg: &ExperimentConfig, noise_width: f64) -> Result<(FlowModel, ModelSummary)> {
    train_flow_epochs(cfg, noise_width, cfg.flow.train.epochs)
}

fn train_flow_epochs(cfg: &ExperimentConfig, noise_width: f64, epochs: usize) -> Result<(FlowModel, ModelSummary)> {
    let f = &cfg.flow;
    let mut flow = FlowModel::new(&FlowSpec {
        dim: 3,
        blocks: f.blocks,
        hidden: f.hidden.clone(),
        leaky_slope: f.leaky_slope,
        scale_clamp: f.scale_clamp,
        init_seed: cfg.stream_seed(Stream::FlowInit),
    })?;
    let helix = HelixSpec::new(noise_width)?;
    let train = TrainSection {
        epochs,
        ..f.train.clone()
    };
    let log = flow.train(|rng, n| helix.sample(n, rng), &train.with_seed(cfg.stream_seed(Stream::FlowTrain)))?;
    let summary = ModelSummary::from_log(&log, None)?;
    Ok((flow, summary))
}

fn heldout(cfg: &ExperimentConfig) -> Tensor {
    HelixSpec::default().sample(cfg.data.n_heldout, &mut cfg.rng(Stream::Heldout))
}

fn train_head(
    cfg: &ExperimentConfig,
    section: &ClassifierSection,
    init: Stream,
    train: Stream,
) -> Result<(MlpClassifier, ModelSummary)> {
    let mut clf = MlpClassifier::new(&HeadSpec {
        input_dim: 3,
        hidden: section.hidden.clone(),
        init_seed: cfg.stream_seed(init),
    })?;
    let held = heldout(cfg);
    let labels = labels_of(&held);
    let early = section.early_stop_accuracy.map(|accuracy| EarlyStop {
        inputs: held.clone(),
        labels: labels.clone(),
        accuracy,
        every: section.check_every.max(1),
    });
    let helix = HelixSpec::default();
    let log = clf.train(
        |rng, n| {
            let x = helix.sample(n, rng);
            let l = labels_of(&x);
            (x, l)
        },
        &section.train.with_seed(cfg.stream_seed(train)),
        early.as_ref(),
    )?;
    let acc = clf.accuracy(&held, &labels)?;
    Ok((clf, ModelSummary::from_log(&log, Some(acc))?))
}

pub fn train_classifier(cfg: &ExperimentConfig) -> Result<(MlpClassifier, ModelSummary)> {
    train_head(cfg, &cfg.classifier, Stream::ClassifierInit, Stream::ClassifierTrain)
}

/// Independently seeded (and by default narrower) classifier used to judge
/// whether counterfactuals transfer.
pub fn train_oracle(cfg: &ExperimentConfig) -> Result<(MlpClassifier, ModelSummary)> {
    train_head(cfg, &cfg.oracle, Stream::OracleInit, Stream::OracleTrain)
}

fn train_regression_head(
    cfg: &ExperimentConfig,
    section: &RegressorSection,
    init: Stream,
    train: Stream,
) -> Result<(MlpRegressor, ModelSummary)> {
    let mut reg = MlpRegressor::new(&HeadSpec {
        input_dim: 3,
        hidden: section.hidden.clone(),
        init_seed: cfg.stream_seed(init),
    })?;
    let helix = HelixSpec::default();
    let log = reg.train(
        |rng, n| {
            let x = helix.sample(n, rng);
            let t = (0..n).map(|i| regression_target(x.row_slice(i))).collect();
            (x, t)
        },
        &section.train.with_seed(cfg.stream_seed(train)),
    )?;
    let held = heldout(cfg);
    let targets: Vec<f64> = (0..held.shape()[0]).map(|i| regression_target(held.row_slice(i))).collect();
    let rmse = reg.rmse(&held, &targets)?;
    Ok((reg, ModelSummary::from_log(&log, Some(rmse))?))
}

pub fn train_regressor(cfg: &ExperimentConfig) -> Result<(MlpRegressor, ModelSummary)> {
    train_regression_head(cfg, &cfg.regressor, Stream::RegressorInit, Stream::RegressorTrain)
}

pub fn train_oracle_regressor(cfg: &ExperimentConfig) -> Result<(MlpRegressor, ModelSummary)> {
    train_regression_head(
        cfg,
        &cfg.oracle_regressor,
        Stream::OracleRegressorInit,
        Stream::OracleRegressorTrain,
    )
}

fn train_ae_on(
    section: &AutoencoderSection,
    init_seed: u64,
    train_seed: u64,
    range: (f64, f64),
    held: &Tensor,
) -> Result<(Autoencoder, ModelSummary)> {
    let mut ae = Autoencoder::new(&AutoencoderSpec {
        data_dim: 3,
        latent_dim: section.latent_dim,
        hidden: section.hidden.clone(),
        activation: section.activation,
        init_seed,
    })?;
    let helix = HelixSpec::default();
    let log = ae.train(
        |rng, n| helix.sample_range(n, range.0, range.1, rng),
        &section.train.with_seed(train_seed),
    )?;
    let err = ae.reconstruction_errors(held)?;
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    Ok((ae, ModelSummary::from_log(&log, Some(mean))?))
}

/// Autoencoder on the whole helix (the approximate generator).
pub fn train_autoencoder(cfg: &ExperimentConfig) -> Result<(Autoencoder, ModelSummary)> {
    train_ae_on(
        &cfg.autoencoder,
        cfg.stream_seed(Stream::AeInit),
        cfg.stream_seed(Stream::AeTrain),
        (HELIX_MIN, HELIX_MAX),
        &heldout(cfg),
    )
}

/// One autoencoder per class half of the helix, `[class 0, class 1]`.
pub fn train_class_autoencoders(cfg: &ExperimentConfig) -> Result<[(Autoencoder, ModelSummary); 2]> {
    let held = heldout(cfg);
    let labels = labels_of(&held);
    let mut out = Vec::with_capacity(2);
    for (class, range) in [(0u8, (HELIX_MIN, 0.0)), (1u8, (0.0, HELIX_MAX))] {
        let rows_c: Vec<f64> = (0..held.shape()[0])
            .filter(|&i| labels[i] == class)
            .flat_map(|i| held.row_slice(i).to_vec())
            .collect();
        let n = rows_c.len() / 3;
        let held_c = Tensor::new(rows_c, vec![n, 3])?;
        let salt = u64::from(class) * 0x5851_F42D_4C95_7F2D;
        out.push(train_ae_on(
            &cfg.class_autoencoder,
            cfg.stream_seed(Stream::ClassAeInit) ^ salt,
            cfg.stream_seed(Stream::ClassAeTrain) ^ salt,
            range,
            &held_c,
        )?);
    }
    let second = out.pop().expect("two entries");
    let first = out.pop().expect("two entries");
    Ok([first, second])
}

pub fn toy_starts(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    rows(&HelixSpec::default().sample(cfg.data.n_starts, &mut cfg.rng(Stream::Starts)))
}

/// Noiseless helix points at which spectra are probed.
pub fn spectrum_points(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    rows(&HelixSpec::default().sample(cfg.data.n_spectrum, &mut cfg.rng(Stream::Spectrum)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub points: usize,
    pub rank_one_count: usize,
    pub median_leading_ratio: f64,
    pub median_orthogonal_eigenvalue: f64,
    /// Median `|cos|` between the top singular vector and the helix tangent.
    pub median_tangent_cos: f64,
    pub mean_profile: Vec<f64>,
}

/// Spectra of `g` at `g⁻¹(x)` for on-manifold `x`.
pub fn probe_spectra(g: &dyn Generator, points: &[Vec<f64>], ratio_cut: f64) -> Result<Vec<SpectrumReport>> {
    let zs = points.iter().map(|x| g.invert(x)).collect::<Result<Vec<_>>>()?;
    spectrum_batch(g, &zs, ratio_cut)
}

pub fn summarize_spectra(reports: &[SpectrumReport], manifold: &dyn ManifoldOracle) -> Result<SpectrumSummary> {
    let ratios: Vec<f64> = reports.iter().map(SpectrumReport::leading_ratio).collect();
    let orth: Vec<f64> = reports.iter().map(|r| r.eigenvalues().get(1).copied().unwrap_or(0.0)).collect();
    let cos: Vec<f64> = reports
        .iter()
        .map(|r| dot(&r.left_singular_vectors[0], &manifold.tangent_at(&r.x)).abs())
        .collect();
    Ok(SpectrumSummary {
        points: reports.len(),
        rank_one_count: reports.iter().filter(|r| r.tangent_rank == 1).count(),
        median_leading_ratio: median(&ratios)?,
        median_orthogonal_eigenvalue: median(&orth)?,
        median_tangent_cos: median(&cos)?,
        mean_profile: mean_profile(reports)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `">="`, `"<="` or `">"`.
    pub comparison: String,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: ">=".into(),
            threshold,
            passed: value >= threshold,
        }
    }

    pub fn greater_than(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: ">".into(),
            threshold,
            passed: value > threshold,
        }
    }

    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: "<=".into(),
            threshold,
            passed: value <= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config_hash: String,
    pub seed: u64,
    pub flow: ModelSummary,
    pub classifier: ModelSummary,
    pub oracle: ModelSummary,
    pub class_autoencoders: [ModelSummary; 2],
    pub input: Aggregates,
    pub latent: Aggregates,
    pub median_ratio: f64,
    pub spectrum: SpectrumSummary,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Everything the toy pipeline produced, models included.
pub struct ToyRun {
    pub config: ExperimentConfig,
    pub flow: FlowModel,
    pub classifier: MlpClassifier,
    pub oracle: MlpClassifier,
    pub class_autoencoders: [Autoencoder; 2],
    pub starts: Vec<Vec<f64>>,
    pub input: Vec<Trajectory>,
    pub latent: Vec<Trajectory>,
    pub input_eval: EvaluationReport,
    pub latent_eval: EvaluationReport,
    pub spectra: Vec<SpectrumReport>,
    pub report: ToyReport,
}

/// Labeled reference sample and per-class source references in `X` and `Z`.
pub struct ReferenceData {
    pub points: Tensor,
    pub labels: Vec<u8>,
    pub sources: [SourceReference; 2],
}

pub fn reference_data(cfg: &ExperimentConfig, generator: &dyn Generator) -> Result<ReferenceData> {
    let points = HelixSpec::default().sample(cfg.data.n_reference, &mut cfg.rng(Stream::Reference));
    let labels = labels_of(&points);
    let split = |c: u8| -> Vec<Vec<f64>> {
        (0..labels.len())
            .filter(|&i| labels[i] == c)
            .map(|i| points.row_slice(i).to_vec())
            .collect()
    };
    let sources = [
        SourceReference::new(split(0), generator)?,
        SourceReference::new(split(1), generator)?,
    ];
    Ok(ReferenceData {
        points,
        labels,
        sources,
    })
}

/// Scores classification trajectories against the helix oracle, an
/// independent classifier, per-class autoencoders and a labeled reference.
pub fn classification_evaluation(
    cfg: &ExperimentConfig,
    config_hash: &str,
    label: &str,
    trajectories: &[Trajectory],
    generator: &dyn Generator,
    oracle: &dyn Predictor,
    class_autoencoders: [&Autoencoder; 2],
) -> Result<EvaluationReport> {
    let reference = reference_data(cfg, generator)?;
    let ctx = EvalContext {
        manifold: &HelixOracle,
        oracle,
        generator,
        classification: true,
        class_autoencoders: Some(class_autoencoders),
        knn: Some((&reference.points, &reference.labels, cfg.evaluation.k)),
        sources: Some([&reference.sources[0], &reference.sources[1]]),
        epsilon: cfg.evaluation.epsilon,
    };
    EvaluationReport::new(label, config_hash, evaluate_trajectories(trajectories, &ctx)?)
}

pub fn regression_evaluation(
    cfg: &ExperimentConfig,
    config_hash: &str,
    label: &str,
    trajectories: &[Trajectory],
    generator: &dyn Generator,
    oracle: &dyn Predictor,
) -> Result<EvaluationReport> {
    let ctx = EvalContext {
        manifold: &HelixOracle,
        oracle,
        generator,
        classification: false,
        class_autoencoders: None,
        knn: None,
        sources: None,
        epsilon: cfg.evaluation.epsilon,
    };
    EvaluationReport::new(label, config_hash, evaluate_trajectories(trajectories, &ctx)?)
}

/// Start points for the stand-alone `generate` step.
pub fn generate_starts(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    match &cfg.generate.starts_csv {
        Some(p) => {
            let f = File::open(p)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
            let sample = LabeledSample::read_csv(std::io::BufReader::new(f))?;
            if sample.is_empty() {
                return Err(Error::Empty("starts CSV"));
            }
            Ok(rows(&sample.points))
        }
        None => Ok(rows(&HelixSpec::default().sample(
            cfg.generate.n_starts,
            &mut cfg.rng(Stream::GenerateStarts),
        ))),
    }
}

/// Ascent configuration for `generate`, with the regression target
/// substituted for regression tasks.
pub fn generate_config(cfg: &ExperimentConfig) -> Result<AscentConfig> {
    let base = match cfg.generate.space {
        Space::Input => &cfg.ascent.input,
        Space::Latent => &cfg.ascent.latent,
    };
    Ok(match cfg.generate.task {
        Task::Classification => base.clone(),
        Task::Regression => AscentConfig {
            goal: Goal::TargetValue {
                target: cfg.regression.target,
                tolerance: cfg.regression.stop_tolerance,
            },
            ..base.clone()
        },
    })
}

pub fn toy_checks(t: &Thresholds, input: &Aggregates, latent: &Aggregates, spectrum: &SpectrumSummary) -> Vec<Check> {
    let ratio = input.manifold_distance.median / latent.manifold_distance.median;
    let mut c = vec![
        Check::at_least("input_median_distance", input.manifold_distance.median, t.input_median_min),
        Check::at_most("latent_median_distance", latent.manifold_distance.median, t.latent_median_max),
        Check::at_least("median_distance_ratio", ratio, t.median_ratio_min),
        Check::at_least("input_success_rate", input.success_rate, t.input_success_min),
        Check::at_least("latent_success_rate", latent.success_rate, t.latent_success_min),
        Check::at_least("spectrum_rank_one_count", spectrum.rank_one_count as f64, t.rank_one_min as f64),
        Check::at_least("spectrum_median_leading_ratio", spectrum.median_leading_ratio, t.leading_ratio_min),
        Check::at_least("spectrum_median_tangent_cos", spectrum.median_tangent_cos, t.tangent_cos_min),
        Check::at_least(
            "oracle_transfer_gap",
            latent.oracle_transfer - input.oracle_transfer,
            t.oracle_gap_min,
        ),
    ];
    if let (Some(a), Some(b)) = (input.im1, latent.im1) {
        c.push(Check::greater_than("im1_gap", a.mean - b.mean, 0.0));
    }
    if let (Some(a), Some(b)) = (input.knn_agreement, latent.knn_agreement) {
        c.push(Check::greater_than("knn_agreement_gap", b.mean - a.mean, 0.0));
    }
    if let (Some(a), Some(b)) = (input.l2_z, latent.l2_z) {
        c.push(Check::at_least(
            "latent_distance_factor",
            a.mean / b.mean,
            t.latent_distance_factor_min,
        ));
    }
    c
}

/// The full toy pipeline: flow, classifier, oracle and class autoencoders,
/// input and latent ascent from every start, evaluation and spectra.
/// Artifacts are written to `out` when given.
pub fn reproduce_toy(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ToyRun> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let (flow, flow_summary) = train_flow(cfg, cfg.data.noise_width)?;
    let (classifier, clf_summary) = train_classifier(cfg)?;
    let (oracle, oracle_summary) = train_oracle(cfg)?;
    let [(ae0, ae0_summary), (ae1, ae1_summary)] = train_class_autoencoders(cfg)?;

    let starts = toy_starts(cfg);
    let input = batch_generate(&classifier, None, &starts, &cfg.ascent.input)?;
    let latent = batch_generate(&classifier, Some(&flow), &starts, &cfg.ascent.latent)?;

    let aes = [&ae0, &ae1];
    let input_eval = classification_evaluation(cfg, &hash, "input", &input, &flow, &oracle, aes)?;
    let latent_eval = classification_evaluation(cfg, &hash, "latent", &latent, &flow, &oracle, aes)?;

    let spectra = probe_spectra(&flow, &spectrum_points(cfg), cfg.evaluation.ratio_cut)?;
    let spectrum = summarize_spectra(&spectra, &HelixOracle)?;

    let checks = toy_checks(
        &cfg.thresholds,
        &input_eval.aggregates,
        &latent_eval.aggregates,
        &spectrum,
    );
    let report = ToyReport {
        config_hash: hash.clone(),
        seed: cfg.seed,
        flow: flow_summary,
        classifier: clf_summary,
        oracle: oracle_summary,
        class_autoencoders: [ae0_summary, ae1_summary],
        median_ratio: input_eval.aggregates.manifold_distance.median / latent_eval.aggregates.manifold_distance.median,
        input: input_eval.aggregates.clone(),
        latent: latent_eval.aggregates.clone(),
        spectrum,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    let run = ToyRun {
        config: cfg.clone(),
        flow,
        classifier,
        oracle,
        class_autoencoders: [ae0, ae1],
        starts,
        input,
        latent,
        input_eval,
        latent_eval,
        spectra,
        report,
    };
    if let Some(dir) = out {
        write_toy_artifacts(&run, dir)?;
    }
    Ok(run)
}

pub fn write_toy_artifacts(run: &ToyRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = &run.report.config_hash;
    write_json(&dir.join("config.json"), &run.config)?;
    write_json(&dir.join("report.json"), &run.report)?;
    let sets = [
        TrajectorySet {
            label: "input".into(),
            config_hash: hash.clone(),
            config: run.config.ascent.input.clone(),
            trajectories: run.input.clone(),
        },
        TrajectorySet {
            label: "latent".into(),
            config_hash: hash.clone(),
            config: run.config.ascent.latent.clone(),
            trajectories: run.latent.clone(),
        },
    ];
    write_jsonl(BufWriter::new(File::create(dir.join("trajectories.jsonl"))?), &sets)?;
    write_spectrum_csv(
        BufWriter::new(File::create(dir.join("spectrum.csv"))?),
        Some(hash),
        &run.spectra,
    )?;
    write_metrics_csv(
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
        hash,
        &[&run.input_eval, &run.latent_eval],
    )?;
    run.input_eval.save(&dir.join("evaluation_input.json"))?;
    run.latent_eval.save(&dir.join("evaluation_latent.json"))?;
    run.flow.save_tagged(&dir.join("flow.json"), hash)?;
    run.classifier.save_tagged(&dir.join("classifier.json"), hash)?;
    run.oracle.save_tagged(&dir.join("oracle_classifier.json"), hash)?;
    run.class_autoencoders[0].save_tagged(&dir.join("class_ae_0.json"), hash)?;
    run.class_autoencoders[1].save_tagged(&dir.join("class_ae_1.json"), hash)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub noise_width: f64,
    pub final_nll: f64,
    pub spectrum: SpectrumSummary,
}

/// One flow per noise width, same seeds throughout; spectra at the same
/// noiseless helix points.
pub fn noise_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let points = spectrum_points(cfg);
    cfg.sweep
        .noise_widths
        .iter()
        .map(|&w| {
            let (flow, summary) = train_flow_epochs(cfg, w, cfg.sweep.epochs)?;
            let spectra = probe_spectra(&flow, &points, cfg.evaluation.ratio_cut)?;
            Ok(SweepPoint {
                noise_width: w,
                final_nll: summary.final_loss,
                spectrum: summarize_spectra(&spectra, &HelixOracle)?,
            })
        })
        .collect()
}

pub struct AeRun {
    pub autoencoder: Autoencoder,
    pub summary: ModelSummary,
    pub trajectories: Vec<Trajectory>,
    pub distances: DistanceStats,
    pub tangent: SpectrumSummary,
}

/// Counterfactuals through the decoder of a helix autoencoder, starting
/// from `ae_starts` fresh helix points.
pub fn ae_counterfactuals(cfg: &ExperimentConfig, classifier: &dyn Predictor) -> Result<AeRun> {
    let (ae, summary) = train_autoencoder(cfg)?;
    let starts = rows(&HelixSpec::default().sample(cfg.ae_starts, &mut cfg.rng(Stream::AeStarts)));
    let trajectories = batch_generate(classifier, Some(&ae), &starts, &cfg.ascent.latent)?;
    let d: Vec<f64> = trajectories.iter().map(|t| HelixOracle.distance(&t.final_point)).collect();
    let spectra = probe_spectra(&ae, &spectrum_points(cfg), cfg.evaluation.ratio_cut)?;
    Ok(AeRun {
        autoencoder: ae,
        summary,
        trajectories,
        distances: distance_stats(&d)?,
        tangent: summarize_spectra(&spectra, &HelixOracle)?,
    })
}

/// Step sizes of the metric-step order probe, each half the previous.
pub const METRIC_STEPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Metric-step residuals at `METRIC_STEPS` for `n` on-manifold latent points
/// `g⁻¹(x)`, one row per point.
pub fn metric_step_probe(
    cfg: &ExperimentConfig,
    generator: &dyn Generator,
    predictor: &dyn Predictor,
    n: usize,
) -> Result<Vec<[f64; 3]>> {
    let points = HelixSpec::default().sample(n, &mut cfg.rng(Stream::MetricStep));
    (0..n)
        .map(|i| {
            let z = generator.invert(points.row_slice(i))?;
            let mut r = [0.0; 3];
            for (slot, &step) in r.iter_mut().zip(&METRIC_STEPS) {
                *slot = metric_step_residual(predictor, generator, &z, step)?;
            }
            Ok(r)
        })
        .collect()
}

pub struct RegressionRun {
    pub regressor: ModelSummary,
    pub oracle: ModelSummary,
    pub latent: Vec<Trajectory>,
    pub input: Vec<Trajectory>,
    pub latent_success_rate: f64,
    pub latent_distances: DistanceStats,
    pub input_distances: DistanceStats,
    /// Mean `|oracle(x′) − r*|` over finals.
    pub latent_oracle_error: f64,
    pub input_oracle_error: f64,
}

pub fn regression_toy(cfg: &ExperimentConfig, generator: &dyn Generator) -> Result<RegressionRun> {
    let (reg, reg_summary) = train_regressor(cfg)?;
    let (oracle, oracle_summary) = train_oracle_regressor(cfg)?;
    let r = &cfg.regression;
    let task = RegressionTask::with_target(reg, r.direction, r.target, r.stop_tolerance)?;
    let starts = rows(&HelixSpec::default().sample_range(
        r.n_starts,
        r.start_range[0],
        r.start_range[1],
        &mut cfg.rng(Stream::RegressionStarts),
    ));
    let latent = batch_generate(
        &task.regressor,
        Some(generator),
        &starts,
        &task.ascent_config(&cfg.ascent.latent),
    )?;
    let input = batch_generate(&task.regressor, None, &starts, &task.ascent_config(&cfg.ascent.input))?;
    let score = |ts: &[Trajectory]| -> Result<(DistanceStats, f64)> {
        let d: Vec<f64> = ts.iter().map(|t| HelixOracle.distance(&t.final_point)).collect();
        let mut err = 0.0;
        for t in ts {
            err += (oracle.predict(&t.final_point)? - task.target).abs();
        }
        Ok((distance_stats(&d)?, err / ts.len() as f64))
    };
    let (latent_distances, latent_oracle_error) = score(&latent)?;
    let (input_distances, input_oracle_error) = score(&input)?;
    Ok(RegressionRun {
        regressor: reg_summary,
        oracle: oracle_summary,
        latent_success_rate: latent.iter().filter(|t| t.is_success()).count() as f64 / latent.len() as f64,
        latent,
        input,
        latent_distances,
        input_distances,
        latent_oracle_error,
        input_oracle_error,
    })
}

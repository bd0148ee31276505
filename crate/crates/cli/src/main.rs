use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use latentcf::autoencoder::Autoencoder;
use latentcf::counterfactual::{batch_generate, read_jsonl, write_jsonl, Space, TrajectorySet};
use latentcf::datasets::HelixOracle;
use latentcf::evaluation::write_metrics_csv;
use latentcf::experiment::{
    classification_evaluation, generate_config, generate_starts, probe_spectra, regression_evaluation,
    reproduce_toy, spectrum_points, summarize_spectra, train_autoencoder, train_class_autoencoders,
    train_classifier, train_flow, train_oracle, train_oracle_regressor, train_regressor, ExperimentConfig,
    GeneratorKind, ModelSummary, Task,
};
use latentcf::flow::FlowModel;
use latentcf::generator::{Generator, Predictor};
use latentcf::geometry::write_spectrum_csv;
use latentcf::io::write_json;
use latentcf::predictor::{MlpClassifier, MlpRegressor};

const FLOW: &str = "flow.json";
const CLASSIFIER: &str = "classifier.json";
const ORACLE_CLASSIFIER: &str = "oracle_classifier.json";
const REGRESSOR: &str = "regressor.json";
const ORACLE_REGRESSOR: &str = "oracle_regressor.json";
const AUTOENCODER: &str = "autoencoder.json";
const CLASS_AE: [&str; 2] = ["class_ae_0.json", "class_ae_1.json"];
const TRAJECTORIES: &str = "trajectories.jsonl";

/// Counterfactuals on the helix toy problem: model training, latent and
/// input-space ascent, Jacobian spectra and evaluation.
#[derive(Parser, Debug)]
#[command(name = "latentcf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config merged over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for models and artifacts; read from and written to.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Dotted-path override, e.g. `--set flow.epochs=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the flow on noisy helix samples.
    TrainFlow,
    /// Train the attacked classifier and the oracle classifier.
    TrainClassifier,
    /// Train the attacked regressor and the oracle regressor.
    TrainRegressor,
    /// Train the helix autoencoder and the per-class autoencoders.
    TrainAe,
    /// Run ascent from a batch of start points.
    Generate,
    /// Jacobian spectra of the generator at on-manifold points.
    Spectrum,
    /// Score the trajectories in the output directory.
    Evaluate,
    /// Full toy pipeline; exits nonzero when any threshold fails.
    ReproduceToy,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    models: Vec<(&'a str, ModelSummary)>,
}

fn load<T>(dir: &Path, name: &str, f: impl FnOnce(&Path) -> latentcf::Result<T>) -> Result<T> {
    let path = dir.join(name);
    if !path.exists() {
        bail!("missing model file {}", path.display());
    }
    f(&path).with_context(|| format!("loading {}", path.display()))
}

fn write_summary(dir: &Path, file: &str, hash: &str, models: Vec<(&str, ModelSummary)>) -> Result<()> {
    for (name, s) in &models {
        eprintln!(
            "{name}: {} epochs, loss {:.6} -> {:.6}, held-out {:?}",
            s.epochs_run, s.initial_loss, s.final_loss, s.heldout_metric
        );
    }
    write_json(&dir.join(file), &Summary { config_hash: hash, models })?;
    Ok(())
}

fn load_generator(cfg: &ExperimentConfig, dir: &Path) -> Result<Box<dyn Generator>> {
    Ok(match cfg.generate.generator {
        GeneratorKind::Flow => Box::new(load(dir, FLOW, FlowModel::load)?),
        GeneratorKind::Autoencoder => Box::new(load(dir, AUTOENCODER, Autoencoder::load)?),
    })
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    cfg.validate()?;
    let hash = cfg.hash()?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;

    match cli.command {
        Command::TrainFlow => {
            let (flow, s) = train_flow(&cfg, cfg.data.noise_width)?;
            flow.save_tagged(&out.join(FLOW), &hash)?;
            write_summary(out, "flow_summary.json", &hash, vec![("flow", s)])?;
        }
        Command::TrainClassifier => {
            let (clf, s) = train_classifier(&cfg)?;
            let (oracle, so) = train_oracle(&cfg)?;
            clf.save_tagged(&out.join(CLASSIFIER), &hash)?;
            oracle.save_tagged(&out.join(ORACLE_CLASSIFIER), &hash)?;
            write_summary(out, "classifier_summary.json", &hash, vec![("classifier", s), ("oracle", so)])?;
        }
        Command::TrainRegressor => {
            let (reg, s) = train_regressor(&cfg)?;
            let (oracle, so) = train_oracle_regressor(&cfg)?;
            reg.save_tagged(&out.join(REGRESSOR), &hash)?;
            oracle.save_tagged(&out.join(ORACLE_REGRESSOR), &hash)?;
            write_summary(out, "regressor_summary.json", &hash, vec![("regressor", s), ("oracle", so)])?;
        }
        Command::TrainAe => {
            let (ae, s) = train_autoencoder(&cfg)?;
            let [(ae0, s0), (ae1, s1)] = train_class_autoencoders(&cfg)?;
            ae.save_tagged(&out.join(AUTOENCODER), &hash)?;
            ae0.save_tagged(&out.join(CLASS_AE[0]), &hash)?;
            ae1.save_tagged(&out.join(CLASS_AE[1]), &hash)?;
            write_summary(
                out,
                "autoencoder_summary.json",
                &hash,
                vec![("autoencoder", s), ("class_ae_0", s0), ("class_ae_1", s1)],
            )?;
        }
        Command::Generate => {
            let predictor: Box<dyn Predictor> = match cfg.generate.task {
                Task::Classification => Box::new(load(out, CLASSIFIER, MlpClassifier::load)?),
                Task::Regression => Box::new(load(out, REGRESSOR, MlpRegressor::load)?),
            };
            let generator = match cfg.generate.space {
                Space::Latent => Some(load_generator(&cfg, out)?),
                Space::Input => None,
            };
            let ascent = generate_config(&cfg)?;
            let starts = generate_starts(&cfg)?;
            let trajectories = batch_generate(predictor.as_ref(), generator.as_deref(), &starts, &ascent)?;
            let successes = trajectories.iter().filter(|t| t.is_success()).count();
            eprintln!("{successes}/{} trajectories reached the goal", trajectories.len());
            let label = match cfg.generate.space {
                Space::Input => "input",
                Space::Latent => "latent",
            };
            let set = TrajectorySet {
                label: label.into(),
                config_hash: hash.clone(),
                config: ascent,
                trajectories,
            };
            write_jsonl(BufWriter::new(File::create(out.join(TRAJECTORIES))?), &[set])?;
        }
        Command::Spectrum => {
            let generator = load_generator(&cfg, out)?;
            let reports = probe_spectra(generator.as_ref(), &spectrum_points(&cfg), cfg.evaluation.ratio_cut)?;
            write_spectrum_csv(BufWriter::new(File::create(out.join("spectrum.csv"))?), Some(&hash), &reports)?;
            let summary = summarize_spectra(&reports, &HelixOracle)?;
            eprintln!(
                "rank one at {}/{} points, median leading ratio {:.3e}",
                summary.rank_one_count, summary.points, summary.median_leading_ratio
            );
            write_json(&out.join("spectrum_summary.json"), &(hash.as_str(), summary))?;
        }
        Command::Evaluate => {
            let path = out.join(TRAJECTORIES);
            let file = File::open(&path).with_context(|| format!("missing trajectory file {}", path.display()))?;
            let sets = read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
            let flow = load(out, FLOW, FlowModel::load)?;
            let mut reports = Vec::with_capacity(sets.len());
            for set in &sets {
                let report = match cfg.generate.task {
                    Task::Classification => {
                        let oracle = load(out, ORACLE_CLASSIFIER, MlpClassifier::load)?;
                        let ae0 = load(out, CLASS_AE[0], Autoencoder::load)?;
                        let ae1 = load(out, CLASS_AE[1], Autoencoder::load)?;
                        classification_evaluation(&cfg, &hash, &set.label, &set.trajectories, &flow, &oracle, [
                            &ae0, &ae1,
                        ])?
                    }
                    Task::Regression => {
                        let oracle = load(out, ORACLE_REGRESSOR, MlpRegressor::load)?;
                        regression_evaluation(&cfg, &hash, &set.label, &set.trajectories, &flow, &oracle)?
                    }
                };
                let a = &report.aggregates;
                eprintln!(
                    "{}: success {:.3}, median helix distance {:.4}, oracle transfer {:.3}",
                    set.label, a.success_rate, a.manifold_distance.median, a.oracle_transfer
                );
                report.save(&out.join(format!("evaluation_{}.json", set.label)))?;
                reports.push(report);
            }
            let refs: Vec<_> = reports.iter().collect();
            write_metrics_csv(BufWriter::new(File::create(out.join("metrics.csv"))?), &hash, &refs)?;
        }
        Command::ReproduceToy => {
            let run = reproduce_toy(&cfg, Some(out))?;
            for c in &run.report.checks {
                println!(
                    "{} {} {} {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.comparison,
                    c.threshold
                );
            }
            return Ok(run.report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

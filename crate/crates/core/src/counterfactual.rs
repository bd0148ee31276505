//! Counterfactual search by iterative ascent, either directly on the input
//! (`x ← x + λ ∂f_t/∂x`, which yields adversarial examples) or on the latent
//! code of a generator (`z ← z + λ ∂(f∘g)_t/∂z`, returning `g(z)`).
//!
//! The loop evaluates the stopping rule on the start point first, then after
//! every step; a start that already satisfies the goal returns a zero-step
//! success. Runs that exhaust the step budget return the best iterate seen,
//! flagged as [`Outcome::Exhausted`].

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, Predictor};
use crate::io::to_json_string;
use crate::nn::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Input,
    Latent,
}

/// What the search is trying to reach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Goal {
    /// Ascend `f_t` until `f_t(x) > threshold`.
    ConfidenceThreshold { target_class: u8, threshold: f64 },
    /// Ascend `−(f(x) − target)²` until `|f(x) − target| <= tolerance`.
    TargetValue { target: f64, tolerance: f64 },
    /// Binary toy protocol: target value `1 − level` when the start is
    /// predicted above 0.5, `level` otherwise.
    FlipPrediction { level: f64, tolerance: f64 },
    /// Threshold mode against whichever class the start is not predicted as.
    OppositeClass { threshold: f64 },
}

impl Goal {
    /// Fixes start-dependent goals given the start prediction `f(x⁰)`.
    pub fn resolve(self, start_prediction: f64) -> Goal {
        match self {
            Goal::FlipPrediction { level, tolerance } => Goal::TargetValue {
                target: if start_prediction > 0.5 { 1.0 - level } else { level },
                tolerance,
            },
            Goal::OppositeClass { threshold } => Goal::ConfidenceThreshold {
                target_class: u8::from(start_prediction < 0.5),
                threshold,
            },
            g => g,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Goal::ConfidenceThreshold {
                target_class,
                threshold,
            } => target_class <= 1 && threshold > 0.0 && threshold < 1.0,
            Goal::TargetValue { target, tolerance } => target.is_finite() && tolerance > 0.0,
            Goal::FlipPrediction { level, tolerance } => level > 0.0 && level < 1.0 && tolerance > 0.0,
            Goal::OppositeClass { threshold } => threshold > 0.0 && threshold < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid goal {self:?}")))
        }
    }

    fn needs_probability(&self) -> bool {
        !matches!(self, Goal::TargetValue { .. })
    }

    /// Scalar objective to ascend, recorded on `g`.
    pub fn objective_graph(&self, g: &mut Graph<'_>, prediction: Var) -> Result<Var> {
        match *self {
            Goal::ConfidenceThreshold { target_class, .. } => {
                let f = g.sum(prediction);
                if target_class == 1 {
                    Ok(f)
                } else {
                    let one = g.scalar(1.0);
                    g.sub(one, f)
                }
            }
            Goal::TargetValue { target, .. } => {
                let f = g.sum(prediction);
                let r = g.scalar(target);
                let d = g.sub(f, r)?;
                let sq = g.square(d)?;
                g.neg(sq)
            }
            _ => Err(Error::Config("goal must be resolved before use".into())),
        }
    }

    /// Stopping predicate on a prediction value.
    pub fn is_satisfied(&self, prediction: f64) -> bool {
        match *self {
            Goal::ConfidenceThreshold {
                target_class,
                threshold,
            } => {
                let ft = if target_class == 1 {
                    prediction
                } else {
                    1.0 - prediction
                };
                ft > threshold
            }
            Goal::TargetValue { target, tolerance } => (prediction - target).abs() <= tolerance,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    Adam(AdamConfig),
    /// Plain gradient steps `z ← z + λ ∇`.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentConfig {
    pub space: Space,
    pub goal: Goal,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub optimizer: StepRule,
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        self.goal.validate()?;
        if !(self.learning_rate > 0.0) || self.max_steps == 0 {
            return Err(Error::Config(format!(
                "ascent needs learning_rate > 0 and max_steps >= 1, got {} and {}",
                self.learning_rate, self.max_steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub i: usize,
    pub objective: f64,
    pub prediction: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success { step: usize },
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_input: Vec<f64>,
    pub start_latent: Option<Vec<f64>>,
    /// Goal after resolving start-dependent targets.
    pub goal: Goal,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub final_point: Vec<f64>,
    pub final_latent: Option<Vec<f64>>,
    /// Why the run stopped early without success, if it did.
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn is_success(&self) -> bool {
        matches!(self.outcome, Outcome::Success { .. })
    }

    /// Number of update steps taken.
    pub fn step_count(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn final_prediction(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Success { step } => Some(self.steps[step].prediction),
            Outcome::Exhausted => self
                .steps
                .iter()
                .find(|s| s.x == self.final_point)
                .map(|s| s.prediction),
        }
    }

    fn rejected(start: &[f64], goal: Goal, err: &Error) -> Self {
        Self {
            start_input: start.to_vec(),
            start_latent: None,
            goal,
            steps: Vec::new(),
            outcome: Outcome::Exhausted,
            final_point: start.to_vec(),
            final_latent: None,
            failure: Some(err.to_string()),
        }
    }
}

struct Evaluation {
    objective: f64,
    prediction: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

fn evaluate(
    predictor: &dyn Predictor,
    generator: Option<&dyn Generator>,
    point: &[f64],
    goal: &Goal,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let v = g.variable(Tensor::row(point));
    let x = match generator {
        Some(gen) => gen.generate_graph(&mut g, v)?,
        None => v,
    };
    let f = predictor.output_graph(&mut g, x)?;
    let obj = goal.objective_graph(&mut g, f)?;
    g.backward(obj)?;
    let grad = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    Ok(Evaluation {
        objective: g.item(obj),
        prediction: g.item(f),
        x: g.value(x).to_vec(),
        grad,
    })
}

enum Stepper {
    Adam(Adam),
    Plain(f64),
}

impl Stepper {
    fn new(cfg: &AscentConfig) -> Self {
        match cfg.optimizer {
            StepRule::Adam(a) => Stepper::Adam(Adam::with_config(cfg.learning_rate, a)),
            StepRule::Plain => Stepper::Plain(cfg.learning_rate),
        }
    }

    /// Moves `state` up the objective gradient.
    fn ascend(&mut self, state: &mut [f64], grad: &[f64]) {
        match self {
            Stepper::Adam(adam) => {
                let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
                adam.step(&mut [state], &[&descent]);
            }
            Stepper::Plain(lr) => {
                for (s, g) in state.iter_mut().zip(grad) {
                    *s += *lr * g;
                }
            }
        }
    }
}

fn run(
    predictor: &dyn Predictor,
    generator: Option<&dyn Generator>,
    start: &[f64],
    cfg: &AscentConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.goal.needs_probability() && !predictor.outputs_probability() {
        return Err(Error::Config(
            "confidence goals require a probabilistic classifier".into(),
        ));
    }
    if start.len() != predictor.input_dim() {
        return Err(Error::Dimension {
            expected: predictor.input_dim(),
            got: start.len(),
        });
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ascent start point".into()));
    }
    let start_latent = match generator {
        Some(gen) => {
            let z = gen.invert(start)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("inverse of the start point".into()));
            }
            Some(z)
        }
        None => None,
    };
    let goal = cfg.goal.resolve(predictor.predict(start)?);
    let mut state = start_latent.clone().unwrap_or_else(|| start.to_vec());
    let mut stepper = Stepper::new(cfg);

    let mut eval = evaluate(predictor, generator, &state, &goal)?;
    let mut steps = vec![StepRecord {
        i: 0,
        objective: eval.objective,
        prediction: eval.prediction,
        x: eval.x.clone(),
    }];
    let mut best = (eval.objective, eval.x.clone(), state.clone());
    let mut outcome = Outcome::Exhausted;
    let mut failure = None;
    if goal.is_satisfied(eval.prediction) {
        outcome = Outcome::Success { step: 0 };
    } else {
        for i in 1..=cfg.max_steps {
            if eval.grad.iter().any(|g| !g.is_finite()) {
                failure = Some(format!("non-finite gradient at step {}", i - 1));
                break;
            }
            stepper.ascend(&mut state, &eval.grad);
            eval = match evaluate(predictor, generator, &state, &goal) {
                Ok(e) if e.objective.is_finite() => e,
                Ok(_) => {
                    failure = Some(format!("non-finite objective at step {i}"));
                    break;
                }
                Err(e) => {
                    failure = Some(format!("step {i}: {e}"));
                    break;
                }
            };
            steps.push(StepRecord {
                i,
                objective: eval.objective,
                prediction: eval.prediction,
                x: eval.x.clone(),
            });
            if eval.objective > best.0 {
                best = (eval.objective, eval.x.clone(), state.clone());
            }
            if goal.is_satisfied(eval.prediction) {
                outcome = Outcome::Success { step: i };
                break;
            }
        }
    }
    let (final_point, final_latent) = match outcome {
        Outcome::Success { .. } => (eval.x, state),
        Outcome::Exhausted => (best.1, best.2),
    };
    Ok(Trajectory {
        start_input: start.to_vec(),
        start_latent,
        goal,
        steps,
        outcome,
        final_point,
        final_latent: generator.map(|_| final_latent),
        failure,
    })
}

/// Ascent directly on the input (the adversarial baseline).
pub fn ascend_input(predictor: &dyn Predictor, x: &[f64], cfg: &AscentConfig) -> Result<Trajectory> {
    if cfg.space != Space::Input {
        return Err(Error::Config("ascend_input needs space = input".into()));
    }
    run(predictor, None, x, cfg)
}

/// Ascent on `z = g⁻¹(x)`, returning points `g(z)`.
pub fn ascend_latent(
    predictor: &dyn Predictor,
    generator: &dyn Generator,
    x: &[f64],
    cfg: &AscentConfig,
) -> Result<Trajectory> {
    if cfg.space != Space::Latent {
        return Err(Error::Config("ascend_latent needs space = latent".into()));
    }
    if generator.data_dim() != predictor.input_dim() {
        return Err(Error::Dimension {
            expected: predictor.input_dim(),
            got: generator.data_dim(),
        });
    }
    run(predictor, Some(generator), x, cfg)
}

/// Independent runs from every start, in start order. Per-start errors are
/// stored in that trajectory (`failure`, outcome exhausted).
pub fn batch_generate(
    predictor: &dyn Predictor,
    generator: Option<&dyn Generator>,
    starts: &[Vec<f64>],
    cfg: &AscentConfig,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if let Some(s) = starts.iter().find(|s| s.len() != starts[0].len()) {
        return Err(Error::Dimension {
            expected: starts[0].len(),
            got: s.len(),
        });
    }
    Ok(starts
        .par_iter()
        .map(|x| {
            let res = match (cfg.space, generator) {
                (Space::Input, _) => ascend_input(predictor, x, cfg),
                (Space::Latent, Some(g)) => ascend_latent(predictor, g, x, cfg),
                (Space::Latent, None) => Err(Error::Config("latent ascent needs a generator".into())),
            };
            res.unwrap_or_else(|e| Trajectory::rejected(x, cfg.goal, &e))
        })
        .collect())
}

/// A batch of trajectories with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub label: String,
    pub config_hash: String,
    pub config: AscentConfig,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JsonlRecord {
    Header {
        label: String,
        config_hash: String,
        config: AscentConfig,
    },
    Trajectory {
        index: usize,
        start: Vec<f64>,
        start_latent: Option<Vec<f64>>,
        goal: Goal,
        outcome: Outcome,
        #[serde(rename = "final")]
        final_point: Vec<f64>,
        final_latent: Option<Vec<f64>>,
        failure: Option<String>,
    },
    Step {
        trajectory: usize,
        #[serde(flatten)]
        step: StepRecord,
    },
}

/// For each set: a header record with its ascent configuration, then per
/// trajectory a summary record followed by one record per step.
pub fn write_jsonl<W: Write>(mut w: W, sets: &[TrajectorySet]) -> Result<()> {
    for set in sets {
        let header = JsonlRecord::Header {
            label: set.label.clone(),
            config_hash: set.config_hash.clone(),
            config: set.config.clone(),
        };
        writeln!(w, "{}", to_json_string(&header)?)?;
        for (index, t) in set.trajectories.iter().enumerate() {
            let rec = JsonlRecord::Trajectory {
                index,
                start: t.start_input.clone(),
                start_latent: t.start_latent.clone(),
                goal: t.goal,
                outcome: t.outcome,
                final_point: t.final_point.clone(),
                final_latent: t.final_latent.clone(),
                failure: t.failure.clone(),
            };
            writeln!(w, "{}", to_json_string(&rec)?)?;
            for s in &t.steps {
                let rec = JsonlRecord::Step {
                    trajectory: index,
                    step: s.clone(),
                };
                writeln!(w, "{}", to_json_string(&rec)?)?;
            }
        }
    }
    Ok(())
}

/// Parses the output of [`write_jsonl`].
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrajectorySet>> {
    let mut sets: Vec<TrajectorySet> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format(format!("trajectory line {}: {msg}", lineno + 1));
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if let JsonlRecord::Header {
            label,
            config_hash,
            config,
        } = rec
        {
            sets.push(TrajectorySet {
                label,
                config_hash,
                config,
                trajectories: Vec::new(),
            });
            continue;
        }
        let out = &mut sets
            .last_mut()
            .ok_or_else(|| bad("record before any header".into()))?
            .trajectories;
        match rec {
            JsonlRecord::Header { .. } => unreachable!(),
            JsonlRecord::Trajectory {
                index,
                start,
                start_latent,
                goal,
                outcome,
                final_point,
                final_latent,
                failure,
            } => {
                if index != out.len() {
                    return Err(bad(format!("trajectory index {index} out of order")));
                }
                out.push(Trajectory {
                    start_input: start,
                    start_latent,
                    goal,
                    steps: Vec::new(),
                    outcome,
                    final_point,
                    final_latent,
                    failure,
                });
            }
            JsonlRecord::Step { trajectory, step } => {
                let last = out.len().checked_sub(1);
                let t = out
                    .last_mut()
                    .filter(|_| Some(trajectory) == last)
                    .ok_or_else(|| bad(format!("step for unknown trajectory {trajectory}")))?;
                if step.i != t.steps.len() {
                    return Err(bad(format!("step {} is not contiguous", step.i)));
                }
                t.steps.push(step);
            }
        }
    }
    Ok(sets)
}

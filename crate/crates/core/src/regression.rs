//! Regression counterfactuals: drive a regressor's output to a target value
//! through the latent space of a generator.

use serde::{Deserialize, Serialize};

use crate::counterfactual::{ascend_latent, AscentConfig, Goal, Space, Trajectory};
use crate::datasets::{HELIX_MAX, HELIX_MIN};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::predictor::MlpRegressor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Default helix target for this direction.
    pub fn default_target(self) -> f64 {
        match self {
            Direction::Maximize => 3.5,
            Direction::Minimize => -3.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    pub regressor: MlpRegressor,
    pub direction: Direction,
    pub target: f64,
    pub stop_tolerance: f64,
}

impl RegressionTask {
    pub fn new(regressor: MlpRegressor, direction: Direction, stop_tolerance: f64) -> Result<Self> {
        Self::with_target(regressor, direction, direction.default_target(), stop_tolerance)
    }

    pub fn with_target(regressor: MlpRegressor, direction: Direction, target: f64, stop_tolerance: f64) -> Result<Self> {
        if !(target > HELIX_MIN && target < HELIX_MAX) {
            return Err(Error::Config(format!(
                "regression target {target} outside ({HELIX_MIN}, {HELIX_MAX})"
            )));
        }
        if !(stop_tolerance > 0.0) {
            return Err(Error::Config("stop_tolerance must be positive".into()));
        }
        Ok(Self {
            regressor,
            direction,
            target,
            stop_tolerance,
        })
    }

    pub fn goal(&self) -> Goal {
        Goal::TargetValue {
            target: self.target,
            tolerance: self.stop_tolerance,
        }
    }

    /// `cfg` with its goal replaced by this task's target.
    pub fn ascent_config(&self, cfg: &AscentConfig) -> AscentConfig {
        AscentConfig {
            goal: self.goal(),
            ..cfg.clone()
        }
    }
}

/// Latent ascent on `−(f(g(z)) − r*)²` starting from `g⁻¹(x)`.
pub fn regress_counterfactual(
    task: &RegressionTask,
    generator: &dyn Generator,
    x: &[f64],
    cfg: &AscentConfig,
) -> Result<Trajectory> {
    let cfg = AscentConfig {
        space: Space::Latent,
        ..task.ascent_config(cfg)
    };
    ascend_latent(&task.regressor, generator, x, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::counterfactual::{Outcome, StepRule};
    use crate::generator::IdentityGenerator;
    use crate::nn::{Activation, AdamConfig, Mlp};

    fn x3_regressor() -> MlpRegressor {
        let w = Tensor::new(vec![0.0, 0.0, 1.0], vec![3, 1]).unwrap();
        MlpRegressor::from_net(Mlp::from_parts(vec![3, 1], Activation::Relu, vec![w], vec![Tensor::zeros(&[1])]).unwrap())
            .unwrap()
    }

    fn cfg() -> AscentConfig {
        AscentConfig {
            space: Space::Latent,
            goal: Goal::OppositeClass { threshold: 0.5 },
            learning_rate: 0.05,
            max_steps: 1000,
            optimizer: StepRule::Adam(AdamConfig::default()),
        }
    }

    #[test]
    fn start_at_target_is_zero_step_success() {
        let task = RegressionTask::new(x3_regressor(), Direction::Maximize, 0.05).unwrap();
        let t = regress_counterfactual(&task, &IdentityGenerator { dim: 3 }, &[0.0, 1.0, 3.5], &cfg()).unwrap();
        assert_eq!(t.outcome, Outcome::Success { step: 0 });
    }

    #[test]
    fn identity_flow_moves_only_along_x3() {
        let task = RegressionTask::new(x3_regressor(), Direction::Maximize, 0.05).unwrap();
        let x0 = [0.3, -0.7, 0.2];
        let t = regress_counterfactual(&task, &IdentityGenerator { dim: 3 }, &x0, &cfg()).unwrap();
        assert!(t.is_success());
        assert!((t.final_point[2] - 3.5).abs() <= 0.05);
        for s in &t.steps {
            assert_eq!(&s.x[..2], &x0[..2]);
        }
    }

    #[test]
    fn target_outside_range_rejected() {
        assert!(RegressionTask::with_target(x3_regressor(), Direction::Maximize, 4.5, 0.05).is_err());
        assert!(RegressionTask::new(x3_regressor(), Direction::Minimize, 0.0).is_err());
        assert_eq!(Direction::Minimize.default_target(), -3.5);
    }
}

use serde::{Deserialize, Serialize};

use super::{Algo, HarnessError};
use crate::agents::AgentConfig;
use crate::env::{CurriculumState, EnvConfig, RewardFunc};

/// Curriculum spawning for training episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSpec {
    pub initial_fraction: f64,
    pub initial_clutter: usize,
    /// Apply the per-success update; otherwise the eased setting stays fixed.
    pub progress: bool,
    /// Evaluate with the training curriculum state instead of the full task.
    pub evaluate_eased: bool,
}

impl Default for CurriculumSpec {
    fn default() -> Self {
        CurriculumSpec {
            initial_fraction: 0.1,
            initial_clutter: 0,
            progress: true,
            evaluate_eased: false,
        }
    }
}

impl CurriculumSpec {
    pub fn initial_state(&self) -> CurriculumState {
        CurriculumState::new(self.initial_fraction, self.initial_clutter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub env: EnvConfig,
    pub algorithms: Vec<Algo>,
    /// Desk-scale run length.
    pub total_timesteps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Full-length run and evaluation cadence; far beyond CI budgets.
    pub full_total_timesteps: u64,
    pub full_eval_every: u64,
    pub curriculum: Option<CurriculumSpec>,
    pub agent: AgentConfig,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            name: "custom".into(),
            env: EnvConfig::default(),
            algorithms: vec![Algo::Ppo, Algo::A2c, Algo::Dqn],
            total_timesteps: 50_000,
            eval_every: 2_000,
            eval_episodes: 5,
            full_total_timesteps: 1_000_000,
            full_eval_every: 10_000,
            curriculum: None,
            agent: AgentConfig::default(),
        }
    }
}

pub const RECIPE_NAMES: [&str; 6] = ["I", "II", "III", "IV", "V", "VI"];

impl Recipe {
    /// Shipped experiment recipes `I`..`VI`.
    pub fn named(name: &str) -> Option<Recipe> {
        let base =
            |name: &str, seed: u64, randomise: bool, clutter: usize, reward: RewardFunc| Recipe {
                name: name.into(),
                env: EnvConfig {
                    seed,
                    randomise,
                    clutter_items: clutter,
                    reward_func: reward,
                    ..EnvConfig::default()
                },
                eval_episodes: if randomise { 10 } else { 5 },
                ..Recipe::default()
            };
        let r = match name.to_ascii_uppercase().as_str() {
            "I" => base("I", 756765, false, 1, RewardFunc::Sparse),
            "II" => base("II", 756765, false, 1, RewardFunc::Shaped1),
            "III" => base("III", 934612, true, 3, RewardFunc::Budget),
            "IV" => {
                let mut r = base("IV", 467328, true, 3, RewardFunc::Complex);
                r.env.randomise_domain = true;
                r
            }
            "V" => base("V", 115545, true, 1, RewardFunc::StepPenalty),
            "VI" => {
                let mut r = base("VI", 433854, true, 3, RewardFunc::Budget);
                r.algorithms = vec![Algo::Ppo, Algo::Dqn];
                r.full_total_timesteps = 9_000_000;
                r.curriculum = Some(CurriculumSpec::default());
                r
            }
            "EASED" => Recipe::eased(),
            _ => return None,
        };
        Some(r)
    }

    /// Reduced 28x28 observations, goal spawned within a tenth of the usual
    /// radius, no clutter, budget reward; evaluated on the same eased task.
    pub fn eased() -> Recipe {
        Recipe {
            name: "eased".into(),
            env: EnvConfig {
                seed: 0,
                randomise: true,
                clutter_items: 0,
                reward_func: RewardFunc::Budget,
                obs_size: 28,
                ..EnvConfig::default()
            },
            total_timesteps: 150_000,
            eval_every: 5_000,
            eval_episodes: 10,
            curriculum: Some(CurriculumSpec {
                initial_fraction: 0.1,
                initial_clutter: 0,
                progress: false,
                evaluate_eased: true,
            }),
            ..Recipe::default()
        }
    }

    pub fn all() -> Vec<Recipe> {
        RECIPE_NAMES
            .iter()
            .filter_map(|n| Recipe::named(n))
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Recipe, HarnessError> {
        let r: Recipe = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    /// A shipped name or a path to a TOML recipe file.
    pub fn load(name_or_path: &str) -> Result<Recipe, HarnessError> {
        if let Some(r) = Recipe::named(name_or_path) {
            return Ok(r);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| HarnessError::Config(format!("recipe {name_or_path}: {e}")))?;
        Recipe::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(HarnessError::Config(
                "eval_every and eval_episodes must be positive".into(),
            ));
        }
        if let Some(c) = &self.curriculum {
            if !(c.initial_fraction > 0.0 && c.initial_fraction <= 1.0) {
                return Err(HarnessError::Config(
                    "curriculum initial_fraction must be in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Switches to the full run length and cadence.
    pub fn full_scale(mut self) -> Recipe {
        self.total_timesteps = self.full_total_timesteps;
        self.eval_every = self.full_eval_every;
        self
    }
}

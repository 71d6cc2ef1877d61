//! Training loop, evaluation metrics, random baseline, experiment recipes,
//! checkpoints and reports.

pub mod checkpoint;
pub mod recipes;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::actor_critic::{OnPolicyAlgo, OnPolicyLearner};
use crate::agents::policy_gradient::ReinforceLearner;
use crate::agents::{AgentError, DqnLearner, NetSpec, Transition, N_ACTIONS};
use crate::env::{Action, CurriculumState, Env, EnvConfig, EnvError};
use crate::obs::{AgentEnv, ObsError, ObsPipeline, Observation};
use crate::par;

pub use recipes::{CurriculumSpec, Recipe};
pub use report::MetricsRow;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("runtime: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AgentError> for HarnessError {
    fn from(e: AgentError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<EnvError> for HarnessError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<ObsError> for HarnessError {
    fn from(e: ObsError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Dqn,
    A2c,
    Ppo,
    Reinforce,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Dqn, Algo::A2c, Algo::Ppo, Algo::Reinforce];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Dqn => "dqn",
            Algo::A2c => "a2c",
            Algo::Ppo => "ppo",
            Algo::Reinforce => "reinforce",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| HarnessError::Config(format!("unknown algorithm {s}")))
    }
}

/// SplitMix64 finaliser, used to derive independent seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AGENT: u64 = 1;
const STREAM_REPLAY: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_BASELINE: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_length: f64,
    pub std_length: f64,
    pub success_rate: f64,
    pub efficiency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub reward: f64,
    pub length: u32,
    pub success: bool,
}

impl Metrics {
    pub fn from_episodes(eps: &[EpisodeResult]) -> Metrics {
        let n = eps.len();
        if n == 0 {
            return Metrics::default();
        }
        let nf = n as f64;
        let mean = |f: &dyn Fn(&EpisodeResult) -> f64| eps.iter().map(f).sum::<f64>() / nf;
        let mean_reward = mean(&|e| e.reward);
        let mean_length = mean(&|e| e.length as f64);
        let std_reward = mean(&|e| (e.reward - mean_reward).powi(2)).sqrt();
        let std_length = mean(&|e| (e.length as f64 - mean_length).powi(2)).sqrt();
        let successes = eps.iter().filter(|e| e.success).count();
        Metrics {
            episodes: n,
            mean_reward,
            std_reward,
            mean_length,
            std_length,
            success_rate: successes as f64 / nf,
            efficiency: if mean_length > 0.0 {
                mean_reward / mean_length
            } else {
                0.0
            },
        }
    }
}

/// Deterministic action selection for evaluation.
pub trait Policy: Sync {
    fn action(&self, obs: &Observation) -> Result<usize>;
}

impl<F> Policy for F
where
    F: Fn(&Observation) -> usize + Sync,
{
    fn action(&self, obs: &Observation) -> Result<usize> {
        Ok(self(obs))
    }
}

/// Plays one episode to its end and reports the outcome.
pub fn run_episode(
    config: &EnvConfig,
    curriculum: Option<CurriculumState>,
    mut choose: impl FnMut(&Observation) -> Result<usize>,
) -> Result<EpisodeResult> {
    let mut env = Env::new(config.clone())?;
    env.set_curriculum(curriculum);
    let mut agent_env = AgentEnv::new(env);
    let mut obs = agent_env.reset()?;
    let mut reward = 0.0;
    loop {
        let a = choose(&obs)?;
        let action = Action::from_index(a)
            .ok_or_else(|| HarnessError::Runtime(format!("invalid action {a}")))?;
        let (next, s) = agent_env.step(action)?;
        reward += s.reward;
        if s.terminated || s.truncated {
            return Ok(EpisodeResult {
                reward,
                length: s.info.episode_timestep,
                success: s.info.success,
            });
        }
        obs = next;
    }
}

fn episode_config(config: &EnvConfig, seed: u64, i: usize) -> EnvConfig {
    EnvConfig {
        seed: derive_seed(seed, i as u64),
        ..config.clone()
    }
}

/// Runs `episodes` greedy episodes on fresh environments (one per episode,
/// seeded from `seed`), possibly in parallel.
pub fn evaluate(
    policy: &dyn Policy,
    config: &EnvConfig,
    curriculum: Option<CurriculumState>,
    episodes: usize,
    seed: u64,
) -> Result<Metrics> {
    if episodes == 0 {
        return Err(HarnessError::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let results = par::map_range(episodes, |i| {
        run_episode(&episode_config(config, seed, i), curriculum.clone(), |o| {
            policy.action(o)
        })
    });
    let eps = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_episodes(&eps))
}

/// Uniformly random actions. Episode `i` uses its own generator seeded from
/// `seed`, so results do not depend on the execution mode.
pub fn random_baseline(
    config: &EnvConfig,
    curriculum: Option<CurriculumState>,
    episodes: usize,
    seed: u64,
) -> Result<Metrics> {
    if episodes == 0 {
        return Err(HarnessError::Config(
            "baseline needs at least one episode".into(),
        ));
    }
    let results = par::map_range(episodes, |i| {
        run_episode(
            &episode_config(config, seed, i),
            curriculum.clone(),
            random_actor(seed, i),
        )
    });
    let eps = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_episodes(&eps))
}

/// Uniform action source used by [`random_baseline`] for episode `episode`.
pub fn random_actor(seed: u64, episode: usize) -> impl FnMut(&Observation) -> Result<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BASELINE + 16 * episode as u64));
    move |_| Ok(rng.gen_range(0..N_ACTIONS))
}

#[derive(Clone, Debug)]
pub enum Learner {
    Dqn(DqnLearner),
    OnPolicy(OnPolicyLearner),
    Reinforce(ReinforceLearner),
}

impl Learner {
    pub fn new(recipe: &Recipe, algo: Algo, seed: u64, input: [usize; 3]) -> Result<Learner> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_AGENT));
        let ac = NetSpec::for_input(input, N_ACTIONS, true);
        let cfg = &recipe.agent;
        Ok(match algo {
            Algo::Dqn => Learner::Dqn(DqnLearner::new(
                NetSpec::for_input(input, N_ACTIONS, false),
                cfg.dqn.clone(),
                recipe.total_timesteps,
                derive_seed(seed, STREAM_REPLAY),
                &mut rng,
            )?),
            Algo::A2c => Learner::OnPolicy(OnPolicyLearner::new(
                ac,
                OnPolicyAlgo::A2c(cfg.a2c.clone()),
                &mut rng,
            )?),
            Algo::Ppo => Learner::OnPolicy(OnPolicyLearner::new(
                ac,
                OnPolicyAlgo::Ppo(cfg.ppo.clone()),
                &mut rng,
            )?),
            Algo::Reinforce => {
                Learner::Reinforce(ReinforceLearner::new(ac, cfg.reinforce.clone(), &mut rng)?)
            }
        })
    }

    pub fn greedy(&self, obs: &Observation) -> Result<usize> {
        Ok(match self {
            Learner::Dqn(l) => l.greedy(obs)?,
            Learner::OnPolicy(l) => l.greedy(obs)?,
            Learner::Reinforce(l) => l.greedy(obs)?,
        })
    }

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(match self {
            Learner::Dqn(l) => l.act(obs, rng)?,
            Learner::OnPolicy(l) => l.act(obs, rng)?,
            Learner::Reinforce(l) => l.act(obs, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn observe(
        &mut self,
        obs: Observation,
        action: usize,
        reward: f64,
        next: &Observation,
        terminated: bool,
        truncated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        match self {
            Learner::Dqn(l) => l.observe(Transition {
                state: obs,
                action,
                reward,
                next_state: next.clone(),
                terminated,
                truncated,
            })?,
            Learner::OnPolicy(l) => {
                l.observe(obs, action, reward, next, terminated, truncated, rng)?
            }
            Learner::Reinforce(l) => l.observe(obs, action, reward, terminated || truncated)?,
        }
        Ok(())
    }
}

struct Greedy<'a>(&'a Learner);

impl Policy for Greedy<'_> {
    fn action(&self, obs: &Observation) -> Result<usize> {
        self.0.greedy(obs)
    }
}

/// Everything that determines the continuation of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub recipe: Recipe,
    pub algo: Algo,
    pub seed: u64,
    pub env: AgentEnv,
    pub obs: Observation,
    pub learner: Learner,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub episode_reward: f64,
    pub train_episodes: u64,
    pub rows: Vec<MetricsRow>,
}

impl Trainer {
    /// Fresh run. `seed` seeds the training environment and the agent.
    pub fn new(recipe: Recipe, algo: Algo, seed: u64) -> Result<Trainer> {
        recipe.validate()?;
        let env_cfg = EnvConfig {
            seed,
            ..recipe.env.clone()
        };
        let mut env = Env::new(env_cfg)?;
        env.set_curriculum(recipe.curriculum.as_ref().map(|c| c.initial_state()));
        let mut agent_env = AgentEnv::new(env);
        let obs = agent_env.reset()?;
        let p = ObsPipeline::from_config(&recipe.env);
        let learner = Learner::new(&recipe, algo, seed, [p.channels(), p.size, p.size])?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_AGENT + 100)),
            recipe,
            algo,
            seed,
            env: agent_env,
            obs,
            learner,
            step: 0,
            episode_reward: 0.0,
            train_episodes: 0,
            rows: vec![],
        })
    }

    /// Curriculum state used by evaluation environments.
    pub fn eval_curriculum(&self) -> Option<CurriculumState> {
        match &self.recipe.curriculum {
            Some(c) if c.evaluate_eased => self.env.env().curriculum().cloned(),
            _ => None,
        }
    }

    /// Greedy evaluation on the run's own evaluation seed stream.
    pub fn evaluate_now(&self, episodes: usize) -> Result<Metrics> {
        self.evaluate_seeded(episodes, derive_seed(self.seed, STREAM_EVAL))
    }

    pub fn evaluate_seeded(&self, episodes: usize, seed: u64) -> Result<Metrics> {
        evaluate(
            &Greedy(&self.learner),
            &self.recipe.env,
            self.eval_curriculum(),
            episodes,
            seed,
        )
    }

    fn eval_due(&self) -> bool {
        self.step % self.recipe.eval_every == 0
            && self.rows.last().is_none_or(|r| r.step != self.step)
    }

    /// One environment step with learning.
    pub fn train_step(&mut self) -> Result<()> {
        let a = self.learner.act(&self.obs, &mut self.rng)?;
        let action = Action::from_index(a)
            .ok_or_else(|| HarnessError::Runtime(format!("invalid action {a}")))?;
        let (next, s) = self.env.step(action)?;
        self.episode_reward += s.reward;
        let obs = std::mem::replace(&mut self.obs, next);
        self.learner.observe(
            obs,
            a,
            s.reward,
            &self.obs,
            s.terminated,
            s.truncated,
            &mut self.rng,
        )?;
        self.step += 1;
        if s.terminated || s.truncated {
            if self.recipe.curriculum.as_ref().is_some_and(|c| c.progress) {
                self.env.env_mut().record_episode(s.info.success);
            }
            self.train_episodes += 1;
            self.episode_reward = 0.0;
            self.obs = self.env.reset()?;
        }
        Ok(())
    }

    /// Trains until `total` steps, evaluating at every multiple of
    /// `eval_every` starting from 0. After each
    /// evaluation `on_eval` may return false to stop early. With a run
    /// directory, metrics and a checkpoint are written at each evaluation.
    pub fn run(
        &mut self,
        total: u64,
        run_dir: Option<&RunDir>,
        mut on_eval: impl FnMut(&MetricsRow) -> bool,
    ) -> Result<()> {
        loop {
            if self.eval_due() {
                let m = self.evaluate_now(self.recipe.eval_episodes)?;
                let row = MetricsRow::new(self.step, &m);
                self.rows.push(row);
                if let Some(dir) = run_dir {
                    dir.write_metrics(&self.rows)?;
                    checkpoint::save(self, &dir.checkpoint_path(self.step))?;
                }
                if !on_eval(&row) {
                    return Ok(());
                }
            }
            if self.step >= total {
                return Ok(());
            }
            if let Err(e) = self.train_step() {
                if let Some(dir) = run_dir {
                    dir.write_diagnostic(self, &e)?;
                }
                return Err(e);
            }
        }
    }
}

/// On-disk layout of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| {
            HarnessError::Config(format!(
                "cannot create run directory {}: {e}",
                root.display()
            ))
        })?;
        let probe = root.join(".writable");
        std::fs::write(&probe, b"").map_err(|e| {
            HarnessError::Config(format!(
                "run directory {} is not writable: {e}",
                root.display()
            ))
        })?;
        std::fs::remove_file(probe)?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn write_config(&self, recipe: &Recipe, algo: Algo, seed: u64) -> Result<()> {
        let text = format!("# algo = {algo}\n# seed = {seed}\n{}", recipe.to_toml());
        std::fs::write(self.root.join("config.toml"), text)?;
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        std::fs::write(self.metrics_path(), report::emit_csv(rows))?;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("step_{step:010}.ckpt"))
    }

    /// Checkpoint with the highest step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<PathBuf> = None;
        for e in std::fs::read_dir(self.root.join("checkpoints"))? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "ckpt") && best.as_ref().is_none_or(|b| p > *b) {
                best = Some(p);
            }
        }
        Ok(best)
    }

    fn write_diagnostic(&self, t: &Trainer, e: &HarnessError) -> Result<()> {
        let text = format!(
            "error: {e}\nalgo: {}\nseed: {}\nstep: {}\ntrain_episodes: {}\nlast_metrics: {:?}\n",
            t.algo,
            t.seed,
            t.step,
            t.train_episodes,
            t.rows.last()
        );
        std::fs::write(self.root.join("diagnostic.txt"), text)?;
        Ok(())
    }
}

/// Trains `algo` on `recipe` into `out`, resuming from the newest checkpoint
/// there when `resume` is set. `on_eval` sees every new metrics row and may
/// return false to stop early. Exploration schedules are fixed when the run
/// is created, so a resumed run keeps its original horizon even if
/// `recipe.total_timesteps` moves the stopping point.
pub fn train(
    recipe: Recipe,
    algo: Algo,
    seed: u64,
    out: &Path,
    resume: bool,
    on_eval: impl FnMut(&MetricsRow) -> bool,
) -> Result<Trainer> {
    let dir = RunDir::create(out)?;
    let mut trainer = match (resume, dir.latest_checkpoint()?) {
        (true, Some(p)) => {
            let mut t = checkpoint::load(&p)?;
            t.recipe.total_timesteps = recipe.total_timesteps;
            t
        }
        _ => Trainer::new(recipe, algo, seed)?,
    };
    dir.write_config(&trainer.recipe, trainer.algo, trainer.seed)?;
    let total = trainer.recipe.total_timesteps;
    trainer.run(total, Some(&dir), on_eval)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_definitions() {
        let eps = [
            EpisodeResult {
                reward: -1.0,
                length: 10,
                success: false,
            },
            EpisodeResult {
                reward: 1.0,
                length: 30,
                success: true,
            },
        ];
        let m = Metrics::from_episodes(&eps);
        assert_eq!(m.mean_reward, 0.0);
        assert_eq!(m.mean_length, 20.0);
        assert_eq!(m.success_rate, 0.5);
        assert_eq!(m.std_reward, 1.0);
        assert!((m.efficiency * m.mean_length - m.mean_reward).abs() < 1e-9);
    }

    #[test]
    fn algo_names() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
        }
        assert!("sac".parse::<Algo>().is_err());
    }
}

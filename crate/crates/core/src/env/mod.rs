//! Top-down pushing environment: a velocity-controlled gripper pushes a goal
//! object onto a target among clutter.

pub mod geometry;
pub mod physics;
pub mod render;
pub mod reward;
pub mod spawn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::Vec2;
pub use physics::World;
pub use render::{Frame, Palette, Scene};
pub use reward::{ComplexParams, Distances, Outcome, RewardFunc, RewardTracker};
pub use spawn::{curriculum_update, CurriculumState};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layout: {0}")]
    Layout(String),
    #[error("reset failed: {0}")]
    ResetFailure(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub seed: u64,
    pub grayscale: bool,
    pub transpose: bool,
    pub noops: u32,
    pub randomise: bool,
    pub randomise_domain: bool,
    pub agent_history_len: usize,
    pub agent_act_repeat: u32,
    pub agent_speed: f64,
    pub agent_ang_speed: f64,
    pub clutter_items: usize,
    pub clutter_mass: f64,
    pub reward_func: RewardFunc,
    pub max_timesteps: u32,
    pub friction_coeff: f64,
    /// Side of the square agent observation (84; 28 for the debug profile).
    pub obs_size: usize,
    pub complex_r_min: f64,
    pub complex_r_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            seed: 0,
            grayscale: true,
            transpose: true,
            noops: 50,
            randomise: true,
            randomise_domain: false,
            agent_history_len: 4,
            agent_act_repeat: 4,
            agent_speed: 300.0,
            agent_ang_speed: 4.91,
            clutter_items: 10,
            clutter_mass: 1.0,
            reward_func: RewardFunc::Sparse,
            max_timesteps: 300,
            friction_coeff: 0.2,
            obs_size: 84,
            complex_r_min: -2.0,
            complex_r_max: 2.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.into()));
        if self.agent_act_repeat < 1 {
            return bad("agent_act_repeat must be >= 1");
        }
        if self.agent_history_len < 1 {
            return bad("agent_history_len must be >= 1");
        }
        if self.max_timesteps < 1 {
            return bad("max_timesteps must be >= 1");
        }
        if !(self.clutter_mass > 0.0) || !(self.friction_coeff >= 0.0) {
            return bad("clutter_mass must be > 0 and friction_coeff >= 0");
        }
        if self.obs_size == 0 || self.obs_size > render::FRAME_SIZE {
            return bad("obs_size must be in 1..=800");
        }
        if !(self.complex_r_min < self.complex_r_max) {
            return bad("complex_r_min must be < complex_r_max");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let c: EnvConfig = toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn complex_params(&self) -> ComplexParams {
        ComplexParams {
            r_min: self.complex_r_min,
            r_max: self.complex_r_max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    Backward = 1,
    TurnLeft = 2,
    TurnRight = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::Backward,
        Action::TurnLeft,
        Action::TurnRight,
    ];

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub success: bool,
    pub distances: Distances,
    pub episode_timestep: u32,
}

/// Result of a headless step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Info,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Frame,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Info,
}

/// Receives the world after reset spawning (`index` 0) and after each noop
/// frame (`index` 1..=noops).
pub trait FrameSink {
    fn frame(&mut self, index: u32, world: &World, palette: &Palette);
}

impl FrameSink for () {
    fn frame(&mut self, _: u32, _: &World, _: &Palette) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Env {
    config: EnvConfig,
    rng: ChaCha8Rng,
    world: World,
    palette: Palette,
    curriculum: Option<CurriculumState>,
    timestep: u32,
    tracker: RewardTracker,
    active: bool,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let layout = spawn::parse_layout(spawn::FIXED_LAYOUT)?;
        let world =
            spawn::world_from_layout(&layout, 0, config.clutter_mass, config.friction_coeff)?;
        let d = distances(&world);
        Ok(Env {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            world,
            palette: Palette::CANONICAL,
            curriculum: None,
            timestep: 0,
            tracker: RewardTracker::new(d),
            active: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    pub fn tracker(&self) -> &RewardTracker {
        &self.tracker
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn curriculum(&self) -> Option<&CurriculumState> {
        self.curriculum.as_ref()
    }

    /// Enables (or replaces) curriculum spawning for subsequent resets.
    pub fn set_curriculum(&mut self, c: Option<CurriculumState>) {
        self.curriculum = c;
    }

    /// Applies the curriculum rule for a finished episode.
    pub fn record_episode(&mut self, success: bool) {
        if let Some(c) = &self.curriculum {
            self.curriculum = Some(curriculum_update(c, success, self.config.clutter_items));
        }
    }

    pub fn reset(&mut self) -> Result<StepResult, EnvError> {
        let info = self.reset_headless(&mut ())?;
        Ok(StepResult {
            observation: self.render(),
            reward: 0.0,
            terminated: false,
            truncated: false,
            info,
        })
    }

    /// Spawns a new episode and runs the noop frames without rendering.
    pub fn reset_headless(&mut self, sink: &mut dyn FrameSink) -> Result<Info, EnvError> {
        let c = &self.config;
        self.palette = Palette::CANONICAL;
        let mut friction = c.friction_coeff;
        let max_clutter = self.curriculum.as_ref().map_or(c.clutter_items, |cur| {
            cur.clutter_count_current.min(c.clutter_items)
        });
        let mut sides = vec![spawn::CLUTTER_SIDE; max_clutter];
        if c.randomise_domain {
            let d = spawn::randomize_domain(max_clutter, &mut self.rng);
            self.palette = d.palette;
            friction = d.friction;
            sides = d.clutter_sides;
        }
        self.world = if c.randomise {
            let fraction = self
                .curriculum
                .as_ref()
                .map_or(1.0, |cur| cur.spawn_radius_fraction);
            spawn::random_world(fraction, &sides, c.clutter_mass, friction, &mut self.rng)?
        } else {
            let layout = spawn::parse_layout(spawn::FIXED_LAYOUT)?;
            let mut w = spawn::world_from_layout(&layout, max_clutter, c.clutter_mass, friction)?;
            if c.randomise_domain {
                for (b, s) in w.bodies[1..].iter_mut().zip(&sides) {
                    b.half = Vec2::new(s / 2.0, s / 2.0);
                }
                w.bodies.truncate(1 + sides.len());
            }
            w
        };
        sink.frame(0, &self.world, &self.palette);
        for i in 1..=self.config.noops {
            self.world.gripper.vel = Vec2::ZERO;
            self.world.gripper.ang_vel = 0.0;
            self.world.substep(physics::DT);
            sink.frame(i, &self.world, &self.palette);
        }
        self.timestep = 0;
        self.tracker = RewardTracker::new(distances(&self.world));
        self.active = true;
        Ok(Info {
            success: false,
            distances: self.tracker.initial,
            episode_timestep: 0,
        })
    }

    /// One agent decision without rendering.
    pub fn advance(&mut self, action: Action) -> Result<StepInfo, EnvError> {
        if !self.active {
            return Err(EnvError::Contract(
                "step called without an active episode".into(),
            ));
        }
        let before_gripper = self.world.gripper.pos;
        let before_goal = self.world.goal().pos;
        let heading = self.world.gripper.heading();
        let (v, w) = match action {
            Action::Forward => (heading * self.config.agent_speed, 0.0),
            Action::Backward => (heading * -self.config.agent_speed, 0.0),
            Action::TurnLeft => (Vec2::ZERO, -self.config.agent_ang_speed),
            Action::TurnRight => (Vec2::ZERO, self.config.agent_ang_speed),
        };
        for _ in 0..self.config.agent_act_repeat {
            self.world.gripper.vel = v;
            self.world.gripper.ang_vel = w;
            self.world.substep(physics::DT);
        }
        self.world.gripper.vel = Vec2::ZERO;
        self.world.gripper.ang_vel = 0.0;
        self.timestep += 1;

        let success = self.world.goal_on_target();
        let failure = !success && self.world.out_of_bounds();
        let outcome = if success {
            Outcome::Success
        } else if failure {
            Outcome::Failure
        } else {
            Outcome::Ongoing
        };
        let d = distances(&self.world);
        let stationary = self.world.gripper.pos.distance(before_gripper) < STATIONARY_EPS
            && self.world.goal().pos.distance(before_goal) < STATIONARY_EPS;
        let reward = self.tracker.step(
            self.config.reward_func,
            outcome,
            d,
            stationary,
            self.config.complex_params(),
        );
        let terminated = success || failure;
        let truncated = !terminated && self.timestep >= self.config.max_timesteps;
        if terminated || truncated {
            self.active = false;
        }
        Ok(StepInfo {
            reward,
            terminated,
            truncated,
            info: Info {
                success,
                distances: d,
                episode_timestep: self.timestep,
            },
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let s = self.advance(action)?;
        Ok(StepResult {
            observation: self.render(),
            reward: s.reward,
            terminated: s.terminated,
            truncated: s.truncated,
            info: s.info,
        })
    }

    pub fn render(&self) -> Frame {
        render::render(&self.world, &self.palette)
    }

    pub fn scene(&self) -> Scene {
        Scene::new(&self.world, &self.palette)
    }

    /// Test and tooling hook: replaces the world of the active episode and
    /// restarts reward bookkeeping from it.
    pub fn set_world(&mut self, world: World) {
        self.world = world;
        self.tracker = RewardTracker::new(distances(&self.world));
    }
}

/// Gripper centre displacement (px) below which a step counts as stationary.
pub const STATIONARY_EPS: f64 = 0.5;

pub fn distances(world: &World) -> Distances {
    let goal = world.goal().pos;
    Distances {
        d_gt: world.gripper.jaw().distance(goal),
        d_gtt: goal.distance(world.target.pos),
    }
}

use proptest::prelude::*;
use pushgym::env::physics::DT;
use pushgym::env::spawn::{randomize_domain, FRICTION_RANGE, MAX_SPAWN_RADIUS};
use pushgym::env::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed(clutter: usize, reward: RewardFunc) -> EnvConfig {
    EnvConfig {
        seed: 756765,
        randomise: false,
        clutter_items: clutter,
        reward_func: reward,
        ..EnvConfig::default()
    }
}

#[test]
fn defaults_match_parameter_table() {
    let c = EnvConfig::default();
    assert_eq!(
        (
            c.noops,
            c.agent_history_len,
            c.agent_act_repeat,
            c.clutter_items,
            c.max_timesteps
        ),
        (50, 4, 4, 10, 300)
    );
    assert_eq!(
        (
            c.agent_speed,
            c.agent_ang_speed,
            c.clutter_mass,
            c.friction_coeff
        ),
        (300.0, 4.91, 1.0, 0.2)
    );
    assert!(c.grayscale && c.transpose && c.randomise && !c.randomise_domain);
    let back = EnvConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert!(EnvConfig::from_toml("agent_act_repeat = 0").is_err());
    assert!(EnvConfig::from_toml("no_such_field = 1").is_err());
    let parsed = EnvConfig::from_toml("seed = 5\nreward_func = \"step_penalty\"\n").unwrap();
    assert_eq!(parsed.reward_func, RewardFunc::StepPenalty);
}

#[test]
fn fixed_reset_is_deterministic() {
    let mut a = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    let mut b = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    let fa = a.reset().unwrap().observation;
    let fb = b.reset().unwrap().observation;
    assert_eq!(fa.data, fb.data);
    assert_eq!(fa.data.len(), 3 * 800 * 800);
}

struct Count(u32);
impl FrameSink for Count {
    fn frame(&mut self, index: u32, _: &World, _: &Palette) {
        assert_eq!(index, self.0);
        self.0 += 1;
    }
}

#[test]
fn noops_advance_one_second() {
    let mut env = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    let mut c = Count(0);
    env.reset_headless(&mut c).unwrap();
    // spawn frame plus 50 physics frames at 50 FPS
    assert_eq!(c.0, 51);
    assert_eq!((c.0 - 1) as f64 * DT, 1.0);
}

#[test]
fn curriculum_spawn_radius() {
    let mut env = Env::new(EnvConfig {
        clutter_items: 0,
        ..EnvConfig::default()
    })
    .unwrap();
    env.set_curriculum(Some(CurriculumState::new(0.1, 0)));
    for _ in 0..1000 {
        env.reset_headless(&mut ()).unwrap();
        let w = env.world();
        assert!(w.goal().pos.distance(w.target.pos) <= 0.1 * MAX_SPAWN_RADIUS + 1e-9);
    }
}

#[test]
fn forward_moves_24_px() {
    let mut env = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    env.reset().unwrap();
    let before = env.world().gripper.pos;
    let h = env.world().gripper.heading();
    env.advance(Action::Forward).unwrap();
    let moved = env.world().gripper.pos - before;
    assert!((moved.dot(h) - 24.0).abs() < 1e-9);
    assert!(moved.cross(h).abs() < 1e-9);
}

#[test]
fn pushing_goal_onto_target_succeeds() {
    let mut env = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    env.reset().unwrap();
    for _ in 0..100 {
        let s = env.advance(Action::Forward).unwrap();
        if s.terminated || s.truncated {
            assert!(s.terminated && s.info.success);
            assert_eq!(s.reward, 1.0);
            assert!(env.advance(Action::Forward).is_err());
            return;
        }
    }
    panic!("goal never reached the target");
}

#[test]
fn rotating_in_place_truncates() {
    let mut env = Env::new(fixed(1, RewardFunc::Sparse)).unwrap();
    env.reset().unwrap();
    for t in 1..=300 {
        let s = env.advance(Action::TurnLeft).unwrap();
        assert!(!s.terminated);
        assert_eq!(s.truncated, t == 300);
    }
    assert!(env.advance(Action::TurnLeft).is_err());
}

#[test]
fn turn_direction() {
    let mut env = Env::new(fixed(0, RewardFunc::Sparse)).unwrap();
    env.reset().unwrap();
    let a0 = env.world().gripper.angle;
    env.advance(Action::TurnLeft).unwrap();
    assert!((env.world().gripper.angle - (a0 - 4.91 * 0.08)).abs() < 1e-12);
    env.advance(Action::TurnRight).unwrap();
    assert!((env.world().gripper.angle - a0).abs() < 1e-12);
}

#[test]
fn domain_randomization() {
    let mut env = Env::new(fixed(3, RewardFunc::Sparse)).unwrap();
    env.reset().unwrap();
    assert_eq!(*env.palette(), Palette::CANONICAL);
    assert_eq!(Palette::CANONICAL.clutter, [30, 60, 230]);

    let cfg = EnvConfig {
        randomise_domain: true,
        ..fixed(3, RewardFunc::Sparse)
    };
    let mut a = Env::new(cfg.clone()).unwrap();
    let mut b = Env::new(cfg).unwrap();
    a.reset().unwrap();
    b.reset().unwrap();
    assert_eq!(a.palette(), b.palette());
    assert_eq!(a.world(), b.world());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let d = randomize_domain(5, &mut rng);
        assert!(d.friction >= FRICTION_RANGE.0 && d.friction <= FRICTION_RANGE.1);
        assert!(d.clutter_count <= 5);
    }
}

fn run_script(cfg: &EnvConfig, script: &[usize], steps: usize) -> Vec<(u64, bool, bool, Vec<u8>)> {
    let mut env = Env::new(cfg.clone()).unwrap();
    env.reset().unwrap();
    let mut out = vec![];
    for t in 0..steps {
        let s = env
            .step(Action::from_index(script[t % script.len()]).unwrap())
            .unwrap();
        out.push((
            s.reward.to_bits(),
            s.terminated,
            s.truncated,
            s.observation.data,
        ));
        if s.terminated || s.truncated {
            break;
        }
    }
    out
}

#[test]
fn trajectories_are_bit_identical() {
    let cfg = fixed(3, RewardFunc::Shaped1);
    let script = [0, 0, 2, 0, 3, 1, 0];
    assert_eq!(run_script(&cfg, &script, 40), run_script(&cfg, &script, 40));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episode_invariants(seed in any::<u64>(), actions in prop::collection::vec(0usize..4, 1..64),
                          reward in prop::sample::select(vec![RewardFunc::Shaped1, RewardFunc::Budget, RewardFunc::Complex])) {
        let cfg = EnvConfig { seed, clutter_items: 3, reward_func: reward, ..EnvConfig::default() };
        let mut env = Env::new(cfg).unwrap();
        env.reset_headless(&mut ()).unwrap();
        let mut best = env.tracker().best;
        let mut shaping = 0.0;
        let mut ended = false;
        for t in 0..300 {
            let s = env.advance(Action::from_index(actions[t % actions.len()]).unwrap()).unwrap();
            prop_assert!(!(s.terminated && s.truncated));
            prop_assert!(!s.info.success || s.terminated);
            let nb = env.tracker().best;
            prop_assert!(nb.d_gt <= best.d_gt && nb.d_gtt <= best.d_gtt);
            best = nb;
            if reward == RewardFunc::Budget && !s.terminated {
                shaping += s.reward;
            }
            if reward == RewardFunc::Complex && !s.terminated {
                prop_assert!((-1.0..=1.0).contains(&s.reward));
            }
            if s.terminated || s.truncated {
                ended = true;
                break;
            }
        }
        prop_assert!(ended);
        prop_assert!(shaping <= 100.0 + 1e-9);
    }
}

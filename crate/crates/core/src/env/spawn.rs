//! Initial configurations: the checked-in fixed layout, random spawns,
//! curriculum easing and domain randomization.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Vec2;
use super::physics::{Body, BodyKind, Gripper, Target, World, WORLD_SIZE};
use super::render::Palette;
use super::EnvError;

pub const GOAL_SIDE: f64 = 36.0;
pub const TARGET_RADIUS: f64 = 30.0;
pub const CLUTTER_SIDE: f64 = 40.0;
pub const CLUTTER_SIDE_RANGE: (f64, f64) = (30.0, 50.0);
pub const FRICTION_RANGE: (f64, f64) = (0.1, 0.4);
/// Largest goal-to-target spawn distance (fraction 1.0).
pub const MAX_SPAWN_RADIUS: f64 = 400.0;
pub const MIN_GOAL_TARGET: f64 = 35.0;
pub const GRIPPER_GOAL_MIN: f64 = 80.0;
pub const GRIPPER_GOAL_SPREAD: f64 = 320.0;
const MARGIN: f64 = 60.0;
const MAX_ATTEMPTS: usize = 100;

pub const FIXED_LAYOUT: &str = include_str!("../../layouts/fixed.layout");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutKind {
    Gripper,
    Goal,
    Target,
    Clutter,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutEntry {
    pub kind: LayoutKind,
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub size: f64,
}

pub fn parse_layout(text: &str) -> Result<Vec<LayoutEntry>, EnvError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| EnvError::Layout(format!("line {}: {msg}", i + 1));
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 5 {
            return Err(bad("expected `kind x y angle size`"));
        }
        let kind = match t[0] {
            "gripper" => LayoutKind::Gripper,
            "goal" => LayoutKind::Goal,
            "target" => LayoutKind::Target,
            "clutter" => LayoutKind::Clutter,
            other => return Err(bad(&format!("unknown kind {other:?}"))),
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(&format!("bad number {s:?}")))
        };
        out.push(LayoutEntry {
            kind,
            x: num(t[1])?,
            y: num(t[2])?,
            angle: num(t[3])?,
            size: num(t[4])?,
        });
    }
    for k in [LayoutKind::Gripper, LayoutKind::Goal, LayoutKind::Target] {
        if out.iter().filter(|e| e.kind == k).count() != 1 {
            return Err(EnvError::Layout(format!("layout needs exactly one {k:?}")));
        }
    }
    Ok(out)
}

/// Builds a world from a layout, keeping the first `clutter_items` clutter
/// entries.
pub fn world_from_layout(
    layout: &[LayoutEntry],
    clutter_items: usize,
    mass: f64,
    friction: f64,
) -> Result<World, EnvError> {
    let find = |k| layout.iter().find(|e| e.kind == k).expect("validated");
    let g = find(LayoutKind::Gripper);
    let goal = find(LayoutKind::Goal);
    let t = find(LayoutKind::Target);
    let clutter: Vec<&LayoutEntry> = layout
        .iter()
        .filter(|e| e.kind == LayoutKind::Clutter)
        .collect();
    if clutter.len() < clutter_items {
        return Err(EnvError::Layout(format!(
            "layout has {} clutter items, {clutter_items} requested",
            clutter.len()
        )));
    }
    let mut bodies = vec![Body::square(
        BodyKind::Goal,
        Vec2::new(goal.x, goal.y),
        goal.angle,
        goal.size,
        mass,
    )];
    bodies.extend(clutter[..clutter_items].iter().map(|c| {
        Body::square(
            BodyKind::Clutter,
            Vec2::new(c.x, c.y),
            c.angle,
            c.size,
            mass,
        )
    }));
    Ok(World {
        gripper: Gripper::new(Vec2::new(g.x, g.y), g.angle),
        bodies,
        target: Target {
            pos: Vec2::new(t.x, t.y),
            radius: t.size,
        },
        friction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub spawn_radius_fraction: f64,
    pub clutter_count_current: usize,
    pub successes: u64,
}

pub const CURRICULUM_FRACTION_STEP: f64 = 0.02;
pub const CURRICULUM_CLUTTER_EVERY: u64 = 25;

impl CurriculumState {
    pub fn new(spawn_radius_fraction: f64, clutter_count_current: usize) -> Self {
        CurriculumState {
            spawn_radius_fraction: spawn_radius_fraction.clamp(f64::MIN_POSITIVE, 1.0),
            clutter_count_current,
            successes: 0,
        }
    }
}

/// Widens the spawn radius after each success and adds a clutter item every
/// 25 successes, up to `max_clutter`. Failures leave the state unchanged.
pub fn curriculum_update(
    state: &CurriculumState,
    success: bool,
    max_clutter: usize,
) -> CurriculumState {
    if !success {
        return state.clone();
    }
    let successes = state.successes + 1;
    let mut clutter = state.clutter_count_current;
    if successes % CURRICULUM_CLUTTER_EVERY == 0 && clutter < max_clutter {
        clutter += 1;
    }
    CurriculumState {
        spawn_radius_fraction: (state.spawn_radius_fraction + CURRICULUM_FRACTION_STEP).min(1.0),
        clutter_count_current: clutter,
        successes,
    }
}

/// Per-episode domain parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub palette: Palette,
    pub friction: f64,
    pub clutter_count: usize,
    pub clutter_sides: Vec<f64>,
}

/// Palette, friction in [0.1, 0.4], clutter count in `0..=max_clutter` and
/// clutter sides in [30, 50].
pub fn randomize_domain<R: Rng>(max_clutter: usize, rng: &mut R) -> DomainSample {
    let palette = Palette::random(rng);
    let friction = rng.gen_range(FRICTION_RANGE.0..=FRICTION_RANGE.1);
    let clutter_count = rng.gen_range(0..=max_clutter);
    let clutter_sides = (0..clutter_count)
        .map(|_| rng.gen_range(CLUTTER_SIDE_RANGE.0..=CLUTTER_SIDE_RANGE.1))
        .collect();
    DomainSample {
        palette,
        friction,
        clutter_count,
        clutter_sides,
    }
}

fn inside(p: Vec2, margin: f64) -> bool {
    p.x >= margin && p.y >= margin && p.x <= WORLD_SIZE - margin && p.y <= WORLD_SIZE - margin
}

/// Random spawn. With `fraction < 1` the goal starts within
/// `max(35, fraction * 400)` px of the target and the gripper starts behind
/// the goal (seen from the target), facing it, with angular jitter that grows
/// with `fraction`; at 1.0 every pose is uniform.
pub fn random_world<R: Rng>(
    fraction: f64,
    clutter_sides: &[f64],
    mass: f64,
    friction: f64,
    rng: &mut R,
) -> Result<World, EnvError> {
    let spread = PI * fraction;
    let max_gt = (fraction * MAX_SPAWN_RADIUS).max(MIN_GOAL_TARGET);
    let mut core = None;
    for _ in 0..MAX_ATTEMPTS {
        let target = Vec2::new(
            rng.gen_range(MARGIN..WORLD_SIZE - MARGIN),
            rng.gen_range(MARGIN..WORLD_SIZE - MARGIN),
        );
        let d = if max_gt > MIN_GOAL_TARGET {
            rng.gen_range(MIN_GOAL_TARGET..=max_gt)
        } else {
            MIN_GOAL_TARGET
        };
        let goal = target + Vec2::from_angle(rng.gen_range(0.0..2.0 * PI)) * d;
        let behind = (goal - target).y.atan2((goal - target).x);
        let gd =
            rng.gen_range(GRIPPER_GOAL_MIN..=GRIPPER_GOAL_MIN + fraction * GRIPPER_GOAL_SPREAD);
        let gripper = goal + Vec2::from_angle(behind + rng.gen_range(-spread..=spread)) * gd;
        let facing = (goal - gripper).y.atan2((goal - gripper).x);
        let heading = facing + rng.gen_range(-spread..=spread);
        let goal_angle = rng.gen_range(0.0..PI / 2.0);
        if inside(goal, MARGIN) && inside(gripper, MARGIN) {
            core = Some((target, goal, goal_angle, gripper, heading));
            break;
        }
    }
    let Some((target, goal, goal_angle, gripper, heading)) = core else {
        return Err(EnvError::ResetFailure("goal/gripper placement".into()));
    };

    let mut occupied: Vec<(Vec2, f64)> = vec![(goal, GOAL_SIDE * 0.75), (gripper, 50.0)];
    let mut bodies = vec![Body::square(
        BodyKind::Goal,
        goal,
        goal_angle,
        GOAL_SIDE,
        mass,
    )];
    for &side in clutter_sides {
        let r = side * std::f64::consts::FRAC_1_SQRT_2;
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let p = Vec2::new(
                rng.gen_range(MARGIN..WORLD_SIZE - MARGIN),
                rng.gen_range(MARGIN..WORLD_SIZE - MARGIN),
            );
            let angle = rng.gen_range(0.0..PI / 2.0);
            let clear = occupied.iter().all(|&(q, rq)| p.distance(q) > r + rq + 5.0)
                && p.distance(target) > r + TARGET_RADIUS;
            if clear {
                occupied.push((p, r));
                bodies.push(Body::square(BodyKind::Clutter, p, angle, side, mass));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(EnvError::ResetFailure("clutter placement".into()));
        }
    }
    Ok(World {
        gripper: Gripper::new(gripper, heading),
        bodies,
        target: Target {
            pos: target,
            radius: TARGET_RADIUS,
        },
        friction,
    })
}

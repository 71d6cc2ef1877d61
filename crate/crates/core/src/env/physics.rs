//! Small impulse/projection stepper for boxes pushed by a kinematic gripper.
//!
//! Contacts are inelastic with Coulomb friction along the contact tangent and
//! do not induce rotation. Ground friction is exponential velocity damping.

use serde::{Deserialize, Serialize};

use super::geometry::{sat_obb, Obb, Vec2};

pub const WORLD_SIZE: f64 = 800.0;
pub const FPS: f64 = 50.0;
pub const DT: f64 = 1.0 / FPS;
/// Coulomb coefficient between touching bodies.
pub const CONTACT_FRICTION: f64 = 0.5;
const SOLVER_ITERATIONS: usize = 4;

/// Gripper parts in the gripper frame (x along the heading): base, then the
/// two prongs. Base 20 x 60, prongs 30 x 10, opening 40 px.
pub const GRIPPER_PARTS: [(Vec2, Vec2); 3] = [
    (Vec2::new(0.0, 0.0), Vec2::new(10.0, 30.0)),
    (Vec2::new(25.0, 25.0), Vec2::new(15.0, 5.0)),
    (Vec2::new(25.0, -25.0), Vec2::new(15.0, 5.0)),
];

/// Point between the prongs, in the gripper frame.
pub const JAW_POINT: Vec2 = Vec2::new(25.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyKind {
    Goal,
    Clutter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub kind: BodyKind,
    pub pos: Vec2,
    pub angle: f64,
    pub vel: Vec2,
    pub ang_vel: f64,
    pub half: Vec2,
    pub inv_mass: f64,
}

impl Body {
    pub fn square(kind: BodyKind, pos: Vec2, angle: f64, side: f64, mass: f64) -> Self {
        Body {
            kind,
            pos,
            angle,
            vel: Vec2::ZERO,
            ang_vel: 0.0,
            half: Vec2::new(side / 2.0, side / 2.0),
            inv_mass: if mass > 0.0 { 1.0 / mass } else { 0.0 },
        }
    }

    pub fn obb(&self) -> Obb {
        Obb {
            center: self.pos,
            angle: self.angle,
            half: self.half,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: Vec2,
    pub angle: f64,
    pub vel: Vec2,
    pub ang_vel: f64,
}

impl Gripper {
    pub fn new(pos: Vec2, angle: f64) -> Self {
        Gripper {
            pos,
            angle,
            vel: Vec2::ZERO,
            ang_vel: 0.0,
        }
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.angle)
    }

    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.pos + local.rotate(self.angle)
    }

    pub fn parts(&self) -> [Obb; 3] {
        GRIPPER_PARTS.map(|(c, half)| Obb {
            center: self.to_world(c),
            angle: self.angle,
            half,
        })
    }

    pub fn jaw(&self) -> Vec2 {
        self.to_world(JAW_POINT)
    }

    /// Velocity of the (rigid) gripper at world point `p`.
    pub fn point_velocity(&self, p: Vec2) -> Vec2 {
        self.vel + (p - self.pos).perp() * self.ang_vel
    }

    pub fn bounding_radius(&self) -> f64 {
        // farthest prong corner
        Vec2::new(40.0, 30.0).length()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub pos: Vec2,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub gripper: Gripper,
    /// Index 0 is the goal object; the rest are clutter.
    pub bodies: Vec<Body>,
    pub target: Target,
    pub friction: f64,
}

impl World {
    pub fn goal(&self) -> &Body {
        &self.bodies[0]
    }

    pub fn clutter(&self) -> &[Body] {
        &self.bodies[1..]
    }

    /// True when any body center (gripper included) lies outside the world.
    pub fn out_of_bounds(&self) -> bool {
        let outside = |p: Vec2| p.x < 0.0 || p.y < 0.0 || p.x > WORLD_SIZE || p.y > WORLD_SIZE;
        outside(self.gripper.pos) || self.bodies.iter().any(|b| outside(b.pos))
    }

    pub fn goal_on_target(&self) -> bool {
        self.goal().pos.distance(self.target.pos) < self.target.radius
    }

    /// Advances the world by `dt` seconds.
    pub fn substep(&mut self, dt: f64) {
        let g = &mut self.gripper;
        g.pos += g.vel * dt;
        g.angle += g.ang_vel * dt;

        let damping = (-self.friction * dt).exp();
        for b in &mut self.bodies {
            b.pos += b.vel * dt;
            b.angle += b.ang_vel * dt;
            b.vel = b.vel * damping;
            b.ang_vel *= damping;
        }

        for _ in 0..SOLVER_ITERATIONS {
            self.resolve_gripper_contacts();
            self.resolve_body_contacts();
        }
    }

    fn resolve_gripper_contacts(&mut self) {
        let parts = self.gripper.parts();
        let reach = self.gripper.bounding_radius();
        for b in &mut self.bodies {
            if b.pos.distance(self.gripper.pos) > reach + b.half.length() {
                continue;
            }
            for part in &parts {
                let Some((n, depth)) = sat_obb(part, &b.obb()) else {
                    continue;
                };
                b.pos += n * depth;
                let rel = b.vel - self.gripper.point_velocity(b.pos);
                b.vel = b.vel - contact_impulse(rel, n);
            }
        }
    }

    fn resolve_body_contacts(&mut self) {
        let n_bodies = self.bodies.len();
        for i in 0..n_bodies {
            for j in i + 1..n_bodies {
                let (lo, hi) = self.bodies.split_at_mut(j);
                let (a, b) = (&mut lo[i], &mut hi[0]);
                let total = a.inv_mass + b.inv_mass;
                if total == 0.0 {
                    continue;
                }
                let Some((n, depth)) = sat_obb(&a.obb(), &b.obb()) else {
                    continue;
                };
                a.pos -= n * (depth * a.inv_mass / total);
                b.pos += n * (depth * b.inv_mass / total);
                let dv = contact_impulse(b.vel - a.vel, n);
                // dv is the change that would stop b relative to an immovable a
                a.vel += dv * (a.inv_mass / total);
                b.vel -= dv * (b.inv_mass / total);
            }
        }
    }
}

/// Velocity change removing the approaching normal component of `rel`
/// (velocity of the second body relative to the first) plus the Coulomb
/// friction response. Zero when the bodies are separating.
fn contact_impulse(rel: Vec2, n: Vec2) -> Vec2 {
    let vn = rel.dot(n);
    if vn >= 0.0 {
        return Vec2::ZERO;
    }
    let t = rel - n * vn;
    let tl = t.length();
    let friction = if tl > 0.0 {
        t * (tl.min(CONTACT_FRICTION * -vn) / tl)
    } else {
        Vec2::ZERO
    };
    n * vn + friction
}

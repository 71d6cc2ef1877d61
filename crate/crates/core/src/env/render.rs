//! Rasterizer without anti-aliasing: a pixel takes the colour of the topmost
//! shape containing its center, or the background.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Obb, Vec2};
use super::physics::{BodyKind, World};

pub const FRAME_SIZE: usize = 800;

pub type Rgb = [u8; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub background: Rgb,
    pub gripper: Rgb,
    pub goal: Rgb,
    pub target: Rgb,
    pub clutter: Rgb,
}

impl Palette {
    pub const CANONICAL: Palette = Palette {
        background: [240, 240, 240],
        gripper: [60, 60, 60],
        goal: [0, 190, 0],
        target: [250, 220, 0],
        clutter: [30, 60, 230],
    };

    /// Five mutually distinct random colours.
    pub fn random<R: Rng>(rng: &mut R) -> Palette {
        let mut picked: Vec<Rgb> = Vec::with_capacity(5);
        while picked.len() < 5 {
            let c: Rgb = [rng.gen(), rng.gen(), rng.gen()];
            let distinct = picked.iter().all(|p| {
                p.iter()
                    .zip(&c)
                    .map(|(a, b)| (*a as i32 - *b as i32).abs())
                    .sum::<i32>()
                    >= 60
            });
            if distinct {
                picked.push(c);
            }
        }
        Palette {
            background: picked[0],
            gripper: picked[1],
            goal: picked[2],
            target: picked[3],
            clutter: picked[4],
        }
    }
}

/// Planar RGB image, `3 x height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let plane = width * height;
        let mut data = vec![0u8; 3 * plane];
        for (ch, v) in c.iter().enumerate() {
            data[ch * plane..(ch + 1) * plane].fill(*v);
        }
        Frame {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = c[0];
        self.data[plane + i] = c[1];
        self.data[2 * plane + i] = c[2];
    }

    /// Binary PPM (P6).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                buf.extend_from_slice(&self.get(x, y));
            }
        }
        w.write_all(&buf)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box {
        center: Vec2,
        u: Vec2,
        v: Vec2,
        half: Vec2,
    },
    Disc {
        center: Vec2,
        radius: f64,
    },
}

impl Shape {
    fn from_obb(o: &Obb) -> Shape {
        let [u, v] = o.axes();
        Shape::Box {
            center: o.center,
            u,
            v,
            half: o.half,
        }
    }

    #[inline]
    fn contains(&self, p: Vec2) -> bool {
        match *self {
            Shape::Box { center, u, v, half } => {
                let d = p - center;
                d.dot(u).abs() < half.x && d.dot(v).abs() < half.y
            }
            Shape::Disc { center, radius } => (p - center).dot(p - center) < radius * radius,
        }
    }

    /// Pixel index bounds `[x0, x1) x [y0, y1)` that can contain the shape.
    fn pixel_bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let (c, r) = match *self {
            Shape::Box { center, u, v, half } => {
                let rx = half.x * u.x.abs() + half.y * v.x.abs();
                let ry = half.x * u.y.abs() + half.y * v.y.abs();
                (center, Vec2::new(rx, ry))
            }
            Shape::Disc { center, radius } => (center, Vec2::new(radius, radius)),
        };
        let clamp = |f: f64| f.max(0.0).min(size as f64) as usize;
        (
            clamp((c.x - r.x - 1.0).floor()),
            clamp((c.x + r.x + 1.0).ceil()),
            clamp((c.y - r.y - 1.0).floor()),
            clamp((c.y + r.y + 1.0).ceil()),
        )
    }
}

/// A world prepared for rasterization: shapes in draw order with cached axes.
pub struct Scene {
    background: Rgb,
    shapes: Vec<(Shape, Rgb)>,
}

impl Scene {
    pub fn new(world: &World, palette: &Palette) -> Scene {
        let mut shapes = Vec::with_capacity(world.bodies.len() + 4);
        shapes.push((
            Shape::Disc {
                center: world.target.pos,
                radius: world.target.radius,
            },
            palette.target,
        ));
        for b in world.bodies.iter().filter(|b| b.kind == BodyKind::Clutter) {
            shapes.push((Shape::from_obb(&b.obb()), palette.clutter));
        }
        for b in world.bodies.iter().filter(|b| b.kind == BodyKind::Goal) {
            shapes.push((Shape::from_obb(&b.obb()), palette.goal));
        }
        for part in world.gripper.parts() {
            shapes.push((Shape::from_obb(&part), palette.gripper));
        }
        Scene {
            background: palette.background,
            shapes,
        }
    }

    /// Colour of world pixel `(x, y)`, sampled at its center.
    #[inline]
    pub fn shade(&self, x: usize, y: usize) -> Rgb {
        let p = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
        for (s, c) in self.shapes.iter().rev() {
            if s.contains(p) {
                return *c;
            }
        }
        self.background
    }

    pub fn background(&self) -> Rgb {
        self.background
    }

    /// Full 800 x 800 frame, painted back to front.
    pub fn render(&self) -> Frame {
        let mut f = Frame::filled(FRAME_SIZE, FRAME_SIZE, self.background);
        for (s, c) in &self.shapes {
            let (x0, x1, y0, y1) = s.pixel_bounds(FRAME_SIZE);
            for y in y0..y1 {
                for x in x0..x1 {
                    if s.contains(Vec2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                        f.set(x, y, *c);
                    }
                }
            }
        }
        f
    }
}

pub fn render(world: &World, palette: &Palette) -> Frame {
    Scene::new(world, palette).render()
}

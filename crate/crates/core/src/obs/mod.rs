//! Raw frame to agent observation: agent-centric view, nearest-neighbour
//! downsampling, luminance, frame stacking and scaling to [0, 1].
//!
//! [`ObsPipeline::process`] runs the steps on a rendered frame.
//! [`ObsPipeline::sample`] computes the same bytes directly from a scene,
//! touching only the pixels that survive downsampling.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use thiserror::Error;

use crate::env::render::{Frame, Rgb, Scene, FRAME_SIZE};
use crate::env::{Action, Env, EnvError, FrameSink, Palette, StepInfo, World};

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn of(world: &World) -> Pose {
        Pose {
            x: world.gripper.pos.x,
            y: world.gripper.pos.y,
            heading: world.gripper.angle,
        }
    }
}

/// Maps output pixel `(u, v)` of the agent-centric view back to the world
/// pixel it shows. The view is centred on the gripper with the heading up.
#[inline]
pub fn source_pixel(u: usize, v: usize, pose: &Pose, sc: (f64, f64)) -> Option<(usize, usize)> {
    let half = FRAME_SIZE as f64 / 2.0;
    let dx = u as f64 + 0.5 - half;
    let dy = v as f64 + 0.5 - half;
    let (s, c) = sc;
    // right = (-sin, cos), up = heading = (cos, sin)
    let wx = pose.x - dx * s - dy * c;
    let wy = pose.y + dx * c - dy * s;
    if wx >= 0.0 && wy >= 0.0 && wx < FRAME_SIZE as f64 && wy < FRAME_SIZE as f64 {
        Some((wx as usize, wy as usize))
    } else {
        None
    }
}

pub fn agent_centric(frame: &Frame, pose: &Pose, background: Rgb) -> Result<Frame, ObsError> {
    check_full(frame)?;
    let sc = pose.heading.sin_cos();
    let mut out = Frame::filled(FRAME_SIZE, FRAME_SIZE, background);
    for v in 0..FRAME_SIZE {
        for u in 0..FRAME_SIZE {
            if let Some((x, y)) = source_pixel(u, v, pose, sc) {
                out.set(u, v, frame.get(x, y));
            }
        }
    }
    Ok(out)
}

fn check_full(frame: &Frame) -> Result<(), ObsError> {
    if frame.width != FRAME_SIZE
        || frame.height != FRAME_SIZE
        || frame.data.len() != 3 * FRAME_SIZE * FRAME_SIZE
    {
        return Err(ObsError::Contract(format!(
            "expected a 3x{FRAME_SIZE}x{FRAME_SIZE} frame, got {}x{}",
            frame.height, frame.width
        )));
    }
    Ok(())
}

/// Source index for output index `i` when shrinking 800 to `size`.
#[inline]
pub fn nearest_index(i: usize, size: usize) -> usize {
    i * FRAME_SIZE / size
}

/// `out(c, i, j) = in(c, floor(i * 800 / size), floor(j * 800 / size))`.
pub fn downsample(frame: &Frame, size: usize) -> Result<Frame, ObsError> {
    check_full(frame)?;
    let mut out = Frame::filled(size, size, [0, 0, 0]);
    for i in 0..size {
        for j in 0..size {
            out.set(
                j,
                i,
                frame.get(nearest_index(j, size), nearest_index(i, size)),
            );
        }
    }
    Ok(out)
}

#[inline]
pub fn luminance(c: Rgb) -> u8 {
    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64).round() as u8
}

/// Single-channel `H x W` image.
pub fn grayscale(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.width * frame.height);
    for y in 0..frame.height {
        for x in 0..frame.width {
            out.push(luminance(frame.get(x, y)));
        }
    }
    out
}

/// Binary PGM (P5) of a single-channel image.
pub fn write_pgm<W: Write>(
    mut w: W,
    pixels: &[u8],
    width: usize,
    height: usize,
) -> std::io::Result<()> {
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsPipeline {
    pub size: usize,
    pub grayscale: bool,
    pub history: usize,
}

impl ObsPipeline {
    pub fn from_config(c: &crate::env::EnvConfig) -> Self {
        ObsPipeline {
            size: c.obs_size,
            grayscale: c.grayscale,
            history: c.agent_history_len,
        }
    }

    pub fn channels_per_frame(&self) -> usize {
        if self.grayscale {
            1
        } else {
            3
        }
    }

    pub fn channels(&self) -> usize {
        self.history * self.channels_per_frame()
    }

    /// Composed path on a rendered frame; the result is one stack entry.
    pub fn process(
        &self,
        frame: &Frame,
        pose: &Pose,
        background: Rgb,
    ) -> Result<Arc<[u8]>, ObsError> {
        let centred = agent_centric(frame, pose, background)?;
        let small = downsample(&centred, self.size)?;
        Ok(if self.grayscale {
            grayscale(&small).into()
        } else {
            small.data.into()
        })
    }

    /// Fused path; equal to `process(render(world), pose, background)`.
    pub fn sample(&self, scene: &Scene, pose: &Pose) -> Arc<[u8]> {
        let n = self.size;
        let sc = pose.heading.sin_cos();
        let mut out = vec![0u8; self.channels_per_frame() * n * n];
        for i in 0..n {
            let v = nearest_index(i, n);
            for j in 0..n {
                let u = nearest_index(j, n);
                let c = match source_pixel(u, v, pose, sc) {
                    Some((x, y)) => scene.shade(x, y),
                    None => scene.background(),
                };
                if self.grayscale {
                    out[i * n + j] = luminance(c);
                } else {
                    for (ch, val) in c.iter().enumerate() {
                        out[ch * n * n + i * n + j] = *val;
                    }
                }
            }
        }
        out.into()
    }

    pub fn sample_world(&self, world: &World, palette: &Palette) -> Arc<[u8]> {
        self.sample(&Scene::new(world, palette), &Pose::of(world))
    }
}

/// Ring of processed frames, newest last.
#[derive(Clone, Debug)]
pub struct FrameStack {
    capacity: usize,
    frames: VecDeque<Arc<[u8]>>,
}

impl FrameStack {
    pub fn new(capacity: usize) -> Self {
        FrameStack {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: Arc<[u8]>) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn observation(&self, pipeline: &ObsPipeline) -> Result<Observation, ObsError> {
        if self.frames.len() != self.capacity {
            return Err(ObsError::Contract(format!(
                "frame stack holds {} of {} frames",
                self.frames.len(),
                self.capacity
            )));
        }
        Ok(Observation {
            frames: self.frames.iter().cloned().collect(),
            channels_per_frame: pipeline.channels_per_frame(),
            size: pipeline.size,
        })
    }
}

/// Stacked frames, oldest first. Frames are shared, so consecutive
/// observations in a replay buffer cost one frame each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub frames: Vec<Arc<[u8]>>,
    pub channels_per_frame: usize,
    pub size: usize,
}

impl Observation {
    pub fn channels(&self) -> usize {
        self.frames.len() * self.channels_per_frame
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.size, self.size]
    }

    pub fn numel(&self) -> usize {
        self.channels() * self.size * self.size
    }

    /// Channel-first values in [0, 1].
    pub fn write_chw(&self, out: &mut Vec<f64>) {
        for f in &self.frames {
            out.extend(f.iter().map(|&b| b as f64 / 255.0));
        }
    }

    pub fn to_chw(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.numel());
        self.write_chw(&mut v);
        v
    }

    /// Channel-last values in [0, 1].
    pub fn to_hwc(&self) -> Vec<f64> {
        let chw = self.to_chw();
        let (c, n) = (self.channels(), self.size * self.size);
        let mut out = vec![0.0; chw.len()];
        for ch in 0..c {
            for p in 0..n {
                out[p * c + ch] = chw[ch * n + p];
            }
        }
        out
    }

    /// Layout selected by the `transpose` flag.
    pub fn values(&self, transpose: bool) -> Vec<f64> {
        if transpose {
            self.to_chw()
        } else {
            self.to_hwc()
        }
    }

    /// Shape matching [`Observation::values`].
    pub fn values_shape(&self, transpose: bool) -> [usize; 3] {
        let [c, h, w] = self.shape();
        if transpose {
            [c, h, w]
        } else {
            [h, w, c]
        }
    }
}

struct StackSink<'p> {
    pipeline: &'p ObsPipeline,
    keep_from: u32,
    frames: Vec<Arc<[u8]>>,
}

impl FrameSink for StackSink<'_> {
    fn frame(&mut self, index: u32, world: &World, palette: &Palette) {
        if index >= self.keep_from {
            self.frames.push(self.pipeline.sample_world(world, palette));
        }
    }
}

/// Environment plus observation pipeline: what an agent interacts with.
#[derive(Clone, Debug)]
pub struct AgentEnv {
    env: Env,
    pipeline: ObsPipeline,
    stack: FrameStack,
}

impl AgentEnv {
    pub fn new(env: Env) -> Self {
        let pipeline = ObsPipeline::from_config(env.config());
        AgentEnv {
            stack: FrameStack::new(pipeline.history),
            env,
            pipeline,
        }
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut Env {
        &mut self.env
    }

    pub fn into_env(self) -> Env {
        self.env
    }

    pub fn pipeline(&self) -> &ObsPipeline {
        &self.pipeline
    }

    /// The stack is filled with the final reset/noop frames; when there are
    /// fewer of those than the history length the oldest one is repeated.
    pub fn reset(&mut self) -> Result<Observation, ObsError> {
        let noops = self.env.config().noops;
        let keep_from = (noops + 1).saturating_sub(self.pipeline.history as u32);
        let mut sink = StackSink {
            pipeline: &self.pipeline,
            keep_from,
            frames: Vec::new(),
        };
        self.env.reset_headless(&mut sink)?;
        self.stack.clear();
        let first = sink.frames[0].clone();
        for _ in sink.frames.len()..self.pipeline.history {
            self.stack.push(first.clone());
        }
        for f in sink.frames {
            self.stack.push(f);
        }
        self.stack.observation(&self.pipeline)
    }

    pub fn step(&mut self, action: Action) -> Result<(Observation, StepInfo), ObsError> {
        let info = self.env.advance(action)?;
        let frame = self
            .pipeline
            .sample_world(self.env.world(), self.env.palette());
        self.stack.push(frame);
        Ok((self.stack.observation(&self.pipeline)?, info))
    }

    pub fn observation(&self) -> Result<Observation, ObsError> {
        self.stack.observation(&self.pipeline)
    }

    /// Rebuilds the frame stack from saved frames (checkpoint restore).
    pub fn restore(env: Env, frames: Vec<Arc<[u8]>>) -> Self {
        let mut a = AgentEnv::new(env);
        for f in frames {
            a.stack.push(f);
        }
        a
    }

    pub fn stack_frames(&self) -> Vec<Arc<[u8]>> {
        self.stack.frames.iter().cloned().collect()
    }
}

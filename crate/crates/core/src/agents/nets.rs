//! Convolutional and fully connected network builders over the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Result};
use crate::tensor::{NamedTensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trunk {
    /// Conv + relu layers over a `[C, H, W]` input, then flatten.
    Conv {
        input: [usize; 3],
        layers: Vec<ConvLayer>,
    },
    /// Flat feature vector fed straight to the heads.
    Flat { input: usize },
}

/// Optional relu hidden layer followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub name: String,
    pub hidden: Option<usize>,
    pub outputs: usize,
    /// Without it a bias-free linear head over one-hot features is exactly
    /// a table.
    #[serde(default = "yes")]
    pub output_bias: bool,
}

fn yes() -> bool {
    true
}

impl Head {
    pub fn new(name: &str, hidden: Option<usize>, outputs: usize) -> Self {
        Head {
            name: name.into(),
            hidden,
            outputs,
            output_bias: true,
        }
    }

    /// `x^T w` with no hidden layer and no bias.
    pub fn linear(name: &str, outputs: usize) -> Self {
        Head {
            output_bias: false,
            ..Head::new(name, None, outputs)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub trunk: Trunk,
    pub heads: Vec<Head>,
}

const ATARI_CONVS: [ConvLayer; 3] = [
    ConvLayer {
        filters: 32,
        kernel: 8,
        stride: 4,
    },
    ConvLayer {
        filters: 64,
        kernel: 4,
        stride: 2,
    },
    ConvLayer {
        filters: 64,
        kernel: 3,
        stride: 1,
    },
];

const DEBUG_CONVS: [ConvLayer; 2] = [
    ConvLayer {
        filters: 16,
        kernel: 8,
        stride: 4,
    },
    ConvLayer {
        filters: 32,
        kernel: 3,
        stride: 1,
    },
];

const DEBUG_HIDDEN: usize = 64;

impl NetSpec {
    /// Three conv layers, 512 relu units, one Q-value per action.
    pub fn dqn(input: [usize; 3], actions: usize) -> Self {
        NetSpec {
            trunk: Trunk::Conv {
                input,
                layers: ATARI_CONVS.to_vec(),
            },
            heads: vec![Head::new("q", Some(512), actions)],
        }
    }

    /// Shared conv stack with separate 512-unit actor and critic branches.
    pub fn actor_critic(input: [usize; 3], actions: usize) -> Self {
        NetSpec {
            trunk: Trunk::Conv {
                input,
                layers: ATARI_CONVS.to_vec(),
            },
            heads: vec![
                Head::new("pi", Some(512), actions),
                Head::new("v", Some(512), 1),
            ],
        }
    }

    /// Reduced variant for 28x28 observations.
    pub fn debug_dqn(input: [usize; 3], actions: usize) -> Self {
        NetSpec {
            trunk: Trunk::Conv {
                input,
                layers: DEBUG_CONVS.to_vec(),
            },
            heads: vec![Head::new("q", Some(DEBUG_HIDDEN), actions)],
        }
    }

    pub fn debug_actor_critic(input: [usize; 3], actions: usize) -> Self {
        NetSpec {
            trunk: Trunk::Conv {
                input,
                layers: DEBUG_CONVS.to_vec(),
            },
            heads: vec![
                Head::new("pi", Some(DEBUG_HIDDEN), actions),
                Head::new("v", Some(DEBUG_HIDDEN), 1),
            ],
        }
    }

    /// Full architecture for 84-pixel inputs, reduced one otherwise.
    pub fn for_input(input: [usize; 3], actions: usize, actor_critic: bool) -> Self {
        match (input[1] >= 84, actor_critic) {
            (true, false) => Self::dqn(input, actions),
            (true, true) => Self::actor_critic(input, actions),
            (false, false) => Self::debug_dqn(input, actions),
            (false, true) => Self::debug_actor_critic(input, actions),
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.trunk {
            Trunk::Conv { input, .. } => input.to_vec(),
            Trunk::Flat { input } => vec![*input],
        }
    }

    /// `[C, H, W]` after each conv layer.
    pub fn conv_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let Trunk::Conv { input, layers } = &self.trunk else {
            return Ok(vec![]);
        };
        let mut s = *input;
        let mut out = vec![];
        for l in layers {
            if l.kernel > s[1] || l.kernel > s[2] || l.stride == 0 {
                return Err(AgentError::Contract(format!(
                    "conv layer {l:?} does not fit input {s:?}"
                )));
            }
            s = [
                l.filters,
                (s[1] - l.kernel) / l.stride + 1,
                (s[2] - l.kernel) / l.stride + 1,
            ];
            out.push(s);
        }
        Ok(out)
    }

    pub fn feature_size(&self) -> Result<usize> {
        Ok(match &self.trunk {
            Trunk::Conv { input, .. } => {
                let last = self.conv_shapes()?.last().copied().unwrap_or(*input);
                last.iter().product()
            }
            Trunk::Flat { input } => *input,
        })
    }

    /// `(name, shape, fan_in)` of every parameter, in storage order.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>, usize)>> {
        let mut out = vec![];
        if let Trunk::Conv { input, layers } = &self.trunk {
            let mut c = input[0];
            for (i, l) in layers.iter().enumerate() {
                let fan = c * l.kernel * l.kernel;
                out.push((
                    format!("conv{i}.w"),
                    vec![l.filters, c, l.kernel, l.kernel],
                    fan,
                ));
                out.push((format!("conv{i}.b"), vec![l.filters], fan));
                c = l.filters;
            }
        }
        let feat = self.feature_size()?;
        for h in &self.heads {
            let mut width = feat;
            if let Some(hid) = h.hidden {
                out.push((format!("{}.fc.w", h.name), vec![width, hid], width));
                out.push((format!("{}.fc.b", h.name), vec![hid], width));
                width = hid;
            }
            out.push((format!("{}.out.w", h.name), vec![width, h.outputs], width));
            if h.output_bias {
                out.push((format!("{}.out.b", h.name), vec![h.outputs], width));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Tape handles from one forward pass.
pub struct Forward {
    pub params: Vec<Var>,
    /// One `[batch, outputs]` value per head, in spec order.
    pub heads: Vec<Var>,
}

impl Network {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        let layout = spec.param_layout()?;
        let mut names = vec![];
        let mut params = vec![];
        for (name, shape, fan_in) in layout {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push(Tensor::new(shape, data)?.requiring_grad());
            names.push(name);
        }
        Ok(Network {
            spec,
            names,
            params,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.spec.heads.iter().position(|h| h.name == name)
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| NamedTensor::new(format!("{prefix}{n}"), p.clone()))
            .collect()
    }

    /// Overwrites parameter values from `named` (looked up by `prefix` + name).
    pub fn load_named(&mut self, prefix: &str, named: &[NamedTensor]) -> Result<()> {
        for (n, p) in self.names.iter().zip(self.params.iter_mut()) {
            let key = format!("{prefix}{n}");
            let t = named
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| AgentError::Contract(format!("missing parameter {key}")))?;
            if t.tensor.shape() != p.shape() {
                return Err(AgentError::Contract(format!(
                    "parameter {key}: stored {:?}, expected {:?}",
                    t.tensor.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.tensor.data());
        }
        Ok(())
    }

    /// Copies parameter values (not gradients) from a network of equal layout.
    pub fn copy_from(&mut self, other: &Network) {
        assert_eq!(
            self.spec, other.spec,
            "copy between different architectures"
        );
        for (d, s) in self.params.iter_mut().zip(&other.params) {
            d.data_mut().copy_from_slice(s.data());
        }
    }

    /// Records the forward pass for input `x` (`[batch, input_shape...]`).
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Forward> {
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let mut i = 0;
        let mut h = x;
        if let Trunk::Conv { layers, .. } = &self.spec.trunk {
            for l in layers {
                let c = tape.conv2d(h, pv[i], Some(pv[i + 1]), l.stride)?;
                h = tape.relu(c);
                i += 2;
            }
            h = tape.flatten(h)?;
        }
        let features = h;
        let mut heads = vec![];
        for head in &self.spec.heads {
            let mut z = features;
            if head.hidden.is_some() {
                let m = tape.matmul(z, pv[i])?;
                let b = tape.add_bias(m, pv[i + 1])?;
                z = tape.relu(b);
                i += 2;
            }
            let m = tape.matmul(z, pv[i])?;
            if head.output_bias {
                heads.push(tape.add_bias(m, pv[i + 1])?);
                i += 2;
            } else {
                heads.push(m);
                i += 1;
            }
        }
        Ok(Forward { params: pv, heads })
    }

    /// Head outputs for a batch, without keeping the graph.
    pub fn infer(&self, x: Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = self.forward(&mut tape, xv)?;
        Ok(f.heads.iter().map(|&h| tape.to_tensor(h)).collect())
    }

    /// Gradients accumulated on `tape` for this network's parameters.
    pub fn tape_grads(&self, tape: &Tape, fwd: &Forward) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&fwd.params)
            .map(|(p, &v)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec())
            })
            .collect()
    }

    /// Replaces each parameter's gradient.
    pub fn set_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(AgentError::Contract(
                "gradient count does not match parameters".into(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.zero_grad();
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| {
                p.grad()
                    .map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_size_shapes() {
        let s = NetSpec::dqn([4, 84, 84], 4);
        assert_eq!(
            s.conv_shapes().unwrap(),
            vec![[32, 20, 20], [64, 9, 9], [64, 7, 7]]
        );
        assert_eq!(s.feature_size().unwrap(), 3136);
        let d = NetSpec::debug_actor_critic([4, 28, 28], 4);
        assert_eq!(d.feature_size().unwrap(), 512);
    }

    #[test]
    fn same_seed_same_params() {
        let s = NetSpec::debug_dqn([4, 28, 28], 4);
        let a = Network::new(s.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Network::new(s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}

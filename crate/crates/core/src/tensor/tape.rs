use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        n: usize,
    },
    Mul(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        n: usize,
    },
    LogSoftmax {
        x: Var,
        n: usize,
    },
    Log(Var),
    Exp(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
        n: usize,
    },
    Mean(Var),
    Sum(Var),
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Square(Var),
    Min(Var, Var),
    Max(Var, Var),
    Neg(Var),
    Scale(Var, f64),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations in topological order. Leaves may borrow their
/// data (`'a`) so parameters are not copied for every forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf borrowing a tensor; tracks gradients if the tensor requires them.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Owned leaf with gradient tracking.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Owned leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Gradient accumulated on a leaf by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, Cow::Owned(value), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(value),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("min", a, b, Op::Min(a, b), f64::min)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("max", a, b, Op::Max(a, b), f64::max)
    }

    /// `x[..., n] + bias[n]`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = &self.nodes[bias.0].value;
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, Cow::Owned(value), Op::AddBias { x, bias, n }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(shape_err("clip", format!("empty interval [{lo}, {hi}]")));
        }
        Ok(self.unary(x, Op::Clip { x, lo, hi }, |v| v.clamp(lo, hi)))
    }

    /// 2-D convolution: input `[N,C,H,W]`, kernel `[O,C,KH,KW]`, optional
    /// bias `[O]`, no padding.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?}, kernel {sk:?}, stride {stride}"),
            ));
        }
        if sk[2] > sx[2] || sk[3] > sx[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {sk:?} larger than input {sx:?}"),
            ));
        }
        if let Some(b) = bias {
            let sb = &self.nodes[b.0].shape;
            if sb.len() != 1 || sb[0] != sk[0] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {sb:?} for {} filters", sk[0]),
                ));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            oh: (sx[2] - sk[2]) / stride + 1,
            ow: (sx[3] - sk[3]) / stride + 1,
        };
        let bias_vals = bias.map(|b| &*self.nodes[b.0].value);
        let (value, cols) = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            bias_vals,
            &geom,
        );
        let rg = self.rg(x) || self.rg(k) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.n, geom.o, geom.oh, geom.ow],
            Cow::Owned(value),
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let value = self.nodes[x.0].value.to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(value), Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(shape_err("flatten", "rank-0 input"));
        }
        let shape = [s[0], s[1..].iter().product::<usize>().max(1)];
        self.reshape(x, &shape)
    }

    fn rows(&self, name: &'static str, x: Var) -> Result<usize> {
        self.nodes[x.0]
            .shape
            .last()
            .copied()
            .ok_or_else(|| shape_err(name, "rank-0 input"))
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.rows("softmax", x)?;
        let mut value = self.nodes[x.0].value.to_vec();
        for row in value.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(value), Op::Softmax { x, n }, rg))
    }

    /// Max-shifted log-softmax along the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.rows("log_softmax", x)?;
        let mut value = self.nodes[x.0].value.to_vec();
        for row in value.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(value), Op::LogSoftmax { x, n }, rg))
    }

    /// Picks `x[i, idx[i]]` from a `[m, n]` input, giving `[m]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err(
                "gather",
                format!("input {s:?}, {} indices", idx.len()),
            ));
        }
        let n = s[1];
        let vals = &self.nodes[x.0].value;
        let value: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| vals[r * n + c])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len()],
            Cow::Owned(value),
            Op::Gather {
                x,
                idx: idx.to_vec(),
                n,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar root. Gradients accumulate into leaves, so
    /// calling this twice without [`Tape::zero_grads`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                None => grads[v.0] = Some(contrib),
            }
        };
        let map = |x: &[f64], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            x.iter().enumerate().map(|(j, &v)| f(j, v)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    send(*a, kernels::matmul_bt(g, val(*b), *m, *k, *n));
                }
                if self.rg(*b) {
                    send(*b, kernels::matmul_at(val(*a), g, *m, *k, *n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddBias { x, bias, n } => {
                send(*x, g.to_vec());
                let mut gb = vec![0.0; *n];
                for row in g.chunks(*n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                send(*bias, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    send(*a, map(g, &|j, gv| gv * vb[j]));
                }
                if self.rg(*b) {
                    send(*b, map(g, &|j, gv| gv * va[j]));
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                send(*x, map(g, &|j, gv| if vx[j] > 0.0 { gv } else { 0.0 }));
            }
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            } => {
                if self.rg(*k) {
                    send(*k, kernels::conv2d_grad_kernel(g, cols, geom));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        send(*b, kernels::conv2d_grad_bias(g, geom));
                    }
                }
                if self.rg(*x) {
                    send(*x, kernels::conv2d_grad_input(g, val(*k), geom));
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Softmax { x, n } => {
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..*n {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax { x, n } => {
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..*n {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                send(*x, dx);
            }
            Op::Log(x) => {
                let vx = val(*x);
                send(*x, map(g, &|j, gv| gv / vx[j]));
            }
            Op::Exp(x) => {
                let y = &node.value;
                send(*x, map(g, &|j, gv| gv * y[j]));
            }
            Op::Gather { x, idx, n } => {
                let mut dx = vec![0.0; idx.len() * n];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * n + c] += g[r];
                }
                send(*x, dx);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                send(*x, vec![g[0] / len as f64; len]);
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                send(*x, vec![g[0]; len]);
            }
            Op::Clip { x, lo, hi } => {
                let vx = val(*x);
                send(
                    *x,
                    map(g, &|j, gv| {
                        if vx[j] >= *lo && vx[j] <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Square(x) => {
                let vx = val(*x);
                send(*x, map(g, &|j, gv| 2.0 * vx[j] * gv));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                // ties route to the first operand
                let is_min = matches!(node.op, Op::Min(..));
                let (va, vb) = (val(*a), val(*b));
                let first = |j: usize| {
                    if is_min {
                        va[j] <= vb[j]
                    } else {
                        va[j] >= vb[j]
                    }
                };
                send(*a, map(g, &|j, gv| if first(j) { gv } else { 0.0 }));
                send(*b, map(g, &|j, gv| if first(j) { 0.0 } else { gv }));
            }
            Op::Neg(x) => send(*x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
        }
    }
}

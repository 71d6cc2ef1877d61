//! First-order optimizers over a parameter list. All updates are descent
//! updates; objectives that are maximised must be negated by the caller.

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub learning_rate: f64,
    /// RMSProp decay ρ.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moment (Adam). Empty until the first step.
    pub first: Vec<Vec<f64>>,
    /// Second moment (Adam, RMSProp). Empty until the first step.
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, learning_rate, 0.0)
    }

    pub fn rmsprop(learning_rate: f64, eps: f64) -> Self {
        Self::with_kind(OptimizerKind::Rmsprop, learning_rate, eps)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Adam, learning_rate, 1e-8)
    }

    fn with_kind(kind: OptimizerKind, learning_rate: f64, eps: f64) -> Self {
        OptimizerState {
            kind,
            step_count: 0,
            learning_rate,
            rho: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Dispatches on `kind`.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, self),
            OptimizerKind::Rmsprop => rmsprop_step(params, self),
            OptimizerKind::Adam => adam_step(params, self),
        }
    }

    fn ensure_layout(&mut self, params: &[Tensor], moments: usize) -> Result<()> {
        let fresh = |ps: &[Tensor]| ps.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        if moments >= 1 && self.second.is_empty() {
            self.second = fresh(params);
        }
        if moments >= 2 && self.first.is_empty() {
            self.first = fresh(params);
        }
        let check = |acc: &Vec<Vec<f64>>| {
            acc.is_empty()
                || (acc.len() == params.len()
                    && acc.iter().zip(params).all(|(a, p)| a.len() == p.numel()))
        };
        if !check(&self.first) || !check(&self.second) {
            return Err(TensorError::Contract(
                "optimizer accumulators do not match parameter layout".into(),
            ));
        }
        Ok(())
    }
}

fn grads_of(params: &[Tensor]) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            Some(g) if g.len() == p.numel() => {}
            Some(_) => {
                return Err(TensorError::Contract(format!(
                    "gradient layout mismatch at parameter {i}"
                )))
            }
            None => {
                return Err(TensorError::Contract(format!(
                    "parameter {i} has no gradient"
                )))
            }
        }
    }
    Ok(())
}

fn expect_kind(state: &OptimizerState, kind: OptimizerKind) -> Result<()> {
    if state.kind != kind {
        return Err(TensorError::Contract(format!(
            "{kind:?} step on {:?} optimizer state",
            state.kind
        )));
    }
    Ok(())
}

/// `p <- p - lr * g`
pub fn sgd_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    expect_kind(state, OptimizerKind::Sgd)?;
    grads_of(params)?;
    let lr = state.learning_rate;
    for p in params.iter_mut() {
        let g = p.grad().expect("checked").to_vec();
        p.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, gv)| *w -= lr * gv);
    }
    state.step_count += 1;
    Ok(())
}

/// `v <- rho v + (1 - rho) g^2; p <- p - lr g / (sqrt(v) + eps)`
pub fn rmsprop_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    expect_kind(state, OptimizerKind::Rmsprop)?;
    grads_of(params)?;
    state.ensure_layout(params, 1)?;
    let (lr, rho, eps) = (state.learning_rate, state.rho, state.eps);
    for (p, v) in params.iter_mut().zip(state.second.iter_mut()) {
        let g = p.grad().expect("checked").to_vec();
        for ((w, vi), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = rho * *vi + (1.0 - rho) * gv * gv;
            *w -= lr * gv / (vi.sqrt() + eps);
        }
    }
    state.step_count += 1;
    Ok(())
}

/// Bias-corrected Adam; the step counter is incremented before correction.
pub fn adam_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    expect_kind(state, OptimizerKind::Adam)?;
    grads_of(params)?;
    state.ensure_layout(params, 2)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (lr, b1, b2, eps) = (state.learning_rate, state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let g = p.grad().expect("checked").to_vec();
        for (((w, mi), vi), gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(&g)
        {
            *mi = b1 * *mi + (1.0 - b1) * gv;
            *vi = b2 * *vi + (1.0 - b2) * gv * gv;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / (total + 1e-6);
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                p.zero_grad();
                p.accumulate_grad(&scaled).expect("same layout");
            }
        }
    }
    total
}

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub compared: usize,
    /// Coordinates skipped because the function has a kink there.
    pub skipped: usize,
    pub deterministic: bool,
    pub passed: bool,
}

const H: f64 = 1e-5;

/// Compares autodiff gradients of `build` against central differences.
///
/// `build` receives a tape and one leaf per entry of `params` and must return
/// a scalar. Coordinates where the one-sided difference quotients disagree
/// (relu kinks, clip boundaries, min/max ties) are excluded.
pub fn grad_check<F>(build: F, params: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.variable(p.clone())).collect();
        let root = build(&mut tape, &vars)?;
        if tape.value(root).len() != 1 {
            return Err(TensorError::Contract(
                "grad_check builder must return a scalar".into(),
            ));
        }
        Ok(tape.scalar(root))
    };

    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Ok(GradCheckReport {
            max_rel_error: f64::NAN,
            compared: 0,
            skipped: 0,
            deterministic: false,
            passed: false,
        });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let root = build(&mut tape, &vars)?;
        tape.backward(root)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec())
            })
            .collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let (mut max_rel, mut compared, mut skipped) = (0.0f64, 0usize, 0usize);
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + H;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - H;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let fwd = (up - base) / H;
            let bwd = (base - down) / H;
            let central = (up - down) / (2.0 * H);
            if (fwd - bwd).abs() > 1e-3 * (1.0 + central.abs()) {
                skipped += 1;
                continue;
            }
            let a = analytic[pi][j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-7);
            max_rel = max_rel.max(rel);
            compared += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        compared,
        skipped,
        deterministic: true,
        passed: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::from_slice(&[3], &[0.0, 1.0, -2.0]).unwrap();
        let rep = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.compared, 2);
        assert!(rep.passed);
    }

    #[test]
    fn nondeterministic_builder_is_flagged() {
        let counter = Cell::new(0.0);
        let x = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let rep = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.scale(v[0], counter.get());
                Ok(t.sum(s))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!rep.deterministic && !rep.passed);
    }
}

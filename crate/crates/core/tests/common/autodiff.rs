//! Central-difference oracles for the autodiff core shared by the oracle
//! suite and the acceptance binary.

use pushgym::agents::{NetSpec, Network};
use pushgym::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error with an absolute floor for gradients that are essentially 0.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs() / 1e-7
    } else {
        (a - n).abs() / scale
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for relu/min/max/clip tests.
fn rand_nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Checks one op: forward values against `reference`, then gradients of the
/// random projection `sum(w * op(inputs))` against central differences of
/// the same projection of `reference`. Returns the worst relative error.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    op: &dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> Var,
    reference: &Reference,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let raw: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let expected = reference(&raw);
    let w = rand_vec(rng, expected.len(), -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let got = tape.value(out).to_vec();
    assert_eq!(got.len(), expected.len(), "{name}: output size");
    for (g, e) in got.iter().zip(&expected) {
        assert!(
            (g - e).abs() <= 1e-12 * (1.0 + e.abs()),
            "{name}: forward {g} vs {e}"
        );
    }
    let wv = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.clone()).unwrap());
    let prod = tape.mul(out, wv).unwrap();
    let root = tape.sum(prod);
    tape.backward(root).unwrap();

    let loss = |xs: &[Vec<f64>]| {
        reference(xs)
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let grad = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; raw[i].len()]);
        for j in 0..raw[i].len() {
            let mut xs = raw.clone();
            let x0 = xs[i][j];
            xs[i][j] = x0 + H;
            let up = loss(&xs);
            xs[i][j] = x0 - H;
            let down = loss(&xs);
            xs[i][j] = x0;
            let base = loss(&xs);
            let (fwd, bwd) = ((up - base) / H, (base - down) / H);
            if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs()) {
                continue; // kink
            }
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(grad[j], numeric);
            assert!(
                e < TOL,
                "{name}: input {i}[{j}] autodiff {} vs numeric {numeric}",
                grad[j]
            );
            worst = worst.max(e);
        }
    }
    worst
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// NCHW input, OIHW kernel, no padding.
#[allow(clippy::too_many_arguments)]
fn ref_conv(
    x: &[f64],
    k: &[f64],
    b: Option<&[f64]>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    s: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - kh) / s + 1;
    let ow = (w - kw) / s + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                acc += x[((ni * c + ci) * h + y * s + dy) * w + xx * s + dx]
                                    * k[((oi * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn ref_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|r| {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(move |v| v.exp() / s).collect::<Vec<_>>()
        })
        .collect()
}

pub fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random `[m, n]` with m*n <= 32.
fn small_2d(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=8);
    (m, n)
}

pub fn elementwise_suite(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (m, n) = small_2d(&mut rng);
        let sh = [m, n];
        let len = m * n;
        let a = t(&sh, rand_nonzero(&mut rng, len));
        let b = t(&sh, rand_nonzero(&mut rng, len));
        let pos = t(&sh, rand_vec(&mut rng, len, 0.2, 3.0));
        let zip = |f: fn(f64, f64) -> f64| {
            move |xs: &[Vec<f64>]| xs[0].iter().zip(&xs[1]).map(|(x, y)| f(*x, *y)).collect()
        };
        let un = |f: fn(f64) -> f64| move |xs: &[Vec<f64>]| xs[0].iter().map(|x| f(*x)).collect();
        let two = [a.clone(), b.clone()];
        worst = worst.max(check_op(
            "add",
            &two,
            &|tp, v| tp.add(v[0], v[1]).unwrap(),
            &zip(|x, y| x + y),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "sub",
            &two,
            &|tp, v| tp.sub(v[0], v[1]).unwrap(),
            &zip(|x, y| x - y),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "mul",
            &two,
            &|tp, v| tp.mul(v[0], v[1]).unwrap(),
            &zip(|x, y| x * y),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "min",
            &two,
            &|tp, v| tp.min(v[0], v[1]).unwrap(),
            &zip(f64::min),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "max",
            &two,
            &|tp, v| tp.max(v[0], v[1]).unwrap(),
            &zip(f64::max),
            &mut rng,
        ));
        let one = [a.clone()];
        worst = worst.max(check_op(
            "relu",
            &one,
            &|tp, v| tp.relu(v[0]),
            &un(|x| x.max(0.0)),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "exp",
            &one,
            &|tp, v| tp.exp(v[0]),
            &un(f64::exp),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "square",
            &one,
            &|tp, v| tp.square(v[0]),
            &un(|x| x * x),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "neg",
            &one,
            &|tp, v| tp.neg(v[0]),
            &un(|x| -x),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "scale",
            &one,
            &|tp, v| tp.scale(v[0], -2.5),
            &un(|x| -2.5 * x),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "clip",
            &one,
            &|tp, v| tp.clip(v[0], -0.5, 0.7).unwrap(),
            &un(|x| x.clamp(-0.5, 0.7)),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "log",
            &[pos],
            &|tp, v| tp.log(v[0]),
            &un(f64::ln),
            &mut rng,
        ));
    }
    worst
}

pub fn structural_suite(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (m, n) = small_2d(&mut rng);
        let k = rng.gen_range(1..=4);
        let a = t(&[m, k], rand_vec(&mut rng, m * k, -1.0, 1.0));
        let b = t(&[k, n], rand_vec(&mut rng, k * n, -1.0, 1.0));
        worst = worst.max(check_op(
            "matmul",
            &[a, b],
            &|tp, v| tp.matmul(v[0], v[1]).unwrap(),
            &move |xs| ref_matmul(&xs[0], &xs[1], m, k, n),
            &mut rng,
        ));

        let x = t(&[m, n], rand_vec(&mut rng, m * n, -2.0, 2.0));
        let bias = t(&[n], rand_vec(&mut rng, n, -1.0, 1.0));
        worst = worst.max(check_op(
            "add_bias",
            &[x.clone(), bias],
            &|tp, v| tp.add_bias(v[0], v[1]).unwrap(),
            &move |xs| {
                xs[0]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + xs[1][i % n])
                    .collect()
            },
            &mut rng,
        ));
        worst = worst.max(check_op(
            "softmax",
            &[x.clone()],
            &|tp, v| tp.softmax(v[0]).unwrap(),
            &move |xs| ref_softmax_rows(&xs[0], n),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "log_softmax",
            &[x.clone()],
            &|tp, v| tp.log_softmax(v[0]).unwrap(),
            &move |xs| ref_softmax_rows(&xs[0], n).iter().map(|p| p.ln()).collect(),
            &mut rng,
        ));
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let idx2 = idx.clone();
        worst = worst.max(check_op(
            "gather",
            &[x.clone()],
            &move |tp, v| tp.gather(v[0], &idx).unwrap(),
            &move |xs| (0..m).map(|r| xs[0][r * n + idx2[r]]).collect(),
            &mut rng,
        ));
        worst = worst.max(check_op(
            "sum",
            &[x.clone()],
            &|tp, v| tp.sum(v[0]),
            &|xs| vec![xs[0].iter().sum()],
            &mut rng,
        ));
        let len = (m * n) as f64;
        worst = worst.max(check_op(
            "mean",
            &[x.clone()],
            &|tp, v| tp.mean(v[0]),
            &move |xs| vec![xs[0].iter().sum::<f64>() / len],
            &mut rng,
        ));
        worst = worst.max(check_op(
            "reshape",
            &[x.clone()],
            &move |tp, v| tp.reshape(v[0], &[n, m]).unwrap(),
            &|xs| xs[0].clone(),
            &mut rng,
        ));
    }
    worst
}

pub fn conv_suite(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..6 {
        let c = rng.gen_range(1..=2);
        let o = rng.gen_range(1..=2);
        let kh = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=2);
        let hw = kh + s * rng.gen_range(0..=2);
        let x = t(&[1, c, hw, hw], rand_vec(&mut rng, c * hw * hw, -1.0, 1.0));
        let k = t(
            &[o, c, kh, kh],
            rand_vec(&mut rng, o * c * kh * kh, -1.0, 1.0),
        );
        let b = t(&[o], rand_vec(&mut rng, o, -1.0, 1.0));
        worst = worst.max(check_op(
            "conv2d",
            &[x.clone(), k, b],
            &move |tp, v| tp.conv2d(v[0], v[1], Some(v[2]), s).unwrap(),
            &move |xs| ref_conv(&xs[0], &xs[1], Some(&xs[2]), 1, c, hw, hw, o, kh, kh, s).0,
            &mut rng,
        ));
        worst = worst.max(check_op(
            "flatten",
            &[x],
            &|tp, v| tp.flatten(v[0]).unwrap(),
            &|xs| xs[0].clone(),
            &mut rng,
        ));
    }
    worst
}

/// Plain-Rust forward pass of a conv trunk plus dense heads for one sample.
fn ref_network(spec: &NetSpec, params: &[Vec<f64>], input: &[f64]) -> Vec<Vec<f64>> {
    let pushgym::agents::Trunk::Conv {
        input: [c0, h0, w0],
        layers,
    } = &spec.trunk
    else {
        panic!("conv trunk expected");
    };
    let (mut x, mut c, mut h, mut w) = (input.to_vec(), *c0, *h0, *w0);
    let mut i = 0;
    for l in layers {
        let (y, oh, ow) = ref_conv(
            &x,
            &params[i],
            Some(&params[i + 1]),
            1,
            c,
            h,
            w,
            l.filters,
            l.kernel,
            l.kernel,
            l.stride,
        );
        x = y.into_iter().map(|v| v.max(0.0)).collect();
        (c, h, w) = (l.filters, oh, ow);
        i += 2;
    }
    let mut heads = vec![];
    for head in &spec.heads {
        let mut z = x.clone();
        if let Some(hid) = head.hidden {
            let m = ref_matmul(&z, &params[i], 1, z.len(), hid);
            z = m
                .iter()
                .zip(&params[i + 1])
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            i += 2;
        }
        let m = ref_matmul(&z, &params[i], 1, z.len(), head.outputs);
        if head.output_bias {
            heads.push(m.iter().zip(&params[i + 1]).map(|(a, b)| a + b).collect());
            i += 2;
        } else {
            heads.push(m);
            i += 1;
        }
    }
    heads
}

/// Autodiff gradient of `sum_h w_h . head_h` for the selected heads.
pub fn network_grads(
    net: &Network,
    x: &Tensor,
    weights: &[Vec<f64>],
    use_head: &[bool],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = net.forward(&mut tape, xv).unwrap();
    let values: Vec<Vec<f64>> = fwd.heads.iter().map(|&h| tape.value(h).to_vec()).collect();
    let mut terms = vec![];
    for (k, &hv) in fwd.heads.iter().enumerate() {
        if !use_head[k] {
            continue;
        }
        let wv = tape.constant(Tensor::new(vec![1, weights[k].len()], weights[k].clone()).unwrap());
        let p = tape.mul(hv, wv).unwrap();
        terms.push(tape.sum(p));
    }
    let mut root = terms[0];
    for &tm in &terms[1..] {
        root = tape.add(root, tm).unwrap();
    }
    tape.backward(root).unwrap();
    (net.tape_grads(&tape, &fwd), values)
}

pub fn check_network(spec: NetSpec, seed: u64, samples_per_param: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(spec.clone(), &mut rng).unwrap();
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let input_len: usize = spec.input_shape().iter().product();
    let input = rand_vec(&mut rng, input_len, 0.0, 1.0);
    let mut shape = vec![1];
    shape.extend(spec.input_shape());
    let x = Tensor::new(shape, input.clone()).unwrap();
    let weights: Vec<Vec<f64>> = spec
        .heads
        .iter()
        .map(|h| rand_vec(&mut rng, h.outputs, -1.0, 1.0))
        .collect();
    let all = vec![true; spec.heads.len()];
    let (grads, values) = network_grads(&net, &x, &weights, &all);

    let params: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
    let expected = ref_network(&spec, &params, &input);
    for (g, e) in values.iter().zip(&expected) {
        for (a, b) in g.iter().zip(e) {
            assert!(
                (a - b).abs() < 1e-9 * (1.0 + b.abs()),
                "forward {a} vs reference {b}"
            );
        }
    }

    let loss = |ps: &[Vec<f64>]| -> f64 {
        ref_network(&spec, ps, &input)
            .iter()
            .zip(&weights)
            .map(|(h, w)| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (pi, p) in params.iter().enumerate() {
        // every bias entry of small layers, a random sample elsewhere
        let coords: Vec<usize> = if p.len() <= samples_per_param {
            (0..p.len()).collect()
        } else {
            (0..samples_per_param)
                .map(|_| rng.gen_range(0..p.len()))
                .collect()
        };
        for j in coords {
            // The loss is piecewise linear in each parameter, so one-sided
            // slopes agree to rounding unless a relu flips within the step;
            // then retry closer before giving up on the coordinate.
            let mut ps = params.clone();
            let x0 = ps[pi][j];
            let base = loss(&ps);
            let mut numeric = None;
            for h in [H, H * 1e-2] {
                ps[pi][j] = x0 + h;
                let up = loss(&ps);
                ps[pi][j] = x0 - h;
                let down = loss(&ps);
                ps[pi][j] = x0;
                let (f, b) = ((up - base) / h, (base - down) / h);
                if (f - b).abs() <= 1e-6 * (1.0 + f.abs().max(b.abs())) {
                    numeric = Some((up - down) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else { continue };
            let e = rel_err(grads[pi][j], numeric);
            assert!(
                e < TOL,
                "{}[{j}]: autodiff {} vs numeric {numeric}",
                net.names()[pi],
                grads[pi][j]
            );
            worst = worst.max(e);
            compared += 1;
        }
    }
    assert!(compared > 0);
    worst
}

// Dense kernels behind the tape ops. Row-parallel where rows are independent;
// every output element is reduced in the same order in both execution modes.

use crate::par;

/// `out[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[m,k] = g[m,n] * b[k,n]^T`
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    par::for_each_chunk(&mut out, k, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o = dot(grow, brow);
        }
    });
    out
}

/// `out[k,n] = a[m,k]^T * g[m,n]`
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    par::for_each_chunk(&mut out, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    });
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one sample `[c,h,w]` into columns `[c*kh*kw, oh*ow]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oi in 0..g.oh {
                    let src_row = ci * g.h * g.w + (oi * g.stride + ki) * g.w + kj;
                    for oj in 0..g.ow {
                        dst[oi * g.ow + oj] = x[src_row + oj * g.stride];
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto one sample gradient `[c,h,w]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[r * p..(r + 1) * p];
                for oi in 0..g.oh {
                    let dst_row = ci * g.h * g.w + (oi * g.stride + ki) * g.w + kj;
                    for oj in 0..g.ow {
                        dx[dst_row + oj * g.stride] += src[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns (output `[n,o,oh,ow]`, cached columns per sample).
pub fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (patch, pos) = (g.patch(), g.positions());
    let in_sz = g.c * g.h * g.w;
    let mut cols = vec![0.0; g.n * patch * pos];
    par::for_each_chunk(&mut cols, patch * pos, |s, c| {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, c)
    });
    let out_sz = g.o * pos;
    let mut out = vec![0.0; g.n * out_sz];
    par::for_each_chunk(&mut out, out_sz, |s, dst| {
        let c = &cols[s * patch * pos..(s + 1) * patch * pos];
        for oc in 0..g.o {
            let krow = &k[oc * patch..(oc + 1) * patch];
            let orow = &mut dst[oc * pos..(oc + 1) * pos];
            if let Some(b) = bias {
                orow.iter_mut().for_each(|v| *v = b[oc]);
            }
            for (r, &kv) in krow.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let crow = &c[r * pos..(r + 1) * pos];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += kv * cv;
                }
            }
        }
    });
    (out, cols)
}

/// Gradient w.r.t. the kernel `[o, c*kh*kw]`, reduced over samples in order.
pub fn conv2d_grad_kernel(gout: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (patch, pos) = (g.patch(), g.positions());
    let mut dk = vec![0.0; g.o * patch];
    par::for_each_chunk(&mut dk, patch, |oc, row| {
        for s in 0..g.n {
            let grow = &gout[s * g.o * pos + oc * pos..s * g.o * pos + (oc + 1) * pos];
            let c = &cols[s * patch * pos..(s + 1) * patch * pos];
            for (r, v) in row.iter_mut().enumerate() {
                *v += dot(grow, &c[r * pos..(r + 1) * pos]);
            }
        }
    });
    dk
}

pub fn conv2d_grad_bias(gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pos = g.positions();
    let mut db = vec![0.0; g.o];
    for s in 0..g.n {
        for (oc, b) in db.iter_mut().enumerate() {
            let off = s * g.o * pos + oc * pos;
            *b += gout[off..off + pos].iter().sum::<f64>();
        }
    }
    db
}

/// Gradient w.r.t. the input `[n,c,h,w]`.
pub fn conv2d_grad_input(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (patch, pos) = (g.patch(), g.positions());
    let in_sz = g.c * g.h * g.w;
    let mut dx = vec![0.0; g.n * in_sz];
    par::for_each_chunk(&mut dx, in_sz, |s, dxs| {
        let gs = &gout[s * g.o * pos..(s + 1) * g.o * pos];
        let mut dcols = vec![0.0; patch * pos];
        for oc in 0..g.o {
            let grow = &gs[oc * pos..(oc + 1) * pos];
            let krow = &k[oc * patch..(oc + 1) * patch];
            for (r, &kv) in krow.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let drow = &mut dcols[r * pos..(r + 1) * pos];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += kv * gv;
                }
            }
        }
        col2im(&dcols, g, dxs);
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5; 6] = [17; 39]
        assert_eq!(
            matmul(&[1., 2., 3., 4.], &[5., 6.], 2, 2, 1),
            vec![17., 39.]
        );
        // transposed variants agree with explicit transposes
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let g = [1., -1., 0.5, 2.]; // 2x2
        let b = [1., 0., 2., 1., -1., 3.]; // 3x2 -> used as k=3 rows of n=2
        assert_eq!(matmul_bt(&g, &b, 2, 3, 2), vec![1., 1., -4., 0.5, 3., 5.5]);
        assert_eq!(matmul_at(&a, &g, 2, 3, 2), vec![3., 7., 4.5, 8., 6., 9.]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom {
            n: 1,
            c: 2,
            h: 5,
            w: 5,
            o: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            oh: 2,
            ow: 2,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let (out, _) = conv2d_forward(&x, &k, Some(&[0.5, -0.5, 1.0]), &g);
        for oc in 0..3 {
            for oi in 0..2 {
                for oj in 0..2 {
                    let mut s = [0.5, -0.5, 1.0][oc];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                s += k[((oc * 2 + ci) * 3 + ki) * 3 + kj]
                                    * x[ci * 25 + (oi * 2 + ki) * 5 + oj * 2 + kj];
                            }
                        }
                    }
                    assert!((out[oc * 4 + oi * 2 + oj] - s).abs() < 1e-12);
                }
            }
        }
    }
}

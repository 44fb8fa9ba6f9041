//! Inner loops. Kept free of tape bookkeeping so they can be read (and
//! vectorized) on their own.

use super::Real;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = F::zero();
    for l in 0..8 {
        s += acc[l];
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub time: usize,
    pub out_ch: usize,
    pub klen: usize,
    pub stride: usize,
    pub out_time: usize,
}

pub fn conv1d_forward<F: Real>(x: &[F], w: &[F], d: &ConvDims) -> Vec<F> {
    let mut out = vec![F::zero(); d.batch * d.out_ch * d.out_time];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let row = &mut out[(b * d.out_ch + o) * d.out_time..][..d.out_time];
            for i in 0..d.in_ch {
                let xrow = &x[(b * d.in_ch + i) * d.time..][..d.time];
                let wrow = &w[(o * d.in_ch + i) * d.klen..][..d.klen];
                for (k, &wk) in wrow.iter().enumerate() {
                    if d.stride == 1 {
                        axpy(wk, &xrow[k..k + d.out_time], row);
                    } else {
                        for (t, r) in row.iter_mut().enumerate() {
                            *r += wk * xrow[t * d.stride + k];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv1d_grad_input<F: Real>(gout: &[F], w: &[F], d: &ConvDims) -> Vec<F> {
    let mut gx = vec![F::zero(); d.batch * d.in_ch * d.time];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let grow = &gout[(b * d.out_ch + o) * d.out_time..][..d.out_time];
            for i in 0..d.in_ch {
                let gxrow = &mut gx[(b * d.in_ch + i) * d.time..][..d.time];
                let wrow = &w[(o * d.in_ch + i) * d.klen..][..d.klen];
                for (k, &wk) in wrow.iter().enumerate() {
                    if d.stride == 1 {
                        axpy(wk, grow, &mut gxrow[k..k + d.out_time]);
                    } else {
                        for (t, &g) in grow.iter().enumerate() {
                            gxrow[t * d.stride + k] += wk * g;
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv1d_grad_kernel<F: Real>(gout: &[F], x: &[F], d: &ConvDims) -> Vec<F> {
    let mut gw = vec![F::zero(); d.out_ch * d.in_ch * d.klen];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let grow = &gout[(b * d.out_ch + o) * d.out_time..][..d.out_time];
            for i in 0..d.in_ch {
                let xrow = &x[(b * d.in_ch + i) * d.time..][..d.time];
                let gwrow = &mut gw[(o * d.in_ch + i) * d.klen..][..d.klen];
                for (k, gk) in gwrow.iter_mut().enumerate() {
                    if d.stride == 1 {
                        *gk += dot(grow, &xrow[k..k + d.out_time]);
                    } else {
                        let mut s = F::zero();
                        for (t, &g) in grow.iter().enumerate() {
                            s += g * xrow[t * d.stride + k];
                        }
                        *gk += s;
                    }
                }
            }
        }
    }
    gw
}

/// `out[b, o] = x[b, :] . w[o, :] + bias[o]`
pub fn linear_forward<F: Real>(x: &[F], w: &[F], bias: &[F], n_in: usize) -> Vec<F> {
    let n_out = bias.len();
    let batch = x.len() / n_in;
    let mut out = Vec::with_capacity(batch * n_out);
    for xr in x.chunks(n_in) {
        for (o, wr) in w.chunks(n_in).enumerate() {
            out.push(dot(xr, wr) + bias[o]);
        }
    }
    out
}

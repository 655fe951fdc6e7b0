//! Compute kernels behind the graph ops. Convolution is lowered to im2col
//! plus a matrixmultiply-backed matmul; everything else is plain loops.
//!
//! Determinism note: the batch dimension is processed with rayon, but every
//! sample writes a disjoint slice and all reductions fold in fixed sample
//! order, so results do not depend on thread count or scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::{Scalar, Shape};

pub(crate) struct ConvSpec {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvSpec {
    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }
}

/// Unfold one sample into a (cin*k*k) x (oh*ow) column matrix.
fn im2col<S: Scalar>(x: &[S], sp: &ConvSpec, col: &mut [S]) {
    let l = sp.oh * sp.ow;
    let (h, w, k) = (sp.h, sp.w, sp.k);
    for ci in 0..sp.cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                let mut di = 0;
                for oy in 0..sp.oh {
                    let iy = (oy * sp.stride + ki) as isize - sp.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[di..di + sp.ow].fill(S::zero());
                        di += sp.ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..sp.ow {
                        let ix = (ox * sp.stride + kj) as isize - sp.pad as isize;
                        dst[di] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            xc[base + ix as usize]
                        };
                        di += 1;
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the input gradient (scatter-add).
fn col2im_add<S: Scalar>(col: &[S], sp: &ConvSpec, dx: &mut [S]) {
    let l = sp.oh * sp.ow;
    let (h, w, k) = (sp.h, sp.w, sp.k);
    for ci in 0..sp.cin {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * l..(row + 1) * l];
                let mut si = 0;
                for oy in 0..sp.oh {
                    let iy = (oy * sp.stride + ki) as isize - sp.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        si += sp.ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..sp.ow {
                        let ix = (ox * sp.stride + kj) as isize - sp.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xc[base + ix as usize] += src[si];
                        }
                        si += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: &[S],
    sp: &ConvSpec,
    out: &mut [S],
) {
    let l = sp.oh * sp.ow;
    let kk = sp.cin * sp.k * sp.k;
    let wmat = ArrayView2::from_shape((sp.cout, kk), weight).expect("weight layout");
    let in_stride = sp.cin * sp.h * sp.w;
    let out_stride = sp.cout * l;
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(b, out_b)| {
            let mut col = vec![S::zero(); kk * l];
            im2col(&x[b * in_stride..(b + 1) * in_stride], sp, &mut col);
            let colm = ArrayView2::from_shape((kk, l), &col[..]).expect("col layout");
            let mut outm = ArrayViewMut2::from_shape((sp.cout, l), out_b).expect("out layout");
            general_mat_mul(S::one(), &wmat, &colm, S::zero(), &mut outm);
            for (co, chunk) in out_b.chunks_mut(l).enumerate() {
                let bv = bias[co];
                for v in chunk {
                    *v += bv;
                }
            }
        });
}

/// Backward for conv2d. `dx` may be `None` when the input does not need a
/// gradient (e.g. the network input). `dw`/`db` are accumulated into.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    sp: &ConvSpec,
    dx: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
) {
    let l = sp.oh * sp.ow;
    let kk = sp.cin * sp.k * sp.k;
    let in_stride = sp.cin * sp.h * sp.w;
    let out_stride = sp.cout * l;
    let wmat = ArrayView2::from_shape((sp.cout, kk), weight).expect("weight layout");

    // Per-sample weight/bias contributions, reduced in fixed order below.
    let parts: Vec<(Vec<S>, Vec<S>)> = match dx {
        Some(dx) => dx
            .par_chunks_mut(in_stride)
            .enumerate()
            .map(|(b, dx_b)| {
                let gout_b = &grad_out[b * out_stride..(b + 1) * out_stride];
                let x_b = &x[b * in_stride..(b + 1) * in_stride];
                let (dw_b, db_b, colg) = sample_weight_grads(x_b, gout_b, &wmat, sp, true);
                col2im_add(&colg.expect("colg requested"), sp, dx_b);
                (dw_b, db_b)
            })
            .collect(),
        None => (0..sp.n)
            .into_par_iter()
            .map(|b| {
                let gout_b = &grad_out[b * out_stride..(b + 1) * out_stride];
                let x_b = &x[b * in_stride..(b + 1) * in_stride];
                let (dw_b, db_b, _) = sample_weight_grads(x_b, gout_b, &wmat, sp, false);
                (dw_b, db_b)
            })
            .collect(),
    };
    for (dw_b, db_b) in parts {
        for (d, s) in dw.iter_mut().zip(dw_b) {
            *d += s;
        }
        for (d, s) in db.iter_mut().zip(db_b) {
            *d += s;
        }
    }
}

fn sample_weight_grads<S: Scalar>(
    x_b: &[S],
    gout_b: &[S],
    wmat: &ArrayView2<'_, S>,
    sp: &ConvSpec,
    need_colg: bool,
) -> (Vec<S>, Vec<S>, Option<Vec<S>>) {
    let l = sp.oh * sp.ow;
    let kk = sp.cin * sp.k * sp.k;
    let mut col = vec![S::zero(); kk * l];
    im2col(x_b, sp, &mut col);
    let colm = ArrayView2::from_shape((kk, l), &col[..]).expect("col layout");
    let goutm = ArrayView2::from_shape((sp.cout, l), gout_b).expect("gout layout");

    let mut dw_b = vec![S::zero(); sp.cout * kk];
    {
        let mut dwm = ArrayViewMut2::from_shape((sp.cout, kk), &mut dw_b[..]).expect("dw layout");
        general_mat_mul(S::one(), &goutm, &colm.t(), S::zero(), &mut dwm);
    }
    let db_b: Vec<S> = gout_b.chunks(l).map(|row| row.iter().copied().sum()).collect();

    let colg = if need_colg {
        let mut colg = vec![S::zero(); kk * l];
        let mut colgm = ArrayViewMut2::from_shape((kk, l), &mut colg[..]).expect("colg layout");
        general_mat_mul(S::one(), &wmat.t(), &goutm, S::zero(), &mut colgm);
        Some(colg)
    } else {
        None
    };
    (dw_b, db_b, colg)
}

/// Per-axis bilinear interpolation table for half-pixel-center sampling with
/// edge clamping: src = (dst + 0.5) * in/out - 0.5, clamped to [0, in-1].
pub(crate) struct AxisMap {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    /// Weight attached to `i1`; `i0` gets `1 - w1`.
    pub w1: Vec<f64>,
}

pub(crate) fn axis_map(in_len: usize, out_len: usize) -> AxisMap {
    let scale = in_len as f64 / out_len as f64;
    let mut i0 = Vec::with_capacity(out_len);
    let mut i1 = Vec::with_capacity(out_len);
    let mut w1 = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        i0.push(lo);
        i1.push(hi);
        w1.push(s - lo as f64);
    }
    AxisMap { i0, i1, w1 }
}

pub(crate) fn bilinear_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let ym = axis_map(xs.h, oh);
    let xm = axis_map(xs.w, ow);
    let planes = xs.n * xs.c;
    let in_plane = xs.h * xs.w;
    let out_plane = oh * ow;
    out.par_chunks_mut(out_plane).enumerate().for_each(|(p, dst)| {
        let _ = planes;
        let src = &x[p * in_plane..(p + 1) * in_plane];
        let mut di = 0;
        for oy in 0..oh {
            let (y0, y1, wy) = (ym.i0[oy], ym.i1[oy], ym.w1[oy]);
            let r0 = &src[y0 * xs.w..(y0 + 1) * xs.w];
            let r1 = &src[y1 * xs.w..(y1 + 1) * xs.w];
            for ox in 0..ow {
                let (x0, x1, wx) = (xm.i0[ox], xm.i1[ox], xm.w1[ox]);
                let top = r0[x0].as_f64() * (1.0 - wx) + r0[x1].as_f64() * wx;
                let bot = r1[x0].as_f64() * (1.0 - wx) + r1[x1].as_f64() * wx;
                dst[di] = S::from_f64(top * (1.0 - wy) + bot * wy);
                di += 1;
            }
        }
    });
}

pub(crate) fn bilinear_backward<S: Scalar>(
    grad_out: &[S],
    xs: Shape,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let ym = axis_map(xs.h, oh);
    let xm = axis_map(xs.w, ow);
    let in_plane = xs.h * xs.w;
    let out_plane = oh * ow;
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(p, dxp)| {
        let g = &grad_out[p * out_plane..(p + 1) * out_plane];
        let mut gi = 0;
        for oy in 0..oh {
            let (y0, y1, wy) = (ym.i0[oy], ym.i1[oy], ym.w1[oy]);
            for ox in 0..ow {
                let (x0, x1, wx) = (xm.i0[ox], xm.i1[ox], xm.w1[ox]);
                let gv = g[gi].as_f64();
                gi += 1;
                dxp[y0 * xs.w + x0] += S::from_f64(gv * (1.0 - wy) * (1.0 - wx));
                dxp[y0 * xs.w + x1] += S::from_f64(gv * (1.0 - wy) * wx);
                dxp[y1 * xs.w + x0] += S::from_f64(gv * wy * (1.0 - wx));
                dxp[y1 * xs.w + x1] += S::from_f64(gv * wy * wx);
            }
        }
    });
}

pub(crate) fn avg_pool_forward<S: Scalar>(x: &[S], xs: Shape, fy: usize, fx: usize, out: &mut [S]) {
    let oh = xs.h / fy;
    let ow = xs.w / fx;
    let in_plane = xs.h * xs.w;
    let out_plane = oh * ow;
    let inv = S::from_f64(1.0 / (fy * fx) as f64);
    out.par_chunks_mut(out_plane).enumerate().for_each(|(p, dst)| {
        let src = &x[p * in_plane..(p + 1) * in_plane];
        let mut di = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..fy {
                    let row = (oy * fy + dy) * xs.w + ox * fx;
                    for dx in 0..fx {
                        acc += src[row + dx];
                    }
                }
                dst[di] = acc * inv;
                di += 1;
            }
        }
    });
}

pub(crate) fn avg_pool_backward<S: Scalar>(
    grad_out: &[S],
    xs: Shape,
    fy: usize,
    fx: usize,
    dx: &mut [S],
) {
    let oh = xs.h / fy;
    let ow = xs.w / fx;
    let in_plane = xs.h * xs.w;
    let out_plane = oh * ow;
    let inv = S::from_f64(1.0 / (fy * fx) as f64);
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(p, dxp)| {
        let g = &grad_out[p * out_plane..(p + 1) * out_plane];
        let mut gi = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[gi] * inv;
                gi += 1;
                for dy in 0..fy {
                    let row = (oy * fy + dy) * xs.w + ox * fx;
                    for dx_ in 0..fx {
                        dxp[row + dx_] += gv;
                    }
                }
            }
        }
    });
}

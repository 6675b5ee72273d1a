//! Forward and adjoint kernels on flat row-major buffers.
//!
//! Every kernel computes each output element in a fixed order, so results
//! are bit-identical whether or not rayon runs the outer loops in parallel.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
}

impl ConvShape {
    fn cig(&self) -> usize {
        self.c_in / self.groups
    }
    fn cog(&self) -> usize {
        self.c_out / self.groups
    }
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Visit every (output row, input row, column offset) overlap of one kernel
/// tap with "same" padding.
#[inline]
fn for_tap(
    s: &ConvShape,
    ki: usize,
    kj: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let dy = ki as isize - (s.kh / 2) as isize;
    let dx = kj as isize - (s.kw / 2) as isize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (s.w as isize - dx).min(s.w as isize).max(0) as usize;
    if x_lo >= x_hi {
        return;
    }
    for y in 0..s.h {
        let iy = y as isize + dy;
        if iy < 0 || iy >= s.h as isize {
            continue;
        }
        let ix0 = (x_lo as isize + dx) as usize;
        f(y, iy as usize, x_lo, ix0, x_hi - x_lo);
    }
}

/// Stride-1 "same" convolution, `x [n, c_in, h, w]`, `w [c_out, c_in/g, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(s: &ConvShape, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane = s.plane();
    let (cig, cog) = (s.cig(), s.cog());
    let mut out = vec![T::zero(); s.n * s.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o_plane)| {
        let (bi, o) = (idx / s.c_out, idx % s.c_out);
        if let Some(b) = b {
            o_plane.fill(b[o]);
        }
        let grp = o / cog;
        for c in 0..cig {
            let ic = grp * cig + c;
            let x_plane = &x[(bi * s.c_in + ic) * plane..][..plane];
            for ki in 0..s.kh {
                for kj in 0..s.kw {
                    let wv = w[((o * cig + c) * s.kh + ki) * s.kw + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    for_tap(s, ki, kj, |y, iy, ox, ix, len| {
                        let dst = &mut o_plane[y * s.w + ox..][..len];
                        let src = &x_plane[iy * s.w + ix..][..len];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    });
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`.
pub fn conv2d_backward<T: Scalar>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let dx = need_dx.then(|| conv2d_backward_input(s, w, dy));
    let (dw, db) = conv2d_backward_weight(s, x, dy, w.len());
    (dx, dw, db)
}

fn conv2d_backward_input<T: Scalar>(s: &ConvShape, w: &[T], dy: &[T]) -> Vec<T> {
    let plane = s.plane();
    let (cig, cog) = (s.cig(), s.cog());
    let mut dx = vec![T::zero(); s.n * s.c_in * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, dx_plane)| {
        let (bi, ic) = (idx / s.c_in, idx % s.c_in);
        let grp = ic / cig;
        let c = ic % cig;
        for o in grp * cog..(grp + 1) * cog {
            let dy_plane = &dy[(bi * s.c_out + o) * plane..][..plane];
            for ki in 0..s.kh {
                for kj in 0..s.kw {
                    let wv = w[((o * cig + c) * s.kh + ki) * s.kw + kj];
                    for_tap(s, ki, kj, |y, iy, ox, ix, len| {
                        let src = &dy_plane[y * s.w + ox..][..len];
                        let dst = &mut dx_plane[iy * s.w + ix..][..len];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d += wv * g;
                        }
                    });
                }
            }
        }
    });
    dx
}

fn conv2d_backward_weight<T: Scalar>(s: &ConvShape, x: &[T], dy: &[T], w_len: usize) -> (Vec<T>, Vec<T>) {
    let plane = s.plane();
    let (cig, cog) = (s.cig(), s.cog());
    let ksz = cig * s.kh * s.kw;
    let mut dw = vec![T::zero(); w_len];
    let mut db = vec![T::zero(); s.c_out];
    dw.par_chunks_mut(ksz)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(o, (dw_o, db_o))| {
            let grp = o / cog;
            for bi in 0..s.n {
                let dy_plane = &dy[(bi * s.c_out + o) * plane..][..plane];
                *db_o += dy_plane.iter().copied().sum::<T>();
                for c in 0..cig {
                    let ic = grp * cig + c;
                    let x_plane = &x[(bi * s.c_in + ic) * plane..][..plane];
                    for ki in 0..s.kh {
                        for kj in 0..s.kw {
                            let mut acc = T::zero();
                            for_tap(s, ki, kj, |y, iy, ox, ix, len| {
                                let g = &dy_plane[y * s.w + ox..][..len];
                                let v = &x_plane[iy * s.w + ix..][..len];
                                for (&a, &b) in g.iter().zip(v) {
                                    acc += a * b;
                                }
                            });
                            dw_o[(c * s.kh + ki) * s.kw + kj] += acc;
                        }
                    }
                }
            }
        });
    (dw, db)
}

/// Non-overlapping average pooling over the last two axes of `[nc, h, w]`.
pub fn avg_pool_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize, kt: usize, kf: usize) -> Vec<T> {
    let (oh, ow) = (h / kt, w / kf);
    let inv = T::one() / T::from_usize_lossy(kt * kf);
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for a in 0..kt {
                    for b in 0..kf {
                        acc += x[(p * h + i * kt + a) * w + j * kf + b];
                    }
                }
                out[(p * oh + i) * ow + j] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &[T], nc: usize, h: usize, w: usize, kt: usize, kf: usize) -> Vec<T> {
    let (oh, ow) = (h / kt, w / kf);
    let inv = T::one() / T::from_usize_lossy(kt * kf);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[(p * oh + i) * ow + j] * inv;
                for a in 0..kt {
                    for b in 0..kf {
                        dx[(p * h + i * kt + a) * w + j * kf + b] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Statistics of one normalisation unit.
#[derive(Debug, Clone, Copy)]
pub struct NormStat<T> {
    pub mean: T,
    pub rstd: T,
}

/// Group norm over `x [n, c, s]`; `gamma`/`beta` per channel.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<NormStat<T>>) {
    let cpg = c / groups;
    let m = T::from_usize_lossy(cpg * s);
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for (u, (xg, yg)) in x.chunks(cpg * s).zip(y.chunks_mut(cpg * s)).enumerate() {
        let mean = xg.iter().copied().sum::<T>() / m;
        let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let rstd = T::one() / (var + eps).sqrt();
        let g0 = (u % groups) * cpg;
        for (ci, (xc, yc)) in xg.chunks(s).zip(yg.chunks_mut(s)).enumerate() {
            let (ga, be) = (gamma[g0 + ci], beta[g0 + ci]);
            for (o, &v) in yc.iter_mut().zip(xc) {
                *o = (v - mean) * rstd * ga + be;
            }
        }
        stats.push(NormStat { mean, rstd });
    }
    (y, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    stats: &[NormStat<T>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = T::from_usize_lossy(cpg * s);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (u, st) in stats.iter().enumerate() {
        let base = u * cpg * s;
        let g0 = (u % groups) * cpg;
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for ci in 0..cpg {
            let ga = gamma[g0 + ci];
            for k in 0..s {
                let i = base + ci * s + k;
                let xh = (x[i] - st.mean) * st.rstd;
                dgamma[g0 + ci] += dy[i] * xh;
                dbeta[g0 + ci] += dy[i];
                let dxh = dy[i] * ga;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
        }
        for ci in 0..cpg {
            let ga = gamma[g0 + ci];
            for k in 0..s {
                let i = base + ci * s + k;
                let xh = (x[i] - st.mean) * st.rstd;
                let dxh = dy[i] * ga;
                dx[i] = st.rstd * (dxh - sum_dxh / m - xh * sum_dxh_xh / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over the last axis of `x [rows, d]`.
pub fn layer_norm_forward<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<NormStat<T>>) {
    let rows = x.len() / d;
    // A row is a one-group, one-channel-per-element group norm with the
    // affine parameters indexed along the row.
    let m = T::from_usize_lossy(d);
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() / m;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let rstd = T::one() / (var + eps).sqrt();
        for k in 0..d {
            yr[k] = (xr[k] - mean) * rstd * gamma[k] + beta[k];
        }
        stats.push(NormStat { mean, rstd });
    }
    (y, stats)
}

pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    d: usize,
    gamma: &[T],
    stats: &[NormStat<T>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize_lossy(d);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for (r, st) in stats.iter().enumerate() {
        let (xr, dyr) = (&x[r * d..][..d], &dy[r * d..][..d]);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for k in 0..d {
            let xh = (xr[k] - st.mean) * st.rstd;
            dgamma[k] += dyr[k] * xh;
            dbeta[k] += dyr[k];
            let dxh = dyr[k] * gamma[k];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        for k in 0..d {
            let xh = (xr[k] - st.mean) * st.rstd;
            dx[r * d + k] = st.rstd * (dyr[k] * gamma[k] - sum_dxh / m - xh * sum_dxh_xh / m);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y = x·Wᵀ + b` for `x [rows, d_in]`, `W [d_out, d_in]`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, d_in: usize, d_out: usize) -> Vec<T> {
    let rows = x.len() / d_in;
    let mut y = vec![T::zero(); rows * d_out];
    y.par_chunks_mut(d_out).enumerate().for_each(|(r, yr)| {
        let xr = &x[r * d_in..][..d_in];
        for (o, out) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..][..d_in];
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *out = acc;
        }
    });
    y
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], d_in: usize, d_out: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d_in;
    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(d_in).enumerate().for_each(|(r, dxr)| {
        let dyr = &dy[r * d_out..][..d_out];
        for (o, &g) in dyr.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (d, &wv) in dxr.iter_mut().zip(&w[o * d_in..][..d_in]) {
                *d += g * wv;
            }
        }
    });
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); d_out];
    dw.par_chunks_mut(d_in)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(o, (dwr, dbo))| {
            for r in 0..rows {
                let g = dy[r * d_out + o];
                *dbo += g;
                if g == T::zero() {
                    continue;
                }
                for (d, &xv) in dwr.iter_mut().zip(&x[r * d_in..][..d_in]) {
                    *d += g * xv;
                }
            }
        });
    (dx, dw, db)
}

/// Multi-head scaled dot-product attention core on `[batch, seq, d]`.
/// Returns the context and the attention probabilities `[batch, heads, seq, seq]`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut ctx = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    ctx.par_chunks_mut(seq * d)
        .zip(probs.par_chunks_mut(heads * seq * seq))
        .enumerate()
        .for_each(|(b, (cb, pb))| {
            let off = b * seq * d;
            for h in 0..heads {
                let ho = h * dh;
                for i in 0..seq {
                    let row = &mut pb[(h * seq + i) * seq..][..seq];
                    let qi = &q[off + i * d + ho..][..dh];
                    let mut max = T::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &k[off + j * d + ho..][..dh];
                        let mut s = T::zero();
                        for (&a, &c) in qi.iter().zip(kj) {
                            s += a * c;
                        }
                        *r = s * scale;
                        max = max.max(*r);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    let ci = &mut cb[i * d + ho..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &v[off + j * d + ho..][..dh];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += p * vv;
                        }
                    }
                }
            }
        });
    (ctx, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    dq.par_chunks_mut(seq * d)
        .zip(dk.par_chunks_mut(seq * d))
        .zip(dv.par_chunks_mut(seq * d))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let off = b * seq * d;
            let mut dp = vec![T::zero(); seq];
            for h in 0..heads {
                let ho = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &dctx[off + i * d + ho..][..dh];
                    // dV and dP.
                    let mut dot = T::zero();
                    for j in 0..seq {
                        let vj = &v[off + j * d + ho..][..dh];
                        let dvj = &mut dvb[j * d + ho..][..dh];
                        let mut s = T::zero();
                        for e in 0..dh {
                            dvj[e] += p[j] * gi[e];
                            s += gi[e] * vj[e];
                        }
                        dp[j] = s;
                        dot += s * p[j];
                    }
                    // Softmax adjoint, then the scaled q·k products.
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &k[off + j * d + ho..][..dh];
                        let qi = &q[off + i * d + ho..][..dh];
                        for e in 0..dh {
                            dqb[i * d + ho + e] += ds * kj[e];
                            dkb[j * d + ho + e] += ds * qi[e];
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}

/// Tanh-approximated GELU and its derivative.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], dims: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return (out, out_dims);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    (out, out_dims)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

//! 3-D max and average pooling.

use super::Tensor;
use crate::error::{Error, Result};

fn pool_out(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::config("pool kernel/stride must be positive"));
    }
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::config(format!(
            "pool window {k} larger than padded extent {padded}"
        )));
    }
    let out = (padded - k) / s + 1;
    if out == 0 {
        return Err(Error::config("pooling yields a zero-size output"));
    }
    Ok(out)
}

struct PoolGeom {
    maps: usize, // N*C planes
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
}

fn pool_geom(
    op: &'static str,
    x: &Tensor,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<(PoolGeom, Vec<usize>)> {
    let rank = x.rank();
    if rank != 4 && rank != 5 {
        return Err(Error::shape(op, format!("input must be rank 4 or 5, got {:?}", x.shape())));
    }
    let s = x.shape();
    let (t, h, w) = (s[rank - 3], s[rank - 2], s[rank - 1]);
    let maps: usize = s[..rank - 3].iter().product();
    let to = pool_out(t, kernel.0, stride.0, padding.0)?;
    let ho = pool_out(h, kernel.1, stride.1, padding.1)?;
    let wo = pool_out(w, kernel.2, stride.2, padding.2)?;
    let mut out_shape = s.to_vec();
    out_shape[rank - 3] = to;
    out_shape[rank - 2] = ho;
    out_shape[rank - 1] = wo;
    Ok((
        PoolGeom {
            maps,
            t,
            h,
            w,
            to,
            ho,
            wo,
            kernel,
            stride,
            padding,
        },
        out_shape,
    ))
}

/// Window bounds along one axis: intersection of the padded window with the
/// real data, as `[lo, hi)` input indices.
fn window(o: usize, k: usize, s: usize, p: usize, extent: usize) -> (usize, usize) {
    let start = o * s;
    let lo = start.saturating_sub(p);
    let hi = (start + k).saturating_sub(p).min(extent);
    (lo, hi)
}

/// Max over each window. Padded positions act as negative infinity and are
/// never selected over real data.
pub fn max_pool3d(
    x: &Tensor,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor> {
    let (g, out_shape) = pool_geom("max_pool3d", x, kernel, stride, padding)?;
    let xd = x.data();
    let out_n = g.maps * g.to * g.ho * g.wo;
    let mut out = vec![0.0; out_n];
    // Argmax input offset per output cell, for the backward scatter.
    let mut argmax = vec![0usize; out_n];
    let in_plane = g.t * g.h * g.w;
    let mut oi = 0;
    for m in 0..g.maps {
        let base = m * in_plane;
        for to in 0..g.to {
            let (t_lo, t_hi) = window(to, g.kernel.0, g.stride.0, g.padding.0, g.t);
            for ho in 0..g.ho {
                let (h_lo, h_hi) = window(ho, g.kernel.1, g.stride.1, g.padding.1, g.h);
                for wo in 0..g.wo {
                    let (w_lo, w_hi) = window(wo, g.kernel.2, g.stride.2, g.padding.2, g.w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ti in t_lo..t_hi {
                        for hi in h_lo..h_hi {
                            let row = base + (ti * g.h + hi) * g.w;
                            for wi in w_lo..w_hi {
                                let v = xd[row + wi];
                                if v > best {
                                    best = v;
                                    best_i = row + wi;
                                }
                            }
                        }
                    }
                    debug_assert!(best.is_finite(), "max_pool3d window held no real data");
                    out[oi] = best;
                    argmax[oi] = best_i;
                    oi += 1;
                }
            }
        }
    }
    let px = x.clone();
    let in_numel = x.numel();
    Ok(Tensor::from_op(out_shape, out, &[x], move |_| {
        Box::new(move |gout| {
            let mut gx = vec![0.0; in_numel];
            for (g, &i) in gout.iter().zip(&argmax) {
                gx[i] += g;
            }
            px.accumulate_grad_owned(gx);
        })
    }))
}

/// Mean over each window, excluding padded positions from the denominator,
/// so constant inputs stay constant at borders.
pub fn avg_pool3d(
    x: &Tensor,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor> {
    let (g, out_shape) = pool_geom("avg_pool3d", x, kernel, stride, padding)?;
    let xd = x.data();
    let out_n = g.maps * g.to * g.ho * g.wo;
    let mut out = vec![0.0; out_n];
    let in_plane = g.t * g.h * g.w;
    let mut oi = 0;
    for m in 0..g.maps {
        let base = m * in_plane;
        for to in 0..g.to {
            let (t_lo, t_hi) = window(to, g.kernel.0, g.stride.0, g.padding.0, g.t);
            for ho in 0..g.ho {
                let (h_lo, h_hi) = window(ho, g.kernel.1, g.stride.1, g.padding.1, g.h);
                for wo in 0..g.wo {
                    let (w_lo, w_hi) = window(wo, g.kernel.2, g.stride.2, g.padding.2, g.w);
                    let count = (t_hi - t_lo) * (h_hi - h_lo) * (w_hi - w_lo);
                    let mut s = 0.0;
                    for ti in t_lo..t_hi {
                        for hi in h_lo..h_hi {
                            let row = base + (ti * g.h + hi) * g.w;
                            s += xd[row + w_lo..row + w_hi].iter().sum::<f64>();
                        }
                    }
                    out[oi] = s / count as f64;
                    oi += 1;
                }
            }
        }
    }
    let px = x.clone();
    let in_numel = x.numel();
    Ok(Tensor::from_op(out_shape, out, &[x], move |_| {
        Box::new(move |gout| {
            let mut gx = vec![0.0; in_numel];
            let mut oi = 0;
            for m in 0..g.maps {
                let base = m * in_plane;
                for to in 0..g.to {
                    let (t_lo, t_hi) = window(to, g.kernel.0, g.stride.0, g.padding.0, g.t);
                    for ho in 0..g.ho {
                        let (h_lo, h_hi) = window(ho, g.kernel.1, g.stride.1, g.padding.1, g.h);
                        for wo in 0..g.wo {
                            let (w_lo, w_hi) = window(wo, g.kernel.2, g.stride.2, g.padding.2, g.w);
                            let count = (t_hi - t_lo) * (h_hi - h_lo) * (w_hi - w_lo);
                            let gshare = gout[oi] / count as f64;
                            for ti in t_lo..t_hi {
                                for hi in h_lo..h_hi {
                                    let row = base + (ti * g.h + hi) * g.w;
                                    for gxe in &mut gx[row + w_lo..row + w_hi] {
                                        *gxe += gshare;
                                    }
                                }
                            }
                            oi += 1;
                        }
                    }
                }
            }
            px.accumulate_grad_owned(gx);
        })
    }))
}

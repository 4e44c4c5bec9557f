//! Dilated 3-D convolution (cross-correlation, no kernel flip).

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::parallel_over;
use rayon::prelude::*;

/// Kernel geometry for one convolution: extents, stride, dilation, and
/// symmetric zero padding per axis, each in (t, h, w) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub dilation: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        dilation: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> ConvSpec {
        ConvSpec {
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    /// Cube kernel `k x k x k` with unit stride/dilation and padding that
    /// preserves extents; `k` must be odd.
    pub fn same_cube(k: usize) -> Result<ConvSpec> {
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "cube kernel extent {k} must be odd for symmetric padding"
            )));
        }
        let p = (k - 1) / 2;
        Ok(ConvSpec::new((k, k, k), (1, 1, 1), (1, 1, 1), (p, p, p)))
    }

    /// Purely temporal `k x 1 x 1` kernel with the given temporal dilation
    /// and padding that preserves the temporal extent; `k` must be odd.
    pub fn temporal(k: usize, dilation: usize) -> Result<ConvSpec> {
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "temporal kernel extent {k} must be odd for symmetric padding"
            )));
        }
        let p = dilation * (k - 1) / 2;
        ConvSpec::validate_positive(dilation)?;
        Ok(ConvSpec::new((k, 1, 1), (1, 1, 1), (dilation, 1, 1), (p, 0, 0)))
    }

    fn validate_positive(v: usize) -> Result<()> {
        if v == 0 {
            return Err(Error::config("stride/dilation must be positive"));
        }
        Ok(())
    }

    fn axis_out(input: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
        let span = d.checked_mul(k.checked_sub(1)?)? + 1;
        let padded = input + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output extents for a `(t, h, w)` input, or a configuration error when
    /// any axis collapses to zero.
    pub fn out_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        for &v in &[self.stride.0, self.stride.1, self.stride.2] {
            ConvSpec::validate_positive(v)?;
        }
        for &v in &[self.dilation.0, self.dilation.1, self.dilation.2] {
            ConvSpec::validate_positive(v)?;
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.2 == 0 {
            return Err(Error::config("kernel extents must be positive"));
        }
        let t = ConvSpec::axis_out(input.0, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0);
        let h = ConvSpec::axis_out(input.1, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1);
        let w = ConvSpec::axis_out(input.2, self.kernel.2, self.stride.2, self.dilation.2, self.padding.2);
        match (t, h, w) {
            (Some(t), Some(h), Some(w)) if t > 0 && h > 0 && w > 0 => Ok((t, h, w)),
            _ => Err(Error::config(format!(
                "convolution of {input:?} with {self:?} yields a zero-size output"
            ))),
        }
    }
}

/// Output index range `[lo, hi)` such that `o*stride + offset` stays inside
/// `[0, in_extent)`, clamped to `[0, out_extent)`.
fn valid_range(in_extent: usize, out_extent: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = in_extent as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

struct Geom {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    to: usize,
    ho: usize,
    wo: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

/// Dilated 3-D convolution of `input` with `weight[Co, Ci, kt, kh, kw]` and
/// optional `bias[Co]`.
///
/// `input` is `[Ci, T, H, W]` or `[N, Ci, T, H, W]`; the output keeps the
/// input's rank. Accumulation runs in f64 with a fixed tap order, so results
/// do not depend on the kernel thread count.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let rank = input.rank();
    if rank != 4 && rank != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("input must be rank 4 or 5, got {:?}", input.shape()),
        ));
    }
    if weight.rank() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("weight must be rank 5 [Co,Ci,kt,kh,kw], got {:?}", weight.shape()),
        ));
    }
    let (n, ci_in) = if rank == 5 {
        (input.shape()[0], input.shape()[1])
    } else {
        (1, input.shape()[0])
    };
    let (t, h, w) = {
        let s = input.shape();
        (s[rank - 3], s[rank - 2], s[rank - 1])
    };
    let ws = weight.shape();
    let (co, ci_w, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if ci_w != ci_in {
        return Err(Error::shape(
            "conv3d",
            format!("input has {ci_in} channels, weight expects {ci_w}"),
        ));
    }
    if (kt, kh, kw) != spec.kernel {
        return Err(Error::shape(
            "conv3d",
            format!("weight kernel {:?} differs from spec kernel {:?}", (kt, kh, kw), spec.kernel),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?}, expected [{co}]", b.shape()),
            ));
        }
    }
    let (to, ho, wo) = spec.out_shape((t, h, w))?;

    // Kernel-facing geometry. Axes the kernel does not mix (extent 1, unit
    // stride, no padding) are fused into their neighbor so the inner loops
    // run over long contiguous spans. Output values are unchanged.
    let (mut gt, mut gh, mut gw_ax) = (t, h, w);
    let (mut gto, mut gho, mut gwo) = (to, ho, wo);
    if kh == 1 && kw == 1 && spec.stride.1 == 1 && spec.stride.2 == 1
        && spec.padding.1 == 0 && spec.padding.2 == 0
    {
        gh = 1;
        gho = 1;
        gw_ax = h * w;
        gwo = ho * wo;
        if kt == 1 && spec.stride.0 == 1 && spec.padding.0 == 0 {
            gt = 1;
            gto = 1;
            gw_ax = t * h * w;
            gwo = to * ho * wo;
        }
    }
    let geom = Geom {
        ci: ci_in,
        t: gt,
        h: gh,
        w: gw_ax,
        co,
        to: gto,
        ho: gho,
        wo: gwo,
        kt,
        kh,
        kw,
    };
    let mut out = vec![0.0; n * co * to * ho * wo];
    forward_kernel(
        input.data(),
        weight.data(),
        bias.map(|b| b.data()),
        spec,
        &geom,
        n,
        &mut out,
    );

    let mut out_shape = input.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 4] = co;
    out_shape[r - 3] = to;
    out_shape[r - 2] = ho;
    out_shape[r - 1] = wo;

    let parents: Vec<&Tensor> = match bias {
        Some(b) => vec![input, weight, b],
        None => vec![input, weight],
    };
    let (px, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let (xd, wd) = (input.data_rc(), weight.data_rc());
    let spec = *spec;
    Ok(Tensor::from_op(out_shape, out, &parents, move |_| {
        Box::new(move |gout| {
            if px.needs_grad() {
                let mut gx = vec![0.0; xd.len()];
                backward_input(gout, &wd, &spec, &geom, n, &mut gx);
                px.accumulate_grad_owned(gx);
            }
            if pw.needs_grad() {
                let mut gw = vec![0.0; wd.len()];
                backward_weight(gout, &xd, &spec, &geom, n, &mut gw);
                pw.accumulate_grad_owned(gw);
            }
            if let Some(pb) = &pb {
                if pb.needs_grad() {
                    let per_co = geom.to * geom.ho * geom.wo;
                    let mut gb = vec![0.0; geom.co];
                    for nn in 0..n {
                        for c in 0..geom.co {
                            let base = (nn * geom.co + c) * per_co;
                            gb[c] += gout[base..base + per_co].iter().sum::<f64>();
                        }
                    }
                    pb.accumulate_grad_owned(gb);
                }
            }
        })
    }))
}

fn forward_kernel(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
    g: &Geom,
    n: usize,
    out: &mut [f64],
) {
    let per_out = g.to * g.ho * g.wo;
    let run = |nc: usize, chunk: &mut [f64]| {
        let (nn, co) = (nc / g.co, nc % g.co);
        if let Some(b) = bias {
            chunk.fill(b[co]);
        }
        forward_one(x, w, spec, g, nn, co, chunk);
    };
    if parallel_over(n * g.co) {
        out.par_chunks_mut(per_out)
            .enumerate()
            .for_each(|(nc, chunk)| run(nc, chunk));
    } else {
        for (nc, chunk) in out.chunks_mut(per_out).enumerate() {
            run(nc, chunk);
        }
    }
}

/// One (sample, output-channel) plane. Taps iterate outermost so the inner
/// width loop is a contiguous axpy when the width stride is 1.
fn forward_one(x: &[f64], w: &[f64], spec: &ConvSpec, g: &Geom, n: usize, co: usize, out: &mut [f64]) {
    let (st, sh, sw) = spec.stride;
    let (dt, dh, dw) = spec.dilation;
    let (pt, ph, pw_pad) = spec.padding;
    let in_plane = g.t * g.h * g.w;
    for ci in 0..g.ci {
        let x_base = (n * g.ci + ci) * in_plane;
        for kt in 0..g.kt {
            let off_t = (kt * dt) as isize - pt as isize;
            let (t_lo, t_hi) = valid_range(g.t, g.to, st, off_t);
            for kh in 0..g.kh {
                let off_h = (kh * dh) as isize - ph as isize;
                let (h_lo, h_hi) = valid_range(g.h, g.ho, sh, off_h);
                for kw in 0..g.kw {
                    let off_w = (kw * dw) as isize - pw_pad as isize;
                    let (w_lo, w_hi) = valid_range(g.w, g.wo, sw, off_w);
                    if t_lo >= t_hi || h_lo >= h_hi || w_lo >= w_hi {
                        continue;
                    }
                    let wv = w[(((co * g.ci + ci) * g.kt + kt) * g.kh + kh) * g.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for to in t_lo..t_hi {
                        let ti = (to * st) as isize + off_t;
                        let x_t = x_base + ti as usize * g.h * g.w;
                        for ho in h_lo..h_hi {
                            let hi = (ho * sh) as isize + off_h;
                            let x_row = x_t + hi as usize * g.w;
                            let o_row = (to * g.ho + ho) * g.wo;
                            if sw == 1 {
                                let xi0 = (x_row as isize + (w_lo * sw) as isize + off_w) as usize;
                                let xs = &x[xi0..xi0 + (w_hi - w_lo)];
                                let os = &mut out[o_row + w_lo..o_row + w_hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for wo_i in w_lo..w_hi {
                                    let wi = (wo_i * sw) as isize + off_w;
                                    out[o_row + wo_i] += wv * x[x_row + wi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_input(gout: &[f64], w: &[f64], spec: &ConvSpec, g: &Geom, n: usize, gx: &mut [f64]) {
    let per_in = g.ci * g.t * g.h * g.w;
    let run = |nn: usize, gx_n: &mut [f64]| {
        backward_input_one(gout, w, spec, g, nn, gx_n);
    };
    if parallel_over(n) {
        gx.par_chunks_mut(per_in)
            .enumerate()
            .for_each(|(nn, chunk)| run(nn, chunk));
    } else {
        for (nn, chunk) in gx.chunks_mut(per_in).enumerate() {
            run(nn, chunk);
        }
    }
}

fn backward_input_one(gout: &[f64], w: &[f64], spec: &ConvSpec, g: &Geom, n: usize, gx_n: &mut [f64]) {
    let (st, sh, sw) = spec.stride;
    let (dt, dh, dw) = spec.dilation;
    let (pt, ph, pw_pad) = spec.padding;
    let out_plane = g.to * g.ho * g.wo;
    for co in 0..g.co {
        let go_base = (n * g.co + co) * out_plane;
        for ci in 0..g.ci {
            let gx_base = ci * g.t * g.h * g.w;
            for kt in 0..g.kt {
                let off_t = (kt * dt) as isize - pt as isize;
                let (t_lo, t_hi) = valid_range(g.t, g.to, st, off_t);
                for kh in 0..g.kh {
                    let off_h = (kh * dh) as isize - ph as isize;
                    let (h_lo, h_hi) = valid_range(g.h, g.ho, sh, off_h);
                    for kw in 0..g.kw {
                        let off_w = (kw * dw) as isize - pw_pad as isize;
                        let (w_lo, w_hi) = valid_range(g.w, g.wo, sw, off_w);
                        if t_lo >= t_hi || h_lo >= h_hi || w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[(((co * g.ci + ci) * g.kt + kt) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for to in t_lo..t_hi {
                            let ti = ((to * st) as isize + off_t) as usize;
                            for ho in h_lo..h_hi {
                                let hi = ((ho * sh) as isize + off_h) as usize;
                                let gx_row = gx_base + (ti * g.h + hi) * g.w;
                                let go_row = go_base + (to * g.ho + ho) * g.wo;
                                if sw == 1 {
                                    let xi0 = (gx_row as isize + (w_lo * sw) as isize + off_w) as usize;
                                    let gxs = &mut gx_n[xi0..xi0 + (w_hi - w_lo)];
                                    let gos = &gout[go_row + w_lo..go_row + w_hi];
                                    for (gxe, goe) in gxs.iter_mut().zip(gos) {
                                        *gxe += wv * goe;
                                    }
                                } else {
                                    for wo_i in w_lo..w_hi {
                                        let wi = ((wo_i * sw) as isize + off_w) as usize;
                                        gx_n[gx_row + wi] += wv * gout[go_row + wo_i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_weight(gout: &[f64], x: &[f64], spec: &ConvSpec, g: &Geom, n: usize, gw: &mut [f64]) {
    let per_co = g.ci * g.kt * g.kh * g.kw;
    let run = |co: usize, gw_co: &mut [f64]| {
        backward_weight_one(gout, x, spec, g, n, co, gw_co);
    };
    if parallel_over(g.co) {
        gw.par_chunks_mut(per_co)
            .enumerate()
            .for_each(|(co, chunk)| run(co, chunk));
    } else {
        for (co, chunk) in gw.chunks_mut(per_co).enumerate() {
            run(co, chunk);
        }
    }
}

fn backward_weight_one(
    gout: &[f64],
    x: &[f64],
    spec: &ConvSpec,
    g: &Geom,
    n: usize,
    co: usize,
    gw_co: &mut [f64],
) {
    let (st, sh, sw) = spec.stride;
    let (dt, dh, dw) = spec.dilation;
    let (pt, ph, pw_pad) = spec.padding;
    let in_plane = g.t * g.h * g.w;
    let out_plane = g.to * g.ho * g.wo;
    for ci in 0..g.ci {
        for kt in 0..g.kt {
            let off_t = (kt * dt) as isize - pt as isize;
            let (t_lo, t_hi) = valid_range(g.t, g.to, st, off_t);
            for kh in 0..g.kh {
                let off_h = (kh * dh) as isize - ph as isize;
                let (h_lo, h_hi) = valid_range(g.h, g.ho, sh, off_h);
                for kw in 0..g.kw {
                    let off_w = (kw * dw) as isize - pw_pad as isize;
                    let (w_lo, w_hi) = valid_range(g.w, g.wo, sw, off_w);
                    if t_lo >= t_hi || h_lo >= h_hi || w_lo >= w_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for nn in 0..n {
                        let x_base = (nn * g.ci + ci) * in_plane;
                        let go_base = (nn * g.co + co) * out_plane;
                        for to in t_lo..t_hi {
                            let ti = ((to * st) as isize + off_t) as usize;
                            for ho in h_lo..h_hi {
                                let hi = ((ho * sh) as isize + off_h) as usize;
                                let x_row = x_base + (ti * g.h + hi) * g.w;
                                let go_row = go_base + (to * g.ho + ho) * g.wo;
                                if sw == 1 {
                                    let xi0 = (x_row as isize + (w_lo * sw) as isize + off_w) as usize;
                                    let xs = &x[xi0..xi0 + (w_hi - w_lo)];
                                    let gos = &gout[go_row + w_lo..go_row + w_hi];
                                    acc += xs.iter().zip(gos).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    for wo_i in w_lo..w_hi {
                                        let wi = ((wo_i * sw) as isize + off_w) as usize;
                                        acc += x[x_row + wi] * gout[go_row + wo_i];
                                    }
                                }
                            }
                        }
                    }
                    gw_co[((ci * g.kt + kt) * g.kh + kh) * g.kw + kw] = acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(c: usize, t: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![c, t, h, w], data).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        // 1x1x1x3 input, width kernel [0,1,0], pad (0,0,1).
        let x = t4(1, 1, 1, 3, vec![1.0, 2.0, 3.0]);
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let spec = ConvSpec::new((1, 1, 3), (1, 1, 1), (1, 1, 1), (0, 0, 1));
        let y = conv3d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dilated_width_kernel_spans_four() {
        // Kernel [1,0,-1] at dilation 2 spans 5 taps: out[i] = x[i] - x[i+4].
        let x = t4(1, 1, 1, 5, vec![1.0, 2.0, 4.0, 8.0, 16.0]);
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let spec = ConvSpec::new((1, 1, 3), (1, 1, 1), (1, 1, 2), (0, 0, 0));
        let y = conv3d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[-15.0]);
    }

    #[test]
    fn two_tap_dilated_difference() {
        // Kernel [1,-1] at dilation 2: out[i] = x[i] - x[i+2].
        let x = t4(1, 1, 1, 5, vec![1.0, 2.0, 4.0, 8.0, 16.0]);
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let spec = ConvSpec::new((1, 1, 2), (1, 1, 1), (1, 1, 2), (0, 0, 0));
        let y = conv3d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[-3.0, -6.0, -12.0]);
    }

    #[test]
    fn zero_kernel_zero_bias_gives_zeros() {
        let x = t4(2, 2, 3, 3, (0..36).map(f64::from).collect());
        let w = Tensor::zeros(vec![3, 2, 1, 1, 1]);
        let b = Tensor::zeros(vec![3]);
        let spec = ConvSpec::new((1, 1, 1), (1, 1, 1), (1, 1, 1), (0, 0, 0));
        let y = conv3d(&x, &w, Some(&b), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = t4(2, 1, 1, 3, vec![0.0; 6]);
        let w = Tensor::zeros(vec![1, 3, 1, 1, 1]);
        let spec = ConvSpec::new((1, 1, 1), (1, 1, 1), (1, 1, 1), (0, 0, 0));
        assert!(conv3d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn zero_size_output_is_config_error() {
        let spec = ConvSpec::new((1, 1, 7), (1, 1, 1), (1, 1, 1), (0, 0, 0));
        assert!(spec.out_shape((1, 1, 5)).is_err());
    }

    #[test]
    fn identity_conv_gradient_is_ones() {
        let x = Tensor::param(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new((1, 1, 1), (1, 1, 1), (1, 1, 1), (0, 0, 0));
        let y = conv3d(&x, &w, None, &spec).unwrap();
        let loss = super::super::sum_all(&y);
        super::super::backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }
}

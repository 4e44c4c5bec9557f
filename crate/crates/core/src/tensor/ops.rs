//! Elementwise, structural, and normalization operations.
//!
//! All elementwise binary ops require exact shape equality; the only
//! broadcasting form supported anywhere is scalar-by-tensor ([`scale`]).

use super::{numel, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise a + b.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |_| {
        Box::new(move |gout| {
            if pa.needs_grad() {
                pa.accumulate_grad(gout);
            }
            if pb.needs_grad() {
                pb.accumulate_grad(gout);
            }
        })
    }))
}

/// Elementwise a - b.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |_| {
        Box::new(move |gout| {
            if pa.needs_grad() {
                pa.accumulate_grad(gout);
            }
            if pb.needs_grad() {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                pb.accumulate_grad_owned(neg);
            }
        })
    }))
}

/// Elementwise a * b.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (da, db) = (a.data_rc(), b.data_rc());
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |_| {
        Box::new(move |gout| {
            if pa.needs_grad() {
                let g: Vec<f64> = gout.iter().zip(db.iter()).map(|(g, y)| g * y).collect();
                pa.accumulate_grad_owned(g);
            }
            if pb.needs_grad() {
                let g: Vec<f64> = gout.iter().zip(da.iter()).map(|(g, x)| g * x).collect();
                pb.accumulate_grad_owned(g);
            }
        })
    }))
}

/// Scalar-by-tensor product c * x.
pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| c * v).collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |_| {
        Box::new(move |gout| {
            let g: Vec<f64> = gout.iter().map(|g| c * g).collect();
            px.accumulate_grad_owned(g);
        })
    })
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let px = x.clone();
    let n = x.numel();
    Tensor::from_op(vec![1], vec![s], &[x], move |_| {
        Box::new(move |gout| {
            px.accumulate_grad_owned(vec![gout[0]; n]);
        })
    })
}

/// Mean of all elements, as a scalar tensor.
pub fn mean_all(x: &Tensor) -> Tensor {
    scale(&sum_all(x), 1.0 / x.numel() as f64)
}

/// Logistic sigmoid, numerically stable for large |x|.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |out| {
        Box::new(move |gout| {
            let g: Vec<f64> = gout
                .iter()
                .zip(out.iter())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            px.accumulate_grad_owned(g);
        })
    })
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// max(x, 0).
pub fn relu(x: &Tensor) -> Tensor {
    leaky_relu(x, 0.0)
}

/// x where x > 0, slope * x elsewhere.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let px = x.clone();
    let xd = x.data_rc();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |_| {
        Box::new(move |gout| {
            let g: Vec<f64> = gout
                .iter()
                .zip(xd.iter())
                .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                .collect();
            px.accumulate_grad_owned(g);
        })
    })
}

/// Elementwise x^p. Inputs must be nonnegative when p is fractional.
pub fn powf_elem(x: &Tensor, p: f64) -> Tensor {
    if p == 1.0 {
        // Identity; keeps "p = 1 equals the plain mean" exact in GeM.
        return scale(x, 1.0);
    }
    let data: Vec<f64> = x.data().iter().map(|&v| v.powf(p)).collect();
    let px = x.clone();
    let xd = x.data_rc();
    Tensor::from_op(x.shape().to_vec(), data, &[x], move |_| {
        Box::new(move |gout| {
            let g: Vec<f64> = gout
                .iter()
                .zip(xd.iter())
                .map(|(g, &v)| {
                    if v == 0.0 {
                        // d/dv v^p at 0 is 0 for p > 1 and unbounded below; pin 0.
                        0.0
                    } else {
                        g * p * v.powf(p - 1.0)
                    }
                })
                .collect();
            px.accumulate_grad_owned(g);
        })
    })
}

/// Matrix product x[N x Din] . w[Din x Dout] with optional bias[Dout].
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected rank-2 operands, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (wd_in, dout) = (w.shape()[0], w.shape()[1]);
    if din != wd_in {
        return Err(Error::shape(
            "linear",
            format!("inner extents differ: {din} vs {wd_in}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{dout}]", b.shape()),
            ));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xrow = &xd[i * din..(i + 1) * din];
        let orow = &mut out[i * dout..(i + 1) * dout];
        if let Some(b) = bias {
            orow.copy_from_slice(b.data());
        }
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[k * dout..(k + 1) * dout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }

    let parents: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let (px, pw) = (x.clone(), w.clone());
    let pb = bias.cloned();
    let (xdr, wdr) = (x.data_rc(), w.data_rc());
    Ok(Tensor::from_op(vec![n, dout], out, &parents, move |_| {
        Box::new(move |gout| {
            if px.needs_grad() {
                // dx = gout . w^T
                let mut gx = vec![0.0; n * din];
                for i in 0..n {
                    let grow = &gout[i * dout..(i + 1) * dout];
                    let gxrow = &mut gx[i * din..(i + 1) * din];
                    for (k, gxk) in gxrow.iter_mut().enumerate() {
                        let wrow = &wdr[k * dout..(k + 1) * dout];
                        *gxk = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
                    }
                }
                px.accumulate_grad_owned(gx);
            }
            if pw.needs_grad() {
                // dw = x^T . gout
                let mut gw = vec![0.0; din * dout];
                for i in 0..n {
                    let xrow = &xdr[i * din..(i + 1) * din];
                    let grow = &gout[i * dout..(i + 1) * dout];
                    for (k, &xv) in xrow.iter().enumerate() {
                        let gwrow = &mut gw[k * dout..(k + 1) * dout];
                        for (gw_e, &g) in gwrow.iter_mut().zip(grow) {
                            *gw_e += xv * g;
                        }
                    }
                }
                pw.accumulate_grad_owned(gw);
            }
            if let Some(pb) = &pb {
                if pb.needs_grad() {
                    let mut gb = vec![0.0; dout];
                    for i in 0..n {
                        for (gb_e, &g) in gb.iter_mut().zip(&gout[i * dout..(i + 1) * dout]) {
                            *gb_e += g;
                        }
                    }
                    pb.accumulate_grad_owned(gb);
                }
            }
        })
    }))
}

/// Same data with a new shape of equal element count.
pub fn reshape(x: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
    if numel(&new_shape) != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?} changes element count", x.shape(), new_shape),
        ));
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        new_shape,
        x.data().to_vec(),
        &[x],
        move |_| Box::new(move |gout| px.accumulate_grad(gout)),
    ))
}

/// Concatenate tensors along `axis`. All other extents must match.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::config("concat of zero tensors"));
    }
    let rank = tensors[0].rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
    }
    let mut out_shape = tensors[0].shape().to_vec();
    let mut axis_total = 0;
    for t in tensors {
        if t.rank() != rank {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for (d, (&a, &b)) in out_shape.iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("extent mismatch on axis {d}: {a} vs {b}"),
                ));
            }
        }
        axis_total += t.shape()[axis];
    }
    out_shape[axis] = axis_total;

    // Treat each tensor as [outer, axis_extent * inner] blocks.
    let outer: usize = tensors[0].shape()[..axis].iter().product();
    let inner: usize = tensors[0].shape()[axis + 1..].iter().product();
    let block_sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
    let out_block: usize = axis_total * inner;

    let mut data = vec![0.0; numel(&out_shape)];
    for o in 0..outer {
        let mut off = 0;
        for (t, &bs) in tensors.iter().zip(&block_sizes) {
            let src = &t.data()[o * bs..(o + 1) * bs];
            data[o * out_block + off..o * out_block + off + bs].copy_from_slice(src);
            off += bs;
        }
    }

    let parents: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
    let parent_refs: Vec<&Tensor> = tensors.to_vec();
    Ok(Tensor::from_op(out_shape, data, &parent_refs, move |_| {
        Box::new(move |gout| {
            let mut off = 0;
            for (t, &bs) in parents.iter().zip(&block_sizes) {
                if t.needs_grad() {
                    let mut g = vec![0.0; t.numel()];
                    for o in 0..outer {
                        g[o * bs..(o + 1) * bs]
                            .copy_from_slice(&gout[o * out_block + off..o * out_block + off + bs]);
                    }
                    t.accumulate_grad_owned(g);
                }
                off += bs;
            }
        })
    }))
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("slice", format!("axis {axis} out of rank {}", x.rank())));
    }
    let extent = x.shape()[axis];
    if len == 0 || start + len > extent {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{} out of extent {extent}", start + len),
        ));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let in_block = extent * inner;
    let out_block = len * inner;

    let mut data = vec![0.0; numel(&out_shape)];
    for o in 0..outer {
        let src = &x.data()[o * in_block + start * inner..o * in_block + (start + len) * inner];
        data[o * out_block..(o + 1) * out_block].copy_from_slice(src);
    }
    let px = x.clone();
    let in_numel = x.numel();
    Ok(Tensor::from_op(out_shape, data, &[x], move |_| {
        Box::new(move |gout| {
            let mut g = vec![0.0; in_numel];
            for o in 0..outer {
                g[o * in_block + start * inner..o * in_block + (start + len) * inner]
                    .copy_from_slice(&gout[o * out_block..(o + 1) * out_block]);
            }
            px.accumulate_grad_owned(g);
        })
    }))
}

/// Running statistics owned by one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RefCell<BnStats>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::param(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(vec![channels], vec![0.0; channels]).unwrap(),
            stats: RefCell::new(BnStats::new(channels)),
        }
    }
}

/// Batch normalization over all axes except the channel axis.
///
/// The channel axis is axis 1 for rank-5 `[N,C,T,H,W]` inputs and axis 0
/// otherwise. Training mode normalizes with the current batch statistics and
/// updates the running stats with momentum [`BN_MOMENTUM`]; eval mode
/// normalizes with the stored running stats.
pub fn batch_norm(x: &Tensor, params: &BnParams, training: bool) -> Result<Tensor> {
    let ch_axis = if x.rank() == 5 { 1 } else { 0 };
    let channels = x.shape()[ch_axis];
    if params.gamma.shape() != [channels] || params.beta.shape() != [channels] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "gamma/beta for {} channels, input has {channels}",
                params.gamma.shape()[0]
            ),
        ));
    }
    let outer: usize = x.shape()[..ch_axis].iter().product();
    let inner: usize = x.shape()[ch_axis + 1..].iter().product();
    let per_channel = (outer * inner) as f64;
    let xd = x.data();

    let idx = |o: usize, c: usize| (o * channels + c) * inner;

    let (mean, var) = if training {
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let mut s = 0.0;
            for o in 0..outer {
                let row = &xd[idx(o, c)..idx(o, c) + inner];
                s += row.iter().sum::<f64>();
            }
            let m = s / per_channel;
            let mut v = 0.0;
            for o in 0..outer {
                let row = &xd[idx(o, c)..idx(o, c) + inner];
                v += row.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / per_channel;
        }
        // Update running stats with the unbiased variance estimate.
        let mut st = params.stats.borrow_mut();
        let unbias = if per_channel > 1.0 {
            per_channel / (per_channel - 1.0)
        } else {
            1.0
        };
        for c in 0..channels {
            st.running_mean[c] = (1.0 - BN_MOMENTUM) * st.running_mean[c] + BN_MOMENTUM * mean[c];
            st.running_var[c] =
                (1.0 - BN_MOMENTUM) * st.running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
        (mean, var)
    } else {
        let st = params.stats.borrow();
        (st.running_mean.clone(), st.running_var.clone())
    };

    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gd = params.gamma.data();
    let bd = params.beta.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for c in 0..channels {
            let (g, b, m, is) = (gd[c], bd[c], mean[c], invstd[c]);
            let base = idx(o, c);
            for i in 0..inner {
                out[base + i] = g * (xd[base + i] - m) * is + b;
            }
        }
    }

    let (px, pg, pb) = (x.clone(), params.gamma.clone(), params.beta.clone());
    let xdr = x.data_rc();
    let gdr = params.gamma.data_rc();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        &[x, &params.gamma, &params.beta],
        move |_| {
            Box::new(move |gout| {
                let xhat_at = |o: usize, c: usize, i: usize| {
                    (xdr[(o * channels + c) * inner + i] - mean[c]) * invstd[c]
                };
                if pg.needs_grad() || pb.needs_grad() {
                    let mut ggamma = vec![0.0; channels];
                    let mut gbeta = vec![0.0; channels];
                    for o in 0..outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            for i in 0..inner {
                                let g = gout[base + i];
                                ggamma[c] += g * xhat_at(o, c, i);
                                gbeta[c] += g;
                            }
                        }
                    }
                    if pg.needs_grad() {
                        pg.accumulate_grad_owned(ggamma);
                    }
                    if pb.needs_grad() {
                        pb.accumulate_grad_owned(gbeta);
                    }
                }
                if px.needs_grad() {
                    let mut gx = vec![0.0; xdr.len()];
                    if training {
                        // Full training-mode rule: gradients flow through the
                        // batch mean and variance.
                        for c in 0..channels {
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for o in 0..outer {
                                let base = (o * channels + c) * inner;
                                for i in 0..inner {
                                    let dy = gout[base + i] * gdr[c];
                                    sum_dy += dy;
                                    sum_dy_xhat += dy * xhat_at(o, c, i);
                                }
                            }
                            for o in 0..outer {
                                let base = (o * channels + c) * inner;
                                for i in 0..inner {
                                    let dy = gout[base + i] * gdr[c];
                                    let xh = xhat_at(o, c, i);
                                    gx[base + i] = invstd[c]
                                        * (dy
                                            - sum_dy / per_channel
                                            - xh * sum_dy_xhat / per_channel);
                                }
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for c in 0..channels {
                                let base = (o * channels + c) * inner;
                                let k = gdr[c] * invstd[c];
                                for i in 0..inner {
                                    gx[base + i] = gout[base + i] * k;
                                }
                            }
                        }
                    }
                    px.accumulate_grad_owned(gx);
                }
            })
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        assert_eq!(sigmoid(&x).data(), &[0.5]);
    }

    #[test]
    fn add_requires_exact_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let a = Tensor::from_vec(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(vec![2, 3, 2], (10..22).map(f64::from).collect()).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2]);
        let sa = slice(&c, 1, 0, 2).unwrap();
        let sb = slice(&c, 1, 2, 3).unwrap();
        assert_eq!(sa.data(), a.data());
        assert_eq!(sb.data(), b.data());
    }

    #[test]
    fn linear_identity_weights() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_zero_variance_is_beta() {
        // gamma=1, beta=0 on a constant input: output is all zeros.
        let x = Tensor::from_vec(vec![2, 3], vec![5.0; 6]).unwrap();
        let p = BnParams::new(2);
        let y = batch_norm(&x, &p, true).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let p = BnParams::new(1);
        {
            let mut st = p.stats.borrow_mut();
            st.running_mean[0] = 1.0;
            st.running_var[0] = 4.0;
        }
        let x = Tensor::from_vec(vec![1, 2], vec![3.0, 1.0]).unwrap();
        let y = batch_norm(&x, &p, false).unwrap();
        let e = (3.0 - 1.0) / (4.0f64 + BN_EPS).sqrt();
        assert!((y.data()[0] - e).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn powf_p_one_is_identity() {
        let x = Tensor::from_vec(vec![3], vec![0.3, 1.7, 9.1]).unwrap();
        assert_eq!(powf_elem(&x, 1.0).data(), x.data());
    }

    #[test]
    fn slice_gradient_scatters() {
        let x = Tensor::param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = slice(&x, 0, 1, 2).unwrap();
        let loss = sum_all(&s);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}

//! Batch-all triplet loss, per-strip cross-entropy, and their sum.

use crate::error::{Error, Result};
use crate::tensor::{add, Tensor};

/// How per-triple hinge terms reduce to one number per strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over strictly positive terms; zero when none violate.
    MeanNonZero,
    /// Mean over all enumerated triples.
    MeanAll,
}

#[derive(Debug, Clone, Copy)]
pub struct TripletConfig {
    pub margin: f64,
    pub reduction: Reduction,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.2,
            reduction: Reduction::MeanNonZero,
        }
    }
}

fn check_batch_labels(labels: &[u32]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Sampler(
            "triplet batch needs at least two classes".into(),
        ));
    }
    for (class, count) in counts {
        if count < 2 {
            return Err(Error::Sampler(format!(
                "class {class} has a single sample in the batch; the P x K sampler \
                 guarantees at least two"
            )));
        }
    }
    Ok(())
}

/// Batch-all triplet loss over per-strip embeddings.
///
/// `embeddings` is `[N, strips, D]`; `labels` gives the class of each of the
/// N sequences. Per strip, every (anchor, positive, negative) triple with
/// `label(a) == label(p)`, `a != p`, `label(n) != label(a)` contributes
/// `max(d_ap - d_an + margin, 0)` with Euclidean distances in that strip's
/// D-dimensional space; the reduction is applied per strip and the final
/// loss is the mean over strips.
pub fn triplet_batch_all(
    embeddings: &Tensor,
    labels: &[u32],
    cfg: &TripletConfig,
) -> Result<Tensor> {
    if embeddings.rank() != 3 {
        return Err(Error::shape(
            "triplet_batch_all",
            format!("expected [N, strips, D], got {:?}", embeddings.shape()),
        ));
    }
    if !cfg.margin.is_finite() || cfg.margin < 0.0 {
        return Err(Error::config(format!(
            "triplet margin {} must be finite and >= 0",
            cfg.margin
        )));
    }
    let (n, strips, d) = (
        embeddings.shape()[0],
        embeddings.shape()[1],
        embeddings.shape()[2],
    );
    if labels.len() != n {
        return Err(Error::shape(
            "triplet_batch_all",
            format!("{n} embeddings but {} labels", labels.len()),
        ));
    }
    check_batch_labels(labels)?;

    let ed = embeddings.data();
    let at = |i: usize, s: usize| &ed[(i * strips + s) * d..(i * strips + s) * d + d];

    // Distances and per-strip hinge bookkeeping.
    let mut dist = vec![0.0; strips * n * n];
    for s in 0..strips {
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (at(i, s), at(j, s));
                let dd: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                let dv = dd.sqrt();
                dist[(s * n + i) * n + j] = dv;
                dist[(s * n + j) * n + i] = dv;
            }
        }
    }

    let margin = cfg.margin;
    let reduction = cfg.reduction;
    let labels: Vec<u32> = labels.to_vec();
    let mut total = 0.0;
    // Per strip: (divisor, pair-weight accumulation happens in backward).
    let mut divisors = vec![0.0_f64; strips];
    for s in 0..strips {
        let mut sum = 0.0;
        let mut nonzero = 0usize;
        let mut all = 0usize;
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                let d_ap = dist[(s * n + a) * n + p];
                for neg in 0..n {
                    if labels[neg] == labels[a] {
                        continue;
                    }
                    let term = d_ap - dist[(s * n + a) * n + neg] + margin;
                    all += 1;
                    if term > 0.0 {
                        sum += term;
                        nonzero += 1;
                    }
                }
            }
        }
        let divisor = match reduction {
            Reduction::MeanNonZero => nonzero as f64,
            Reduction::MeanAll => all as f64,
        };
        divisors[s] = divisor;
        if divisor > 0.0 {
            total += sum / divisor;
        }
    }
    let loss = total / strips as f64;

    let pe = embeddings.clone();
    let edr = embeddings.data_rc();
    Ok(Tensor::from_op(vec![1], vec![loss], &[embeddings], move |_| {
        Box::new(move |gout| {
            let g0 = gout[0];
            let at = |i: usize, s: usize| &edr[(i * strips + s) * d..(i * strips + s) * d + d];
            // alpha[i][j] accumulates the hinge weight on distance d(i, j)
            // per strip; the distance VJP is applied pairwise afterwards.
            let mut grad = vec![0.0; edr.len()];
            let mut alpha = vec![0.0; n * n];
            for s in 0..strips {
                if divisors[s] == 0.0 {
                    continue;
                }
                alpha.fill(0.0);
                let w = g0 / (strips as f64 * divisors[s]);
                for a in 0..n {
                    for p in 0..n {
                        if p == a || labels[p] != labels[a] {
                            continue;
                        }
                        let d_ap = dist[(s * n + a) * n + p];
                        for neg in 0..n {
                            if labels[neg] == labels[a] {
                                continue;
                            }
                            let term = d_ap - dist[(s * n + a) * n + neg] + margin;
                            if term > 0.0 {
                                alpha[a * n + p] += w;
                                alpha[a * n + neg] -= w;
                            }
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let coeff = alpha[i * n + j];
                        if coeff == 0.0 {
                            continue;
                        }
                        let dv = dist[(s * n + i) * n + j];
                        if dv == 0.0 {
                            continue;
                        }
                        let (ei, ej) = (at(i, s), at(j, s));
                        let k = coeff / dv;
                        let gi = (i * strips + s) * d;
                        let gj = (j * strips + s) * d;
                        for t in 0..d {
                            let delta = k * (ei[t] - ej[t]);
                            grad[gi + t] += delta;
                            grad[gj + t] -= delta;
                        }
                    }
                }
            }
            pe.accumulate_grad_owned(grad);
        })
    }))
}

/// Softmax cross-entropy over per-strip logits `[N, strips, classes]`,
/// averaged over samples and strips. Numerically stabilized by
/// max-subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    if logits.rank() != 3 {
        return Err(Error::shape(
            "cross_entropy",
            format!("expected [N, strips, classes], got {:?}", logits.shape()),
        ));
    }
    let (n, strips, classes) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if classes < 2 {
        return Err(Error::config("cross_entropy needs at least 2 classes"));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} samples but {} labels", labels.len()),
        ));
    }
    for &l in labels {
        if l as usize >= classes {
            return Err(Error::config(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
    }

    let ld = logits.data();
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..strips {
            let row = &ld[(i * strips + s) * classes..(i * strips + s + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[i] as usize];
        }
    }
    let denom = (n * strips) as f64;
    let loss = total / denom;

    let pl = logits.clone();
    let ldr = logits.data_rc();
    let labels: Vec<u32> = labels.to_vec();
    Ok(Tensor::from_op(vec![1], vec![loss], &[logits], move |_| {
        Box::new(move |gout| {
            let scale = gout[0] / denom;
            let mut grad = vec![0.0; ldr.len()];
            for i in 0..n {
                for s in 0..strips {
                    let base = (i * strips + s) * classes;
                    let row = &ldr[base..base + classes];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom_exp = 0.0;
                    for v in row {
                        denom_exp += (v - m).exp();
                    }
                    for c in 0..classes {
                        let softmax = (row[c] - m).exp() / denom_exp;
                        let indicator = if c == labels[i] as usize { 1.0 } else { 0.0 };
                        grad[base + c] = scale * (softmax - indicator);
                    }
                }
            }
            pl.accumulate_grad_owned(grad);
        })
    }))
}

/// Unweighted sum of the two loss terms; both stay available for logging.
pub fn combined_loss(tri: &Tensor, cse: &Tensor) -> Result<Tensor> {
    add(tri, cse)
}

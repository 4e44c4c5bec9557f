//! Recognition head: temporal max pooling, GeM horizontal pooling, and
//! per-strip fully-connected embedding (plus an optional per-strip
//! classifier for the cross-entropy term).

use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool3d, concat, linear, max_pool3d, powf_elem, relu, reshape, slice, Tensor,
};
use std::io::{Read, Write};

#[derive(Debug, Clone)]
pub struct HeadConfig {
    /// GeM exponent; p = 1 is average pooling, p -> infinity approaches max.
    pub p: f64,
    /// One strip per height row of the incoming feature map.
    pub strips: usize,
    pub embed_dim: usize,
    /// Enables the training-time per-strip classifier when set.
    pub class_count: Option<usize>,
}

impl HeadConfig {
    pub fn new(strips: usize, embed_dim: usize) -> HeadConfig {
        HeadConfig {
            p: 6.5,
            strips,
            embed_dim,
            class_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p <= 0.0 {
            return Err(Error::config(format!("GeM exponent {} must be > 0", self.p)));
        }
        if self.strips == 0 || self.embed_dim == 0 {
            return Err(Error::config("head strips/embed_dim must be positive"));
        }
        if self.class_count == Some(0) || self.class_count == Some(1) {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        Ok(())
    }
}

/// Per-strip weights: one `C x embed_dim` matrix per strip (no sharing, no
/// bias), and optionally one `embed_dim x class_count` classifier per strip.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc_weights: Vec<Tensor>,
    pub classifier_weights: Option<Vec<Tensor>>,
}

/// Elementwise max over the full temporal extent: `[.., C, T, H, W]` to
/// `[.., C, 1, H, W]`. Invariant to frame permutation and duplication.
pub fn temporal_max(x: &Tensor) -> Result<Tensor> {
    let t = x.shape()[x.rank() - 3];
    max_pool3d(x, (t, 1, 1), (1, 1, 1), (0, 0, 0))
}

/// Generalized-mean pooling over the width axis:
/// `out[c,h] = (mean_w max(y, 0)^p)^(1/p)`.
///
/// Inputs are clamped at zero before the fractional power; p = 1 reduces to
/// the arithmetic mean exactly.
pub fn gem_pool(y: &Tensor, p: f64) -> Result<Tensor> {
    if p <= 0.0 {
        return Err(Error::config(format!("GeM exponent {p} must be > 0")));
    }
    let w = y.shape()[y.rank() - 1];
    let clamped = relu(y);
    let powed = powf_elem(&clamped, p);
    let pooled = avg_pool3d(&powed, (1, 1, w), (1, 1, 1), (0, 0, 0))?;
    Ok(powf_elem(&pooled, 1.0 / p))
}

/// Map pooled strip vectors through per-strip FC matrices.
///
/// `strips` is `[N, C, H]`; the output is `[N, H, D]` where row `h` is
/// `strips[:, :, h] . W_h`. Weights are truly separate: permuting strips
/// does not commute with the map.
pub fn separate_fc(strips: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
    if strips.rank() != 3 {
        return Err(Error::shape(
            "separate_fc",
            format!("expected [N, C, H], got {:?}", strips.shape()),
        ));
    }
    let (n, c, h) = (strips.shape()[0], strips.shape()[1], strips.shape()[2]);
    if weights.len() != h {
        return Err(Error::shape(
            "separate_fc",
            format!("{} strips but {} weight matrices", h, weights.len()),
        ));
    }
    let d = weights[0].shape()[1];
    let mut per_strip = Vec::with_capacity(h);
    for (hi, w) in weights.iter().enumerate() {
        if w.shape() != [c, d] {
            return Err(Error::shape(
                "separate_fc",
                format!("strip {hi} weight is {:?}, expected [{c}, {d}]", w.shape()),
            ));
        }
        let col = slice(strips, 2, hi, 1)?; // [N, C, 1]
        let flat = reshape(&col, vec![n, c])?;
        let emb = linear(&flat, w, None)?; // [N, D]
        per_strip.push(reshape(&emb, vec![n, 1, d])?);
    }
    let refs: Vec<&Tensor> = per_strip.iter().collect();
    concat(&refs, 1)
}

/// Full head: temporal max, GeM over width, per-strip FC.
///
/// Input is `[N, C, T, H, W]`; returns embeddings `[N, strips, D]` and,
/// when the config carries a class count, per-strip logits
/// `[N, strips, classes]`.
pub fn head_forward(
    x: &Tensor,
    cfg: &HeadConfig,
    params: &HeadParams,
) -> Result<(Tensor, Option<Tensor>)> {
    cfg.validate()?;
    if x.rank() != 5 {
        return Err(Error::shape(
            "head_forward",
            format!("expected [N, C, T, H, W], got {:?}", x.shape()),
        ));
    }
    let (n, c, h) = (x.shape()[0], x.shape()[1], x.shape()[3]);
    if h != cfg.strips {
        return Err(Error::shape(
            "head_forward",
            format!("input height {h} != configured strips {}", cfg.strips),
        ));
    }
    let tm = temporal_max(x)?; // [N, C, 1, H, W]
    let gm = gem_pool(&tm, cfg.p)?; // [N, C, 1, H, 1]
    let strips = reshape(&gm, vec![n, c, h])?;
    let emb = separate_fc(&strips, &params.fc_weights)?; // [N, H, D]

    let logits = match (&cfg.class_count, &params.classifier_weights) {
        (Some(classes), Some(cw)) => {
            if cw.len() != cfg.strips {
                return Err(Error::shape(
                    "head_forward",
                    format!("{} classifier matrices for {} strips", cw.len(), cfg.strips),
                ));
            }
            let d = cfg.embed_dim;
            let mut per_strip = Vec::with_capacity(cfg.strips);
            for (hi, w) in cw.iter().enumerate() {
                if w.shape() != [d, *classes] {
                    return Err(Error::shape(
                        "head_forward",
                        format!("classifier {hi} is {:?}, expected [{d}, {classes}]", w.shape()),
                    ));
                }
                let strip = slice(&emb, 1, hi, 1)?;
                let flat = reshape(&strip, vec![n, d])?;
                let lg = linear(&flat, w, None)?;
                per_strip.push(reshape(&lg, vec![n, 1, *classes])?);
            }
            let refs: Vec<&Tensor> = per_strip.iter().collect();
            Some(concat(&refs, 1)?)
        }
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::config(
                "head config names a class count but params hold no classifier",
            ))
        }
    };
    Ok((emb, logits))
}

/// Per-sequence embedding: `strips x embed_dim` values plus identity and
/// capture tags, the unit of gallery/probe evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub strips: usize,
    pub embed_dim: usize,
    /// Row-major `strips x embed_dim`.
    pub values: Vec<f32>,
    pub label: u32,
    pub view: u32,
    pub condition: u32,
}

const EMBED_MAGIC: &[u8; 4] = b"GASM";
const EMBED_VERSION: u32 = 1;

/// Write a set of embeddings in the binary export format: magic "GASM",
/// u32 version, u32 strips, u32 embed_dim, u32 sequence count, then per
/// sequence u32 label, u32 view, u32 condition, f32 values row-major.
/// All fields little-endian.
pub fn write_embeddings(mut w: impl Write, set: &[EmbeddingMatrix]) -> std::io::Result<()> {
    let (strips, dim) = match set.first() {
        Some(e) => (e.strips as u32, e.embed_dim as u32),
        None => (0, 0),
    };
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&EMBED_VERSION.to_le_bytes())?;
    w.write_all(&strips.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for e in set {
        assert_eq!(e.strips as u32, strips, "mixed strip counts in one export");
        assert_eq!(e.embed_dim as u32, dim);
        w.write_all(&e.label.to_le_bytes())?;
        w.write_all(&e.view.to_le_bytes())?;
        w.write_all(&e.condition.to_le_bytes())?;
        for v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings(mut r: impl Read) -> Result<Vec<EmbeddingMatrix>> {
    let bad = |msg: &str| Error::Format(format!("embedding file: {msg}"));
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != EMBED_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = read_u32(&mut r)?;
    if version != EMBED_VERSION {
        return Err(Error::Format(format!(
            "embedding file: version {version}, expected {EMBED_VERSION}"
        )));
    }
    let strips = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = read_u32(&mut r)?;
        let view = read_u32(&mut r)?;
        let condition = read_u32(&mut r)?;
        let mut values = vec![0f32; strips * dim];
        let mut fbuf = [0u8; 4];
        for v in &mut values {
            r.read_exact(&mut fbuf).map_err(|_| bad("truncated values"))?;
            *v = f32::from_le_bytes(fbuf);
        }
        out.push(EmbeddingMatrix {
            strips,
            embed_dim: dim,
            values,
            label,
            view,
            condition,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn temporal_max_single_frame_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(vec![1, 2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let y = temporal_max(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn temporal_max_is_permutation_invariant() {
        let a = Tensor::from_vec(vec![1, 1, 2, 1, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 1, 2, 1, 2], vec![3.0, 2.0, 1.0, 5.0]).unwrap();
        assert_eq!(temporal_max(&a).unwrap().data(), temporal_max(&b).unwrap().data());
    }

    #[test]
    fn temporal_max_picks_dominating_frame() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let low = rand_tensor(vec![1, 1, 1, 2, 2], 0.0, 1.0, &mut rng);
        let mut frames = low.data().to_vec();
        let dominant: Vec<f64> = low.data().iter().map(|v| v + 10.0).collect();
        frames.extend_from_slice(&dominant);
        let x = Tensor::from_vec(vec![1, 1, 2, 2, 2], frames).unwrap();
        assert_eq!(temporal_max(&x).unwrap().data(), &dominant[..]);
    }

    #[test]
    fn gem_p1_is_exact_mean() {
        let y = Tensor::from_vec(vec![1, 1, 1, 1, 4], vec![0.1, 0.2, 0.3, 0.8]).unwrap();
        let g = gem_pool(&y, 1.0).unwrap();
        assert_eq!(g.data(), &[(0.1 + 0.2 + 0.3 + 0.8) / 4.0]);
    }

    #[test]
    fn gem_p64_approaches_max() {
        let y = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let g = gem_pool(&y, 64.0).unwrap();
        let expect = (0.5 * (1.0 + 2f64.powi(64))).powf(1.0 / 64.0);
        assert!((g.data()[0] - expect).abs() < 1e-12);
        assert!((g.data()[0] - 2.0).abs() / 2.0 < 0.02, "within 2% of max");
    }

    #[test]
    fn gem_constant_row_is_constant_for_every_p() {
        let y = Tensor::from_vec(vec![1, 1, 1, 1, 3], vec![0.7; 3]).unwrap();
        for p in [1.0, 2.0, 6.5, 33.0] {
            let g = gem_pool(&y, p).unwrap();
            assert!((g.data()[0] - 0.7).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn gem_rejects_nonpositive_p() {
        let y = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(gem_pool(&y, 0.0).is_err());
        assert!(gem_pool(&y, -2.0).is_err());
    }

    #[test]
    fn gem_monotone_in_p() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let y = rand_tensor(vec![1, 1, 1, 1, 6], 0.0, 2.0, &mut rng);
            let mut prev = f64::NEG_INFINITY;
            for p in [1.0, 2.0, 4.0, 8.0, 16.0] {
                let g = gem_pool(&y, p).unwrap().data()[0];
                assert!(g >= prev - 1e-7, "power mean not monotone: {g} < {prev}");
                prev = g;
            }
        }
    }

    #[test]
    fn gem_bounded_by_min_and_max() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let y = rand_tensor(vec![1, 1, 1, 1, 5], 0.1, 3.0, &mut rng);
            let lo = y.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for p in [1.0, 3.0, 6.5, 20.0] {
                let g = gem_pool(&y, p).unwrap().data()[0];
                assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn separate_fc_identity_weights_pass_strips_through() {
        // C == D identity weights: embeddings equal the pooled strips.
        let strips = Tensor::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = vec![eye.clone(), eye.clone(), eye];
        let out = separate_fc(&strips, &w).unwrap();
        // strips[:, :, h] = column h: [1,4], [2,5], [3,6]
        assert_eq!(out.shape(), &[1, 3, 2]);
        assert_eq!(out.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn separate_fc_zero_weights_give_zero_embeddings() {
        let strips = Tensor::from_vec(vec![2, 2, 2], vec![1.0; 8]).unwrap();
        let z = Tensor::zeros(vec![2, 3]);
        let out = separate_fc(&strips, &[z.clone(), z]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strip_weights_are_truly_separate() {
        // Permuting strips does not commute with the map when the per-strip
        // matrices differ.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let w0 = rand_tensor(vec![2, 2], -1.0, 1.0, &mut rng);
        let w1 = rand_tensor(vec![2, 2], -1.0, 1.0, &mut rng);
        let s = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let swapped = Tensor::from_vec(vec![1, 2, 2], vec![2.0, 1.0, 4.0, 3.0]).unwrap();
        let a = separate_fc(&s, &[w0.clone(), w1.clone()]).unwrap();
        let b = separate_fc(&swapped, &[w0, w1]).unwrap();
        // Strip h of a should match strip 1-h of b only if weights were
        // shared; assert they differ.
        let a0 = &a.data()[0..2];
        let b1 = &b.data()[2..4];
        assert!(a0.iter().zip(b1).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    fn head_fixture(
        n: usize,
        c: usize,
        t: usize,
        h: usize,
        w: usize,
        d: usize,
        classes: Option<usize>,
        rng: &mut impl Rng,
    ) -> (Tensor, HeadConfig, HeadParams) {
        let x = rand_tensor(vec![n, c, t, h, w], -1.0, 1.0, rng);
        let mut cfg = HeadConfig::new(h, d);
        cfg.class_count = classes;
        let fc = (0..h).map(|_| {
            let data: Vec<f64> = (0..c * d).map(|_| rng.random_range(-0.5..0.5)).collect();
            Tensor::param(vec![c, d], data).unwrap()
        })
        .collect();
        let cw = classes.map(|k| {
            (0..h)
                .map(|_| {
                    let data: Vec<f64> = (0..d * k).map(|_| rng.random_range(-0.5..0.5)).collect();
                    Tensor::param(vec![d, k], data).unwrap()
                })
                .collect()
        });
        (x, cfg, HeadParams { fc_weights: fc, classifier_weights: cw })
    }

    #[test]
    fn head_shapes_and_logits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (x, cfg, params) = head_fixture(2, 3, 4, 5, 6, 7, Some(4), &mut rng);
        let (emb, logits) = head_forward(&x, &cfg, &params).unwrap();
        assert_eq!(emb.shape(), &[2, 5, 7]);
        assert_eq!(logits.unwrap().shape(), &[2, 5, 4]);
    }

    #[test]
    fn head_invariant_to_frame_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let (x, cfg, params) = head_fixture(1, 2, 3, 4, 5, 6, None, &mut rng);
        // Reverse the frames.
        let (c, t, h, w) = (2, 3, 4, 5);
        let mut rev = vec![0.0; x.numel()];
        for ci in 0..c {
            for ti in 0..t {
                let src = ((ci * t) + ti) * h * w;
                let dst = ((ci * t) + (t - 1 - ti)) * h * w;
                rev[dst..dst + h * w].copy_from_slice(&x.data()[src..src + h * w]);
            }
        }
        let xr = Tensor::from_vec(x.shape().to_vec(), rev).unwrap();
        let (a, _) = head_forward(&x, &cfg, &params).unwrap();
        let (b, _) = head_forward(&xr, &cfg, &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_frame_equals_any_constant_repeat() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let (x1, cfg, params) = head_fixture(1, 2, 1, 3, 4, 5, None, &mut rng);
        // Repeat the single frame 7 times.
        let (c, h, w) = (2, 3, 4);
        let mut rep = Vec::with_capacity(c * 7 * h * w);
        for ci in 0..c {
            for _ in 0..7 {
                rep.extend_from_slice(&x1.data()[ci * h * w..(ci + 1) * h * w]);
            }
        }
        let x7 = Tensor::from_vec(vec![1, c, 7, h, w], rep).unwrap();
        let (a, _) = head_forward(&x1, &cfg, &params).unwrap();
        let (b, _) = head_forward(&x7, &cfg, &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn embedding_roundtrip() {
        let set = vec![
            EmbeddingMatrix {
                strips: 2,
                embed_dim: 3,
                values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                label: 7,
                view: 90,
                condition: 1,
            },
            EmbeddingMatrix {
                strips: 2,
                embed_dim: 3,
                values: vec![-1.0, 0.5, 0.0, 9.0, 8.0, 7.0],
                label: 8,
                view: 0,
                condition: 0,
            },
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &set).unwrap();
        let back = read_embeddings(&buf[..]).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn truncated_embedding_file_errors() {
        let set = vec![EmbeddingMatrix {
            strips: 1,
            embed_dim: 2,
            values: vec![1.0, 2.0],
            label: 0,
            view: 0,
            condition: 0,
        }];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &set).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_embeddings(&buf[..]).is_err());
    }
}

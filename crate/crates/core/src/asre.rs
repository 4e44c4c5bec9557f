//! Adaptive Structured Representation Extraction.
//!
//! Stage 1 turns temporal max/avg statistics into a pair of complementary
//! binary edge masks. Stage 2 runs a weight-shared local extractor over both
//! masked views (LEM) and a global extractor over the unmasked map (GFE),
//! then fuses the two by elementwise addition or by concatenation along the
//! height axis.

use crate::error::{Error, Result};
use crate::tensor::{
    add, avg_pool3d, concat, conv3d, leaky_relu, max_pool3d, mul, sigmoid, sub, BnParams,
    ConvSpec, Tensor,
};

/// How the global and local feature maps are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Elementwise sum; preserves the height extent.
    Add,
    /// Concatenation along height, global block on top; doubles the height.
    CatH,
}

/// Per-branch activation applied after each extractor convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchActivation {
    /// Bare convolutions. With zero bias the two local branches collapse to
    /// a single convolution of the unmasked input by linearity.
    None,
    LeakyRelu(f64),
}

impl BranchActivation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            BranchActivation::None => x.clone(),
            BranchActivation::LeakyRelu(slope) => leaky_relu(x, *slope),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AsreConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Cube kernel extent; must be odd so padding preserves extents.
    pub kernel: usize,
    /// Edge-mask threshold in (0, 1).
    pub threshold: f64,
    pub fusion: Fusion,
    pub branch_activation: BranchActivation,
}

impl AsreConfig {
    pub fn new(in_channels: usize, out_channels: usize, fusion: Fusion) -> AsreConfig {
        AsreConfig {
            in_channels,
            out_channels,
            kernel: 3,
            threshold: 0.5,
            fusion,
            branch_activation: BranchActivation::LeakyRelu(0.01),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("ASRE channel counts must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "ASRE kernel {} must be odd for symmetric padding",
                self.kernel
            )));
        }
        check_threshold(self.threshold)?;
        Ok(())
    }

    fn conv_spec(&self) -> Result<ConvSpec> {
        ConvSpec::same_cube(self.kernel)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "edge-mask threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(())
}

/// Complementary binary masks over a feature map: `m_edge + m_complement = 1`
/// elementwise, both valued in {0, 1}.
#[derive(Debug, Clone)]
pub struct EdgeMaskPair {
    pub m_edge: Tensor,
    pub m_complement: Tensor,
}

/// Extractor weights. The local weight/bias pair is literally shared by both
/// masked branches; the global extractor has its own.
#[derive(Debug, Clone)]
pub struct AsreParams {
    pub local_weight: Tensor,
    pub local_bias: Tensor,
    pub global_weight: Tensor,
    pub global_bias: Tensor,
    pub local_bn: Option<BnParams>,
    pub global_bn: Option<BnParams>,
}

/// Temporal statistics map `s = sigmoid(maxpool - avgpool)` with a 3x1x1
/// window, stride 1, temporal padding 1.
///
/// The max of a window never falls below its mean, so every element is at
/// least 0.5 (up to rounding) and below 1.
pub fn temporal_stats(x: &Tensor) -> Result<Tensor> {
    let mx = max_pool3d(x, (3, 1, 1), (1, 1, 1), (1, 0, 0))?;
    let av = avg_pool3d(x, (3, 1, 1), (1, 1, 1), (1, 0, 0))?;
    Ok(sigmoid(&sub(&mx, &av)?))
}

/// Threshold the statistics map into a complementary mask pair.
///
/// `m_edge = 1` where `s >= threshold`. Mask construction is
/// gradient-opaque: the masks are constants and no gradient flows into `s`.
pub fn edge_mask(s: &Tensor, threshold: f64) -> Result<EdgeMaskPair> {
    check_threshold(threshold)?;
    let mut edge = vec![0.0; s.numel()];
    let mut comp = vec![0.0; s.numel()];
    for (i, &v) in s.data().iter().enumerate() {
        if v >= threshold {
            edge[i] = 1.0;
        } else {
            comp[i] = 1.0;
        }
    }
    Ok(EdgeMaskPair {
        m_edge: Tensor::from_vec(s.shape().to_vec(), edge)?,
        m_complement: Tensor::from_vec(s.shape().to_vec(), comp)?,
    })
}

/// Compute the edge-mask pair for an input feature map.
pub fn edge_masks_for(x: &Tensor, threshold: f64) -> Result<EdgeMaskPair> {
    let s = crate::tensor::no_grad(|| temporal_stats(&x.detach()))?;
    edge_mask(&s, threshold)
}

/// Local extraction: the shared convolution applied to the edge-masked and
/// complement-masked input, each branch activated, then summed.
pub fn lem_forward(
    x: &Tensor,
    masks: &EdgeMaskPair,
    params: &AsreParams,
    cfg: &AsreConfig,
) -> Result<Tensor> {
    if masks.m_edge.shape() != x.shape() {
        return Err(Error::shape(
            "lem_forward",
            format!("mask shape {:?} vs input {:?}", masks.m_edge.shape(), x.shape()),
        ));
    }
    let spec = cfg.conv_spec()?;
    let run_branch = |mask: &Tensor| -> Result<Tensor> {
        let masked = mul(x, mask)?;
        let mut y = conv3d(&masked, &params.local_weight, Some(&params.local_bias), &spec)?;
        if let Some(bn) = &params.local_bn {
            y = crate::tensor::batch_norm(&y, bn, false)?;
        }
        Ok(cfg.branch_activation.apply(&y))
    };
    let edge = run_branch(&masks.m_edge)?;
    let comp = run_branch(&masks.m_complement)?;
    add(&edge, &comp)
}

/// Global extraction: one convolution over the unmasked map, activated.
pub fn gfe_forward(x: &Tensor, params: &AsreParams, cfg: &AsreConfig) -> Result<Tensor> {
    let spec = cfg.conv_spec()?;
    let mut y = conv3d(x, &params.global_weight, Some(&params.global_bias), &spec)?;
    if let Some(bn) = &params.global_bn {
        y = crate::tensor::batch_norm(&y, bn, false)?;
    }
    Ok(cfg.branch_activation.apply(&y))
}

/// Full ASRE block: mask generation, both extractors, and fusion.
///
/// `mask_override` substitutes precomputed masks; gradient checks use it to
/// hold the (non-differentiable) thresholding fixed under perturbation.
pub fn asre_forward(
    x: &Tensor,
    params: &AsreParams,
    cfg: &AsreConfig,
    mask_override: Option<&EdgeMaskPair>,
) -> Result<Tensor> {
    cfg.validate()?;
    let masks = match mask_override {
        Some(m) => m.clone(),
        None => edge_masks_for(x, cfg.threshold)?,
    };
    let gfe = gfe_forward(x, params, cfg)?;
    let lem = lem_forward(x, &masks, params, cfg)?;
    match cfg.fusion {
        Fusion::Add => {
            if gfe.shape() != lem.shape() {
                return Err(Error::shape(
                    "asre_forward",
                    format!("branch shapes differ: {:?} vs {:?}", gfe.shape(), lem.shape()),
                ));
            }
            add(&gfe, &lem)
        }
        Fusion::CatH => {
            // Height is the second-to-last axis; global block on top.
            let axis = gfe.rank() - 2;
            concat(&[&gfe, &lem], axis)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn small_params(cfg: &AsreConfig, rng: &mut impl Rng) -> AsreParams {
        let k = cfg.kernel;
        let wn = cfg.out_channels * cfg.in_channels * k * k * k;
        let mk_w = |rng: &mut dyn rand::RngCore| {
            let data: Vec<f64> = (0..wn).map(|_| rng.random_range(-0.5..0.5)).collect();
            Tensor::param(vec![cfg.out_channels, cfg.in_channels, k, k, k], data).unwrap()
        };
        AsreParams {
            local_weight: mk_w(rng),
            local_bias: Tensor::param(vec![cfg.out_channels], vec![0.0; cfg.out_channels]).unwrap(),
            global_weight: mk_w(rng),
            global_bias: Tensor::param(vec![cfg.out_channels], vec![0.0; cfg.out_channels]).unwrap(),
            local_bn: None,
            global_bn: None,
        }
    }

    #[test]
    fn constant_sequence_gives_half_stats() {
        // Constant along time: max == avg, sigmoid(0) = 0.5 everywhere.
        let x = Tensor::from_vec(vec![1, 4, 2, 2], vec![0.7; 16]).unwrap();
        let s = temporal_stats(&x).unwrap();
        for &v in s.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn stats_match_scalar_window_evaluation() {
        // Window values (0,1,0): max - avg = 2/3, sigmoid(2/3) ~ 0.660.
        let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let s = temporal_stats(&x).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64 / 3.0).exp());
        assert!((s.data()[1] - expected).abs() < 1e-12);
        assert!((expected - 0.660).abs() < 1e-3);
    }

    #[test]
    fn stats_never_fall_below_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rand_tensor(vec![2, 5, 3, 4], &mut rng);
            let s = temporal_stats(&x).unwrap();
            for &v in s.data() {
                assert!(v >= 0.5 - 1e-6 && v < 1.0, "s = {v}");
            }
        }
    }

    #[test]
    fn boundary_comparison_uses_greater_equal() {
        let s = Tensor::from_vec(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let m = edge_mask(&s, 0.5).unwrap();
        assert_eq!(m.m_edge.data(), &[1.0, 1.0]);
        assert_eq!(m.m_complement.data(), &[0.0, 0.0]);
        let m = edge_mask(&s, 0.6).unwrap();
        assert_eq!(m.m_edge.data(), &[0.0, 0.0]);
    }

    #[test]
    fn mask_splits_at_threshold() {
        let s = Tensor::from_vec(vec![1, 1, 1, 2], vec![0.5, 0.7]).unwrap();
        let m = edge_mask(&s, 0.6).unwrap();
        assert_eq!(m.m_edge.data(), &[0.0, 1.0]);
        assert_eq!(m.m_complement.data(), &[1.0, 0.0]);
    }

    #[test]
    fn threshold_outside_unit_interval_is_rejected() {
        let s = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        assert!(edge_mask(&s, 0.0).is_err());
        assert!(edge_mask(&s, 1.0).is_err());
    }

    #[test]
    fn masks_are_complementary_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = rand_tensor(vec![2, 4, 3, 5], &mut rng);
            let m = edge_masks_for(&x, 0.55).unwrap();
            for (a, b) in m.m_edge.data().iter().zip(m.m_complement.data()) {
                assert!((a + b - 1.0).abs() == 0.0);
                assert!(*a == 0.0 || *a == 1.0);
            }
        }
    }

    #[test]
    fn linear_branches_collapse_to_plain_convolution() {
        // With no activation and zero bias, conv(x*M) + conv(x*comp) equals
        // conv(x) by linearity and mask complementarity.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut cfg = AsreConfig::new(1, 2, Fusion::Add);
        cfg.branch_activation = BranchActivation::None;
        let params = small_params(&cfg, &mut rng);
        let x = rand_tensor(vec![1, 4, 6, 6], &mut rng);
        let masks = edge_masks_for(&x, 0.5).unwrap();
        let lem = lem_forward(&x, &masks, &params, &cfg).unwrap();
        let direct = conv3d(&x, &params.local_weight, Some(&params.local_bias), &ConvSpec::same_cube(3).unwrap()).unwrap();
        // Bias is zero here; the shared conv appears once per branch.
        for (a, b) in lem.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-5, "collapse violated: {a} vs {b}");
        }
    }

    #[test]
    fn leaky_branches_break_the_collapse() {
        // One negative region split by the mask: leaky(a) + leaky(b) differs
        // from leaky(a + b) when a and b straddle zero.
        let mut cfg = AsreConfig::new(1, 1, Fusion::Add);
        cfg.branch_activation = BranchActivation::LeakyRelu(0.01);
        // Box-sum kernel mixes the negative and positive columns, so the two
        // branches see opposite signs at the same output site.
        let params = AsreParams {
            local_weight: Tensor::from_vec(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap(),
            local_bias: Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
            global_weight: Tensor::from_vec(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap(),
            global_bias: Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
            local_bn: None,
            global_bn: None,
        };
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![-1.0, 2.0, -1.0, 2.0]).unwrap();
        let masks = EdgeMaskPair {
            m_edge: Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            m_complement: Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        };
        let lem = lem_forward(&x, &masks, &params, &cfg).unwrap();
        let spec = ConvSpec::same_cube(3).unwrap();
        let unmasked = leaky_relu(
            &conv3d(&x, &params.local_weight, Some(&params.local_bias), &spec).unwrap(),
            0.01,
        );
        let diff: f64 = lem
            .data()
            .iter()
            .zip(unmasked.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "expected the nonlinearity to break the collapse, diff = {diff}");
    }

    #[test]
    fn zero_input_yields_doubled_activated_bias() {
        let mut cfg = AsreConfig::new(1, 2, Fusion::Add);
        cfg.branch_activation = BranchActivation::None;
        let params = AsreParams {
            local_weight: Tensor::zeros(vec![2, 1, 3, 3, 3]),
            local_bias: Tensor::from_vec(vec![2], vec![0.25, -0.5]).unwrap(),
            global_weight: Tensor::zeros(vec![2, 1, 3, 3, 3]),
            global_bias: Tensor::zeros(vec![2]),
            local_bn: None,
            global_bn: None,
        };
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let masks = edge_masks_for(&x, 0.5).unwrap();
        let lem = lem_forward(&x, &masks, &params, &cfg).unwrap();
        // Bias enters once per branch.
        for c in 0..2 {
            let expect = 2.0 * params.local_bias.data()[c];
            for t in 0..2 {
                for i in 0..16 {
                    assert_eq!(lem.data()[(c * 2 + t) * 16 + i], expect);
                }
            }
        }
    }

    #[test]
    fn gfe_identity_kernel_passes_input_through() {
        let mut cfg = AsreConfig::new(1, 1, Fusion::Add);
        cfg.branch_activation = BranchActivation::None;
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // center tap
        let params = AsreParams {
            local_weight: Tensor::zeros(vec![1, 1, 3, 3, 3]),
            local_bias: Tensor::zeros(vec![1]),
            global_weight: Tensor::from_vec(vec![1, 1, 3, 3, 3], w).unwrap(),
            global_bias: Tensor::zeros(vec![1]),
            local_bn: None,
            global_bn: None,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(vec![1, 3, 4, 4], &mut rng);
        let y = gfe_forward(&x, &params, &cfg).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn add_fusion_with_zero_local_params_equals_gfe() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut cfg = AsreConfig::new(1, 2, Fusion::Add);
        cfg.branch_activation = BranchActivation::None;
        let mut params = small_params(&cfg, &mut rng);
        params.local_weight = Tensor::zeros(vec![2, 1, 3, 3, 3]);
        params.local_bias = Tensor::zeros(vec![2]);
        let x = rand_tensor(vec![1, 3, 5, 5], &mut rng);
        let fused = asre_forward(&x, &params, &cfg, None).unwrap();
        let gfe = gfe_forward(&x, &params, &cfg).unwrap();
        assert_eq!(fused.data(), gfe.data());
    }

    #[test]
    fn cath_doubles_height_and_slices_recover_branches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let cfg = AsreConfig::new(1, 2, Fusion::CatH);
        let params = small_params(&cfg, &mut rng);
        let x = rand_tensor(vec![1, 3, 5, 4], &mut rng);
        let masks = edge_masks_for(&x, cfg.threshold).unwrap();
        let fused = asre_forward(&x, &params, &cfg, Some(&masks)).unwrap();
        assert_eq!(fused.shape(), &[2, 3, 10, 4]);
        let gfe = gfe_forward(&x, &params, &cfg).unwrap();
        let lem = lem_forward(&x, &masks, &params, &cfg).unwrap();
        let top = crate::tensor::slice(&fused, 2, 0, 5).unwrap();
        let bottom = crate::tensor::slice(&fused, 2, 5, 5).unwrap();
        assert_eq!(top.data(), gfe.data());
        assert_eq!(bottom.data(), lem.data());
    }

    #[test]
    fn asre1_output_shape_matches_channel_plan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let cfg = AsreConfig::new(1, 4, Fusion::Add);
        let params = small_params(&cfg, &mut rng);
        let x = rand_tensor(vec![1, 4, 8, 8], &mut rng);
        let y = asre_forward(&x, &params, &cfg, None).unwrap();
        assert_eq!(y.shape(), &[4, 4, 8, 8]);
    }

    #[test]
    fn all_parameters_receive_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let cfg = AsreConfig::new(1, 2, Fusion::Add);
        let params = small_params(&cfg, &mut rng);
        let x = rand_tensor(vec![1, 4, 6, 6], &mut rng);
        let y = asre_forward(&x, &params, &cfg, None).unwrap();
        let loss = crate::tensor::sum_all(&crate::tensor::mul(&y, &y).unwrap());
        crate::tensor::backward(&loss).unwrap();
        for (name, t) in [
            ("local_weight", &params.local_weight),
            ("local_bias", &params.local_bias),
            ("global_weight", &params.global_weight),
            ("global_bias", &params.global_bias),
        ] {
            let g = t.grad().unwrap_or_else(|| panic!("{name} got no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
        }
    }
}

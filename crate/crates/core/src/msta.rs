//! Multi-Scale Temporal Aggregation: dilated temporal convolution blocks.
//!
//! Each block (DCB) runs the input through (dilated temporal conv, relu,
//! batch norm) twice and adds a residual connection. The convolutions are
//! purely temporal (k x 1 x 1); spatial mixing already happened upstream.
//! The stock configuration composes a dilation-2 block with a dilation-4
//! block.

use crate::error::{Error, Result};
use crate::tensor::{add, batch_norm, conv3d, relu, BnParams, ConvSpec, Tensor};

#[derive(Debug, Clone)]
pub struct DcbConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Temporal dilation of both convolutions in the block.
    pub dilation: usize,
    /// Temporal kernel extent; odd so `dilation * (k - 1) / 2` padding
    /// preserves the sequence length.
    pub temporal_kernel: usize,
}

pub const LAYERS_PER_BLOCK: usize = 2;

impl DcbConfig {
    pub fn new(channels_in: usize, channels_out: usize, dilation: usize) -> DcbConfig {
        DcbConfig {
            channels_in,
            channels_out,
            dilation,
            temporal_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::config("DCB channel counts must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::config("DCB dilation must be positive"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "DCB temporal kernel {} must be odd",
                self.temporal_kernel
            )));
        }
        Ok(())
    }

    fn spec(&self) -> Result<ConvSpec> {
        ConvSpec::temporal(self.temporal_kernel, self.dilation)
    }
}

/// Weights for one DCB: two conv/BN layers plus an optional 1x1x1 residual
/// projection, present exactly when the channel counts differ.
#[derive(Debug, Clone)]
pub struct DcbParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub bn1: BnParams,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub bn2: BnParams,
    pub proj_weight: Option<Tensor>,
}

impl DcbParams {
    fn check(&self, cfg: &DcbConfig) -> Result<()> {
        if cfg.channels_in != cfg.channels_out && self.proj_weight.is_none() {
            return Err(Error::config(format!(
                "DCB maps {} -> {} channels but has no residual projection",
                cfg.channels_in, cfg.channels_out
            )));
        }
        if cfg.channels_in == cfg.channels_out && self.proj_weight.is_some() {
            return Err(Error::config(
                "DCB with equal channel counts must not carry a projection",
            ));
        }
        Ok(())
    }
}

/// One dilated convolution block: `BN(relu(conv(BN(relu(conv(x)))))) + proj(x)`.
///
/// The layer order inside each half is conv, relu, batch norm; the residual
/// sum has no extra activation.
pub fn dcb_forward(
    x: &Tensor,
    params: &DcbParams,
    cfg: &DcbConfig,
    training: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    params.check(cfg)?;
    let spec = cfg.spec()?;

    let y = conv3d(x, &params.conv1_weight, Some(&params.conv1_bias), &spec)?;
    let y = batch_norm(&relu(&y), &params.bn1, training)?;
    let y = conv3d(&y, &params.conv2_weight, Some(&params.conv2_bias), &spec)?;
    let y = batch_norm(&relu(&y), &params.bn2, training)?;

    let residual = match &params.proj_weight {
        Some(w) => {
            let unit = ConvSpec::new((1, 1, 1), (1, 1, 1), (1, 1, 1), (0, 0, 0));
            conv3d(x, w, None, &unit)?
        }
        None => x.clone(),
    };
    add(&y, &residual)
}

/// The full MSTA stage: `dcb2(dcb1(x))`.
pub fn msta_forward(
    x: &Tensor,
    params1: &DcbParams,
    params2: &DcbParams,
    cfg1: &DcbConfig,
    cfg2: &DcbConfig,
    training: bool,
) -> Result<Tensor> {
    let y = dcb_forward(x, params1, cfg1, training)?;
    dcb_forward(&y, params2, cfg2, training)
}

/// Temporal receptive field, in frames, of a stack of DCBs:
/// `1 + sum over blocks of layers_per_block * dilation * (kernel - 1)`.
pub fn receptive_field(cfgs: &[DcbConfig]) -> usize {
    1 + cfgs
        .iter()
        .map(|c| LAYERS_PER_BLOCK * c.dilation * (c.temporal_kernel - 1))
        .sum::<usize>()
}

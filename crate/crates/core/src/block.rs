//! Residual block with a local-attention spatial stage and mode attention,
//! plus the convolutional variants used for ablations.
//!
//! Pipeline: 1×1 conv (+BN) + ReLU, spatial stage, optional mode attention
//! (`S + Y`), 1×1 conv (+BN), residual add, ReLU. Convolutions carry a bias
//! only when no BN follows them.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Result, StraError};
use crate::local_attention::{LocalAttention, LocalCache};
use crate::mode_attention::{Gating, ModeAttention, ModeAttnConfig, ModeState, Pooling};
use crate::ops::{BatchNorm, BatchStats, BnCache, BnMode, Conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialVariant {
    LocalAttn,
    Conv3x3,
    /// 3×3 convolution with `G` groups.
    GroupConv3x3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    LocalOutput,
    BlockInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSetting {
    Training,
    Frozen,
    Off,
}

impl BnSetting {
    pub fn mode(self) -> Option<BnMode> {
        match self {
            BnSetting::Training => Some(BnMode::Training),
            BnSetting::Frozen => Some(BnMode::Frozen),
            BnSetting::Off => None,
        }
    }
}

macro_rules! tagged_enum {
    ($ty:ty, $op:literal, $($tag:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = StraError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tag => Ok($variant),)+
                    other => Err(invalid($op, format!("unknown value `{other}`"))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($tag); })+
                unreachable!()
            }
        }
    };
}

tagged_enum!(SpatialVariant, "spatial",
    "local" => SpatialVariant::LocalAttn,
    "conv3x3" => SpatialVariant::Conv3x3,
    "group-conv3x3" => SpatialVariant::GroupConv3x3,
);
tagged_enum!(MaskSource, "mask_source",
    "local-output" => MaskSource::LocalOutput,
    "block-input" => MaskSource::BlockInput,
);
tagged_enum!(BnSetting, "bn",
    "training" => BnSetting::Training,
    "frozen" => BnSetting::Frozen,
    "off" => BnSetting::Off,
);
tagged_enum!(Pooling, "pooling",
    "masked" => Pooling::Masked,
    "mean" => Pooling::Mean,
);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    /// Per-mode width `C_m`; the inner width is `C_m * groups`.
    pub mid_per_mode: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    /// Applied by the spatial stage; local attention requires 1.
    pub stride: usize,
    pub gating: Gating,
    pub interaction: bool,
    pub strict_substitution: bool,
    pub scaled: bool,
    pub pooling: Pooling,
    pub mask_source: MaskSource,
    pub spatial: SpatialVariant,
    pub mode_attention: bool,
    pub bn: BnSetting,
    /// When false the last 1×1 projection is dropped; needs `C_m * G == out`.
    pub final_conv: bool,
}

impl BlockConfig {
    pub fn new(in_channels: usize, mid_per_mode: usize, out_channels: usize, groups: usize) -> Self {
        Self {
            in_channels,
            mid_per_mode,
            out_channels,
            groups,
            kernel: 3,
            stride: 1,
            gating: Gating::Sigmoid,
            interaction: true,
            strict_substitution: false,
            scaled: false,
            pooling: Pooling::Masked,
            mask_source: MaskSource::LocalOutput,
            spatial: SpatialVariant::LocalAttn,
            mode_attention: true,
            bn: BnSetting::Training,
            final_conv: true,
        }
    }

    /// Standard bottleneck: 3×3 convolution, no mode attention.
    pub fn bottleneck(in_channels: usize, mid: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            spatial: SpatialVariant::Conv3x3,
            mode_attention: false,
            stride,
            ..Self::new(in_channels, mid, out_channels, 1)
        }
    }

    pub fn mid_channels(&self) -> usize {
        self.mid_per_mode * self.groups
    }

    pub fn mode_config(&self) -> ModeAttnConfig {
        ModeAttnConfig {
            groups: self.groups,
            gating: self.gating,
            interaction: self.interaction,
            strict_substitution: self.strict_substitution,
            scaled: self.scaled,
            pooling: self.pooling,
        }
    }

    pub fn has_projection_shortcut(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "BlockConfig";
        if self.in_channels == 0 || self.mid_per_mode == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(invalid(OP, "widths and mode count must be positive"));
        }
        if self.stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        if self.spatial == SpatialVariant::LocalAttn {
            if self.kernel % 2 == 0 {
                return Err(invalid(OP, format!("window size {} must be odd", self.kernel)));
            }
            if self.stride != 1 {
                return Err(invalid(OP, "local attention does not support stride"));
            }
        }
        if self.mode_attention && self.mask_source == MaskSource::BlockInput {
            if self.in_channels % self.groups != 0 {
                return Err(invalid(OP, format!("{} modes do not divide {} input channels", self.groups, self.in_channels)));
            }
            if self.stride != 1 {
                return Err(invalid(OP, "block-input masks need stride 1"));
            }
        }
        if !self.final_conv && self.mid_channels() != self.out_channels {
            return Err(shape_err(OP, "inner width without final projection", self.out_channels, self.mid_channels()));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.spatial {
            SpatialVariant::LocalAttn => (h, w),
            _ => ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialStage {
    Local(LocalAttention),
    Conv { conv: Conv2d, bn: Option<BatchNorm> },
}

/// Projection shortcut: 1×1 convolution with the block stride, then BN.
#[derive(Debug, Clone, PartialEq)]
pub struct Shortcut {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StraBlock {
    pub cfg: BlockConfig,
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm>,
    pub spatial: SpatialStage,
    pub mode: Option<ModeAttention>,
    pub conv3: Option<Conv2d>,
    pub bn3: Option<BatchNorm>,
    pub shortcut: Option<Shortcut>,
}

enum SpatialCache {
    Local(LocalCache),
    Conv { bn: Option<BnCache> },
}

pub struct BlockCache {
    x: Tensor,
    bn1: Option<BnCache>,
    x1: Tensor,
    spatial: SpatialCache,
    s: Tensor,
    pub mode_state: Option<ModeState>,
    t: Tensor,
    bn3: Option<BnCache>,
    shortcut_bn: Option<BnCache>,
    out: Tensor,
    stats: [Option<BatchStats>; 4],
    relu_margin: f64,
}

impl BlockCache {
    /// Smallest magnitude of any ReLU input in the forward pass.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }
}

/// Smallest `|v|` over a tensor.
pub(crate) fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn norm(bn: &Option<BatchNorm>, x: Tensor, train: bool, stats: &mut Option<BatchStats>) -> Result<(Tensor, Option<BnCache>)> {
    match bn {
        Some(bn) => {
            let (y, cache, s) = bn.forward_pure(&x, train)?;
            *stats = s;
            Ok((y, Some(cache)))
        }
        None => Ok((x, None)),
    }
}

fn norm_backward(bn: &Option<BatchNorm>, cache: &Option<BnCache>, g: Tensor, grads: &mut Vec<Tensor>) -> Result<Tensor> {
    match (bn, cache) {
        (Some(bn), Some(c)) => bn.backward(c, &g, grads),
        (None, None) => Ok(g),
        _ => Err(invalid("block_backward", "cache does not match the normalization setting")),
    }
}

fn relu_backward(out: &Tensor, g: &Tensor) -> Result<Tensor> {
    out.zip_map(g, |o, g| if o > 0.0 { g } else { 0.0 })
}

fn push_named<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, items: impl IntoIterator<Item = (impl fmt::Display, &'a Tensor)>) {
    out.extend(items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

impl StraBlock {
    pub fn init(cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let bn_mode = cfg.bn.mode();
        let has_bn = bn_mode.is_some();
        let mk_bn = |c: usize| bn_mode.map(|m| BatchNorm::new(c).with_mode(m));
        let mid = cfg.mid_channels();
        let conv1 = Conv2d::init(cfg.in_channels, mid, ConvSpec::pointwise(1), !has_bn, rng)?;
        let spatial = match cfg.spatial {
            SpatialVariant::LocalAttn => {
                SpatialStage::Local(LocalAttention::init(mid, cfg.mid_per_mode, cfg.groups, cfg.kernel, bn_mode, rng)?)
            }
            SpatialVariant::Conv3x3 | SpatialVariant::GroupConv3x3 => {
                let groups = if cfg.spatial == SpatialVariant::Conv3x3 { 1 } else { cfg.groups };
                SpatialStage::Conv {
                    conv: Conv2d::init(mid, mid, ConvSpec::square(3, cfg.stride, groups), !has_bn, rng)?,
                    bn: mk_bn(mid),
                }
            }
        };
        let mode = if cfg.mode_attention {
            let src = match cfg.mask_source {
                MaskSource::LocalOutput => mid,
                MaskSource::BlockInput => cfg.in_channels,
            };
            Some(ModeAttention::init(src, cfg.mode_config(), rng)?)
        } else {
            None
        };
        let (conv3, bn3) = if cfg.final_conv {
            (
                Some(Conv2d::init(mid, cfg.out_channels, ConvSpec::pointwise(1), !has_bn, rng)?),
                mk_bn(cfg.out_channels),
            )
        } else {
            (None, None)
        };
        let shortcut = if cfg.has_projection_shortcut() {
            let spec = ConvSpec {
                stride: (cfg.stride, cfg.stride),
                ..ConvSpec::pointwise(1)
            };
            Some(Shortcut {
                conv: Conv2d::init(cfg.in_channels, cfg.out_channels, spec, !has_bn, rng)?,
                bn: mk_bn(cfg.out_channels),
            })
        } else {
            None
        };
        Ok(Self {
            cfg,
            conv1,
            bn1: mk_bn(mid),
            spatial,
            mode,
            conv3,
            bn3,
            shortcut,
        })
    }

    /// `train` selects batch statistics for BN layers in training mode.
    /// Running statistics are left untouched; see [`StraBlock::commit_stats`].
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, BlockCache)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(shape_err("stra_block_forward", "input channels", self.cfg.in_channels, c));
        }
        let mut stats: [Option<BatchStats>; 4] = Default::default();
        let [st1, st2, st3, st4] = &mut stats;

        let (h1, bn1) = norm(&self.bn1, self.conv1.forward(x)?, train, st1)?;
        let x1 = h1.relu();
        let mut relu_margin = min_abs(&h1);

        let (s, spatial) = match &self.spatial {
            SpatialStage::Local(la) => {
                let (s, mut lc) = la.forward(&x1, train)?;
                *st2 = lc.bn_stats.take();
                (s, SpatialCache::Local(lc))
            }
            SpatialStage::Conv { conv, bn } => {
                let (pre, bc) = norm(bn, conv.forward(&x1)?, train, st2)?;
                relu_margin = relu_margin.min(min_abs(&pre));
                (pre.relu(), SpatialCache::Conv { bn: bc })
            }
        };

        let (t, mode_state) = match &self.mode {
            Some(m) => {
                let src = (self.cfg.mask_source == MaskSource::BlockInput).then_some(x);
                let (t, st) = m.forward(&s, src)?;
                (t, Some(st))
            }
            None => (s.clone(), None),
        };

        let (branch, bn3) = match &self.conv3 {
            Some(conv3) => norm(&self.bn3, conv3.forward(&t)?, train, st3)?,
            None => (t.clone(), None),
        };

        let (skip, shortcut_bn) = match &self.shortcut {
            Some(sc) => norm(&sc.bn, sc.conv.forward(x)?, train, st4)?,
            None => (x.clone(), None),
        };
        let pre = branch.add(&skip)?;
        relu_margin = relu_margin.min(min_abs(&pre));
        let out = pre.relu();
        out.check_finite("stra_block_forward")?;
        Ok((
            out.clone(),
            BlockCache {
                x: x.clone(),
                bn1,
                x1,
                spatial,
                s,
                mode_state,
                t,
                bn3,
                shortcut_bn,
                out,
                stats,
                relu_margin,
            },
        ))
    }

    /// Returns `d x` and parameter gradients in [`StraBlock::params`] order.
    /// `grad_masks` is an extra gradient on the mode masks.
    pub fn backward(&self, grad_out: &Tensor, grad_masks: Option<&Tensor>, cache: &BlockCache) -> Result<(Tensor, Vec<Tensor>)> {
        cache.out.same_shape(grad_out, "stra_block_backward")?;
        if grad_masks.is_some() && self.mode.is_none() {
            return Err(invalid("stra_block_backward", "mask gradient given to a block without mode attention"));
        }
        let g_sum = relu_backward(&cache.out, grad_out)?;

        let mut sc_grads = Vec::new();
        let mut gx = match &self.shortcut {
            Some(sc) => {
                let mut conv_grads = Vec::new();
                let mut bn_grads = Vec::new();
                let g = norm_backward(&sc.bn, &cache.shortcut_bn, g_sum.clone(), &mut bn_grads)?;
                let gx = sc.conv.backward(&cache.x, &g, &mut conv_grads)?;
                sc_grads.extend(conv_grads);
                sc_grads.extend(bn_grads);
                gx
            }
            None => g_sum.clone(),
        };

        let mut c3_grads = Vec::new();
        let g_t = match &self.conv3 {
            Some(conv3) => {
                let mut bn_grads = Vec::new();
                let g = norm_backward(&self.bn3, &cache.bn3, g_sum, &mut bn_grads)?;
                let g_t = conv3.backward(&cache.t, &g, &mut c3_grads)?;
                c3_grads.extend(bn_grads);
                g_t
            }
            None => g_sum,
        };

        let (g_s, mode_grads) = match (&self.mode, &cache.mode_state) {
            (Some(m), Some(st)) => {
                let (g_s, g_src, grads) = m.backward(&g_t, grad_masks, st)?;
                if let Some(g_src) = g_src {
                    gx.add_assign(&g_src)?;
                }
                (g_s, grads)
            }
            (None, None) => (g_t, Vec::new()),
            _ => return Err(invalid("stra_block_backward", "cache does not match the mode attention setting")),
        };

        let (g_x1, sp_grads) = match (&self.spatial, &cache.spatial) {
            (SpatialStage::Local(la), SpatialCache::Local(lc)) => la.backward(&g_s, lc)?,
            (SpatialStage::Conv { conv, bn }, SpatialCache::Conv { bn: bc }) => {
                let g_pre = relu_backward(&cache.s, &g_s)?;
                let mut conv_grads = Vec::new();
                let mut bn_grads = Vec::new();
                let g = norm_backward(bn, bc, g_pre, &mut bn_grads)?;
                let g_x1 = conv.backward(&cache.x1, &g, &mut conv_grads)?;
                conv_grads.extend(bn_grads);
                (g_x1, conv_grads)
            }
            _ => return Err(invalid("stra_block_backward", "cache does not match the spatial stage")),
        };

        let g_h1 = relu_backward(&cache.x1, &g_x1)?;
        let mut bn1_grads = Vec::new();
        let g = norm_backward(&self.bn1, &cache.bn1, g_h1, &mut bn1_grads)?;
        let mut grads = Vec::new();
        gx.add_assign(&self.conv1.backward(&cache.x, &g, &mut grads)?)?;
        grads.extend(bn1_grads);
        grads.extend(sp_grads);
        grads.extend(mode_grads);
        grads.extend(c3_grads);
        grads.extend(sc_grads);
        Ok((gx, grads))
    }

    /// Apply the batch statistics gathered by a training forward pass.
    pub fn commit_stats(&mut self, cache: &BlockCache) {
        let [s1, s2, s3, s4] = &cache.stats;
        let targets: [(Option<&mut BatchNorm>, &Option<BatchStats>); 4] = [
            (self.bn1.as_mut(), s1),
            (
                match &mut self.spatial {
                    SpatialStage::Local(la) => la.u_bn.as_mut(),
                    SpatialStage::Conv { bn, .. } => bn.as_mut(),
                },
                s2,
            ),
            (self.bn3.as_mut(), s3),
            (self.shortcut.as_mut().and_then(|s| s.bn.as_mut()), s4),
        ];
        for (bn, stats) in targets {
            if let (Some(bn), Some(stats)) = (bn, stats) {
                bn.commit_stats(stats);
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        push_named(&mut p, "conv1", self.conv1.params());
        if let Some(bn) = &self.bn1 {
            push_named(&mut p, "bn1", bn.params());
        }
        match &self.spatial {
            SpatialStage::Local(la) => push_named(&mut p, "local", la.params()),
            SpatialStage::Conv { conv, bn } => {
                push_named(&mut p, "conv2", conv.params());
                if let Some(bn) = bn {
                    push_named(&mut p, "bn2", bn.params());
                }
            }
        }
        if let Some(m) = &self.mode {
            push_named(&mut p, "mode", m.params());
        }
        if let Some(c) = &self.conv3 {
            push_named(&mut p, "conv3", c.params());
        }
        if let Some(bn) = &self.bn3 {
            push_named(&mut p, "bn3", bn.params());
        }
        if let Some(sc) = &self.shortcut {
            push_named(&mut p, "shortcut.conv", sc.conv.params());
            if let Some(bn) = &sc.bn {
                push_named(&mut p, "shortcut.bn", bn.params());
            }
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.conv1.params_mut();
        if let Some(bn) = &mut self.bn1 {
            p.extend(bn.params_mut());
        }
        match &mut self.spatial {
            SpatialStage::Local(la) => p.extend(la.params_mut()),
            SpatialStage::Conv { conv, bn } => {
                p.extend(conv.params_mut());
                if let Some(bn) = bn {
                    p.extend(bn.params_mut());
                }
            }
        }
        if let Some(m) = &mut self.mode {
            p.extend(m.params_mut());
        }
        if let Some(c) = &mut self.conv3 {
            p.extend(c.params_mut());
        }
        if let Some(bn) = &mut self.bn3 {
            p.extend(bn.params_mut());
        }
        if let Some(sc) = &mut self.shortcut {
            p.extend(sc.conv.params_mut());
            if let Some(bn) = &mut sc.bn {
                p.extend(bn.params_mut());
            }
        }
        p
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        if let Some(bn) = &self.bn1 {
            push_named(&mut p, "bn1", bn.buffers());
        }
        match &self.spatial {
            SpatialStage::Local(la) => push_named(&mut p, "local", la.buffers()),
            SpatialStage::Conv { bn: Some(bn), .. } => push_named(&mut p, "bn2", bn.buffers()),
            SpatialStage::Conv { bn: None, .. } => {}
        }
        if let Some(bn) = &self.bn3 {
            push_named(&mut p, "bn3", bn.buffers());
        }
        if let Some(Shortcut { bn: Some(bn), .. }) = &self.shortcut {
            push_named(&mut p, "shortcut.bn", bn.buffers());
        }
        p
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(bn) = &mut self.bn1 {
            p.extend(bn.buffers_mut());
        }
        match &mut self.spatial {
            SpatialStage::Local(la) => p.extend(la.buffers_mut()),
            SpatialStage::Conv { bn: Some(bn), .. } => p.extend(bn.buffers_mut()),
            SpatialStage::Conv { bn: None, .. } => {}
        }
        if let Some(bn) = &mut self.bn3 {
            p.extend(bn.buffers_mut());
        }
        if let Some(Shortcut { bn: Some(bn), .. }) = &mut self.shortcut {
            p.extend(bn.buffers_mut());
        }
        p
    }
}

pub fn stra_block_forward(x: &Tensor, params: &StraBlock) -> Result<(Tensor, BlockCache)> {
    params.forward(x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.normal())
    }

    #[test]
    fn shape_contract() {
        let mut rng = Rng::new(1);
        let block = StraBlock::init(BlockConfig::new(64, 8, 64, 4), &mut rng).unwrap();
        let x = random(&[2, 64, 16, 8], &mut rng);
        let (y, cache) = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[2, 64, 16, 8]);
        assert_eq!(cache.mode_state.unwrap().masks.shape(), &[2, 4, 16, 8]);
    }

    #[test]
    fn zero_branch_is_identity_on_nonnegative_input() {
        let mut rng = Rng::new(2);
        let mut cfg = BlockConfig::new(8, 2, 8, 2);
        cfg.bn = BnSetting::Off;
        let mut block = StraBlock::init(cfg, &mut rng).unwrap();
        let c3 = block.conv3.as_mut().unwrap();
        c3.weight = Tensor::zeros(c3.weight.shape().to_vec());
        c3.bias = Some(Tensor::zeros(vec![8]));
        let x = random(&[1, 8, 5, 5], &mut rng);
        let (y, _) = block.forward(&x, true).unwrap();
        assert_eq!(y, x.relu());
        let xp = x.relu();
        assert_eq!(block.forward(&xp, true).unwrap().0, xp);
    }

    #[test]
    fn projection_shortcut_when_widths_differ() {
        let mut rng = Rng::new(3);
        let block = StraBlock::init(BlockConfig::new(6, 2, 10, 2), &mut rng).unwrap();
        assert!(block.shortcut.is_some());
        let (y, _) = block.forward(&random(&[2, 6, 4, 4], &mut rng), true).unwrap();
        assert_eq!(y.shape(), &[2, 10, 4, 4]);
    }

    #[test]
    fn strided_bottleneck() {
        let mut rng = Rng::new(4);
        let block = StraBlock::init(BlockConfig::bottleneck(4, 2, 8, 2), &mut rng).unwrap();
        let (y, _) = block.forward(&random(&[2, 4, 7, 7], &mut rng), true).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
        assert_eq!(block.cfg.output_hw(7, 7), (4, 4));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = Rng::new(5);
        let mut cfg = BlockConfig::new(8, 2, 8, 2);
        cfg.stride = 2;
        assert!(StraBlock::init(cfg, &mut rng).is_err());
        let mut cfg = BlockConfig::new(8, 2, 8, 2);
        cfg.kernel = 4;
        assert!(StraBlock::init(cfg, &mut rng).is_err());
        let mut cfg = BlockConfig::new(8, 2, 6, 2);
        cfg.final_conv = false;
        assert!(StraBlock::init(cfg, &mut rng).is_err());
        let block = StraBlock::init(BlockConfig::new(8, 2, 8, 2), &mut rng).unwrap();
        assert!(block.forward(&Tensor::zeros(vec![1, 6, 3, 3]), true).is_err());
    }

    #[test]
    fn plain_bottleneck_matches_manual_composition() {
        let mut rng = Rng::new(6);
        let mut cfg = BlockConfig::bottleneck(4, 3, 4, 1);
        cfg.bn = BnSetting::Off;
        let block = StraBlock::init(cfg, &mut rng).unwrap();
        let x = random(&[2, 4, 5, 5], &mut rng);
        let SpatialStage::Conv { conv, .. } = &block.spatial else { panic!() };
        let h = block.conv1.forward(&x).unwrap().relu();
        let h = conv.forward(&h).unwrap().relu();
        let h = block.conv3.as_ref().unwrap().forward(&h).unwrap();
        let expect = h.add(&x).unwrap().relu();
        assert_eq!(block.forward(&x, true).unwrap().0, expect);
    }

    #[test]
    fn tag_parsing_round_trips() {
        for v in [SpatialVariant::LocalAttn, SpatialVariant::Conv3x3, SpatialVariant::GroupConv3x3] {
            assert_eq!(v.to_string().parse::<SpatialVariant>().unwrap(), v);
        }
        assert_eq!("frozen".parse::<BnSetting>().unwrap(), BnSetting::Frozen);
        assert!("sometimes".parse::<BnSetting>().is_err());
    }

    #[test]
    fn commit_updates_running_stats_only_on_request() {
        let mut rng = Rng::new(7);
        let mut block = StraBlock::init(BlockConfig::new(4, 2, 4, 2), &mut rng).unwrap();
        let x = random(&[2, 4, 3, 3], &mut rng);
        let before: Vec<Tensor> = block.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        let (_, cache) = block.forward(&x, true).unwrap();
        let same: Vec<Tensor> = block.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, same);
        block.commit_stats(&cache);
        let after: Vec<Tensor> = block.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(after.len(), 6);
        assert!(before.iter().zip(&after).all(|(a, b)| a != b));
    }

    #[test]
    fn params_and_grads_align() {
        let mut rng = Rng::new(8);
        let mut cfg = BlockConfig::new(4, 2, 6, 2);
        cfg.mask_source = MaskSource::BlockInput;
        let block = StraBlock::init(cfg, &mut rng).unwrap();
        let x = random(&[2, 4, 3, 3], &mut rng);
        let (y, cache) = block.forward(&x, true).unwrap();
        let (gx, grads) = block.backward(&y, None, &cache).unwrap();
        assert_eq!(gx.shape(), x.shape());
        let params = block.params();
        assert_eq!(params.len(), grads.len());
        for ((name, p), g) in params.iter().zip(&grads) {
            assert_eq!(p.shape(), g.shape(), "{name}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn drop_in_preserves_shape(seed in any::<u64>(), groups in 1usize..4, cm in 1usize..4, h in 2usize..6, w in 2usize..6,
                                   variant in 0usize..3, mode in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let c = groups * cm + 1;
            let mut cfg = BlockConfig::new(c, cm, c, groups);
            cfg.spatial = [SpatialVariant::LocalAttn, SpatialVariant::Conv3x3, SpatialVariant::GroupConv3x3][variant];
            cfg.mode_attention = mode;
            let block = StraBlock::init(cfg, &mut rng).unwrap();
            let x = Tensor::from_fn(vec![2, c, h, w], |_| rng.normal());
            let y = block.forward(&x, true).unwrap().0;
            prop_assert_eq!(y.shape(), x.shape());
        }
    }
}

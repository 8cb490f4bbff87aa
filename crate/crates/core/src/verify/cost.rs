//! Analytic multiply-accumulate, FLOP and parameter counts.
//!
//! Conventions, per image:
//! - `macs`: multiply-accumulates of convolutions, linear layers and the
//!   attention products. Normalization, activations, pooling and softmax
//!   contribute none.
//! - `flops`: two per multiply-accumulate, one per bias add, and one per
//!   element for BN, ReLU, residual adds, pooling taps and softmax
//!   exponentials.

use std::fmt::Write as _;

use crate::block::{BlockConfig, BnSetting, SpatialVariant};
use crate::error::{invalid, Result};
use crate::mode_attention::Pooling;
use crate::network::{ArchConfig, HeadPool, LayerSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub label: String,
    pub input: (usize, usize),
    pub rows: Vec<CostRow>,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ResNet50,
    ResNet50Stra,
}

impl std::str::FromStr for Preset {
    type Err = crate::StraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Preset::ResNet50),
            "resnet50_stra" => Ok(Preset::ResNet50Stra),
            other => Err(invalid("count_cost", format!("unknown preset `{other}`"))),
        }
    }
}

impl CostReport {
    fn push(&mut self, name: impl Into<String>, kind: &'static str, macs: u64, flops: u64, params: u64) {
        self.macs += macs;
        self.flops += flops;
        self.params += params;
        self.rows.push(CostRow {
            name: name.into(),
            kind,
            macs,
            flops,
            params,
        });
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        hw: (usize, usize),
        bias: bool,
    ) -> (usize, usize) {
        let p = k / 2;
        let oh = (hw.0 + 2 * p - k) / stride + 1;
        let ow = (hw.1 + 2 * p - k) / stride + 1;
        let weights = (k * k * cin / groups * cout) as u64;
        let outs = (cout * oh * ow) as u64;
        let macs = weights * (oh * ow) as u64;
        let b = if bias { cout as u64 } else { 0 };
        self.push(name, "conv", macs, 2 * macs + if bias { outs } else { 0 }, weights + b);
        (oh, ow)
    }

    fn bn(&mut self, name: &str, c: usize, hw: (usize, usize)) {
        self.push(name, "bn", 0, (c * hw.0 * hw.1) as u64, 2 * c as u64);
    }

    fn elementwise(&mut self, name: &str, kind: &'static str, count: usize) {
        self.push(name, kind, 0, count as u64, 0);
    }

    fn products(&mut self, name: &str, kind: &'static str, macs: usize) {
        self.push(name, kind, macs as u64, 2 * macs as u64, 0);
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) {
        let macs = (inputs * outputs) as u64;
        self.push(name, "linear", macs, 2 * macs + outputs as u64, macs + outputs as u64);
    }

    fn block(&mut self, prefix: &str, cfg: &BlockConfig, hw: (usize, usize)) -> (usize, usize) {
        let has_bn = cfg.bn != BnSetting::Off;
        let mid = cfg.mid_channels();
        let g = cfg.groups;
        let n = |s: &str| format!("{prefix}.{s}");

        self.conv(&n("conv1"), cfg.in_channels, mid, 1, 1, 1, hw, !has_bn);
        if has_bn {
            self.bn(&n("bn1"), mid, hw);
        }
        self.elementwise(&n("relu1"), "relu", mid * hw.0 * hw.1);

        let ohw = match cfg.spatial {
            SpatialVariant::LocalAttn => {
                let kk = cfg.kernel * cfg.kernel;
                let px = hw.0 * hw.1;
                self.conv(&n("local.omega"), mid, g * kk, 1, 1, g, hw, true);
                self.conv(&n("local.nu"), mid, g, 1, 1, g, hw, false);
                self.conv(&n("local.u"), mid, mid, 1, 1, g, hw, !has_bn);
                if has_bn {
                    self.bn(&n("local.u_bn"), mid, hw);
                }
                self.elementwise(&n("local.logits"), "add", g * kk * px);
                self.elementwise(&n("local.softmax"), "softmax", g * kk * px);
                self.products(&n("local.aggregate"), "attention", kk * mid * px);
                hw
            }
            SpatialVariant::Conv3x3 | SpatialVariant::GroupConv3x3 => {
                let groups = if cfg.spatial == SpatialVariant::Conv3x3 { 1 } else { g };
                let ohw = self.conv(&n("conv2"), mid, mid, 3, cfg.stride, groups, hw, !has_bn);
                if has_bn {
                    self.bn(&n("bn2"), mid, ohw);
                }
                self.elementwise(&n("relu2"), "relu", mid * ohw.0 * ohw.1);
                ohw
            }
        };
        let px = ohw.0 * ohw.1;

        if cfg.mode_attention {
            let cm = cfg.mid_per_mode;
            let src = match cfg.mask_source {
                crate::block::MaskSource::LocalOutput => mid,
                crate::block::MaskSource::BlockInput => cfg.in_channels,
            };
            self.conv(&n("mode.mask_conv"), src, g, 1, 1, g, ohw, false);
            self.elementwise(&n("mode.mask_softmax"), "softmax", g * px);
            match cfg.pooling {
                Pooling::Masked => self.products(&n("mode.modal_vectors"), "attention", mid * px),
                Pooling::Mean => self.elementwise(&n("mode.modal_vectors"), "add", mid * px),
            }
            if cfg.interaction {
                self.products(&n("mode.interaction"), "attention", 2 * g * g * cm);
                self.elementwise(&n("mode.interaction_softmax"), "softmax", g * g);
            }
            self.products(&n("mode.coefficients"), "attention", mid * px);
            self.elementwise(&n("mode.gating"), "activation", g * px);
            self.products(&n("mode.context"), "attention", mid * px);
        }

        if cfg.final_conv {
            self.conv(&n("conv3"), mid, cfg.out_channels, 1, 1, 1, ohw, !has_bn);
            if has_bn {
                self.bn(&n("bn3"), cfg.out_channels, ohw);
            }
        }
        if cfg.has_projection_shortcut() {
            self.conv(&n("shortcut.conv"), cfg.in_channels, cfg.out_channels, 1, cfg.stride, 1, hw, !has_bn);
            if has_bn {
                self.bn(&n("shortcut.bn"), cfg.out_channels, ohw);
            }
        }
        self.elementwise(&n("residual"), "add", cfg.out_channels * px);
        self.elementwise(&n("relu_out"), "relu", cfg.out_channels * px);
        ohw
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let _ = writeln!(s, "{} @ {}x{}", self.label, self.input.0, self.input.1);
        let _ = writeln!(s, "{:<width$}  {:<10} {:>14} {:>14} {:>10}", "layer", "kind", "macs", "flops", "params");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:<10} {:>14} {:>14} {:>10}", r.name, r.kind, r.macs, r.flops, r.params);
        }
        let _ = writeln!(s, "{:<width$}  {:<10} {:>14} {:>14} {:>10}", "total", "", self.macs, self.flops, self.params);
        let _ = writeln!(
            s,
            "{:.3} GMACs, {:.3} GFLOPs, {:.3}M params",
            self.gmacs(),
            self.gflops(),
            self.mparams()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,flops,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, r.macs, r.flops, r.params);
        }
        let _ = writeln!(s, "total,,{},{},{}", self.macs, self.flops, self.params);
        s
    }
}

/// Costs of a configured network for one image.
pub fn count_arch(arch: &ArchConfig) -> Result<CostReport> {
    let mut r = CostReport {
        label: "config".into(),
        input: (arch.input.1, arch.input.2),
        ..Default::default()
    };
    let mut last = arch.input;
    for (i, layer) in arch.layers()?.iter().enumerate() {
        match layer {
            LayerSpec::Conv {
                input,
                out,
                kernel,
                stride,
                bn,
            } => {
                let has_bn = *bn != BnSetting::Off;
                let hw = r.conv(&format!("layers.{i}.conv"), input.0, *out, *kernel, *stride, 1, (input.1, input.2), !has_bn);
                if has_bn {
                    r.bn(&format!("layers.{i}.bn"), *out, hw);
                }
                r.elementwise(&format!("layers.{i}.relu"), "relu", out * hw.0 * hw.1);
            }
            LayerSpec::Block { input, cfg } => {
                r.block(&format!("layers.{i}"), cfg, (input.1, input.2));
            }
        }
        last = layer.output();
    }
    if arch.pool == HeadPool::Avg {
        r.elementwise("pool", "pool", last.0 * last.1 * last.2);
    }
    r.linear("head", arch.head_features()?, arch.classes);
    Ok(r)
}

/// ResNet-50 with the last spatial downsampling removed and a 512-wide
/// embedding head (linear + BN); the `Stra` variant swaps the three
/// last-stage bottlenecks for attention blocks with `G = 4`, `K = 3`,
/// `C_m = 128`.
pub fn count_preset(preset: Preset, input: (usize, usize)) -> Result<CostReport> {
    if input.0 < 32 || input.1 < 32 {
        return Err(invalid("count_cost", "preset input must be at least 32x32"));
    }
    let mut r = CostReport {
        label: match preset {
            Preset::ResNet50 => "resnet50".into(),
            Preset::ResNet50Stra => "resnet50_stra".into(),
        },
        input,
        ..Default::default()
    };
    let hw = r.conv("stem.conv", 3, 64, 7, 2, 1, input, false);
    r.bn("stem.bn", 64, hw);
    r.elementwise("stem.relu", "relu", 64 * hw.0 * hw.1);
    let mut hw = ((hw.0 - 1) / 2 + 1, (hw.1 - 1) / 2 + 1);
    r.elementwise("stem.maxpool", "pool", 9 * 64 * hw.0 * hw.1);

    let stages = [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 1)];
    let mut cin = 64;
    for (si, &(mid, out, repeat, stride)) in stages.iter().enumerate() {
        for b in 0..repeat {
            let s = if b == 0 { stride } else { 1 };
            let cfg = if si == 3 && preset == Preset::ResNet50Stra {
                BlockConfig::new(cin, mid / 4, out, 4)
            } else {
                BlockConfig::bottleneck(cin, mid, out, s)
            };
            hw = r.block(&format!("layer{}.{b}", si + 1), &cfg, hw);
            cin = out;
        }
    }
    r.elementwise("pool", "pool", cin * hw.0 * hw.1);
    r.linear("embed.linear", cin, 512);
    r.push("embed.bn", "bn", 0, 512, 1024);
    Ok(r)
}

//! Ready-made gradient and oracle checks over random desk-scale instances.

use std::iter::once;

use crate::block::{BlockConfig, BnSetting, MaskSource, SpatialVariant, StraBlock};
use crate::error::Result;
use crate::local_attention::LocalAttention;
use crate::losses::{cross_entropy, diversity_loss};
use crate::mode_attention::{Gating, ModeAttention, ModeAttnConfig, Pooling};
use crate::network::{build_network, ArchConfig, HeadPool, Model, StageSpec};
use crate::nonlocal::NonLocalBlock;
use crate::ops::{conv2d_grouped, BatchNorm, BnMode, Conv2d, ConvSpec, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::gradcheck::{gradcheck, probe, FnPair, GradReport};
use super::oracle::{self, oracle_compare, OracleReport};

/// Modules covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteModule {
    Local,
    Mode,
    Block,
    Losses,
    Primitives,
    Network,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 6] = [
        SuiteModule::Local,
        SuiteModule::Mode,
        SuiteModule::Block,
        SuiteModule::Losses,
        SuiteModule::Primitives,
        SuiteModule::Network,
    ];
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Instances this close to a kink (a ReLU input near zero, or a near tie in
/// the per-pixel max of the diversity loss) are redrawn: a finite difference
/// straddling the kink measures neither one-sided derivative.
const KINK_MARGIN: f64 = 1e-5;

/// Smallest gap between the largest and second largest mask value at any
/// pixel.
fn tie_gap(masks: &Tensor) -> f64 {
    let s = masks.shape();
    let (n, g, hw) = (s[0], s[1], s[2] * s[3]);
    let mut gap = f64::INFINITY;
    for b in 0..n {
        for p in 0..hw {
            let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for k in 0..g {
                let v = masks.data()[(b * g + k) * hw + p];
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            gap = gap.min(top - second);
        }
    }
    gap
}

/// Draw instances from `gen` until `margin` clears [`KINK_MARGIN`].
fn draw_smooth<T>(rng: &mut Rng, mut gen: impl FnMut(&mut Rng) -> Result<T>, margin: impl Fn(&T) -> Result<f64>) -> Result<T> {
    loop {
        let inst = gen(rng)?;
        if margin(&inst)? >= KINK_MARGIN {
            return Ok(inst);
        }
    }
}

/// Gradient check of `objective(module, x)` with respect to `x` and every
/// parameter returned by `params_mut`.
fn module_check<M: Clone>(
    label: String,
    module: &M,
    x: Tensor,
    names: Vec<String>,
    params_mut: fn(&mut M) -> Vec<&mut Tensor>,
    objective: impl Fn(&M, &Tensor) -> Result<f64>,
    grads: impl Fn(&M, &Tensor) -> Result<(Tensor, Vec<Tensor>)>,
    tol: f64,
) -> Result<GradReport> {
    let install = |inputs: &[Tensor]| {
        let mut m = module.clone();
        for (p, v) in params_mut(&mut m).into_iter().zip(&inputs[1..]) {
            *p = v.clone();
        }
        m
    };
    let f = FnPair {
        value: |inputs: &[Tensor]| objective(&install(inputs), &inputs[0]),
        gradient: |inputs: &[Tensor]| {
            let (gx, g) = grads(&install(inputs), &inputs[0])?;
            Ok(once(gx).chain(g).collect::<Vec<_>>())
        },
    };
    let mut m = module.clone();
    let mut named = vec![("x".to_string(), x)];
    named.extend(names.into_iter().zip(params_mut(&mut m).into_iter().map(|t| t.clone())));
    gradcheck(&label, &f, &named, tol)
}

pub fn check_local_attention(seed: u64, bn: Option<BnMode>, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let (groups, cin) = (2, 4);
    let mut la = LocalAttention::init(cin, 2, groups, 3, bn, &mut rng)?;
    // Default init leaves the logits nearly flat and their weight gradients
    // close to the rounding floor of the difference quotient.
    la.omega.weight = Tensor::from_fn(la.omega.weight.shape().to_vec(), |_| 0.5 * rng.normal());
    la.nu.weight = Tensor::from_fn(la.nu.weight.shape().to_vec(), |_| 0.5 * rng.normal());
    if let Some(b) = &mut la.u_bn {
        b.gamma = Tensor::from_fn(vec![4], |_| 1.0 + 0.5 * rng.normal());
        b.beta = normal(&[4], &mut rng);
        b.running_mean = normal(&[4], &mut rng);
        b.running_var = Tensor::from_fn(vec![4], |_| 0.5 + rng.uniform());
    }
    let n = if bn == Some(BnMode::Training) { 2 } else { 1 };
    let x = normal(&[n, cin, 5, 5], &mut rng);
    let w = probe(&[n, la.out_channels(), 5, 5], &mut rng);
    let names = la.params().into_iter().map(|(n, _)| n).collect();
    let w2 = w.clone();
    module_check(
        format!("local attention (bn {bn:?}, seed {seed})"),
        &la,
        x,
        names,
        LocalAttention::params_mut,
        move |m, x| m.forward(x, true)?.0.dot(&w),
        move |m, x| {
            let (_, cache) = m.forward(x, true)?;
            m.backward(&w2, &cache)
        },
        tol,
    )
}

/// Mode attention variants exercised by the suite.
pub fn mode_variants() -> Vec<(&'static str, ModeAttnConfig)> {
    let base = ModeAttnConfig::new(2);
    vec![
        ("interaction, sigmoid", base),
        ("no interaction, sigmoid", ModeAttnConfig { interaction: false, ..base }),
        ("interaction, softmax", ModeAttnConfig { gating: Gating::Softmax, ..base }),
        (
            "no interaction, softmax",
            ModeAttnConfig {
                gating: Gating::Softmax,
                interaction: false,
                ..base
            },
        ),
        ("strict substitution", ModeAttnConfig { strict_substitution: true, ..base }),
        ("scaled, three modes", ModeAttnConfig { scaled: true, groups: 3, ..base }),
        ("mean pooling", ModeAttnConfig { pooling: Pooling::Mean, ..base }),
    ]
}

/// Objective `sum(w * out) + lambda * L_d(masks)`, optionally with a
/// separate mask input.
pub fn check_mode_attention(seed: u64, name: &str, cfg: ModeAttnConfig, lambda_d: f64, separate_src: bool, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let cm = 3;
    let c = cfg.groups * cm;
    let src_c = if separate_src { 2 * cfg.groups } else { c };
    let (mode, s, src) = draw_smooth(
        &mut rng,
        |rng| {
            let mode = ModeAttention::init(src_c, cfg, rng)?;
            let s = Tensor::from_fn(vec![1, c, 4, 4], |_| 0.7 * rng.normal());
            let src = separate_src.then(|| normal(&[1, src_c, 4, 4], rng));
            Ok((mode, s, src))
        },
        |(mode, s, src)| match lambda_d > 0.0 {
            true => Ok(tie_gap(&mode.forward(s, src.as_ref())?.1.masks)),
            false => Ok(f64::INFINITY),
        },
    )?;
    let w = probe(s.shape(), &mut rng);
    let names = mode.params().into_iter().map(|(n, _)| n).collect();
    let label = format!("mode attention ({name}, lambda_d {lambda_d}, seed {seed})");

    if let Some(src) = src {
        // Check the mask input gradient by treating `s` as fixed.
        let s2 = s.clone();
        let w2 = w.clone();
        return module_check(
            label + " wrt mask input",
            &mode,
            src,
            names,
            ModeAttention::params_mut,
            move |m, src| {
                let (out, st) = m.forward(&s, Some(src))?;
                Ok(out.dot(&w)? + lambda_d * diversity_loss(&st.masks)?.0)
            },
            move |m, src| {
                let (_, st) = m.forward(&s2, Some(src))?;
                let gm = diversity_loss(&st.masks)?.1.scale(lambda_d);
                let (_, g_src, grads) = m.backward(&w2, Some(&gm), &st)?;
                Ok((g_src.expect("separate mask input"), grads))
            },
            tol,
        );
    }
    let w2 = w.clone();
    module_check(
        label,
        &mode,
        s,
        names,
        ModeAttention::params_mut,
        move |m, s| {
            let (out, st) = m.forward(s, None)?;
            Ok(out.dot(&w)? + lambda_d * diversity_loss(&st.masks)?.0)
        },
        move |m, s| {
            let (_, st) = m.forward(s, None)?;
            let gm = diversity_loss(&st.masks)?.1.scale(lambda_d);
            let (gs, _, grads) = m.backward(&w2, Some(&gm), &st)?;
            Ok((gs, grads))
        },
        tol,
    )
}

/// Block variants exercised by the suite.
pub fn block_variants() -> Vec<(&'static str, BlockConfig)> {
    let base = BlockConfig::new(8, 4, 8, 2);
    vec![
        ("full, bn training", base),
        ("full, bn off", BlockConfig { bn: BnSetting::Off, ..base }),
        ("full, bn frozen", BlockConfig { bn: BnSetting::Frozen, ..base }),
        ("no interaction", BlockConfig { interaction: false, ..base }),
        ("softmax gating", BlockConfig { gating: Gating::Softmax, ..base }),
        // With training-mode BN after the final conv, the shift of u's BN is
        // cancelled exactly and its gradient is zero; freeze BN here.
        (
            "local only, bn frozen",
            BlockConfig {
                mode_attention: false,
                bn: BnSetting::Frozen,
                ..base
            },
        ),
        (
            "conv3x3 + mode",
            BlockConfig {
                spatial: SpatialVariant::Conv3x3,
                ..base
            },
        ),
        (
            "group conv3x3 + mode",
            BlockConfig {
                spatial: SpatialVariant::GroupConv3x3,
                ..base
            },
        ),
        ("plain bottleneck, stride 2", BlockConfig::bottleneck(8, 4, 12, 2)),
        (
            "block-input masks, projection",
            BlockConfig {
                mask_source: MaskSource::BlockInput,
                out_channels: 6,
                ..base
            },
        ),
        ("no final conv", BlockConfig { final_conv: false, ..base }),
    ]
}

pub fn check_block(seed: u64, name: &str, cfg: BlockConfig, lambda_d: f64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let n = if cfg.bn == BnSetting::Training { 2 } else { 1 };
    let (block, x) = draw_smooth(
        &mut rng,
        |rng| {
            let mut block = StraBlock::init(cfg, rng)?;
            randomize_bn(&mut block, rng);
            Ok((block, normal(&[n, cfg.in_channels, 6, 6], rng)))
        },
        |(block, x)| {
            let cache = block.forward(x, true)?.1;
            let gap = match (lambda_d > 0.0, &cache.mode_state) {
                (true, Some(st)) => tie_gap(&st.masks),
                _ => f64::INFINITY,
            };
            Ok(gap.min(cache.relu_margin()))
        },
    )?;
    let (oh, ow) = cfg.output_hw(6, 6);
    let w = probe(&[n, cfg.out_channels, oh, ow], &mut rng);
    let names = block.params().into_iter().map(|(n, _)| n).collect();
    let w2 = w.clone();
    let ld = move |st: Option<&crate::mode_attention::ModeState>| -> Result<(f64, Option<Tensor>)> {
        match st {
            Some(st) if lambda_d > 0.0 => {
                let (l, g) = diversity_loss(&st.masks)?;
                Ok((lambda_d * l, Some(g.scale(lambda_d))))
            }
            _ => Ok((0.0, None)),
        }
    };
    module_check(
        format!("block ({name}, seed {seed})"),
        &block,
        x,
        names,
        StraBlock::params_mut,
        move |m, x| {
            let (out, cache) = m.forward(x, true)?;
            Ok(out.dot(&w)? + ld(cache.mode_state.as_ref())?.0)
        },
        move |m, x| {
            let (_, cache) = m.forward(x, true)?;
            let gm = ld(cache.mode_state.as_ref())?.1;
            m.backward(&w2, gm.as_ref(), &cache)
        },
        tol,
    )
}

/// Non-trivial affine parameters and running statistics, so frozen BN is
/// not the identity.
fn randomize_bn(block: &mut StraBlock, rng: &mut Rng) {
    let names: Vec<String> = block.params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(block.params_mut()) {
        if name.ends_with(".gamma") {
            *p = Tensor::from_fn(p.shape().to_vec(), |_| 1.0 + 0.3 * rng.normal());
        } else if name.ends_with(".beta") {
            *p = Tensor::from_fn(p.shape().to_vec(), |_| 0.3 * rng.normal());
        }
    }
    let buf_names: Vec<String> = block.buffers().into_iter().map(|(n, _)| n).collect();
    for (name, b) in buf_names.iter().zip(block.buffers_mut()) {
        if name.ends_with("running_mean") {
            *b = Tensor::from_fn(b.shape().to_vec(), |_| 0.3 * rng.normal());
        } else {
            *b = Tensor::from_fn(b.shape().to_vec(), |_| 0.5 + rng.uniform());
        }
    }
}

pub fn check_diversity_loss(seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let mut m = Tensor::from_fn(vec![2, 3, 4, 4], |_| (1.5 * rng.normal()).exp());
    for s in m.data_mut().chunks_mut(16) {
        let z: f64 = s.iter().sum();
        s.iter_mut().for_each(|v| *v /= z);
    }
    let f = FnPair {
        value: |x: &[Tensor]| Ok(diversity_loss(&x[0])?.0),
        gradient: |x: &[Tensor]| Ok(vec![diversity_loss(&x[0])?.1]),
    };
    gradcheck(&format!("diversity loss (seed {seed})"), &f, &[("masks".into(), m)], tol)
}

pub fn check_cross_entropy(seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let logits = Tensor::from_fn(vec![4, 5], |_| 2.0 * rng.normal());
    let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let l2 = labels.clone();
    let f = FnPair {
        value: move |x: &[Tensor]| Ok(cross_entropy(&x[0], &labels)?.0),
        gradient: move |x: &[Tensor]| Ok(vec![cross_entropy(&x[0], &l2)?.1]),
    };
    gradcheck(&format!("cross entropy (seed {seed})"), &f, &[("logits".into(), logits)], tol)
}

pub fn check_batch_norm(seed: u64, mode: BnMode, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let mut bn = BatchNorm::new(3).with_mode(mode);
    bn.gamma = Tensor::from_fn(vec![3], |_| 1.0 + 0.5 * rng.normal());
    bn.beta = normal(&[3], &mut rng);
    bn.running_mean = normal(&[3], &mut rng);
    bn.running_var = Tensor::from_fn(vec![3], |_| 0.5 + rng.uniform());
    let x = Tensor::from_fn(vec![2, 3, 3, 3], |_| 2.0 * rng.normal() + 1.0);
    let w = probe(x.shape(), &mut rng);
    let w2 = w.clone();
    let names = bn.params().into_iter().map(|(n, _)| n.to_string()).collect();
    module_check(
        format!("batch norm ({mode:?}, seed {seed})"),
        &bn,
        x,
        names,
        BatchNorm::params_mut,
        move |m, x| m.forward_pure(x, true)?.0.dot(&w),
        move |m, x| {
            let (_, cache, _) = m.forward_pure(x, true)?;
            let mut g = Vec::new();
            let gx = m.backward(&cache, &w2, &mut g)?;
            Ok((gx, g))
        },
        tol,
    )
}

pub fn check_conv(seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let spec = ConvSpec::square(3, 1 + (seed as usize % 2), 2);
    let mut conv = Conv2d::init(4, 6, spec, true, &mut rng)?;
    conv.bias = Some(normal(&[6], &mut rng));
    let x = normal(&[2, 4, 5, 5], &mut rng);
    let w = probe(conv.forward(&x)?.shape(), &mut rng);
    let w2 = w.clone();
    let names = conv.params().into_iter().map(|(n, _)| n.to_string()).collect();
    module_check(
        format!("grouped conv (seed {seed})"),
        &conv,
        x,
        names,
        Conv2d::params_mut,
        move |m, x| m.forward(x)?.dot(&w),
        move |m, x| {
            let mut g = Vec::new();
            let gx = m.backward(x, &w2, &mut g)?;
            Ok((gx, g))
        },
        tol,
    )
}

pub fn check_linear(seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let lin = Linear::init(6, 4, &mut rng)?;
    let x = normal(&[3, 6], &mut rng);
    let w = probe(&[3, 4], &mut rng);
    let w2 = w.clone();
    let names = lin.params().into_iter().map(|(n, _)| n.to_string()).collect();
    module_check(
        format!("linear (seed {seed})"),
        &lin,
        x,
        names,
        Linear::params_mut,
        move |m, x| m.forward(x)?.dot(&w),
        move |m, x| {
            let mut g = Vec::new();
            let gx = m.backward(x, &w2, &mut g)?;
            Ok((gx, g))
        },
        tol,
    )
}

/// Small classifier with one attention block; objective is the training loss.
pub fn check_network(seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let arch = ArchConfig {
        input: (3, 8, 8),
        stages: vec![
            StageSpec::Conv {
                out: 8,
                kernel: 3,
                stride: 2,
                bn: BnSetting::Training,
            },
            StageSpec::Block {
                cfg: BlockConfig::new(8, 2, 8, 4),
                repeat: 1,
            },
        ],
        pool: HeadPool::Flatten,
        classes: 3,
    };
    let (model, x) = draw_smooth(
        &mut rng,
        |rng| Ok((build_network(&arch, rng)?, normal(&[2, 3, 8, 8], rng))),
        |(model, x)| {
            let cache = model.forward(x, true)?;
            let gaps = cache.mode_states().into_iter().map(|st| tie_gap(&st.masks));
            Ok(gaps.fold(cache.relu_margin(), f64::min))
        },
    )?;
    let labels = vec![rng.below(3), rng.below(3)];
    let l2 = labels.clone();
    let names = model.params().into_iter().map(|(n, _)| n).collect();
    let objective = move |m: &Model, x: &Tensor| -> Result<f64> {
        let cache = m.forward(x, true)?;
        let mut loss = cross_entropy(&cache.logits, &labels)?.0;
        for st in cache.mode_states() {
            loss += diversity_loss(&st.masks)?.0;
        }
        Ok(loss)
    };
    module_check(
        format!("network (seed {seed})"),
        &model,
        x,
        names,
        Model::params_mut,
        objective,
        move |m, x| {
            let cache = m.forward(x, true)?;
            let (_, g_logits) = cross_entropy(&cache.logits, &l2)?;
            let gm = cache
                .mode_states()
                .iter()
                .map(|st| Ok(Some(diversity_loss(&st.masks)?.1)))
                .collect::<Result<Vec<_>>>()?;
            let (grads, gx) = m.backward(&cache, &g_logits, &gm)?;
            Ok((gx, grads))
        },
        tol,
    )
}

/// Every check for `module` on `instances` seeds starting at `seed`.
pub fn gradient_suite(module: SuiteModule, instances: usize, seed: u64, tol: f64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for i in 0..instances as u64 {
        let s = seed.wrapping_add(i);
        match module {
            SuiteModule::Local => {
                for bn in [None, Some(BnMode::Training), Some(BnMode::Frozen)] {
                    out.push(check_local_attention(s, bn, tol)?);
                }
            }
            SuiteModule::Mode => {
                for (name, cfg) in mode_variants() {
                    out.push(check_mode_attention(s, name, cfg, 0.0, false, tol)?);
                }
                let base = ModeAttnConfig::new(2);
                out.push(check_mode_attention(s, "with diversity loss", base, 1.0, false, tol)?);
                out.push(check_mode_attention(s, "separate mask input", base, 1.0, true, tol)?);
            }
            SuiteModule::Block => {
                for (name, cfg) in block_variants() {
                    out.push(check_block(s, name, cfg, 1.0, tol)?);
                }
            }
            SuiteModule::Losses => {
                out.push(check_diversity_loss(s, tol)?);
                out.push(check_cross_entropy(s, tol)?);
            }
            SuiteModule::Primitives => {
                out.push(check_batch_norm(s, BnMode::Training, tol)?);
                out.push(check_batch_norm(s, BnMode::Frozen, tol)?);
                out.push(check_conv(s, tol)?);
                out.push(check_linear(s, tol)?);
            }
            SuiteModule::Network => out.push(check_network(s, tol)?),
        }
    }
    Ok(out)
}

/// Fast kernels against the brute-force references.
pub fn oracle_suite(trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();

    reports.push(oracle_compare(
        "grouped conv",
        |(x, w, b, spec): &(Tensor, Tensor, Option<Tensor>, ConvSpec)| conv2d_grouped(x, w, b.as_ref(), spec),
        |(x, w, b, spec)| oracle::naive_conv2d(x, w, b.as_ref(), spec),
        |rng| {
            let groups = [1, 2, 4][rng.below(3)];
            let k = [1, 3, 5][rng.below(3)];
            let stride = 1 + rng.below(2);
            let spec = ConvSpec {
                groups,
                kernel: (k, k),
                stride: (stride, stride),
                padding: (rng.below(k / 2 + 1), rng.below(k / 2 + 1)),
            };
            let (cin, cout) = (4 * (1 + rng.below(2)), 4 * (1 + rng.below(2)));
            let (h, w) = (k + rng.below(5), k + rng.below(5));
            let x = normal(&[1 + rng.below(2), cin, h, w], rng);
            let wt = normal(&[cout, cin / groups, k, k], rng);
            let b = (rng.below(2) == 0).then(|| normal(&[cout], rng));
            (x, wt, b, spec)
        },
        trials,
        seed,
    )?);

    let local_instance = |rng: &mut Rng| {
        let groups = 1 + rng.below(2);
        let k = [1, 3, 5][rng.below(3)];
        let bn = [None, Some(BnMode::Training), Some(BnMode::Frozen)][rng.below(3)];
        let la = LocalAttention::init(2 * groups, 1 + rng.below(3), groups, k, bn, rng).expect("valid config");
        let x = normal(&[2, 2 * groups, 2 + rng.below(5), 2 + rng.below(5)], rng);
        (la, x)
    };
    reports.push(oracle_compare(
        "local logits",
        |(la, x): &(LocalAttention, Tensor)| Ok(la.local_logits(x)?.logits),
        |(la, x)| Ok(oracle::naive_local_logits(x, la)?.0),
        local_instance,
        trials,
        seed + 1,
    )?);
    reports.push(oracle_compare(
        "local attention",
        |(la, x): &(LocalAttention, Tensor)| Ok(la.forward(x, true)?.0),
        |(la, x)| oracle::naive_local_attention(x, la, true),
        local_instance,
        trials,
        seed + 2,
    )?);

    let mode_instance = |rng: &mut Rng| {
        let groups = 1 + rng.below(4);
        let cm = 1 + rng.below(3);
        let mut cfg = ModeAttnConfig::new(groups);
        cfg.gating = if rng.below(2) == 0 { Gating::Sigmoid } else { Gating::Softmax };
        cfg.interaction = rng.below(3) != 0;
        cfg.strict_substitution = rng.below(4) == 0;
        cfg.scaled = rng.below(2) == 0;
        cfg.pooling = if rng.below(4) == 0 { Pooling::Mean } else { Pooling::Masked };
        let m = ModeAttention::init(groups * cm, cfg, rng).expect("valid config");
        let s = normal(&[1 + rng.below(2), groups * cm, 2 + rng.below(4), 2 + rng.below(4)], rng);
        (m, s)
    };
    reports.push(oracle_compare(
        "spatial masks",
        |(m, s): &(ModeAttention, Tensor)| Ok(crate::mode_attention::spatial_masks(s, &m.mask_conv)?.masks),
        |(m, s)| oracle::naive_spatial_masks(s, m),
        mode_instance,
        trials,
        seed + 3,
    )?);
    reports.push(oracle_compare(
        "modal vectors",
        |(m, s): &(ModeAttention, Tensor)| Ok(m.forward(s, None)?.1.z),
        |(m, s)| oracle::naive_modal_vectors(s, &oracle::naive_spatial_masks(s, m)?, m.cfg.pooling),
        mode_instance,
        trials,
        seed + 4,
    )?);
    reports.push(oracle_compare(
        "mode interaction",
        |z: &Tensor| Ok(crate::mode_attention::mode_interaction(z, 1.0)?.0),
        |z| oracle::naive_mode_interaction(z, 1.0),
        |rng| normal(&[1 + rng.below(2), 1 + rng.below(5), 1 + rng.below(6)], rng),
        trials,
        seed + 5,
    )?);
    reports.push(oracle_compare(
        "mode attention",
        |(m, s): &(ModeAttention, Tensor)| Ok(m.forward(s, None)?.0),
        |(m, s)| oracle::naive_mode_attention(s, m, None),
        mode_instance,
        trials,
        seed + 6,
    )?);
    reports.push(oracle_compare(
        "non-local block",
        |(b, x): &(NonLocalBlock, Tensor)| b.forward(x),
        |(b, x)| oracle::naive_nonlocal(x, b),
        |rng| {
            let c = 1 + rng.below(4);
            let b = NonLocalBlock::init(c, 1 + rng.below(3), rng).expect("valid config");
            let x = normal(&[1 + rng.below(2), c, 1 + rng.below(5), 1 + rng.below(5)], rng);
            (b, x)
        },
        trials,
        seed + 7,
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_mode_backward_fails_gradcheck() {
        // Dropping the coefficient path: treat r as a constant.
        let mut rng = Rng::new(3);
        let mode = ModeAttention::init(6, ModeAttnConfig::new(2), &mut rng).unwrap();
        let s = normal(&[1, 6, 3, 3], &mut rng);
        let w = probe(s.shape(), &mut rng);
        let w2 = w.clone();
        let f = FnPair {
            value: move |x: &[Tensor]| mode.forward(&x[0], None)?.0.dot(&w),
            gradient: move |_: &[Tensor]| Ok(vec![w2.clone()]),
        };
        let r = gradcheck("corrupted", &f, &[("s".into(), s)], 1e-4).unwrap();
        assert!(!r.passed);
    }
}

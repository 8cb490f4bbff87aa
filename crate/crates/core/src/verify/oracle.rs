//! Brute-force reference implementations and the fast/naive comparator.
//!
//! The references are written for obviousness: one loop per index, no
//! reuse of the fast kernels beyond parameter storage.

use std::fmt;

use crate::error::Result;
use crate::local_attention::{slot_offset, LocalAttention};
use crate::mode_attention::{Gating, ModeAttention, Pooling};
use crate::nonlocal::NonLocalBlock;
use crate::ops::{BatchNorm, BnMode, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor of the elementwise relative error. Outputs of order
/// one that cancel to near zero would otherwise turn rounding noise into a
/// large relative error.
pub const REL_FLOOR: f64 = 1e-3;

pub const ORACLE_THRESHOLD: f64 = 1e-10;

pub fn naive_conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4()?;
    let cout = weight.shape()[0];
    let cig = cin / spec.groups;
    let cog = cout / spec.groups;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.output_hw(h, w)?;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for ic in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xin = input.data()[((b * cin + g * cig + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data()[((oc * cig + ic) * kh + ky) * kw + kx];
                                acc += xin * wv;
                            }
                        }
                    }
                    out.data_mut()[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn at(t: &Tensor, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Per-channel normalization computed from scratch.
pub fn naive_batch_norm(x: &Tensor, bn: &BatchNorm, train: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = if train && bn.mode == BnMode::Training {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..h).flat_map(move |y| (0..w).map(move |xx| (b, y, xx))))
                .map(|(b, y, xx)| at(x, b, ch, y, xx))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (bn.running_mean.data()[ch], bn.running_var.data()[ch])
        };
        let scale = bn.gamma.data()[ch] / (var + bn.eps).sqrt();
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((b * c + ch) * h + y) * w + xx;
                    out.data_mut()[i] = (x.data()[i] - mean) * scale + bn.beta.data()[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Logits `(batch, G, K*K, H, W)` by walking each neighbor; out-of-bounds
/// slots are 0 and reported invalid.
pub fn naive_local_logits(x: &Tensor, la: &LocalAttention) -> Result<(Tensor, Vec<bool>)> {
    let (n, _, h, w) = x.dims4()?;
    let om = naive_conv2d(x, &la.omega.weight, la.omega.bias.as_ref(), &la.omega.spec)?;
    let nu = naive_conv2d(x, &la.nu.weight, la.nu.bias.as_ref(), &la.nu.spec)?;
    let (g_count, k) = (la.groups, la.kernel);
    let kk = k * k;
    let mut logits = Tensor::zeros(vec![n, g_count, kk, h, w]);
    let mut valid = vec![false; kk * h * w];
    for b in 0..n {
        for g in 0..g_count {
            for y in 0..h {
                for xx in 0..w {
                    for j in 0..kk {
                        let (dy, dx) = slot_offset(j, k);
                        let (ny, nx) = (y as isize + dy, xx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        valid[(j * h + y) * w + xx] = true;
                        let v = at(&om, b, g * kk + j, y, xx) + at(&nu, b, g, ny as usize, nx as usize);
                        logits.data_mut()[(((b * g_count + g) * kk + j) * h + y) * w + xx] = v;
                    }
                }
            }
        }
    }
    Ok((logits, valid))
}

pub fn naive_local_attention(x: &Tensor, la: &LocalAttention, train: bool) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (logits, valid) = naive_local_logits(x, la)?;
    let mut u = naive_conv2d(x, &la.u.weight, la.u.bias.as_ref(), &la.u.spec)?;
    if let Some(bn) = &la.u_bn {
        u = naive_batch_norm(&u, bn, train)?;
    }
    let (g_count, k) = (la.groups, la.kernel);
    let kk = k * k;
    let co = la.out_channels() / g_count;
    let mut out = Tensor::zeros(vec![n, g_count * co, h, w]);
    for b in 0..n {
        for g in 0..g_count {
            for y in 0..h {
                for xx in 0..w {
                    let slots: Vec<usize> = (0..kk).filter(|&j| valid[(j * h + y) * w + xx]).collect();
                    let l = |j: usize| logits.data()[(((b * g_count + g) * kk + j) * h + y) * w + xx];
                    let m = slots.iter().map(|&j| l(j)).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = slots.iter().map(|&j| (l(j) - m).exp()).sum();
                    for c in 0..co {
                        let mut acc = 0.0;
                        for &j in &slots {
                            let (dy, dx) = slot_offset(j, k);
                            let a = (l(j) - m).exp() / z;
                            acc += a * at(&u, b, g * co + c, (y as isize + dy) as usize, (xx as isize + dx) as usize);
                        }
                        out.data_mut()[((b * g_count * co + g * co + c) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn naive_spatial_masks(src: &Tensor, mode: &ModeAttention) -> Result<Tensor> {
    let conv = &mode.mask_conv;
    let logits = naive_conv2d(src, &conv.weight, conv.bias.as_ref(), &conv.spec)?;
    let (n, g, h, w) = logits.dims4()?;
    let mut out = logits.clone();
    for b in 0..n {
        for gi in 0..g {
            let mut m = f64::NEG_INFINITY;
            for y in 0..h {
                for x in 0..w {
                    m = m.max(at(&logits, b, gi, y, x));
                }
            }
            let mut z = 0.0;
            for y in 0..h {
                for x in 0..w {
                    z += (at(&logits, b, gi, y, x) - m).exp();
                }
            }
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[((b * g + gi) * h + y) * w + x] = (at(&logits, b, gi, y, x) - m).exp() / z;
                }
            }
        }
    }
    Ok(out)
}

pub fn naive_modal_vectors(s: &Tensor, masks: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let (n, c, h, w) = s.dims4()?;
    let g = masks.shape()[1];
    let cm = c / g;
    let mut z = Tensor::zeros(vec![n, g, cm]);
    for b in 0..n {
        for gi in 0..g {
            for ci in 0..cm {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let weight = match pooling {
                            Pooling::Masked => at(masks, b, gi, y, x),
                            Pooling::Mean => 1.0 / (h * w) as f64,
                        };
                        acc += weight * at(s, b, gi * cm + ci, y, x);
                    }
                }
                z.data_mut()[(b * g + gi) * cm + ci] = acc;
            }
        }
    }
    Ok(z)
}

pub fn naive_mode_interaction(z: &Tensor, scale: f64) -> Result<Tensor> {
    let (n, g, cm) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let zv = |b: usize, gi: usize, c: usize| z.data()[(b * g + gi) * cm + c];
    let mut out = Tensor::zeros(z.shape().to_vec());
    for b in 0..n {
        for gi in 0..g {
            let e: Vec<f64> = (0..g)
                .map(|gj| scale * (0..cm).map(|c| zv(b, gi, c) * zv(b, gj, c)).sum::<f64>())
                .collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = e.iter().map(|v| (v - m).exp()).sum();
            for c in 0..cm {
                let mut acc = 0.0;
                for gj in 0..g {
                    acc += (e[gj] - m).exp() / denom * zv(b, gj, c);
                }
                out.data_mut()[(b * g + gi) * cm + c] = acc;
            }
        }
    }
    Ok(out)
}

/// Mode attention output `S + Y` composed from the references above.
pub fn naive_mode_attention(s: &Tensor, mode: &ModeAttention, mask_input: Option<&Tensor>) -> Result<Tensor> {
    let cfg = &mode.cfg;
    let (n, c, h, w) = s.dims4()?;
    let g = cfg.groups;
    let cm = c / g;
    let scale = if cfg.scaled { 1.0 / (cm as f64).sqrt() } else { 1.0 };
    let masks = naive_spatial_masks(mask_input.unwrap_or(s), mode)?;
    let z = naive_modal_vectors(s, &masks, cfg.pooling)?;
    let zp = if cfg.interaction { naive_mode_interaction(&z, scale)? } else { z.clone() };
    let ctx = if cfg.interaction && cfg.strict_substitution { &z } else { &zp };
    let mut out = s.clone();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let q: Vec<f64> = (0..g)
                    .map(|gi| scale * (0..cm).map(|ci| at(s, b, gi * cm + ci, y, x) * zp.data()[(b * g + gi) * cm + ci]).sum::<f64>())
                    .collect();
                let r: Vec<f64> = match cfg.gating {
                    Gating::Sigmoid => q.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                    Gating::Softmax => {
                        let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = q.iter().map(|v| (v - m).exp()).sum();
                        q.iter().map(|v| (v - m).exp() / denom).collect()
                    }
                };
                for gi in 0..g {
                    for ci in 0..cm {
                        let idx = ((b * c + gi * cm + ci) * h + y) * w + x;
                        out.data_mut()[idx] += r[gi] * ctx.data()[(b * g + gi) * cm + ci];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pairwise `O((HW)^2)` evaluation of the non-local block.
pub fn naive_nonlocal(x: &Tensor, block: &NonLocalBlock) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let th = naive_conv2d(x, &block.theta.weight, block.theta.bias.as_ref(), &block.theta.spec)?;
    let ph = naive_conv2d(x, &block.phi.weight, block.phi.bias.as_ref(), &block.phi.spec)?;
    let u = naive_conv2d(x, &block.u.weight, block.u.bias.as_ref(), &block.u.spec)?;
    let e = th.shape()[1];
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for i in 0..hw {
            let f: Vec<f64> = (0..hw)
                .map(|j| (0..e).map(|k| at(&th, b, k, i / w, i % w) * at(&ph, b, k, j / w, j % w)).sum())
                .collect();
            let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = f.iter().map(|v| (v - m).exp()).sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..hw {
                    acc += (f[j] - m).exp() / denom * at(&u, b, ch, j / w, j % w);
                }
                out.data_mut()[((b * c + ch) * h + i / w) * w + i % w] += acc;
            }
        }
    }
    Ok(out)
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> Option<f64> {
    (a.shape() == b.shape()).then(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
            .fold(0.0, f64::max)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub label: String,
    pub trials: usize,
    pub max_rel: f64,
    pub worst_trial: usize,
    /// Trial with mismatching output shapes, if any.
    pub shape_mismatch: Option<usize>,
    pub threshold: f64,
    pub passed: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, max rel {:.3e} (threshold {:.0e}, worst trial {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.trials,
            self.max_rel,
            self.threshold,
            self.worst_trial
        )?;
        if let Some(t) = self.shape_mismatch {
            write!(f, ", shape mismatch in trial {t}")?;
        }
        Ok(())
    }
}

/// Run both implementations on `trials` instances drawn from `gen`.
pub fn oracle_compare<I>(
    label: &str,
    fast: impl Fn(&I) -> Result<Tensor>,
    naive: impl Fn(&I) -> Result<Tensor>,
    mut gen: impl FnMut(&mut Rng) -> I,
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let mut report = OracleReport {
        label: label.to_string(),
        trials,
        max_rel: 0.0,
        worst_trial: 0,
        shape_mismatch: None,
        threshold: ORACLE_THRESHOLD,
        passed: true,
    };
    for t in 0..trials {
        let inst = gen(&mut rng);
        let (a, b) = (fast(&inst)?, naive(&inst)?);
        match max_relative_error(&a, &b) {
            Some(e) => {
                if !(e <= report.max_rel) {
                    report.max_rel = e;
                    report.worst_trial = t;
                }
            }
            None => {
                report.shape_mismatch.get_or_insert(t);
                report.max_rel = f64::INFINITY;
            }
        }
    }
    report.passed = report.shape_mismatch.is_none() && report.max_rel <= report.threshold;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv2d_grouped;

    fn conv_instance(rng: &mut Rng) -> (Tensor, Tensor, Tensor, ConvSpec) {
        let spec = ConvSpec::square(3, 1 + rng.below(2), 2);
        let x = Tensor::from_fn(vec![2, 4, 5, 5], |_| rng.normal());
        let w = Tensor::from_fn(vec![6, 2, 3, 3], |_| rng.normal());
        let b = Tensor::from_fn(vec![6], |_| rng.normal());
        (x, w, b, spec)
    }

    #[test]
    fn identical_handles_have_zero_error() {
        let f = |i: &(Tensor, Tensor, Tensor, ConvSpec)| conv2d_grouped(&i.0, &i.1, Some(&i.2), &i.3);
        let r = oracle_compare("conv", f, f, conv_instance, 5, 1).unwrap();
        assert_eq!(r.max_rel, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn dropped_kernel_tap_is_detected() {
        let broken = |i: &(Tensor, Tensor, Tensor, ConvSpec)| {
            let mut w = i.1.clone();
            w.data_mut()[8] = 0.0;
            naive_conv2d(&i.0, &w, Some(&i.2), &i.3)
        };
        let fast = |i: &(Tensor, Tensor, Tensor, ConvSpec)| conv2d_grouped(&i.0, &i.1, Some(&i.2), &i.3);
        let r = oracle_compare("conv", fast, broken, conv_instance, 3, 2).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn shape_disagreement_fails() {
        let a = |_: &()| Ok(Tensor::zeros(vec![2, 2]));
        let b = |_: &()| Ok(Tensor::zeros(vec![4]));
        let r = oracle_compare("shape", a, b, |_| (), 2, 0).unwrap();
        assert!(!r.passed);
        assert_eq!(r.shape_mismatch, Some(0));
    }
}

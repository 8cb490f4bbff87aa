//! Mode attention: structural factorization of a grouped feature map.
//!
//! Per batch element and mode `g` (channel slice `g*C_m .. (g+1)*C_m`):
//!
//! 1. a grouped 1×1 convolution followed by a softmax over all positions
//!    gives the spatial mask `M^g`;
//! 2. the modal vector is the mask-weighted sum `z_g = sum_i M^g_i s^g_i`
//!    (or the plain spatial mean);
//! 3. optional interaction mixes modal vectors,
//!    `z'_g = sum_j softmax_j(<z_g, z_j>) z_j`;
//! 4. coefficients `r_ig = sigmoid(<s^g_i, z_g>)`, or a softmax over modes;
//! 5. the context `y^g_i = r_ig z_g` is added to the input: `out = S + Y`.
//!
//! When interaction is on, the mixed vectors replace the originals in both
//! the coefficients and the context, unless `strict_substitution` restricts
//! the replacement to the coefficients.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Result};
use crate::ops::{sigmoid_scalar, softmax, softmax_backward, Conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    Sigmoid,
    /// Softmax across modes at every pixel.
    Softmax,
}

impl FromStr for Gating {
    type Err = crate::StraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Gating::Sigmoid),
            "softmax" => Ok(Gating::Softmax),
            other => Err(invalid("attention_coefficients", format!("unknown gating `{other}`"))),
        }
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gating::Sigmoid => "sigmoid",
            Gating::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Mask-weighted sum over positions.
    Masked,
    /// Uniform spatial mean.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeAttnConfig {
    pub groups: usize,
    pub gating: Gating,
    pub interaction: bool,
    pub strict_substitution: bool,
    /// Divide inner products by `sqrt(C_m)`.
    pub scaled: bool,
    pub pooling: Pooling,
}

impl ModeAttnConfig {
    pub fn new(groups: usize) -> Self {
        Self {
            groups,
            gating: Gating::Sigmoid,
            interaction: true,
            strict_substitution: false,
            scaled: false,
            pooling: Pooling::Masked,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeAttention {
    /// Grouped 1×1 convolution `mask_channels -> G` producing mask logits.
    pub mask_conv: Conv2d,
    pub cfg: ModeAttnConfig,
}

/// Normalized spatial masks, `(batch, G, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMaps {
    pub masks: Tensor,
}

/// Everything the forward pass computed; used by backward and for export.
#[derive(Debug, Clone)]
pub struct ModeState {
    pub masks: Tensor,
    /// `(batch, G, C_m)` before interaction.
    pub z: Tensor,
    /// `(batch, G, C_m)` after interaction, when enabled.
    pub z_prime: Option<Tensor>,
    /// `(batch, G, G)` interaction weights, rows sum to one.
    pub mixing: Option<Tensor>,
    /// `(batch, G, H, W)`
    pub coefficients: Tensor,
    s: Tensor,
    mask_input: Option<Tensor>,
}

impl ModeState {
    /// Vectors used in the context term.
    pub fn context_vectors(&self, cfg: &ModeAttnConfig) -> &Tensor {
        match (&self.z_prime, cfg.strict_substitution) {
            (Some(zp), false) => zp,
            _ => &self.z,
        }
    }

    /// Vectors used for the coefficients.
    pub fn coefficient_vectors(&self) -> &Tensor {
        self.z_prime.as_ref().unwrap_or(&self.z)
    }
}

fn inner_scale(cfg: &ModeAttnConfig, width: usize) -> f64 {
    if cfg.scaled {
        1.0 / (width as f64).sqrt()
    } else {
        1.0
    }
}

/// Softmax over all positions of the grouped 1×1 mask logits.
pub fn spatial_masks(input: &Tensor, mask_conv: &Conv2d) -> Result<ModeMaps> {
    let logits = mask_conv.forward(input)?;
    let (n, g, h, w) = logits.dims4()?;
    let flat = logits.reshape(vec![n, g, h * w])?;
    let masks = softmax(&flat, 2, None)?.reshape(vec![n, g, h, w])?;
    Ok(ModeMaps { masks })
}

/// `z[b, g, c] = sum_i M[b, g, i] * S[b, g*C_m + c, i]`, or the spatial mean.
pub fn modal_vectors(s: &Tensor, masks: &Tensor, pooling: Pooling) -> Result<Tensor> {
    const OP: &str = "modal_vectors";
    let (n, c, h, w) = s.dims4()?;
    let (mn, g, mh, mw) = masks.dims4()?;
    if mn != n || mh != h || mw != w {
        return Err(invalid(OP, format!("mask shape {:?} incompatible with {:?}", masks.shape(), s.shape())));
    }
    if c % g != 0 {
        return Err(invalid(OP, format!("{g} modes do not divide {c} channels")));
    }
    let cm = c / g;
    let plane = h * w;
    let (sd, md) = (s.data(), masks.data());
    let inv = 1.0 / plane as f64;
    let mut z = vec![0.0; n * g * cm];
    for b in 0..n {
        for gi in 0..g {
            let m = &md[(b * g + gi) * plane..][..plane];
            for ci in 0..cm {
                let sp = &sd[(b * c + gi * cm + ci) * plane..][..plane];
                z[(b * g + gi) * cm + ci] = match pooling {
                    Pooling::Masked => m.iter().zip(sp).map(|(a, v)| a * v).sum(),
                    Pooling::Mean => sp.iter().sum::<f64>() * inv,
                };
            }
        }
    }
    Tensor::new(vec![n, g, cm], z)
}

/// Returns the mixed vectors and the `(batch, G, G)` mixing weights.
pub fn mode_interaction(z: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    if z.rank() != 3 {
        return Err(shape_err("mode_interaction", "rank", 3, z.rank()));
    }
    let (n, g, cm) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let zd = z.data();
    let mut e = vec![0.0; n * g * g];
    for b in 0..n {
        for gi in 0..g {
            let zg = &zd[(b * g + gi) * cm..][..cm];
            for gj in 0..g {
                let zj = &zd[(b * g + gj) * cm..][..cm];
                e[(b * g + gi) * g + gj] = scale * zg.iter().zip(zj).map(|(a, c)| a * c).sum::<f64>();
            }
        }
    }
    let mixing = softmax(&Tensor::new(vec![n, g, g], e)?, 2, None)?;
    let pd = mixing.data();
    let mut out = vec![0.0; zd.len()];
    for b in 0..n {
        for gi in 0..g {
            let dst = &mut out[(b * g + gi) * cm..][..cm];
            for gj in 0..g {
                let p = pd[(b * g + gi) * g + gj];
                for (o, v) in dst.iter_mut().zip(&zd[(b * g + gj) * cm..][..cm]) {
                    *o += p * v;
                }
            }
        }
    }
    Ok((Tensor::new(z.shape().to_vec(), out)?, mixing))
}

fn inner_products(s: &Tensor, z: &Tensor, scale: f64) -> Result<Tensor> {
    const OP: &str = "attention_coefficients";
    let (n, c, h, w) = s.dims4()?;
    if z.rank() != 3 || z.shape()[0] != n {
        return Err(invalid(OP, format!("modal vectors {:?} incompatible with {:?}", z.shape(), s.shape())));
    }
    let (g, cm) = (z.shape()[1], z.shape()[2]);
    if g * cm != c {
        return Err(shape_err(OP, "per-mode width", c / g.max(1), cm));
    }
    let plane = h * w;
    let (sd, zd) = (s.data(), z.data());
    let mut q = vec![0.0; n * g * plane];
    for b in 0..n {
        for gi in 0..g {
            let dst = &mut q[(b * g + gi) * plane..][..plane];
            for ci in 0..cm {
                let zv = scale * zd[(b * g + gi) * cm + ci];
                let sp = &sd[(b * c + gi * cm + ci) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(sp) {
                    *d += zv * v;
                }
            }
        }
    }
    Tensor::new(vec![n, g, h, w], q)
}

/// `r_ig = gate(<s^g_i, z_g>)`, shape `(batch, G, H, W)`.
pub fn attention_coefficients(s: &Tensor, z: &Tensor, gating: Gating, scale: f64) -> Result<Tensor> {
    let q = inner_products(s, z, scale)?;
    match gating {
        Gating::Sigmoid => Ok(q.map(sigmoid_scalar)),
        Gating::Softmax => softmax(&q, 1, None),
    }
}

impl ModeAttention {
    pub fn init(mask_channels: usize, cfg: ModeAttnConfig, rng: &mut Rng) -> Result<Self> {
        // No bias: the spatial softmax is invariant to a per-mode shift.
        let mask_conv = Conv2d::init(mask_channels, cfg.groups, ConvSpec::pointwise(cfg.groups), false, rng)?;
        Ok(Self { mask_conv, cfg })
    }

    /// `mask_input` defaults to `s` when absent.
    pub fn forward(&self, s: &Tensor, mask_input: Option<&Tensor>) -> Result<(Tensor, ModeState)> {
        const OP: &str = "mode_attention_forward";
        let (n, c, h, w) = s.dims4()?;
        let g = self.cfg.groups;
        if c % g != 0 {
            return Err(invalid(OP, format!("{g} modes do not divide {c} channels")));
        }
        if let Some(src) = mask_input {
            let (sn, _, sh, sw) = src.dims4()?;
            if (sn, sh, sw) != (n, h, w) {
                return Err(invalid(OP, "mask input must share batch and spatial extents with S"));
            }
        }
        let cm = c / g;
        let scale = inner_scale(&self.cfg, cm);
        let masks = spatial_masks(mask_input.unwrap_or(s), &self.mask_conv)?.masks;
        let z = modal_vectors(s, &masks, self.cfg.pooling)?;
        let (z_prime, mixing) = if self.cfg.interaction {
            let (zp, p) = mode_interaction(&z, scale)?;
            (Some(zp), Some(p))
        } else {
            (None, None)
        };
        let mut state = ModeState {
            masks,
            z,
            z_prime,
            mixing,
            coefficients: Tensor::scalar(0.0),
            s: s.clone(),
            mask_input: mask_input.cloned(),
        };
        state.coefficients = attention_coefficients(s, state.coefficient_vectors(), self.cfg.gating, scale)?;

        let ctx = state.context_vectors(&self.cfg).data();
        let r = state.coefficients.data();
        let plane = h * w;
        let mut out = s.data().to_vec();
        for b in 0..n {
            for gi in 0..g {
                let rp = &r[(b * g + gi) * plane..][..plane];
                for ci in 0..cm {
                    let zv = ctx[(b * g + gi) * cm + ci];
                    let dst = &mut out[(b * c + gi * cm + ci) * plane..][..plane];
                    for (d, rv) in dst.iter_mut().zip(rp) {
                        *d += rv * zv;
                    }
                }
            }
        }
        let out = Tensor::new(s.shape().to_vec(), out)?;
        out.check_finite(OP)?;
        Ok((out, state))
    }

    /// Backward through `out = S + Y`.
    ///
    /// `grad_masks` is an extra upstream gradient on the masks (from the
    /// diversity loss). Returns `d S`, `d mask_input` when a separate mask
    /// input was used, and the mask convolution gradients.
    pub fn backward(
        &self,
        grad_out: &Tensor,
        grad_masks: Option<&Tensor>,
        state: &ModeState,
    ) -> Result<(Tensor, Option<Tensor>, Vec<Tensor>)> {
        const OP: &str = "mode_attention_backward";
        state.s.same_shape(grad_out, OP)?;
        if let Some(gm) = grad_masks {
            state.masks.same_shape(gm, OP)?;
        }
        let (n, c, h, w) = state.s.dims4()?;
        let g = self.cfg.groups;
        let cm = c / g;
        let plane = h * w;
        let scale = inner_scale(&self.cfg, cm);
        let gy = grad_out.data();
        let sd = state.s.data();
        let r = state.coefficients.data();
        let ctx = state.context_vectors(&self.cfg).data();
        let coef_vecs = state.coefficient_vectors().data();

        // Skip path.
        let mut gs = gy.to_vec();

        // Y = r * ctx
        let mut gr = vec![0.0; n * g * plane];
        let mut g_ctx = vec![0.0; n * g * cm];
        for b in 0..n {
            for gi in 0..g {
                let rp = &r[(b * g + gi) * plane..][..plane];
                let grp = &mut gr[(b * g + gi) * plane..][..plane];
                for ci in 0..cm {
                    let zv = ctx[(b * g + gi) * cm + ci];
                    let gp = &gy[(b * c + gi * cm + ci) * plane..][..plane];
                    let mut acc = 0.0;
                    for i in 0..plane {
                        grp[i] += gp[i] * zv;
                        acc += gp[i] * rp[i];
                    }
                    g_ctx[(b * g + gi) * cm + ci] = acc;
                }
            }
        }

        // Gating.
        let gq: Vec<f64> = match self.cfg.gating {
            Gating::Sigmoid => gr.iter().zip(r).map(|(g, r)| g * r * (1.0 - r)).collect(),
            Gating::Softmax => {
                let grt = Tensor::new(vec![n, g, h, w], gr)?;
                softmax_backward(&state.coefficients, &grt, 1)?.into_data()
            }
        };

        // q = scale * <s, coef_vecs>
        let mut g_coef = vec![0.0; n * g * cm];
        for b in 0..n {
            for gi in 0..g {
                let gqp = &gq[(b * g + gi) * plane..][..plane];
                for ci in 0..cm {
                    let ch = (b * c + gi * cm + ci) * plane;
                    let zv = scale * coef_vecs[(b * g + gi) * cm + ci];
                    let sp = &sd[ch..][..plane];
                    let gsp = &mut gs[ch..][..plane];
                    let mut acc = 0.0;
                    for i in 0..plane {
                        gsp[i] += gqp[i] * zv;
                        acc += gqp[i] * sp[i];
                    }
                    g_coef[(b * g + gi) * cm + ci] = scale * acc;
                }
            }
        }

        // Route gradients to z / z'.
        let mut gz = vec![0.0; n * g * cm];
        if let Some(mix) = &state.mixing {
            let mut gzp = g_coef;
            if self.cfg.strict_substitution {
                for (a, b) in gz.iter_mut().zip(&g_ctx) {
                    *a += b;
                }
            } else {
                for (a, b) in gzp.iter_mut().zip(&g_ctx) {
                    *a += b;
                }
            }
            let zd = state.z.data();
            let pd = mix.data();
            let mut gp = vec![0.0; n * g * g];
            for b in 0..n {
                for gi in 0..g {
                    let gzg = &gzp[(b * g + gi) * cm..][..cm];
                    for gj in 0..g {
                        let p = pd[(b * g + gi) * g + gj];
                        let zj = &zd[(b * g + gj) * cm..][..cm];
                        gp[(b * g + gi) * g + gj] = gzg.iter().zip(zj).map(|(a, v)| a * v).sum();
                        for ci in 0..cm {
                            gz[(b * g + gj) * cm + ci] += p * gzg[ci];
                        }
                    }
                }
            }
            let ge = softmax_backward(mix, &Tensor::new(vec![n, g, g], gp)?, 2)?;
            let ged = ge.data();
            for b in 0..n {
                for gi in 0..g {
                    for gj in 0..g {
                        let e = scale * ged[(b * g + gi) * g + gj];
                        if e == 0.0 {
                            continue;
                        }
                        for ci in 0..cm {
                            gz[(b * g + gi) * cm + ci] += e * zd[(b * g + gj) * cm + ci];
                            gz[(b * g + gj) * cm + ci] += e * zd[(b * g + gi) * cm + ci];
                        }
                    }
                }
            }
        } else {
            for ((a, b), d) in gz.iter_mut().zip(&g_coef).zip(&g_ctx) {
                *a += b + d;
            }
        }

        // Modal vectors.
        let md = state.masks.data();
        let mut gm = match grad_masks {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n * g * plane],
        };
        let inv = 1.0 / plane as f64;
        for b in 0..n {
            for gi in 0..g {
                let mp = &md[(b * g + gi) * plane..][..plane];
                for ci in 0..cm {
                    let gzv = gz[(b * g + gi) * cm + ci];
                    let ch = (b * c + gi * cm + ci) * plane;
                    match self.cfg.pooling {
                        Pooling::Masked => {
                            let sp = &sd[ch..][..plane];
                            let gmp = &mut gm[(b * g + gi) * plane..][..plane];
                            for i in 0..plane {
                                gmp[i] += gzv * sp[i];
                            }
                            for (d, m) in gs[ch..][..plane].iter_mut().zip(mp) {
                                *d += gzv * m;
                            }
                        }
                        Pooling::Mean => {
                            for d in gs[ch..][..plane].iter_mut() {
                                *d += gzv * inv;
                            }
                        }
                    }
                }
            }
        }

        // Spatial softmax and mask convolution.
        let flat_m = state.masks.clone().reshape(vec![n, g, plane])?;
        let g_logits = softmax_backward(&flat_m, &Tensor::new(vec![n, g, plane], gm)?, 2)?.reshape(vec![n, g, h, w])?;
        let mut grads = Vec::new();
        let src = state.mask_input.as_ref().unwrap_or(&state.s);
        let g_src = self.mask_conv.backward(src, &g_logits, &mut grads)?;
        let mut gs = Tensor::new(state.s.shape().to_vec(), gs)?;
        let g_mask_input = match state.mask_input {
            Some(_) => Some(g_src),
            None => {
                gs.add_assign(&g_src)?;
                None
            }
        };
        Ok((gs, g_mask_input, grads))
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.mask_conv
            .params()
            .into_iter()
            .map(|(n, t)| (format!("mask_conv.{n}"), t))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mask_conv.params_mut()
    }
}

pub fn mode_attention_forward(s: &Tensor, params: &ModeAttention) -> Result<(Tensor, ModeState)> {
    params.forward(s, None)
}

pub fn mode_attention_backward(
    grad_out: &Tensor,
    state: &ModeState,
    params: &ModeAttention,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (gs, _, grads) = params.backward(grad_out, None, state)?;
    Ok((gs, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.normal())
    }

    fn module(groups: usize, cm: usize, rng: &mut Rng) -> ModeAttention {
        ModeAttention::init(groups * cm, ModeAttnConfig::new(groups), rng).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_masks() {
        let mut rng = Rng::new(1);
        let mut m = module(2, 3, &mut rng);
        m.mask_conv.weight = Tensor::zeros(m.mask_conv.weight.shape().to_vec());
        let maps = spatial_masks(&random(&[1, 6, 4, 4], &mut rng), &m.mask_conv).unwrap();
        assert!(maps.masks.data().iter().all(|&v| v == 1.0 / 16.0));
    }

    #[test]
    fn saturated_logit_gives_one_hot_mask() {
        let mut conv = Conv2d::init(1, 1, ConvSpec::pointwise(1), true, &mut Rng::new(0)).unwrap();
        conv.weight = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let mut x = Tensor::zeros(vec![1, 1, 4, 4]);
        x.data_mut()[5] = 50.0;
        let m = spatial_masks(&x, &conv).unwrap().masks;
        assert!((m.data()[5] - 1.0).abs() < 1e-12);
        assert!(m.data().iter().enumerate().all(|(i, v)| i == 5 || *v < 1e-12));
    }

    #[test]
    fn one_hot_mask_selects_pixel() {
        let mut rng = Rng::new(2);
        let s = random(&[1, 6, 4, 4], &mut rng);
        let mut m = Tensor::zeros(vec![1, 2, 4, 4]);
        m.data_mut()[3] = 1.0;
        m.data_mut()[16 + 9] = 1.0;
        let z = modal_vectors(&s, &m, Pooling::Masked).unwrap();
        for c in 0..3 {
            assert_eq!(z.data()[c], s.data()[c * 16 + 3]);
            assert_eq!(z.data()[3 + c], s.data()[(3 + c) * 16 + 9]);
        }
    }

    #[test]
    fn uniform_mask_equals_mean_pooling() {
        let mut rng = Rng::new(3);
        let s = random(&[2, 6, 4, 4], &mut rng);
        let m = Tensor::full(vec![2, 2, 4, 4], 1.0 / 16.0);
        let a = modal_vectors(&s, &m, Pooling::Masked).unwrap();
        let b = modal_vectors(&s, &m, Pooling::Mean).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn single_mode_interaction_is_identity() {
        let mut rng = Rng::new(4);
        let z = random(&[3, 1, 5], &mut rng);
        let (zp, p) = mode_interaction(&z, 1.0).unwrap();
        assert_eq!(zp, z);
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_vectors_are_a_fixpoint() {
        let z = Tensor::from_fn(vec![1, 3, 2], |i| [0.4, -1.1][i % 2]);
        let (zp, _) = mode_interaction(&z, 1.0).unwrap();
        for (a, b) in zp.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn orthonormal_pair_mixing_weights() {
        let z = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (zp, p) = mode_interaction(&z, 1.0).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        assert!((p.data()[0] - hi).abs() < 1e-15 && (p.data()[1] - lo).abs() < 1e-15);
        assert!((hi - 0.7311).abs() < 1e-4 && (lo - 0.2689).abs() < 1e-4);
        assert!((zp.data()[0] - hi).abs() < 1e-15 && (zp.data()[1] - lo).abs() < 1e-15);
    }

    #[test]
    fn gating_reference_values() {
        let s = Tensor::zeros(vec![1, 2, 2, 2]);
        let z = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        let r = attention_coefficients(&s, &z, Gating::Sigmoid, 1.0).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));
        let r = attention_coefficients(&random(&[1, 2, 2, 2], &mut Rng::new(5)), &z, Gating::Softmax, 1.0).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
        let a = (3f64.ln() / 2.0).sqrt();
        let s = Tensor::from_fn(vec![1, 2, 1, 1], |_| a);
        let z = Tensor::new(vec![1, 1, 2], vec![a, a]).unwrap();
        let r = attention_coefficients(&s, &z, Gating::Sigmoid, 1.0).unwrap();
        assert!((r.data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn unknown_gating_tag_is_rejected() {
        assert!("tanh".parse::<Gating>().is_err());
        assert_eq!("softmax".parse::<Gating>().unwrap(), Gating::Softmax);
    }

    #[test]
    fn zero_input_propagates_zero() {
        let mut rng = Rng::new(6);
        let mut m = module(2, 3, &mut rng);
        m.mask_conv.weight = Tensor::zeros(m.mask_conv.weight.shape().to_vec());
        let s = Tensor::zeros(vec![1, 6, 3, 3]);
        let (out, state) = m.forward(&s, None).unwrap();
        assert_eq!(out, s);
        assert!(state.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interaction_is_irrelevant_for_one_mode() {
        let mut rng = Rng::new(7);
        let mut m = module(1, 4, &mut rng);
        let s = random(&[2, 4, 3, 3], &mut rng);
        let (a, _) = m.forward(&s, None).unwrap();
        m.cfg.interaction = false;
        let (b, _) = m.forward(&s, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let m = module(2, 3, &mut rng);
        let s = random(&[1, 6, 4, 4], &mut rng);
        let (out, state) = m.forward(&s, None).unwrap();
        let (gs, _, grads) = m.backward(&Tensor::zeros(out.shape().to_vec()), None, &state).unwrap();
        assert_eq!(gs.max_abs(), 0.0);
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn one_hot_mask_routes_modal_gradient_to_selected_pixel() {
        // Saturated mask logits: the modal-vector path only touches pixel 5.
        let mut rng = Rng::new(9);
        let mut m = module(1, 2, &mut rng);
        m.cfg.interaction = false;
        let s = random(&[1, 2, 3, 3], &mut rng);
        let src = Tensor::from_fn(vec![1, 1, 3, 3], |i| if i == 5 { 1.0 } else { 0.0 });
        m.mask_conv = Conv2d {
            weight: Tensor::full(vec![1, 1, 1, 1], 200.0),
            bias: None,
            spec: ConvSpec::pointwise(1),
        };
        let (_, state) = m.forward(&s, Some(&src)).unwrap();
        assert!((state.masks.data()[5] - 1.0).abs() < 1e-15);
        // Upstream gradient on channel 0 at pixel 0 only.
        let mut gy = Tensor::zeros(vec![1, 2, 3, 3]);
        gy.data_mut()[0] = 1.0;
        let (gs, _, _) = m.backward(&gy, None, &state).unwrap();
        let r0 = state.coefficients.data()[0];
        let z = state.z.data();
        let s0 = [s.data()[0], s.data()[9]];
        let q_grad = r0 * (1.0 - r0) * z[0];
        for c in 0..2 {
            let via_ctx = if c == 0 { r0 } else { 0.0 };
            let via_coef = q_grad * s0[c];
            let expect = via_ctx + via_coef;
            assert!((gs.data()[c * 9 + 5] - expect).abs() < 1e-12, "channel {c}");
        }
        for i in [1, 2, 3, 4, 6, 7, 8] {
            assert!(gs.data()[i].abs() < 1e-80);
            assert!(gs.data()[9 + i].abs() < 1e-80);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn masks_sum_to_one(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let mut rng = Rng::new(seed);
            let m = module(3, 2, &mut rng);
            let x = Tensor::from_fn(vec![2, 6, h, w], |_| 3.0 * rng.normal());
            let masks = spatial_masks(&x, &m.mask_conv).unwrap().masks;
            for bg in 0..6 {
                let s: f64 = masks.data()[bg * h * w..][..h * w].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn interaction_is_convex(seed in any::<u64>(), g in 1usize..5) {
            let mut rng = Rng::new(seed);
            let z = Tensor::from_fn(vec![2, g, 3], |_| rng.normal());
            let (zp, p) = mode_interaction(&z, 1.0).unwrap();
            for b in 0..2 {
                for gi in 0..g {
                    let row = &p.data()[(b * g + gi) * g..][..g];
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    for c in 0..3 {
                        let col: Vec<f64> = (0..g).map(|gj| z.data()[(b * g + gj) * 3 + c]).collect();
                        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let v = zp.data()[(b * g + gi) * 3 + c];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn softmax_gating_partitions_unity(seed in any::<u64>(), g in 1usize..5) {
            let mut rng = Rng::new(seed);
            let s = Tensor::from_fn(vec![1, g * 2, 3, 3], |_| rng.normal());
            let z = Tensor::from_fn(vec![1, g, 2], |_| rng.normal());
            let r = attention_coefficients(&s, &z, Gating::Softmax, 1.0).unwrap();
            for i in 0..9 {
                let sum: f64 = (0..g).map(|gi| r.data()[gi * 9 + i]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn sigmoid_gating_is_monotone(seed in any::<u64>(), bump in 0.01f64..2.0) {
            let mut rng = Rng::new(seed);
            let s = Tensor::from_fn(vec![1, 2, 1, 1], |_| rng.normal());
            let z = Tensor::from_fn(vec![1, 1, 2], |_| rng.normal());
            let r0 = attention_coefficients(&s, &z, Gating::Sigmoid, 1.0).unwrap().data()[0];
            // Move s along z: the inner product grows by bump * |z|^2.
            let s1 = Tensor::from_fn(vec![1, 2, 1, 1], |c| s.data()[c] + bump * z.data()[c]);
            let r1 = attention_coefficients(&s1, &z, Gating::Sigmoid, 1.0).unwrap().data()[0];
            prop_assert!(r1 > r0 && r0 > 0.0 && r1 < 1.0);
        }

        #[test]
        fn context_is_parallel_to_modal_vector(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let m = module(2, 3, &mut rng);
            let s = Tensor::from_fn(vec![1, 6, 3, 3], |_| rng.normal());
            let (out, state) = m.forward(&s, None).unwrap();
            let zc = state.context_vectors(&m.cfg).data();
            for g in 0..2 {
                for i in 0..9 {
                    let y: Vec<f64> = (0..3).map(|c| out.data()[(g * 3 + c) * 9 + i] - s.data()[(g * 3 + c) * 9 + i]).collect();
                    let r = state.coefficients.data()[g * 9 + i];
                    for c in 0..3 {
                        prop_assert!((y[c] - r * zc[g * 3 + c]).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

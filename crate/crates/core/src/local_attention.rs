//! Data-dependent K×K local softmask attention, computed per mode.
//!
//! For pixel `i` of mode `g`, the weight on window slot `j` is a softmax over
//! `omega(x_i)_j + nu(x_{n(i,j)})`, and the output is the weighted sum of
//! `u(x_{n(i,j)})`. `omega`, `nu` and `u` are grouped 1×1 convolutions with
//! one group per mode.
//!
//! Window slots are ordered row-major over the offsets `(dy, dx)`, top-left
//! to bottom-right: slot `j = (dy + r) * K + (dx + r)` with `r = K / 2`.
//! Slots whose neighbor falls outside the image are masked out of the
//! softmax, so border pixels renormalize over their valid neighbors.

use crate::error::{invalid, Result};
use crate::ops::{softmax, softmax_backward, BatchNorm, BatchStats, BnCache, BnMode, Conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttention {
    /// `in -> G*K*K` slot logits.
    pub omega: Conv2d,
    /// `in -> G` neighbor logits.
    pub nu: Conv2d,
    /// `in -> G*C_out` values.
    pub u: Conv2d,
    /// Normalization after `u`; `u` carries a bias only when this is absent.
    pub u_bn: Option<BatchNorm>,
    pub kernel: usize,
    pub groups: usize,
}

/// Pre-softmax window logits.
#[derive(Debug, Clone)]
pub struct LocalLogits {
    /// `(batch, G, K*K, H, W)`; invalid slots hold 0.
    pub logits: Tensor,
    /// `(K*K, H, W)` validity pattern shared by every batch element and mode.
    pub valid: Vec<bool>,
}

impl LocalLogits {
    /// The validity pattern broadcast to the full logit shape.
    pub fn full_mask(&self) -> Vec<bool> {
        let reps = self.logits.len() / self.valid.len();
        let mut m = Vec::with_capacity(self.logits.len());
        for _ in 0..reps {
            m.extend_from_slice(&self.valid);
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct LocalCache {
    x: Tensor,
    bn: Option<BnCache>,
    values: Tensor,
    /// Attention weights `(batch, G, K*K, H, W)`, zero on invalid slots.
    pub affinity: Tensor,
    pub bn_stats: Option<BatchStats>,
}

/// Offsets of window slot `j`.
#[inline]
pub fn slot_offset(j: usize, kernel: usize) -> (isize, isize) {
    let r = (kernel / 2) as isize;
    ((j / kernel) as isize - r, (j % kernel) as isize - r)
}

/// Rows/columns `t` in `0..len` with `t + d` also in `0..len`.
#[inline]
fn shifted_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
    (lo.min(len), hi.min(len))
}

pub fn validity_pattern(kernel: usize, h: usize, w: usize) -> Vec<bool> {
    let kk = kernel * kernel;
    let mut valid = vec![false; kk * h * w];
    for j in 0..kk {
        let (dy, dx) = slot_offset(j, kernel);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                valid[(j * h + y) * w + x] = ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w;
            }
        }
    }
    valid
}

impl LocalAttention {
    /// `bn` selects the normalization after `u`; `None` means no BN and a
    /// biased `u`.
    pub fn init(
        in_channels: usize,
        out_per_mode: usize,
        groups: usize,
        kernel: usize,
        bn: Option<BnMode>,
        rng: &mut Rng,
    ) -> Result<Self> {
        const OP: &str = "LocalAttention::init";
        if kernel % 2 == 0 {
            return Err(invalid(OP, format!("window size {kernel} must be odd")));
        }
        if groups == 0 || in_channels % groups != 0 {
            return Err(invalid(OP, format!("{groups} modes do not divide {in_channels} channels")));
        }
        if out_per_mode == 0 {
            return Err(invalid(OP, "per-mode output width must be positive"));
        }
        let spec = ConvSpec::pointwise(groups);
        let omega = Conv2d::init(in_channels, groups * kernel * kernel, spec, true, rng)?;
        // A bias on nu shifts every logit of a window equally and would never
        // receive gradient.
        let nu = Conv2d::init(in_channels, groups, spec, false, rng)?;
        let u = Conv2d::init(in_channels, groups * out_per_mode, spec, bn.is_none(), rng)?;
        let u_bn = bn.map(|m| BatchNorm::new(groups * out_per_mode).with_mode(m));
        Ok(Self {
            omega,
            nu,
            u,
            u_bn,
            kernel,
            groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.u.out_channels()
    }

    fn validate(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        const OP: &str = "local_attention";
        let dims = x.dims4()?;
        if self.kernel % 2 == 0 {
            return Err(invalid(OP, format!("window size {} must be odd", self.kernel)));
        }
        if dims.1 % self.groups != 0 {
            return Err(invalid(OP, format!("{} modes do not divide {} channels", self.groups, dims.1)));
        }
        let kk = self.kernel * self.kernel;
        for (name, conv, out) in [
            ("omega", &self.omega, self.groups * kk),
            ("nu", &self.nu, self.groups),
        ] {
            if conv.spec.groups != self.groups || conv.out_channels() != out {
                return Err(invalid(OP, format!("{name} projection inconsistent with G={} K={}", self.groups, self.kernel)));
            }
        }
        if self.u.spec.groups != self.groups {
            return Err(invalid(OP, "u projection must share the mode count"));
        }
        Ok(dims)
    }

    pub fn local_logits(&self, x: &Tensor) -> Result<LocalLogits> {
        let (n, _, h, w) = self.validate(x)?;
        let om = self.omega.forward(x)?;
        let nu = self.nu.forward(x)?;
        Ok(self.assemble_logits(om, &nu, n, h, w))
    }

    fn assemble_logits(&self, om: Tensor, nu: &Tensor, n: usize, h: usize, w: usize) -> LocalLogits {
        let (g_count, k) = (self.groups, self.kernel);
        let kk = k * k;
        let plane = h * w;
        let valid = validity_pattern(k, h, w);
        let mut logits = om.into_data();
        let nud = nu.data();
        for b in 0..n {
            for g in 0..g_count {
                let nu_plane = &nud[(b * g_count + g) * plane..][..plane];
                for j in 0..kk {
                    let (dy, dx) = slot_offset(j, k);
                    let dst = &mut logits[((b * g_count + g) * kk + j) * plane..][..plane];
                    let vmask = &valid[j * plane..][..plane];
                    for (i, (l, &ok)) in dst.iter_mut().zip(vmask).enumerate() {
                        if ok {
                            let ni = ((i / w) as isize + dy) as usize * w + ((i % w) as isize + dx) as usize;
                            *l += nu_plane[ni];
                        } else {
                            *l = 0.0;
                        }
                    }
                }
            }
        }
        LocalLogits {
            logits: Tensor::new(vec![n, g_count, kk, h, w], logits).expect("logit shape"),
            valid,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, LocalCache)> {
        let (n, _, h, w) = self.validate(x)?;
        let om = self.omega.forward(x)?;
        let nu = self.nu.forward(x)?;
        let logits = self.assemble_logits(om, &nu, n, h, w);
        let affinity = softmax(&logits.logits, 2, Some(&logits.full_mask()))?;

        let u_out = self.u.forward(x)?;
        let (values, bn, bn_stats) = match &self.u_bn {
            Some(bn) => {
                let (v, c, s) = bn.forward_pure(&u_out, train)?;
                (v, Some(c), s)
            }
            None => (u_out, None, None),
        };

        let out = self.aggregate(&affinity, &values, n, h, w);
        out.check_finite("local_attention_forward")?;
        Ok((
            out,
            LocalCache {
                x: x.clone(),
                bn,
                values,
                affinity,
                bn_stats,
            },
        ))
    }

    fn aggregate(&self, a: &Tensor, values: &Tensor, n: usize, h: usize, w: usize) -> Tensor {
        let (g_count, k) = (self.groups, self.kernel);
        let kk = k * k;
        let co = values.shape()[1] / g_count;
        let plane = h * w;
        let (ad, vd) = (a.data(), values.data());
        let mut out = vec![0.0; n * g_count * co * plane];
        for b in 0..n {
            for g in 0..g_count {
                for j in 0..kk {
                    let (dy, dx) = slot_offset(j, k);
                    let (y0, y1) = shifted_range(dy, h);
                    let (x0, x1) = shifted_range(dx, w);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let aplane = &ad[((b * g_count + g) * kk + j) * plane..][..plane];
                    for c in 0..co {
                        let ch = (b * g_count + g) * co + c;
                        let vplane = &vd[ch * plane..][..plane];
                        let oplane = &mut out[ch * plane..][..plane];
                        for y in y0..y1 {
                            let ny = (y as isize + dy) as usize;
                            let nx0 = (x0 as isize + dx) as usize;
                            let orow = &mut oplane[y * w + x0..y * w + x1];
                            let arow = &aplane[y * w + x0..y * w + x1];
                            let vrow = &vplane[ny * w + nx0..];
                            for ((o, a), v) in orow.iter_mut().zip(arow).zip(vrow) {
                                *o += a * v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, g_count * co, h, w], out).expect("local attention output shape")
    }

    /// Returns `d x` and parameter gradients in `params()` order.
    pub fn backward(&self, grad_out: &Tensor, cache: &LocalCache) -> Result<(Tensor, Vec<Tensor>)> {
        const OP: &str = "local_attention_backward";
        let (n, _, h, w) = cache.x.dims4()?;
        let expected = [n, self.out_channels(), h, w];
        if grad_out.shape() != expected {
            return Err(invalid(OP, format!("grad shape {:?}, expected {:?}", grad_out.shape(), expected)));
        }
        let (g_count, k) = (self.groups, self.kernel);
        let kk = k * k;
        let co = self.out_channels() / g_count;
        let plane = h * w;
        let (ad, vd, gs) = (cache.affinity.data(), cache.values.data(), grad_out.data());

        let mut ga = vec![0.0; ad.len()];
        let mut gv = vec![0.0; vd.len()];
        for b in 0..n {
            for g in 0..g_count {
                for j in 0..kk {
                    let (dy, dx) = slot_offset(j, k);
                    let (y0, y1) = shifted_range(dy, h);
                    let (x0, x1) = shifted_range(dx, w);
                    let aoff = ((b * g_count + g) * kk + j) * plane;
                    for c in 0..co {
                        let ch = (b * g_count + g) * co + c;
                        let vplane = &vd[ch * plane..][..plane];
                        let gplane = &gs[ch * plane..][..plane];
                        for y in y0..y1 {
                            let ny = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let nx = (x as isize + dx) as usize;
                                let i = y * w + x;
                                ga[aoff + i] += gplane[i] * vplane[ny * w + nx];
                                gv[ch * plane + ny * w + nx] += ad[aoff + i] * gplane[i];
                            }
                        }
                    }
                }
            }
        }
        let ga = Tensor::new(cache.affinity.shape().to_vec(), ga)?;
        let gl = softmax_backward(&cache.affinity, &ga, 2)?;

        let mut g_nu = vec![0.0; n * g_count * plane];
        let gld = gl.data();
        for b in 0..n {
            for g in 0..g_count {
                for j in 0..kk {
                    let (dy, dx) = slot_offset(j, k);
                    let (y0, y1) = shifted_range(dy, h);
                    let (x0, x1) = shifted_range(dx, w);
                    let loff = ((b * g_count + g) * kk + j) * plane;
                    let noff = (b * g_count + g) * plane;
                    for y in y0..y1 {
                        let ny = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let nx = (x as isize + dx) as usize;
                            g_nu[noff + ny * w + nx] += gld[loff + y * w + x];
                        }
                    }
                }
            }
        }
        let g_om = gl.reshape(vec![n, g_count * kk, h, w])?;
        let g_nu = Tensor::new(vec![n, g_count, h, w], g_nu)?;
        let gv = Tensor::new(cache.values.shape().to_vec(), gv)?;

        let mut om_grads = Vec::new();
        let mut gx = self.omega.backward(&cache.x, &g_om, &mut om_grads)?;
        let mut nu_grads = Vec::new();
        gx.add_assign(&self.nu.backward(&cache.x, &g_nu, &mut nu_grads)?)?;
        let mut bn_grads = Vec::new();
        let g_upre = match (&self.u_bn, &cache.bn) {
            (Some(bn), Some(c)) => bn.backward(c, &gv, &mut bn_grads)?,
            (None, None) => gv,
            _ => return Err(invalid(OP, "cache does not match the u normalization setting")),
        };
        let mut u_grads = Vec::new();
        gx.add_assign(&self.u.backward(&cache.x, &g_upre, &mut u_grads)?)?;

        let mut grads = om_grads;
        grads.extend(nu_grads);
        grads.extend(u_grads);
        grads.extend(bn_grads);
        Ok((gx, grads))
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = Vec::new();
        for (prefix, conv) in [("omega", &self.omega), ("nu", &self.nu), ("u", &self.u)] {
            p.extend(conv.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        if let Some(bn) = &self.u_bn {
            p.extend(bn.params().into_iter().map(|(n, t)| (format!("u_bn.{n}"), t)));
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.omega.params_mut();
        p.extend(self.nu.params_mut());
        p.extend(self.u.params_mut());
        if let Some(bn) = &mut self.u_bn {
            p.extend(bn.params_mut());
        }
        p
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.u_bn
            .iter()
            .flat_map(|bn| bn.buffers().into_iter().map(|(n, t)| (format!("u_bn.{n}"), t)))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.u_bn.iter_mut().flat_map(|bn| bn.buffers_mut()).collect()
    }

    pub fn commit_stats(&mut self, cache: &LocalCache) {
        if let (Some(bn), Some(s)) = (&mut self.u_bn, &cache.bn_stats) {
            bn.commit_stats(s);
        }
    }
}

pub fn local_logits(x: &Tensor, params: &LocalAttention) -> Result<LocalLogits> {
    params.local_logits(x)
}

pub fn local_attention_forward(x: &Tensor, params: &LocalAttention) -> Result<(Tensor, LocalCache)> {
    params.forward(x, true)
}

pub fn local_attention_backward(
    grad_out: &Tensor,
    cache: &LocalCache,
    params: &LocalAttention,
) -> Result<(Tensor, Vec<Tensor>)> {
    params.backward(grad_out, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.normal())
    }

    fn randomize_biases(la: &mut LocalAttention, rng: &mut Rng) {
        for conv in [&mut la.omega, &mut la.nu, &mut la.u] {
            if let Some(b) = &mut conv.bias {
                *b = Tensor::from_fn(b.shape().to_vec(), |_| 0.3 * rng.normal());
            }
        }
    }

    #[test]
    fn even_window_rejected() {
        assert!(LocalAttention::init(4, 2, 2, 2, None, &mut Rng::new(0)).is_err());
        let mut la = LocalAttention::init(4, 2, 2, 3, None, &mut Rng::new(0)).unwrap();
        la.kernel = 4;
        assert!(la.local_logits(&Tensor::zeros(vec![1, 4, 3, 3])).is_err());
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(LocalAttention::init(5, 2, 2, 3, None, &mut Rng::new(0)).is_err());
        let la = LocalAttention::init(4, 2, 2, 3, None, &mut Rng::new(0)).unwrap();
        assert!(la.local_logits(&Tensor::zeros(vec![1, 5, 3, 3])).is_err());
    }

    #[test]
    fn zero_projections_give_zero_logits() {
        let mut rng = Rng::new(1);
        let mut la = LocalAttention::init(4, 2, 2, 3, None, &mut rng).unwrap();
        la.omega.weight = Tensor::zeros(la.omega.weight.shape().to_vec());
        la.nu.weight = Tensor::zeros(la.nu.weight.shape().to_vec());
        let l = la.local_logits(&random(&[1, 4, 4, 4], &mut rng)).unwrap();
        assert!(l.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_window_returns_values() {
        let mut rng = Rng::new(2);
        let mut la = LocalAttention::init(4, 3, 2, 1, None, &mut rng).unwrap();
        randomize_biases(&mut la, &mut rng);
        let x = random(&[2, 4, 3, 5], &mut rng);
        let l = la.local_logits(&x).unwrap();
        let om = la.omega.forward(&x).unwrap();
        let nu = la.nu.forward(&x).unwrap();
        assert_eq!(l.logits.data(), om.add(&nu).unwrap().data());
        let (s, _) = la.forward(&x, true).unwrap();
        assert_eq!(s, la.u.forward(&x).unwrap());
    }

    #[test]
    fn unit_window_backward_is_plain_projection() {
        let mut rng = Rng::new(3);
        let la = LocalAttention::init(4, 2, 2, 1, None, &mut rng).unwrap();
        let x = random(&[1, 4, 3, 3], &mut rng);
        let gs = random(&[1, 4, 3, 3], &mut rng);
        let (_, cache) = la.forward(&x, true).unwrap();
        let (gx, grads) = la.backward(&gs, &cache).unwrap();
        let mut ug = Vec::new();
        let expect = la.u.backward(&x, &gs, &mut ug).unwrap();
        for (a, b) in gx.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        // omega and nu receive no gradient through a one-slot softmax.
        assert!(grads[..3].iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let la = LocalAttention::init(4, 2, 2, 3, None, &mut rng).unwrap();
        let x = random(&[1, 4, 5, 5], &mut rng);
        let (s, cache) = la.forward(&x, true).unwrap();
        let (gx, grads) = la.backward(&Tensor::zeros(s.shape().to_vec()), &cache).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn constant_input_is_a_fixpoint_on_the_interior() {
        let mut rng = Rng::new(5);
        let mut la = LocalAttention::init(4, 2, 2, 3, None, &mut rng).unwrap();
        randomize_biases(&mut la, &mut rng);
        let c = [0.3, -1.2, 0.7, 2.0];
        let x = Tensor::from_fn(vec![1, 4, 6, 6], |i| c[i / 36]);
        let (s, _) = la.forward(&x, true).unwrap();
        let u = la.u.forward(&x).unwrap();
        for ch in 0..4 {
            for y in 1..5 {
                for xx in 1..5 {
                    let i = ch * 36 + y * 6 + xx;
                    assert!((s.data()[i] - u.data()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn border_slots_are_masked() {
        let mut rng = Rng::new(6);
        let la = LocalAttention::init(2, 1, 1, 3, None, &mut rng).unwrap();
        let x = random(&[1, 2, 4, 4], &mut rng);
        let (_, cache) = la.forward(&x, true).unwrap();
        let a = cache.affinity.data();
        // Top-left pixel: only slots (0,0), (0,1), (1,0), (1,1) are valid.
        let valid: Vec<usize> = (0..9).filter(|&j| a[j * 16] > 0.0).collect();
        assert_eq!(valid, vec![4, 5, 7, 8]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn affinity_rows_are_stochastic(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5])) {
            let mut rng = Rng::new(seed);
            let mut la = LocalAttention::init(4, 2, 2, k, None, &mut rng).unwrap();
            randomize_biases(&mut la, &mut rng);
            let x = Tensor::from_fn(vec![2, 4, h, w], |_| 2.0 * rng.normal());
            let (_, cache) = la.forward(&x, true).unwrap();
            let a = cache.affinity.data();
            let plane = h * w;
            let kk = k * k;
            let valid = validity_pattern(k, h, w);
            for bg in 0..4 {
                for i in 0..plane {
                    let mut s = 0.0;
                    for j in 0..kk {
                        let v = a[(bg * kk + j) * plane + i];
                        prop_assert!((0.0..=1.0).contains(&v));
                        if !valid[j * plane + i] { prop_assert_eq!(v, 0.0); }
                        s += v;
                    }
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn identity_values_stay_in_window_hull(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut la = LocalAttention::init(4, 2, 2, 3, None, &mut rng).unwrap();
            // u = identity within each mode, no bias
            la.u.weight = Tensor::from_fn(vec![4, 2, 1, 1], |i| if i / 2 % 2 == i % 2 { 1.0 } else { 0.0 });
            la.u.bias = Some(Tensor::zeros(vec![4]));
            let (h, w) = (5, 6);
            let x = Tensor::from_fn(vec![1, 4, h, w], |_| rng.normal());
            let (s, _) = la.forward(&x, true).unwrap();
            for c in 0..4 {
                for y in 0..h {
                    for xx in 0..w {
                        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let (ny, nx) = (y as isize + dy, xx as isize + dx);
                                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize { continue; }
                                let v = x.data()[(c * h + ny as usize) * w + nx as usize];
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                        let v = s.data()[(c * h + y) * w + xx];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn interior_translation_equivariance(seed in any::<u64>(), dy in 0usize..3, dx in 0usize..3) {
            let mut rng = Rng::new(seed);
            let la = LocalAttention::init(4, 2, 2, 3, None, &mut rng).unwrap();
            let (h, w) = (8, 8);
            let x = Tensor::from_fn(vec![1, 4, h, w], |_| rng.normal());
            // shifted[y][x] = x[y - dy][x - dx]; fill uncovered rows/cols with noise
            let shifted = Tensor::from_fn(vec![1, 4, h, w], |i| {
                let (c, y, xx) = (i / (h * w), i / w % h, i % w);
                if y >= dy && xx >= dx { x.data()[(c * h + y - dy) * w + xx - dx] } else { 7.0 }
            });
            let (s0, _) = la.forward(&x, true).unwrap();
            let (s1, _) = la.forward(&shifted, true).unwrap();
            for c in 0..4 {
                // pixels whose 3x3 window lies inside both images
                for y in 1 + dy..h - 1 {
                    for xx in 1 + dx..w - 1 {
                        if y - dy < 1 || xx - dx < 1 { continue; }
                        prop_assert_eq!(
                            s1.data()[(c * h + y) * w + xx],
                            s0.data()[(c * h + y - dy) * w + xx - dx]
                        );
                    }
                }
            }
        }

        #[test]
        fn modes_are_independent(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let la = LocalAttention::init(6, 2, 3, 3, None, &mut rng).unwrap();
            let x = Tensor::from_fn(vec![1, 6, 4, 4], |_| rng.normal());
            let zeroed = Tensor::from_fn(vec![1, 6, 4, 4], |i| if (2..4).contains(&(i / 16)) { 0.0 } else { x.data()[i] });
            let (s0, _) = la.forward(&x, true).unwrap();
            let (s1, _) = la.forward(&zeroed, true).unwrap();
            prop_assert!(s0.data()[..32] == s1.data()[..32] && s0.data()[64..] == s1.data()[64..]);
        }
    }
}

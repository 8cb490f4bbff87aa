//! Grouped 2-D cross-correlation (no kernel flip) with hand-written backward.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::ops::init::seeded_init;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn pointwise(groups: usize) -> Self {
        Self {
            groups,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    /// Square kernel with "same" padding for odd sizes.
    pub fn square(kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            groups,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (kernel / 2, kernel / 2),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(invalid("conv2d_grouped", "stride must be positive"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(invalid(
                "conv2d_grouped",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    ho: usize,
    wo: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    const OP: &str = "conv2d_grouped";
    let (n, cin, h, w) = input.dims4()?;
    if weight.rank() != 4 {
        return Err(shape_err(OP, "weight rank", 4, weight.rank()));
    }
    let g = spec.groups;
    if g == 0 {
        return Err(invalid(OP, "groups must be positive"));
    }
    if cin % g != 0 {
        return Err(invalid(OP, format!("groups {g} do not divide input channels {cin}")));
    }
    let cout = weight.shape()[0];
    if cout % g != 0 {
        return Err(invalid(OP, format!("groups {g} do not divide output channels {cout}")));
    }
    if weight.shape()[1] != cin / g {
        return Err(shape_err(OP, "weight in-channels per group", cin / g, weight.shape()[1]));
    }
    if weight.shape()[2] != spec.kernel.0 {
        return Err(shape_err(OP, "weight kernel height", spec.kernel.0, weight.shape()[2]));
    }
    if weight.shape()[3] != spec.kernel.1 {
        return Err(shape_err(OP, "weight kernel width", spec.kernel.1, weight.shape()[3]));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g: cin / g,
        cout_g: cout / g,
        ho,
        wo,
    })
}

/// Output columns `ox` whose input column `ox*s + k - p` lies in `[0, w)`.
#[inline]
fn valid_range(k: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if w + p > k { ((w - 1 + p - k) / s + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv2d_grouped(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let geo = geometry(input, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != geo.cout {
            return Err(shape_err("conv2d_grouped", "bias length", geo.cout, b.len()));
        }
    }
    let Geometry { cin, h, w, cout, cin_g, cout_g, ho, wo, .. } = geo;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let x = input.data();
    let wt = weight.data();
    let plane_out = ho * wo;
    let mut out = vec![0.0; geo.n * cout * plane_out];

    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, dst)| {
        let b = idx / cout;
        let oc = idx % cout;
        if let Some(bias) = bias {
            dst.fill(bias.data()[oc]);
        }
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            let src = &x[(b * cin + ic) * h * w..][..h * w];
            let wbase = (oc * cin_g + icl) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, sw, pw, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row = &src[iy as usize * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        if sw == 1 {
                            let off = ox_lo + kx - pw;
                            for (d, s) in drow[ox_lo..ox_hi].iter_mut().zip(&row[off..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox] += wv * row[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    });
    let out = Tensor::new(vec![geo.n, cout, ho, wo], out)?;
    out.check_finite("conv2d_grouped")?;
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_grouped_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    with_bias: bool,
) -> Result<ConvGrads> {
    let geo = geometry(input, weight, spec)?;
    let Geometry { n, cin, h, w, cout, cin_g, cout_g, ho, wo } = geo;
    let expected = [n, cout, ho, wo];
    if grad_out.shape() != expected {
        return Err(invalid(
            "conv2d_grouped_backward",
            format!("grad shape {:?}, expected {:?}", grad_out.shape(), expected),
        ));
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let plane_in = h * w;
    let plane_out = ho * wo;

    let mut gx = vec![0.0; n * cin * plane_in];
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, dst)| {
        let b = idx / cin;
        let ic = idx % cin;
        let grp = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..cout_g {
            let oc = grp * cout_g + ocl;
            let g = &gy[(b * cout + oc) * plane_out..][..plane_out];
            let wbase = (oc * cin_g + icl) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, sw, pw, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &g[oy * wo..][..wo];
                        let drow = &mut dst[iy as usize * w..][..w];
                        if sw == 1 {
                            let off = ox_lo + kx - pw;
                            for (d, s) in drow[off..].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox * sw + kx - pw] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let per_oc = cin_g * kh * kw;
    let mut gw = vec![0.0; cout * per_oc];
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        let grp = oc / cout_g;
        for b in 0..n {
            let g = &gy[(b * cout + oc) * plane_out..][..plane_out];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let src = &x[(b * cin + ic) * plane_in..][..plane_in];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(kx, sw, pw, w, wo);
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let grow = &g[oy * wo..][..wo];
                            let row = &src[iy as usize * w..][..w];
                            if sw == 1 {
                                let off = ox_lo + kx - pw;
                                acc += grow[ox_lo..ox_hi].iter().zip(&row[off..]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * row[ox * sw + kx - pw];
                                }
                            }
                        }
                        dst[(icl * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });

    let bias = with_bias.then(|| {
        let mut gb = vec![0.0; cout];
        for b in 0..n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gy[(b * cout + oc) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        Tensor::new(vec![cout], gb).expect("bias gradient shape")
    });

    Ok(ConvGrads {
        input: Tensor::new(vec![n, cin, h, w], gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias,
    })
}

/// A convolution layer owning its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// He-initialized weights, zero bias.
    pub fn init(in_channels: usize, out_channels: usize, spec: ConvSpec, bias: bool, rng: &mut Rng) -> Result<Self> {
        if in_channels % spec.groups != 0 || out_channels % spec.groups != 0 {
            return Err(invalid(
                "Conv2d::init",
                format!("groups {} must divide {in_channels} -> {out_channels}", spec.groups),
            ));
        }
        let cin_g = in_channels / spec.groups;
        let fan_in = cin_g * spec.kernel.0 * spec.kernel.1;
        let weight = seeded_init(&[out_channels, cin_g, spec.kernel.0, spec.kernel.1], fan_in, rng)?;
        Ok(Self {
            weight,
            bias: bias.then(|| Tensor::zeros(vec![out_channels])),
            spec,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_grouped(x, &self.weight, self.bias.as_ref(), &self.spec)
    }

    /// Returns the input gradient; parameter gradients are appended to
    /// `grads` in `params()` order.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Result<Tensor> {
        let g = conv2d_grouped_backward(x, &self.weight, grad_out, &self.spec, self.bias.is_some())?;
        grads.push(g.weight);
        if let Some(b) = g.bias {
            grads.push(b);
        }
        Ok(g.input)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            p.push(("bias", b));
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.normal())
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let x = random(&[2, 3, 4, 5], 1);
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d_grouped(&x, &w, None, &ConvSpec::pointwise(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_scaling() {
        let x = random(&[1, 4, 3, 3], 2);
        let w = Tensor::full(vec![4, 1, 1, 1], 2.0);
        let y = conv2d_grouped(&x, &w, None, &ConvSpec::pointwise(4)).unwrap();
        assert_eq!(y, x.scale(2.0));
    }

    #[test]
    fn output_size_formula() {
        let x = random(&[1, 2, 7, 6], 3);
        let w = random(&[4, 2, 3, 3], 4);
        let spec = ConvSpec { groups: 1, kernel: (3, 3), stride: (2, 2), padding: (1, 1) };
        let y = conv2d_grouped(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = random(&[1, 6, 3, 3], 5);
        let w = random(&[4, 2, 1, 1], 6);
        let err = conv2d_grouped(&x, &w, None, &ConvSpec::pointwise(4)).unwrap_err();
        assert!(err.to_string().contains("do not divide"), "{err}");
    }

    #[test]
    fn weight_mismatch_names_dimension() {
        let x = random(&[1, 4, 3, 3], 5);
        let w = random(&[4, 3, 1, 1], 6);
        let err = conv2d_grouped(&x, &w, None, &ConvSpec::pointwise(2)).unwrap_err();
        assert!(err.to_string().contains("in-channels per group"), "{err}");
    }

    #[test]
    fn bias_gradient_sums_upstream() {
        let x = random(&[2, 2, 3, 3], 7);
        let w = random(&[2, 2, 1, 1], 8);
        let gy = Tensor::full(vec![2, 2, 3, 3], 1.0);
        let g = conv2d_grouped_backward(&x, &w, &gy, &ConvSpec::pointwise(1), true).unwrap();
        assert_eq!(g.bias.unwrap().data(), &[18.0, 18.0]);
    }
}

//! Global pairwise-attention block (embedded dot product), forward only.
//!
//! `y_i = x_i + sum_j softmax_j(<theta(x_i), phi(x_j)>) u(x_j)` with 1×1
//! projections `theta`, `phi` (to an embedding width) and `u` (back to the
//! input width).

use crate::error::Result;
use crate::ops::{softmax, Conv2d, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalBlock {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub u: Conv2d,
}

impl NonLocalBlock {
    pub fn init(channels: usize, embed: usize, rng: &mut Rng) -> Result<Self> {
        let spec = ConvSpec::pointwise(1);
        Ok(Self {
            theta: Conv2d::init(channels, embed, spec, true, rng)?,
            phi: Conv2d::init(channels, embed, spec, true, rng)?,
            u: Conv2d::init(channels, channels, spec, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let th = self.theta.forward(x)?;
        let ph = self.phi.forward(x)?;
        let u = self.u.forward(x)?;
        let e = self.theta.out_channels();
        let (td, pd, ud) = (th.data(), ph.data(), u.data());

        let mut logits = vec![0.0; n * plane * plane];
        for b in 0..n {
            for k in 0..e {
                let tp = &td[(b * e + k) * plane..][..plane];
                let pp = &pd[(b * e + k) * plane..][..plane];
                for i in 0..plane {
                    let row = &mut logits[(b * plane + i) * plane..][..plane];
                    for (r, p) in row.iter_mut().zip(pp) {
                        *r += tp[i] * p;
                    }
                }
            }
        }
        let f = softmax(&Tensor::new(vec![n, plane, plane], logits)?, 2, None)?;
        let fd = f.data();

        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let up = &ud[(b * c + ch) * plane..][..plane];
                let dst = &mut out[(b * c + ch) * plane..][..plane];
                for (i, d) in dst.iter_mut().enumerate() {
                    let row = &fd[(b * plane + i) * plane..][..plane];
                    *d += row.iter().zip(up).map(|(a, v)| a * v).sum::<f64>();
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

pub fn nonlocal_block_forward(x: &Tensor, params: &NonLocalBlock) -> Result<Tensor> {
    params.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_adds_projection() {
        let mut rng = Rng::new(1);
        let block = NonLocalBlock::init(3, 2, &mut rng).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 1, 1], |_| rng.normal());
        let expect = x.add(&block.u.forward(&x).unwrap()).unwrap();
        assert_eq!(block.forward(&x).unwrap(), expect);
    }

    #[test]
    fn constant_input_gives_constant_context() {
        let mut rng = Rng::new(2);
        let block = NonLocalBlock::init(3, 2, &mut rng).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 4, 4], |i| [0.3, -1.0, 2.0][i / 16]);
        let y = block.forward(&x).unwrap();
        let u = block.u.forward(&x).unwrap();
        for i in 0..y.len() {
            assert!((y.data()[i] - x.data()[i] - u.data()[i]).abs() < 1e-12);
        }
    }
}

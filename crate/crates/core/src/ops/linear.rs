use crate::error::{shape_err, Result};
use crate::ops::init::seeded_init;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fully connected layer on `(batch, features)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: seeded_init(&[outputs, inputs], inputs, rng)?,
            bias: Tensor::zeros(vec![outputs]),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, k) = (x.shape()[0], x.len() / x.shape()[0]);
        if k != self.inputs() {
            return Err(shape_err("linear", "input features", self.inputs(), k));
        }
        let o = self.outputs();
        let (w, b, xd) = (self.weight.data(), self.bias.data(), x.data());
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let row = &xd[r * k..][..k];
            for j in 0..o {
                out[r * o + j] = b[j] + row.iter().zip(&w[j * k..][..k]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Tensor::new(vec![n, o], out)
    }

    /// Input gradient has the shape of `x`; pushes `[d weight, d bias]`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Result<Tensor> {
        let (n, k, o) = (x.shape()[0], self.inputs(), self.outputs());
        if grad_out.shape() != [n, o] {
            return Err(shape_err("linear_backward", "grad columns", o, grad_out.len() / n));
        }
        let (w, xd, g) = (self.weight.data(), x.data(), grad_out.data());
        let mut gx = vec![0.0; n * k];
        let mut gw = vec![0.0; o * k];
        let mut gb = vec![0.0; o];
        for r in 0..n {
            for j in 0..o {
                let gv = g[r * o + j];
                gb[j] += gv;
                for t in 0..k {
                    gx[r * k + t] += gv * w[j * k + t];
                    gw[j * k + t] += gv * xd[r * k + t];
                }
            }
        }
        grads.push(Tensor::new(vec![o, k], gw)?);
        grads.push(Tensor::new(vec![o], gb)?);
        Tensor::new(x.shape().to_vec(), gx)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

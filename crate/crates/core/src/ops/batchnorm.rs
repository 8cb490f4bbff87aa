//! Per-channel batch normalization over (batch, height, width).

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Training,
    /// Normalize by the running estimates.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

/// Batch statistics gathered by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            mode: BnMode::Training,
        }
    }

    pub fn with_mode(mut self, mode: BnMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Forward pass without touching the running statistics.
    ///
    /// Batch statistics are used when `train` is set and the layer is in
    /// training mode; they are returned so the caller can commit them.
    pub fn forward_pure(&self, x: &Tensor, train: bool) -> Result<(Tensor, BnCache, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(shape_err(OP, "channels", self.channels(), c));
        }
        if !(self.eps > 0.0) {
            return Err(invalid(OP, "eps must be positive"));
        }
        let plane = h * w;
        let m = n * plane;
        let use_batch = train && self.mode == BnMode::Training;
        let data = x.data();
        let (mean, var) = if use_batch {
            if m == 1 {
                return Err(invalid(OP, "training mode needs more than one value per channel"));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += data[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for b in 0..n {
                    v += data[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|x| (x - mu) * (x - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / m as f64;
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], self.gamma.data()[ch], self.beta.data()[ch]);
                for i in base..base + plane {
                    let xh = (data[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), out)?;
        out.check_finite(OP)?;
        let stats = use_batch.then_some(BatchStats { mean, var, count: m });
        Ok((
            out,
            BnCache {
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                batch_stats: use_batch,
            },
            stats,
        ))
    }

    /// Exponential moving update; the running variance tracks the unbiased
    /// estimate.
    pub fn commit_stats(&mut self, stats: &BatchStats) {
        let mom = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for (rm, mu) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *rm = (1.0 - mom) * *rm + mom * mu;
        }
        for (rv, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *rv = (1.0 - mom) * *rv + mom * v * unbias;
        }
    }

    /// Mode-driven forward: training mode normalizes by the batch and
    /// updates running statistics, frozen mode uses the running statistics.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, _, stats) = self.forward_pure(x, true)?;
        if let Some(s) = stats {
            self.commit_stats(&s);
        }
        Ok(y)
    }

    /// Returns the input gradient and pushes `[d gamma, d beta]`.
    pub fn backward(&self, cache: &BnCache, grad_out: &Tensor, grads: &mut Vec<Tensor>) -> Result<Tensor> {
        cache.xhat.same_shape(grad_out, "batch_norm_backward")?;
        let (n, c, h, w) = grad_out.dims4()?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let gy = grad_out.data();
        let xh = cache.xhat.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dgamma[ch] += gy[i] * xh[i];
                    dbeta[ch] += gy[i];
                }
            }
        }
        let mut gx = vec![0.0; gy.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let k = self.gamma.data()[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let (sg, sgx) = (dbeta[ch] / m, dgamma[ch] / m);
                    for i in base..base + plane {
                        gx[i] = k * (gy[i] - sg - xh[i] * sgx);
                    }
                } else {
                    for i in base..base + plane {
                        gx[i] = k * gy[i];
                    }
                }
            }
        }
        grads.push(Tensor::new(vec![c], dgamma)?);
        grads.push(Tensor::new(vec![c], dbeta)?);
        Tensor::new(grad_out.shape().to_vec(), gx)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Normalize `input` according to `params.mode`, updating running
/// statistics in training mode.
pub fn batch_norm(input: &Tensor, params: &mut BatchNorm) -> Result<Tensor> {
    params.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| 3.0 * rng.normal() + 1.5)
    }

    #[test]
    fn training_output_is_standardized() {
        let x = random(&[4, 3, 5, 5], 1);
        let mut bn = BatchNorm::new(3);
        let y = batch_norm(&x, &mut bn).unwrap();
        let plane = 25;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + ch) * plane..][..plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            // var = s^2 / (s^2 + eps) with s^2 ~ 9
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        assert!(bn.running_mean.data().iter().all(|m| (m - 0.15).abs() < 0.1));
    }

    #[test]
    fn frozen_mode_is_affine() {
        let x = random(&[2, 2, 3, 3], 2);
        let mut bn = BatchNorm::new(2).with_mode(BnMode::Frozen);
        bn.gamma = Tensor::full(vec![2], 2.0);
        bn.beta = Tensor::full(vec![2], 3.0);
        bn.eps = 1e-300;
        let y = batch_norm(&x, &mut bn).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
        }
        assert_eq!(bn.running_var.data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_value_per_channel_rejected_in_training() {
        let mut bn = BatchNorm::new(2);
        assert!(batch_norm(&Tensor::zeros(vec![1, 2, 1, 1]), &mut bn).is_err());
        let mut frozen = BatchNorm::new(2).with_mode(BnMode::Frozen);
        assert!(batch_norm(&Tensor::zeros(vec![1, 2, 1, 1]), &mut frozen).is_ok());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut bn = BatchNorm::new(3);
        assert!(batch_norm(&Tensor::zeros(vec![2, 2, 2, 2]), &mut bn).is_err());
    }

    proptest! {
        #[test]
        fn frozen_is_exactly_affine_per_channel(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(vec![2, 3, 2, 2], |_| rng.normal());
            let mut bn = BatchNorm::new(3).with_mode(BnMode::Frozen);
            bn.running_mean = Tensor::from_fn(vec![3], |_| rng.normal());
            bn.running_var = Tensor::from_fn(vec![3], |_| rng.uniform() + 0.5);
            bn.gamma = Tensor::from_fn(vec![3], |_| rng.normal());
            bn.beta = Tensor::from_fn(vec![3], |_| rng.normal());
            let f = |t: &Tensor| bn.forward_pure(t, true).unwrap().0;
            let y = f(&x.map(|v| a * v + b));
            let y0 = f(&Tensor::zeros(vec![2, 3, 2, 2]));
            let y1 = f(&x);
            let yb = f(&Tensor::full(vec![2, 3, 2, 2], 1.0));
            // f(a x + b 1) = a (f(x) - f(0)) + b (f(1) - f(0)) + f(0)
            for i in 0..y.len() {
                let pred = a * (y1.data()[i] - y0.data()[i]) + b * (yb.data()[i] - y0.data()[i]) + y0.data()[i];
                prop_assert!((y.data()[i] - pred).abs() <= 1e-9 * (1.0 + pred.abs()));
            }
        }
    }
}

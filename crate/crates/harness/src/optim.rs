//! SGD with momentum and Adam over a flat list of parameter tensors.

use stra_core::Tensor;

use crate::config::{OptimizerConfig, OptimizerKind};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    /// SGD: one velocity per parameter. Adam: first moments, then second.
    pub state: Vec<Tensor>,
    /// Updates applied so far.
    pub steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, shapes: &[&[usize]]) -> Self {
        let copies = match cfg.kind {
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        };
        let state = (0..copies)
            .flat_map(|_| shapes.iter().map(|s| Tensor::zeros(s.to_vec())))
            .collect();
        Self { cfg, state, steps: 0 }
    }

    /// Names for checkpointing, aligned with `state`.
    pub fn state_names(&self) -> Vec<String> {
        let n = self.param_count();
        (0..self.state.len())
            .map(|i| match (self.cfg.kind, i < n) {
                (OptimizerKind::SgdMomentum, _) => format!("velocity.{i}"),
                (OptimizerKind::Adam, true) => format!("m.{i}"),
                (OptimizerKind::Adam, false) => format!("v.{}", i - n),
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => self.state.len(),
            OptimizerKind::Adam => self.state.len() / 2,
        }
    }

    /// One update at rate `lr`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        let n = self.param_count();
        if params.len() != n || grads.len() != n {
            return Err(invalid(format!(
                "optimizer holds state for {n} tensors, got {} parameters and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "optimizer step")?;
        }
        self.steps += 1;
        let c = self.cfg;
        match c.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.state) {
                    for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = c.momentum * *vi + gi + c.weight_decay * *pi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let (ms, vs) = self.state.split_at_mut(n);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((pi, gi), mi), vi) in it {
                        let grad = gi + c.weight_decay * *pi;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * grad;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * grad * grad;
                        *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind, momentum: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr: 0.1,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn tensors() -> (Tensor, Tensor) {
        (
            Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.5),
            Tensor::from_fn(vec![2, 3], |i| (i as f64).sin()),
        )
    }

    #[test]
    fn zero_rate_leaves_params() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let (mut p, g) = tensors();
            let before = p.clone();
            let mut opt = Optimizer::new(cfg(kind, 0.9, 0.1), &[p.shape()]);
            for _ in 0..3 {
                opt.step(vec![&mut p], std::slice::from_ref(&g), 0.0).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn plain_sgd_is_gradient_step() {
        let (mut p, g) = tensors();
        let expect = p.zip_map(&g, |a, b| a - 0.3 * b).unwrap();
        let mut opt = Optimizer::new(cfg(OptimizerKind::SgdMomentum, 0.0, 0.0), &[p.shape()]);
        opt.step(vec![&mut p], std::slice::from_ref(&g), 0.3).unwrap();
        assert_eq!(p, expect);
    }

    #[test]
    fn momentum_and_decay_accumulate() {
        let mut p = Tensor::full(vec![1], 2.0);
        let g = Tensor::full(vec![1], 1.0);
        let mut opt = Optimizer::new(cfg(OptimizerKind::SgdMomentum, 0.5, 0.1), &[p.shape()]);
        opt.step(vec![&mut p], std::slice::from_ref(&g), 1.0).unwrap();
        // v = 1 + 0.2, p = 2 - 1.2
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        opt.step(vec![&mut p], std::slice::from_ref(&g), 1.0).unwrap();
        // v = 0.6 + 1 + 0.08
        assert!((p.data()[0] - (0.8 - 1.68)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let (mut p, g) = tensors();
        let before = p.clone();
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.0, 0.0), &[p.shape()]);
        opt.step(vec![&mut p], std::slice::from_ref(&g), 0.01).unwrap();
        for ((a, b), gi) in p.data().iter().zip(before.data()).zip(g.data()) {
            assert!((b - a - 0.01 * gi / (gi.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::full(vec![1], 1.0);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.0, 0.0), &[p.shape()]);
        for _ in 0..200 {
            let g = p.scale(2.0);
            opt.step(vec![&mut p], &[g], 0.1).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-3, "{}", p.data()[0]);
    }

    #[test]
    fn mismatched_lists_rejected() {
        let (mut p, g) = tensors();
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.0, 0.0), &[p.shape(), p.shape()]);
        assert!(opt.step(vec![&mut p], std::slice::from_ref(&g), 0.1).is_err());
        assert_eq!(opt.state_names(), ["m.0", "m.1", "v.0", "v.1"]);
    }
}

//! Training objective and mask statistics.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
}

impl LossWeights {
    pub fn new(lambda_d: f64) -> Result<Self> {
        if !(lambda_d >= 0.0) || !lambda_d.is_finite() {
            return Err(invalid("LossWeights", format!("lambda_d must be a finite non-negative number, got {lambda_d}")));
        }
        Ok(Self { lambda_d })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_d: 1.0 }
    }
}

/// `mean_b (G - sum_i max_g M[b, g, i])` and its subgradient.
///
/// The subgradient is `-1/N` at the maximizing mode of every position, with
/// ties going to the lowest mode index.
pub fn diversity_loss(masks: &Tensor) -> Result<(f64, Tensor)> {
    let (n, g, h, w) = masks.dims4()?;
    let plane = h * w;
    let md = masks.data();
    let mut grad = vec![0.0; md.len()];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for b in 0..n {
        let mut sum_max = 0.0;
        for i in 0..plane {
            let mut best = 0;
            let mut best_v = md[b * g * plane + i];
            for gi in 1..g {
                let v = md[(b * g + gi) * plane + i];
                if v > best_v {
                    best = gi;
                    best_v = v;
                }
            }
            sum_max += best_v;
            grad[(b * g + best) * plane + i] = -inv_n;
        }
        total += g as f64 - sum_max;
    }
    Ok((total * inv_n, Tensor::new(masks.shape().to_vec(), grad)?))
}

/// Mean negative log-likelihood of the true classes and `d loss / d logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    const OP: &str = "cross_entropy";
    if logits.rank() != 2 {
        return Err(shape_err(OP, "rank", 2, logits.rank()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(shape_err(OP, "label count", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(OP, format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..][..k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[label];
        for (j, g) in grad[b * k..][..k].iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

pub fn total_loss(ce: f64, ld: f64, w: LossWeights) -> f64 {
    ce + w.lambda_d * ld
}

/// Mean over mode pairs and batch of `sum_i min(M^g_i, M^h_i)`.
pub fn mask_overlap(masks: &Tensor) -> Result<f64> {
    let (n, g, h, w) = masks.dims4()?;
    if g < 2 {
        return Err(invalid("mask_overlap", "needs at least two modes"));
    }
    let plane = h * w;
    let md = masks.data();
    let mut total = 0.0;
    for b in 0..n {
        for a in 0..g {
            for c in a + 1..g {
                let pa = &md[(b * g + a) * plane..][..plane];
                let pc = &md[(b * g + c) * plane..][..plane];
                total += pa.iter().zip(pc).map(|(x, y)| x.min(*y)).sum::<f64>();
            }
        }
    }
    Ok(total / (n * g * (g - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn one_hot(g: usize, plane: usize, pos: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(vec![1, g, 1, plane]);
        for (gi, &p) in pos.iter().enumerate() {
            t.data_mut()[gi * plane + p] = 1.0;
        }
        t
    }

    fn random_masks(n: usize, g: usize, plane: usize, rng: &mut Rng, sharp: f64) -> Tensor {
        let mut t = Tensor::from_fn(vec![n, g, 1, plane], |_| (sharp * rng.normal()).exp());
        for s in t.data_mut().chunks_mut(plane) {
            let z: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= z);
        }
        t
    }

    #[test]
    fn disjoint_one_hot_masks_give_zero() {
        assert_eq!(diversity_loss(&one_hot(3, 9, &[0, 4, 8])).unwrap().0, 0.0);
    }

    #[test]
    fn identical_one_hot_masks_give_one() {
        assert_eq!(diversity_loss(&one_hot(2, 9, &[4, 4])).unwrap().0, 1.0);
    }

    #[test]
    fn uniform_masks_give_g_minus_one() {
        let m = Tensor::full(vec![2, 4, 4, 4], 1.0 / 16.0);
        assert!((diversity_loss(&m).unwrap().0 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_mode() {
        let m = Tensor::full(vec![1, 3, 1, 2], 0.5);
        let (_, g) = diversity_loss(&m).unwrap();
        assert_eq!(g.data(), &[-1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (l, _) = cross_entropy(&Tensor::zeros(vec![2, 5]), &[0, 3]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        let mut logits = Tensor::zeros(vec![1, 3]);
        logits.data_mut()[1] = 50.0;
        assert!(cross_entropy(&logits, &[1]).unwrap().0 < 1e-20);
        assert!(cross_entropy(&logits, &[3]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn total_loss_combines() {
        let ln2 = 2f64.ln();
        assert_eq!(total_loss(ln2, 1.0, LossWeights::new(0.0).unwrap()), ln2);
        assert_eq!(total_loss(ln2, 1.0, LossWeights::default()), ln2 + 1.0);
        assert_eq!(total_loss(0.5, 2.0, LossWeights::new(0.1).unwrap()), 0.5 + 0.1 * 2.0);
        assert!(LossWeights::new(-1.0).is_err());
    }

    #[test]
    fn overlap_reference_values() {
        assert_eq!(mask_overlap(&one_hot(3, 9, &[0, 4, 8])).unwrap(), 0.0);
        assert_eq!(mask_overlap(&one_hot(2, 9, &[4, 4])).unwrap(), 1.0);
        let u = Tensor::full(vec![1, 3, 2, 2], 0.25);
        assert!((mask_overlap(&u).unwrap() - 1.0).abs() < 1e-15);
        assert!(mask_overlap(&Tensor::full(vec![1, 1, 2, 2], 0.25)).is_err());
    }

    proptest! {
        #[test]
        fn diversity_is_bounded(seed in any::<u64>(), g in 1usize..6, plane in 1usize..20, sharp in 0.0f64..6.0) {
            let mut rng = Rng::new(seed);
            let m = random_masks(2, g, plane, &mut rng, sharp);
            let (l, _) = diversity_loss(&m).unwrap();
            prop_assert!(l >= -1e-12 && l <= (g - 1) as f64 + 1e-12);
        }

        #[test]
        fn zero_iff_disjoint_support(seed in any::<u64>(), g in 2usize..5, plane in 4usize..16, overlap in any::<bool>()) {
            // Partition positions among modes; optionally let mode 1 leak into mode 0's cell.
            let mut rng = Rng::new(seed);
            let mut owner: Vec<usize> = (0..plane).map(|i| i % g).collect();
            rng.shuffle(&mut owner);
            let mut m = Tensor::zeros(vec![1, g, 1, plane]);
            for (i, &o) in owner.iter().enumerate() {
                m.data_mut()[o * plane + i] = rng.uniform() + 0.1;
            }
            if overlap {
                let i = owner.iter().position(|&o| o == 0).unwrap();
                m.data_mut()[plane + i] = 0.05;
            }
            for s in m.data_mut().chunks_mut(plane) {
                let z: f64 = s.iter().sum();
                s.iter_mut().for_each(|v| *v /= z);
            }
            let (l, _) = diversity_loss(&m).unwrap();
            if overlap {
                prop_assert!(l > 1e-6);
            } else {
                prop_assert!(l.abs() < 1e-12);
            }
        }

        #[test]
        fn subgradient_matches_perturbations(seed in any::<u64>(), g in 2usize..5) {
            let mut rng = Rng::new(seed);
            let m = random_masks(1, g, 6, &mut rng, 2.0);
            let (l0, grad) = diversity_loss(&m).unwrap();
            let eps = 1e-9;
            for idx in 0..m.len() {
                let i = idx % 6;
                let col: Vec<f64> = (0..g).map(|gi| m.data()[gi * 6 + i]).collect();
                let mut sorted = col.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] <= 10.0 * eps {
                    continue;
                }
                let mut p = m.clone();
                p.data_mut()[idx] += eps;
                let (l1, _) = diversity_loss(&p).unwrap();
                let expect = grad.data()[idx] * eps;
                prop_assert!((l1 - l0 - expect).abs() < 1e-14);
            }
        }

        #[test]
        fn cross_entropy_is_nonnegative(seed in any::<u64>(), k in 2usize..6) {
            let mut rng = Rng::new(seed);
            let logits = Tensor::from_fn(vec![3, k], |_| 5.0 * rng.normal());
            let labels: Vec<usize> = (0..3).map(|_| rng.below(k)).collect();
            prop_assert!(cross_entropy(&logits, &labels).unwrap().0 > 0.0);
        }
    }
}

//! Central finite-difference gradient checking.

use std::fmt;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A scalar function of several tensors with an analytic gradient.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;
    /// One gradient per input, same shapes.
    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Adapter from a pair of closures.
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        (self.value)(inputs)
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        (self.gradient)(inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Flat index of the largest relative error.
    pub worst_index: usize,
    /// Flat index of the first non-finite analytic or numeric entry.
    pub non_finite: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {}: max rel {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.max_rel(),
            self.tol
        )?;
        for t in &self.tensors {
            write!(f, "  {:<28} rel {:.3e} abs {:.3e} at [{}]", t.name, t.max_rel, t.max_abs, t.worst_index)?;
            if let Some(i) = t.non_finite {
                write!(f, " non-finite at [{i}]")?;
            }
            writeln!(f, "{}", if t.passed { "" } else { "  <-- FAIL" })?;
        }
        Ok(())
    }
}

/// Step used for coordinate `x`.
pub fn step_for(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `f.gradient` against central differences on every coordinate of
/// every named input.
pub fn gradcheck(label: &str, f: &dyn Differentiable, inputs: &[(String, Tensor)], tol: f64) -> Result<GradReport> {
    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let analytic = f.gradient(&tensors)?;
    if analytic.len() != tensors.len() {
        return Err(invalid(
            "gradcheck",
            format!("{} gradients for {} inputs", analytic.len(), tensors.len()),
        ));
    }
    let mut work = tensors.clone();
    let mut checks = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        t.same_shape(&analytic[k], "gradcheck")?;
        let mut check = TensorCheck {
            name: name.clone(),
            max_rel: 0.0,
            max_abs: 0.0,
            worst_index: 0,
            non_finite: None,
            passed: true,
        };
        for i in 0..t.len() {
            let x0 = t.data()[i];
            let h = step_for(x0);
            work[k].data_mut()[i] = x0 + h;
            let fp = f.value(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = f.value(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                check.non_finite.get_or_insert(i);
                check.passed = false;
                continue;
            }
            let rel = relative_error(a, numeric);
            check.max_abs = check.max_abs.max((a - numeric).abs());
            if rel > check.max_rel {
                check.max_rel = rel;
                check.worst_index = i;
            }
        }
        check.passed &= check.max_rel <= tol;
        checks.push(check);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradReport {
        label: label.to_string(),
        tol,
        tensors: checks,
        passed,
    })
}

/// Fixed random weights turning a tensor output into a scalar: the
/// objective `sum(w * y)` has upstream gradient `w`. Random weights exercise
/// every output coordinate with a distinct sensitivity, which a plain sum
/// would not (softmax rows, for instance, always sum to one).
pub fn probe(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{softmax, softmax_backward};

    fn linear_map() -> (Tensor, impl Differentiable) {
        let w = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.7).cos());
        let v = w.clone();
        let f = FnPair {
            value: move |x: &[Tensor]| -> Result<f64> {
                let x = x[0].data();
                Ok((0..3).map(|r| (0..4).map(|c| v.data()[r * 4 + c] * x[c]).sum::<f64>() * (r + 1) as f64).sum())
            },
            gradient: move |_: &[Tensor]| -> Result<Vec<Tensor>> {
                Ok(vec![Tensor::from_fn(vec![4], |c| {
                    (0..3).map(|r| w.data()[r * 4 + c] * (r + 1) as f64).sum()
                })])
            },
        };
        (Tensor::from_fn(vec![4], |i| i as f64 - 1.5), f)
    }

    #[test]
    fn linear_map_is_exact() {
        let (x, f) = linear_map();
        let r = gradcheck("linear", &f, &[("x".into(), x)], 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel() < 1e-9, "{r}");
    }

    fn softmax_probe(drop_term: bool) -> (Tensor, impl Differentiable) {
        let mut rng = Rng::new(3);
        let w = probe(&[2, 5], &mut rng);
        let w2 = w.clone();
        let f = FnPair {
            value: move |x: &[Tensor]| softmax(&x[0], 1, None)?.dot(&w),
            gradient: move |x: &[Tensor]| -> Result<Vec<Tensor>> {
                let y = softmax(&x[0], 1, None)?;
                if drop_term {
                    // Missing the row-sum correction of the softmax Jacobian.
                    return Ok(vec![y.zip_map(&w2, |a, b| a * b)?]);
                }
                Ok(vec![softmax_backward(&y, &w2, 1)?])
            },
        };
        (Tensor::from_fn(vec![2, 5], |_| rng.normal()), f)
    }

    #[test]
    fn softmax_composition_is_tight() {
        let (x, f) = softmax_probe(false);
        let r = gradcheck("softmax", &f, &[("x".into(), x)], 1e-8).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn dropped_term_is_detected() {
        let (x, f) = softmax_probe(true);
        let r = gradcheck("softmax", &f, &[("x".into(), x)], 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failures().count(), 1);
        assert!(r.to_string().contains("FAIL"));
    }

    #[test]
    fn non_finite_gradient_is_located() {
        let f = FnPair {
            value: |x: &[Tensor]| Ok(x[0].sum()),
            gradient: |x: &[Tensor]| {
                let mut g = Tensor::full(x[0].shape().to_vec(), 1.0);
                g.data_mut()[2] = f64::NAN;
                Ok(vec![g])
            },
        };
        let r = gradcheck("nan", &f, &[("x".into(), Tensor::zeros(vec![4]))], 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.tensors[0].non_finite, Some(2));
    }
}

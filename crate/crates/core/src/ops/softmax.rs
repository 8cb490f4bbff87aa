use crate::error::{invalid, shape_err, Result, StraError};
use crate::tensor::Tensor;

/// Decompose `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
///
/// `mask`, when present, has one flag per logit (`true` = keep). Masked
/// positions output exactly zero and the rest renormalize among themselves.
pub fn softmax(logits: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    const OP: &str = "softmax";
    let (outer, len, inner) = split_axis(logits.shape(), axis, OP)?;
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(shape_err(OP, "mask length", logits.len(), m.len()));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                let i = base + k * inner;
                if keep(i) {
                    max = max.max(x[i]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(StraError::Numerical {
                    op: OP,
                    reason: format!("slice {o}/{r} along axis {axis} is fully masked"),
                });
            }
            let mut sum = 0.0;
            for k in 0..len {
                let i = base + k * inner;
                if keep(i) {
                    let e = (x[i] - max).exp();
                    out[i] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum;
            for k in 0..len {
                out[base + k * inner] *= inv;
            }
        }
    }
    let out = Tensor::new(logits.shape().to_vec(), out)?;
    out.check_finite(OP)?;
    Ok(out)
}

/// Vector-Jacobian product of softmax: `y * (g - sum(y * g))` along `axis`.
/// Masked positions have `y = 0` and therefore receive zero gradient.
pub fn softmax_backward(y: &Tensor, grad_y: &Tensor, axis: usize) -> Result<Tensor> {
    y.same_shape(grad_y, "softmax_backward")?;
    let (outer, len, inner) = split_axis(y.shape(), axis, "softmax_backward")?;
    let (p, g) = (y.data(), grad_y.data());
    let mut out = vec![0.0; p.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let dot: f64 = (0..len).map(|k| p[base + k * inner] * g[base + k * inner]).sum();
            for k in 0..len {
                let i = base + k * inner;
                out[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

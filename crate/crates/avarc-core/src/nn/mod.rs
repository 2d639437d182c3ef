//! Minimal f64 neural-network layers with hand-written backward passes.
//!
//! Everything is CPU ndarray math. Layers own their gradient accumulators so
//! a cloned layer is an independent worker for data-parallel training; chunk
//! gradients are merged in a fixed order to keep runs bit-reproducible.

pub mod adam;
pub mod attention;
pub mod conv;
#[cfg(test)]
mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod parallel;
pub mod resample;

pub use adam::{Adam, AdamConfig};
pub use attention::BlockCausalAttention;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::LayerNorm;

use ndarray::ArrayViewMutD;

/// Mutable view of one named parameter and its gradient accumulator.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

/// Anything with trainable parameters. `visit_params` must enumerate them in
/// a stable order; checkpoints, Adam state and gradient merging all rely on
/// that order.
pub trait HasParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |mut p| p.grad.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p| n += p.value.len());
        n
    }

    /// Gradients in visit order, cloned out.
    fn export_grads(&mut self) -> Vec<ndarray::ArrayD<f64>> {
        let mut out = Vec::new();
        self.visit_params("", &mut |p| out.push(p.grad.to_owned()));
        out
    }

    /// Add `other` (as produced by `export_grads`) into this object's grads.
    fn accumulate_grads(&mut self, other: &[ndarray::ArrayD<f64>]) {
        let mut i = 0;
        self.visit_params("", &mut |mut p| {
            p.grad.zip_mut_with(&other[i], |g, o| *g += o);
            i += 1;
        });
    }

    /// Copy parameter values from another instance of the same architecture.
    fn export_values(&mut self) -> Vec<ndarray::ArrayD<f64>> {
        let mut out = Vec::new();
        self.visit_params("", &mut |p| out.push(p.value.to_owned()));
        out
    }
}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Read the idx-th scalar parameter in visit order.
pub fn get_param_scalar(obj: &mut dyn HasParams, idx: usize) -> f64 {
    let mut seen = 0;
    let mut out = f64::NAN;
    obj.visit_params("", &mut |p| {
        if idx >= seen && idx < seen + p.value.len() {
            out = *p.value.iter().nth(idx - seen).unwrap();
        }
        seen += p.value.len();
    });
    out
}

/// Overwrite the idx-th scalar parameter in visit order.
pub fn set_param_scalar(obj: &mut dyn HasParams, idx: usize, val: f64) {
    let mut seen = 0;
    obj.visit_params("", &mut |mut p| {
        if idx >= seen && idx < seen + p.value.len() {
            *p.value.iter_mut().nth(idx - seen).unwrap() = val;
        }
        seen += p.value.len();
    });
}

/// Read the idx-th scalar of an exported gradient set (see
/// [`HasParams::export_grads`]); `obj` only supplies the layout.
pub fn grad_scalar(grads: &[ndarray::ArrayD<f64>], obj: &mut dyn HasParams, idx: usize) -> f64 {
    let mut seen = 0;
    let mut out = f64::NAN;
    let mut tensor = 0;
    obj.visit_params("", &mut |p| {
        if idx >= seen && idx < seen + p.value.len() {
            out = *grads[tensor].iter().nth(idx - seen).unwrap();
        }
        seen += p.value.len();
        tensor += 1;
    });
    out
}

/// GELU (tanh approximation), elementwise.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// log(sigmoid(z)) computed stably as -softplus(-z).
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// ln(1 + e^z) without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(x), fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]), 2.0_f64.ln());
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1000.0]), -1000.0 + 2.0_f64.ln());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sigmoid_at_zero_is_minus_ln2() {
        assert_relative_eq!(log_sigmoid(0.0), -(2.0_f64.ln()), epsilon = 1e-15);
    }
}

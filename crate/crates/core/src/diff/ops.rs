//! Elementwise activations and a masked, temperature-scaled softmax, each with
//! its vector-Jacobian product.

use ndarray::{Array1, ArrayView1, ArrayViewMut1};

use crate::scalar::Scalar;

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
    }
}

/// Softmax of `scores / temperature`. Entries equal to `-inf` are masked.
/// A row with no finite entry returns all zeros instead of NaN.
pub fn softmax<T: Scalar>(scores: ArrayView1<T>, temperature: T) -> Array1<T> {
    let mut out = scores.to_owned();
    softmax_in_place(out.view_mut(), temperature);
    out
}

pub fn softmax_in_place<T: Scalar>(mut row: ArrayViewMut1<T>, temperature: T) {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        row.fill(T::zero());
        return;
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = if v.is_finite() {
            ((*v - max) / temperature).exp()
        } else {
            T::zero()
        };
        sum += v.f64();
    }
    let inv = T::of(1.0 / sum);
    row.mapv_inplace(|v| v * inv);
}

/// Gradient of the softmax input given output `w` and upstream `dw`:
/// `ds_i = w_i (dw_i - Σ_j w_j dw_j) / τ`.
pub fn softmax_backward<T: Scalar>(w: ArrayView1<T>, dw: ArrayView1<T>, temperature: T) -> Array1<T> {
    let dot: f64 = w.iter().zip(dw.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
    let dot = T::of(dot);
    let mut out = Array1::zeros(w.len());
    for i in 0..w.len() {
        out[i] = w[i] * (dw[i] - dot) / temperature;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    #[test]
    fn equal_scores_are_uniform() {
        let w = softmax(arr1(&[2.0f64, 2.0, 2.0, 2.0]).view(), 1.0);
        for v in w.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn all_masked_row_is_zero() {
        let w = softmax(arr1(&[f64::NEG_INFINITY; 3]).view(), 0.5);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let w = softmax(arr1(&[0.0f64, f64::NEG_INFINITY, 0.0]).view(), 1.0);
        assert_eq!(w[1], 0.0);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn activation_values() {
        assert_abs_diff_eq!(softplus(0.0f64), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(100.0f64), 100.0, epsilon = 1e-12);
        assert!(softplus(-100.0f64) > 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(relu(-1.0f64), 0.0);
        assert_eq!(relu(2.5f64), 2.5);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let s = arr1(&[0.3f64, -1.2, 0.7, f64::NEG_INFINITY]);
        let up = arr1(&[1.0f64, -2.0, 0.5, 3.0]);
        let tau = 0.7;
        let w = softmax(s.view(), tau);
        let g = softmax_backward(w.view(), up.view(), tau);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = s.clone();
            p[i] += h;
            let mut m = s.clone();
            m[i] -= h;
            let f = |x: &Array1<f64>| softmax(x.view(), tau).dot(&up);
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-8);
        }
        assert_eq!(g[3], 0.0);
    }
}

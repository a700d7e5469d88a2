use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayD, Axis, IxDyn};
use rand::Rng;

use super::params::{Gradients, Init, ParamRef, ParamStore};
use crate::scalar::Scalar;

/// Affine map over the last axis: `y = x W + b`, `W` is `(n_in, n_out)`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::with_trainable(store, name, n_in, n_out, bias, init, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_trainable<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}/kernel"), n_in, n_out, init, trainable, rng);
        let b = bias.then(|| store.add(&format!("{name}/bias"), 1, n_out, Init::Zeros, trainable, rng));
        Self { w, b, n_in, n_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView2<T>) -> Array2<T> {
        debug_assert_eq!(x.ncols(), self.n_in);
        let mut y = x.dot(&p.mat(self.w));
        if let Some(b) = self.b {
            y += &p.vec(b);
        }
        y
    }

    /// Applies the map over the last axis of an arbitrary-rank input.
    pub fn forward_nd<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayViewD<T>) -> ArrayD<T> {
        let shape = x.shape().to_vec();
        let n = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.n_in))
            .expect("last axis matches n_in");
        let y = self.forward(p, flat.view());
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.n_out;
        y.into_shape_with_order(IxDyn(&out_shape)).unwrap()
    }

    /// Accumulates parameter gradients and returns `dx` when requested.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Gradients<T>,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut g.mat_mut(self.w));
        if let Some(b) = self.b {
            let db = dy.sum_axis(Axis(0));
            let mut gb = g.vec_mut(b);
            gb += &db;
        }
        need_dx.then(|| dy.dot(&p.mat(self.w).t()))
    }
}

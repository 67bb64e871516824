//! Dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn linear<T: Scalar>(x: &ArrayView2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn linear_backward<T: Scalar>(
    x: &ArrayView2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array2<T>,
) -> Array2<T> {
    ndarray::linalg::general_mat_mul(T::one(), &x.t(), dy, T::one(), dw);
    let mut db_row = db.row_mut(0);
    db_row += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &ArrayView2<T>,
    gamma: &Array2<T>,
    beta: &Array2<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let d = T::c(x.ncols() as f64);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + T::c(LN_EPS)).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &gamma.row(0);
    y += &beta.row(0);
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Array2<T>,
    dy: &Array2<T>,
    dgamma: &mut Array2<T>,
    dbeta: &mut Array2<T>,
) -> Array2<T> {
    {
        let mut dg = dgamma.row_mut(0);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        let mut dbt = dbeta.row_mut(0);
        dbt += &dy.sum_axis(Axis(0));
    }
    let d = T::c(dy.ncols() as f64);
    let mut dx = dy * &gamma.row(0);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / d;
        for (v, &h) in row.iter_mut().zip(xh) {
            *v = r * (*v - mean_d - h * mean_dx);
        }
    }
    dx
}

/// In-place row softmax.
pub(crate) fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Inverted-dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut R>,
) -> Option<Array2<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep }))
}

pub(crate) fn rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (mut o, &i) in out.rows_mut().into_iter().zip(idx) {
        o.assign(&x.row(i));
    }
    out
}

pub(crate) fn scatter_add_rows<T: Scalar>(dst: &mut Array2<T>, idx: &[usize], src: &Array2<T>) {
    for (&i, row) in idx.iter().zip(src.rows()) {
        let mut d = dst.row_mut(i);
        d += &row;
    }
}

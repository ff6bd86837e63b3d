//! Forward/backward pairs for the handful of primitives the trunks use.
//! Activations are row-major `(rows, features)` matrices; gradients into
//! parameters are accumulated (`+=`), gradients into inputs are returned.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::layout::Slot;

pub(crate) const RMS_EPS: f64 = 1e-6;

pub(crate) fn linear(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: Option<ArrayView1<'_, f64>>,
) -> Array2<f64> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Returns `dx`; accumulates `xᵀ·dy` into `dw`.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dw: ArrayViewMut2<'_, f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    dy.dot(&w.t())
}

/// `linear` with weight and bias read from the flat parameter buffer.
pub(crate) fn affine(
    params: &[f64],
    w: Slot,
    b: Option<Slot>,
    x: ArrayView2<'_, f64>,
) -> Array2<f64> {
    linear(x, w.mat(params), b.map(|b| b.vec(params)))
}

/// Backward of [`affine`], accumulating into the flat gradient buffer.
pub(crate) fn affine_backward(
    params: &[f64],
    grads: &mut [f64],
    w: Slot,
    b: Option<Slot>,
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let dx = linear_backward(x, w.mat(params), dy, w.mat_mut(grads));
    if let Some(b) = b {
        let mut gb = b.vec_mut(grads);
        gb += &dy.sum_axis(Axis(0));
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward(pre: &Array2<f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    Zip::from(pre).and(&dy).map_collect(|&x, &g| {
        let s = sigmoid(x);
        g * s * (1.0 + x * (1.0 - s))
    })
}

/// Row-wise RMS normalization without a learned gain. Returns the normalized
/// rows and the per-row reciprocal RMS.
pub(crate) fn rms_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / n + RMS_EPS).sqrt())
        .collect();
    let u = x * &inv.view().insert_axis(Axis(1));
    (u, inv)
}

pub(crate) fn rms_norm_backward(
    u: &Array2<f64>,
    inv: &Array1<f64>,
    du: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = u.ncols() as f64;
    let mut dx = Array2::zeros(u.raw_dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let ui = u.row(i);
        let gi = du.row(i);
        let proj = gi.dot(&ui) / n;
        Zip::from(&mut row)
            .and(&gi)
            .and(&ui)
            .for_each(|d, &g, &uu| *d = inv[i] * (g - uu * proj));
    }
    dx
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        softmax_in_place(row.view_mut());
    }
}

pub(crate) fn softmax_in_place(mut v: ArrayViewMut1<'_, f64>) {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    v.mapv_inplace(|x| (x - m).exp());
    let s = v.sum();
    v /= s;
}

pub(crate) fn softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut out = v.to_owned();
    softmax_in_place(out.view_mut());
    out
}

/// Gradient through a row-wise softmax given its output `p`.
pub(crate) fn softmax_rows_backward(p: &Array2<f64>, dp: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.raw_dim());
    for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
        let pi = p.row(i);
        let gi = dp.row(i);
        let inner = pi.dot(&gi);
        Zip::from(&mut row)
            .and(&pi)
            .and(&gi)
            .for_each(|d, &pp, &g| *d = pp * (g - inner));
    }
    ds
}

//! Forward and reverse-mode primitives over row-major activations.
//!
//! Every backward function returns owned gradients; callers fold parameter
//! gradients into the flat gradient vector.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Returns `(dx, dw, db)` for `y = x w + b`.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &gain + bias;
    (y, NormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        for ((o, gv), xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (gv - mean_g - xv * mean_gx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward(x: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(|v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
    });
    dx *= &dy;
    dx
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Weights of one attention block.
pub(crate) struct AttnWeights<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
    /// Per-head bias by pairwise bucket, `[heads, buckets]`.
    pub bucket_bias: Option<ArrayView2<'a, f64>>,
}

pub(crate) struct AttnCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

pub(crate) struct AttnGrads {
    pub dxq: Array2<f64>,
    pub dxkv: Array2<f64>,
    pub dwq: Array2<f64>,
    pub dwk: Array2<f64>,
    pub dwv: Array2<f64>,
    pub dwo: Array2<f64>,
    pub dbo: Array1<f64>,
    pub dbucket: Option<Array2<f64>>,
}

/// Multi-head scaled dot-product attention, no masking.
///
/// `buckets[(i, j)]` selects the additive bias of query `i` on key `j`.
pub(crate) fn attention(
    w: &AttnWeights,
    heads: usize,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    buckets: Option<&Array2<usize>>,
) -> (Array2<f64>, AttnCache) {
    let d = w.wq.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = xq.dot(&w.wq);
    let k = xkv.dot(&w.wk);
    let v = xkv.dot(&w.wv);
    let mut mixed = Array2::zeros((xq.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if let (Some(bias), Some(bk)) = (&w.bucket_bias, buckets) {
            let row = bias.row(h);
            scores.zip_mut_with(bk, |s, &b| *s += row[b]);
        }
        for mut r in scores.rows_mut() {
            softmax_in_place(r.as_slice_mut().expect("contiguous row"));
        }
        mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = linear(mixed.view(), w.wo, Some(w.bo));
    (
        out,
        AttnCache {
            xq: xq.to_owned(),
            xkv: xkv.to_owned(),
            q,
            k,
            v,
            probs,
            mixed,
        },
    )
}

pub(crate) fn attention_backward(
    w: &AttnWeights,
    heads: usize,
    cache: &AttnCache,
    dout: ArrayView2<f64>,
    buckets: Option<&Array2<usize>>,
) -> AttnGrads {
    let d = w.wq.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (dmixed, dwo, dbo) = linear_backward(cache.mixed.view(), w.wo, dout);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut dbucket = w
        .bucket_bias
        .as_ref()
        .map(|b| Array2::<f64>::zeros(b.raw_dim()));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dmix_h = dmixed.slice(cols);
        let dp = dmix_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dmix_h));
        // softmax backward per row
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner: f64 = row.sum();
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * inner);
        }
        if let (Some(db), Some(bk)) = (dbucket.as_mut(), buckets) {
            let mut row = db.row_mut(h);
            for (g, &b) in ds.iter().zip(bk.iter()) {
                row[b] += g;
            }
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let dwq = cache.xq.t().dot(&dq);
    let dwk = cache.xkv.t().dot(&dk);
    let dwv = cache.xkv.t().dot(&dv);
    let dxq = dq.dot(&w.wq.t());
    let dxkv = dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    AttnGrads {
        dxq,
        dxkv,
        dwq,
        dwk,
        dwv,
        dwo,
        dbo,
        dbucket,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(x.view(), g.view(), b.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        let x = array![[-3.0, -0.5, 0.0, 0.7, 2.5]];
        let ones = Array2::ones(x.raw_dim());
        let g = gelu_backward(&x, ones.view());
        let h = 1e-6;
        for (i, &v) in x.iter().enumerate() {
            let f = |t: f64| gelu(&array![[t]])[[0, 0]];
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((fd - g[[0, i]]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut v = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(v[1] > v[0] && v[0] > v[2]);
    }
}

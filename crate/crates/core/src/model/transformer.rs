//! Pre-norm transformer encoder layer over packed samples.
//!
//! Attention never crosses sample boundaries. The last layer can run in
//! query-only mode: keys and values come from every token but only the query
//! token of each sample is updated, since the heads read nothing else.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::layers::{dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward, rows, scatter_add_rows, softmax_rows, LayerNormCache};
use super::{Packed, ParamId, Params, Scalar};

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

impl LayerIds {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(p: &mut Params<T>, layer: usize, d: usize, ff: usize, rng: &mut R) -> Self {
        let pre = format!("encoder.{layer}");
        let xavier = (6.0 / (2 * d) as f64).sqrt();
        let proj = |p: &mut Params<T>, name: &str, rng: &mut R| {
            (
                p.uniform(format!("{pre}.attn.{name}.weight"), (d, d), xavier, rng),
                p.constant(format!("{pre}.attn.{name}.bias"), (1, d), 0.0),
            )
        };
        let q = proj(p, "q", rng);
        let k = proj(p, "k", rng);
        let v = proj(p, "v", rng);
        let bo = 1.0 / (d as f64).sqrt();
        let o = (
            p.uniform(format!("{pre}.attn.o.weight"), (d, d), bo, rng),
            p.constant(format!("{pre}.attn.o.bias"), (1, d), 0.0),
        );
        let ln1 = (p.constant(format!("{pre}.norm1.weight"), (1, d), 1.0), p.constant(format!("{pre}.norm1.bias"), (1, d), 0.0));
        let ln2 = (p.constant(format!("{pre}.norm2.weight"), (1, d), 1.0), p.constant(format!("{pre}.norm2.bias"), (1, d), 0.0));
        let b2 = 1.0 / (ff as f64).sqrt();
        let ff1 = (
            p.uniform(format!("{pre}.ff1.weight"), (d, ff), bo, rng),
            p.uniform(format!("{pre}.ff1.bias"), (1, ff), bo, rng),
        );
        let ff2 = (
            p.uniform(format!("{pre}.ff2.weight"), (ff, d), b2, rng),
            p.uniform(format!("{pre}.ff2.bias"), (1, d), b2, rng),
        );
        LayerIds { ln1, q, k, v, o, ln2, ff1, ff2 }
    }
}

pub(crate) struct LayerCache<T> {
    /// Rows of the input that this layer updates; `None` means all rows.
    query_rows: Option<Vec<usize>>,
    ln1: LayerNormCache<T>,
    h: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    drop1: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    h2: Array2<T>,
    u: Array2<T>,
    drop2: Option<Array2<T>>,
}

impl<T> LayerCache<T> {
    fn updated_rows(&self, packed: &Packed, b: usize) -> std::ops::Range<usize> {
        match self.query_rows {
            Some(_) => b..b + 1,
            None => packed.range(b),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
    p: &Params<T>,
    ids: &LayerIds,
    x: &Array2<T>,
    packed: &Packed,
    query_only: bool,
    heads: usize,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> (Array2<T>, LayerCache<T>) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let query_rows = query_only.then(|| packed.query_rows());

    let (h, ln1) = layer_norm(&x.view(), &p[ids.ln1.0], &p[ids.ln1.1]);
    let k = linear(&h.view(), &p[ids.k.0], &p[ids.k.1]);
    let v = linear(&h.view(), &p[ids.v.0], &p[ids.v.1]);
    let (x_r, q) = match &query_rows {
        Some(r) => {
            let h_r = rows(&h, r);
            (rows(x, r), linear(&h_r.view(), &p[ids.q.0], &p[ids.q.1]))
        }
        None => (x.clone(), linear(&h.view(), &p[ids.q.0], &p[ids.q.1])),
    };

    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(packed.batch() * heads);
    for b in 0..packed.batch() {
        let kv = packed.range(b);
        let qr = match query_rows {
            Some(_) => b..b + 1,
            None => kv.clone(),
        };
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let qb = q.slice(s![qr.clone(), cols.clone()]);
            let kb = k.slice(s![kv.clone(), cols.clone()]);
            let vb = v.slice(s![kv.clone(), cols.clone()]);
            let mut scores = qb.dot(&kb.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let mut out = ctx.slice_mut(s![qr.clone(), cols]);
            general_mat_mul(T::one(), &scores, &vb, T::zero(), &mut out);
            probs.push(scores);
        }
    }

    let mut a = linear(&ctx.view(), &p[ids.o.0], &p[ids.o.1]);
    let drop1 = dropout_mask(a.dim(), dropout, rng.as_deref_mut());
    if let Some(m) = &drop1 {
        a *= m;
    }
    let x1 = x_r + &a;
    let (h2, ln2) = layer_norm(&x1.view(), &p[ids.ln2.0], &p[ids.ln2.1]);
    let u = linear(&h2.view(), &p[ids.ff1.0], &p[ids.ff1.1]);
    let f = u.mapv(|v| v.max(T::zero()));
    let mut y = linear(&f.view(), &p[ids.ff2.0], &p[ids.ff2.1]);
    let drop2 = dropout_mask(y.dim(), dropout, rng);
    if let Some(m) = &drop2 {
        y *= m;
    }
    let out = x1 + &y;
    let cache = LayerCache { query_rows, ln1, h, q, k, v, probs, ctx, drop1, ln2, h2, u, drop2 };
    (out, cache)
}

/// Accumulates parameter gradients into `g` and returns the gradient with
/// respect to the full layer input.
pub(crate) fn backward<T: Scalar>(
    p: &Params<T>,
    g: &mut Params<T>,
    ids: &LayerIds,
    c: &LayerCache<T>,
    packed: &Packed,
    heads: usize,
    dout: &Array2<T>,
) -> Array2<T> {
    let n = packed.tokens.len();
    let d = dout.ncols();
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());

    // feed-forward block
    let mut dy = dout.clone();
    if let Some(m) = &c.drop2 {
        dy *= m;
    }
    let f = c.u.mapv(|v| v.max(T::zero()));
    let (dw, db) = g.pair_mut(ids.ff2.0, ids.ff2.1);
    let mut du = linear_backward(&f.view(), &p[ids.ff2.0], &dy, dw, db);
    ndarray::Zip::from(&mut du).and(&c.u).for_each(|d, &u| {
        if u <= T::zero() {
            *d = T::zero();
        }
    });
    let (dw, db) = g.pair_mut(ids.ff1.0, ids.ff1.1);
    let dh2 = linear_backward(&c.h2.view(), &p[ids.ff1.0], &du, dw, db);
    let (dg, dbt) = g.pair_mut(ids.ln2.0, ids.ln2.1);
    let dx1 = dout + &layer_norm_backward(&c.ln2, &p[ids.ln2.0], &dh2, dg, dbt);

    // attention block
    let mut da = dx1.clone();
    if let Some(m) = &c.drop1 {
        da *= m;
    }
    let (dw, db) = g.pair_mut(ids.o.0, ids.o.1);
    let dctx = linear_backward(&c.ctx.view(), &p[ids.o.0], &da, dw, db);

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    let mut pi = 0;
    for b in 0..packed.batch() {
        let kv = packed.range(b);
        let qr = c.updated_rows(packed, b);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let probs = &c.probs[pi];
            pi += 1;
            let dctx_b = dctx.slice(s![qr.clone(), cols.clone()]);
            let vb = c.v.slice(s![kv.clone(), cols.clone()]);
            let kb = c.k.slice(s![kv.clone(), cols.clone()]);
            let qb = c.q.slice(s![qr.clone(), cols.clone()]);
            let mut dprobs = dctx_b.dot(&vb.t());
            {
                let mut dvb = dv.slice_mut(s![kv.clone(), cols.clone()]);
                general_mat_mul(T::one(), &probs.t(), &dctx_b, T::one(), &mut dvb);
            }
            let inner = (&dprobs * probs).sum_axis(Axis(1));
            for ((mut row, prow), &s) in dprobs.rows_mut().into_iter().zip(probs.rows()).zip(&inner) {
                ndarray::Zip::from(&mut row).and(&prow).for_each(|dp, &pv| *dp = pv * (*dp - s) * scale);
            }
            let mut dqb = dq.slice_mut(s![qr.clone(), cols.clone()]);
            general_mat_mul(T::one(), &dprobs, &kb, T::zero(), &mut dqb);
            let mut dkb = dk.slice_mut(s![kv.clone(), cols]);
            general_mat_mul(T::one(), &dprobs.t(), &qb, T::one(), &mut dkb);
        }
    }

    let mut dh = Array2::zeros((n, d));
    let (dw, db) = g.pair_mut(ids.q.0, ids.q.1);
    match &c.query_rows {
        Some(r) => {
            let h_r = rows(&c.h, r);
            let dh_r = linear_backward(&h_r.view(), &p[ids.q.0], &dq, dw, db);
            scatter_add_rows(&mut dh, r, &dh_r);
        }
        None => dh += &linear_backward(&c.h.view(), &p[ids.q.0], &dq, dw, db),
    }
    let (dw, db) = g.pair_mut(ids.k.0, ids.k.1);
    dh += &linear_backward(&c.h.view(), &p[ids.k.0], &dk, dw, db);
    let (dw, db) = g.pair_mut(ids.v.0, ids.v.1);
    dh += &linear_backward(&c.h.view(), &p[ids.v.0], &dv, dw, db);

    let (dg, dbt) = g.pair_mut(ids.ln1.0, ids.ln1.1);
    let mut dx = layer_norm_backward(&c.ln1, &p[ids.ln1.0], &dh, dg, dbt);
    match &c.query_rows {
        Some(r) => scatter_add_rows(&mut dx, r, &dx1),
        None => dx += &dx1,
    }
    dx
}

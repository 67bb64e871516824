//! Stacked LSTM encoder, one sequence per sample, gate order i, f, g, o.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::layers::linear_backward;
use super::{Packed, ParamId, Params, Scalar};

#[derive(Debug, Clone)]
pub(crate) struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

impl LstmIds {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(p: &mut Params<T>, layer: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        LstmIds {
            w_ih: p.uniform(format!("encoder.{layer}.lstm.w_ih"), (d, 4 * d), bound, rng),
            w_hh: p.uniform(format!("encoder.{layer}.lstm.w_hh"), (d, 4 * d), bound, rng),
            bias: p.uniform(format!("encoder.{layer}.lstm.bias"), (1, 4 * d), bound, rng),
        }
    }
}

pub(crate) struct LstmCache<T> {
    x: Array2<T>,
    /// Post-activation gates per token, `[i | f | g | o]`.
    gates: Array2<T>,
    c: Array2<T>,
    h: Array2<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn forward<T: Scalar>(p: &Params<T>, ids: &LstmIds, x: &Array2<T>, packed: &Packed) -> (Array2<T>, LstmCache<T>) {
    let d = x.ncols();
    let mut gates = x.dot(&p[ids.w_ih]);
    gates += &p[ids.bias].row(0);
    let mut c = Array2::zeros((x.nrows(), d));
    let mut h = Array2::zeros((x.nrows(), d));
    let w_hh = &p[ids.w_hh];
    for b in 0..packed.batch() {
        let mut h_prev = Array1::<T>::zeros(d);
        let mut c_prev = Array1::<T>::zeros(d);
        for t in packed.range(b) {
            let rec = h_prev.dot(w_hh);
            let mut g = gates.row_mut(t);
            g += &rec;
            for j in 0..4 * d {
                g[j] = if (2 * d..3 * d).contains(&j) { g[j].tanh() } else { sigmoid(g[j]) };
            }
            for j in 0..d {
                let cj = g[d + j] * c_prev[j] + g[j] * g[2 * d + j];
                c[[t, j]] = cj;
                h[[t, j]] = g[3 * d + j] * cj.tanh();
            }
            h_prev = h.row(t).to_owned();
            c_prev = c.row(t).to_owned();
        }
    }
    (h.clone(), LstmCache { x: x.clone(), gates, c, h })
}

/// Backpropagation through time; `dh_out` is the gradient on every hidden
/// state of this layer.
pub(crate) fn backward<T: Scalar>(
    p: &Params<T>,
    g: &mut Params<T>,
    ids: &LstmIds,
    cache: &LstmCache<T>,
    packed: &Packed,
    dh_out: &Array2<T>,
) -> Array2<T> {
    let d = dh_out.ncols();
    let w_hh = &p[ids.w_hh];
    let mut dpre = Array2::<T>::zeros(cache.gates.raw_dim());
    for b in 0..packed.batch() {
        let range = packed.range(b);
        let mut dh_next = Array1::<T>::zeros(d);
        let mut dc_next = Array1::<T>::zeros(d);
        for t in range.clone().rev() {
            let gt = cache.gates.row(t);
            let first = t == range.start;
            let mut row = dpre.row_mut(t);
            for j in 0..d {
                let (i, f, gg, o) = (gt[j], gt[d + j], gt[2 * d + j], gt[3 * d + j]);
                let c = cache.c[[t, j]];
                let c_prev = if first { T::zero() } else { cache.c[[t - 1, j]] };
                let tc = c.tanh();
                let dh = dh_out[[t, j]] + dh_next[j];
                let dc = dc_next[j] + dh * o * (T::one() - tc * tc);
                row[j] = dc * gg * i * (T::one() - i);
                row[d + j] = dc * c_prev * f * (T::one() - f);
                row[2 * d + j] = dc * i * (T::one() - gg * gg);
                row[3 * d + j] = dh * tc * o * (T::one() - o);
                dc_next[j] = dc * f;
            }
            dh_next = row.dot(&w_hh.t());
            if !first {
                let h_prev = cache.h.row(t - 1);
                let mut dw = g[ids.w_hh].view_mut();
                for (k, &hk) in h_prev.iter().enumerate() {
                    let mut wrow = dw.row_mut(k);
                    wrow.scaled_add(hk, &row);
                }
            }
        }
    }
    let (dw, db) = g.pair_mut(ids.w_ih, ids.bias);
    linear_backward(&cache.x.view(), &p[ids.w_ih], &dpre, dw, db)
}

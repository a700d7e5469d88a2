//! Factored self-attention over `(G, T, C, D)` tensors and the transformer
//! layer built on it.
//!
//! Temporal weights come from a small MLP over the normalized lag
//! `Δ = (t - t') / ω` (optionally with a one-hot of the target channel), so
//! they never look at the values in `X`. Channel weights are a softmax over
//! the rows of a learned `C x C` affinity `ψ`. The output at `(t, c)` is
//! `Σ_{t'} Σ_{c'} W_time[t, c, t'] W_chan[c, c'] X[t', c']`.

use std::cell::Cell;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::ops::{softmax_backward, softmax_in_place};
use crate::diff::{Dense, Gradients, Init, ParamRef, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// ω, in weeks.
    pub lookback_window: usize,
    /// τ, shared by the temporal and channel softmaxes.
    pub temperature: f64,
    pub channel_mixing: bool,
    /// Feed the target channel's one-hot to the temporal score MLP.
    pub attention_by_channel: bool,
    /// Hidden width of the temporal score MLP.
    pub hidden: usize,
    /// One output projection per channel instead of a shared one.
    pub out_proj_per_channel: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            lookback_window: 52,
            temperature: 1.0,
            channel_mixing: false,
            attention_by_channel: true,
            hidden: 128,
            out_proj_per_channel: false,
        }
    }
}

thread_local! {
    static SCORE_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Number of score-function evaluations (temporal MLP rows plus channel
/// affinity entries) performed on this thread since the last reset.
pub fn score_evaluations() -> usize {
    SCORE_EVALS.with(|c| c.get())
}

pub fn reset_score_evaluations() {
    SCORE_EVALS.with(|c| c.set(0));
}

fn count_scores(n: usize) {
    SCORE_EVALS.with(|c| c.set(c.get() + n));
}

/// Row-wise softmax of `ψ / τ`.
pub fn channel_weights<T: Scalar>(psi: ArrayView2<T>, temperature: f64) -> Array2<T> {
    count_scores(psi.len());
    let mut w = psi.to_owned();
    for row in w.rows_mut() {
        softmax_in_place(row, T::of(temperature));
    }
    w
}

/// Applies the causal lookback mask to raw scores `(T, T', C)` and
/// normalizes over `t'`, returning `W_time` as `(T, C, T')`. Rows with
/// nothing to attend to are all zero.
pub fn temporal_weights<T: Scalar>(scores: &Array3<T>, lookback: usize, temperature: f64) -> Array3<T> {
    let (t_len, _, c_len) = scores.dim();
    let mut w = Array3::from_elem((t_len, c_len, t_len), T::neg_infinity());
    for t in 0..t_len {
        for c in 0..c_len {
            for tp in 0..t_len {
                if tp <= t && t < tp + lookback {
                    w[[t, c, tp]] = scores[[t, tp, c]];
                }
            }
            softmax_in_place(w.slice_mut(s![t, c, ..]), T::of(temperature));
        }
    }
    w
}

#[derive(Debug, Clone)]
pub struct FactoredAttention {
    pub cfg: AttentionConfig,
    pub channels: usize,
    pub width: usize,
    pub time_hidden: Dense,
    pub time_out: Dense,
    pub psi: ParamRef,
    pub out_proj: Vec<Dense>,
}

#[derive(Debug, Clone)]
struct ScoreCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Array4<T>,
    mixed: Option<Array4<T>>,
    chan: Option<Array2<T>>,
    /// `(C, T, T')`.
    time: Array3<T>,
    pre_proj: Array4<T>,
    scores: ScoreCache<T>,
}

impl FactoredAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        assert!(cfg.lookback_window >= 1, "lookback window must be >= 1");
        assert!(cfg.temperature > 0.0, "temperature must be positive");
        let n_in = if cfg.attention_by_channel { 1 + channels } else { 1 };
        let time_hidden = Dense::new(store, &format!("{name}/time_mlp0"), n_in, cfg.hidden, true, Init::Glorot, rng);
        let time_out = Dense::new(store, &format!("{name}/time_mlp1"), cfg.hidden, 1, true, Init::Glorot, rng);
        let psi = store.add(&format!("{name}/channel_affinity"), channels, channels, Init::Identity, true, rng);
        let n_proj = if cfg.out_proj_per_channel { channels } else { 1 };
        let out_proj = (0..n_proj)
            .map(|i| {
                let suffix = if n_proj == 1 { String::new() } else { format!("{i}") };
                Dense::new(store, &format!("{name}/out_proj{suffix}"), width, width, true, Init::Glorot, rng)
            })
            .collect();
        Self {
            cfg,
            channels,
            width,
            time_hidden,
            time_out,
            psi,
            out_proj,
        }
    }

    fn score_inputs<T: Scalar>(&self, deltas: &[f64]) -> Array2<T> {
        let c = self.channels;
        if self.cfg.attention_by_channel {
            let mut m = Array2::zeros((deltas.len() * c, 1 + c));
            for (i, d) in deltas.iter().enumerate() {
                for ch in 0..c {
                    m[[i * c + ch, 0]] = T::of(*d);
                    m[[i * c + ch, 1 + ch]] = T::one();
                }
            }
            m
        } else {
            Array2::from_shape_fn((deltas.len(), 1), |(i, _)| T::of(deltas[i]))
        }
    }

    /// Evaluates the score MLP at each Δ; returns `(len(deltas), C)`.
    fn scores_at<T: Scalar>(&self, p: &ParamStore<T>, deltas: &[f64]) -> (Array2<T>, ScoreCache<T>) {
        let input = self.score_inputs::<T>(deltas);
        count_scores(input.nrows());
        let mut hidden = self.time_hidden.forward(p, input.view());
        hidden.mapv_inplace(|v| v.max(T::zero()));
        let raw = self.time_out.forward(p, hidden.view());
        let c = self.channels;
        let out = if self.cfg.attention_by_channel {
            raw.into_shape_with_order((deltas.len(), c)).unwrap()
        } else {
            let col = raw.column(0).to_owned();
            Array2::from_shape_fn((deltas.len(), c), |(i, _)| col[i])
        };
        (out, ScoreCache { input, hidden })
    }

    fn lag_deltas(&self, weeks: usize) -> Vec<f64> {
        let n = self.cfg.lookback_window.min(weeks);
        let w = self.cfg.lookback_window as f64;
        (0..n).map(|l| l as f64 / w).collect()
    }

    /// Raw scores `s[t, t', c]` for every ordered pair of weeks, including
    /// future ones (which the mask later removes).
    pub fn temporal_scores<T: Scalar>(&self, p: &ParamStore<T>, weeks: usize) -> Array3<T> {
        let w = self.cfg.lookback_window as f64;
        // Distinct lags t - t' in -(T-1)..=(T-1).
        let deltas: Vec<f64> = (0..2 * weeks - 1)
            .map(|k| (k as f64 - (weeks as f64 - 1.0)) / w)
            .collect();
        let (table, _) = self.scores_at(p, &deltas);
        Array3::from_shape_fn((weeks, weeks, self.channels), |(t, tp, c)| {
            table[[t + weeks - 1 - tp, c]]
        })
    }

    /// `W_time` as `(C, T, T')`, built from the per-lag score table.
    fn time_weights<T: Scalar>(&self, lag_scores: &Array2<T>, weeks: usize) -> Array3<T> {
        let n_lags = lag_scores.nrows();
        let tau = T::of(self.cfg.temperature);
        let mut w = Array3::zeros((self.channels, weeks, weeks));
        for c in 0..self.channels {
            for t in 0..weeks {
                let lo = (t + 1).saturating_sub(n_lags);
                let mut row = w.slice_mut(s![c, t, ..]);
                row.fill(T::neg_infinity());
                for tp in lo..=t {
                    row[tp] = lag_scores[[t - tp, c]];
                }
                softmax_in_place(row, tau);
            }
        }
        w
    }

    /// `W_time` as `(T, C, T')` for inspection.
    pub fn time_weights_for<T: Scalar>(&self, p: &ParamStore<T>, weeks: usize) -> Array3<T> {
        let (lag, _) = self.scores_at(p, &self.lag_deltas(weeks));
        self.time_weights(&lag, weeks).permuted_axes([1, 0, 2]).to_owned()
    }

    pub fn channel_weights_for<T: Scalar>(&self, p: &ParamStore<T>) -> Array2<T> {
        channel_weights(p.mat(self.psi), self.cfg.temperature)
    }

    fn mix<T: Scalar>(x: ArrayView4<T>, chan: &Array2<T>) -> Array4<T> {
        let c_len = chan.nrows();
        let mut z = Array4::zeros(x.raw_dim());
        for c in 0..c_len {
            let mut zc = z.slice_mut(s![.., .., c, ..]);
            for cp in 0..c_len {
                zc.scaled_add(chan[[c, cp]], &x.slice(s![.., .., cp, ..]));
            }
        }
        z
    }

    fn project<T: Scalar>(&self, p: &ParamStore<T>, o: &Array4<T>) -> Array4<T> {
        let (g, t, c, d) = o.dim();
        if self.out_proj.len() == 1 {
            let flat = o.view().into_shape_with_order((g * t * c, d)).unwrap();
            self.out_proj[0]
                .forward(p, flat)
                .into_shape_with_order((g, t, c, d))
                .unwrap()
        } else {
            let mut y = Array4::zeros((g, t, c, d));
            for ci in 0..c {
                let xc = o.slice(s![.., .., ci, ..]).to_owned().into_shape_with_order((g * t, d)).unwrap();
                let yc = self.out_proj[ci].forward(p, xc.view());
                y.slice_mut(s![.., .., ci, ..])
                    .assign(&yc.into_shape_with_order((g, t, d)).unwrap());
            }
            y
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array4<T> {
        self.forward_cached(p, x).0
    }

    pub fn forward_cached<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> (Array4<T>, AttentionCache<T>) {
        let (g_len, t_len, c_len, d) = x.dim();
        assert_eq!(c_len, self.channels, "channel count mismatch");
        assert_eq!(d, self.width, "width mismatch");
        let (lag, scores) = self.scores_at(p, &self.lag_deltas(t_len));
        let time = self.time_weights(&lag, t_len);
        let (mixed, chan) = if self.cfg.channel_mixing {
            let chan = self.channel_weights_for(p);
            (Some(Self::mix(x, &chan)), Some(chan))
        } else {
            (None, None)
        };
        let mut o = Array4::zeros((g_len, t_len, c_len, d));
        {
            let z = match &mixed {
                Some(m) => m.view(),
                None => x.view(),
            };
            for g in 0..g_len {
                for c in 0..c_len {
                    let mut oc = o.slice_mut(s![g, .., c, ..]);
                    general_mat_mul(T::one(), &time.index_axis(Axis(0), c), &z.slice(s![g, .., c, ..]), T::zero(), &mut oc);
                }
            }
        }
        let y = self.project(p, &o);
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                mixed,
                chan,
                time,
                pre_proj: o,
                scores,
            },
        )
    }

    /// Accumulates parameter gradients and returns `dL/dX`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &AttentionCache<T>,
        dy: ArrayView4<T>,
    ) -> Array4<T> {
        let (g_len, t_len, c_len, d) = dy.dim();
        // Output projection.
        let d_o = if self.out_proj.len() == 1 {
            let flat_in = cache.pre_proj.view().into_shape_with_order((g_len * t_len * c_len, d)).unwrap();
            let dy_flat = dy.as_standard_layout();
            let dy_flat = dy_flat.view().into_shape_with_order((g_len * t_len * c_len, d)).unwrap();
            self.out_proj[0]
                .backward(p, grads, flat_in, dy_flat, true)
                .unwrap()
                .into_shape_with_order((g_len, t_len, c_len, d))
                .unwrap()
        } else {
            let mut d_o = Array4::zeros((g_len, t_len, c_len, d));
            for ci in 0..c_len {
                let xin = cache.pre_proj.slice(s![.., .., ci, ..]).to_owned().into_shape_with_order((g_len * t_len, d)).unwrap();
                let dyc = dy.slice(s![.., .., ci, ..]).to_owned().into_shape_with_order((g_len * t_len, d)).unwrap();
                let dx = self.out_proj[ci].backward(p, grads, xin.view(), dyc.view(), true).unwrap();
                d_o.slice_mut(s![.., .., ci, ..])
                    .assign(&dx.into_shape_with_order((g_len, t_len, d)).unwrap());
            }
            d_o
        };

        // Temporal contraction.
        let z = cache.mixed.as_ref().map_or(cache.x.view(), |m| m.view());
        let mut dz = Array4::zeros((g_len, t_len, c_len, d));
        let mut d_time = Array3::<T>::zeros((c_len, t_len, t_len));
        for c in 0..c_len {
            let wt = cache.time.index_axis(Axis(0), c);
            let mut dwt = d_time.index_axis_mut(Axis(0), c);
            for g in 0..g_len {
                let doc = d_o.slice(s![g, .., c, ..]);
                general_mat_mul(T::one(), &doc, &z.slice(s![g, .., c, ..]).t(), T::one(), &mut dwt);
                let mut dzc = dz.slice_mut(s![g, .., c, ..]);
                general_mat_mul(T::one(), &wt.t(), &doc, T::zero(), &mut dzc);
            }
        }

        // Softmax over t', folded back onto the lag table.
        let n_lags = cache.scores.input.nrows() / if self.cfg.attention_by_channel { c_len } else { 1 };
        let tau = T::of(self.cfg.temperature);
        let mut d_lag = Array2::<T>::zeros((n_lags, c_len));
        for c in 0..c_len {
            for t in 0..t_len {
                let lo = (t + 1).saturating_sub(n_lags);
                let w = cache.time.slice(s![c, t, lo..=t]);
                let dw = d_time.slice(s![c, t, lo..=t]);
                let ds = softmax_backward(w, dw, tau);
                for (k, tp) in (lo..=t).enumerate() {
                    d_lag[[t - tp, c]] += ds[k];
                }
            }
        }
        let d_raw = if self.cfg.attention_by_channel {
            d_lag.into_shape_with_order((n_lags * c_len, 1)).unwrap()
        } else {
            d_lag.sum_axis(Axis(1)).insert_axis(Axis(1))
        };
        let mut d_hidden = self
            .time_out
            .backward(p, grads, cache.scores.hidden.view(), d_raw.view(), true)
            .unwrap();
        Zip::from(&mut d_hidden)
            .and(&cache.scores.hidden)
            .for_each(|dh, &h| {
                if h <= T::zero() {
                    *dh = T::zero()
                }
            });
        self.time_hidden
            .backward(p, grads, cache.scores.input.view(), d_hidden.view(), false);

        // Channel mixing.
        match (&cache.chan, self.cfg.channel_mixing) {
            (Some(chan), true) => {
                let mut dx = Array4::zeros((g_len, t_len, c_len, d));
                let mut d_chan = Array2::<T>::zeros((c_len, c_len));
                for c in 0..c_len {
                    let dzc = dz.slice(s![.., .., c, ..]);
                    for cp in 0..c_len {
                        dx.slice_mut(s![.., .., cp, ..]).scaled_add(chan[[c, cp]], &dzc);
                        let xc = cache.x.slice(s![.., .., cp, ..]);
                        let dot: f64 = Zip::from(&dzc)
                            .and(&xc)
                            .fold(0.0, |acc, &a, &b| acc + a.f64() * b.f64());
                        d_chan[[c, cp]] = T::of(dot);
                    }
                }
                let mut d_psi = grads.mat_mut(self.psi);
                for c in 0..c_len {
                    let ds = softmax_backward(chan.row(c), d_chan.row(c), tau);
                    let mut row = d_psi.row_mut(c);
                    row += &ds;
                }
                dx
            }
            _ => dz,
        }
    }
}

/// One NNN transformer block: `X1 = X + attend(X)`, then
/// `X2 = X1 + FFN_c(X1[.., c, ..])` with a separate two-layer ReLU network
/// per channel. No normalization layers, no positional encoding.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attention: FactoredAttention,
    pub ffn: Vec<(Dense, Dense)>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    attention: AttentionCache<T>,
    x1: Array4<T>,
    hidden: Vec<Array2<T>>,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        channels: usize,
        width: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let attention = FactoredAttention::new(store, &format!("{name}/attn"), cfg, channels, width, rng);
        let ffn = (0..channels)
            .map(|c| {
                (
                    Dense::new(store, &format!("{name}/ffn{c}/0"), width, d_ff, true, Init::Glorot, rng),
                    Dense::new(store, &format!("{name}/ffn{c}/1"), d_ff, width, true, Init::Glorot, rng),
                )
            })
            .collect();
        Self { attention, ffn }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array4<T> {
        self.forward_cached(p, x).0
    }

    pub fn forward_cached<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> (Array4<T>, LayerCache<T>) {
        let (g, t, c_len, d) = x.dim();
        let (a, attention) = self.attention.forward_cached(p, x);
        let x1 = &x + &a;
        let mut out = x1.clone();
        let mut hidden = Vec::with_capacity(c_len);
        for (c, (l0, l1)) in self.ffn.iter().enumerate() {
            let xc = x1.slice(s![.., .., c, ..]).to_owned().into_shape_with_order((g * t, d)).unwrap();
            let mut h = l0.forward(p, xc.view());
            h.mapv_inplace(|v| v.max(T::zero()));
            let f = l1.forward(p, h.view()).into_shape_with_order((g, t, d)).unwrap();
            let mut oc = out.slice_mut(s![.., .., c, ..]);
            oc += &f;
            hidden.push(h);
        }
        (out, LayerCache { attention, x1, hidden })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &LayerCache<T>,
        dy: ArrayView4<T>,
    ) -> Array4<T> {
        let (g, t, _, d) = dy.dim();
        let mut dx1 = dy.to_owned();
        for (c, (l0, l1)) in self.ffn.iter().enumerate() {
            let dyc = dy.slice(s![.., .., c, ..]).to_owned().into_shape_with_order((g * t, d)).unwrap();
            let h = &cache.hidden[c];
            let mut dh = l1.backward(p, grads, h.view(), dyc.view(), true).unwrap();
            Zip::from(&mut dh).and(h).for_each(|d, &v| {
                if v <= T::zero() {
                    *d = T::zero()
                }
            });
            let xc = cache.x1.slice(s![.., .., c, ..]).to_owned().into_shape_with_order((g * t, d)).unwrap();
            let dxc = l0.backward(p, grads, xc.view(), dh.view(), true).unwrap();
            let mut slot = dx1.slice_mut(s![.., .., c, ..]);
            slot += &dxc.into_shape_with_order((g, t, d)).unwrap();
        }
        let da = self.attention.backward(p, grads, &cache.attention, dx1.view());
        dx1 + da
    }
}

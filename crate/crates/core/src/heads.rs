//! Prediction heads applied to the transformed `(G, T, C, D)` tensor.
//!
//! The sales head is additive over channels. Each channel's contribution is
//! its volume `V = ‖x‖` times a conversion probability read off the
//! direction `x / V`, so volume enters linearly and the direction alone
//! decides how well that volume converts. The search head predicts next
//! week's search embedding. Pass-through heads map media channels back to
//! their native width and are never trained.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use crate::diff::ops::{sigmoid, softplus};
use crate::diff::{Dense, Gradients, Init, MlpCache, MlpResnet, ParamRef, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ChannelKind, ChannelSpec};

/// Per-channel conversion head: `V · σ(P(dir ‖ geo))`, or on the log scale
/// `V - softplus(P(dir ‖ geo))`.
#[derive(Debug, Clone)]
pub struct ChannelHead {
    pub channel: usize,
    pub use_geo: bool,
    pub mlp: MlpResnet,
}

#[derive(Debug, Clone)]
struct ChannelCache<T> {
    mlp: MlpCache<T>,
    /// Unit directions `(G·T, D)`.
    dir: Array2<T>,
    volume: Array1<T>,
    score: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct SalesHeadCache<T> {
    channels: Vec<ChannelCache<T>>,
}

fn directions<T: Scalar>(x: ArrayView3<T>) -> (Array2<T>, Array1<T>) {
    let (g, t, d) = x.dim();
    let flat = x.as_standard_layout().into_owned().into_shape_with_order((g * t, d)).unwrap();
    let mut dir = flat;
    let mut vol = Array1::zeros(g * t);
    for (i, mut row) in dir.rows_mut().into_iter().enumerate() {
        let n = T::of(crate::scalar::norm(row.iter().copied()));
        vol[i] = n;
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(T::zero());
        }
    }
    (dir, vol)
}

fn with_geo<T: Scalar>(dir: &Array2<T>, geos: usize, weeks: usize) -> Array2<T> {
    let d = dir.ncols();
    let mut m = Array2::zeros((geos * weeks, d + geos));
    m.slice_mut(s![.., ..d]).assign(dir);
    for g in 0..geos {
        for t in 0..weeks {
            m[[g * weeks + t, d + g]] = T::one();
        }
    }
    m
}

impl ChannelHead {
    /// Contribution `(G, T)` of this channel given its `(G, T, D)` slice.
    /// `geo_mult` is the per-geo multiplier, applied only when `use_geo`.
    pub fn predict<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: ArrayView3<T>,
        geo_mult: Option<ArrayView1<T>>,
        log_scale: bool,
    ) -> Array2<T> {
        self.forward_cached(p, x, geo_mult, log_scale).0
    }

    fn forward_cached<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: ArrayView3<T>,
        geo_mult: Option<ArrayView1<T>>,
        log_scale: bool,
    ) -> (Array2<T>, ChannelCache<T>) {
        let (g_len, t_len, _) = x.dim();
        let (dir, volume) = directions(x);
        let input = if self.use_geo { with_geo(&dir, g_len, t_len) } else { dir.clone() };
        let (z, mlp) = self.mlp.forward_cached(p, input.view());
        let score = z.column(0).to_owned();
        let mut out = Array2::zeros((g_len, t_len));
        for g in 0..g_len {
            let m = match (self.use_geo, geo_mult) {
                (true, Some(gm)) => gm[g],
                _ => {
                    if log_scale {
                        T::zero()
                    } else {
                        T::one()
                    }
                }
            };
            for t in 0..t_len {
                let i = g * t_len + t;
                out[[g, t]] = if log_scale {
                    volume[i] - softplus(score[i]) + m
                } else {
                    volume[i] * sigmoid(score[i]) * m.abs()
                };
            }
        }
        (out, ChannelCache { mlp, dir, volume, score })
    }

    /// Returns `dL/dx` for the slice and accumulates `dL/d geo_mult` into `d_geo`.
    #[allow(clippy::too_many_arguments)]
    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &ChannelCache<T>,
        dy: &Array2<T>,
        geo_mult: Option<ArrayView1<T>>,
        log_scale: bool,
        d_geo: &mut Array1<T>,
    ) -> Array3<T> {
        let (g_len, t_len) = dy.dim();
        let d = cache.dir.ncols();
        let n = g_len * t_len;
        let mut dz = Array2::zeros((n, 1));
        let mut dv = Array1::zeros(n);
        for g in 0..g_len {
            let m = match (self.use_geo, geo_mult) {
                (true, Some(gm)) => gm[g],
                _ => T::one(),
            };
            let mut dm = 0.0;
            for t in 0..t_len {
                let i = g * t_len + t;
                let up = dy[[g, t]];
                let sg = sigmoid(cache.score[i]);
                if log_scale {
                    dz[[i, 0]] = -up * sg;
                    dv[i] = up;
                    dm += up.f64();
                } else {
                    let v = cache.volume[i];
                    dz[[i, 0]] = up * v * m.abs() * sg * (T::one() - sg);
                    dv[i] = up * sg * m.abs();
                    dm += (up * v * sg).f64() * m.signum().f64();
                }
            }
            if self.use_geo && geo_mult.is_some() {
                d_geo[g] += T::of(dm);
            }
        }
        let d_in = self.mlp.backward(p, grads, &cache.mlp, dz.view(), true).unwrap();
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let v = cache.volume[i];
            if v <= T::zero() {
                continue;
            }
            let dir = cache.dir.row(i);
            let ddir = d_in.slice(s![i, ..d]);
            let proj = dir.dot(&ddir);
            let mut row = dx.row_mut(i);
            for k in 0..d {
                row[k] = dir[k] * dv[i] + (ddir[k] - dir[k] * proj) / v;
            }
        }
        dx.into_shape_with_order((g_len, t_len, d)).unwrap()
    }
}

/// Additive multi-channel sales head.
#[derive(Debug, Clone)]
pub struct SalesHead {
    pub heads: Vec<ChannelHead>,
    /// `(1, G)` per-geo multiplier, present when some channel uses geo.
    pub geo_mult: Option<ParamRef>,
    pub geos: usize,
    pub log_scale: bool,
}

impl SalesHead {
    /// `geo_channel` marks the channel (normally search) whose head sees the
    /// geo one-hot and carries the per-geo multiplier.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels_to_use: &[usize],
        geo_channel: Option<usize>,
        geos: usize,
        width: usize,
        n_layers: usize,
        head_width: usize,
        log_scale: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut heads = Vec::with_capacity(channels_to_use.len());
        for &c in channels_to_use {
            let use_geo = Some(c) == geo_channel;
            let d_in = if use_geo { width + geos } else { width };
            let mlp = MlpResnet::new(store, &format!("{name}/ch{c}"), d_in, n_layers, head_width, false, Some(1), rng)?;
            heads.push(ChannelHead { channel: c, use_geo, mlp });
        }
        let geo_mult = heads
            .iter()
            .any(|h| h.use_geo)
            .then(|| {
                // Multiplicative in linear mode, an additive offset on the log scale.
                let init = if log_scale { Init::Zeros } else { Init::Ones };
                store.add(&format!("{name}/geo_mult"), 1, geos, init, true, rng)
            });
        Ok(Self {
            heads,
            geo_mult,
            geos,
            log_scale,
        })
    }

    fn geo<'a, T: Scalar>(&self, p: &'a ParamStore<T>) -> Option<ArrayView1<'a, T>> {
        self.geo_mult.map(|r| p.vec(r))
    }

    /// Per-channel contributions, in `heads` order.
    pub fn contributions<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Vec<Array2<T>> {
        self.heads
            .iter()
            .map(|h| h.predict(p, x.index_axis(Axis(2), h.channel), self.geo(p), self.log_scale))
            .collect()
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array2<T> {
        let (g, t, _, _) = x.dim();
        self.contributions(p, x)
            .into_iter()
            .fold(Array2::zeros((g, t)), |acc, c| acc + c)
    }

    pub fn forward_cached<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> (Array2<T>, SalesHeadCache<T>) {
        let (g, t, _, _) = x.dim();
        let mut total = Array2::zeros((g, t));
        let mut channels = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (y, c) = h.forward_cached(p, x.index_axis(Axis(2), h.channel), self.geo(p), self.log_scale);
            total += &y;
            channels.push(c);
        }
        (total, SalesHeadCache { channels })
    }

    /// Returns `dL/dX` over the full `(G, T, C, D)` input.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &SalesHeadCache<T>,
        dy: &Array2<T>,
        shape: (usize, usize, usize, usize),
    ) -> Array4<T> {
        let mut dx = Array4::zeros(shape);
        let mut d_geo = Array1::zeros(self.geos);
        for (h, c) in self.heads.iter().zip(&cache.channels) {
            let dxc = h.backward(p, grads, c, dy, self.geo(p), self.log_scale, &mut d_geo);
            let mut slot = dx.index_axis_mut(Axis(2), h.channel);
            slot += &dxc;
        }
        if let Some(r) = self.geo_mult {
            let mut g = grads.vec_mut(r);
            g += &d_geo;
        }
        dx
    }
}

/// Predicts the next week's search embedding from the concatenated slices
/// of `inputs`.
#[derive(Debug, Clone)]
pub struct SearchHead {
    pub inputs: Vec<usize>,
    pub mlp: MlpResnet,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct SearchHeadCache<T> {
    mlp: MlpCache<T>,
}

impl SearchHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: &[usize],
        width: usize,
        n_layers: usize,
        head_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = MlpResnet::new(store, name, inputs.len() * width, n_layers, head_width, false, Some(width), rng)?;
        Ok(Self {
            inputs: inputs.to_vec(),
            mlp,
            width,
        })
    }

    fn gather<T: Scalar>(&self, x: ArrayView4<T>) -> Array2<T> {
        let (g, t, _, d) = x.dim();
        let mut m = Array2::zeros((g * t, self.inputs.len() * d));
        for (k, &c) in self.inputs.iter().enumerate() {
            let slice = x.index_axis(Axis(2), c);
            let slice = slice.as_standard_layout();
            let flat = slice.view().into_shape_with_order((g * t, d)).unwrap();
            m.slice_mut(s![.., k * d..(k + 1) * d]).assign(&flat);
        }
        m
    }

    /// `(G, T, D)`: entry `t` is the prediction for week `t + 1`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array3<T> {
        self.forward_cached(p, x).0
    }

    pub fn forward_cached<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> (Array3<T>, SearchHeadCache<T>) {
        let (g, t, _, d) = x.dim();
        let input = self.gather(x);
        let (y, mlp) = self.mlp.forward_cached(p, input.view());
        (y.into_shape_with_order((g, t, d)).unwrap(), SearchHeadCache { mlp })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &SearchHeadCache<T>,
        dy: ArrayView3<T>,
        shape: (usize, usize, usize, usize),
    ) -> Array4<T> {
        let (g, t, c_len, d) = shape;
        let dy = dy.as_standard_layout();
        let dy = dy.view().into_shape_with_order((g * t, d)).unwrap();
        let d_in = self.mlp.backward(p, grads, &cache.mlp, dy, true).unwrap();
        let mut dx = Array4::zeros((g, t, c_len, d));
        for (k, &c) in self.inputs.iter().enumerate() {
            let block = d_in.slice(s![.., k * d..(k + 1) * d]).to_owned().into_shape_with_order((g, t, d)).unwrap();
            let mut slot = dx.index_axis_mut(Axis(2), c);
            slot += &block;
        }
        dx
    }
}

/// Frozen per-media-channel projections back to the native width.
#[derive(Debug, Clone)]
pub struct Passthrough {
    pub projections: Vec<(usize, usize, Dense)>,
}

impl Passthrough {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: &[ChannelSpec], width: usize, rng: &mut R) -> Self {
        let projections = channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ChannelKind::Media)
            .map(|(i, c)| {
                let dense = Dense::with_trainable(store, &format!("{name}/{}", c.name), width, c.native_dim, true, Init::Identity, false, rng);
                (i, c.native_dim, dense)
            })
            .collect();
        Self { projections }
    }

    /// Copy of `x` with every media slot replaced by its re-padded projection.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array4<T> {
        let (g, t, _, d) = x.dim();
        let mut out = x.to_owned();
        for (c, native, dense) in &self.projections {
            let slice = x.index_axis(Axis(2), *c).as_standard_layout().into_owned();
            let y = dense.forward(p, slice.view().into_shape_with_order((g * t, d)).unwrap());
            let mut slot = out.index_axis_mut(Axis(2), *c);
            slot.fill(T::zero());
            slot.slice_mut(s![.., .., ..*native])
                .assign(&y.into_shape_with_order((g, t, *native)).unwrap());
        }
        out
    }
}

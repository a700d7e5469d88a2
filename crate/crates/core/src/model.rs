//! The full network: masked input, a stack of transformer layers, and the
//! sales, search and pass-through heads, plus the composite training loss.

use ndarray::{s, Array2, Array3, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LayerCache, TransformerLayer};
use crate::diff::{Gradients, ParamStore};
use crate::error::{NnnError, Result};
use crate::heads::{Passthrough, SalesHead, SalesHeadCache, SearchHead, SearchHeadCache};
use crate::scalar::Scalar;
use crate::tensor::{CellMask, ChannelKind, ChannelSpec, MediaTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_ff: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub attention: AttentionConfig,
    /// Channels summed by the sales head.
    pub sales_channels: Vec<String>,
    /// Channel whose sales head sees the geo one-hot and multiplier.
    pub geo_channel: Option<String>,
    /// Organic channel predicted one week ahead.
    pub search_channel: String,
    /// Channels concatenated into the search head.
    pub search_inputs: Vec<String>,
    /// Weight of the sales loss against the search loss.
    pub balancing: f64,
    /// L1 coefficient λ on all trainable parameters.
    pub l1: f64,
    pub log_scale: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_ff: 512,
            head_layers: 5,
            head_width: 64,
            attention: AttentionConfig::default(),
            sales_channels: vec!["search".into(), "search_ads".into(), "youtube".into()],
            geo_channel: Some("search".into()),
            search_channel: "search".into(),
            search_inputs: vec!["search".into(), "youtube".into()],
            balancing: 0.5,
            l1: 10.0,
            log_scale: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sales_channels.is_empty() {
            return Err(NnnError::Config("sales head needs at least one channel".into()));
        }
        if self.search_inputs.is_empty() {
            return Err(NnnError::Config("search head needs at least one input channel".into()));
        }
        if !(0.0..=1.0).contains(&self.balancing) {
            return Err(NnnError::Config(format!("balancing coefficient {} outside [0, 1]", self.balancing)));
        }
        if self.l1 < 0.0 {
            return Err(NnnError::Config("L1 coefficient must be >= 0".into()));
        }
        if self.attention.lookback_window == 0 || self.attention.temperature <= 0.0 {
            return Err(NnnError::Config("lookback window >= 1 and temperature > 0 required".into()));
        }
        Ok(())
    }
}

fn index_of(channels: &[ChannelSpec], name: &str) -> Result<usize> {
    channels
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| NnnError::UnknownChannel(name.to_string()))
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub layers: Vec<TransformerLayer>,
    pub sales: SalesHead,
    pub search: SearchHead,
    pub passthrough: Passthrough,
    pub channels: Vec<ChannelSpec>,
    pub geos: usize,
    pub width: usize,
    pub target: usize,
    pub search_channel: usize,
}

/// A model: configuration, layout and parameter values.
#[derive(Debug, Clone)]
pub struct Nnn<T> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    /// `(G, T)` sales on the training scale (log sales when `log_scale`).
    pub sales: Array2<T>,
    /// `(G, T, D)`; entry `t` predicts the search embedding at `t + 1`.
    pub search: Array3<T>,
}

/// Which cells each loss term sees.
#[derive(Debug, Clone)]
pub struct LossSelection {
    pub sales_cells: CellMask,
    /// Search pairs `(t, t + 1)` are used for `t + 1 < search_weeks`.
    pub search_weeks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub sales: f64,
    pub search: f64,
    pub l1: f64,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    sales: SalesHeadCache<T>,
    search: Option<SearchHeadCache<T>>,
}

/// `v / ‖v‖ · ln ‖v‖` per vector; zero vectors stay zero.
pub fn log_scale_input<T: Scalar>(x: ArrayView4<T>) -> Array4<T> {
    let mut out = x.to_owned();
    let (g, t, c, _) = x.dim();
    for gi in 0..g {
        for ti in 0..t {
            for ci in 0..c {
                let mut v = out.slice_mut(s![gi, ti, ci, ..]);
                let n = crate::scalar::norm(v.iter().copied());
                if n > 0.0 {
                    let f = T::of(n.ln() / n);
                    v.mapv_inplace(|e| e * f);
                }
            }
        }
    }
    out
}

impl<T: Scalar> Nnn<T> {
    /// Builds a freshly initialized model for tensors with these channels.
    pub fn new(cfg: ModelConfig, channels: &[ChannelSpec], geos: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        crate::tensor::validate_channels(channels, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c_len = channels.len();
        let target = channels
            .iter()
            .position(|c| c.kind == ChannelKind::Target)
            .ok_or_else(|| NnnError::Config("no target channel".into()))?;
        let search_channel = index_of(channels, &cfg.search_channel)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("layer{i}"), cfg.attention.clone(), c_len, width, cfg.d_ff, &mut rng))
            .collect();
        let sales_idx = cfg
            .sales_channels
            .iter()
            .map(|n| index_of(channels, n))
            .collect::<Result<Vec<_>>>()?;
        if sales_idx.contains(&target) {
            return Err(NnnError::Config("the target channel cannot feed the sales head".into()));
        }
        let geo = cfg.geo_channel.as_deref().map(|n| index_of(channels, n)).transpose()?;
        let sales = SalesHead::new(
            &mut store,
            "sales_head",
            &sales_idx,
            geo,
            geos,
            width,
            cfg.head_layers,
            cfg.head_width,
            cfg.log_scale,
            &mut rng,
        )?;
        let search_idx = cfg
            .search_inputs
            .iter()
            .map(|n| index_of(channels, n))
            .collect::<Result<Vec<_>>>()?;
        let search = SearchHead::new(&mut store, "search_head", &search_idx, width, cfg.head_layers, cfg.head_width, &mut rng)?;
        let passthrough = Passthrough::new(&mut store, "passthrough", channels, width, &mut rng);
        Ok(Self {
            cfg,
            arch: Architecture {
                layers,
                sales,
                search,
                passthrough,
                channels: channels.to_vec(),
                geos,
                width,
                target,
                search_channel,
            },
            params: store,
        })
    }

    /// Rebuilds the layout for `cfg` and loads `params` into it.
    pub fn from_parts(cfg: ModelConfig, channels: &[ChannelSpec], geos: usize, width: usize, params: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(cfg, channels, geos, width)?;
        m.params.load_from(&params)?;
        Ok(m)
    }

    pub fn for_tensor(cfg: ModelConfig, x: &MediaTensor<T>) -> Result<Self> {
        Self::new(cfg, x.channels(), x.geos(), x.width())
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn check_input(&self, x: ArrayView4<T>) -> Result<()> {
        let (g, _, c, d) = x.dim();
        if g != self.arch.geos || c != self.arch.channels.len() || d != self.arch.width {
            return Err(NnnError::Shape(format!(
                "model expects (G={}, C={}, D={}), got (G={g}, C={c}, D={d})",
                self.arch.geos,
                self.arch.channels.len(),
                self.arch.width
            )));
        }
        Ok(())
    }

    fn prepare(&self, x: ArrayView4<T>) -> Array4<T> {
        let mut x0 = if self.cfg.log_scale { log_scale_input(x) } else { x.to_owned() };
        x0.index_axis_mut(Axis(2), self.arch.target).fill(T::zero());
        x0
    }

    /// Output of the transformer stack.
    pub fn encode_with(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Array4<T> {
        let mut h = self.prepare(x);
        for layer in &self.arch.layers {
            h = layer.forward(p, h.view());
        }
        h
    }

    pub fn forward_with(&self, p: &ParamStore<T>, x: ArrayView4<T>) -> Prediction<T> {
        let h = self.encode_with(p, x);
        Prediction {
            sales: self.arch.sales.forward(p, h.view()),
            search: self.arch.search.forward(p, h.view()),
        }
    }

    pub fn forward(&self, x: ArrayView4<T>) -> Prediction<T> {
        self.forward_with(&self.params, x)
    }

    /// Sales only, skipping the search head.
    pub fn predict_sales(&self, x: ArrayView4<T>) -> Array2<T> {
        let h = self.encode_with(&self.params, x);
        self.arch.sales.forward(&self.params, h.view())
    }

    /// Sales on the natural scale (exponentiated in log mode), as f64.
    pub fn predict_sales_level(&self, x: ArrayView4<T>) -> Array2<f64> {
        let s = self.predict_sales(x);
        if self.cfg.log_scale {
            s.mapv(|v| v.f64().exp())
        } else {
            s.mapv(|v| v.f64())
        }
    }

    /// Next-week search predictions only.
    pub fn predict_search(&self, x: ArrayView4<T>) -> Array3<T> {
        let h = self.encode_with(&self.params, x);
        self.arch.search.forward(&self.params, h.view())
    }

    /// Per sales-head channel contributions `(channel index, (G, T))`.
    pub fn contributions(&self, x: ArrayView4<T>) -> Vec<(usize, Array2<T>)> {
        let h = self.encode_with(&self.params, x);
        self.arch
            .sales
            .heads
            .iter()
            .map(|hd| hd.channel)
            .zip(self.arch.sales.contributions(&self.params, h.view()))
            .collect()
    }

    /// Media channels mapped back to their native width by the frozen heads.
    pub fn passthrough(&self, x: ArrayView4<T>) -> Array4<T> {
        let h = self.encode_with(&self.params, x);
        self.arch.passthrough.forward(&self.params, h.view())
    }

    /// Training targets for the sales term: stored sales, or their log.
    pub fn sales_targets(&self, x: ArrayView4<T>) -> Array2<T> {
        let raw = x.slice(s![.., .., self.arch.target, 0]).to_owned();
        if self.cfg.log_scale {
            raw.mapv(|v| if v > T::zero() { v.ln() } else { T::zero() })
        } else {
            raw
        }
    }

    fn search_targets(&self, x: ArrayView4<T>) -> Array3<T> {
        let t = if self.cfg.log_scale { log_scale_input(x) } else { x.to_owned() };
        t.index_axis(Axis(2), self.arch.search_channel).to_owned()
    }

    fn check_selection(&self, x: ArrayView4<T>, sel: &LossSelection) -> Result<()> {
        self.check_input(x)?;
        let (g, t, _, _) = x.dim();
        if sel.sales_cells.0.dim() != (g, t) {
            return Err(NnnError::Shape(format!(
                "cell mask {:?} does not match (G, T) = ({g}, {t})",
                sel.sales_cells.0.dim()
            )));
        }
        if sel.search_weeks > t {
            return Err(NnnError::Shape(format!("search_weeks {} exceeds T = {t}", sel.search_weeks)));
        }
        if self.cfg.balancing > 0.0 && sel.sales_cells.is_empty() {
            return Err(NnnError::Empty("no sales cells selected for the loss".into()));
        }
        if self.cfg.balancing < 1.0 && sel.search_weeks < 2 {
            return Err(NnnError::Empty("no (t, t + 1) search pairs selected for the loss".into()));
        }
        Ok(())
    }

    fn l1_value(&self, p: &ParamStore<T>) -> f64 {
        self.cfg.l1 * p.l1_norm()
    }

    pub fn loss(&self, x: ArrayView4<T>, sel: &LossSelection) -> Result<LossParts> {
        self.loss_with(&self.params, x, sel)
    }

    pub fn loss_with(&self, p: &ParamStore<T>, x: ArrayView4<T>, sel: &LossSelection) -> Result<LossParts> {
        self.check_selection(x, sel)?;
        let pred = self.forward_with(p, x);
        let (sales, _) = self.sales_term(&pred.sales, x, sel);
        let (search, _) = self.search_term(&pred.search, x, sel);
        Ok(self.combine(sales, search, self.l1_value(p)))
    }

    fn combine(&self, sales: f64, search: f64, l1: f64) -> LossParts {
        let a = self.cfg.balancing;
        LossParts {
            total: a * sales + (1.0 - a) * search + l1,
            sales,
            search,
            l1,
        }
    }

    /// Sales MSE and its gradient w.r.t. predictions (unweighted).
    fn sales_term(&self, pred: &Array2<T>, x: ArrayView4<T>, sel: &LossSelection) -> (f64, Array2<T>) {
        let y = self.sales_targets(x);
        let n = sel.sales_cells.count();
        let mut grad = Array2::zeros(pred.raw_dim());
        if n == 0 {
            return (0.0, grad);
        }
        let mut sse = 0.0;
        for (g, t) in sel.sales_cells.cells() {
            let e = pred[[g, t]].f64() - y[[g, t]].f64();
            sse += e * e;
            grad[[g, t]] = T::of(2.0 * e / n as f64);
        }
        (sse / n as f64, grad)
    }

    /// Next-week search MSE (mean over geos, pairs and width) and gradient.
    fn search_term(&self, pred: &Array3<T>, x: ArrayView4<T>, sel: &LossSelection) -> (f64, Array3<T>) {
        let mut grad = Array3::zeros(pred.raw_dim());
        if sel.search_weeks < 2 {
            return (0.0, grad);
        }
        let target = self.search_targets(x);
        let (g_len, _, d) = pred.dim();
        let pairs = sel.search_weeks - 1;
        let n = (g_len * pairs * d) as f64;
        let mut sse = 0.0;
        for g in 0..g_len {
            for t in 0..pairs {
                for k in 0..d {
                    let e = pred[[g, t, k]].f64() - target[[g, t + 1, k]].f64();
                    sse += e * e;
                    grad[[g, t, k]] = T::of(2.0 * e / n);
                }
            }
        }
        (sse / n, grad)
    }

    /// Loss and its gradient w.r.t. every parameter (frozen ones get zeros).
    pub fn loss_and_grad(&self, x: ArrayView4<T>, sel: &LossSelection) -> Result<(LossParts, Gradients<T>)> {
        self.loss_and_grad_with(&self.params, x, sel)
    }

    pub fn loss_and_grad_with(&self, p: &ParamStore<T>, x: ArrayView4<T>, sel: &LossSelection) -> Result<(LossParts, Gradients<T>)> {
        self.check_selection(x, sel)?;
        let a = self.cfg.balancing;
        let cache = self.forward_train(p, x, a < 1.0);
        let (g_len, t_len, c_len, d) = x.dim();
        let shape = (g_len, t_len, c_len, d);
        let mut grads = Gradients::zeros_like(p);

        let sales_pred = &cache.1;
        let (sales, mut d_sales) = self.sales_term(sales_pred, x, sel);
        d_sales.mapv_inplace(|v| v * T::of(a));
        let mut d_top = self.arch.sales.backward(p, &mut grads, &cache.0.sales, &d_sales, shape);

        let mut search = 0.0;
        if let (Some(search_pred), Some(sc)) = (&cache.2, &cache.0.search) {
            let (value, mut d_search) = self.search_term(search_pred, x, sel);
            search = value;
            d_search.mapv_inplace(|v| v * T::of(1.0 - a));
            d_top += &self.arch.search.backward(p, &mut grads, sc, d_search.view(), shape);
        }

        let mut d = d_top;
        for (layer, lc) in self.arch.layers.iter().zip(&cache.0.layers).rev() {
            d = layer.backward(p, &mut grads, lc, d.view());
        }

        let l1 = self.l1_value(p);
        if self.cfg.l1 > 0.0 {
            let lam = T::of(self.cfg.l1);
            let mask = p.trainable_mask();
            for ((gv, &v), m) in grads.values_mut().iter_mut().zip(p.values()).zip(mask) {
                if m {
                    *gv += lam * v.signum() * if v == T::zero() { T::zero() } else { T::one() };
                }
            }
        }
        Ok((self.combine(sales, search, l1), grads))
    }

    #[allow(clippy::type_complexity)]
    fn forward_train(&self, p: &ParamStore<T>, x: ArrayView4<T>, with_search: bool) -> (ForwardCache<T>, Array2<T>, Option<Array3<T>>) {
        let mut h = self.prepare(x);
        let mut layers = Vec::with_capacity(self.arch.layers.len());
        for layer in &self.arch.layers {
            let (next, c) = layer.forward_cached(p, h.view());
            layers.push(c);
            h = next;
        }
        let (sales_pred, sales) = self.arch.sales.forward_cached(p, h.view());
        let (search_pred, search) = if with_search {
            let (y, c) = self.arch.search.forward_cached(p, h.view());
            (Some(y), Some(c))
        } else {
            (None, None)
        };
        (
            ForwardCache {
                layers,
                sales,
                search,
            },
            sales_pred,
            search_pred,
        )
    }

    /// Converts parameters to another precision, keeping the layout.
    pub fn cast<U: Scalar>(&self) -> Nnn<U> {
        Nnn {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, GradCheckConfig};
    use approx::assert_abs_diff_eq;

    fn channels(d: usize) -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::new("sales", ChannelKind::Target, 1),
            ChannelSpec::new("search", ChannelKind::Organic, d),
            ChannelSpec::new("search_ads", ChannelKind::Media, d),
            ChannelSpec::new("youtube", ChannelKind::Media, d),
        ]
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_ff: 6,
            head_layers: 2,
            head_width: 5,
            attention: AttentionConfig {
                lookback_window: 4,
                hidden: 6,
                channel_mixing: true,
                ..Default::default()
            },
            l1: 0.01,
            ..Default::default()
        }
    }

    fn input(g: usize, t: usize, d: usize) -> Array4<f64> {
        let mut x = Array4::from_shape_fn((g, t, 4, d), |(a, b, c, k)| {
            (((a * 13 + b * 7 + c * 3 + k) as f64) * 0.57).sin() + 1.2
        });
        x.slice_mut(s![.., .., 0, 1..]).fill(0.0);
        x.slice_mut(s![.., .., 0, 0]).mapv_inplace(|v| 3.0 * v);
        x
    }

    fn all_cells(g: usize, t: usize) -> LossSelection {
        LossSelection {
            sales_cells: CellMask(Array2::from_elem((g, t), true)),
            search_weeks: t,
        }
    }

    fn nudge(p: &mut ParamStore<f64>) {
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v += 0.03 * ((i as f64) * 0.77).sin();
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (g, t, d) = (3, 10, 8);
        let mut m = Nnn::<f64>::new(tiny_cfg(), &channels(d), g, d).unwrap();
        nudge(&mut m.params);
        let x = input(g, t, d);
        let sel = all_cells(g, t);
        let (_, grads) = m.loss_and_grad(x.view(), &sel).unwrap();
        let model = m.clone();
        let f = |p: &ParamStore<f64>| model.loss_with(p, x.view(), &sel).unwrap().total;
        let r = grad_check(&mut m.params, f, &grads, &GradCheckConfig { step: 1e-6, ..Default::default() });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sales_predictions_ignore_stored_sales() {
        let (g, t, d) = (2, 6, 4);
        let m = Nnn::<f64>::new(tiny_cfg(), &channels(d), g, d).unwrap();
        let x = input(g, t, d);
        let mut y = x.clone();
        y.slice_mut(s![.., .., 0, 0]).fill(1e6);
        assert_eq!(m.forward(x.view()).sales, m.forward(y.view()).sales);
    }

    #[test]
    fn causal_through_full_stack() {
        let (g, t, d) = (2, 8, 4);
        let m = Nnn::<f64>::new(tiny_cfg(), &channels(d), g, d).unwrap();
        let x = input(g, t, d);
        let base = m.forward(x.view());
        for cut in 0..t - 1 {
            let mut y = x.clone();
            y.slice_mut(s![.., cut + 1.., 1.., ..]).mapv_inplace(|v| 2.0 - 3.0 * v);
            let out = m.forward(y.view());
            assert_eq!(out.sales.slice(s![.., ..=cut]), base.sales.slice(s![.., ..=cut]));
            assert_eq!(out.search.slice(s![.., ..=cut, ..]), base.search.slice(s![.., ..=cut, ..]));
        }
    }

    #[test]
    fn no_layers_single_channel_is_the_plain_head() {
        let (g, t, d) = (2, 4, 3);
        let cfg = ModelConfig {
            n_layers: 0,
            sales_channels: vec!["search".into()],
            ..tiny_cfg()
        };
        let m = Nnn::<f64>::new(cfg, &channels(d), g, d).unwrap();
        let x = input(g, t, d);
        let head = &m.arch.sales.heads[0];
        let gm = m.params.vec(m.arch.sales.geo_mult.unwrap()).to_owned();
        let direct = head.predict(&m.params, x.index_axis(Axis(2), 1), Some(gm.view()), false);
        assert_eq!(m.predict_sales(x.view()), direct);
    }

    #[test]
    fn loss_examples() {
        let (g, t, d) = (2, 5, 3);
        let cfg = ModelConfig { balancing: 1.0, l1: 0.0, ..tiny_cfg() };
        let m = Nnn::<f64>::new(cfg, &channels(d), g, d).unwrap();
        let x = input(g, t, d);
        let sel = all_cells(g, t);
        let pred = m.predict_sales(x.view());
        let mse = (&pred - &x.slice(s![.., .., 0, 0])).mapv(|e| e * e).mean().unwrap();
        let l = m.loss(x.view(), &sel).unwrap();
        assert_abs_diff_eq!(l.total, mse, epsilon = 1e-12);

        // Perfect predictions give zero loss.
        let mut perfect = x.clone();
        perfect.slice_mut(s![.., .., 0, 0]).assign(&pred);
        assert_eq!(m.loss(perfect.view(), &sel).unwrap().total, 0.0);

        // λ > 0 with all-zero parameters: the penalty vanishes. Doubling λ
        // doubles the penalty gap at any other point.
        let mut zero = m.clone();
        zero.cfg.l1 = 5.0;
        zero.params.values_mut().fill(0.0);
        let z = zero.loss(x.view(), &sel).unwrap();
        assert_eq!(z.l1, 0.0);
        assert_eq!(z.total, z.sales);
        let mut a = m.clone();
        a.cfg.l1 = 0.5;
        let mut b = m.clone();
        b.cfg.l1 = 1.0;
        let (la, lb) = (a.loss(x.view(), &sel).unwrap(), b.loss(x.view(), &sel).unwrap());
        assert_abs_diff_eq!(lb.total - l.total, 2.0 * (la.total - l.total), epsilon = 1e-9);
    }

    #[test]
    fn pure_sales_objective_leaves_search_head_untouched() {
        let (g, t, d) = (2, 5, 3);
        let cfg = ModelConfig { balancing: 1.0, l1: 0.0, ..tiny_cfg() };
        let m = Nnn::<f64>::new(cfg, &channels(d), g, d).unwrap();
        let (_, grads) = m.loss_and_grad(input(g, t, d).view(), &all_cells(g, t)).unwrap();
        for (i, e) in m.params.entries().iter().enumerate() {
            let r = m.params.refs()[i];
            let slot = grads.mat(r);
            if e.name.starts_with("search_head") || e.name.starts_with("passthrough") {
                assert!(slot.iter().all(|&v| v == 0.0), "{}", e.name);
            }
        }
        assert!(grads.global_norm() > 0.0);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let (g, t, d) = (2, 5, 3);
        let m = Nnn::<f64>::new(tiny_cfg(), &channels(d), g, d).unwrap();
        let sel = LossSelection {
            sales_cells: CellMask::empty(g, t),
            search_weeks: t,
        };
        assert!(matches!(m.loss(input(g, t, d).view(), &sel), Err(NnnError::Empty(_))));
    }

    #[test]
    fn unknown_channel_and_bad_config() {
        let cfg = ModelConfig {
            sales_channels: vec!["tv".into()],
            ..tiny_cfg()
        };
        assert!(matches!(Nnn::<f64>::new(cfg, &channels(3), 2, 3), Err(NnnError::UnknownChannel(_))));
        let cfg = ModelConfig { sales_channels: vec![], ..tiny_cfg() };
        assert!(Nnn::<f64>::new(cfg, &channels(3), 2, 3).is_err());
    }

    #[test]
    fn loss_is_nonnegative_and_log_mode_runs() {
        let (g, t, d) = (2, 6, 3);
        let cfg = ModelConfig { log_scale: true, ..tiny_cfg() };
        let mut m = Nnn::<f64>::new(cfg, &channels(d), g, d).unwrap();
        nudge(&mut m.params);
        let x = input(g, t, d);
        let sel = all_cells(g, t);
        let l = m.loss(x.view(), &sel).unwrap();
        assert!(l.total >= 0.0 && l.sales >= 0.0 && l.search >= 0.0);
        let (_, grads) = m.loss_and_grad(x.view(), &sel).unwrap();
        let model = m.clone();
        let f = |p: &ParamStore<f64>| model.loss_with(p, x.view(), &sel).unwrap().total;
        let r = grad_check(&mut m.params, f, &grads, &GradCheckConfig { step: 1e-6, ..Default::default() });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let level = m.predict_sales_level(x.view());
        assert!(level.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn default_sizes_reach_millions_of_parameters() {
        let m = Nnn::<f32>::new(ModelConfig::default(), &channels(256), 25, 256).unwrap();
        assert!(m.param_count() > 1_000_000, "{}", m.param_count());
    }

    #[test]
    fn log_scale_input_examples() {
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 0.6;
        x[[0, 0, 0, 1]] = 0.8;
        x[[0, 0, 1, 0]] = std::f64::consts::E;
        let y = log_scale_input(x.view());
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[[0, 0, 1, 0]], 1.0, epsilon = 1e-15);
    }
}

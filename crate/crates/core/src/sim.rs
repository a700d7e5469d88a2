//! Synthetic marketing dataset with known per-channel sales contributions.
//!
//! Four pathways generate sales: YouTube directly, YouTube through extra
//! search queries, Search Ads directly, and search queries at a flat
//! conversion rate. A weekly intent multiplier (shared across geos) scales
//! every pathway's sales, and the same intent positions each week's
//! embedding on the segment between a "best" and a "worst" vector.

use ndarray::{s, Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::tensor::{ChannelKind, ChannelSpec, MediaTensor};

pub const SALES: &str = "sales";
pub const SEARCH: &str = "search";
pub const SEARCH_ADS: &str = "search_ads";
pub const YOUTUBE: &str = "youtube";

/// Media channels reported in attribution, in report order.
pub const REPORTED: [&str; 3] = [SEARCH, SEARCH_ADS, YOUTUBE];

// Stream ids for the splittable generator.
const STREAM_INTENT: u64 = 1;
const STREAM_EMBED: u64 = 2;
const STREAM_GEO: u64 = 3;
const STREAM_CELLS: u64 = 1 << 20;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Normalized geometric carryover over a window of `window` weeks.
pub fn adstock(x: &[f64], alpha: f64, window: usize) -> Vec<f64> {
    assert!((0.0..1.0).contains(&alpha), "retention must lie in [0, 1)");
    assert!(window >= 1, "window must be >= 1");
    let weights: Vec<f64> = (0..window).map(|l| alpha.powi(l as i32)).collect();
    let total: f64 = weights.iter().sum();
    (0..x.len())
        .map(|t| {
            let reach = t.min(window - 1);
            (0..=reach).map(|l| weights[l] * x[t - l]).sum::<f64>() / total
        })
        .collect()
}

pub fn hill(x: f64, ec: f64, slope: f64) -> f64 {
    debug_assert!(x >= 0.0 && ec > 0.0 && slope > 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let xs = x.powf(slope);
    xs / (xs + ec.powf(slope))
}

/// Uniform weekly multipliers in `range`, shared by every geo.
pub fn gen_intent(weeks: usize, range: (f64, f64), seed: u64) -> Array1<f64> {
    let mut rng = stream(seed, STREAM_INTENT);
    let (lo, hi) = range;
    Array1::from_shape_fn(weeks, |_| lo + rng.gen::<f64>() * (hi - lo))
}

/// The two endpoint embeddings and each week's interpolated embedding.
#[derive(Debug, Clone)]
pub struct IntentEmbeddings {
    pub best: Array1<f64>,
    pub worst: Array1<f64>,
    /// `(T, D)`.
    pub weekly: Array2<f64>,
}

/// Places week `t` at `u·e_best + (1-u)·e_worst`, with `u` the intent's
/// position within `range`. A degenerate range puts every week at the
/// midpoint.
pub fn gen_intent_embeddings(intent: &Array1<f64>, range: (f64, f64), dim: usize, seed: u64) -> IntentEmbeddings {
    let mut rng = stream(seed, STREAM_EMBED);
    let best: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
    let worst: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
    let (lo, hi) = range;
    let mut weekly = Array2::zeros((intent.len(), dim));
    for (t, &i) in intent.iter().enumerate() {
        let u = if hi > lo { (i - lo) / (hi - lo) } else { 0.5 };
        weekly.row_mut(t).assign(&(&best * u + &worst * (1.0 - u)));
    }
    IntentEmbeddings { best, worst, weekly }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    /// Adstock retention α_m.
    pub alpha: f64,
    /// Hill half-saturation point.
    pub ec: f64,
    /// Sales (or search units) per unit of saturated response. For the
    /// YouTube to Search pathway this is derived from `yt_to_search_share`.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub geos: usize,
    pub weeks: usize,
    pub dim: usize,
    pub seed: u64,
    pub yt_sales: Pathway,
    pub yt_search: Pathway,
    pub sa_sales: Pathway,
    /// Sales per search query.
    pub conversion_rate: f64,
    pub intent_range: (f64, f64),
    /// Added YouTube-driven queries as a fraction of base queries, in aggregate.
    pub yt_to_search_share: f64,
    pub adstock_window: usize,
    pub hill_slope: f64,
    /// Weight of the intent direction in the search embedding; the rest is
    /// an independent random direction per cell.
    pub search_intent_weight: f64,
    /// Media channels as intent-directed embeddings (true) or padded scalars.
    pub embed_media: bool,
    /// Mean weekly base queries per geo.
    pub search_level: f64,
    /// Mean weekly media units per geo (Hill inputs live on this scale).
    pub media_level: f64,
    /// Log-normal σ of the per-geo scale factors and of the per-cell draws.
    pub geo_sigma: f64,
    pub cell_sigma: f64,
    /// Queries represented by one unit of search-embedding norm.
    pub search_unit: f64,
    /// Embedding norm per media unit.
    pub media_unit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            geos: 25,
            weeks: 130,
            dim: 64,
            seed: 7,
            yt_sales: Pathway { alpha: 0.75, ec: 1.0, scale: 133.0 },
            yt_search: Pathway { alpha: 0.5, ec: 3.0, scale: 0.0 },
            sa_sales: Pathway { alpha: 0.3, ec: 1.0, scale: 45.0 },
            conversion_rate: 0.001,
            intent_range: (0.5, 1.5),
            yt_to_search_share: 0.2,
            adstock_window: 13,
            hill_slope: 1.0,
            search_intent_weight: 0.5,
            embed_media: true,
            search_level: 100_000.0,
            media_level: 1.0,
            geo_sigma: 0.3,
            cell_sigma: 0.25,
            search_unit: 500.0,
            media_unit: 100.0,
        }
    }
}

impl SimConfig {
    pub fn high_variance(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    /// Same draws as [`SimConfig::high_variance`]; only the intent range differs.
    pub fn low_variance(seed: u64) -> Self {
        Self {
            seed,
            intent_range: (0.8, 1.2),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnnError::Config(format!("simulator: {m}")));
        if self.geos == 0 || self.weeks == 0 || self.dim == 0 {
            return bad("G, T and D must be positive");
        }
        for (name, p) in [("yt_sales", self.yt_sales), ("yt_search", self.yt_search), ("sa_sales", self.sa_sales)] {
            if !(0.0..1.0).contains(&p.alpha) || p.ec <= 0.0 || p.scale < 0.0 {
                return bad(&format!("pathway {name} needs 0 <= alpha < 1, ec > 0, scale >= 0"));
            }
        }
        let (lo, hi) = self.intent_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && lo <= hi) {
            return bad("intent range must satisfy 0 < lo <= 1 <= hi");
        }
        if self.yt_to_search_share < 0.0 {
            return bad("yt_to_search_share must be >= 0 (negative search volume otherwise)");
        }
        if self.conversion_rate < 0.0 || self.adstock_window == 0 || self.hill_slope <= 0.0 {
            return bad("conversion_rate >= 0, adstock_window >= 1, hill_slope > 0 required");
        }
        if !(0.0..=1.0).contains(&self.search_intent_weight) {
            return bad("search_intent_weight must lie in [0, 1]");
        }
        if self.search_unit <= 0.0 || self.media_unit <= 0.0 || self.search_level < 0.0 || self.media_level < 0.0 {
            return bad("levels must be >= 0 and units > 0");
        }
        Ok(())
    }
}

/// Per-cell `(G, T)` sales by pathway.
#[derive(Debug, Clone)]
pub struct Contributions {
    pub base_search: Array2<f64>,
    pub yt_search: Array2<f64>,
    pub yt_direct: Array2<f64>,
    pub search_ads: Array2<f64>,
}

impl Contributions {
    pub fn sales(&self) -> Array2<f64> {
        &self.base_search + &self.yt_search + &self.yt_direct + &self.search_ads
    }

    fn sum(a: &Array2<f64>, weeks: &std::ops::Range<usize>) -> f64 {
        a.slice(s![.., weeks.clone()]).sum()
    }

    /// Channel totals `[search, search_ads, youtube]` over `weeks`, crediting
    /// YouTube-driven queries to Search.
    pub fn direct(&self, weeks: std::ops::Range<usize>) -> [f64; 3] {
        [
            Self::sum(&self.base_search, &weeks) + Self::sum(&self.yt_search, &weeks),
            Self::sum(&self.search_ads, &weeks),
            Self::sum(&self.yt_direct, &weeks),
        ]
    }

    /// As [`Contributions::direct`] but crediting YouTube-driven queries to YouTube.
    pub fn total(&self, weeks: std::ops::Range<usize>) -> [f64; 3] {
        [
            Self::sum(&self.base_search, &weeks),
            Self::sum(&self.search_ads, &weeks),
            Self::sum(&self.yt_direct, &weeks) + Self::sum(&self.yt_search, &weeks),
        ]
    }
}

/// Percent shares of `values`. All-zero input maps to all zeros.
pub fn mix_percent(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| 100.0 * v / total).collect()
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: SimConfig,
    pub tensor: MediaTensor<f64>,
    pub contributions: Contributions,
    pub intent: Array1<f64>,
    pub embeddings: IntentEmbeddings,
    /// Raw weekly queries `(G, T)` before and after the YouTube lift.
    pub base_queries: Array2<f64>,
    pub added_queries: Array2<f64>,
    /// Raw media units `(G, T)`.
    pub youtube: Array2<f64>,
    pub search_ads: Array2<f64>,
    /// Derived scale of the YouTube to Search pathway.
    pub yt_search_scale: f64,
}

impl SimOutput {
    pub fn truth_direct(&self) -> [f64; 3] {
        self.contributions.direct(0..self.config.weeks)
    }

    pub fn truth_total(&self) -> [f64; 3] {
        self.contributions.total(0..self.config.weeks)
    }

    /// Aggregate YouTube-driven queries over aggregate base queries.
    pub fn realized_search_share(&self) -> f64 {
        self.added_queries.sum() / self.base_queries.sum()
    }

    pub fn truth(&self, weeks: std::ops::Range<usize>) -> GroundTruth {
        let direct = self.contributions.direct(weeks.clone());
        let total = self.contributions.total(weeks.clone());
        let national = |a: &Array2<f64>| a.slice(s![.., weeks.clone()]).sum_axis(ndarray::Axis(0)).to_vec();
        GroundTruth {
            channels: REPORTED.iter().map(|s| s.to_string()).collect(),
            weeks: (weeks.start, weeks.end),
            direct_sales: direct.to_vec(),
            total_sales: total.to_vec(),
            direct_mix: mix_percent(&direct),
            total_mix: mix_percent(&total),
            realized_search_share: self.realized_search_share(),
            yt_search_scale: self.yt_search_scale,
            intent: self.intent.to_vec(),
            weekly_base_search: national(&self.contributions.base_search),
            weekly_yt_search: national(&self.contributions.yt_search),
            weekly_yt_direct: national(&self.contributions.yt_direct),
            weekly_search_ads: national(&self.contributions.search_ads),
            e_best: self.embeddings.best.to_vec(),
            e_worst: self.embeddings.worst.to_vec(),
            config: self.config.clone(),
        }
    }
}

/// Serializable summary written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub channels: Vec<String>,
    pub weeks: (usize, usize),
    pub direct_sales: Vec<f64>,
    pub total_sales: Vec<f64>,
    pub direct_mix: Vec<f64>,
    pub total_mix: Vec<f64>,
    pub realized_search_share: f64,
    pub yt_search_scale: f64,
    pub intent: Vec<f64>,
    pub weekly_base_search: Vec<f64>,
    pub weekly_yt_search: Vec<f64>,
    pub weekly_yt_direct: Vec<f64>,
    pub weekly_search_ads: Vec<f64>,
    pub e_best: Vec<f64>,
    pub e_worst: Vec<f64>,
    pub config: SimConfig,
}

impl GroundTruth {
    fn window(&self, v: &[f64], weeks: &std::ops::Range<usize>) -> f64 {
        let lo = weeks.start.max(self.weeks.0) - self.weeks.0;
        let hi = weeks.end.min(self.weeks.1).saturating_sub(self.weeks.0);
        v[lo..hi.max(lo)].iter().sum()
    }

    /// Direct-credit channel totals over `weeks` (clipped to the weeks covered).
    pub fn direct_sales_in(&self, weeks: std::ops::Range<usize>) -> Vec<f64> {
        vec![
            self.window(&self.weekly_base_search, &weeks) + self.window(&self.weekly_yt_search, &weeks),
            self.window(&self.weekly_search_ads, &weeks),
            self.window(&self.weekly_yt_direct, &weeks),
        ]
    }

    /// Total-credit channel totals over `weeks`.
    pub fn total_sales_in(&self, weeks: std::ops::Range<usize>) -> Vec<f64> {
        vec![
            self.window(&self.weekly_base_search, &weeks),
            self.window(&self.weekly_search_ads, &weeks),
            self.window(&self.weekly_yt_direct, &weeks) + self.window(&self.weekly_yt_search, &weeks),
        ]
    }
}

fn unit_normal<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            return v / n;
        }
    }
}

fn unit(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

fn saturate(series: &[f64], p: &Pathway, window: usize, slope: f64, burn_in: usize) -> Vec<f64> {
    adstock(series, p.alpha, window)[burn_in..]
        .iter()
        .map(|&x| hill(x, p.ec, slope))
        .collect()
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let (g_len, t_len, d) = (cfg.geos, cfg.weeks, cfg.dim);
    // Media is generated with a burn-in so early weeks carry full adstock.
    let burn = cfg.adstock_window - 1;
    let intent = gen_intent(t_len, cfg.intent_range, cfg.seed);
    let embeddings = gen_intent_embeddings(&intent, cfg.intent_range, d, cfg.seed);
    let intent_dirs: Vec<Array1<f64>> = embeddings.weekly.rows().into_iter().map(|r| unit(&r.to_owned())).collect();

    let mut geo_rng = stream(cfg.seed, STREAM_GEO);
    let geo_scales: Vec<[f64; 3]> = (0..g_len)
        .map(|_| {
            let mut f = || {
                let z: f64 = StandardNormal.sample(&mut geo_rng);
                (cfg.geo_sigma * z).exp()
            };
            [f(), f(), f()]
        })
        .collect();

    let mut base_queries = Array2::zeros((g_len, t_len));
    let mut youtube = Array2::zeros((g_len, t_len));
    let mut search_ads = Array2::zeros((g_len, t_len));
    let mut random_dirs = Vec::with_capacity(g_len);
    let mut yt_sat_search = Array2::zeros((g_len, t_len));
    let mut yt_sat_sales = Array2::zeros((g_len, t_len));
    let mut sa_sat = Array2::zeros((g_len, t_len));
    let cell = |rng: &mut ChaCha8Rng| {
        let z: f64 = StandardNormal.sample(rng);
        (cfg.cell_sigma * z - 0.5 * cfg.cell_sigma.powi(2)).exp()
    };
    for g in 0..g_len {
        let mut rng = stream(cfg.seed, STREAM_CELLS + g as u64);
        let [gs, gy, ga] = geo_scales[g];
        let yt_full: Vec<f64> = (0..t_len + burn).map(|_| cfg.media_level * gy * cell(&mut rng)).collect();
        let sa_full: Vec<f64> = (0..t_len + burn).map(|_| cfg.media_level * ga * cell(&mut rng)).collect();
        for t in 0..t_len {
            base_queries[[g, t]] = cfg.search_level * gs * cell(&mut rng);
        }
        random_dirs.push((0..t_len).map(|_| unit_normal(&mut rng, d)).collect::<Vec<_>>());
        youtube.row_mut(g).assign(&Array1::from(yt_full[burn..].to_vec()));
        search_ads.row_mut(g).assign(&Array1::from(sa_full[burn..].to_vec()));
        let w = cfg.adstock_window;
        yt_sat_search.row_mut(g).assign(&Array1::from(saturate(&yt_full, &cfg.yt_search, w, cfg.hill_slope, burn)));
        yt_sat_sales.row_mut(g).assign(&Array1::from(saturate(&yt_full, &cfg.yt_sales, w, cfg.hill_slope, burn)));
        sa_sat.row_mut(g).assign(&Array1::from(saturate(&sa_full, &cfg.sa_sales, w, cfg.hill_slope, burn)));
    }

    // Scale the YouTube lift so it adds the configured share of base queries.
    let sat_total: f64 = yt_sat_search.sum();
    let yt_search_scale = if sat_total > 0.0 {
        cfg.yt_to_search_share * base_queries.sum() / sat_total
    } else {
        0.0
    };
    let added_queries = &yt_sat_search * yt_search_scale;
    let weekly = |a: Array2<f64>| {
        let mut a = a;
        for (t, mut col) in a.columns_mut().into_iter().enumerate() {
            col *= intent[t];
        }
        a
    };
    let contributions = Contributions {
        base_search: weekly(&base_queries * cfg.conversion_rate),
        yt_search: weekly(&added_queries * cfg.conversion_rate),
        yt_direct: weekly(&yt_sat_sales * cfg.yt_sales.scale),
        search_ads: weekly(&sa_sat * cfg.sa_sales.scale),
    };
    let sales = contributions.sales();

    let media_dim = if cfg.embed_media { d } else { 1 };
    let channels = vec![
        ChannelSpec::new(SALES, ChannelKind::Target, 1),
        ChannelSpec::new(SEARCH, ChannelKind::Organic, d),
        ChannelSpec::new(SEARCH_ADS, ChannelKind::Media, media_dim),
        ChannelSpec::new(YOUTUBE, ChannelKind::Media, media_dim),
    ];
    let mut data = Array4::zeros((g_len, t_len, 4, d));
    let w = cfg.search_intent_weight;
    for g in 0..g_len {
        for t in 0..t_len {
            data[[g, t, 0, 0]] = sales[[g, t]];
            let volume = (base_queries[[g, t]] + added_queries[[g, t]]) / cfg.search_unit;
            let dir = unit(&(&intent_dirs[t] * w + &random_dirs[g][t] * (1.0 - w)));
            data.slice_mut(s![g, t, 1, ..]).assign(&(dir * volume));
            for (ci, media) in [(2, &search_ads), (3, &youtube)] {
                let v = media[[g, t]] * cfg.media_unit;
                if cfg.embed_media {
                    data.slice_mut(s![g, t, ci, ..]).assign(&(&intent_dirs[t] * v));
                } else {
                    data[[g, t, ci, 0]] = v;
                }
            }
        }
    }
    let tensor = MediaTensor::with_channels(data, channels)?;
    Ok(SimOutput {
        config: cfg.clone(),
        tensor,
        contributions,
        intent,
        embeddings,
        base_queries,
        added_queries,
        youtube,
        search_ads,
        yt_search_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            geos: 6,
            weeks: 40,
            dim: 8,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn adstock_examples() {
        assert_eq!(adstock(&[3.0, 1.0, 4.0], 0.0, 5), vec![3.0, 1.0, 4.0]);
        // Direct double loop.
        let (alpha, l) = (0.5f64, 3usize);
        let x = [1.0, 0.0, 0.0];
        let norm: f64 = (0..l).map(|k| alpha.powi(k as i32)).sum();
        let mut oracle = vec![0.0; 3];
        for t in 0..3 {
            for k in 0..l {
                if k <= t {
                    oracle[t] += alpha.powi(k as i32) * x[t - k];
                }
            }
            oracle[t] /= norm;
        }
        let y = adstock(&x, alpha, l);
        for (a, b) in y.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in y.iter().zip([0.5714, 0.2857, 0.1429]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        let c = adstock(&[2.5; 20], 0.75, 13);
        for v in &c[12..] {
            assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn hill_examples() {
        for slope in [0.5, 1.0, 3.0] {
            assert_abs_diff_eq!(hill(2.0, 2.0, slope), 0.5, epsilon = 1e-15);
        }
        assert_eq!(hill(0.0, 1.0, 1.0), 0.0);
        assert_abs_diff_eq!(hill(3.0, 1.0, 2.0), 0.9, epsilon = 1e-9);
    }

    #[test]
    fn intent_examples() {
        assert!(gen_intent(50, (1.0, 1.0), 3).iter().all(|&v| v == 1.0));
        let big = gen_intent(100_000, (0.5, 1.5), 11);
        assert!((big.mean().unwrap() - 1.0).abs() < 0.01);
        assert!(big.iter().all(|&v| (0.5..=1.5).contains(&v)));
        assert_eq!(gen_intent(20, (0.8, 1.2), 4), gen_intent(20, (0.8, 1.2), 4));
    }

    #[test]
    fn intent_embeddings_lie_on_segment() {
        let range = (0.5, 1.5);
        let intent = Array1::from(vec![1.5, 1.0, 0.5, 0.7, 1.31]);
        let e = gen_intent_embeddings(&intent, range, 6, 9);
        assert_eq!(e.weekly.row(0), e.best);
        for (a, b) in e.weekly.row(1).iter().zip(((&e.best + &e.worst) / 2.0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Rank of the centered rows via singular values of the Gram matrix.
        let centered = &e.weekly - &e.worst;
        let gram = centered.dot(&centered.t());
        let eig = symmetric_eigenvalues(&gram);
        let top = eig.iter().cloned().fold(0.0, f64::max);
        let rest = eig.iter().filter(|&&v| v < top).cloned().fold(0.0, f64::max);
        assert!(rest / top < 1e-12, "{eig:?}");
    }

    /// Jacobi eigenvalues of a small symmetric matrix.
    fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if m[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                        m[[k, p]] = c * mkp - s * mkq;
                        m[[k, q]] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                        m[[p, k]] = c * mpk - s * mqk;
                        m[[q, k]] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[[i, i]].abs()).collect()
    }

    #[test]
    fn bookkeeping_is_exact() {
        let out = simulate(&small(3)).unwrap();
        let sales = out.tensor.target_values();
        let sum = out.contributions.sales();
        for (a, b) in sales.iter().zip(sum.iter()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let direct: f64 = out.truth_direct().iter().sum();
        let total: f64 = out.truth_total().iter().sum();
        assert_abs_diff_eq!(direct, sales.sum(), epsilon = 1e-6 * direct);
        assert_abs_diff_eq!(total, direct, epsilon = 1e-6 * direct);
        let truth = out.truth(0..40);
        assert_abs_diff_eq!(truth.direct_mix.iter().sum::<f64>(), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(truth.total_mix.iter().sum::<f64>(), 100.0, epsilon = 1e-9);
        assert_eq!(truth.direct_mix[1], truth.total_mix[1]);
        assert_abs_diff_eq!(out.realized_search_share(), 0.2, epsilon = 1e-12);
        for (a, b) in truth.direct_sales_in(0..40).iter().zip(&truth.direct_sales) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * b);
        }
        let part = truth.direct_sales_in(5..12);
        let expect = out.contributions.direct(5..12);
        for (a, b) in part.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * b);
        }
        assert_abs_diff_eq!(truth.total_sales_in(5..12)[2], out.contributions.total(5..12)[2], epsilon = 1e-6);
    }

    #[test]
    fn zero_pathways_give_zero_sales() {
        let cfg = SimConfig {
            conversion_rate: 0.0,
            yt_sales: Pathway { scale: 0.0, ..SimConfig::default().yt_sales },
            sa_sales: Pathway { scale: 0.0, ..SimConfig::default().sa_sales },
            ..small(1)
        };
        let out = simulate(&cfg).unwrap();
        assert!(out.tensor.target_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn search_norm_is_query_volume() {
        let cfg = small(5);
        let out = simulate(&cfg).unwrap();
        let c = out.tensor.channel_index(SEARCH).unwrap();
        let y = out.tensor.channel_index(YOUTUBE).unwrap();
        for g in 0..cfg.geos {
            for t in 0..cfg.weeks {
                let q = (out.base_queries[[g, t]] + out.added_queries[[g, t]]) / cfg.search_unit;
                assert_abs_diff_eq!(out.tensor.channel_volume(g, t, c), q, epsilon = 1e-9 * q);
                let v = out.youtube[[g, t]] * cfg.media_unit;
                assert_abs_diff_eq!(out.tensor.channel_volume(g, t, y), v, epsilon = 1e-9 * v);
            }
        }
        let scalar = simulate(&SimConfig { embed_media: false, ..cfg }).unwrap();
        assert_eq!(scalar.tensor.channels()[y].native_dim, 1);
        assert_abs_diff_eq!(scalar.tensor.data()[[0, 3, y, 0]], out.youtube[[0, 3]] * 100.0, epsilon = 1e-9);
    }

    #[test]
    fn variance_presets_share_draws() {
        let hi = simulate(&SimConfig { geos: 3, weeks: 20, dim: 4, ..SimConfig::high_variance(2) }).unwrap();
        let lo = simulate(&SimConfig { geos: 3, weeks: 20, dim: 4, ..SimConfig::low_variance(2) }).unwrap();
        assert_eq!(hi.base_queries, lo.base_queries);
        assert_eq!(hi.embeddings.best, lo.embeddings.best);
        let spread = |a: &Array1<f64>| a.iter().cloned().fold(f64::MIN, f64::max) - a.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread(&hi.intent) > spread(&lo.intent));
        let flat = |s: &SimConfig| simulate(&SimConfig { intent_range: (1.0, 1.0), ..s.clone() }).unwrap();
        let a = flat(&hi.config);
        let b = flat(&lo.config);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(simulate(&SimConfig { yt_to_search_share: -0.1, ..small(0) }).is_err());
        assert!(simulate(&SimConfig { intent_range: (1.2, 0.8), ..small(0) }).is_err());
        assert!(simulate(&SimConfig { geos: 0, ..small(0) }).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        let a = simulate(&small(8)).unwrap();
        let b = simulate(&small(8)).unwrap();
        assert_eq!(a.tensor.data(), b.tensor.data());
        let c = simulate(&small(9)).unwrap();
        assert_ne!(a.tensor.data(), c.tensor.data());
    }

    #[test]
    fn geo_draws_do_not_depend_on_geo_count() {
        // Per-geo streams: the first geos are identical when more are added.
        let a = simulate(&small(4)).unwrap();
        let b = simulate(&SimConfig { geos: 9, ..small(4) }).unwrap();
        assert_eq!(a.base_queries, b.base_queries.slice(s![..6, ..]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn adstock_preserves_mass_of_constant_and_bounds(alpha in 0.0f64..0.99, window in 1usize..20, c in 0.0f64..10.0) {
            let y = adstock(&vec![c; 40], alpha, window);
            for (t, v) in y.iter().enumerate() {
                prop_assert!(*v <= c + 1e-12);
                if t + 1 >= window {
                    prop_assert!((v - c).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn hill_in_unit_interval(x in 0.0f64..1e6, ec in 1e-3f64..100.0, slope in 0.1f64..4.0) {
            let h = hill(x, ec, slope);
            prop_assert!((0.0..1.0).contains(&h) || (h == 1.0 && x > 1e3 * ec));
        }
    }
}

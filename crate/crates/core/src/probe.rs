//! Embedding probes: score candidate embeddings for one channel against
//! anchored, geo-averaged context.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array4, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::model::Nnn;
use crate::scalar::Scalar;
use crate::tensor::{CellMask, MediaTensor};

/// Mean of channel `c` over every `(g, t)`.
pub fn anchor<T: Scalar>(x: &MediaTensor<T>, c: usize) -> Array1<f64> {
    let slab = x.data().index_axis(Axis(2), c).mapv(|v| v.f64());
    let (g, t, d) = slab.dim();
    slab.into_shape_with_order((g * t, d)).unwrap().mean_axis(Axis(0)).unwrap()
}

/// `(G, D)` time means of channel `k` per geo.
pub fn geo_context<T: Scalar>(x: &MediaTensor<T>, k: usize) -> Array2<f64> {
    x.data().index_axis(Axis(2), k).mapv(|v| v.f64()).mean_axis(Axis(1)).unwrap()
}

/// Standard deviation of `‖X[g, t, c, :]‖` over the given cells.
pub fn norm_std<T: Scalar>(x: &MediaTensor<T>, c: usize, cells: &CellMask) -> f64 {
    let v: Vec<f64> = cells.cells().map(|(g, t)| x.channel_volume(g, t, c)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub target: String,
    /// Probe scale; the spread of the target's volume over training cells
    /// when absent.
    pub scale: Option<f64>,
    /// Context channels; every other non-target channel when empty.
    pub context: Vec<String>,
    pub samples: usize,
    /// Sampling σ as a multiple of `‖e_best − e_worst‖`.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            target: "search".into(),
            scale: None,
            context: Vec::new(),
            samples: 400,
            spread: 0.25,
            seed: 0,
        }
    }
}

/// A prepared `(G, 1, C, D)` probe input; only the target slot varies.
#[derive(Debug, Clone)]
pub struct Probe {
    pub target: usize,
    pub scale: f64,
    pub anchor: Array1<f64>,
    base: Array4<f64>,
}

impl Probe {
    pub fn new<T: Scalar>(x: &MediaTensor<T>, cfg: &ProbeConfig, train: &CellMask) -> Result<Self> {
        let target = x.channel_index(&cfg.target)?;
        if target == x.target_index() {
            return Err(NnnError::Config("probe target must be an input channel".into()));
        }
        let context: Vec<usize> = if cfg.context.is_empty() {
            (0..x.channels().len()).filter(|&c| c != target && c != x.target_index()).collect()
        } else {
            cfg.context.iter().map(|n| x.channel_index(n)).collect::<Result<_>>()?
        };
        let scale = match cfg.scale {
            Some(s) => s,
            None => {
                if train.is_empty() {
                    return Err(NnnError::Empty("no cells to estimate the probe scale".into()));
                }
                norm_std(x, target, train)
            }
        };
        if !(scale >= 0.0) {
            return Err(NnnError::Config(format!("probe scale {scale} must be >= 0")));
        }
        let (g, _, c, d) = x.dim();
        let mut base = Array4::zeros((g, 1, c, d));
        for k in context {
            base.slice_mut(s![.., 0, k, ..]).assign(&geo_context(x, k));
        }
        Ok(Self {
            target,
            scale,
            anchor: anchor(x, target),
            base,
        })
    }

    pub fn width(&self) -> usize {
        self.anchor.len()
    }

    /// `S(v) = Σ_g F(X_in)_{g,0}` with `scale·v + A` in the target slot.
    pub fn score<T: Scalar>(&self, model: &Nnn<T>, v: ArrayView1<f64>) -> Result<f64> {
        if v.len() != self.width() {
            return Err(NnnError::Shape(format!("probe vector has width {}, expected {}", v.len(), self.width())));
        }
        let mut input = self.base.clone();
        let slot = &v * self.scale + &self.anchor;
        for mut row in input.slice_mut(s![.., 0, self.target, ..]).rows_mut() {
            row.assign(&slot);
        }
        let xin = input.mapv(T::of);
        model.check_input(xin.view())?;
        Ok(model.predict_sales_level(xin.view()).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    /// `best`, `worst`, or the endpoint a sample was drawn around.
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Projects rows of `v` onto their top two principal components.
pub fn pca_2d(v: &Array2<f64>) -> Array2<f64> {
    let (n, d) = v.dim();
    let mean = v.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let centered = v - &mean;
    let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = m.transpose() * &m;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Array2::zeros((n, 2));
    for (j, &k) in order.iter().take(2).enumerate() {
        let axis = eig.eigenvectors.column(k);
        // Fix the sign so the projection is reproducible.
        let sign = if axis.iter().fold(0.0, |acc: f64, a| if a.abs() > acc.abs() { *a } else { acc }) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[[i, j]] = sign * (0..d).map(|c| centered[[i, c]] * axis[c]).sum::<f64>();
        }
    }
    out
}

/// Scores Gaussian samples around both endpoints (plus the endpoints
/// themselves, listed first) and projects them to 2D.
pub fn landscape<T: Scalar>(model: &Nnn<T>, probe: &Probe, best: ArrayView1<f64>, worst: ArrayView1<f64>, cfg: &ProbeConfig) -> Result<Vec<LandscapePoint>> {
    let d = probe.width();
    if best.len() != d || worst.len() != d {
        return Err(NnnError::Shape("endpoint width mismatch".into()));
    }
    let sigma = cfg.spread * (&best - &worst).mapv(|a| a * a).sum().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples;
    let mut pts = Array2::zeros((n + 2, d));
    let mut labels = vec!["best".to_string(), "worst".to_string()];
    pts.row_mut(0).assign(&best);
    pts.row_mut(1).assign(&worst);
    for i in 0..n {
        let (center, label) = if i % 2 == 0 { (best.view(), "near_best") } else { (worst.view(), "near_worst") };
        let mut row = pts.row_mut(i + 2);
        for (k, r) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *r = center[k] + sigma * z;
        }
        labels.push(label.to_string());
    }
    let xy = pca_2d(&pts);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            Ok(LandscapePoint {
                label,
                x: xy[[i, 0]],
                y: xy[[i, 1]],
                score: probe.score(model, pts.row(i))?,
            })
        })
        .collect()
}

pub fn write_landscape_csv(points: &[LandscapePoint], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p).map_err(|e| NnnError::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

//! The rank-4 `(G, T, C, D)` media tensor, its channel registry, and the
//! cell-level train/validation/test split.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::scalar::{norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// The KPI being predicted (sales). Masked before any computation.
    Target,
    /// Observed organic signal, e.g. search.
    Organic,
    /// Paid media lever.
    Media,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    /// Width of the channel's own embedding before zero padding to `D`.
    pub native_dim: usize,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, kind: ChannelKind, native_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            native_dim,
        }
    }
}

/// Dense `(G, T, C, D)` tensor plus channel metadata.
///
/// Every channel slice is zero beyond its `native_dim`; the constructor
/// rejects tensors that violate this.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaTensor<T> {
    data: Array4<T>,
    channels: Vec<ChannelSpec>,
    time_index: Vec<i64>,
}

pub(crate) fn validate_channels(channels: &[ChannelSpec], d: usize) -> Result<()> {
    let targets = channels
        .iter()
        .filter(|c| c.kind == ChannelKind::Target)
        .count();
    if targets != 1 {
        return Err(NnnError::Config(format!(
            "expected exactly one target channel, found {targets}"
        )));
    }
    if !channels.iter().any(|c| c.kind == ChannelKind::Organic) {
        return Err(NnnError::Config("no organic channel registered".into()));
    }
    for (i, c) in channels.iter().enumerate() {
        if c.native_dim == 0 || c.native_dim > d {
            return Err(NnnError::Config(format!(
                "channel `{}` has native_dim {} outside 1..={d}",
                c.name, c.native_dim
            )));
        }
        if channels[..i].iter().any(|o| o.name == c.name) {
            return Err(NnnError::Config(format!("duplicate channel `{}`", c.name)));
        }
    }
    Ok(())
}

impl<T: Scalar> MediaTensor<T> {
    pub fn new(data: Array4<T>, channels: Vec<ChannelSpec>, time_index: Vec<i64>) -> Result<Self> {
        let (_, t, c, d) = data.dim();
        if channels.len() != c {
            return Err(NnnError::Shape(format!(
                "{} channel specs for C = {c}",
                channels.len()
            )));
        }
        if time_index.len() != t {
            return Err(NnnError::Shape(format!(
                "{} time labels for T = {t}",
                time_index.len()
            )));
        }
        validate_channels(&channels, d)?;
        if t > 1 {
            let step = time_index[1] - time_index[0];
            if step <= 0 || time_index.windows(2).any(|w| w[1] - w[0] != step) {
                return Err(NnnError::Config(
                    "time index must be strictly increasing with uniform spacing".into(),
                ));
            }
        }
        for (ci, spec) in channels.iter().enumerate() {
            if spec.native_dim < d {
                let pad = data.slice(s![.., .., ci, spec.native_dim..]);
                if pad.iter().any(|v| *v != T::zero()) {
                    return Err(NnnError::Config(format!(
                        "channel `{}` has nonzero entries beyond native_dim {}",
                        spec.name, spec.native_dim
                    )));
                }
            }
        }
        Ok(Self {
            data,
            channels,
            time_index,
        })
    }

    /// Builds a tensor with default time labels `0..T`.
    pub fn with_channels(data: Array4<T>, channels: Vec<ChannelSpec>) -> Result<Self> {
        let t = data.dim().1;
        Self::new(data, channels, (0..t as i64).collect())
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, T> {
        self.data.view()
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    /// `(G, T, C, D)`.
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn geos(&self) -> usize {
        self.data.dim().0
    }

    pub fn weeks(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| NnnError::UnknownChannel(name.to_string()))
    }

    pub fn target_index(&self) -> usize {
        self.channels
            .iter()
            .position(|c| c.kind == ChannelKind::Target)
            .expect("validated at construction")
    }

    /// Observed target value (sales) per `(g, t)`.
    pub fn target_values(&self) -> Array2<T> {
        self.data
            .slice(s![.., .., self.target_index(), 0])
            .to_owned()
    }

    /// Euclidean norm of `data[g, t, c, :]`, the channel's volume.
    pub fn channel_volume(&self, g: usize, t: usize, c: usize) -> f64 {
        norm(self.data.slice(s![g, t, c, ..]).iter().copied())
    }

    /// Volumes of one channel for every cell, `(G, T)`.
    pub fn volumes(&self, c: usize) -> Array2<f64> {
        let (g, t, _, _) = self.data.dim();
        Array2::from_shape_fn((g, t), |(gi, ti)| self.channel_volume(gi, ti, c))
    }

    /// Copy with the target channel zeroed at every cell.
    pub fn mask_target(&self) -> Self {
        let mut out = self.clone();
        let ti = self.target_index();
        out.data.slice_mut(s![.., .., ti, ..]).fill(T::zero());
        out
    }

    /// Copy with channel `c` zeroed for the weeks in `weeks` (all weeks when `None`).
    pub fn zero_channel(&self, c: usize, weeks: Option<std::ops::Range<usize>>) -> Self {
        let mut out = self.clone();
        let r = weeks.unwrap_or(0..self.weeks());
        out.data.slice_mut(s![.., r, c, ..]).fill(T::zero());
        out
    }

    /// Copy restricted to weeks `range`.
    pub fn slice_weeks(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            data: self.data.slice(s![.., range.clone(), .., ..]).to_owned(),
            channels: self.channels.clone(),
            time_index: self.time_index[range].to_vec(),
        }
    }

    /// Replaces every non-target channel by its padded scalar volume, which
    /// discards all directional (qualitative) information.
    pub fn to_volume_only(&self) -> Self {
        let (g, t, c, d) = self.data.dim();
        let mut data = self.data.clone();
        let mut channels = self.channels.clone();
        for ci in 0..c {
            if channels[ci].kind == ChannelKind::Target {
                continue;
            }
            let vols = self.volumes(ci);
            let padded = pad_scalar_channel(vols.mapv(T::of).view(), d);
            data.slice_mut(s![.., .., ci, ..])
                .assign(&padded.index_axis(Axis(2), 0));
            channels[ci].native_dim = 1;
        }
        debug_assert_eq!(data.dim(), (g, t, c, d));
        Self {
            data,
            channels,
            time_index: self.time_index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MediaTensor<U> {
        MediaTensor {
            data: self.data.mapv(|v| U::of(v.f64())),
            channels: self.channels.clone(),
            time_index: self.time_index.clone(),
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array4<T> {
        &mut self.data
    }
}

/// Pads a `(G, T)` scalar series into a `(G, T, 1, D)` block with the value in
/// element 0 and zeros elsewhere.
pub fn pad_scalar_channel<T: Scalar>(values: ArrayView2<T>, d: usize) -> Array4<T> {
    assert!(d >= 1, "width must be at least 1");
    let (g, t) = values.dim();
    let mut out = Array4::zeros((g, t, 1, d));
    out.slice_mut(s![.., .., 0, 0]).assign(&values);
    out
}

/// Boolean `(G, T)` cell selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask(pub Array2<bool>);

impl CellMask {
    pub fn empty(geos: usize, weeks: usize) -> Self {
        Self(Array2::from_elem((geos, weeks), false))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, g: usize, t: usize) -> bool {
        self.0[[g, t]]
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|(ix, _)| ix)
    }

    /// Weeks containing at least one selected cell, ascending.
    pub fn weeks(&self) -> Vec<usize> {
        (0..self.0.ncols())
            .filter(|&t| self.0.column(t).iter().any(|&b| b))
            .collect()
    }

    pub fn is_disjoint(&self, other: &CellMask) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| !(*a && *b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Last week (position) usable for fitting.
    pub train_end: usize,
    /// Fraction of in-window cells held out for validation.
    pub val_fraction: f64,
    /// First test week; everything from here on is test.
    pub test_start: usize,
}

impl SplitSpec {
    /// Test window covers the final `test_weeks` weeks; training runs right up to it.
    pub fn tail(weeks: usize, test_weeks: usize, val_fraction: f64) -> Self {
        let test_start = weeks.saturating_sub(test_weeks);
        Self {
            train_end: test_start.saturating_sub(1),
            val_fraction,
            test_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub spec_train_end: usize,
    pub train: CellMask,
    pub val: CellMask,
    pub test: CellMask,
}

impl Split {
    pub fn train_end(&self) -> usize {
        self.spec_train_end
    }
}

/// Seeded cell-wise split. Validation cells are drawn from weeks `<= train_end`.
pub fn split(geos: usize, weeks: usize, spec: &SplitSpec, seed: u64) -> Result<Split> {
    if spec.test_start >= weeks {
        return Err(NnnError::Empty(format!(
            "test window starts at {} but there are only {weeks} weeks",
            spec.test_start
        )));
    }
    if spec.test_start <= spec.train_end {
        return Err(NnnError::Config(format!(
            "test_start {} must exceed train_end {}",
            spec.test_start, spec.train_end
        )));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(NnnError::Config(format!(
            "val_fraction {} outside [0, 1)",
            spec.val_fraction
        )));
    }
    let mut window: Vec<(usize, usize)> = (0..=spec.train_end)
        .flat_map(|t| (0..geos).map(move |g| (g, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    window.shuffle(&mut rng);
    let n_val = (spec.val_fraction * window.len() as f64).round() as usize;

    let mut train = CellMask::empty(geos, weeks);
    let mut val = CellMask::empty(geos, weeks);
    let mut test = CellMask::empty(geos, weeks);
    for (i, &(g, t)) in window.iter().enumerate() {
        if i < n_val {
            val.0[[g, t]] = true;
        } else {
            train.0[[g, t]] = true;
        }
    }
    test.0.slice_mut(s![.., spec.test_start..]).fill(true);
    Ok(Split {
        spec_train_end: spec.train_end,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn channels(d: usize) -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::new("sales", ChannelKind::Target, 1),
            ChannelSpec::new("search", ChannelKind::Organic, d),
            ChannelSpec::new("youtube", ChannelKind::Media, 1),
        ]
    }

    fn tensor(g: usize, t: usize, d: usize) -> MediaTensor<f64> {
        let mut data = Array4::<f64>::zeros((g, t, 3, d));
        for gi in 0..g {
            for ti in 0..t {
                data[[gi, ti, 0, 0]] = 7.0 + ti as f64;
                for k in 0..d {
                    data[[gi, ti, 1, k]] = (gi + ti + k) as f64 * 0.5 - 1.0;
                }
                data[[gi, ti, 2, 0]] = gi as f64 + 1.0;
            }
        }
        MediaTensor::with_channels(data, channels(d)).unwrap()
    }

    #[test]
    fn volume_is_euclidean_norm() {
        let mut data = Array4::<f64>::zeros((1, 1, 3, 4));
        data[[0, 0, 1, 0]] = 3.0;
        data[[0, 0, 1, 1]] = 4.0;
        let x = MediaTensor::with_channels(data, channels(4)).unwrap();
        assert_eq!(x.channel_volume(0, 0, 1), 5.0);
        assert_eq!(x.channel_volume(0, 0, 2), 0.0);
    }

    #[test]
    fn summed_unit_vectors_have_volume_k() {
        // SLaM aggregation: k identical unit items sum to volume k.
        let d = 6;
        let unit: Vec<f64> = (0..d).map(|i| if i == 2 { 1.0 } else { 0.0 }).collect();
        for k in 1..5 {
            let mut data = Array4::<f64>::zeros((1, 1, 3, d));
            for _ in 0..k {
                for (i, u) in unit.iter().enumerate() {
                    data[[0, 0, 1, i]] += u;
                }
            }
            let x = MediaTensor::with_channels(data, channels(d)).unwrap();
            assert!((x.channel_volume(0, 0, 1) - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_target_zeroes_only_sales_and_is_idempotent() {
        let x = tensor(2, 3, 4);
        assert_eq!(x.data()[[0, 0, 0, 0]], 7.0);
        let m = x.mask_target();
        assert_eq!(m.data()[[0, 0, 0, 0]], 0.0);
        assert_eq!(
            m.data().slice(s![.., .., 1.., ..]),
            x.data().slice(s![.., .., 1.., ..])
        );
        assert_eq!(m.mask_target(), m);
    }

    #[test]
    fn pad_scalar_examples() {
        let v = ndarray::arr2(&[[12.0f64, 0.0, -3.0]]);
        let p = pad_scalar_channel(v.view(), 4);
        assert_eq!(p.dim(), (1, 3, 1, 4));
        assert_eq!(p.slice(s![0, 0, 0, ..]).to_vec(), vec![12.0, 0.0, 0.0, 0.0]);
        assert!(p.slice(s![0, 1, 0, ..]).iter().all(|&x| x == 0.0));
        assert_eq!(norm(p.slice(s![0, 2, 0, ..]).iter().copied()), 3.0);
    }

    #[test]
    fn rejects_nonzero_padding_and_bad_registry() {
        let mut data = Array4::<f64>::zeros((1, 2, 3, 4));
        data[[0, 0, 2, 3]] = 1.0;
        assert!(MediaTensor::with_channels(data.clone(), channels(4)).is_err());
        data[[0, 0, 2, 3]] = 0.0;
        let mut bad = channels(4);
        bad[0].kind = ChannelKind::Media;
        assert!(MediaTensor::with_channels(data.clone(), bad).is_err());
        let mut no_org = channels(4);
        no_org[1].kind = ChannelKind::Media;
        assert!(MediaTensor::with_channels(data.clone(), no_org).is_err());
        assert!(MediaTensor::new(data, channels(4), vec![0, 0]).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let spec = SplitSpec {
            train_end: 99,
            val_fraction: 0.2,
            test_start: 105,
        };
        let a = split(4, 130, &spec, 3).unwrap();
        let b = split(4, 130, &spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.count(), 25 * 4);
        assert_eq!(a.val.count(), 80);
        assert_eq!(a.train.count() + a.val.count(), 400);
        assert!(a.train.is_disjoint(&a.val));
        assert!(a.train.is_disjoint(&a.test));
        assert!(a.val.is_disjoint(&a.test));
        assert!(a.val.cells().all(|(_, t)| t <= 99));
    }

    #[test]
    fn split_zero_fraction_and_errors() {
        let spec = SplitSpec {
            train_end: 9,
            val_fraction: 0.0,
            test_start: 10,
        };
        let s0 = split(3, 12, &spec, 1).unwrap();
        assert!(s0.val.is_empty());
        assert_eq!(s0.train.count(), 30);
        let bad = SplitSpec {
            test_start: 12,
            ..spec
        };
        assert!(matches!(split(3, 12, &bad, 1), Err(NnnError::Empty(_))));
    }

    #[test]
    fn volume_only_keeps_norms() {
        let x = tensor(2, 3, 5);
        let v = x.to_volume_only();
        for g in 0..2 {
            for t in 0..3 {
                assert!((v.channel_volume(g, t, 1) - x.channel_volume(g, t, 1)).abs() < 1e-12);
                assert!(v.data().slice(s![g, t, 1, 1..]).iter().all(|&z| z == 0.0));
            }
        }
        assert_eq!(v.channels()[1].native_dim, 1);
    }

    proptest! {
        #[test]
        fn volume_invariant_under_zero_padding(vals in proptest::collection::vec(-50.0f64..50.0, 1..8), extra in 0usize..5) {
            let d = vals.len();
            let mut a = Array4::<f64>::zeros((1, 1, 3, d));
            let mut b = Array4::<f64>::zeros((1, 1, 3, d + extra));
            for (i, v) in vals.iter().enumerate() {
                a[[0, 0, 1, i]] = *v;
                b[[0, 0, 1, i]] = *v;
            }
            let mut ca = channels(d);
            ca[1].native_dim = d;
            let mut cb = channels(d + extra);
            cb[1].native_dim = d;
            let xa = MediaTensor::with_channels(a, ca).unwrap();
            let xb = MediaTensor::with_channels(b, cb).unwrap();
            prop_assert!((xa.channel_volume(0, 0, 1) - xb.channel_volume(0, 0, 1)).abs() < 1e-9);
        }

        #[test]
        fn masking_commutes_with_split(seed in 0u64..1000) {
            // Split depends only on shape, never on data; masking changes data only.
            let x = tensor(3, 8, 2);
            let spec = SplitSpec { train_end: 5, val_fraction: 0.3, test_start: 6 };
            let a = split(x.geos(), x.weeks(), &spec, seed).unwrap();
            let m = x.mask_target();
            let b = split(m.geos(), m.weeks(), &spec, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

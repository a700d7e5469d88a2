//! Error metrics and the national roll-up.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Nnn;
use crate::scalar::Scalar;
use crate::tensor::{CellMask, MediaTensor, Split};

/// Weekly national series: `(week, predicted, actual)` summed over the
/// selected cells of that week.
pub fn national_rollup(pred: &Array2<f64>, actual: &Array2<f64>, cells: &CellMask) -> Vec<(usize, f64, f64)> {
    cells
        .weeks()
        .into_iter()
        .map(|t| {
            let (mut p, mut a) = (0.0, 0.0);
            for g in 0..pred.nrows() {
                if cells.contains(g, t) {
                    p += pred[[g, t]];
                    a += actual[[g, t]];
                }
            }
            (t, p, a)
        })
        .collect()
}

/// Mean absolute percentage error in percent. Pairs whose actual is exactly
/// zero are skipped; NaN when nothing is left.
pub fn mape(pred: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(pred.len(), actual.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        if *a == 0.0 {
            continue;
        }
        sum += ((a - p) / a).abs();
        n += 1;
    }
    if n < pred.len() {
        log::warn!("mape: skipped {} zero actuals", pred.len() - n);
    }
    if n == 0 {
        f64::NAN
    } else {
        100.0 * sum / n as f64
    }
}

/// `1 - SSE/SST` with SST taken about the mean of `actual`.
pub fn r_squared(pred: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(pred.len(), actual.len());
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum();
    let sst: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    1.0 - sse / sst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mape: f64,
    pub r2: f64,
    pub n: usize,
}

impl Score {
    pub fn of(pred: &[f64], actual: &[f64]) -> Self {
        Self {
            mape: mape(pred, actual),
            r2: r_squared(pred, actual),
            n: pred.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    /// On the weekly national roll-up; used for model selection.
    pub national: Score,
    pub cell: Score,
}

impl SplitScore {
    pub fn mape(&self) -> f64 {
        self.national.mape
    }

    pub fn r2(&self) -> f64 {
        self.national.r2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub train: Option<SplitScore>,
    pub val: Option<SplitScore>,
    pub test: Option<SplitScore>,
    pub param_count: usize,
    /// Fraction of parameters with `|θ| < 1e-6`.
    pub sparsity: f64,
}

pub const SPARSITY_THRESHOLD: f64 = 1e-6;

pub fn split_score(pred: &Array2<f64>, actual: &Array2<f64>, cells: &CellMask) -> Option<SplitScore> {
    if cells.is_empty() {
        return None;
    }
    let roll = national_rollup(pred, actual, cells);
    let (np, na): (Vec<f64>, Vec<f64>) = roll.iter().map(|&(_, p, a)| (p, a)).unzip();
    let (cp, ca): (Vec<f64>, Vec<f64>) = cells.cells().map(|(g, t)| (pred[[g, t]], actual[[g, t]])).unzip();
    Some(SplitScore {
        national: Score::of(&np, &na),
        cell: Score::of(&cp, &ca),
    })
}

/// Sales predictions on the natural scale for every cell.
pub fn predict_levels<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>) -> Result<Array2<f64>> {
    model.check_input(x.view())?;
    Ok(model.predict_sales_level(x.view()))
}

/// Scores the model on each part of the split. Predictions come from a
/// single causal pass over the whole tensor.
pub fn evaluate<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, split: &Split) -> Result<MetricsReport> {
    let pred = predict_levels(model, x)?;
    let actual = x.target_values().mapv(|v| v.f64());
    Ok(MetricsReport {
        train: split_score(&pred, &actual, &split.train),
        val: split_score(&pred, &actual, &split.val),
        test: split_score(&pred, &actual, &split.test),
        param_count: model.param_count(),
        sparsity: model.params.sparsity(SPARSITY_THRESHOLD),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(mape(&[110.0, 180.0], &[100.0, 200.0]), 10.0);
        assert_eq!(r_squared(&[110.0, 180.0], &[100.0, 200.0]), 0.9);
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn zero_actuals_are_skipped() {
        assert_eq!(mape(&[5.0, 110.0], &[0.0, 100.0]), 10.0);
        assert!(mape(&[1.0], &[0.0]).is_nan());
    }

    #[test]
    fn rollup_sums_geos() {
        let pred = array![[1.0, 2.0], [3.0, 4.0]];
        let mask = CellMask(Array2::from_elem((2, 2), true));
        assert_eq!(national_rollup(&pred, &pred, &mask), vec![(0, 4.0, 4.0), (1, 6.0, 6.0)]);
        let one = array![[7.0, 8.0, 9.0]];
        let m1 = CellMask(array![[true, false, true]]);
        assert_eq!(national_rollup(&one, &one, &m1), vec![(0, 7.0, 7.0), (2, 9.0, 9.0)]);
    }

    proptest! {
        #[test]
        fn rollup_is_additive(a in proptest::collection::vec(0.0f64..100.0, 12),
                              b in proptest::collection::vec(0.0f64..100.0, 12),
                              bits in proptest::collection::vec(any::<bool>(), 12)) {
            let a = Array2::from_shape_vec((3, 4), a).unwrap();
            let b = Array2::from_shape_vec((3, 4), b).unwrap();
            let mask = CellMask(Array2::from_shape_vec((3, 4), bits).unwrap());
            let total = &a + &b;
            let ra = national_rollup(&a, &a, &mask);
            let rb = national_rollup(&b, &b, &mask);
            let rt = national_rollup(&total, &total, &mask);
            for ((x, y), z) in ra.iter().zip(&rb).zip(&rt) {
                prop_assert!((x.1 + y.1 - z.1).abs() < 1e-9);
            }
        }

        #[test]
        fn mape_nonnegative_and_r2_at_most_one(
            pa in proptest::collection::vec((-1e3f64..1e3, 1.0f64..1e3), 2..20)) {
            let (p, a): (Vec<f64>, Vec<f64>) = pa.into_iter().unzip();
            prop_assert!(mape(&p, &a) >= 0.0);
            let r = r_squared(&p, &a);
            prop_assert!(r <= 1.0 || r.is_nan());
        }
    }
}

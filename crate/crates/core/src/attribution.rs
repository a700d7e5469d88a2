//! Counterfactual attribution: zero-out, autoregressive unrolling and
//! pause simulation.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::model::Nnn;
use crate::scalar::Scalar;
use crate::sim::mix_percent;
use crate::tensor::MediaTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroOut,
    ArUnroll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrollConfig {
    pub prefix: usize,
    pub horizon: usize,
    /// Explicit window starts; tiled from `prefix` with stride `horizon / 2`
    /// when absent.
    pub starts: Option<Vec<usize>>,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            prefix: 52,
            horizon: 30,
            starts: None,
        }
    }
}

impl UnrollConfig {
    /// Window starts inside `weeks` total weeks.
    pub fn window_starts(&self, weeks: usize) -> Result<Vec<usize>> {
        if self.prefix < 1 {
            return Err(NnnError::Config("unroll prefix must be at least one week".into()));
        }
        if self.prefix + self.horizon > weeks {
            return Err(NnnError::Config(format!(
                "prefix {} + horizon {} exceeds {weeks} weeks",
                self.prefix, self.horizon
            )));
        }
        if let Some(starts) = &self.starts {
            for &s in starts {
                if s < 1 || s + self.horizon > weeks {
                    return Err(NnnError::Config(format!("window start {s} out of range")));
                }
            }
            return Ok(starts.clone());
        }
        let stride = (self.horizon / 2).max(1);
        Ok((self.prefix..=weeks - self.horizon).step_by(stride).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    /// `(G, K)` sales on the natural scale.
    pub sales: Array2<f64>,
    /// `(G, K, D)` search embeddings fed into the search slot, in input units.
    pub search: Array3<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub method: Method,
    pub channels: Vec<String>,
    pub attributed: Vec<f64>,
    pub mix: Vec<f64>,
    /// Window starts (AR) or `[0]` for zero-out.
    pub windows: Vec<usize>,
    pub horizon: usize,
}

/// Mean absolute difference in mix points between an estimate and a reference.
pub fn mix_error(estimate: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(estimate.len(), reference.len());
    estimate.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / estimate.len() as f64
}

fn levels<T: Scalar>(model: &Nnn<T>, sales: &Array2<T>) -> Array2<f64> {
    if model.cfg.log_scale {
        sales.mapv(|v| v.f64().exp())
    } else {
        sales.mapv(|v| v.f64())
    }
}

fn check_channel<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, c: usize) -> Result<()> {
    model.check_input(x.view())?;
    if c >= x.channels().len() {
        return Err(NnnError::UnknownChannel(format!("index {c}")));
    }
    if c == model.arch.target {
        return Err(NnnError::Config("cannot attribute to the target channel".into()));
    }
    Ok(())
}

/// `Σ_{g, t∈weeks} F(X) − F(X̃)` where `X̃` has channel `c` zeroed over
/// `zeroed` (every week when `None`). Later weeks are never fed to the model.
pub fn zero_out_with<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, c: usize, weeks: Range<usize>, zeroed: Option<Range<usize>>) -> Result<f64> {
    check_channel(model, x, c)?;
    if weeks.end > x.weeks() || weeks.start > weeks.end {
        return Err(NnnError::Config(format!("weeks {weeks:?} outside the tensor")));
    }
    let xi = x.slice_weeks(0..weeks.end);
    let zeroed = zeroed.map(|r| r.start.min(weeks.end)..r.end.min(weeks.end));
    let cf = xi.zero_channel(c, zeroed);
    let base = model.predict_sales_level(xi.view());
    let alt = model.predict_sales_level(cf.view());
    Ok((&base - &alt).slice(s![.., weeks]).sum())
}

pub fn zero_out<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, c: usize, weeks: Range<usize>) -> Result<f64> {
    zero_out_with(model, x, c, weeks, None)
}

/// Maps a predicted search embedding back to input units (undoing the log
/// scaling in log mode).
fn to_input_units<T: Scalar>(model: &Nnn<T>, v: Array2<T>) -> Array2<T> {
    if !model.cfg.log_scale {
        return v;
    }
    let mut v = v;
    for mut row in v.rows_mut() {
        let n = row.iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
        if n > 0.0 {
            let k = T::of(n.exp() / n);
            row.mapv_inplace(|a| a * k);
        }
    }
    v
}

/// Unrolls `k` weeks after an observed prefix of `p` weeks. The search slot
/// from week `p` on carries the model's own next-week predictions; sales are
/// recorded but not fed back. `intervention` zeroes a channel from week `p` on
/// (for the search channel this includes the spliced predictions).
pub fn ar_unroll<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, p: usize, k: usize, intervention: Option<usize>) -> Result<Trajectory<T>> {
    unroll(model, x, p, k, intervention, false)
}

fn unroll<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, p: usize, k: usize, intervention: Option<usize>, pin_observed: bool) -> Result<Trajectory<T>> {
    model.check_input(x.view())?;
    if p < 1 {
        return Err(NnnError::Config("unroll prefix must be at least one week".into()));
    }
    if p + k > x.weeks() {
        return Err(NnnError::Config(format!("prefix {p} + horizon {k} exceeds {} weeks", x.weeks())));
    }
    if let Some(c) = intervention {
        check_channel(model, x, c)?;
    }
    let (g, _, _, d) = x.dim();
    let sc = model.arch.search_channel;
    let mut buf = x.slice_weeks(0..p + k);
    if let Some(c) = intervention {
        buf = buf.zero_channel(c, Some(p..p + k));
    }
    let mut sales = Array2::zeros((g, k));
    let mut search = Array3::zeros((g, k, d));
    if k == 0 {
        return Ok(Trajectory { sales, search });
    }
    let next_search = |view: ArrayView4<T>| -> Array2<T> {
        let t = view.dim().1;
        let pred = model.predict_search(view);
        to_input_units(model, pred.index_axis(Axis(1), t - 1).to_owned())
    };
    let mut carry = next_search(buf.view().slice_move(s![.., ..p, .., ..]));
    for step in 0..k {
        let t = p + step;
        let spliced = if pin_observed {
            x.view().slice(s![.., t, sc, ..]).to_owned()
        } else if intervention == Some(sc) {
            Array2::zeros((g, d))
        } else {
            carry
        };
        buf.data_mut().slice_mut(s![.., t, sc, ..]).assign(&spliced);
        search.slice_mut(s![.., step, ..]).assign(&spliced);
        let view = buf.view().slice_move(s![.., ..t + 1, .., ..]);
        let pred = model.forward(view);
        let row = levels(model, &pred.sales.slice(s![.., t..t + 1]).to_owned());
        if row.iter().any(|v| !v.is_finite()) {
            return Err(NnnError::Divergence {
                step,
                detail: "non-finite sales during unroll".into(),
            });
        }
        sales.slice_mut(s![.., step]).assign(&row.column(0));
        carry = to_input_units(model, pred.search.index_axis(Axis(1), t).to_owned());
    }
    Ok(Trajectory { sales, search })
}

/// Attributed sales of channel `c`, averaged over unroll windows.
pub fn attribute_ar<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, c: usize, cfg: &UnrollConfig) -> Result<f64> {
    let starts = cfg.window_starts(x.weeks())?;
    let per = ar_windows(model, x, &[c], cfg.horizon, &starts)?;
    Ok(per[0])
}

/// Average over windows of `Σ unroll(no intervention) − unroll(zero c)` for
/// each channel. Windows run on scoped threads.
fn ar_windows<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, channels: &[usize], horizon: usize, starts: &[usize]) -> Result<Vec<f64>> {
    if starts.is_empty() {
        return Err(NnnError::Empty("no unroll windows".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(starts.len());
    let chunks: Vec<&[usize]> = starts.chunks(starts.len().div_ceil(workers)).collect();
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || -> Result<Vec<f64>> {
                    let mut acc = vec![0.0; channels.len()];
                    for &p in chunk.iter() {
                        let base = ar_unroll(model, x, p, horizon, None)?.sales.sum();
                        for (a, &c) in acc.iter_mut().zip(channels) {
                            *a += base - ar_unroll(model, x, p, horizon, Some(c))?.sales.sum();
                        }
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("unroll worker panicked")).collect()
    });
    let mut total = vec![0.0; channels.len()];
    for r in results {
        for (t, v) in total.iter_mut().zip(r?) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|v| v / starts.len() as f64).collect())
}

/// Attribution for several channels over the first `period_end` weeks, with
/// mix% across them.
pub fn attribute<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, channels: &[usize], method: Method, cfg: &UnrollConfig, period_end: usize) -> Result<AttributionReport> {
    if period_end == 0 || period_end > x.weeks() {
        return Err(NnnError::Config(format!("attribution period 0..{period_end} outside the tensor")));
    }
    for &c in channels {
        check_channel(model, x, c)?;
    }
    let (attributed, windows, horizon) = match method {
        Method::ZeroOut => {
            let v = channels.iter().map(|&c| zero_out(model, x, c, 0..period_end)).collect::<Result<Vec<_>>>()?;
            (v, vec![0], period_end)
        }
        Method::ArUnroll => {
            let xp = x.slice_weeks(0..period_end);
            let starts = cfg.window_starts(period_end)?;
            (ar_windows(model, &xp, channels, cfg.horizon, &starts)?, starts, cfg.horizon)
        }
    };
    Ok(AttributionReport {
        method,
        channels: channels.iter().map(|&c| x.channels()[c].name.clone()).collect(),
        mix: mix_percent(&attributed),
        attributed,
        windows,
        horizon,
    })
}

/// National weekly sales over a pause window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauseReport {
    pub channel: String,
    pub start: usize,
    pub weeks: Vec<i64>,
    /// Standard inference on observed data.
    pub baseline: Vec<f64>,
    /// Standard inference with the channel zeroed over the window.
    pub standard: Vec<f64>,
    /// Unrolled from `start` without intervention.
    pub ar_baseline: Vec<f64>,
    /// Unrolled from `start` with the channel zeroed.
    pub ar: Vec<f64>,
}

impl PauseReport {
    pub fn standard_drop(&self) -> f64 {
        self.baseline.iter().sum::<f64>() - self.standard.iter().sum::<f64>()
    }

    pub fn ar_drop(&self) -> f64 {
        self.ar_baseline.iter().sum::<f64>() - self.ar.iter().sum::<f64>()
    }
}

/// Sets channel `c` to zero for `len` weeks starting at `start` and compares
/// standard inference against an unroll that lets the pause propagate through
/// predicted search.
pub fn pause_simulation<T: Scalar>(model: &Nnn<T>, x: &MediaTensor<T>, c: usize, start: usize, len: usize) -> Result<PauseReport> {
    check_channel(model, x, c)?;
    if start < 1 || start + len > x.weeks() {
        return Err(NnnError::Config(format!("pause {start}..{} outside 1..{}", start + len, x.weeks())));
    }
    let end = start + len;
    let xi = x.slice_weeks(0..end);
    let national = |a: Array2<f64>| -> Vec<f64> { a.slice(s![.., start..end]).sum_axis(Axis(0)).to_vec() };
    let baseline = national(model.predict_sales_level(xi.view()));
    let standard = national(model.predict_sales_level(xi.zero_channel(c, Some(start..end)).view()));
    let ar_baseline = ar_unroll(model, x, start, len, None)?.sales.sum_axis(Axis(0)).to_vec();
    let ar = ar_unroll(model, x, start, len, Some(c))?.sales.sum_axis(Axis(0)).to_vec();
    Ok(PauseReport {
        channel: x.channels()[c].name.clone(),
        start,
        weeks: x.time_index()[start..end].to_vec(),
        baseline,
        standard,
        ar_baseline,
        ar,
    })
}

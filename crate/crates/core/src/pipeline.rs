//! Glue from a dataset and a [`RunConfig`] to a trained model and its metrics.

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::Result;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Nnn;
use crate::scalar::Scalar;
use crate::sim::{simulate, SimConfig};
use crate::tensor::{split, MediaTensor, Split, SplitSpec};
use crate::train::{train, TrainReport};

pub fn make_split(weeks: usize, geos: usize, cfg: &RunConfig) -> Result<Split> {
    let spec = SplitSpec::tail(weeks, cfg.split.test_weeks, cfg.split.val_fraction);
    split(geos, weeks, &spec, cfg.split.seed)
}

/// The tensor as the model sees it under `cfg` (volume-only when requested).
pub fn model_input<T: Scalar>(x: &MediaTensor<T>, cfg: &RunConfig) -> MediaTensor<T> {
    if cfg.volume_only {
        x.to_volume_only()
    } else {
        x.clone()
    }
}

pub struct Fitted<T> {
    pub model: Nnn<T>,
    pub split: Split,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

/// Builds, trains and evaluates one model. `x` must already be the model input.
pub fn fit<T: Scalar>(x: &MediaTensor<T>, cfg: &RunConfig) -> Result<Fitted<T>> {
    cfg.validate()?;
    let sp = make_split(x.weeks(), x.geos(), cfg)?;
    let mut model = Nnn::<T>::for_tensor(cfg.model.clone(), x)?;
    let report = train(&mut model, x, &sp, &cfg.train, &cfg.phases)?;
    let metrics = evaluate(&model, x, &sp)?;
    Ok(Fitted {
        model,
        split: sp,
        report,
        metrics,
    })
}

/// Everything that determines an end-to-end run on simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: MetricsReport,
    pub final_loss: Option<crate::model::LossParts>,
    pub steps: usize,
}

/// Simulates, trains and evaluates; returns pretty JSON of the summary.
pub fn end_to_end(spec: &RunSpec) -> Result<String> {
    let sim = simulate(&spec.sim)?;
    let summary = match spec.run.precision {
        Precision::F32 => summarize(fit(&model_input(&sim.tensor.cast::<f32>(), &spec.run), &spec.run)?),
        Precision::F64 => summarize(fit(&model_input(&sim.tensor, &spec.run), &spec.run)?),
    };
    Ok(serde_json::to_string_pretty(&summary)?)
}

fn summarize<T: Scalar>(f: Fitted<T>) -> RunSummary {
    RunSummary {
        metrics: f.metrics,
        final_loss: f.report.trace.last().map(|r| r.loss),
        steps: f.report.trace.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunSpec {
        let mut run = RunConfig::parse_str(
            "n_layers = 1\nd_ff = 8\nhead_layers = 1\nhead_width = 8\nattention_hidden = 8\nlookback_window = 4\n\
             steps = 6\nwarmup_steps = 2\ntest_weeks = 4\nprecision = f64\n",
        )
        .unwrap();
        run.set_seed(3);
        RunSpec {
            sim: SimConfig {
                geos: 3,
                weeks: 16,
                dim: 4,
                ..Default::default()
            },
            run,
        }
    }

    #[test]
    fn end_to_end_is_reproducible() {
        let spec = tiny();
        let a = end_to_end(&spec).unwrap();
        assert_eq!(a, end_to_end(&spec).unwrap());
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["steps"], 6);
        for k in ["train", "val", "test"] {
            assert!(v["metrics"][k]["national"]["mape"].as_f64().unwrap() >= 0.0);
        }
    }

    #[test]
    fn volume_only_input_has_scalar_channels() {
        let mut spec = tiny();
        spec.run.volume_only = true;
        let sim = simulate(&spec.sim).unwrap();
        let x = model_input(&sim.tensor, &spec.run);
        assert!(x.data().slice(ndarray::s![.., .., 1.., 1..]).iter().all(|&v| v == 0.0));
        end_to_end(&spec).unwrap();
    }
}

//! Full-batch Adam training with warmup/decay, global-norm clipping and
//! gradient noise, plus the L1 grid sweep.

use std::sync::Mutex;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{LossParts, LossSelection, ModelConfig, Nnn};
use crate::scalar::Scalar;
use crate::tensor::{CellMask, MediaTensor, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayShape {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub initial_lr: f64,
    /// Horizon of the decay, counted from step 0 (warmup included).
    pub decay_steps: usize,
    pub decay: DecayShape,
    pub clip_norm: f64,
    pub grad_noise: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 100,
            steps: 5000,
            initial_lr: 1e-7,
            decay_steps: 14_000,
            decay: DecayShape::Cosine,
            clip_norm: 1.0,
            grad_noise: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.steps.max(1) && self.steps > 0 {
            return Err(NnnError::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.lr < 0.0 || self.initial_lr < 0.0 || self.clip_norm <= 0.0 || self.grad_noise < 0.0 {
            return Err(NnnError::Config("learning rates and noise must be >= 0, clip > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(NnnError::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate at global step `step` (0-based): linear warmup from
    /// `initial_lr` to `lr`, then decay toward zero at `decay_steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.initial_lr + (self.lr - self.initial_lr) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.decay_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr;
        }
        let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        match self.decay {
            DecayShape::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            DecayShape::Linear => self.lr * (1.0 - frac),
            DecayShape::Constant => self.lr,
        }
    }
}

/// `(steps, balancing)`: one stage of a multi-stage recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: usize,
    pub balancing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
}

/// Adam moments kept in f64 regardless of parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[f64], trainable: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let update = lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
            if update != 0.0 {
                params[i] = T::of(params[i].f64() - update);
            }
        }
    }
}

/// Scales `g` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    norm
}

/// Training view: the tensor cut at the end of the training window and the
/// loss selection inside it. The model is causal, so later weeks cannot
/// influence any training prediction.
pub fn training_view<T: Scalar>(x: &MediaTensor<T>, split: &Split) -> (MediaTensor<T>, LossSelection) {
    let end = split.train_end() + 1;
    let xt = x.slice_weeks(0..end);
    let cells = CellMask(split.train.0.slice(s![.., ..end]).to_owned());
    (
        xt,
        LossSelection {
            sales_cells: cells,
            search_weeks: end,
        },
    )
}

/// Runs the phases in order, continuing the global step count and the
/// optimizer state across them. With no phases, trains `cfg.steps` steps at
/// the model's own balancing coefficient; otherwise `cfg.steps` is ignored.
pub fn train<T: Scalar>(model: &mut Nnn<T>, x: &MediaTensor<T>, split: &Split, cfg: &TrainConfig, phases: &[Phase]) -> Result<TrainReport> {
    train_observed(model, x, split, cfg, phases, |_, _| {})
}

/// [`train`] with a callback after every update.
pub fn train_observed<T, F>(model: &mut Nnn<T>, x: &MediaTensor<T>, split: &Split, cfg: &TrainConfig, phases: &[Phase], mut observe: F) -> Result<TrainReport>
where
    T: Scalar,
    F: FnMut(&StepRecord, &Nnn<T>),
{
    let phases: Vec<Phase> = if phases.is_empty() {
        vec![Phase {
            steps: cfg.steps,
            balancing: model.cfg.balancing,
        }]
    } else {
        phases.to_vec()
    };
    TrainConfig {
        steps: phases.iter().map(|p| p.steps).sum(),
        ..cfg.clone()
    }
    .validate()?;
    model.check_input(x.view())?;
    let (xt, sel) = training_view(x, split);
    let trainable = model.params.trainable_mask();
    let mut adam = Adam::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x6e6f697365);
    let noise = (cfg.grad_noise > 0.0).then(|| Normal::new(0.0, cfg.grad_noise).unwrap());
    let mut report = TrainReport::default();
    let mut step = 0;
    for (pi, phase) in phases.iter().enumerate() {
        if !(0.0..=1.0).contains(&phase.balancing) {
            return Err(NnnError::Config(format!("phase balancing {} outside [0, 1]", phase.balancing)));
        }
        model.cfg.balancing = phase.balancing;
        for _ in 0..phase.steps {
            let (parts, grads) = model.loss_and_grad(xt.view(), &sel)?;
            let mut g: Vec<f64> = grads.values().iter().map(|v| v.f64()).collect();
            let norm = clip_global_norm(&mut g, cfg.clip_norm);
            if !parts.total.is_finite() || !norm.is_finite() {
                return Err(NnnError::Divergence {
                    step,
                    detail: format!("loss {:?}, gradient norm {norm}", parts),
                });
            }
            if let Some(dist) = &noise {
                for (gi, &m) in g.iter_mut().zip(&trainable) {
                    if m {
                        *gi += dist.sample(&mut rng);
                    }
                }
            }
            let lr = cfg.learning_rate(step);
            adam.step(model.params.values_mut(), &g, &trainable, lr, cfg);
            let rec = StepRecord {
                step,
                phase: pi,
                lr,
                grad_norm: norm,
                loss: parts,
            };
            observe(&rec, model);
            report.trace.push(rec);
            if step % 500 == 0 {
                log::debug!("step {step} phase {pi} loss {:.6e} (sales {:.4e}, search {:.4e})", parts.total, parts.sales, parts.search);
            }
            step += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub l1: f64,
    pub metrics: MetricsReport,
    /// Mean absolute mix-point error against ground truth, when available.
    pub attribution_error: Option<f64>,
    pub final_loss: Option<LossParts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Index of the row with the lowest national validation MAPE.
    pub best: usize,
}

pub struct SweepSpec<'a> {
    pub lambdas: &'a [f64],
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub phases: &'a [Phase],
    pub workers: usize,
}

/// Trains one model per λ (up to `workers` at a time) and picks the best by
/// validation MAPE. `score` receives each trained model and may return an
/// attribution error. Trained models are returned in grid order.
pub fn l1_sweep<T, F>(x: &MediaTensor<T>, split: &Split, spec: &SweepSpec<'_>, score: F) -> Result<(SweepReport, Vec<Nnn<T>>)>
where
    T: Scalar,
    F: Fn(&Nnn<T>) -> Result<Option<f64>> + Sync,
{
    if spec.lambdas.is_empty() {
        return Err(NnnError::Empty("empty λ grid".into()));
    }
    let slots: Vec<Mutex<Option<Result<(SweepRow, Nnn<T>)>>>> = spec.lambdas.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let run = |i: usize| -> Result<(SweepRow, Nnn<T>)> {
        let cfg = ModelConfig {
            l1: spec.lambdas[i],
            ..spec.model.clone()
        };
        let mut model = Nnn::<T>::for_tensor(cfg, x)?;
        let report = train(&mut model, x, split, spec.train, spec.phases)?;
        let metrics = evaluate(&model, x, split)?;
        let attribution_error = score(&model)?;
        Ok((
            SweepRow {
                l1: spec.lambdas[i],
                metrics,
                attribution_error,
                final_loss: report.trace.last().map(|r| r.loss),
            },
            model,
        ))
    };
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.max(1).min(spec.lambdas.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= spec.lambdas.len() {
                    break;
                }
                let out = run(i);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for s in slots {
        let (row, model) = s.into_inner().unwrap().expect("every slot filled")?;
        rows.push(row);
        models.push(model);
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let ka = a.1.metrics.val.as_ref().map_or(f64::INFINITY, |m| m.mape());
            let kb = b.1.metrics.val.as_ref().map_or(f64::INFINITY, |m| m.mape());
            ka.total_cmp(&kb)
        })
        .map(|(i, _)| i)
        .unwrap();
    Ok((SweepReport { rows, best }, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::sim::{simulate, SimConfig};
    use crate::tensor::{split, SplitSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_shape() {
        let c = TrainConfig::default();
        assert_abs_diff_eq!(c.learning_rate(0), 1e-7, epsilon = 1e-18);
        assert_abs_diff_eq!(c.learning_rate(50), 1e-7 + (1e-4 - 1e-7) * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c.learning_rate(100), 1e-4, epsilon = 1e-15);
        let mid = 100 + (14_000 - 100) / 2;
        assert_abs_diff_eq!(c.learning_rate(mid), 0.5e-4, epsilon = 1e-12);
        assert_eq!(c.learning_rate(14_000), 0.0);
        assert_eq!(c.learning_rate(20_000), 0.0);
        for s in 100..5000 {
            assert!(c.learning_rate(s + 1) <= c.learning_rate(s));
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!((g[0] * g[0] + g[1] * g[1]).sqrt(), 1.0, epsilon = 1e-15);
        let mut small = vec![0.1, 0.2];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn adam_minimizes_convex_quadratic() {
        // f(θ) = Σ (θ_i - c_i)^2 with minimizer c.
        let c = [1.5, -2.0, 0.25];
        let cfg = TrainConfig {
            lr: 0.05,
            warmup_steps: 0,
            decay: DecayShape::Constant,
            ..Default::default()
        };
        let mut theta = vec![0.0f64; 3];
        let mut adam = Adam::new(3);
        for step in 0..4000 {
            let lr = if step < 3000 { cfg.lr } else { cfg.lr * 0.01 };
            let g: Vec<f64> = theta.iter().zip(&c).map(|(t, c)| 2.0 * (t - c)).collect();
            adam.step(&mut theta, &g, &[true; 3], lr, &cfg);
        }
        for (t, c) in theta.iter().zip(&c) {
            assert!((t - c).abs() < 1e-3, "{theta:?}");
        }
    }

    fn tiny() -> (MediaTensor<f64>, Split, ModelConfig) {
        let sim = simulate(&SimConfig {
            geos: 3,
            weeks: 16,
            dim: 4,
            ..Default::default()
        })
        .unwrap();
        let x = sim.tensor;
        let sp = split(3, 16, &SplitSpec::tail(16, 4, 0.1), 0).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            d_ff: 8,
            head_layers: 1,
            head_width: 8,
            attention: AttentionConfig {
                hidden: 8,
                lookback_window: 4,
                ..Default::default()
            },
            l1: 0.01,
            ..Default::default()
        };
        (x, sp, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (x, sp, cfg) = tiny();
        let mut m = Nnn::<f64>::for_tensor(cfg, &x).unwrap();
        let before = m.params.clone();
        let tc = TrainConfig {
            lr: 0.0,
            initial_lr: 0.0,
            steps: 5,
            warmup_steps: 1,
            ..Default::default()
        };
        train(&mut m, &x, &sp, &tc, &[]).unwrap();
        assert_eq!(m.params.values(), before.values());
    }

    #[test]
    fn same_seed_same_trace_and_phases_continue() {
        let (x, sp, cfg) = tiny();
        let tc = TrainConfig {
            steps: 12,
            warmup_steps: 3,
            lr: 1e-3,
            ..Default::default()
        };
        let phases = [
            Phase { steps: 6, balancing: 0.5 },
            Phase { steps: 6, balancing: 0.99 },
        ];
        let run = || {
            let mut m = Nnn::<f64>::for_tensor(cfg.clone(), &x).unwrap();
            let r = train(&mut m, &x, &sp, &tc, &phases).unwrap();
            (r, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa.values(), pb.values());
        assert_eq!(a.trace.len(), 12);
        assert_eq!(a.trace[6].step, 6);
        assert_eq!(a.trace[6].phase, 1);
        assert_eq!(a.trace[6].lr, tc.learning_rate(6));
        assert!(a.trace[..3].windows(2).all(|w| w[1].lr > w[0].lr));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut x, sp, cfg) = tiny();
        let mut data = x.data().clone();
        data[[0, 0, 1, 0]] = f64::NAN;
        x = MediaTensor::new(data, x.channels().to_vec(), x.time_index().to_vec()).unwrap();
        let mut m = Nnn::<f64>::for_tensor(cfg, &x).unwrap();
        let tc = TrainConfig {
            steps: 3,
            warmup_steps: 1,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &x, &sp, &tc, &[]), Err(NnnError::Divergence { step: 0, .. })));
    }

    #[test]
    fn training_reduces_loss() {
        let (x, sp, cfg) = tiny();
        let mut m = Nnn::<f64>::for_tensor(cfg, &x).unwrap();
        let tc = TrainConfig {
            steps: 150,
            warmup_steps: 10,
            lr: 3e-3,
            decay_steps: 150,
            ..Default::default()
        };
        let r = train(&mut m, &x, &sp, &tc, &[]).unwrap();
        let first = r.trace.first().unwrap().loss.total;
        let last = r.trace.last().unwrap().loss.total;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn sweep_is_independent_of_worker_count() {
        let (x, sp, cfg) = tiny();
        let tc = TrainConfig {
            steps: 4,
            warmup_steps: 1,
            ..Default::default()
        };
        let lambdas = [0.0, 0.1, 10.0];
        let run = |workers| {
            let spec = SweepSpec {
                lambdas: &lambdas,
                model: &cfg,
                train: &tc,
                phases: &[],
                workers,
            };
            l1_sweep(&x, &sp, &spec, |_| Ok(None)).unwrap()
        };
        let (a, ma) = run(1);
        let (b, mb) = run(3);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(ma[2].params.values(), mb[2].params.values());
        assert!(a.best < 3);
    }
}

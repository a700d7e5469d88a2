//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference half-step `h`.
    pub step: f64,
    /// Stores with more trainable scalars than this are sampled.
    pub exhaustive_limit: usize,
    /// Coordinates drawn per parameter array when sampling.
    pub per_array: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            exhaustive_limit: 10_000,
            per_array: 6,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter name and flat offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn coordinates<T: Scalar>(store: &ParamStore<T>, cfg: &GradCheckConfig) -> Vec<(usize, usize)> {
    let exhaustive = store.trainable_count() <= cfg.exhaustive_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for r in store.refs() {
        if !store.is_trainable(*r) {
            continue;
        }
        if exhaustive || r.len() <= cfg.per_array {
            out.extend((0..r.len()).map(|k| (r.index, r.offset + k)));
        } else {
            out.extend(
                sample(&mut rng, r.len(), cfg.per_array)
                    .into_iter()
                    .map(|k| (r.index, r.offset + k)),
            );
        }
    }
    out
}

/// Compares `analytic` against `(f(θ + h e_i) - f(θ - h e_i)) / 2h` on every
/// trainable coordinate (or a seeded sample of them for large stores).
/// Relative error is `|a - n| / max(|a|, |n|, floor)`. `store` is restored.
pub fn grad_check<T: Scalar, F>(
    store: &mut ParamStore<T>,
    mut f: F,
    analytic: &Gradients<T>,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<T>) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (idx, k) in coordinates(store, cfg) {
        let orig = store.values()[k];
        store.values_mut()[k] = orig + T::of(cfg.step);
        let up = f(store);
        store.values_mut()[k] = orig - T::of(cfg.step);
        let down = f(store);
        store.values_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic.values()[k].f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.entries()[idx].name.clone(), k));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::params::Init;

    fn store(n: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add("theta", 1, n, Init::Glorot, true, &mut rng);
        s
    }

    #[test]
    fn quadratic_matches_to_machine_precision() {
        let mut s = store(12);
        let mut g = Gradients::zeros_like(&s);
        for (gi, v) in g.values_mut().iter_mut().zip(s.values()) {
            *gi = 2.0 * v;
        }
        let r = grad_check(&mut s, |p| p.values().iter().map(|v| v * v).sum(), &g, &GradCheckConfig::default());
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut s = store(5);
        let g = Gradients::zeros_like(&s);
        let r = grad_check(&mut s, |_| 3.5, &g, &GradCheckConfig::default());
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = store(4);
        let g = Gradients::zeros_like(&s);
        let r = grad_check(&mut s, |p| p.values().iter().sum(), &g, &GradCheckConfig::default());
        assert!(r.max_rel_error > 0.5);
        assert!(r.worst.is_some());
    }

    #[test]
    fn large_stores_are_sampled() {
        let mut s = store(20_000);
        let g = Gradients::zeros_like(&s);
        let r = grad_check(&mut s, |_| 0.0, &g, &GradCheckConfig::default());
        assert_eq!(r.checked, 6);
    }
}

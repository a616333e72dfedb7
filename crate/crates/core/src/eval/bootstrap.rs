use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Attempts per resample before giving up when resamples keep losing a
    /// class the metric needs.
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            level: 0.95,
            seed: 0,
            max_redraws: 100,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 {
            return Err(Error::config("bootstrap_n", "must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config("ci_level", "must lie in (0, 1)"));
        }
        if self.max_redraws == 0 {
            return Err(Error::config("max_redraws", "must be positive"));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws resample `b`'s unit indices, redrawing while `accept` reports
/// insufficient data. Each attempt has its own substream, so the result
/// does not depend on which thread runs it.
fn resample<T>(
    n: usize,
    cfg: &BootstrapConfig,
    b: usize,
    mut accept: impl FnMut(&[usize]) -> Result<T>,
) -> Result<T> {
    for attempt in 0..cfg.max_redraws {
        let mut r = rng::stream(cfg.seed, &[rng::tag("bootstrap"), b as u64, attempt as u64]);
        let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
        match accept(&idx) {
            Err(Error::InsufficientData(_)) => continue,
            other => return other,
        }
    }
    Err(Error::InsufficientData(format!(
        "bootstrap resample {b} lost a required class {} times in a row",
        cfg.max_redraws
    )))
}

/// Percentile interval of `metric` over resamples (with replacement) of
/// `units`. Units are exams in practice, keeping within-exam correlation.
pub fn bootstrap_ci<U, F>(units: &[U], metric: F, cfg: &BootstrapConfig) -> Result<[f64; 2]>
where
    U: Sync,
    F: Fn(&[&U]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if units.is_empty() {
        return Err(Error::InsufficientData("bootstrap over zero units".into()));
    }
    let mut values = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|b| {
            resample(units.len(), cfg, b, |idx| {
                let view: Vec<&U> = idx.iter().map(|&i| &units[i]).collect();
                metric(&view)
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let tail = (1.0 - cfg.level) / 2.0;
    Ok([percentile(&values, tail), percentile(&values, 1.0 - tail)])
}

/// One-sided paired bootstrap p-value for "B improves on A": the fraction of
/// resamples in which `metric(B) ≤ metric(A)` (ties count against B).
pub fn bootstrap_pvalue<U, F>(a: &[U], b: &[U], metric: F, cfg: &BootstrapConfig) -> Result<f64>
where
    U: Sync,
    F: Fn(&[&U]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InsufficientData(format!(
            "paired bootstrap needs equal, non-empty unit lists ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let not_better = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|r| {
            resample(a.len(), cfg, r, |idx| {
                let va: Vec<&U> = idx.iter().map(|&i| &a[i]).collect();
                let vb: Vec<&U> = idx.iter().map(|&i| &b[i]).collect();
                Ok(metric(&vb)? <= metric(&va)?)
            })
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&x| x)
        .count();
    Ok(not_better as f64 / cfg.n_resamples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auc_from_scores;
    use rand::{rngs::StdRng, SeedableRng};

    fn mean(v: &[&f64]) -> Result<f64> {
        Ok(v.iter().copied().sum::<f64>() / v.len() as f64)
    }

    /// Units of (score, positive) pairs for AUC tests.
    fn auc(v: &[&(f64, bool)]) -> Result<f64> {
        let pos: Vec<f64> = v.iter().filter(|u| u.1).map(|u| u.0).collect();
        let neg: Vec<f64> = v.iter().filter(|u| !u.1).map(|u| u.0).collect();
        auc_from_scores(&pos, &neg)
    }

    fn cfg(seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&v, 0.5), 2.5);
    }

    #[test]
    fn constant_metric_collapses() {
        let units: Vec<f64> = (0..30).map(|v| v as f64).collect();
        assert_eq!(bootstrap_ci(&units, |_| Ok(0.25), &cfg(1)).unwrap(), [0.25, 0.25]);
    }

    #[test]
    fn separated_auc_interval_is_one() {
        let units: Vec<(f64, bool)> = (0..20).map(|i| (i as f64, i >= 10)).collect();
        assert_eq!(bootstrap_ci(&units, auc, &cfg(2)).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut r = StdRng::seed_from_u64(3);
        let units: Vec<(f64, bool)> = (0..60).map(|i| (r.gen::<f64>() + (i % 2) as f64 * 0.3, i % 2 == 0)).collect();
        let a = bootstrap_ci(&units, auc, &cfg(9)).unwrap();
        let b = bootstrap_ci(&units, auc, &cfg(9)).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let c = bootstrap_ci(&units, auc, &cfg(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn resamples_losing_a_class_are_redrawn() {
        // One positive among 30 units: many resamples miss it.
        let units: Vec<(f64, bool)> = (0..30).map(|i| (i as f64, i == 29)).collect();
        let ci = bootstrap_ci(&units, auc, &cfg(4)).unwrap();
        assert_eq!(ci, [1.0, 1.0]);
        let one_class: Vec<(f64, bool)> = (0..5).map(|i| (i as f64, true)).collect();
        assert!(matches!(
            bootstrap_ci(&one_class, auc, &BootstrapConfig { n_resamples: 3, max_redraws: 5, ..cfg(0) }),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn mean_interval_covers_the_true_mean() {
        let fixed: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let covered = (0..100)
            .filter(|&s| {
                let [lo, hi] = bootstrap_ci(&fixed, mean, &cfg(s)).unwrap();
                lo <= 50.5 && 50.5 <= hi
            })
            .count();
        assert!(covered >= 90, "{covered}");

        // Samples from the population {1..100}: nominal 95% coverage.
        let covered = (0..100)
            .filter(|&s| {
                let mut r = StdRng::seed_from_u64(1000 + s);
                let sample: Vec<f64> = (0..100).map(|_| r.gen_range(1..=100) as f64).collect();
                let [lo, hi] = bootstrap_ci(&sample, mean, &cfg(s)).unwrap();
                lo <= 50.5 && 50.5 <= hi
            })
            .count();
        assert!(covered >= 90, "{covered}");
    }

    #[test]
    fn pvalue_of_identical_models_is_one() {
        let mut r = StdRng::seed_from_u64(5);
        let units: Vec<(f64, bool)> = (0..40).map(|i| (r.gen::<f64>(), i % 3 == 0)).collect();
        assert_eq!(bootstrap_pvalue(&units, &units, auc, &cfg(1)).unwrap(), 1.0);
    }

    #[test]
    fn pvalue_of_uniform_improvement_is_zero() {
        let mut r = StdRng::seed_from_u64(6);
        let a: Vec<(f64, bool)> = (0..40).map(|i| (r.gen::<f64>(), i % 3 == 0)).collect();
        let b: Vec<(f64, bool)> = a.iter().map(|&(s, p)| (if p { s + 10.0 } else { s }, p)).collect();
        assert_eq!(bootstrap_pvalue(&a, &b, auc, &cfg(1)).unwrap(), 0.0);
    }

    #[test]
    fn pvalue_under_no_true_gap_is_mid_range() {
        // Two models scoring the same labels with identically distributed
        // noise: p-values spread over (0, 1) around one half.
        let mut mid = 0;
        let mut total = 0.0;
        let n_seeds = 40;
        for s in 0..n_seeds {
            let mut r = StdRng::seed_from_u64(500 + s);
            let labels: Vec<bool> = (0..80).map(|i| i % 2 == 0).collect();
            let score = |r: &mut StdRng, p: bool| p as u8 as f64 * 0.8 + r.gen::<f64>() * 2.0;
            let a: Vec<(f64, bool)> = labels.iter().map(|&p| (score(&mut r, p), p)).collect();
            let b: Vec<(f64, bool)> = labels.iter().map(|&p| (score(&mut r, p), p)).collect();
            let p = bootstrap_pvalue(&a, &b, auc, &BootstrapConfig { n_resamples: 400, ..cfg(s) }).unwrap();
            total += p;
            if (0.2..=0.8).contains(&p) {
                mid += 1;
            }
        }
        let mean_p = total / n_seeds as f64;
        assert!(mid * 2 >= n_seeds, "{mid}/{n_seeds} in [0.2, 0.8]");
        assert!((0.35..=0.65).contains(&mean_p), "mean p {mean_p}");
    }

    #[test]
    fn unpaired_inputs_error() {
        let a = vec![1.0, 2.0];
        let b = vec![1.0];
        assert!(bootstrap_pvalue(&a, &b, mean, &cfg(0)).is_err());
    }
}

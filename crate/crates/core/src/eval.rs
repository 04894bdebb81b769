//! Error metrics, the double-robustness stress harness, consistency sweeps
//! and node-level sample splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NetworkDataset;
use crate::dgp::{generate, DgpSpec, GeneratedDataset, GraphKind, Truth};
use crate::error::{Result, TnetError};
use crate::estimation::{psi_hat, EffectEstimate, EstimandSpec, Method};
use crate::model::{ModelConfig, TNetModel};
use crate::training::{eic_values, fit, mean_sd, summarize_eic, EicSummary, TrainConfig, TrainOptions};
pub use crate::training::{CorruptionMode, CorruptionSpec, CorruptionTarget};

/// Denominators smaller than this make MAPE undefined.
pub const MAPE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    WithinSample,
    OutOfSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub estimand: String,
    pub mae_average: f64,
    pub pehe_individual: Option<f64>,
    pub mape_average: Option<f64>,
    pub mape_individual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub entries: Vec<MetricEntry>,
}

/// An estimate paired with its truth, both optionally per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectComparison {
    pub estimand: String,
    pub estimate: f64,
    pub estimate_per_unit: Option<Vec<f64>>,
    pub truth: f64,
    pub truth_per_unit: Vec<f64>,
}

impl EffectComparison {
    pub fn from_estimate(est: &EffectEstimate, truth: (f64, Vec<f64>)) -> Self {
        Self {
            estimand: est.spec.kind.name().to_string(),
            estimate: est.average,
            estimate_per_unit: est.per_unit.clone(),
            truth: truth.0,
            truth_per_unit: truth.1,
        }
    }
}

pub fn compute_metrics(comparisons: &[EffectComparison], split: Split) -> Result<MetricReport> {
    let mut entries = Vec::with_capacity(comparisons.len());
    for c in comparisons {
        let mape_average = (c.truth.abs() >= MAPE_GUARD).then(|| ((c.truth - c.estimate) / c.truth).abs());
        let (pehe, mape_ind) = match &c.estimate_per_unit {
            Some(est) => {
                if est.len() != c.truth_per_unit.len() {
                    return Err(TnetError::dim(
                        "compute_metrics per-unit estimates",
                        c.truth_per_unit.len(),
                        est.len(),
                    ));
                }
                let n = est.len() as f64;
                let sq: f64 = est.iter().zip(&c.truth_per_unit).map(|(e, t)| (e - t).powi(2)).sum();
                let guarded = c.truth_per_unit.iter().all(|t| t.abs() >= MAPE_GUARD);
                let mape = guarded.then(|| {
                    est.iter()
                        .zip(&c.truth_per_unit)
                        .map(|(e, t)| ((t - e) / t).abs())
                        .sum::<f64>()
                        / n
                });
                (Some((sq / n).sqrt()), mape)
            }
            None => (None, None),
        };
        entries.push(MetricEntry {
            estimand: c.estimand.clone(),
            mae_average: (c.estimate - c.truth).abs(),
            pehe_individual: pehe,
            mape_average,
            mape_individual: mape_ind,
        });
    }
    Ok(MetricReport { split, entries })
}

/// Node-level random split into `(train, held_out)` index sets.
pub fn within_out_split(
    n: usize,
    train_fraction: f64,
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) || !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(TnetError::config("fractions", "each fraction must lie in [0, 1]"));
    }
    if train_fraction + held_out_fraction > 1.0 + 1e-12 {
        return Err(TnetError::config("fractions", "fractions must sum to at most 1"));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_held = ((n as f64 * held_out_fraction).round() as usize).min(n - n_train);
    if n_train == 0 {
        return Err(TnetError::config("fractions", "the training split is empty"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut held = idx[n_train..n_train + n_held].to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

/// Per-unit estimates of `spec` for every unit.
pub fn effect_per_unit(
    model: &TNetModel,
    data: &NetworkDataset,
    spec: &EstimandSpec,
    method: Method,
) -> Result<Vec<f64>> {
    let a = psi_hat(model, data, spec.first.0, spec.first.1, method)?;
    let b = psi_hat(model, data, spec.second.0, spec.second.1, method)?;
    Ok(a.per_unit.iter().zip(&b.per_unit).map(|(x, y)| x - y).collect())
}

/// Comparison restricted to `units` (averages taken over those units).
pub fn compare_on_units(
    model: &TNetModel,
    data: &NetworkDataset,
    truth: &Truth,
    spec: &EstimandSpec,
    method: Method,
    units: &[usize],
) -> Result<EffectComparison> {
    if units.is_empty() {
        return Err(TnetError::config("units", "cannot evaluate on an empty split"));
    }
    let est = effect_per_unit(model, data, spec, method)?;
    let (_, tru) = truth.effects(spec);
    let est: Vec<f64> = units.iter().map(|&i| est[i]).collect();
    let tru: Vec<f64> = units.iter().map(|&i| tru[i]).collect();
    let m = units.len() as f64;
    Ok(EffectComparison {
        estimand: spec.kind.name().to_string(),
        estimate: est.iter().sum::<f64>() / m,
        estimate_per_unit: spec.kind.is_individual().then_some(est),
        truth: tru.iter().sum::<f64>() / m,
        truth_per_unit: tru,
    })
}

/// Influence-curve mean at `(t, z)` with oracle nuisances: the noise-free
/// outcome surface for `mu`, the sample dose-response for `psi`, and a
/// propensity of one at each unit's own observed point. Treatment is a
/// deterministic function of the covariates here, so the observed point
/// carries all of the conditional mass.
pub fn oracle_eic(generated: &GeneratedDataset, t: u8, z: f64) -> Result<EicSummary> {
    let d = &generated.dataset;
    let mu = generated.truth.potential(t, z);
    let psi = generated.truth.psi(t, z);
    let g = vec![1.0; d.n()];
    let values = eic_values(d.treatments(), d.exposure(), d.outcomes(), (t, z), &mu, &g, psi)?;
    let matched = (0..d.n())
        .filter(|&i| d.treatments()[i] == t && d.exposure()[i] == z)
        .count();
    Ok(summarize_eic(&values, (t, z), matched, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrRow {
    pub arm: CorruptionTarget,
    pub method: Method,
    pub estimate: f64,
    pub truth: f64,
    pub abs_error: f64,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TnetError::config("workers", e.to_string()))
}

/// Trains the four corruption arms and reports the absolute error of both
/// methods in each; rows come out arm-major in the order none, propensity,
/// outcome, both.
pub fn dr_stress(
    generated: &GeneratedDataset,
    mode: CorruptionMode,
    spec: &EstimandSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    workers: usize,
) -> Result<Vec<DrRow>> {
    let arms = [
        CorruptionTarget::None,
        CorruptionTarget::Propensity,
        CorruptionTarget::Outcome,
        CorruptionTarget::Both,
    ];
    let (truth, _) = generated.truth.effects(spec);
    let data = &generated.dataset;
    let run = |arm: CorruptionTarget| -> Result<Vec<DrRow>> {
        let options = TrainOptions {
            corruption: CorruptionSpec::new(arm, mode),
            ..TrainOptions::default()
        };
        let out = fit(data, model_config, train_config, options)?;
        if out.diverged() {
            return Err(TnetError::Divergence(format!("arm {arm:?} diverged")));
        }
        [Method::Tnet, Method::Plugin]
            .into_iter()
            .map(|method| {
                let estimate = crate::estimation::estimate_effect(&out.model, data, spec, method)?.average;
                Ok(DrRow {
                    arm,
                    method,
                    estimate,
                    truth,
                    abs_error: (estimate - truth).abs(),
                })
            })
            .collect()
    };
    let rows: Vec<Result<Vec<DrRow>>> = pool(workers)?.install(|| arms.par_iter().map(|&a| run(a)).collect());
    let mut out = Vec::with_capacity(8);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln(mean error)` on `ln(n)`.
    pub slope: Option<f64>,
    pub strictly_decreasing: bool,
    /// Repeats whose own errors decrease strictly along `n_list`.
    pub decreasing_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dgp: DgpSpec,
    pub graph: GraphKind,
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub spec: EstimandSpec,
    pub method: Method,
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|&y| y <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, _) = mean_sd(&lx);
    let (my, _) = mean_sd(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Estimation error versus sample size. Repeat `r` at every `n` uses graph,
/// data and training seeds offset by `r`.
pub fn convergence_sweep(
    sweep: &SweepConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    workers: usize,
) -> Result<SweepReport> {
    if sweep.n_list.is_empty() {
        return Err(TnetError::config("n_list", "must not be empty"));
    }
    if sweep.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TnetError::config("n_list", "must be strictly increasing"));
    }
    if sweep.repeats == 0 {
        return Err(TnetError::config("repeats", "must be positive"));
    }
    let jobs: Vec<(usize, usize)> = sweep
        .n_list
        .iter()
        .flat_map(|&n| (0..sweep.repeats).map(move |r| (n, r)))
        .collect();
    let run = |&(n, r): &(usize, usize)| -> Result<f64> {
        let offset = r as u64;
        let dgp = DgpSpec {
            seed: sweep.dgp.seed.wrapping_add(offset),
            ..sweep.dgp.clone()
        };
        let generated = generate(&sweep.graph, n, dgp.seed, &dgp)?;
        let cfg = TrainConfig {
            seed: train_config.seed.wrapping_add(offset),
            ..train_config.clone()
        };
        let out = fit(&generated.dataset, model_config, &cfg, TrainOptions::default())?;
        if out.diverged() {
            return Err(TnetError::Divergence(format!("sweep run n = {n}, repeat {r} diverged")));
        }
        let est = crate::estimation::estimate_effect(&out.model, &generated.dataset, &sweep.spec, sweep.method)?;
        Ok((est.average - generated.truth.effects(&sweep.spec).0).abs())
    };
    let errors: Vec<Result<f64>> = pool(workers)?.install(|| jobs.par_iter().map(run).collect());
    let errors: Vec<f64> = errors.into_iter().collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = sweep
        .n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let e = errors[k * sweep.repeats..(k + 1) * sweep.repeats].to_vec();
            let (mean_error, sd_error) = mean_sd(&e);
            SweepRow {
                n,
                mean_error,
                sd_error,
                errors: e,
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_error).collect();
    let decreasing_repeats = (0..sweep.repeats)
        .filter(|&r| rows.windows(2).all(|w| w[1].errors[r] < w[0].errors[r]))
        .count();
    Ok(SweepReport {
        slope: log_log_slope(&xs, &ys),
        strictly_decreasing: rows.windows(2).all(|w| w[1].mean_error < w[0].mean_error),
        decreasing_repeats,
        rows,
    })
}

/// One `(x, y, sd)` point of a plotted series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
    pub sd: f64,
}

pub fn sweep_series(report: &SweepReport) -> Vec<SeriesPoint> {
    report
        .rows
        .iter()
        .map(|r| SeriesPoint {
            x: r.n as f64,
            y: r.mean_error,
            sd: r.sd_error,
        })
        .collect()
}

/// Writes a series as CSV with header `x,y,sd`.
pub fn write_series(path: &Path, series: &[SeriesPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TnetError::Serde(e.to_string()))?;
    for p in series {
        w.serialize(p).map_err(|e| TnetError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| TnetError::io(path, e))?;
    Ok(())
}

/// Writes any serializable rows as CSV.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| TnetError::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| TnetError::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| TnetError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| TnetError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmp(est: f64, est_pu: Option<Vec<f64>>, truth: f64, truth_pu: Vec<f64>) -> EffectComparison {
        EffectComparison {
            estimand: "x".into(),
            estimate: est,
            estimate_per_unit: est_pu,
            truth,
            truth_per_unit: truth_pu,
        }
    }

    #[test]
    fn exact_estimates_have_zero_error() {
        let r = compute_metrics(
            &[cmp(1.5, Some(vec![1.0, 2.0]), 1.5, vec![1.0, 2.0])],
            Split::WithinSample,
        )
        .unwrap();
        let e = &r.entries[0];
        assert_eq!(e.mae_average, 0.0);
        assert_eq!(e.pehe_individual, Some(0.0));
        assert_eq!(e.mape_average, Some(0.0));
        assert_eq!(e.mape_individual, Some(0.0));
    }

    #[test]
    fn constant_errors() {
        let r = compute_metrics(&[cmp(0.9, Some(vec![0.9; 4]), 1.0, vec![1.0; 4])], Split::OutOfSample).unwrap();
        let e = &r.entries[0];
        assert!((e.mae_average - 0.1).abs() < 1e-12);
        assert!((e.pehe_individual.unwrap() - 0.1).abs() < 1e-12);
        assert!((e.mape_average.unwrap() - 0.1).abs() < 1e-12);
        assert!((e.mape_individual.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_individual_metrics() {
        let r = compute_metrics(
            &[cmp(1.45, Some(vec![1.3, 1.6]), 1.5, vec![1.0, 2.0])],
            Split::WithinSample,
        )
        .unwrap();
        let e = &r.entries[0];
        assert!((e.pehe_individual.unwrap() - (0.125f64).sqrt()).abs() < 1e-12);
        assert!((e.mape_individual.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mape_guard_and_length_errors() {
        let r = compute_metrics(
            &[cmp(0.1, Some(vec![0.1, 0.2]), 0.0, vec![0.0, 1.0])],
            Split::WithinSample,
        )
        .unwrap();
        assert_eq!(r.entries[0].mape_average, None);
        assert_eq!(r.entries[0].mape_individual, None);
        assert!(compute_metrics(&[cmp(0.1, Some(vec![0.1]), 0.0, vec![0.0, 1.0])], Split::WithinSample).is_err());
    }

    #[test]
    fn splits() {
        let (tr, ho) = within_out_split(1000, 0.8, 0.2, 3).unwrap();
        assert_eq!((tr.len(), ho.len()), (800, 200));
        assert_eq!(within_out_split(1000, 0.8, 0.2, 3).unwrap(), (tr.clone(), ho.clone()));
        assert!(tr.iter().all(|i| !ho.contains(i)));
        let (tr, ho) = within_out_split(10, 1.0, 0.0, 1).unwrap();
        assert_eq!((tr.len(), ho.len()), (10, 0));
        assert!(within_out_split(10, 0.0, 0.5, 1).is_err());
        assert!(within_out_split(10, 0.7, 0.5, 1).is_err());
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs = [500.0, 2000.0, 8000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(log_log_slope(&[10.0], &[1.0]), None);
    }
}

//! Dose-response values, effect contrasts and seed-bootstrap intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NetworkDataset;
use crate::error::{Result, TnetError};
use crate::model::{ModelConfig, TNetModel};
use crate::training::{fit, TrainConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    /// Average main effect: treatment varies, exposure fixed at 0.
    Ame,
    /// Average spillover effect: exposure varies, treatment fixed at 0.
    Ase,
    /// Average total effect: both vary.
    Ate,
    Ime,
    Ise,
    Ite,
    Custom,
}

impl EstimandKind {
    pub fn is_individual(self) -> bool {
        matches!(self, EstimandKind::Ime | EstimandKind::Ise | EstimandKind::Ite)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimandKind::Ame => "AME",
            EstimandKind::Ase => "ASE",
            EstimandKind::Ate => "ATE",
            EstimandKind::Ime => "IME",
            EstimandKind::Ise => "ISE",
            EstimandKind::Ite => "ITE",
            EstimandKind::Custom => "custom",
        }
    }
}

/// A contrast `y(first) - y(second)` between two `(t, z)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandSpec {
    pub kind: EstimandKind,
    pub first: (u8, f64),
    pub second: (u8, f64),
}

impl EstimandSpec {
    pub fn new(kind: EstimandKind, first: (u8, f64), second: (u8, f64)) -> Result<Self> {
        let spec = Self { kind, first, second };
        spec.validate()?;
        Ok(spec)
    }

    /// The default contrast for `kind`: main effects compare `(1, 0)` with
    /// `(0, 0)`, spillover `(0, z_bar)` with `(0, 0)`, total `(1, z_bar)`
    /// with `(0, 0)`.
    pub fn default_for(kind: EstimandKind, z_bar: f64) -> Result<Self> {
        let first = match kind {
            EstimandKind::Ame | EstimandKind::Ime => (1, 0.0),
            EstimandKind::Ase | EstimandKind::Ise => (0, z_bar),
            EstimandKind::Ate | EstimandKind::Ite => (1, z_bar),
            EstimandKind::Custom => {
                return Err(TnetError::config("kind", "custom estimands need an explicit pair"));
            }
        };
        Self::new(kind, first, (0, 0.0))
    }

    pub fn swapped(&self) -> Self {
        Self {
            kind: self.kind,
            first: self.second,
            second: self.first,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, z) in [self.first, self.second] {
            if t > 1 {
                return Err(TnetError::config("pair", format!("treatment must be 0 or 1, got {t}")));
            }
            if !(0.0..=1.0).contains(&z) {
                return Err(TnetError::config(
                    "pair",
                    format!("exposure must lie in [0, 1], got {z}"),
                ));
            }
        }
        let (a, b) = (self.first, self.second);
        match self.kind {
            EstimandKind::Ame | EstimandKind::Ime if a.1 != b.1 => {
                Err(TnetError::config("pair", "main effects hold the exposure fixed"))
            }
            EstimandKind::Ase | EstimandKind::Ise if a.0 != 0 || b.0 != 0 => {
                Err(TnetError::config("pair", "spillover effects fix the treatment at 0"))
            }
            EstimandKind::Custom => Ok(()),
            _ if a == b => Err(TnetError::config("pair", "the two points must differ")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Targeted estimate `mu + eps / g`.
    Tnet,
    /// Outcome model alone, i.e. `eps` forced to zero.
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub replicates: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub spec: EstimandSpec,
    pub method: Method,
    pub average: f64,
    pub per_unit: Option<Vec<f64>>,
    pub ci: Option<ConfidenceInterval>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiEstimate {
    pub average: f64,
    pub per_unit: Vec<f64>,
    /// Units whose joint propensity hit the floor at this point.
    pub floored: usize,
}

impl PsiEstimate {
    pub fn overlap_warning(&self) -> Option<String> {
        let n = self.per_unit.len();
        (2 * self.floored > n).then(|| {
            format!(
                "overlap: joint propensity floored for {} of {n} units; the correction term is unreliable",
                self.floored
            )
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `y_i(t, z)` for every unit and its mean.
pub fn psi_hat(model: &TNetModel, data: &NetworkDataset, t: u8, z: f64, method: Method) -> Result<PsiEstimate> {
    let nv = model.counterfactual_nuisances(data, t, z)?;
    let per_unit = match method {
        Method::Tnet => nv.targeted(),
        Method::Plugin => nv.mu.clone(),
    };
    let floored = match method {
        Method::Tnet => nv.floored(),
        Method::Plugin => 0,
    };
    Ok(PsiEstimate {
        average: mean(&per_unit),
        per_unit,
        floored,
    })
}

pub fn estimate_effect(
    model: &TNetModel,
    data: &NetworkDataset,
    spec: &EstimandSpec,
    method: Method,
) -> Result<EffectEstimate> {
    spec.validate()?;
    let a = psi_hat(model, data, spec.first.0, spec.first.1, method)?;
    let b = psi_hat(model, data, spec.second.0, spec.second.1, method)?;
    let warnings: Vec<String> = [a.overlap_warning(), b.overlap_warning()]
        .into_iter()
        .flatten()
        .collect();
    for w in &warnings {
        log::warn!("{} estimate: {w}", spec.kind.name());
    }
    let per_unit = spec
        .kind
        .is_individual()
        .then(|| a.per_unit.iter().zip(&b.per_unit).map(|(x, y)| x - y).collect());
    Ok(EffectEstimate {
        spec: *spec,
        method,
        average: a.average - b.average,
        per_unit,
        ci: None,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    /// Worker threads for replicate trainings.
    pub workers: usize,
    /// Explicit replicate seeds; by default `seed, seed + 1, ...` starting
    /// from the training seed.
    pub seeds: Option<Vec<u64>>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            level: 0.95,
            workers: 1,
            seeds: None,
        }
    }
}

pub const MIN_REPLICATES: usize = 20;
const MAX_DROPPED_FRACTION: f64 = 0.25;

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(TnetError::config(
                "replicates",
                format!("need at least {MIN_REPLICATES}, got {}", self.replicates),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(TnetError::config("level", "must lie in (0, 1)"));
        }
        if self.workers == 0 {
            return Err(TnetError::config("workers", "must be positive"));
        }
        if let Some(s) = &self.seeds {
            if s.len() != self.replicates {
                return Err(TnetError::config("seeds", "length must equal replicates"));
            }
        }
        Ok(())
    }

    fn seed_list(&self, base: u64) -> Vec<u64> {
        self.seeds
            .clone()
            .unwrap_or_else(|| (0..self.replicates as u64).map(|r| base.wrapping_add(r)).collect())
    }
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval from seed-resampled trainings. The point estimate
/// is the one from the first seed in the list.
pub fn bootstrap_ci(
    data: &NetworkDataset,
    spec: &EstimandSpec,
    method: Method,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    boot: &BootstrapConfig,
    train_units: Option<&[usize]>,
) -> Result<EffectEstimate> {
    spec.validate()?;
    boot.validate()?;
    let seeds = boot.seed_list(train_config.seed);
    let run = |seed: u64| -> Option<EffectEstimate> {
        let cfg = TrainConfig {
            seed,
            ..train_config.clone()
        };
        let options = TrainOptions {
            train_units: train_units.map(<[usize]>::to_vec),
            ..TrainOptions::default()
        };
        match fit(data, model_config, &cfg, options) {
            Ok(out) if !out.diverged() => estimate_effect(&out.model, data, spec, method).ok(),
            Ok(_) => {
                log::warn!("bootstrap replicate with seed {seed} diverged; dropping it");
                None
            }
            Err(e) => {
                log::warn!("bootstrap replicate with seed {seed} failed: {e}");
                None
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(boot.workers)
        .build()
        .map_err(|e| TnetError::config("workers", e.to_string()))?;
    let results: Vec<Option<EffectEstimate>> = pool.install(|| seeds.par_iter().map(|&s| run(s)).collect());

    let dropped = results.iter().filter(|r| r.is_none()).count();
    if dropped as f64 > MAX_DROPPED_FRACTION * seeds.len() as f64 {
        return Err(TnetError::Divergence(format!(
            "{dropped} of {} bootstrap replicates diverged",
            seeds.len()
        )));
    }
    let mut primary = match &results[0] {
        Some(e) => e.clone(),
        None => {
            return Err(TnetError::Divergence("the primary-seed training diverged".into()));
        }
    };
    let mut values: Vec<f64> = results.iter().flatten().map(|e| e.average).collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - boot.level) / 2.0;
    let ci = ConfidenceInterval {
        lower: quantile_sorted(&values, tail),
        upper: quantile_sorted(&values, 1.0 - tail),
        level: boot.level,
        replicates: values.len(),
        dropped,
    };
    if primary.average < ci.lower || primary.average > ci.upper {
        log::info!(
            "point estimate {} lies outside the percentile interval [{}, {}]",
            primary.average,
            ci.lower,
            ci.upper
        );
    }
    if dropped > 0 {
        primary.warnings.push(format!("{dropped} bootstrap replicates dropped"));
    }
    primary.ci = Some(ci);
    Ok(primary)
}

//! Losses, the alternating optimization schedule and efficient influence
//! curve diagnostics.
//!
//! All losses are sums over units, evaluated at each unit's observed
//! `(t_i, z_i)`:
//!
//! ```text
//! L1 = sum_i alpha * CE(g1(t_i | ·), t_i) - gamma * log g2(z_i | ·)
//! L2 = sum_i (y_i - mu_i)^2
//! L3 = beta * sum_i (y_i - mu_i - eps(t_i, z_i) / G_i)^2,   G_i = max(g1 g2, floor)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NetworkDataset;
use crate::error::{Result, TnetError};
use crate::model::{Detach, FactualPass, ModelConfig, ParamGroup, TNetModel, UnitGrads, JOINT_FLOOR};
use crate::nn::sigmoid;
use crate::optim::AdamState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// `None` means `20 / sqrt(n)` with `n` the number of fitted units.
    pub beta: Option<f64>,
    pub lr_nuisance: f64,
    pub lr_targeted: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Iterations without validation improvement before stopping; 0 disables
    /// early stopping and the validation split.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    /// Re-solve the spline coefficients exactly by least squares once the
    /// alternating schedule ends.
    pub final_targeting: bool,
    pub divergence_threshold: f64,
    pub max_lr_halvings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            beta: None,
            lr_nuisance: 1e-3,
            lr_targeted: 1e-3,
            iterations: 300,
            seed: 0,
            early_stop_patience: 30,
            validation_fraction: 0.2,
            final_targeting: true,
            divergence_threshold: 1e8,
            max_lr_halvings: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TnetError::config(name, format!("must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("gamma", self.gamma)?;
        if let Some(b) = self.beta {
            positive("beta", b)?;
        }
        positive("lr_nuisance", self.lr_nuisance)?;
        positive("lr_targeted", self.lr_targeted)?;
        positive("divergence_threshold", self.divergence_threshold)?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TnetError::config("validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn weights(&self, n: usize) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            beta: self.beta.unwrap_or_else(|| default_beta(n)),
        }
    }
}

pub fn default_beta(n: usize) -> f64 {
    20.0 / (n.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionTarget {
    None,
    Propensity,
    Outcome,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    FreezeRandomInit,
    Constant,
    LabelShuffle,
}

/// Deliberate misspecification of one or both nuisance models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub target: CorruptionTarget,
    pub mode: CorruptionMode,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            target: CorruptionTarget::None,
            mode: CorruptionMode::FreezeRandomInit,
        }
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(target: CorruptionTarget, mode: CorruptionMode) -> Self {
        Self { target, mode }
    }

    pub fn outcome(&self) -> bool {
        matches!(self.target, CorruptionTarget::Outcome | CorruptionTarget::Both)
    }

    pub fn propensity(&self) -> bool {
        matches!(self.target, CorruptionTarget::Propensity | CorruptionTarget::Both)
    }

    fn corrupts(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::OutcomeTreated | ParamGroup::OutcomeControl => self.outcome(),
            ParamGroup::Propensity | ParamGroup::ExposureDensity => self.propensity(),
            _ => false,
        }
    }

    fn freezes(&self, group: ParamGroup) -> bool {
        self.mode != CorruptionMode::LabelShuffle && self.corrupts(group)
    }

    fn detach(&self) -> Detach {
        Detach {
            outcome: self.outcome(),
            propensity: self.propensity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
    L3,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// L1 and its per-unit gradients. Cross-entropy is taken from the logit,
/// so it stays finite without clamping.
pub fn l1_from_pass(pass: &FactualPass, w: &LossWeights) -> (f64, UnitGrads) {
    let m = pass.len();
    let mut up = UnitGrads::zeros(m);
    let mut loss = 0.0;
    for k in 0..m {
        let a = pass.logit[k];
        let label = f64::from(pass.t[k]);
        let ce = if pass.t[k] == 1 { softplus(-a) } else { softplus(a) };
        loss += w.alpha * ce - w.gamma * pass.g2[k].ln();
        up.g1_logit[k] = w.alpha * (sigmoid(a) - label);
        up.g2[k] = -w.gamma / pass.g2[k];
    }
    (loss, up)
}

pub fn l2_from_pass(pass: &FactualPass) -> (f64, UnitGrads) {
    let m = pass.len();
    let mut up = UnitGrads::zeros(m);
    let mut loss = 0.0;
    for (k, (y, mu)) in pass.y.iter().zip(pass.mu()).enumerate() {
        let r = y - mu;
        loss += r * r;
        up.mu[k] = -2.0 * r;
    }
    (loss, up)
}

/// Joint propensity at the observed point and whether the floor is active.
#[inline]
fn joint(g1: f64, g2: f64) -> (f64, bool) {
    let g = g1 * g2;
    if g < JOINT_FLOOR {
        (JOINT_FLOOR, true)
    } else {
        (g, false)
    }
}

/// L3 and its per-unit gradients. The floor on `g1 g2` and the clamp on
/// `g1` pass no gradient where they are active.
pub fn l3_from_pass(pass: &FactualPass, w: &LossWeights) -> (f64, UnitGrads) {
    let m = pass.len();
    let mut up = UnitGrads::zeros(m);
    let mut loss = 0.0;
    let mu = pass.mu();
    for k in 0..m {
        let (g, floored) = joint(pass.g1[k], pass.g2[k]);
        let r = pass.y[k] - mu[k] - pass.eps[k] / g;
        loss += w.beta * r * r;
        up.mu[k] = -2.0 * w.beta * r;
        up.eps[k] = -2.0 * w.beta * r / g;
        if floored {
            continue;
        }
        let d_joint = 2.0 * w.beta * r * pass.eps[k] / (g * g);
        up.g2[k] = d_joint * pass.g1[k];
        if !pass.g1_clamped[k] {
            let p = sigmoid(pass.logit[k]);
            let sign = if pass.t[k] == 1 { 1.0 } else { -1.0 };
            up.g1_logit[k] = d_joint * pass.g2[k] * sign * p * (1.0 - p);
        }
    }
    (loss, up)
}

fn loss_from_pass(pass: &FactualPass, kind: LossKind, w: &LossWeights) -> (f64, UnitGrads) {
    match kind {
        LossKind::L1 => l1_from_pass(pass, w),
        LossKind::L2 => l2_from_pass(pass),
        LossKind::L3 => l3_from_pass(pass, w),
    }
}

fn all_units(data: &NetworkDataset) -> Vec<usize> {
    (0..data.n()).collect()
}

/// L1 over every unit, evaluation mode.
pub fn loss_l1(model: &TNetModel, data: &NetworkDataset, w: &LossWeights) -> Result<f64> {
    let pass = model.factual_pass(data, &all_units(data), None)?;
    finite("l1", l1_from_pass(&pass, w).0)
}

pub fn loss_l2(model: &TNetModel, data: &NetworkDataset) -> Result<f64> {
    let pass = model.factual_pass(data, &all_units(data), None)?;
    finite("l2", l2_from_pass(&pass).0)
}

pub fn loss_l3(model: &TNetModel, data: &NetworkDataset, w: &LossWeights) -> Result<f64> {
    let pass = model.factual_pass(data, &all_units(data), None)?;
    finite("l3", l3_from_pass(&pass, w).0)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TnetError::NonFinite { tensor: name.into() })
    }
}

/// Loss over `units` (evaluation mode) and its gradient for every
/// parameter, returned in a model-shaped container.
pub fn loss_and_gradient(
    model: &TNetModel,
    data: &NetworkDataset,
    units: &[usize],
    kind: LossKind,
    w: &LossWeights,
) -> Result<(f64, TNetModel)> {
    let pass = model.factual_pass(data, units, None)?;
    let (loss, up) = loss_from_pass(&pass, kind, w);
    let mut grads = model.zeros_like();
    model.backward(&pass, &up, Detach::default(), &mut grads)?;
    if let Some(group) = grads.first_non_finite() {
        return Err(TnetError::NonFinite {
            tensor: format!("gradient of {kind:?} in {group:?}"),
        });
    }
    Ok((finite("loss", loss)?, grads))
}

/// Spline-weighted score `sum_i phi_k(z_i) (y_i - yhat_i) / G_i` per arm,
/// with `yhat_i = mu_i + eps_i / G_i`; returns `(treated, control)`.
/// The L3 gradient for coefficient `k` equals `-2 beta` times this.
pub fn spline_score(model: &TNetModel, data: &NetworkDataset, units: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pass = model.factual_pass(data, units, None)?;
    let dim = model.config.spline_dim;
    let mut treated = vec![0.0; dim];
    let mut control = vec![0.0; dim];
    let mu = pass.mu();
    for k in 0..pass.len() {
        let (g, _) = joint(pass.g1[k], pass.g2[k]);
        let resid = (pass.y[k] - mu[k] - pass.eps[k] / g) / g;
        let target = if pass.t[k] == 1 { &mut treated } else { &mut control };
        for (s, phi) in target.iter_mut().zip(pass.basis(k)) {
            *s += phi * resid;
        }
    }
    Ok((treated, control))
}

/// Least-squares solve of both arms' spline coefficients with everything
/// else held fixed. This is the exact minimizer of L3 in those coordinates.
pub fn solve_perturbation(model: &mut TNetModel, data: &NetworkDataset, units: &[usize]) -> Result<()> {
    let pass = model.factual_pass(data, units, None)?;
    let dim = model.config.spline_dim;
    let mu = pass.mu();
    for arm in [1u8, 0u8] {
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for k in (0..pass.len()).filter(|&k| pass.t[k] == arm) {
            let (g, _) = joint(pass.g1[k], pass.g2[k]);
            let x: Vec<f64> = pass.basis(k).iter().map(|phi| phi / g).collect();
            let r = pass.y[k] - mu[k];
            for a in 0..dim {
                rhs[a] += x[a] * r;
                for b in 0..dim {
                    gram[(a, b)] += x[a] * x[b];
                }
            }
        }
        // A tiny ridge keeps basis functions without support at zero.
        let ridge = 1e-10 * (gram.trace() / dim as f64).max(1e-12);
        for a in 0..dim {
            gram[(a, a)] += ridge;
        }
        let coeffs = gram
            .cholesky()
            .ok_or_else(|| TnetError::Divergence("perturbation normal equations are not positive definite".into()))?
            .solve(&rhs);
        let target = if arm == 1 {
            &mut model.eps_treated
        } else {
            &mut model.eps_control
        };
        target.copy_from_slice(coeffs.as_slice());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub val_l2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// The divergence guard ran out of learning-rate halvings; the model is
    /// the last checkpoint with finite, bounded losses.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TNetModel,
    pub history: Vec<HistoryRow>,
    pub status: TrainStatus,
    pub best_iteration: Option<usize>,
    pub lr_halvings: usize,
    pub weights: LossWeights,
    pub fit_units: Vec<usize>,
    pub validation_units: Vec<usize>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.status == TrainStatus::Diverged
    }
}

/// Per-iteration callback receiving the iteration index and the model.
pub type Observer<'a> = dyn FnMut(usize, &TNetModel) + 'a;

/// Optional knobs for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Units whose labels may enter a loss; `None` means all units.
    pub train_units: Option<Vec<usize>>,
    pub corruption: CorruptionSpec,
    /// Called with the iteration index and the model after both steps.
    pub observer: Option<&'a mut Observer<'a>>,
}

/// Initializes a model from `config.seed` and trains it.
pub fn fit(
    data: &NetworkDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let model = TNetModel::init(model_config.clone(), data.covariate_dim(), config.seed)?;
    train(model, data, config, options)
}

struct Snapshot {
    model: TNetModel,
    nuisance: AdamState,
    targeted: AdamState,
}

/// Alternating optimization: per iteration one Adam step on `L1 + L2` over
/// the nuisance parameters, then one Adam step on `L3` over all parameters.
pub fn train(
    mut model: TNetModel,
    data: &NetworkDataset,
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let corruption = options.corruption;
    let train_units = match options.train_units.take() {
        Some(u) => {
            if u.is_empty() {
                return Err(TnetError::config("train_units", "must not be empty"));
            }
            if let Some(&bad) = u.iter().find(|&&i| i >= data.n()) {
                return Err(TnetError::dim("train_units", data.n(), bad));
            }
            u
        }
        None => all_units(data),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e57_ab1e);
    let (fit_units, validation_units) = split_validation(&train_units, config, &mut rng);
    let weights = config.weights(fit_units.len());

    apply_constant_corruption(&mut model, data, &train_units, corruption);
    let prop_data = shuffled_labels(data, &train_units, corruption, true, &mut rng)?;
    let out_data = shuffled_labels(data, &train_units, corruption, false, &mut rng)?;

    let groups: Vec<ParamGroup> = model.tensors().iter().map(|(g, _)| *g).collect();
    let nuisance_mask: Vec<bool> = groups
        .iter()
        .map(|&g| g.is_nuisance() && !corruption.freezes(g))
        .collect();
    let targeted_mask: Vec<bool> = groups.iter().map(|&g| !corruption.corrupts(g)).collect();
    let sizes = model.tensor_sizes();
    let mut adam_n = AdamState::new(config.lr_nuisance, &sizes)?;
    let mut adam_t = AdamState::new(config.lr_targeted, &sizes)?;
    let detach = corruption.detach();

    let mut history = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, usize, TNetModel)> = None;
    let mut status = TrainStatus::Completed;
    let mut halvings = 0;
    let mut good = Snapshot {
        model: model.clone(),
        nuisance: adam_n.clone(),
        targeted: adam_t.clone(),
    };

    let mut it = 0;
    while it < config.iterations {
        let step = nuisance_step(
            &mut model,
            &mut adam_n,
            [&prop_data, &out_data],
            &fit_units,
            &weights,
            detach,
            &nuisance_mask,
            &mut rng,
        )
        .and_then(|(l1, l2)| {
            let l3 = targeted_step(
                &mut model,
                &mut adam_t,
                data,
                &fit_units,
                &weights,
                detach,
                &targeted_mask,
                &mut rng,
            )?;
            Ok((l1, l2, l3))
        });
        let bounded = |v: f64| v.is_finite() && v.abs() <= config.divergence_threshold;
        let ok = match &step {
            Ok((l1, l2, l3)) => bounded(*l1) && bounded(*l2) && bounded(*l3) && model.is_finite(),
            Err(TnetError::NonFinite { .. }) => false,
            Err(_) => return Err(step.unwrap_err()),
        };
        if !ok {
            model = good.model.clone();
            adam_n = good.nuisance.clone();
            adam_t = good.targeted.clone();
            if halvings == config.max_lr_halvings {
                log::warn!("training diverged at iteration {it} after {halvings} learning-rate halvings");
                status = TrainStatus::Diverged;
                break;
            }
            halvings += 1;
            adam_n.lr *= 0.5;
            adam_t.lr *= 0.5;
            log::warn!(
                "loss blew up at iteration {it}; halving learning rates to {}",
                adam_n.lr
            );
            continue;
        }
        let (l1, l2, l3) = step.expect("checked above");

        let val_l2 = if validation_units.is_empty() {
            None
        } else {
            let pass = model.factual_pass(data, &validation_units, None)?;
            Some(l2_from_pass(&pass).0)
        };
        history.push(HistoryRow {
            iteration: it,
            l1,
            l2,
            l3,
            val_l2,
        });
        if let Some(obs) = options.observer.as_mut() {
            obs(it, &model);
        }
        good = Snapshot {
            model: model.clone(),
            nuisance: adam_n.clone(),
            targeted: adam_t.clone(),
        };
        if let Some(v) = val_l2 {
            match &best {
                Some((b, _, _)) if v >= *b => {}
                _ => best = Some((v, it, model.clone())),
            }
            let best_it = best.as_ref().map_or(it, |b| b.1);
            if it - best_it >= config.early_stop_patience {
                status = TrainStatus::EarlyStopped;
                it += 1;
                break;
            }
        }
        it += 1;
    }

    let best_iteration = best.as_ref().map(|b| b.1);
    if status != TrainStatus::Diverged {
        if let Some((_, _, m)) = best {
            model = m;
        }
        if config.final_targeting {
            let mut solved = model.clone();
            solve_perturbation(&mut solved, data, &train_units)?;
            if solved.is_finite() {
                model = solved;
            }
        }
    }
    log::debug!("training finished after {it} iterations with status {status:?}, best iteration {best_iteration:?}");
    Ok(TrainOutcome {
        model,
        history,
        status,
        best_iteration,
        lr_halvings: halvings,
        weights,
        fit_units,
        validation_units,
    })
}

fn split_validation(units: &[usize], config: &TrainConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let held = (units.len() as f64 * config.validation_fraction).round() as usize;
    if config.early_stop_patience == 0 || held == 0 || held >= units.len() {
        return (units.to_vec(), Vec::new());
    }
    let mut shuffled = units.to_vec();
    shuffled.shuffle(rng);
    let mut val = shuffled[..held].to_vec();
    let mut fit = shuffled[held..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

fn apply_constant_corruption(model: &mut TNetModel, data: &NetworkDataset, units: &[usize], c: CorruptionSpec) {
    if c.mode != CorruptionMode::Constant {
        return;
    }
    let zero_last = |mlp: &mut crate::nn::MlpParams, bias: f64| {
        let last = mlp.layers.last_mut().expect("heads have layers");
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        last.bias.iter_mut().for_each(|v| *v = bias);
    };
    if c.outcome() {
        let y_bar = units.iter().map(|&i| data.outcomes()[i]).sum::<f64>() / units.len() as f64;
        zero_last(&mut model.mu_treated, y_bar);
        zero_last(&mut model.mu_control, y_bar);
    }
    if c.propensity() {
        zero_last(&mut model.g1_head, 0.0);
        zero_last(&mut model.g2_head, 0.0);
    }
}

/// Copy of `data` with treatment (`propensity = true`) or outcome labels
/// permuted among `units`, when label shuffling targets that nuisance.
fn shuffled_labels(
    data: &NetworkDataset,
    units: &[usize],
    c: CorruptionSpec,
    propensity: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkDataset> {
    let applies = c.mode == CorruptionMode::LabelShuffle && if propensity { c.propensity() } else { c.outcome() };
    if !applies {
        return Ok(data.clone());
    }
    let mut perm = units.to_vec();
    perm.shuffle(rng);
    if propensity {
        let mut t = data.treatments().to_vec();
        for (&dst, &src) in units.iter().zip(&perm) {
            t[dst] = data.treatments()[src];
        }
        NetworkDataset::new(
            data.graph().clone(),
            data.features().clone(),
            t,
            data.outcomes().to_vec(),
        )
    } else {
        let mut y = data.outcomes().to_vec();
        for (&dst, &src) in units.iter().zip(&perm) {
            y[dst] = data.outcomes()[src];
        }
        data.with_outcomes(y)
    }
}

fn add_grads(acc: &mut UnitGrads, other: &UnitGrads) {
    for (a, b) in [
        (&mut acc.g1_logit, &other.g1_logit),
        (&mut acc.g2, &other.g2),
        (&mut acc.mu, &other.mu),
        (&mut acc.eps, &other.eps),
    ] {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn apply_adam(model: &mut TNetModel, grads: &TNetModel, adam: &mut AdamState, mask: &[bool]) -> Result<()> {
    let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let mut p: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(|(_, t)| t).collect();
    adam.step(&mut p, &g, mask)
}

#[allow(clippy::too_many_arguments)]
fn nuisance_step(
    model: &mut TNetModel,
    adam: &mut AdamState,
    [prop_data, out_data]: [&NetworkDataset; 2],
    units: &[usize],
    w: &LossWeights,
    detach: Detach,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut grads = model.zeros_like();
    let pass = model.factual_pass(prop_data, units, Some(rng as &mut dyn RngCore))?;
    let (l1, mut up) = l1_from_pass(&pass, w);
    let l2 = if std::ptr::eq(prop_data, out_data) || same_labels(prop_data, out_data) {
        let (l2, up2) = l2_from_pass(&pass);
        add_grads(&mut up, &up2);
        model.backward(&pass, &up, detach, &mut grads)?;
        l2
    } else {
        model.backward(&pass, &up, detach, &mut grads)?;
        let pass_o = model.factual_pass(out_data, units, Some(rng as &mut dyn RngCore))?;
        let (l2, up2) = l2_from_pass(&pass_o);
        model.backward(&pass_o, &up2, detach, &mut grads)?;
        l2
    };
    if !l1.is_finite() || !l2.is_finite() {
        return Err(TnetError::NonFinite {
            tensor: "l1 + l2".into(),
        });
    }
    apply_adam(model, &grads, adam, mask)?;
    Ok((l1, l2))
}

fn same_labels(a: &NetworkDataset, b: &NetworkDataset) -> bool {
    a.treatments() == b.treatments() && a.outcomes() == b.outcomes()
}

#[allow(clippy::too_many_arguments)]
fn targeted_step(
    model: &mut TNetModel,
    adam: &mut AdamState,
    data: &NetworkDataset,
    units: &[usize],
    w: &LossWeights,
    detach: Detach,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let pass = model.factual_pass(data, units, Some(rng as &mut dyn RngCore))?;
    let (l3, up) = l3_from_pass(&pass, w);
    if !l3.is_finite() {
        return Err(TnetError::NonFinite { tensor: "l3".into() });
    }
    let mut grads = model.zeros_like();
    model.backward(&pass, &up, detach, &mut grads)?;
    apply_adam(model, &grads, adam, mask)?;
    Ok(l3)
}

/// Per-unit efficient influence curve values at `(t, z)`:
/// `1{t_i = t, z_i = z} / g_i * (y_i - mu_i) + mu_i - psi`.
/// `mu` and `g` hold each unit's values at `(t, z)`; `g` is read only
/// where the indicator is one.
pub fn eic_values(
    observed_t: &[u8],
    observed_z: &[f64],
    y: &[f64],
    (t, z): (u8, f64),
    mu: &[f64],
    g: &[f64],
    psi: f64,
) -> Result<Vec<f64>> {
    let n = y.len();
    for (name, len) in [
        ("observed_t", observed_t.len()),
        ("observed_z", observed_z.len()),
        ("mu", mu.len()),
        ("g", g.len()),
    ] {
        if len != n {
            return Err(TnetError::dim("eic_values", n, format!("{name} of length {len}")));
        }
    }
    Ok((0..n)
        .map(|i| {
            let matched = observed_t[i] == t && observed_z[i] == z;
            let correction = if matched { (y[i] - mu[i]) / g[i] } else { 0.0 };
            correction + mu[i] - psi
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EicSummary {
    pub t: u8,
    pub z: f64,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    /// Units whose observed `(t_i, z_i)` equals `(t, z)`.
    pub matched: usize,
    /// Units whose joint propensity sits on the floor at `(t, z)`.
    pub floored: usize,
    pub overlap_warning: bool,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize_eic(values: &[f64], (t, z): (u8, f64), matched: usize, floored: usize) -> EicSummary {
    let (mean, sd) = mean_sd(values);
    EicSummary {
        t,
        z,
        mean,
        sd,
        n: values.len(),
        matched,
        floored,
        overlap_warning: floored == values.len() && !values.is_empty(),
    }
}

/// Empirical mean of the influence curve for the trained model at `(t, z)`,
/// using the targeted prediction `mu + eps / G` as the outcome fit.
pub fn eic_score(model: &TNetModel, data: &NetworkDataset, t: u8, z: f64, psi: f64) -> Result<EicSummary> {
    let nv = model.counterfactual_nuisances(data, t, z)?;
    let fit = nv.targeted();
    let g = nv.joint();
    let values = eic_values(
        data.treatments(),
        data.exposure(),
        data.outcomes(),
        (t, z),
        &fit,
        &g,
        psi,
    )?;
    let matched = (0..data.n())
        .filter(|&i| data.treatments()[i] == t && data.exposure()[i] == z)
        .count();
    let summary = summarize_eic(&values, (t, z), matched, nv.floored());
    if summary.overlap_warning {
        log::warn!("joint propensity is floored for every unit at (t = {t}, z = {z})");
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub eic_score_grid: Vec<EicSummary>,
}

/// Losses over all units plus the influence-curve mean on a `(t, z)` grid,
/// each with `psi` set to the model's own estimate.
pub fn loss_report(model: &TNetModel, data: &NetworkDataset, w: &LossWeights, z_grid: &[f64]) -> Result<LossReport> {
    let pass = model.factual_pass(data, &all_units(data), None)?;
    let mut grid = Vec::new();
    for t in [0u8, 1] {
        for &z in z_grid {
            let psi = crate::estimation::psi_hat(model, data, t, z, crate::estimation::Method::Tnet)?.average;
            grid.push(eic_score(model, data, t, z, psi)?);
        }
    }
    Ok(LossReport {
        l1: l1_from_pass(&pass, w).0,
        l2: l2_from_pass(&pass).0,
        l3: l3_from_pass(&pass, w).0,
        eic_score_grid: grid,
    })
}

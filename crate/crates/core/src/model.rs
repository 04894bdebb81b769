//! The estimator network: graph feature module, generalized propensity heads,
//! outcome heads and the spline perturbation, with cached factual passes for
//! training and plain evaluation at arbitrary `(t, z)`.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NetworkDataset;
use crate::error::{Result, TnetError};
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::nn::{sigmoid, Activation, MlpCache, MlpParams};
use crate::spline::SplineBasis;

/// Clamp applied to `g1` before it enters any ratio.
pub const G1_CLAMP: f64 = 1e-4;
/// Floor on `g1 * g2` inside ratio terms.
pub const JOINT_FLOOR: f64 = 1e-2;
pub const SPLINE_DEGREE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Output width of the graph convolution.
    pub gcn_width: usize,
    /// Width of the shared representation.
    pub rep_width: usize,
    /// Number of grid intervals `B` for the exposure density.
    pub grid_count: usize,
    /// Spline basis functions per treatment arm.
    pub spline_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gcn_width: 64,
            rep_width: 64,
            grid_count: 10,
            spline_dim: 5,
            dropout: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("gcn_width", self.gcn_width),
            ("rep_width", self.rep_width),
            ("grid_count", self.grid_count),
        ] {
            if v == 0 {
                return Err(TnetError::config(name, "must be positive"));
            }
        }
        if self.spline_dim < SPLINE_DEGREE + 1 {
            return Err(TnetError::config(
                "spline_dim",
                format!("must be at least {}", SPLINE_DEGREE + 1),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TnetError::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Named parameter blocks, in the order returned by [`TNetModel::tensors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Gcn,
    Representation,
    Propensity,
    ExposureDensity,
    OutcomeTreated,
    OutcomeControl,
    PerturbationTreated,
    PerturbationControl,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Gcn,
        ParamGroup::Representation,
        ParamGroup::Propensity,
        ParamGroup::ExposureDensity,
        ParamGroup::OutcomeTreated,
        ParamGroup::OutcomeControl,
        ParamGroup::PerturbationTreated,
        ParamGroup::PerturbationControl,
    ];

    /// Everything except the perturbation coefficients.
    pub fn is_nuisance(self) -> bool {
        !matches!(self, ParamGroup::PerturbationTreated | ParamGroup::PerturbationControl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TNetModel {
    pub config: ModelConfig,
    pub covariate_dim: usize,
    pub gcn_weight: Matrix,
    pub rep_mlp: MlpParams,
    pub g1_head: MlpParams,
    pub g2_head: MlpParams,
    pub mu_treated: MlpParams,
    pub mu_control: MlpParams,
    pub eps_treated: Vec<f64>,
    pub eps_control: Vec<f64>,
    pub spline: SplineBasis,
}

/// Nuisance estimates for every unit at one `(t, z)` (or at the observed
/// values). `g1` is clamped; `g2` is the normalized density.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps: Vec<f64>,
}

impl NuisanceValues {
    /// `max(g1 * g2, JOINT_FLOOR)` per unit.
    pub fn joint(&self) -> Vec<f64> {
        self.g1
            .iter()
            .zip(&self.g2)
            .map(|(a, b)| (a * b).max(JOINT_FLOOR))
            .collect()
    }

    /// Units whose joint propensity sits on the floor.
    pub fn floored(&self) -> usize {
        self.g1
            .iter()
            .zip(&self.g2)
            .filter(|(a, b)| *a * *b < JOINT_FLOOR)
            .count()
    }

    /// `mu + eps / max(g1 g2, floor)` per unit.
    pub fn targeted(&self) -> Vec<f64> {
        self.joint()
            .iter()
            .zip(&self.mu)
            .zip(&self.eps)
            .map(|((g, m), e)| m + e / g)
            .collect()
    }
}

/// Stop-gradient switches between heads and the shared representation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Detach {
    pub outcome: bool,
    pub propensity: bool,
}

#[inline]
pub fn clamp_g1(p: f64) -> f64 {
    p.clamp(G1_CLAMP, 1.0 - G1_CLAMP)
}

/// Trapezoid integral over `[0, 1]` of the piecewise-linear interpolant
/// through `values` at the grid points `j / B`.
pub fn grid_integral(values: &[f64]) -> f64 {
    let b = values.len() - 1;
    let sum: f64 = values.iter().sum();
    (sum - 0.5 * (values[0] + values[b])) / b as f64
}

/// Lower grid index and interpolation weight for `z`.
#[inline]
fn grid_position(b: usize, z: f64) -> (usize, usize, f64) {
    let scaled = z * b as f64;
    let lo = (scaled.floor() as usize).min(b);
    let hi = (scaled.ceil() as usize).min(b);
    (lo, hi, scaled - lo as f64)
}

/// Linear interpolation of grid values between `floor(Bz)` and `ceil(Bz)`.
pub fn interpolate_grid(values: &[f64], z: f64) -> f64 {
    let (lo, hi, w) = grid_position(values.len() - 1, z);
    if lo == hi {
        values[lo]
    } else {
        values[lo] + (values[hi] - values[lo]) * w
    }
}

/// Density at `z` from raw softmax grid values after rescaling them to
/// integrate to one, together with its gradient with respect to `raw`.
pub fn density_with_grad(raw: &[f64], z: f64) -> (f64, Vec<f64>) {
    let b = raw.len() - 1;
    let integral = grid_integral(raw);
    let interp = interpolate_grid(raw, z);
    let density = interp / integral;
    let (lo, hi, w) = grid_position(b, z);
    let scale = -interp / (integral * integral) / b as f64;
    let mut grad: Vec<f64> = (0..=b)
        .map(|k| if k == 0 || k == b { 0.5 * scale } else { scale })
        .collect();
    if lo == hi {
        grad[lo] += 1.0 / integral;
    } else {
        grad[lo] += (1.0 - w) / integral;
        grad[hi] += w / integral;
    }
    (density, grad)
}

fn check_unit_interval(context: &'static str, z: &[f64]) -> Result<()> {
    match z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&bad) => Err(TnetError::Domain {
            context,
            domain: "[0, 1]",
            value: bad,
        }),
        None => Ok(()),
    }
}

impl TNetModel {
    pub fn init(config: ModelConfig, covariate_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if covariate_dim == 0 {
            return Err(TnetError::config("covariate_dim", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let drop = config.dropout;
        let bound = 1.0 / (covariate_dim as f64).sqrt();
        let gcn_weight = Matrix::from_fn(covariate_dim, config.gcn_width, |_, _| {
            rand::Rng::random_range(&mut rng, -bound..bound)
        });
        let rep_mlp = MlpParams::init(
            &[config.gcn_width + covariate_dim, h, h, config.rep_width],
            Activation::Relu,
            Activation::Relu,
            drop,
            &mut rng,
        )?;
        let r = config.rep_width;
        let g1_head = MlpParams::init(&[r, h, h, 1], Activation::Relu, Activation::Sigmoid, drop, &mut rng)?;
        let g2_head = MlpParams::init(
            &[r, h, h, config.grid_count + 1],
            Activation::Relu,
            Activation::Softmax,
            drop,
            &mut rng,
        )?;
        let mu_treated = MlpParams::init(
            &[r + 1, h, h, 1],
            Activation::Relu,
            Activation::Identity,
            drop,
            &mut rng,
        )?;
        let mu_control = MlpParams::init(
            &[r + 1, h, h, 1],
            Activation::Relu,
            Activation::Identity,
            drop,
            &mut rng,
        )?;
        let spline = SplineBasis::clamped_uniform(SPLINE_DEGREE, config.spline_dim)?;
        Ok(Self {
            covariate_dim,
            gcn_weight,
            rep_mlp,
            g1_head,
            g2_head,
            mu_treated,
            mu_control,
            eps_treated: vec![0.0; config.spline_dim],
            eps_control: vec![0.0; config.spline_dim],
            spline,
            config,
        })
    }

    pub fn grid_count(&self) -> usize {
        self.config.grid_count
    }

    /// A model of identical shape with every parameter set to zero; used as
    /// a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = vec![(ParamGroup::Gcn, self.gcn_weight.data())];
        let heads = [
            (ParamGroup::Representation, &self.rep_mlp),
            (ParamGroup::Propensity, &self.g1_head),
            (ParamGroup::ExposureDensity, &self.g2_head),
            (ParamGroup::OutcomeTreated, &self.mu_treated),
            (ParamGroup::OutcomeControl, &self.mu_control),
        ];
        for (group, mlp) in heads {
            out.extend(mlp.tensors().into_iter().map(|t| (group, t)));
        }
        out.push((ParamGroup::PerturbationTreated, &self.eps_treated));
        out.push((ParamGroup::PerturbationControl, &self.eps_control));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = vec![(ParamGroup::Gcn, self.gcn_weight.data_mut())];
        let heads = [
            (ParamGroup::Representation, &mut self.rep_mlp),
            (ParamGroup::Propensity, &mut self.g1_head),
            (ParamGroup::ExposureDensity, &mut self.g2_head),
            (ParamGroup::OutcomeTreated, &mut self.mu_treated),
            (ParamGroup::OutcomeControl, &mut self.mu_control),
        ];
        for (group, mlp) in heads {
            out.extend(mlp.tensors_mut().into_iter().map(|t| (group, t)));
        }
        out.push((ParamGroup::PerturbationTreated, &mut self.eps_treated));
        out.push((ParamGroup::PerturbationControl, &mut self.eps_control));
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Name of the first parameter block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<ParamGroup> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(g, _)| g)
    }

    fn check_dataset(&self, data: &NetworkDataset) -> Result<()> {
        if data.covariate_dim() != self.covariate_dim {
            return Err(TnetError::dim(
                "dataset covariates",
                self.covariate_dim,
                data.covariate_dim(),
            ));
        }
        Ok(())
    }

    fn rep_pass(&self, aggregated: &Matrix, features: &Matrix, rng: Option<&mut dyn RngCore>) -> Result<RepPass> {
        let gcn_pre = aggregated.matmul(&self.gcn_weight)?;
        let gcn_out = Activation::Relu.apply(&gcn_pre);
        let input = Matrix::hconcat(&[&gcn_out, features])?;
        let cache = self.rep_mlp.forward(&input, rng)?;
        Ok(RepPass {
            aggregated: aggregated.clone(),
            gcn_pre,
            cache,
        })
    }

    /// Shared representation `MLP_1(σ(sum_j Wᵀ x_j / sqrt(d_i d_j)), x_i)`.
    /// Deterministic when `dropout` is `None`.
    pub fn represent(&self, graph: &Graph, features: &Matrix, dropout: Option<&mut dyn RngCore>) -> Result<Matrix> {
        if features.cols() != self.covariate_dim {
            return Err(TnetError::dim(
                "represent features",
                self.covariate_dim,
                features.cols(),
            ));
        }
        let agg = graph.normalized_aggregate(features)?;
        Ok(self.rep_pass(&agg, features, dropout)?.cache.output)
    }

    /// Representation of every unit in `data`, evaluation mode.
    pub fn represent_dataset(&self, data: &NetworkDataset) -> Result<Matrix> {
        self.check_dataset(data)?;
        Ok(self.rep_pass(data.aggregated(), data.features(), None)?.cache.output)
    }

    /// Unclamped `P(T = 1 | x, x_N)` per unit.
    pub fn propensity_t(&self, rep: &Matrix) -> Result<Vec<f64>> {
        Ok(self.g1_head.predict(rep)?.into_data())
    }

    /// Normalized grid values per unit (each row integrates to one).
    pub fn density_grid(&self, rep: &Matrix) -> Result<Matrix> {
        let mut raw = self.g2_head.predict(rep)?;
        for r in 0..raw.rows() {
            let row = raw.row_mut(r);
            let integral = grid_integral(row);
            row.iter_mut().for_each(|v| *v /= integral);
        }
        Ok(raw)
    }

    /// `g2(z_i | x_i, x_Ni)` per unit.
    pub fn exposure_density(&self, rep: &Matrix, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != rep.rows() {
            return Err(TnetError::dim("exposure_density", rep.rows(), z.len()));
        }
        check_unit_interval("exposure_density", z)?;
        let grid = self.density_grid(rep)?;
        Ok(z.iter()
            .enumerate()
            .map(|(i, &zi)| interpolate_grid(grid.row(i), zi))
            .collect())
    }

    /// `mu(t_i, z_i, ·)` per unit, routed to the head selected by `t_i`.
    pub fn outcome(&self, rep: &Matrix, t: &[u8], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.outcome_pass(rep, t, z, None)?.values)
    }

    fn outcome_pass(
        &self,
        rep: &Matrix,
        t: &[u8],
        z: &[f64],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<OutcomePass> {
        if t.len() != rep.rows() || z.len() != rep.rows() {
            return Err(TnetError::dim("outcome", rep.rows(), t.len().min(z.len())));
        }
        check_unit_interval("outcome", z)?;
        let mut arms: [Option<ArmPass>; 2] = [None, None];
        let mut values = vec![0.0; rep.rows()];
        for arm in [1u8, 0u8] {
            let rows: Vec<usize> = (0..t.len()).filter(|&i| t[i] == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let head = if arm == 1 { &self.mu_treated } else { &self.mu_control };
            let zs: Vec<f64> = rows.iter().map(|&i| z[i]).collect();
            let input = Matrix::hconcat(&[&rep.select_rows(&rows), &Matrix::column(&zs)])?;
            let cache = head.forward(&input, reborrow(&mut rng))?;
            for (k, &i) in rows.iter().enumerate() {
                values[i] = cache.output.get(k, 0);
            }
            arms[arm as usize] = Some(ArmPass { rows, cache });
        }
        Ok(OutcomePass { arms, values })
    }

    /// `eps(t_i, z_i)` from the arm's spline coefficients.
    pub fn perturbation(&self, t: &[u8], z: &[f64]) -> Result<Vec<f64>> {
        if t.len() != z.len() {
            return Err(TnetError::dim("perturbation", t.len(), z.len()));
        }
        t.iter()
            .zip(z)
            .map(|(&ti, &zi)| self.spline.combine(self.eps_coeffs(ti), zi))
            .collect()
    }

    pub fn eps_coeffs(&self, t: u8) -> &[f64] {
        if t == 1 {
            &self.eps_treated
        } else {
            &self.eps_control
        }
    }

    /// Nuisance values at the observed `(t_i, z_i)` of every unit.
    pub fn factual_nuisances(&self, data: &NetworkDataset) -> Result<NuisanceValues> {
        self.check_dataset(data)?;
        let rep = self.represent_dataset(data)?;
        self.nuisances_from_rep(&rep, data.treatments(), data.exposure())
    }

    /// Nuisance values with every unit set to the same `(t, z)`.
    pub fn counterfactual_nuisances(&self, data: &NetworkDataset, t: u8, z: f64) -> Result<NuisanceValues> {
        self.check_dataset(data)?;
        if t > 1 {
            return Err(TnetError::Domain {
                context: "counterfactual treatment",
                domain: "{0, 1}",
                value: t as f64,
            });
        }
        let rep = self.represent_dataset(data)?;
        let n = data.n();
        self.nuisances_from_rep(&rep, &vec![t; n], &vec![z; n])
    }

    pub fn nuisances_from_rep(&self, rep: &Matrix, t: &[u8], z: &[f64]) -> Result<NuisanceValues> {
        let p1 = self.propensity_t(rep)?;
        let g1 = p1
            .iter()
            .zip(t)
            .map(|(&p, &ti)| clamp_g1(if ti == 1 { p } else { 1.0 - p }))
            .collect();
        let g2 = self.exposure_density(rep, z)?;
        let mu = self.outcome(rep, t, z)?;
        let eps = self.perturbation(t, z)?;
        Ok(NuisanceValues { g1, g2, mu, eps })
    }

    /// Cached forward pass over `units` at their observed `(t_i, z_i)`.
    /// Dropout is active when `rng` is given.
    pub fn factual_pass(
        &self,
        data: &NetworkDataset,
        units: &[usize],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<FactualPass> {
        self.check_dataset(data)?;
        let agg = data.aggregated().select_rows(units);
        let x = data.features().select_rows(units);
        let rep = self.rep_pass(&agg, &x, reborrow(&mut rng))?;
        let rep_out = &rep.cache.output;
        let g1 = self.g1_head.forward(rep_out, reborrow(&mut rng))?;
        let g2 = self.g2_head.forward(rep_out, reborrow(&mut rng))?;
        let t: Vec<u8> = units.iter().map(|&i| data.treatments()[i]).collect();
        let z: Vec<f64> = units.iter().map(|&i| data.exposure()[i]).collect();
        let y: Vec<f64> = units.iter().map(|&i| data.outcomes()[i]).collect();
        let mu = self.outcome_pass(rep_out, &t, &z, reborrow(&mut rng))?;

        let m = units.len();
        let mut logit = Vec::with_capacity(m);
        let mut g1_obs = Vec::with_capacity(m);
        let mut g1_clamped = Vec::with_capacity(m);
        let mut g2_obs = Vec::with_capacity(m);
        let mut g2_grad = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut eps = Vec::with_capacity(m);
        for k in 0..m {
            let a = g1.logits().get(k, 0);
            let p = sigmoid(a);
            let raw = if t[k] == 1 { p } else { 1.0 - p };
            logit.push(a);
            g1_obs.push(clamp_g1(raw));
            g1_clamped.push(raw != clamp_g1(raw));
            let (d, grad) = density_with_grad(g2.output.row(k), z[k]);
            g2_obs.push(d);
            g2_grad.push(grad);
            let phi = self.spline.evaluate(z[k])?;
            eps.push(phi.iter().zip(self.eps_coeffs(t[k])).map(|(a, b)| a * b).sum());
            basis.push(phi);
        }
        Ok(FactualPass {
            units: units.to_vec(),
            t,
            z,
            y,
            logit,
            g1: g1_obs,
            g1_clamped,
            g2: g2_obs,
            g2_grad,
            basis,
            eps,
            rep,
            g1_cache: g1,
            g2_cache: g2,
            mu,
        })
    }

    /// Accumulates parameter gradients for per-unit upstream gradients
    /// of a factual pass.
    pub fn backward(&self, pass: &FactualPass, up: &UnitGrads, detach: Detach, grads: &mut TNetModel) -> Result<()> {
        let m = pass.units.len();
        if [up.g1_logit.len(), up.g2.len(), up.mu.len(), up.eps.len()]
            .iter()
            .any(|&l| l != m)
        {
            return Err(TnetError::dim("backward upstream", m, "mismatched lengths"));
        }
        let r = self.config.rep_width;
        let mut d_rep = Matrix::zeros(m, r);

        for arm in [1u8, 0u8] {
            let Some(ap) = &pass.mu.arms[arm as usize] else {
                continue;
            };
            let (head, ghead) = if arm == 1 {
                (&self.mu_treated, &mut grads.mu_treated)
            } else {
                (&self.mu_control, &mut grads.mu_control)
            };
            let g_out: Vec<f64> = ap.rows.iter().map(|&k| up.mu[k]).collect();
            let mut glayers = std::mem::take(&mut ghead.layers);
            let d_in = head.backward(&ap.cache, &Matrix::column(&g_out), &mut glayers)?;
            ghead.layers = glayers;
            if !detach.outcome {
                for (row, &k) in ap.rows.iter().enumerate() {
                    for (d, s) in d_rep.row_mut(k).iter_mut().zip(&d_in.row(row)[..r]) {
                        *d += s;
                    }
                }
            }
        }

        let mut glayers = std::mem::take(&mut grads.g1_head.layers);
        let d_in = self
            .g1_head
            .backward_from_logits(&pass.g1_cache, &Matrix::column(&up.g1_logit), &mut glayers)?;
        grads.g1_head.layers = glayers;
        if !detach.propensity {
            add_into(&mut d_rep, &d_in);
        }

        let width = self.config.grid_count + 1;
        let mut d_raw = Matrix::zeros(m, width);
        for k in 0..m {
            if up.g2[k] != 0.0 {
                for (d, g) in d_raw.row_mut(k).iter_mut().zip(&pass.g2_grad[k]) {
                    *d = up.g2[k] * g;
                }
            }
        }
        let mut glayers = std::mem::take(&mut grads.g2_head.layers);
        let d_in = self.g2_head.backward(&pass.g2_cache, &d_raw, &mut glayers)?;
        grads.g2_head.layers = glayers;
        if !detach.propensity {
            add_into(&mut d_rep, &d_in);
        }

        for k in 0..m {
            if up.eps[k] == 0.0 {
                continue;
            }
            let target = if pass.t[k] == 1 {
                &mut grads.eps_treated
            } else {
                &mut grads.eps_control
            };
            for (g, phi) in target.iter_mut().zip(&pass.basis[k]) {
                *g += up.eps[k] * phi;
            }
        }

        if detach.outcome && detach.propensity {
            return Ok(());
        }
        let mut glayers = std::mem::take(&mut grads.rep_mlp.layers);
        let d_in = self.rep_mlp.backward(&pass.rep.cache, &d_rep, &mut glayers)?;
        grads.rep_mlp.layers = glayers;
        let gw = self.config.gcn_width;
        let mut d_gcn = d_in.col_range(0, gw);
        for (d, &p) in d_gcn.data_mut().iter_mut().zip(pass.rep.gcn_pre.data()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        grads.gcn_weight.add_t_matmul(&pass.rep.aggregated, &d_gcn)?;
        Ok(())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let ckpt = Checkpoint {
            config_hash: config_hash.to_string(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| TnetError::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| TnetError::io(path, e))
    }

    /// Loads a checkpoint, returning the model and the recorded config hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| TnetError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| TnetError::Serde(e.to_string()))?;
        ckpt.model.config.validate()?;
        Ok((ckpt.model, ckpt.config_hash))
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn add_into(acc: &mut Matrix, src: &Matrix) {
    let r = acc.cols();
    for k in 0..acc.rows() {
        for (d, s) in acc.row_mut(k).iter_mut().zip(&src.row(k)[..r]) {
            *d += s;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    model: TNetModel,
}

#[derive(Debug, Clone)]
pub struct RepPass {
    aggregated: Matrix,
    gcn_pre: Matrix,
    cache: MlpCache,
}

#[derive(Debug, Clone)]
struct ArmPass {
    rows: Vec<usize>,
    cache: MlpCache,
}

#[derive(Debug, Clone)]
struct OutcomePass {
    arms: [Option<ArmPass>; 2],
    values: Vec<f64>,
}

/// Forward pass over a set of units at their observed `(t_i, z_i)`, with
/// everything needed to backpropagate per-unit loss gradients.
#[derive(Debug, Clone)]
pub struct FactualPass {
    pub units: Vec<usize>,
    pub t: Vec<u8>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    /// Logit of `P(T = 1)`.
    pub logit: Vec<f64>,
    /// Clamped `g1(t_i | ·)`.
    pub g1: Vec<f64>,
    /// Whether the clamp on `g1` was active.
    pub g1_clamped: Vec<bool>,
    pub g2: Vec<f64>,
    g2_grad: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
    rep: RepPass,
    g1_cache: MlpCache,
    g2_cache: MlpCache,
    mu: OutcomePass,
}

impl FactualPass {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu.values
    }

    /// Spline basis values at the unit's observed exposure.
    pub fn basis(&self, k: usize) -> &[f64] {
        &self.basis[k]
    }
}

/// Per-unit gradients of a scalar loss with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitGrads {
    /// With respect to the `P(T = 1)` logit.
    pub g1_logit: Vec<f64>,
    /// With respect to the normalized density at the observed exposure.
    pub g2: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps: Vec<f64>,
}

impl UnitGrads {
    pub fn zeros(m: usize) -> Self {
        Self {
            g1_logit: vec![0.0; m],
            g2: vec![0.0; m],
            mu: vec![0.0; m],
            eps: vec![0.0; m],
        }
    }
}

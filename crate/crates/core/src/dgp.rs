//! Semisynthetic data: random graphs, Gaussian covariates, threshold
//! treatment assignment and outcome models with known potential outcomes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::NetworkDataset;
use crate::error::{Result, TnetError};
use crate::estimation::EstimandSpec;
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::nn::sigmoid;

pub const TRUTH_FILE: &str = "truth.json";

// Independent random streams derived from one seed.
const STREAM_WEIGHTS: u64 = 1;
const STREAM_COVARIATES: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `y = t + z + po + 0.5 po_N + e`.
    Homo,
    /// Adds `t (po + 0.5 po_N)`.
    Hete,
    /// Adds `t (po + 0.5 po_N) + z (0.5 po + po_N)`.
    HeteZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSpec {
    pub variant: Variant,
    pub noise_sd: f64,
    pub covariate_dim: usize,
    pub seed: u64,
    /// Treatment weights; drawn i.i.d. standard normal from `seed` if absent.
    pub w1: Option<Vec<f64>>,
    /// Outcome weights; drawn like `w1` if absent.
    pub w2: Option<Vec<f64>>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Homo,
            noise_sd: 0.1,
            covariate_dim: 10,
            seed: 0,
            w1: None,
            w2: None,
        }
    }
}

impl DgpSpec {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(TnetError::config("noise_sd", "must be positive"));
        }
        if self.covariate_dim == 0 {
            return Err(TnetError::config("covariate_dim", "must be positive"));
        }
        for (name, w) in [("w1", &self.w1), ("w2", &self.w2)] {
            if let Some(w) = w {
                if w.len() != self.covariate_dim {
                    return Err(TnetError::config(
                        name,
                        format!("length must equal covariate_dim = {}", self.covariate_dim),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(w1, w2)`, drawing any missing vector from `self.seed`.
    pub fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(self.seed, STREAM_WEIGHTS);
        let d = self.covariate_dim;
        let drawn1: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let drawn2: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        (self.w1.clone().unwrap_or(drawn1), self.w2.clone().unwrap_or(drawn2))
    }

    /// Copy with both weight vectors written out.
    pub fn resolved(&self) -> Self {
        let (w1, w2) = self.weights();
        Self {
            w1: Some(w1),
            w2: Some(w2),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphKind {
    ErdosRenyi { p: f64 },
    PreferentialAttachment { m: usize },
    EdgeListFile { path: PathBuf },
}

/// A simple undirected random graph, deterministic per seed.
pub fn generate_graph(kind: &GraphKind, n: usize, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(TnetError::config("n", format!("need at least 2 units, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        GraphKind::ErdosRenyi { p } => {
            if !(0.0..=1.0).contains(p) {
                return Err(TnetError::config("p", "must lie in [0, 1]"));
            }
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(*p) {
                        edges.push((i, j));
                    }
                }
            }
            Graph::from_edges(n, edges)
        }
        GraphKind::PreferentialAttachment { m } => preferential_attachment(n, *m, &mut rng),
        GraphKind::EdgeListFile { path } => Graph::read_edge_list(path, Some(n)),
    }
}

/// Starts from a clique on `m + 1` nodes; each later node links to `m`
/// distinct earlier nodes chosen with probability proportional to degree.
fn preferential_attachment(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Graph> {
    if m == 0 || m >= n {
        return Err(TnetError::config(
            "m",
            format!("must satisfy 1 <= m < n, got m = {m}, n = {n}"),
        ));
    }
    let mut edges = Vec::with_capacity(m * n);
    // Each node appears once per incident edge.
    let mut ends: Vec<usize> = Vec::with_capacity(2 * m * n);
    for i in 0..=m {
        for j in i + 1..=m {
            edges.push((i, j));
            ends.extend([i, j]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in m + 1..n {
        targets.clear();
        while targets.len() < m {
            let u = *ends.choose(rng).expect("seed clique has edges");
            if !targets.contains(&u) {
                targets.push(u);
            }
        }
        for &u in &targets {
            edges.push((u, v));
            ends.extend([u, v]);
        }
    }
    Graph::from_edges(n, edges)
}

/// `n x d` matrix of independent standard normals.
pub fn generate_covariates(n: usize, spec: &DgpSpec) -> Matrix {
    let mut rng = stream(spec.seed, STREAM_COVARIATES);
    Matrix::from_fn(n, spec.covariate_dim, |_, _| StandardNormal.sample(&mut rng))
}

fn linear_sigmoid(features: &Matrix, w: &[f64]) -> Vec<f64> {
    (0..features.rows())
        .map(|i| sigmoid(features.row(i).iter().zip(w).map(|(x, w)| x * w).sum()))
        .collect()
}

/// `t_i = 1` iff `pt_i + pt_Ni` strictly exceeds its mean over units, with
/// `pt = sigmoid(w1 . x)` and `pt_N` the neighbor mean (0 when isolated).
pub fn generate_treatments(graph: &Graph, features: &Matrix, spec: &DgpSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if features.cols() != spec.covariate_dim {
        return Err(TnetError::dim(
            "generate_treatments features",
            spec.covariate_dim,
            features.cols(),
        ));
    }
    let (w1, _) = spec.weights();
    let pt = linear_sigmoid(features, &w1);
    let pt_n = graph.neighbor_mean(&pt)?;
    let tpt: Vec<f64> = pt.iter().zip(&pt_n).map(|(a, b)| a + b).collect();
    let mean = tpt.iter().sum::<f64>() / tpt.len() as f64;
    Ok(tpt.iter().map(|&v| u8::from(v > mean)).collect())
}

/// Noise-free potential outcomes for every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub variant: Variant,
    pub po: Vec<f64>,
    pub po_neigh: Vec<f64>,
}

impl Truth {
    pub fn n(&self) -> usize {
        self.po.len()
    }

    /// `y_i(t, z)` without noise.
    pub fn value(&self, i: usize, t: u8, z: f64) -> f64 {
        let (po, pn) = (self.po[i], self.po_neigh[i]);
        let t = f64::from(t);
        let base = t + z + po + 0.5 * pn;
        match self.variant {
            Variant::Homo => base,
            Variant::Hete => base + t * (po + 0.5 * pn),
            Variant::HeteZ => base + t * (po + 0.5 * pn) + z * (0.5 * po + pn),
        }
    }

    pub fn potential(&self, t: u8, z: f64) -> Vec<f64> {
        (0..self.n()).map(|i| self.value(i, t, z)).collect()
    }

    /// Sample dose-response `mean_i y_i(t, z)`.
    pub fn psi(&self, t: u8, z: f64) -> f64 {
        self.potential(t, z).iter().sum::<f64>() / self.n() as f64
    }

    /// Exact contrast by differencing the oracle: `(average, per_unit)`.
    pub fn effects(&self, spec: &EstimandSpec) -> (f64, Vec<f64>) {
        let a = self.potential(spec.first.0, spec.first.1);
        let b = self.potential(spec.second.0, spec.second.1);
        let per: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let avg = per.iter().sum::<f64>() / per.len() as f64;
        (avg, per)
    }
}

/// Observed outcomes at `(t_i, z_i)` with fresh Gaussian noise, the oracle
/// and the noise draws.
pub fn generate_outcomes(
    graph: &Graph,
    features: &Matrix,
    t: &[u8],
    z: &[f64],
    spec: &DgpSpec,
) -> Result<(Vec<f64>, Truth, Vec<f64>)> {
    spec.validate()?;
    let n = graph.n();
    if features.rows() != n || t.len() != n || z.len() != n {
        return Err(TnetError::dim("generate_outcomes", n, "mismatched inputs"));
    }
    let (_, w2) = spec.weights();
    let po = linear_sigmoid(features, &w2);
    let po_neigh = graph.neighbor_mean(&po)?;
    let truth = Truth {
        variant: spec.variant,
        po,
        po_neigh,
    };
    let normal = Normal::new(0.0, spec.noise_sd).map_err(|e| TnetError::config("noise_sd", e.to_string()))?;
    let mut rng = stream(spec.seed, STREAM_NOISE);
    let y: Vec<f64> = (0..n)
        .map(|i| truth.value(i, t[i], z[i]) + normal.sample(&mut rng))
        .collect();
    // Recorded as the realized residual so that it reproduces y exactly.
    let noise = (0..n).map(|i| y[i] - truth.value(i, t[i], z[i])).collect();
    Ok((y, truth, noise))
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: NetworkDataset,
    pub truth: Truth,
    pub noise: Vec<f64>,
    pub spec: DgpSpec,
}

/// Full pipeline on a given graph.
pub fn generate_on_graph(graph: Graph, spec: &DgpSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let spec = spec.resolved();
    let features = generate_covariates(graph.n(), &spec);
    let t = generate_treatments(&graph, &features, &spec)?;
    let z = graph.compute_exposure(&t)?.z;
    let (y, truth, noise) = generate_outcomes(&graph, &features, &t, &z, &spec)?;
    let dataset = NetworkDataset::new(graph, features, t, y)?;
    Ok(GeneratedDataset {
        dataset,
        truth,
        noise,
        spec,
    })
}

pub fn generate(kind: &GraphKind, n: usize, graph_seed: u64, spec: &DgpSpec) -> Result<GeneratedDataset> {
    generate_on_graph(generate_graph(kind, n, graph_seed)?, spec)
}

/// Exact `(average, per_unit)` effects for a generated dataset.
pub fn true_effects(generated: &GeneratedDataset, spec: &EstimandSpec) -> (f64, Vec<f64>) {
    generated.truth.effects(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthFile {
    spec: DgpSpec,
    truth: Truth,
    noise: Vec<f64>,
}

impl GeneratedDataset {
    /// Dataset files plus the truth sidecar.
    pub fn export(&self, dir: &Path) -> Result<()> {
        self.dataset.export(dir)?;
        let file = TruthFile {
            spec: self.spec.clone(),
            truth: self.truth.clone(),
            noise: self.noise.clone(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| TnetError::Serde(e.to_string()))?;
        let path = dir.join(TRUTH_FILE);
        fs::write(&path, text + "\n").map_err(|e| TnetError::io(&path, e))
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let dataset = NetworkDataset::import(dir)?;
        let (spec, truth, noise) = read_truth(dir)?;
        if truth.n() != dataset.n() {
            return Err(TnetError::dim("truth sidecar", dataset.n(), truth.n()));
        }
        Ok(Self {
            dataset,
            truth,
            noise,
            spec,
        })
    }
}

/// Reads the truth sidecar; a missing file is a [`TnetError::NoOracle`].
pub fn read_truth(dir: &Path) -> Result<(DgpSpec, Truth, Vec<f64>)> {
    let path = dir.join(TRUTH_FILE);
    if !path.exists() {
        return Err(TnetError::NoOracle(format!("no truth sidecar at {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| TnetError::io(&path, e))?;
    let file: TruthFile = serde_json::from_str(&text).map_err(|e| TnetError::Serde(e.to_string()))?;
    Ok((file.spec, file.truth, file.noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::EstimandKind;

    #[test]
    fn erdos_renyi_extremes() {
        let full = generate_graph(&GraphKind::ErdosRenyi { p: 1.0 }, 4, 1).unwrap();
        assert_eq!(full.edges().len(), 6);
        let empty = generate_graph(&GraphKind::ErdosRenyi { p: 0.0 }, 30, 1).unwrap();
        assert!(empty.edges().is_empty());
        assert!(generate_graph(&GraphKind::ErdosRenyi { p: 0.5 }, 1, 1).is_err());
    }

    #[test]
    fn preferential_attachment_mean_degree() {
        let g = generate_graph(&GraphKind::PreferentialAttachment { m: 5 }, 1000, 3).unwrap();
        assert!((g.mean_degree() - 10.0).abs() <= 0.5, "mean degree {}", g.mean_degree());
        assert!(g.degrees().iter().all(|&d| d >= 5));
        let again = generate_graph(&GraphKind::PreferentialAttachment { m: 5 }, 1000, 3).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn edge_list_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, "0 1\n1 2\nnot an edge\n").unwrap();
        match generate_graph(&GraphKind::EdgeListFile { path }, 3, 0) {
            Err(TnetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_features_on_a_cycle_are_all_control() {
        let n = 8;
        let g = Graph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap();
        let x = Matrix::filled(n, 10, 0.3);
        let t = generate_treatments(&g, &x, &DgpSpec::default()).unwrap();
        assert!(t.iter().all(|&v| v == 0));
        let zero_w = DgpSpec {
            w1: Some(vec![0.0; 10]),
            ..DgpSpec::default()
        };
        let x = generate_covariates(n, &DgpSpec::default());
        assert!(generate_treatments(&g, &x, &zero_w).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn treated_share_is_roughly_balanced() {
        let g = generate_graph(&GraphKind::PreferentialAttachment { m: 3 }, 5000, 2).unwrap();
        for seed in 0..3 {
            let spec = DgpSpec::new(Variant::Homo, seed);
            let x = generate_covariates(5000, &spec);
            let t = generate_treatments(&g, &x, &spec).unwrap();
            let share = t.iter().map(|&v| f64::from(v)).sum::<f64>() / 5000.0;
            assert!((0.3..=0.7).contains(&share), "share {share}");
        }
    }

    fn fixed_truth(variant: Variant, po: f64, pn: f64) -> Truth {
        Truth {
            variant,
            po: vec![po],
            po_neigh: vec![pn],
        }
    }

    #[test]
    fn outcome_formulas() {
        assert_eq!(fixed_truth(Variant::Homo, 0.5, 0.5).value(0, 1, 0.5), 2.25);
        let hete = fixed_truth(Variant::Hete, 0.3, 0.8);
        assert!((hete.value(0, 1, 0.0) - hete.value(0, 0, 0.0) - (1.0 + 0.3 + 0.4)).abs() < 1e-15);
        let hz = fixed_truth(Variant::HeteZ, 0.3, 0.8);
        let ise = hz.value(0, 0, 0.6) - hz.value(0, 0, 0.0);
        assert!((ise - 0.6 * (1.0 + 0.15 + 0.8)).abs() < 1e-15);
    }

    #[test]
    fn homo_truth_effects_are_analytic() {
        let gen = generate(
            &GraphKind::PreferentialAttachment { m: 2 },
            200,
            5,
            &DgpSpec::new(Variant::Homo, 5),
        )
        .unwrap();
        let ame = EstimandSpec::default_for(EstimandKind::Ame, 0.0).unwrap();
        assert!((true_effects(&gen, &ame).0 - 1.0).abs() < 1e-12);
        let ase = EstimandSpec::new(EstimandKind::Ase, (0, 0.37), (0, 0.0)).unwrap();
        let (avg, per) = true_effects(&gen, &ase);
        assert!((avg - 0.37).abs() < 1e-12);
        assert!(per.iter().all(|v| (v - 0.37).abs() < 1e-12));
        let shift = gen.truth.potential(1, 0.3);
        let base = gen.truth.potential(0, 0.3);
        assert!(shift.iter().zip(&base).all(|(a, b)| (a - b - 1.0).abs() < 1e-12));
    }

    #[test]
    fn noise_is_recoverable_and_generation_reproducible() {
        let spec = DgpSpec::new(Variant::Hete, 9);
        let kind = GraphKind::ErdosRenyi { p: 0.05 };
        let a = generate(&kind, 150, 4, &spec).unwrap();
        let b = generate(&kind, 150, 4, &spec).unwrap();
        assert_eq!(a.dataset.outcomes(), b.dataset.outcomes());
        assert_eq!(a.dataset.features(), b.dataset.features());
        let d = &a.dataset;
        for i in 0..d.n() {
            let resid = d.outcomes()[i] - a.truth.value(i, d.treatments()[i], d.exposure()[i]);
            assert_eq!(resid, a.noise[i]);
        }
    }

    #[test]
    fn sidecar_round_trip_and_missing_oracle() {
        let gen = generate(
            &GraphKind::ErdosRenyi { p: 0.1 },
            40,
            1,
            &DgpSpec::new(Variant::HeteZ, 2),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        gen.export(dir.path()).unwrap();
        let back = GeneratedDataset::import(dir.path()).unwrap();
        assert_eq!(back.truth, gen.truth);
        assert_eq!(back.spec, gen.spec);
        assert_eq!(back.spec.variant, Variant::HeteZ);
        std::fs::remove_file(dir.path().join(TRUTH_FILE)).unwrap();
        assert!(matches!(read_truth(dir.path()), Err(TnetError::NoOracle(_))));
    }

    #[test]
    fn spec_validation() {
        let bad = DgpSpec {
            noise_sd: 0.0,
            ..DgpSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DgpSpec {
            w2: Some(vec![1.0; 3]),
            ..DgpSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}

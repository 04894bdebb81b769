//! Observed network data: covariates, treatments, outcomes and graph, plus
//! the quantities derived from them once (exposure, aggregated features).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TnetError};
use crate::graph::Graph;
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
pub struct NetworkDataset {
    graph: Graph,
    features: Matrix,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
    exposure: Vec<f64>,
    isolated: usize,
    /// `sum_{j in N_i} x_j / sqrt(d_i d_j)`, fixed for the dataset.
    aggregated: Matrix,
}

impl NetworkDataset {
    pub fn new(graph: Graph, features: Matrix, treatments: Vec<u8>, outcomes: Vec<f64>) -> Result<Self> {
        let n = graph.n();
        if features.rows() != n {
            return Err(TnetError::dim("dataset features", n, features.rows()));
        }
        if outcomes.len() != n {
            return Err(TnetError::dim("dataset outcomes", n, outcomes.len()));
        }
        features.ensure_finite("features")?;
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(TnetError::NonFinite {
                tensor: "outcomes".into(),
            });
        }
        let exposure = graph.compute_exposure(&treatments)?;
        let aggregated = graph.normalized_aggregate(&features)?;
        Ok(Self {
            graph,
            features,
            treatments,
            outcomes,
            exposure: exposure.z,
            isolated: exposure.isolated,
            aggregated,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn covariate_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn aggregated(&self) -> &Matrix {
        &self.aggregated
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    pub fn isolated_units(&self) -> usize {
        self.isolated
    }

    pub fn mean_exposure(&self) -> f64 {
        if self.exposure.is_empty() {
            0.0
        } else {
            self.exposure.iter().sum::<f64>() / self.exposure.len() as f64
        }
    }

    /// Same data with outcomes replaced.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.n() {
            return Err(TnetError::dim("with_outcomes", self.n(), outcomes.len()));
        }
        let mut out = self.clone();
        out.outcomes = outcomes;
        Ok(out)
    }

    /// Writes `features.csv`, `units.csv` and `edges.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| TnetError::io(dir, e))?;
        let features_path = dir.join(FEATURES_FILE);
        let mut w = csv::Writer::from_path(&features_path).map_err(|e| csv_err(&features_path, e))?;
        let mut header = vec!["unit".to_string()];
        header.extend((0..self.covariate_dim()).map(|c| format!("x{c}")));
        w.write_record(&header).map_err(|e| csv_err(&features_path, e))?;
        for i in 0..self.n() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.features.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_err(&features_path, e))?;
        }
        w.flush().map_err(|e| TnetError::io(&features_path, e))?;

        let units_path = dir.join(UNITS_FILE);
        let mut w = csv::Writer::from_path(&units_path).map_err(|e| csv_err(&units_path, e))?;
        for i in 0..self.n() {
            w.serialize(UnitRecord {
                unit: i,
                treatment: self.treatments[i],
                outcome: self.outcomes[i],
            })
            .map_err(|e| csv_err(&units_path, e))?;
        }
        w.flush().map_err(|e| TnetError::io(&units_path, e))?;

        self.graph.write_edge_list(&dir.join(EDGES_FILE))
    }

    /// Reads the trio written by [`NetworkDataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let features_path = dir.join(FEATURES_FILE);
        let mut r = csv::Reader::from_path(&features_path).map_err(|e| csv_err(&features_path, e))?;
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(&features_path, e))?;
            let line = k + 2;
            let unit: usize = parse_field(&features_path, line, rec.get(0))?;
            if unit != k {
                return Err(TnetError::Parse {
                    path: features_path.clone(),
                    line,
                    message: format!("expected unit {k}, found {unit}"),
                });
            }
            let row = (1..rec.len())
                .map(|c| parse_field(&features_path, line, rec.get(c)))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let features = Matrix::from_rows(&rows)?;

        let units_path = dir.join(UNITS_FILE);
        let mut r = csv::Reader::from_path(&units_path).map_err(|e| csv_err(&units_path, e))?;
        let mut treatments = Vec::new();
        let mut outcomes = Vec::new();
        for (k, rec) in r.deserialize::<UnitRecord>().enumerate() {
            let rec = rec.map_err(|e| csv_err(&units_path, e))?;
            if rec.unit != k {
                return Err(TnetError::Parse {
                    path: units_path.clone(),
                    line: k + 2,
                    message: format!("expected unit {k}, found {}", rec.unit),
                });
            }
            treatments.push(rec.treatment);
            outcomes.push(rec.outcome);
        }
        let graph = Graph::read_edge_list(&dir.join(EDGES_FILE), Some(features.rows()))?;
        NetworkDataset::new(graph, features, treatments, outcomes)
    }
}

pub const FEATURES_FILE: &str = "features.csv";
pub const UNITS_FILE: &str = "units.csv";
pub const EDGES_FILE: &str = "edges.txt";

#[derive(Debug, Serialize, Deserialize)]
struct UnitRecord {
    unit: usize,
    treatment: u8,
    outcome: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> TnetError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => TnetError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        TnetError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        }
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: Option<&str>) -> Result<T> {
    let raw = field.unwrap_or("");
    raw.trim().parse().map_err(|_| TnetError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse `{raw}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkDataset {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let x = Matrix::from_fn(4, 2, |r, c| 0.1 * (r as f64) - 0.3 * c as f64 + 1.0 / 3.0);
        NetworkDataset::new(g, x, vec![1, 0, 1, 1], vec![0.5, -1.25, 2.0, 1.0 / 7.0]).unwrap()
    }

    #[test]
    fn derived_quantities() {
        let d = tiny();
        assert_eq!(d.exposure(), &[0.0, 1.0, 0.5, 1.0]);
        assert_eq!(d.mean_exposure(), 0.625);
        assert_eq!(d.aggregated().shape(), (4, 2));
    }

    #[test]
    fn shape_validation() {
        let g = Graph::empty(3);
        assert!(NetworkDataset::new(g.clone(), Matrix::zeros(2, 1), vec![0; 3], vec![0.0; 3]).is_err());
        assert!(NetworkDataset::new(g.clone(), Matrix::zeros(3, 1), vec![0; 3], vec![0.0; 2]).is_err());
        assert!(NetworkDataset::new(g, Matrix::zeros(3, 1), vec![0, 3, 0], vec![0.0; 3]).is_err());
    }

    #[test]
    fn export_import_is_exact() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        d.export(dir.path()).unwrap();
        let back = NetworkDataset::import(dir.path()).unwrap();
        assert_eq!(back.features(), d.features());
        assert_eq!(back.outcomes(), d.outcomes());
        assert_eq!(back.treatments(), d.treatments());
        assert_eq!(back.graph(), d.graph());
    }

    #[test]
    fn import_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            NetworkDataset::import(&dir.path().join("nope")),
            Err(TnetError::Io { .. })
        ));
    }
}

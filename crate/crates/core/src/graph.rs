//! Undirected interference graph, neighborhood exposure and the
//! symmetric-normalized neighbor aggregation used by the feature module.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TnetError};
use crate::linalg::Matrix;
use crate::nn::Activation;

/// Simple undirected graph over units `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

/// Fraction of treated neighbors per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Exposure {
    pub z: Vec<f64>,
    /// Units without neighbors; their exposure is defined as 0.
    pub isolated: usize,
}

impl Graph {
    /// Builds a graph from an arbitrary pair list. Pairs are symmetrized and
    /// deduplicated; self-loops are dropped.
    pub fn from_edges(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(TnetError::dim("Graph::from_edges unit id", format!("< {n}"), a.max(b)));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { n, edges, adjacency })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: Vec::new(),
            adjacency: vec![Vec::new(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected edges as `(low, high)` pairs in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn mean_degree(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.n as f64
        }
    }

    /// Relabels unit `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(TnetError::dim("Graph::permuted", self.n, perm.len()));
        }
        Graph::from_edges(self.n, self.edges.iter().map(|&(a, b)| (perm[a], perm[b])))
    }

    /// Mean of `values` over each unit's neighbors; 0 for isolated units.
    pub fn neighbor_mean(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.n {
            return Err(TnetError::dim("neighbor_mean", self.n, values.len()));
        }
        Ok(self
            .adjacency
            .iter()
            .map(|nb| {
                if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| values[j]).sum::<f64>() / nb.len() as f64
                }
            })
            .collect())
    }

    /// `z_i = sum_{j in N_i} t_j / |N_i|`, with `z_i = 0` for isolated units.
    pub fn compute_exposure(&self, treatments: &[u8]) -> Result<Exposure> {
        if treatments.len() != self.n {
            return Err(TnetError::dim("compute_exposure", self.n, treatments.len()));
        }
        if let Some(&bad) = treatments.iter().find(|&&t| t > 1) {
            return Err(TnetError::Domain {
                context: "compute_exposure",
                domain: "{0, 1}",
                value: bad as f64,
            });
        }
        let t: Vec<f64> = treatments.iter().map(|&t| t as f64).collect();
        let z = self.neighbor_mean(&t)?;
        let isolated = self.adjacency.iter().filter(|nb| nb.is_empty()).count();
        if isolated > 0 {
            log::warn!("{isolated} isolated unit(s) assigned exposure 0");
        }
        Ok(Exposure { z, isolated })
    }

    /// Row `i` is `sum_{j in N_i} x_j / sqrt(d_i d_j)`. No self term.
    pub fn normalized_aggregate(&self, features: &Matrix) -> Result<Matrix> {
        if features.rows() != self.n {
            return Err(TnetError::dim("normalized_aggregate rows", self.n, features.rows()));
        }
        let mut out = Matrix::zeros(self.n, features.cols());
        let inv_sqrt: Vec<f64> = self
            .adjacency
            .iter()
            .map(|nb| {
                if nb.is_empty() {
                    0.0
                } else {
                    1.0 / (nb.len() as f64).sqrt()
                }
            })
            .collect();
        for i in 0..self.n {
            let di = inv_sqrt[i];
            let row = out.row_mut(i);
            for &j in &self.adjacency[i] {
                let w = di * inv_sqrt[j];
                for (o, x) in row.iter_mut().zip(features.row(j)) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// `σ(sum_{j in N_i} Wᵀ x_j / sqrt(d_i d_j))` for every unit.
    pub fn gcn_aggregate(&self, features: &Matrix, weight: &Matrix, activation: Activation) -> Result<Matrix> {
        let agg = self.normalized_aggregate(features)?;
        let pre = agg.matmul(weight)?;
        Ok(activation.apply(&pre))
    }

    /// Reads a whitespace-separated edge list of 0-indexed ids; `#` starts a
    /// comment line. When `n` is `None` it is inferred as `max id + 1`.
    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TnetError::io(path, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| TnetError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut fields = trimmed.split_whitespace();
            let (a, b) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(parse_err(format!("expected two unit ids, got `{trimmed}`"))),
            };
            let a: usize = a.parse().map_err(|_| parse_err(format!("bad unit id `{a}`")))?;
            let b: usize = b.parse().map_err(|_| parse_err(format!("bad unit id `{b}`")))?;
            if let Some(n) = n {
                if a >= n || b >= n {
                    return Err(parse_err(format!("unit id out of range for n = {n}")));
                }
            }
            pairs.push((a, b));
        }
        let n = n.unwrap_or_else(|| pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
        Graph::from_edges(n, pairs)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.edges.len() * 12 + 32);
        writeln!(out, "# n = {}", self.n).expect("write to vec");
        for &(a, b) in &self.edges {
            writeln!(out, "{a} {b}").expect("write to vec");
        }
        fs::write(path, out).map_err(|e| TnetError::io(path, e))
    }
}

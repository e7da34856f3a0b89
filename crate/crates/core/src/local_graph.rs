//! Per-cell 3x3 neighborhood graphs and their normalized adjacency.
//!
//! Node 0 is the target cell; the existing king neighbors follow in
//! row-major window order. Absent neighbors are simply left out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{neighbors_king, CellId, FeatureTable, Features, N_FEATURES};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    node_features: Matrix<f64>,
    edges: Vec<(usize, usize)>,
    central_index: usize,
    node_coords: Vec<CellId>,
}

impl LocalGraph {
    /// Assembles a graph from explicit nodes; edges are every king-adjacent
    /// pair, listed as `(i, j)` with `i < j` in lexicographic order.
    pub fn from_nodes(nodes: Vec<(CellId, Features)>, central_index: usize) -> Result<Self> {
        let k = nodes.len();
        if k == 0 || k > 9 {
            return Err(Error::Shape(format!("local graph must have 1..=9 nodes, got {k}")));
        }
        if central_index >= k {
            return Err(Error::Shape(format!("central index {central_index} out of range")));
        }
        let mut data = Vec::with_capacity(k * N_FEATURES);
        for (_, f) in &nodes {
            data.extend_from_slice(f);
        }
        let node_coords: Vec<CellId> = nodes.iter().map(|(c, _)| *c).collect();
        let mut edges = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if node_coords[i].is_king_adjacent(node_coords[j]) {
                    edges.push((i, j));
                }
            }
        }
        Ok(LocalGraph {
            node_features: Matrix::from_vec(k, N_FEATURES, data)?,
            edges,
            central_index,
            node_coords,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn node_features(&self) -> &Matrix<f64> {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn central_index(&self) -> usize {
        self.central_index
    }

    pub fn node_coords(&self) -> &[CellId] {
        &self.node_coords
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes()];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Relabels nodes: node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<LocalGraph> {
        let k = self.n_nodes();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape("not a permutation".into()));
        }
        let mut features = Matrix::zeros(k, N_FEATURES);
        let mut coords = vec![CellId::new(0, 0); k];
        for i in 0..k {
            features.row_mut(perm[i]).copy_from_slice(self.node_features.row(i));
            coords[perm[i]] = self.node_coords[i];
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (perm[a], perm[b]);
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        Ok(LocalGraph {
            node_features: features,
            edges,
            central_index: perm[self.central_index],
            node_coords: coords,
        })
    }

    /// JSON debug dump: `nodes` (coords + features), `edges`, `central_index`.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<GraphNodeDump> = (0..self.n_nodes())
            .map(|i| GraphNodeDump {
                row: self.node_coords[i].row,
                col: self.node_coords[i].col,
                features: self.node_features.row(i).to_vec(),
            })
            .collect();
        serde_json::to_value(GraphDump {
            nodes,
            edges: self.edges.clone(),
            central_index: self.central_index,
        })
        .expect("graph dump serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct GraphNodeDump {
    row: usize,
    col: usize,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphDump {
    nodes: Vec<GraphNodeDump>,
    edges: Vec<(usize, usize)>,
    central_index: usize,
}

/// The target cell plus every existing king neighbor.
pub fn build_local_graph(table: &FeatureTable, row: usize, col: usize) -> Result<LocalGraph> {
    let center = table.get(row, col).ok_or(Error::MissingCell { row, col })?;
    let mut nodes = vec![(center.id(), center.features)];
    for n in neighbors_king(row, col, table.grid())? {
        if let Some(rec) = table.get_id(n) {
            nodes.push((n, rec.features));
        }
    }
    LocalGraph::from_nodes(nodes, 0)
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency<T: Scalar>(g: &LocalGraph) -> Matrix<T> {
    let k = g.n_nodes();
    let deg: Vec<f64> = g.degrees().iter().map(|&d| (d + 1) as f64).collect();
    let mut a = Matrix::zeros(k, k);
    for (i, &d) in deg.iter().enumerate() {
        a.set(i, i, T::of(1.0 / d));
    }
    for &(i, j) in g.edges() {
        // Both entries from one expression keeps the matrix exactly symmetric.
        let w = T::of(1.0 / (deg[i] * deg[j]).sqrt());
        a.set(i, j, w);
        a.set(j, i, w);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellRecord, GridSpec};

    fn full_table(n: usize) -> FeatureTable {
        let g = GridSpec::with_shape(n, n).unwrap();
        let recs = (0..n).flat_map(|r| {
            (0..n).map(move |c| CellRecord {
                row: r,
                col: c,
                features: [(r * n + c) as f64; N_FEATURES],
                label: None,
                zone: None,
            })
        });
        FeatureTable::from_records(g, recs).unwrap()
    }

    /// Brute-force count of king-adjacent pairs.
    fn king_pairs(cells: &[CellId]) -> usize {
        let mut n = 0;
        for a in cells {
            for b in cells {
                if a < b && a.row.abs_diff(b.row) <= 1 && a.col.abs_diff(b.col) <= 1 {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn topology_interior_border_corner() {
        let t = full_table(5);
        let g = build_local_graph(&t, 2, 2).unwrap();
        assert_eq!((g.n_nodes(), g.edges().len()), (9, 20));
        let c = build_local_graph(&t, 0, 0).unwrap();
        assert_eq!((c.n_nodes(), c.edges().len()), (4, 6));
        let b = build_local_graph(&t, 0, 2).unwrap();
        assert_eq!((b.n_nodes(), b.edges().len()), (6, 11));
        for g in [g, c, b] {
            assert_eq!(g.edges().len(), king_pairs(g.node_coords()));
            assert_eq!(g.central_index(), 0);
        }
    }

    #[test]
    fn missing_neighbors_are_left_out() {
        let g = GridSpec::with_shape(3, 3).unwrap();
        let t = FeatureTable::from_records(
            g,
            [(1, 1), (0, 0), (2, 2)].into_iter().map(|(r, c)| CellRecord {
                row: r,
                col: c,
                features: [0.0; N_FEATURES],
                label: None,
                zone: None,
            }),
        )
        .unwrap();
        let lg = build_local_graph(&t, 1, 1).unwrap();
        assert_eq!(lg.n_nodes(), 3);
        assert_eq!(lg.edges(), &[(0, 1), (0, 2)]);
        assert!(matches!(build_local_graph(&t, 0, 1), Err(Error::MissingCell { .. })));
    }

    #[test]
    fn adjacency_small_cases() {
        let one = LocalGraph::from_nodes(vec![(CellId::new(0, 0), [0.0; 9])], 0).unwrap();
        assert_eq!(normalized_adjacency::<f64>(&one).as_slice(), &[1.0]);
        let two =
            LocalGraph::from_nodes(vec![(CellId::new(0, 0), [0.0; 9]), (CellId::new(0, 1), [0.0; 9])], 0).unwrap();
        assert_eq!(normalized_adjacency::<f64>(&two).as_slice(), &[0.5; 4]);
    }

    #[test]
    fn adjacency_full_graph() {
        let g = build_local_graph(&full_table(3), 1, 1).unwrap();
        let a = normalized_adjacency::<f64>(&g);
        let deg = g.degrees();
        // Row sums of A + I.
        let mut raw = [1usize; 9];
        for &(i, j) in g.edges() {
            raw[i] += 1;
            raw[j] += 1;
        }
        for i in 0..9 {
            assert_eq!(raw[i], deg[i] + 1);
            assert_eq!(a.get(i, i), 1.0 / (deg[i] + 1) as f64);
            for j in 0..9 {
                assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                assert!(a.get(i, j) >= 0.0);
            }
        }
        let direct: Vec<f64> = (0..9).map(|i| (0..9).map(|j| a.get(i, j)).sum()).collect();
        assert_eq!(a.row_sums(), direct);
    }

    #[test]
    fn json_dump_shape() {
        let g = build_local_graph(&full_table(3), 0, 0).unwrap();
        let v = g.to_json();
        assert_eq!(v["nodes"].as_array().unwrap().len(), 4);
        assert_eq!(v["edges"].as_array().unwrap().len(), 6);
        assert_eq!(v["central_index"], 0);
        assert_eq!(v["nodes"][0]["row"], 0);
    }

    #[test]
    fn permutation_keeps_structure() {
        let g = build_local_graph(&full_table(4), 1, 1).unwrap();
        let perm = [0, 8, 7, 6, 5, 4, 3, 2, 1];
        let p = g.permuted(&perm).unwrap();
        assert_eq!(p.edges().len(), 20);
        assert_eq!(p.node_features().row(8), g.node_features().row(1));
        assert!(g.permuted(&[0, 0, 1, 2, 3, 4, 5, 6, 7]).is_err());
    }
}

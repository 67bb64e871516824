//! Isomap: kNN graph, graph geodesics, classical MDS.

use nalgebra::{DMatrix, SymmetricEigen};
use petgraph::algo::{dijkstra, kosaraju_scc};
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};

use crate::agents::cosine_distance;
use crate::error::{Error, Result};

use super::ActivationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => cosine_distance(a, b),
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Default neighbour count; activation embeddings use 20 to 60.
pub const DEFAULT_NEIGHBORS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    /// One entry per input point; `None` for points outside the largest
    /// connected component of the neighbour graph.
    pub coords: Vec<Option<[f64; 3]>>,
    pub neighbor_count: usize,
    pub dropped: usize,
    /// Kruskal stress-1 of embedded distances against graph geodesics.
    pub stress: f64,
    /// Share of positive eigenvalue mass left outside the top three.
    pub residual_variance: f64,
}

impl EmbeddingResult {
    /// Indices and coordinates of the embedded points.
    pub fn kept(&self) -> impl Iterator<Item = (usize, [f64; 3])> + '_ {
        self.coords.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c)))
    }
}

/// Classical MDS of a symmetric distance matrix into `dims` dimensions.
/// Returns the coordinates and the full eigenvalue spectrum, descending.
pub fn classical_mds(d: &DMatrix<f64>, dims: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = d.nrows();
    let d2 = d.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).mean()).collect();
    let total = d2.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + total));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coords = DMatrix::from_fn(n, dims, |i, k| match order.get(k) {
        Some(&c) => eig.eigenvectors[(i, c)] * eig.eigenvalues[c].max(0.0).sqrt(),
        None => 0.0,
    });
    (coords, order.iter().map(|&c| eig.eigenvalues[c]).collect())
}

/// Symmetric k-nearest-neighbour graph weighted by `metric`.
fn knn_graph(points: &[Vec<f64>], k: usize, metric: Metric) -> UnGraph<(), f64> {
    let n = points.len();
    let mut graph = UnGraph::<(), f64>::with_capacity(n, n * k);
    for _ in 0..n {
        graph.add_node(());
    }
    for i in 0..n {
        let mut near: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (metric.distance(&points[i], &points[j]), j)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(dist, j) in near.iter().take(k) {
            let (a, b) = (NodeIndex::new(i), NodeIndex::new(j));
            if graph.find_edge(a, b).is_none() {
                graph.add_edge(a, b, dist);
            }
        }
    }
    graph
}

/// Shortest-path distances in the neighbour graph between `nodes`.
fn geodesics(graph: &UnGraph<(), f64>, nodes: &[usize]) -> DMatrix<f64> {
    let m = nodes.len();
    let mut geo = DMatrix::from_element(m, m, f64::INFINITY);
    for (a, &i) in nodes.iter().enumerate() {
        let dist = dijkstra(graph, NodeIndex::new(i), None, |e| *e.weight());
        for (b, &j) in nodes.iter().enumerate() {
            if let Some(&d) = dist.get(&NodeIndex::new(j)) {
                geo[(a, b)] = d;
            }
        }
    }
    // floating-point sums can differ in the last bit by direction
    for a in 0..m {
        for b in a + 1..m {
            let v = geo[(a, b)].min(geo[(b, a)]);
            geo[(a, b)] = v;
            geo[(b, a)] = v;
        }
    }
    geo
}

/// Graph geodesic matrix over all points of the k-nearest-neighbour graph;
/// disconnected pairs are infinite.
pub fn geodesic_matrix(points: &[Vec<f64>], k: usize, metric: Metric) -> DMatrix<f64> {
    let all: Vec<usize> = (0..points.len()).collect();
    geodesics(&knn_graph(points, k, metric), &all)
}

/// Three-dimensional Isomap embedding with `k` nearest neighbours.
pub fn isomap_points(points: &[Vec<f64>], k: usize, metric: Metric) -> Result<EmbeddingResult> {
    let n = points.len();
    if k == 0 || n < k + 1 {
        return Err(Error::Analysis(format!("isomap needs more than {k} points and k > 0 (got {n})")));
    }
    let graph = knn_graph(points, k, metric);
    let mut kept: Vec<usize> = kosaraju_scc(&graph)
        .into_iter()
        .max_by_key(|c| c.len())
        .expect("non-empty graph")
        .into_iter()
        .map(|v| v.index())
        .collect();
    kept.sort_unstable();
    let m = kept.len();
    let geo = geodesics(&graph, &kept);
    let (y, eigenvalues) = classical_mds(&geo, 3);

    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..m {
        for b in a + 1..m {
            let e = (0..3).map(|k| (y[(a, k)] - y[(b, k)]).powi(2)).sum::<f64>().sqrt();
            num += (geo[(a, b)] - e).powi(2);
            den += geo[(a, b)].powi(2);
        }
    }
    let positive: f64 = eigenvalues.iter().filter(|&&v| v > 0.0).sum();
    let top: f64 = eigenvalues.iter().take(3).filter(|&&v| v > 0.0).sum();

    let mut coords = vec![None; n];
    for (a, &i) in kept.iter().enumerate() {
        coords[i] = Some([y[(a, 0)], y[(a, 1)], y[(a, 2)]]);
    }
    Ok(EmbeddingResult {
        coords,
        neighbor_count: k,
        dropped: n - m,
        stress: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
        residual_variance: if positive > 0.0 { 1.0 - top / positive } else { 0.0 },
    })
}

/// Isomap of activation records under cosine distance.
pub fn isomap_embed(records: &[ActivationRecord], neighbors: usize) -> Result<EmbeddingResult> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    isomap_points(&points, neighbors, Metric::Cosine)
}

/// Pearson correlation between all pairwise distances of two point sets.
pub fn distance_correlation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    let e = |p: &[f64], q: &[f64]| Metric::Euclidean.distance(p, q);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            x.push(e(&a[i], &a[j]));
            y.push(e(&b[i], &b[j]));
        }
    }
    super::stats::pearson(&x, &y).map(|c| c.rho)
}

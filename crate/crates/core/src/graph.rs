//! Road-network graph and the spectral operators derived from it.
//!
//! Segments are vertices; undirected edges carry road distances in miles.
//! The production convolution path only ever uses the renormalized adjacency
//! or the Chebyshev recurrence on the scaled Laplacian. Full eigendecomposition
//! is available through [`SpectralDecomposition`] purely as a correctness oracle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{matmul, Tensor};

/// Gaussian-kernel weights below this are dropped to keep `A` sparse.
pub const ADJACENCY_THRESHOLD: f64 = 0.1;

const POWER_ITER_TOL: f64 = 1e-9;
const POWER_ITER_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub distance_miles: f64,
}

impl Edge {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, distance_miles: f64) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            distance_miles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyMode {
    /// `exp(-(d/σ)²)` thresholded at [`ADJACENCY_THRESHOLD`].
    #[default]
    Gaussian,
    /// 1 on every edge.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMax {
    /// Largest Laplacian eigenvalue by power iteration.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    segment_ids: Vec<String>,
    index: BTreeMap<String, usize>,
    adjacency: Tensor,
    distances: Tensor,
}

impl RoadGraph {
    pub fn n(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn segment_ids(&self) -> &[String] {
        &self.segment_ids
    }

    /// Symmetric N×N weight matrix with zero diagonal.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Edge distances in miles; `∞` where no edge exists, 0 on the diagonal.
    pub fn distances(&self) -> &Tensor {
        &self.distances
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSegment(id.to_string()))
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.n();
        (0..n).filter_map(move |j| {
            let d = self.distances.data()[i * n + j];
            (j != i && d.is_finite()).then_some((j, d))
        })
    }

    /// Unweighted-adjacency neighbor lists (any edge, regardless of kernel weight).
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n()).map(|i| self.neighbors(i).map(|(j, _)| j).collect()).collect()
    }

    /// Shortest-path distance in miles from `src` to every segment (Dijkstra).
    pub fn shortest_paths_from(&self, src: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
            }
        }

        let mut dist = vec![f64::INFINITY; self.n()];
        dist[src] = 0.0;
        let mut heap = BinaryHeap::from([Item(0.0, src)]);
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Item(nd, v));
                }
            }
        }
        dist
    }

    /// All-pairs shortest-path miles, row-major N×N.
    pub fn shortest_paths(&self) -> Tensor {
        let n = self.n();
        let data = (0..n).flat_map(|i| self.shortest_paths_from(i)).collect();
        Tensor::new(&[n, n], data).expect("n*n values")
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Build the undirected road graph.
///
/// `declared` lists segments that must exist even without edges. Vertex order
/// is the sorted set of all ids, so the result does not depend on edge order.
/// Gaussian weights use σ = standard deviation of the finite pairwise
/// shortest-path distances (1.0 when fewer than two distinct values exist).
pub fn build_graph(declared: &[String], edges: &[Edge], mode: AdjacencyMode) -> Result<RoadGraph> {
    let mut undirected: BTreeMap<(String, String), f64> = BTreeMap::new();
    for e in edges {
        if e.src.is_empty() || e.dst.is_empty() {
            return Err(invalid("edge with empty segment id"));
        }
        if e.src == e.dst {
            return Err(invalid(format!("self-loop on segment `{}`", e.src)));
        }
        if !(e.distance_miles.is_finite() && e.distance_miles > 0.0) {
            return Err(invalid(format!(
                "edge {}-{} has non-positive distance {}",
                e.src, e.dst, e.distance_miles
            )));
        }
        let key = if e.src < e.dst {
            (e.src.clone(), e.dst.clone())
        } else {
            (e.dst.clone(), e.src.clone())
        };
        match undirected.get(&key) {
            Some(&prev) if prev != e.distance_miles => {
                return Err(Error::ConflictingEdge {
                    src: key.0,
                    dst: key.1,
                    first: prev,
                    second: e.distance_miles,
                })
            }
            _ => {
                undirected.insert(key, e.distance_miles);
            }
        }
    }

    let mut ids: BTreeSet<String> = declared.iter().cloned().collect();
    if ids.iter().any(String::is_empty) {
        return Err(invalid("empty segment id"));
    }
    for (a, b) in undirected.keys() {
        ids.insert(a.clone());
        ids.insert(b.clone());
    }
    let segment_ids: Vec<String> = ids.into_iter().collect();
    let index: BTreeMap<String, usize> = segment_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let n = segment_ids.len();

    let mut distances = Tensor::full(&[n, n], f64::INFINITY);
    for i in 0..n {
        distances.set(&[i, i], 0.0);
    }
    for ((a, b), &d) in &undirected {
        let (i, j) = (index[a], index[b]);
        distances.set(&[i, j], d);
        distances.set(&[j, i], d);
    }

    let mut graph = RoadGraph {
        segment_ids,
        index,
        adjacency: Tensor::zeros(&[n, n]),
        distances,
    };

    let sigma = match mode {
        AdjacencyMode::Binary => 1.0,
        AdjacencyMode::Gaussian => {
            let sp = graph.shortest_paths();
            let mut finite: Vec<f64> = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let d = sp.data()[i * n + j];
                    if i != j && d.is_finite() {
                        finite.push(d);
                    }
                }
            }
            let distinct: BTreeSet<u64> = finite.iter().map(|d| d.to_bits()).collect();
            let s = if distinct.len() < 2 { 1.0 } else { population_std(&finite) };
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }
    };

    for ((a, b), &d) in &undirected {
        let (i, j) = (graph.index[a], graph.index[b]);
        let w = match mode {
            AdjacencyMode::Binary => 1.0,
            AdjacencyMode::Gaussian => {
                let w = (-(d / sigma).powi(2)).exp();
                if w < ADJACENCY_THRESHOLD {
                    0.0
                } else {
                    w
                }
            }
        };
        graph.adjacency.set(&[i, j], w);
        graph.adjacency.set(&[j, i], w);
    }
    Ok(graph)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalized_adjacency(g: &RoadGraph) -> Tensor {
    let n = g.n();
    let a = g.adjacency().data();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let at = a[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out.data_mut()[i * n + j] = at / (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

/// Combinatorial Laplacian `L = D − A`.
pub fn laplacian(g: &RoadGraph) -> Tensor {
    let n = g.n();
    let a = g.adjacency().data();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut d = 0.0;
        for j in 0..n {
            d += a[i * n + j];
            l.data_mut()[i * n + j] = -a[i * n + j];
        }
        l.data_mut()[i * n + i] = d;
    }
    l
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power iteration.
pub fn largest_eigenvalue(m: &Tensor) -> Result<f64> {
    let n = square_dim(m, "largest_eigenvalue")?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7071 + 0.3).sin() + 1.1).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let apply = |x: &[f64]| -> Vec<f64> {
        let d = m.data();
        (0..n)
            .map(|i| d[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut mu = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_ITER_CAP {
        let w = apply(&v);
        let new_mu: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - new_mu * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let converged = it > 1 && (new_mu - mu).abs() <= POWER_ITER_TOL * new_mu.abs().max(1.0);
        mu = new_mu;
        if converged {
            return Ok(mu);
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITER_CAP,
        residual,
    })
}

fn square_dim(m: &Tensor, op: &'static str) -> Result<usize> {
    match *m.shape() {
        [r, c] if r == c => Ok(r),
        _ => Err(shape_err(op, m.shape(), &[0, 0])),
    }
}

/// Resolve `λ_max` for `g`. A zero Laplacian (no edges) resolves to 2.
pub fn resolve_lambda_max(g: &RoadGraph, lambda_max: LambdaMax) -> Result<f64> {
    match lambda_max {
        LambdaMax::Fixed(v) if v > 0.0 && v.is_finite() => Ok(v),
        LambdaMax::Fixed(v) => Err(invalid(format!("lambda_max must be positive, got {v}"))),
        LambdaMax::Auto => {
            let v = largest_eigenvalue(&laplacian(g))?;
            Ok(if v > 1e-12 { v } else { 2.0 })
        }
    }
}

/// `L̂ = 2L/λ_max − I`.
pub fn scaled_laplacian(g: &RoadGraph, lambda_max: LambdaMax) -> Result<Tensor> {
    let lm = resolve_lambda_max(g, lambda_max)?;
    let n = g.n();
    let mut l = laplacian(g).map(|x| 2.0 * x / lm);
    for i in 0..n {
        l.data_mut()[i * n + i] -= 1.0;
    }
    Ok(l)
}

/// Precomputed operators consumed by the spatial convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperators {
    pub normalized_adjacency: Tensor,
    pub scaled_laplacian: Tensor,
    pub lambda_max: f64,
}

impl SpectralOperators {
    pub fn new(g: &RoadGraph, lambda_max: LambdaMax) -> Result<Self> {
        let lm = resolve_lambda_max(g, lambda_max)?;
        Ok(Self {
            normalized_adjacency: normalized_adjacency(g),
            scaled_laplacian: scaled_laplacian(g, LambdaMax::Fixed(lm))?,
            lambda_max: lm,
        })
    }
}

/// `[T_0(L̂)x, …, T_K(L̂)x]` by the three-term recurrence.
pub fn chebyshev_apply(lhat: &Tensor, k: usize, x: &Tensor) -> Result<Vec<Tensor>> {
    let n = square_dim(lhat, "chebyshev_apply")?;
    if x.rank() != 2 || x.shape()[0] != n {
        return Err(shape_err("chebyshev_apply", lhat.shape(), x.shape()));
    }
    let mut out = vec![x.clone()];
    if k >= 1 {
        out.push(matmul(lhat, x)?);
    }
    for i in 2..=k {
        let lx = matmul(lhat, &out[i - 1])?;
        let prev = &out[i - 2];
        let data = lx
            .data()
            .iter()
            .zip(prev.data())
            .map(|(a, b)| 2.0 * a - b)
            .collect();
        out.push(Tensor::new(x.shape(), data)?);
    }
    Ok(out)
}

/// Chebyshev polynomial `T_k` evaluated at a scalar.
pub fn chebyshev_scalar(k: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if k == 0 {
        return a;
    }
    for _ in 1..k {
        let c = 2.0 * x * b - a;
        a = b;
        b = c;
    }
    b
}

/// Dense eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvectors: Tensor,
    pub eigenvalues: Vec<f64>,
}

fn check_symmetric(m: &Tensor, op: &'static str) -> Result<usize> {
    let n = square_dim(m, op)?;
    let d = m.data();
    let scale = d.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (d[i * n + j] - d[j * n + i]).abs() > 1e-12 * scale {
                return Err(invalid(format!("{op}: matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

impl SpectralDecomposition {
    pub fn of(m: &Tensor) -> Result<Self> {
        let n = check_symmetric(m, "eigendecomposition")?;
        let mat = nalgebra::DMatrix::from_row_slice(n, n, m.data());
        let eig = nalgebra::SymmetricEigen::new(mat);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut u = Tensor::zeros(&[n, n]);
        for (col, &src) in order.iter().enumerate() {
            for row in 0..n {
                u.set(&[row, col], eig.eigenvectors[(row, src)]);
            }
        }
        Ok(Self {
            eigenvectors: u,
            eigenvalues,
        })
    }

    /// `U diag(g) Uᵀ x`.
    pub fn filter(&self, g_theta: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.eigenvalues.len();
        let u = self.eigenvectors.data();
        let xhat: Vec<f64> = (0..n)
            .map(|k| (0..n).map(|i| u[i * n + k] * x[i]).sum::<f64>() * g_theta[k])
            .collect();
        (0..n)
            .map(|i| (0..n).map(|k| u[i * n + k] * xhat[k]).sum())
            .collect()
    }
}

/// Spectral graph convolution `U g_θ Uᵀ x` by full eigendecomposition of `l`.
/// Oracle only; cubic cost.
pub fn spectral_conv_oracle(l: &Tensor, g_theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = check_symmetric(l, "spectral_conv_oracle")?;
    if g_theta.len() != n || x.len() != n {
        return Err(shape_err("spectral_conv_oracle", &[n], &[g_theta.len(), x.len()]));
    }
    Ok(SpectralDecomposition::of(l)?.filter(g_theta, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn two_node_unit() -> RoadGraph {
        build_graph(&[], &[Edge::new("a", "b", 1.0)], AdjacencyMode::Binary).unwrap()
    }

    pub(crate) fn random_graph(n: usize, p: f64, seed: u64) -> RoadGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..n).map(|i| format!("s{i:02}")).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    edges.push(Edge::new(names[i].clone(), names[j].clone(), rng.gen_range(0.2..3.0)));
                }
            }
        }
        build_graph(&names, &edges, AdjacencyMode::Gaussian).unwrap()
    }

    #[test]
    fn single_edge_uses_sigma_fallback() {
        let g = build_graph(&[], &[Edge::new("a", "b", 1.0)], AdjacencyMode::Gaussian).unwrap();
        let w = (-1.0f64).exp();
        assert!((g.adjacency().at(&[0, 1]) - w).abs() < 1e-15);
        assert_eq!(g.adjacency().at(&[0, 1]), g.adjacency().at(&[1, 0]));
        assert_eq!(g.adjacency().at(&[0, 0]), 0.0);
    }

    #[test]
    fn edgeless_declared_segment() {
        let g = build_graph(&ids(&["only"]), &[], AdjacencyMode::Gaussian).unwrap();
        assert_eq!(g.adjacency(), &Tensor::zeros(&[1, 1]));
    }

    #[test]
    fn reversed_duplicate_is_deduplicated() {
        let one = build_graph(&[], &[Edge::new("a", "b", 2.0)], AdjacencyMode::Gaussian).unwrap();
        let two = build_graph(
            &[],
            &[Edge::new("a", "b", 2.0), Edge::new("b", "a", 2.0)],
            AdjacencyMode::Gaussian,
        )
        .unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn conflicting_duplicate_reports_both() {
        let err = build_graph(
            &[],
            &[Edge::new("a", "b", 2.0), Edge::new("b", "a", 3.0)],
            AdjacencyMode::Gaussian,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn bad_edges_rejected() {
        for e in [Edge::new("a", "a", 1.0), Edge::new("a", "b", 0.0), Edge::new("", "b", 1.0)] {
            assert!(build_graph(&[], &[e], AdjacencyMode::Gaussian).is_err());
        }
        let g = two_node_unit();
        assert!(matches!(g.index_of("zz"), Err(Error::UnknownSegment(id)) if id == "zz"));
    }

    #[test]
    fn renormalized_two_node_hand_case() {
        let g = two_node_unit();
        assert_eq!(normalized_adjacency(&g), Tensor::full(&[2, 2], 0.5));
        let iso = build_graph(&ids(&["x"]), &[], AdjacencyMode::Gaussian).unwrap();
        assert_eq!(normalized_adjacency(&iso).data(), &[1.0]);
    }

    #[test]
    fn scaled_laplacian_hand_cases() {
        let g = two_node_unit();
        assert_eq!(laplacian(&g).data(), &[1.0, -1.0, -1.0, 1.0]);
        assert!((largest_eigenvalue(&laplacian(&g)).unwrap() - 2.0).abs() < 1e-9);
        let lhat = scaled_laplacian(&g, LambdaMax::Auto).unwrap();
        for (a, b) in lhat.data().iter().zip([0.0, -1.0, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(
            scaled_laplacian(&g, LambdaMax::Fixed(2.0)).unwrap().data(),
            &[0.0, -1.0, -1.0, 0.0]
        );

        let empty = build_graph(&ids(&["a", "b", "c"]), &[], AdjacencyMode::Gaussian).unwrap();
        let lhat = scaled_laplacian(&empty, LambdaMax::Fixed(2.0)).unwrap();
        assert_eq!(lhat, Tensor::identity(3).map(|x| -x));
        assert!(scaled_laplacian(&g, LambdaMax::Fixed(0.0)).is_err());
    }

    #[test]
    fn scaled_laplacian_spectrum_in_unit_interval() {
        let g = random_graph(8, 0.5, 3);
        let lhat = scaled_laplacian(&g, LambdaMax::Auto).unwrap();
        let eig = SpectralDecomposition::of(&lhat).unwrap();
        for l in eig.eigenvalues {
            assert!((-1.0 - 1e-7..=1.0 + 1e-7).contains(&l), "{l}");
        }
    }

    #[test]
    fn power_iteration_matches_dense() {
        for seed in 0..10 {
            let g = random_graph(12, 0.3, seed);
            let l = laplacian(&g);
            let dense = *SpectralDecomposition::of(&l).unwrap().eigenvalues.last().unwrap();
            let pi = largest_eigenvalue(&l).unwrap();
            assert!((dense - pi).abs() < 1e-6 * dense.max(1.0), "{dense} vs {pi}");
        }
    }

    #[test]
    fn chebyshev_small_orders() {
        let g = random_graph(6, 0.5, 5);
        let lhat = scaled_laplacian(&g, LambdaMax::Auto).unwrap();
        let x = Tensor::new(&[6, 2], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let t0 = chebyshev_apply(&lhat, 0, &x).unwrap();
        assert_eq!(t0, vec![x.clone()]);
        let t1 = chebyshev_apply(&lhat, 1, &x).unwrap();
        assert_eq!(t1[1], matmul(&lhat, &x).unwrap());
        assert!(chebyshev_apply(&lhat, 2, &Tensor::zeros(&[5, 2])).is_err());
    }

    #[test]
    fn chebyshev_t2_matches_eigen_oracle() {
        let g = random_graph(6, 0.6, 9);
        let lhat = scaled_laplacian(&g, LambdaMax::Auto).unwrap();
        let x: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let xt = Tensor::new(&[6, 1], x.clone()).unwrap();
        let t2 = &chebyshev_apply(&lhat, 2, &xt).unwrap()[2];
        let eig = SpectralDecomposition::of(&lhat).unwrap();
        let gt: Vec<f64> = eig.eigenvalues.iter().map(|l| 2.0 * l * l - 1.0).collect();
        let want = eig.filter(&gt, &x);
        for (a, b) in t2.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_identity_and_laplacian_filters() {
        let g = random_graph(7, 0.5, 11);
        let l = laplacian(&g);
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin()).collect();
        let same = spectral_conv_oracle(&l, &[1.0; 7], &x).unwrap();
        for (a, b) in same.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
        let eig = SpectralDecomposition::of(&l).unwrap();
        let lx = spectral_conv_oracle(&l, &eig.eigenvalues, &x).unwrap();
        let direct = matmul(&l, &Tensor::new(&[7, 1], x.clone()).unwrap()).unwrap();
        for (a, b) in lx.iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut asym = l.clone();
        asym.set(&[0, 1], 5.0);
        assert!(spectral_conv_oracle(&asym, &[1.0; 7], &x).is_err());
    }

    #[test]
    fn decomposition_is_orthonormal_and_reconstructs() {
        let g = random_graph(9, 0.4, 13);
        let l = laplacian(&g);
        let eig = SpectralDecomposition::of(&l).unwrap();
        let u = &eig.eigenvectors;
        let utu = matmul(&u.transpose2().unwrap(), u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::identity(9)) < 1e-8);
        let mut d = Tensor::zeros(&[9, 9]);
        for i in 0..9 {
            d.set(&[i, i], eig.eigenvalues[i]);
        }
        let rec = matmul(&matmul(u, &d).unwrap(), &u.transpose2().unwrap()).unwrap();
        assert!(rec.max_abs_diff(&l) < 1e-8);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn shortest_paths_on_chain() {
        let g = build_graph(
            &[],
            &[Edge::new("a", "b", 1.0), Edge::new("b", "c", 2.5)],
            AdjacencyMode::Gaussian,
        )
        .unwrap();
        assert_eq!(g.shortest_paths_from(0), vec![0.0, 1.0, 3.5]);
        let lone = build_graph(&ids(&["z"]), &[Edge::new("a", "b", 1.0)], AdjacencyMode::Gaussian).unwrap();
        assert!(lone.shortest_paths_from(2)[0].is_infinite());
    }
}

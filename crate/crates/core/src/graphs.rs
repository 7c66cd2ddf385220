//! Message-passing graphs over the grid positions.
//!
//! Three constructions: periodic radius-cutoff kNN graphs, Margulis-style
//! and Gabber-Galil-style expanders applied plane by plane on `Z_g³`. All of
//! them are stored as a sorted list of undirected edges `(u, v)` with `u < v`.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::energy::EnergySource;
use crate::error::{Error, Result};
use crate::model::{grid_coords, grid_index, min_image_distance, PositionSet};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    RadiusCutoff,
    Margulis3d,
    GabberGalil3d,
    Complete,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub kind: GraphKind,
    pub params: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Per-edge `(k+1)²` blocks `α(u,t1,v,t2)`, row-major over `(t1, t2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub width: usize,
    pub data: Vec<f64>,
}

impl EdgeFeatures {
    pub fn edge(&self, e: usize) -> &[f64] {
        &self.data[e * self.width..(e + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Option<EdgeFeatures>,
    pub meta: GraphMeta,
}

impl CompGraph {
    /// Canonicalizes arbitrary directed pairs: drops self-loops, merges
    /// duplicates and orientation, sorts.
    pub fn from_pairs<I>(n_nodes: usize, pairs: I, meta: GraphMeta) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut edges = Vec::new();
        for (u, v) in pairs {
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::DegenerateGraph(format!("edge ({u}, {v}) outside {n_nodes} nodes")));
            }
            if u != v {
                edges.push((u.min(v), u.max(v)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(CompGraph { n_nodes, edges, features: None, meta })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// `u v` per line.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for &(u, v) in &self.edges {
            writeln!(w, "{u} {v}")?;
        }
        Ok(())
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges(),
            "kind": self.meta.kind,
            "params": self.meta.params,
            "warnings": self.meta.warnings,
            "feature_width": self.features.as_ref().map(|f| f.width),
        })
    }
}

fn meta(kind: GraphKind, params: &[(&str, f64)]) -> GraphMeta {
    GraphMeta {
        kind,
        params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        warnings: Vec::new(),
    }
}

type PlaneRule = fn(i64, i64) -> [(i64, i64); 8];

/// Plane-by-plane extension of a 2D neighbor rule to `Z_g³`. The rule maps
/// `(a, b)` to eight neighbors; it is applied to the (x,y), (y,z) and (x,z)
/// planes with the remaining coordinate held fixed.
fn planar_expander(g: usize, rule: PlaneRule, kind: GraphKind) -> Result<CompGraph> {
    if g < 2 {
        return Err(Error::DegenerateGraph(format!("expander needs g >= 2, got {g}")));
    }
    let gi = g as i64;
    let wrap = |v: i64| v.rem_euclid(gi) as usize;
    let n = g * g * g;
    let lists: Vec<Vec<(usize, usize)>> = par::map_range(n, |p| {
        let c = grid_coords(g, p);
        let (x, y, z) = (c[0] as i64, c[1] as i64, c[2] as i64);
        let mut out = Vec::with_capacity(24);
        for (a, b) in rule(x, y) {
            out.push((p, grid_index(g, [wrap(a), wrap(b), z as usize])));
        }
        for (a, b) in rule(y, z) {
            out.push((p, grid_index(g, [x as usize, wrap(a), wrap(b)])));
        }
        for (a, b) in rule(x, z) {
            out.push((p, grid_index(g, [wrap(a), y as usize, wrap(b)])));
        }
        out
    });
    CompGraph::from_pairs(n, lists.into_iter().flatten(), meta(kind, &[("g", g as f64)]))
}

fn gabber_galil_rule(a: i64, b: i64) -> [(i64, i64); 8] {
    [
        (a, b + 2 * a),
        (a, b - 2 * a),
        (a, b + 2 * a + 1),
        (a, b - (2 * a + 1)),
        (a + 2 * b, b),
        (a - 2 * b, b),
        (a + 2 * b + 1, b),
        (a - (2 * b + 1), b),
    ]
}

fn margulis_rule(a: i64, b: i64) -> [(i64, i64); 8] {
    [(a + 1, b), (a - 1, b), (a, b + 1), (a, b - 1), (a + b, b), (a - b, b), (a, b + a), (a, b - a)]
}

/// Gabber-Galil formulas applied to each coordinate plane of `Z_g³`
/// (24 directed neighbors per vertex before cleanup).
pub fn gabber_galil_3d(g: usize) -> Result<CompGraph> {
    planar_expander(g, gabber_galil_rule, GraphKind::GabberGalil3d)
}

/// Margulis formulas applied to each coordinate plane of `Z_g³`.
pub fn margulis_3d(g: usize) -> Result<CompGraph> {
    planar_expander(g, margulis_rule, GraphKind::Margulis3d)
}

/// Every pair of nodes connected.
pub fn complete_graph(n: usize) -> Result<CompGraph> {
    if n < 2 {
        return Err(Error::DegenerateGraph(format!("complete graph needs 2 nodes, got {n}")));
    }
    let pairs = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)));
    CompGraph::from_pairs(n, pairs, meta(GraphKind::Complete, &[("n", n as f64)]))
}

/// Distances closer than this count as ties and fall back to node index.
const TIE_TOL: f64 = 1e-9;

/// Each node keeps its `k_nn` nearest periodic neighbors within `r_cut`,
/// ties broken by lower index; the result is the undirected union.
pub fn radius_cutoff_graph(positions: &PositionSet, r_cut: f64, k_nn: usize) -> Result<CompGraph> {
    if !(r_cut > 0.0) || k_nn == 0 {
        return Err(Error::InvalidParameters(format!("need r_cut > 0 and k_nn >= 1, got {r_cut}, {k_nn}")));
    }
    let n = positions.len();
    let cell = &positions.cell;
    let chosen: Vec<Result<Vec<usize>>> = par::map_range(n, |u| {
        let mut cand = Vec::new();
        for v in 0..n {
            if v == u {
                continue;
            }
            let d = min_image_distance(&positions.fractional[u], &positions.fractional[v], cell)?;
            if d <= r_cut {
                cand.push((d, v));
            }
        }
        cand.sort_by(|a, b| {
            if (a.0 - b.0).abs() <= TIE_TOL {
                a.1.cmp(&b.1)
            } else {
                a.0.total_cmp(&b.0)
            }
        });
        Ok(cand.into_iter().take(k_nn).map(|(_, v)| v).collect())
    });
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (u, c) in chosen.into_iter().enumerate() {
        let c = c?;
        if c.is_empty() {
            warnings.push(format!("node {u} has no neighbor within {r_cut} A"));
        }
        pairs.extend(c.into_iter().map(|v| (u, v)));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut m = meta(GraphKind::RadiusCutoff, &[("r_cut", r_cut), ("k_nn", k_nn as f64)]);
    m.warnings = warnings;
    CompGraph::from_pairs(n, pairs, m)
}

/// Fills each edge `(u, v)` with the block `α(u,t1,v,t2)`.
pub fn attach_edge_features<S: EnergySource + ?Sized>(mut graph: CompGraph, src: &S) -> Result<CompGraph> {
    if src.n_positions() != graph.n_nodes {
        return Err(Error::DimensionMismatch { expected: graph.n_nodes, got: src.n_positions() });
    }
    let w = src.n_species() + 1;
    let width = w * w;
    let mut data = vec![0.0; graph.edges.len() * width];
    let edges = &graph.edges;
    par::for_each_chunk_mut(&mut data, width, |e, block| {
        let (u, v) = edges[e];
        for t1 in 0..w {
            for t2 in 0..w {
                block[t1 * w + t2] = src.alpha(u, t1, v, t2);
            }
        }
    });
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite edge feature".into()));
    }
    graph.features = Some(EdgeFeatures { width, data });
    Ok(graph)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub degree_min: usize,
    pub degree_mean: f64,
    pub degree_max: usize,
    pub components: usize,
    /// Largest BFS eccentricity seen over the sampled sources, within components.
    pub diameter: usize,
    /// `1 − λ₂` of `D^{-1/2} A D^{-1/2}`, when computed.
    pub spectral_gap: Option<f64>,
}

/// BFS from every node up to this size, from an evenly spaced sample above.
const FULL_BFS_LIMIT: usize = 1024;
const BFS_SAMPLES: usize = 64;
const SPECTRAL_LIMIT: usize = 4096;

pub fn graph_stats(graph: &CompGraph, spectral: bool) -> GraphStats {
    let n = graph.n_nodes;
    let deg = graph.degrees();
    let adj = graph.adjacency();
    let components = {
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        q.push_back(v);
                    }
                }
            }
        }
        count
    };
    let sources: Vec<usize> = if n <= FULL_BFS_LIMIT {
        (0..n).collect()
    } else {
        (0..BFS_SAMPLES).map(|i| i * n / BFS_SAMPLES).collect()
    };
    let ecc = par::map_slice(&sources, |&s| {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut q = VecDeque::from([s]);
        let mut far = 0;
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    far = far.max(dist[v]);
                    q.push_back(v);
                }
            }
        }
        far
    });
    let spectral_gap = if spectral && n <= SPECTRAL_LIMIT && deg.iter().all(|&d| d > 0) && n > 1 {
        Some(spectral_gap(&adj, &deg))
    } else {
        None
    };
    GraphStats {
        n_nodes: n,
        n_edges: graph.n_edges(),
        degree_min: deg.iter().copied().min().unwrap_or(0),
        degree_mean: if n == 0 { 0.0 } else { 2.0 * graph.n_edges() as f64 / n as f64 },
        degree_max: deg.iter().copied().max().unwrap_or(0),
        components,
        diameter: ecc.into_iter().max().unwrap_or(0),
        spectral_gap,
    }
}

/// Power iteration on `(I + M)/2` with the top eigenvector `√d` projected out.
fn spectral_gap(adj: &[Vec<usize>], deg: &[usize]) -> f64 {
    let n = adj.len();
    let sq: Vec<f64> = deg.iter().map(|&d| (d as f64).sqrt()).collect();
    let top_norm = sq.iter().map(|x| x * x).sum::<f64>().sqrt();
    let top: Vec<f64> = sq.iter().map(|x| x / top_norm).collect();
    let project = |v: &mut Vec<f64>| {
        let c: f64 = v.iter().zip(&top).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&top).for_each(|(a, b)| *a -= c * b);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 0.0 {
            v.iter_mut().for_each(|a| *a /= nv);
        }
    };
    // deterministic start with no special structure
    let mut v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.5).collect();
    project(&mut v);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let mut w = vec![0.0; n];
        for u in 0..n {
            let mut acc = 0.0;
            for &x in &adj[u] {
                acc += v[x] / (sq[u] * sq[x]);
            }
            w[u] = 0.5 * (v[u] + acc);
        }
        let rayleigh: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        project(&mut w);
        v = w;
        if (rayleigh - lambda).abs() < 1e-12 {
            lambda = rayleigh;
            break;
        }
        lambda = rayleigh;
    }
    let lambda2 = 2.0 * lambda - 1.0;
    1.0 - lambda2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{synth_q, QTable, SynthDistribution};
    use crate::model::{build_grid, GridSpec, UnitCell};
    use std::collections::BTreeSet;

    fn neighbors(g: &CompGraph, u: usize) -> BTreeSet<usize> {
        g.adjacency()[u].iter().copied().collect()
    }

    fn canonical(g: &CompGraph) -> bool {
        g.edges.windows(2).all(|w| w[0] < w[1]) && g.edges.iter().all(|&(u, v)| u < v && v < g.n_nodes)
    }

    #[test]
    fn expander_sizes_and_cleanup() {
        let gg = gabber_galil_3d(7).unwrap();
        assert_eq!(gg.n_nodes, 343);
        assert!(canonical(&gg));
        assert!(gg.degrees().iter().all(|&d| d <= 48));
        let m = margulis_3d(8).unwrap();
        assert_eq!(m.n_nodes, 512);
        assert!(canonical(&m));
        assert!(matches!(gabber_galil_3d(1), Err(Error::DegenerateGraph(_))));
        assert!(matches!(margulis_3d(0), Err(Error::DegenerateGraph(_))));
    }

    #[test]
    fn g2_origin_neighbors() {
        let expect: BTreeSet<usize> =
            [grid_index(2, [1, 0, 0]), grid_index(2, [0, 1, 0]), grid_index(2, [0, 0, 1])].into();
        // out-neighbors of the origin by hand; the undirected union may add in-edges
        let gg = gabber_galil_3d(2).unwrap();
        let m = margulis_3d(2).unwrap();
        for graph in [&gg, &m] {
            let rule = if graph.meta.kind == GraphKind::GabberGalil3d { gabber_galil_rule } else { margulis_rule };
            let mut out = BTreeSet::new();
            for (a, b) in rule(0, 0) {
                for c in [[a, b, 0], [0, a, b], [a, 0, b]] {
                    let p = grid_index(2, c.map(|v| v.rem_euclid(2) as usize));
                    if p != 0 {
                        out.insert(p);
                    }
                }
            }
            assert_eq!(out, expect);
            assert!(expect.is_subset(&neighbors(graph, 0)));
        }
    }

    #[test]
    fn expanders_are_deterministic() {
        assert_eq!(gabber_galil_3d(5).unwrap(), gabber_galil_3d(5).unwrap());
    }

    #[test]
    fn cutoff_knn1_axis_neighbor() {
        let pos = build_grid(&GridSpec::new(2, UnitCell::cubic(4.0).unwrap())).unwrap();
        let g = radius_cutoff_graph(&pos, 2.5, 1).unwrap();
        // origin picks the lowest-index axis neighbor, (0,0,1) = node 1
        assert!(neighbors(&g, 0).contains(&1));
        for u in 0..8 {
            assert!(!neighbors(&g, u).is_empty());
        }
    }

    #[test]
    fn cutoff_too_small_is_empty_with_warnings() {
        let pos = build_grid(&GridSpec::new(3, UnitCell::cubic(6.0).unwrap())).unwrap();
        let g = radius_cutoff_graph(&pos, 1.0, 4).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.meta.warnings.len(), 27);
    }

    #[test]
    fn cutoff_wraps_boundary() {
        let pos = build_grid(&GridSpec::new(4, UnitCell::cubic(8.0).unwrap())).unwrap();
        let g = radius_cutoff_graph(&pos, 2.1, 6).unwrap();
        let corner = grid_index(4, [3, 3, 3]);
        assert!(neighbors(&g, corner).contains(&grid_index(4, [0, 3, 3])));
        assert!(g.degrees().iter().all(|&d| d == 6));
    }

    #[test]
    fn stats_small_cases() {
        let k4 = complete_graph(4).unwrap();
        let s = graph_stats(&k4, true);
        assert_eq!((s.diameter, s.components), (1, 1));
        // K4: normalized adjacency eigenvalues 1 and -1/3
        assert!((s.spectral_gap.unwrap() - 4.0 / 3.0).abs() < 1e-8);
        let two = CompGraph::from_pairs(4, [(0, 1), (2, 3)], meta(GraphKind::Custom, &[])).unwrap();
        assert_eq!(graph_stats(&two, false).components, 2);
    }

    #[test]
    fn cycle_spectral_gap() {
        // C_n: λ₂ = cos(2π/n)
        let n = 10;
        let c = CompGraph::from_pairs(n, (0..n).map(|i| (i, (i + 1) % n)), meta(GraphKind::Custom, &[])).unwrap();
        let s = graph_stats(&c, true);
        let expect = 1.0 - (2.0 * std::f64::consts::PI / n as f64).cos();
        assert!((s.spectral_gap.unwrap() - expect).abs() < 1e-6);
        assert_eq!(s.diameter, 5);
    }

    #[test]
    fn features_match_table() {
        let q = synth_q(8, 3, 3, SynthDistribution::Uniform { low: -1.0, high: 1.0 }).unwrap();
        let g = attach_edge_features(gabber_galil_3d(2).unwrap(), &q).unwrap();
        let f = g.features.as_ref().unwrap();
        assert_eq!(f.width, 16);
        for (e, &(u, v)) in g.edges.iter().enumerate() {
            let block = f.edge(e);
            for t1 in 0..4 {
                for t2 in 0..4 {
                    // reading (v,u) transposed gives the same block
                    assert_eq!(block[t1 * 4 + t2], q.get(q.index(v, t2), q.index(u, t1)));
                }
            }
        }
        let z = attach_edge_features(gabber_galil_3d(2).unwrap(), &QTable::zeros(8, 3)).unwrap();
        assert!(z.features.unwrap().data.iter().all(|&x| x == 0.0));
        assert!(matches!(
            attach_edge_features(gabber_galil_3d(3).unwrap(), &q),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}

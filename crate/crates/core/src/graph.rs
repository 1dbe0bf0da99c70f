//! Interaction topology between tactile sensing points.
//!
//! Edges are ordered pairs `(j, i)`: node `j` influences node `i`, so the
//! neighborhood of `i` is its in-neighbor set.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default 24-sensor hand layout: 3×3 palm grid then three phalanx sensors
/// per finger, thumb first.
pub const DEFAULT_HAND_LAYOUT: &str = include_str!("../data/hand_layout_24.csv");

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Full,
    Knn(usize),
    Radius(f64),
}

impl Strategy {
    pub fn describe(&self) -> String {
        match self {
            Strategy::Full => "full".into(),
            Strategy::Knn(k) => format!("knn{k}"),
            Strategy::Radius(r) => format!("radius{r}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `full`, `knn:<k>` or `radius:<r>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s.split_once(':').unwrap_or((s, ""));
        let bad = || Error::InvalidInput(format!("bad graph strategy `{s}`"));
        match kind.trim() {
            "full" => Ok(Strategy::Full),
            "knn" => Ok(Strategy::Knn(param.trim().parse().map_err(|_| bad())?)),
            "radius" => Ok(Strategy::Radius(param.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TactileGraph {
    coords: Vec<[f64; 2]>,
    edges: Vec<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: usize,
    pub members: Vec<usize>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl TactileGraph {
    /// Build from an explicit edge list; self-loops and out-of-range
    /// endpoints are rejected, duplicates collapse.
    pub fn from_edges(coords: Vec<[f64; 2]>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = coords.len();
        let mut sorted: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(j, i) in edges {
            if j >= n || i >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({j}, {i}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop on node {i}")));
            }
            sorted.push((j, i));
        }
        sorted.sort_by_key(|&(j, i)| (i, j));
        sorted.dedup();
        let mut in_neighbors = vec![Vec::new(); n];
        for &(j, i) in &sorted {
            in_neighbors[i].push(j);
        }
        Ok(Self {
            coords,
            edges: sorted,
            in_neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Edges sorted by target then source.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// In-neighbors of `i`, ascending. Panics on out-of-range `i`; use
    /// [`neighborhood`] for a checked lookup.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        dist(self.coords[a], self.coords[b])
    }

    /// Same topology under the relabeling `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut coords = vec![[0.0; 2]; n];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = self.coords[old];
        }
        let edges: Vec<_> = self.edges.iter().map(|&(j, i)| (perm[j], perm[i])).collect();
        Self::from_edges(coords, &edges)
    }

    /// Stable identifier: node count, strategy and an FNV hash of the edges.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &(j, i) in &self.edges {
            for b in (j as u64).to_le_bytes().iter().chain((i as u64).to_le_bytes().iter()) {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("n{}-e{}-{h:016x}", self.node_count(), self.edges.len())
    }
}

pub fn build_graph(coords: &[[f64; 2]], strategy: Strategy) -> Result<TactileGraph> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("graph needs at least 2 nodes, got {n}")));
    }
    if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::NonFinite("layout coordinates".into()));
    }
    let mut edges = Vec::new();
    match strategy {
        Strategy::Full => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        edges.push((j, i));
                    }
                }
            }
        }
        Strategy::Knn(k) => {
            if k == 0 || k > n - 1 {
                return Err(Error::InvalidInput(format!("knn k={k} must lie in [1, {}]", n - 1)));
            }
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                // stable sort keeps lower indices first among equal distances
                others.sort_by(|&a, &b| {
                    dist(coords[a], coords[i]).total_cmp(&dist(coords[b], coords[i]))
                });
                edges.extend(others.into_iter().take(k).map(|j| (j, i)));
            }
        }
        Strategy::Radius(r) => {
            if !(r > 0.0) {
                return Err(Error::InvalidInput(format!("radius must be positive, got {r}")));
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j && dist(coords[i], coords[j]) <= r {
                        edges.push((j, i));
                    }
                }
            }
        }
    }
    TactileGraph::from_edges(coords.to_vec(), &edges)
}

pub fn neighborhood(g: &TactileGraph, i: usize) -> Result<Neighborhood> {
    if i >= g.node_count() {
        return Err(Error::InvalidInput(format!(
            "node {i} out of range for {} nodes",
            g.node_count()
        )));
    }
    Ok(Neighborhood {
        center: i,
        members: g.in_neighbors(i).to_vec(),
    })
}

/// Parse a layout table: a header line `id,x,y` then one record per node.
/// Records may come in any order but ids must be exactly `0..N`.
pub fn parse_layout(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format {
            kind: "layout",
            reason: format!("line {}: `{line}`", lineno + 1),
        };
        if fields.len() != 3 {
            return Err(bad());
        }
        let id = fields[0].parse().map_err(|_| bad())?;
        let x = fields[1].parse().map_err(|_| bad())?;
        let y = fields[2].parse().map_err(|_| bad())?;
        rows.push((id, [x, y]));
    }
    rows.sort_by_key(|r| r.0);
    for (expect, (id, _)) in rows.iter().enumerate() {
        if *id != expect {
            return Err(Error::Format {
                kind: "layout",
                reason: format!("node ids must be 0..N without gaps; found {id} at position {expect}"),
            });
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn format_layout(coords: &[[f64; 2]]) -> String {
    let mut s = String::from("id,x,y\n");
    for (i, c) in coords.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{}", c[0], c[1]);
    }
    s
}

pub fn load_layout(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_layout(&text)
}

pub fn default_layout() -> Vec<[f64; 2]> {
    parse_layout(DEFAULT_HAND_LAYOUT).expect("shipped layout parses")
}

/// The default glove topology: k-nearest neighbors with k = 4.
pub fn default_graph() -> TactileGraph {
    build_graph(&default_layout(), Strategy::Knn(4)).expect("default graph builds")
}

/// A layout for `n` nodes: the hand layout when `n == 24`, otherwise points
/// on a 10-unit grid, row-major, as close to square as possible.
pub fn layout_for(n: usize) -> Vec<[f64; 2]> {
    if n == 24 {
        return default_layout();
    }
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| [(i % side) as f64 * 10.0, (i / side) as f64 * 10.0])
        .collect()
}

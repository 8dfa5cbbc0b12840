//! Perturbation-free augmentation: random-walk and degree structural encodings,
//! and the feature/structure view pair built from them.
//!
//! The random-walk block holds, for node `i`, the return probabilities
//! `[T_ii, (T^2)_ii, ..., (T^k)_ii]` of the walk with transition matrix
//! `T = A D^-1`. The degree block is a one-hot of the node degree with the
//! last bucket absorbing every degree at or above its index.
//!
//! Isolated nodes have no outgoing transition: their column of `T` is zero,
//! so all their return probabilities are zero, and their degree row is all zero.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graphdata::{Graph, GraphDataset};
use crate::matrix::Matrix;
use crate::sparse::SparseAdjacency;

pub const DEFAULT_RW_STEPS: usize = 16;
pub const DEFAULT_DEGREE_BUCKETS: usize = 32;

/// Node-level structural encoding `S = [S_rw || S_dg]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEncoding {
    pub matrix: Matrix,
    pub rw_steps: usize,
    pub degree_buckets: usize,
}

impl StructuralEncoding {
    pub fn width(&self) -> usize {
        self.rw_steps + self.degree_buckets
    }
}

/// Diagonals of `T^1..T^d_rw` for every node.
///
/// Each node's row of `T^k` is propagated as a dense vector through the sparse
/// transition, so the cost is `O(n * m * d_rw)` with `O(n)` working memory.
pub fn random_walk_encoding(g: &Graph, d_rw: usize) -> Result<Matrix> {
    if d_rw < 1 {
        return Err(Error::argument("random-walk encoding needs at least one step"));
    }
    let n = g.node_count();
    let adj = g.adjacency();
    let inv_deg: Vec<f64> = (0..n)
        .map(|j| match adj.degree(j) {
            0 => 0.0,
            d => 1.0 / d as f64,
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut cur = vec![0.0; n];
            let mut next = vec![0.0; n];
            cur[i] = 1.0;
            let mut diag = Vec::with_capacity(d_rw);
            for _ in 0..d_rw {
                step_row(&adj, &inv_deg, &cur, &mut next);
                diag.push(next[i]);
                std::mem::swap(&mut cur, &mut next);
            }
            diag
        })
        .collect();
    if n == 0 {
        return Ok(Matrix::zeros(0, d_rw));
    }
    Matrix::from_rows(&rows)
}

/// `next = cur * T` where `T[l][j] = A[l][j] / deg(j)`.
fn step_row(adj: &SparseAdjacency, inv_deg: &[f64], cur: &[f64], next: &mut [f64]) {
    for (j, out) in next.iter_mut().enumerate() {
        let s: f64 = adj.neighbors(j).iter().map(|&l| cur[l]).sum();
        *out = s * inv_deg[j];
    }
}

/// One-hot degree buckets; bucket `k` (1-based) marks degree `k`, the last bucket marks `deg >= d_dg`.
pub fn degree_encoding(g: &Graph, d_dg: usize) -> Result<Matrix> {
    if d_dg < 1 {
        return Err(Error::argument("degree encoding needs at least one bucket"));
    }
    let mut m = Matrix::zeros(g.node_count(), d_dg);
    for (i, deg) in g.degrees().into_iter().enumerate() {
        if deg > 0 {
            m.set(i, deg.min(d_dg) - 1, 1.0);
        }
    }
    Ok(m)
}

pub fn structural_encoding(g: &Graph, d_rw: usize, d_dg: usize) -> Result<StructuralEncoding> {
    let rw = random_walk_encoding(g, d_rw)?;
    let dg = degree_encoding(g, d_dg)?;
    Ok(StructuralEncoding {
        matrix: Matrix::hcat(&[&rw, &dg])?,
        rw_steps: d_rw,
        degree_buckets: d_dg,
    })
}

/// A graph viewed through one node-feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub graph: &'a Graph,
    pub node_features: &'a Matrix,
}

/// Feature view `(A, X)` and structure view `(A, S)` over one shared graph.
#[derive(Debug, Clone)]
pub struct ViewPair<'a> {
    graph: &'a Graph,
    encoding: StructuralEncoding,
}

impl<'a> ViewPair<'a> {
    pub fn feature_view(&self) -> View<'_> {
        View {
            graph: self.graph,
            node_features: self.graph.features(),
        }
    }

    pub fn structure_view(&self) -> View<'_> {
        View {
            graph: self.graph,
            node_features: &self.encoding.matrix,
        }
    }

    pub fn encoding(&self) -> &StructuralEncoding {
        &self.encoding
    }

    pub fn into_encoding(self) -> StructuralEncoding {
        self.encoding
    }
}

pub fn build_views(g: &Graph, d_rw: usize, d_dg: usize) -> Result<ViewPair<'_>> {
    Ok(ViewPair {
        graph: g,
        encoding: structural_encoding(g, d_rw, d_dg)?,
    })
}

/// Structural encodings of every graph, in dataset order.
pub fn encode_dataset(ds: &GraphDataset, d_rw: usize, d_dg: usize) -> Result<Vec<Matrix>> {
    ds.graphs()
        .par_iter()
        .map(|g| structural_encoding(g, d_rw, d_dg).map(|e| e.matrix))
        .collect()
}

// ---------------------------------------------------------------------------
// Cache file
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &str = "goodd-structenc v1";

/// Writes encodings as text: a header line recording the widths, then one
/// `graph <index> <rows>` line per graph followed by its rows.
pub fn write_cache(path: &Path, encodings: &[Matrix], d_rw: usize, d_dg: usize) -> Result<()> {
    let mut out = format!("{CACHE_MAGIC} d_rw={d_rw} d_dg={d_dg} graphs={}\n", encodings.len());
    for (g, m) in encodings.iter().enumerate() {
        let _ = writeln!(out, "graph {g} {}", m.rows());
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a cache; `Ok(None)` when the header does not match the requested widths or graph count.
pub fn read_cache(path: &Path, d_rw: usize, d_dg: usize, graphs: usize) -> Result<Option<Vec<Matrix>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let expected = format!("{CACHE_MAGIC} d_rw={d_rw} d_dg={d_dg} graphs={graphs}");
    match lines.next() {
        Some((_, header)) if header == expected => {}
        _ => return Ok(None),
    }
    let width = d_rw + d_dg;
    let mut out = Vec::with_capacity(graphs);
    for g in 0..graphs {
        let (ln, head) = lines
            .next()
            .ok_or_else(|| Error::parse(path, None, "truncated cache"))?;
        let rows: usize = head
            .strip_prefix(&format!("graph {g} "))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::parse(path, Some(ln + 1), "malformed graph header"))?;
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| Error::parse(path, None, "truncated cache"))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::parse(path, Some(ln + 1), format!("bad value {tok:?}")))?,
                );
            }
            if data.len() - before != width {
                return Err(Error::parse(path, Some(ln + 1), "wrong row width"));
            }
        }
        out.push(Matrix::from_vec(rows, width, data)?);
    }
    Ok(Some(out))
}

/// Loads encodings from `path` when its header matches, otherwise computes and rewrites it.
pub fn load_or_compute(path: &Path, ds: &GraphDataset, d_rw: usize, d_dg: usize) -> Result<Vec<Matrix>> {
    if path.exists() {
        if let Some(enc) = read_cache(path, d_rw, d_dg, ds.len())? {
            if enc.iter().zip(ds.graphs()).all(|(m, g)| m.rows() == g.node_count()) {
                return Ok(enc);
            }
        }
    }
    let enc = encode_dataset(ds, d_rw, d_dg)?;
    write_cache(path, &enc, d_rw, d_dg)?;
    Ok(enc)
}

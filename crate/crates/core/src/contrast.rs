//! Node-, graph- and group-level contrastive losses, k-means prototypes and
//! concentration-based cluster temperatures.
//!
//! Every loss is an InfoNCE term over L2-normalized embeddings. By default the
//! positive pair is left out of the denominator; `include_positive` restores the
//! conventional form where it is counted once.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    Graph,
    Group,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Node, Level::Graph, Level::Group];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Node => "node",
            Level::Graph => "graph",
            Level::Group => "group",
        }
    }
}

/// Per-graph errors at each level, in dataset order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelErrors {
    pub node: Vec<f64>,
    pub graph: Vec<f64>,
    pub group: Vec<f64>,
}

impl LevelErrors {
    pub fn get(&self, level: Level) -> &[f64] {
        match level {
            Level::Node => &self.node,
            Level::Graph => &self.graph,
            Level::Group => &self.group,
        }
    }

    pub fn get_mut(&mut self, level: Level) -> &mut Vec<f64> {
        match level {
            Level::Node => &mut self.node,
            Level::Graph => &mut self.graph,
            Level::Group => &mut self.group,
        }
    }

    pub fn len(&self) -> usize {
        self.node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.is_empty()
    }

    pub fn extend(&mut self, other: &LevelErrors) {
        for l in Level::ALL {
            self.get_mut(l).extend_from_slice(other.get(l));
        }
    }

    /// Population mean and standard deviation of each level.
    pub fn stats(&self) -> ErrorStats {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for l in Level::ALL {
            let (m, s) = mean_std(self.get(l));
            mean[l.index()] = m;
            std[l.index()] = s;
        }
        ErrorStats { mean, std }
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Training-set error statistics, indexed node, graph, group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeState {
    pub centers: Matrix,
    /// Cluster of each training graph, in training order.
    pub assignments: Vec<usize>,
    pub temps: Vec<f64>,
    /// Epoch at which the prototypes were computed.
    pub epoch: usize,
}

/// Graph-level projections of a fixed sample of training graphs, used as
/// negatives when scoring graphs one at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    pub z_graph_f: Matrix,
    pub z_graph_s: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastOptions {
    pub temperature: f64,
    pub include_positive: bool,
}

pub struct LossOutput {
    /// Scalar mean of the per-graph errors.
    pub loss: Var,
    pub per_graph: Vec<f64>,
    /// Graphs that had no negatives and used the positive-only term.
    pub fallbacks: usize,
}

fn finish(tape: &mut Tape, terms: Var) -> LossOutput {
    let per_graph = tape.value(terms).data().to_vec();
    let loss = tape.mean(terms);
    LossOutput {
        loss,
        per_graph,
        fallbacks: 0,
    }
}

/// Row-wise cosine similarity between two row-aligned matrices, `n x 1`.
fn paired_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum_rows(p))
}

/// Symmetric InfoNCE over a similarity matrix whose diagonal holds the positives.
///
/// Returns the `n x 1` vector `ℓ_fs + ℓ_sf` per row.
fn symmetric_terms(tape: &mut Tape, f: Var, s: Var, opts: &ContrastOptions) -> Result<Var> {
    let n = tape.shape(f).0;
    let st = tape.transpose(s);
    let sim = tape.matmul(f, st)?;
    let logits = tape.scale(sim, 1.0 / opts.temperature);
    let pos_sim = paired_similarity(tape, f, s)?;
    let pos = tape.scale(pos_sim, 1.0 / opts.temperature);
    let mask = if opts.include_positive {
        None
    } else {
        Some(Arc::new(Mask::off_diagonal(n)))
    };
    let lse_fs = tape.logsumexp_rows(logits, mask.clone())?;
    let logits_t = tape.transpose(logits);
    let lse_sf = tape.logsumexp_rows(logits_t, mask)?;
    let fs = tape.sub(lse_fs, pos)?;
    let sf = tape.sub(lse_sf, pos)?;
    tape.add(fs, sf)
}

fn check_pair(tape: &Tape, f: Var, s: Var, op: &'static str) -> Result<()> {
    if tape.shape(f) != tape.shape(s) {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(f),
            rhs: tape.shape(s),
        });
    }
    Ok(())
}

/// Node-level loss. Negatives for a node are the other nodes of the same graph
/// in the opposite view; `offsets` has one entry per graph plus the total.
///
/// A graph's error is `1/(2n) Σ_v (ℓ_fs(v) + ℓ_sf(v))`; a single-node graph has no
/// negatives and contributes `-sim/τ` instead.
pub fn node_loss(tape: &mut Tape, z_f: Var, z_s: Var, offsets: &[usize], opts: &ContrastOptions) -> Result<LossOutput> {
    check_pair(tape, z_f, z_s, "node_loss")?;
    if offsets.len() < 2 || *offsets.last().expect("non-empty") != tape.shape(z_f).0 {
        return Err(Error::argument("node offsets do not cover the batch"));
    }
    let f_all = tape.l2_normalize_rows(z_f);
    let s_all = tape.l2_normalize_rows(z_s);
    let mut terms = Vec::with_capacity(offsets.len() - 1);
    let mut fallbacks = 0;
    for w in offsets.windows(2) {
        let (start, n) = (w[0], w[1] - w[0]);
        if n == 0 {
            return Err(Error::argument("graph with no nodes in batch"));
        }
        let f = tape.slice_rows(f_all, start, n)?;
        let s = tape.slice_rows(s_all, start, n)?;
        let term = if n == 1 && !opts.include_positive {
            fallbacks += 1;
            let sim = paired_similarity(tape, f, s)?;
            tape.scale(sim, -1.0 / opts.temperature)
        } else {
            let t = symmetric_terms(tape, f, s, opts)?;
            let total = tape.sum(t);
            tape.scale(total, 1.0 / (2.0 * n as f64))
        };
        terms.push(term);
    }
    let stacked = tape.concat_rows(&terms)?;
    let mut out = finish(tape, stacked);
    out.fallbacks = fallbacks;
    Ok(out)
}

/// Graph-level loss. Negatives are the other graphs of the batch in the
/// opposite view; a graph's error is `(ℓ_fs + ℓ_sf)/2`.
pub fn graph_loss(tape: &mut Tape, z_f: Var, z_s: Var, opts: &ContrastOptions) -> Result<LossOutput> {
    check_pair(tape, z_f, z_s, "graph_loss")?;
    let b = tape.shape(z_f).0;
    if b == 0 {
        return Err(Error::argument("empty batch"));
    }
    let f = tape.l2_normalize_rows(z_f);
    let s = tape.l2_normalize_rows(z_s);
    if b == 1 && !opts.include_positive {
        let sim = paired_similarity(tape, f, s)?;
        let term = tape.scale(sim, -1.0 / opts.temperature);
        let mut out = finish(tape, term);
        out.fallbacks = 1;
        return Ok(out);
    }
    let t = symmetric_terms(tape, f, s, opts)?;
    let half = tape.scale(t, 0.5);
    Ok(finish(tape, half))
}

/// Group-level loss against fixed prototypes.
///
/// Similarity to prototype `j` is scaled by `1/τ_j`; the positive is the
/// assigned prototype and the negatives are all other prototypes.
pub fn group_loss(
    tape: &mut Tape,
    z: Var,
    prototypes: &Matrix,
    temps: &[f64],
    assignments: &[usize],
    include_positive: bool,
) -> Result<LossOutput> {
    let (b, d) = tape.shape(z);
    let k = prototypes.rows();
    if prototypes.cols() != d {
        return Err(Error::Shape {
            op: "group_loss",
            lhs: (b, d),
            rhs: prototypes.shape(),
        });
    }
    if temps.len() != k || assignments.len() != b || k == 0 {
        return Err(Error::argument("group loss needs one temperature per prototype and one assignment per graph"));
    }
    if let Some(&a) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::argument(format!("assignment {a} out of range for {k} prototypes")));
    }
    let zn = tape.l2_normalize_rows(z);
    let mut c = prototypes.clone();
    for r in 0..k {
        let nrm = crate::matrix::norm(c.row(r)).max(1e-12);
        c.row_mut(r).iter_mut().for_each(|v| *v /= nrm);
    }
    let ct = tape.constant(c.transpose());
    let sim = tape.matmul(zn, ct)?;
    let mut inv_tau = Matrix::zeros(b, k);
    let mut onehot = Matrix::zeros(b, k);
    for i in 0..b {
        for j in 0..k {
            inv_tau.set(i, j, 1.0 / temps[j]);
        }
        onehot.set(i, assignments[i], 1.0);
    }
    let inv_tau = tape.constant(inv_tau);
    let logits = tape.mul(sim, inv_tau)?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logits, onehot)?;
    let pos = tape.sum_rows(picked);
    if k == 1 && !include_positive {
        let term = tape.scale(pos, -1.0);
        let mut out = finish(tape, term);
        out.fallbacks = b;
        return Ok(out);
    }
    let mask = if include_positive {
        None
    } else {
        let mut m = Mask::all(b, k);
        for (i, &a) in assignments.iter().enumerate() {
            m.exclude(i, a);
        }
        Some(Arc::new(m))
    };
    let lse = tape.logsumexp_rows(logits, mask)?;
    let terms = tape.sub(lse, pos)?;
    Ok(finish(tape, terms))
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each update step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest_center(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = squared_distance(x, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_centers(data: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| squared_distance(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while dist[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // All points coincide with a chosen center: pick an unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

fn objective(data: &Matrix, centers: &Matrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(data.row(i), centers.row(a)))
        .sum()
}

/// Lloyd's k-means with k-means++ seeding on Euclidean distance.
///
/// Stops when assignments no longer change or after [`KMEANS_MAX_ITERS`]
/// iterations. An emptied cluster is re-seeded at the point farthest from its
/// current center.
pub fn kmeans(data: &Matrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = data.rows();
    if k < 1 {
        return Err(Error::argument("k must be >= 1"));
    }
    if n < k {
        return Err(Error::argument(format!("k-means needs at least k={k} points, got {n}")));
    }
    if !data.is_finite() {
        return Err(Error::Numerical("k-means input contains non-finite values".into()));
    }
    let mut rng = rng::stream(seed, rng::KMEANS);
    let mut centers = seed_centers(data, k, &mut rng);
    let mut assignments: Vec<usize> = (0..n).map(|i| nearest_center(data.row(i), &centers).0).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut sums = Matrix::zeros(k, data.cols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centers.row_mut(j).iter_mut().zip(sums.row(j)).for_each(|(m, &s)| *m = s / c);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .map(|i| (i, squared_distance(data.row(i), centers.row(assignments[i]))))
                    .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                let row = data.row(far.0).to_vec();
                centers.row_mut(j).copy_from_slice(&row);
            }
        }
        trace.push(objective(data, &centers, &assignments));
        let next: Vec<usize> = (0..n).map(|i| nearest_center(data.row(i), &centers).0).collect();
        if next == assignments || iterations >= KMEANS_MAX_ITERS {
            if next != assignments {
                log::debug!("k-means stopped at the iteration cap");
            }
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult {
        centers,
        assignments,
        objective: trace,
        iterations,
    })
}

/// Per-cluster temperatures from the concentration
/// `φ_j = Σ_{z∈j} ‖z − c_j‖ / (n_j log(n_j + 10))`.
///
/// `τ_j = τ_base φ_j / mean(φ)`, clamped to `[τ_base/10, 10 τ_base]`. Clusters with
/// fewer than two members take the mean of the others' φ; if every φ is zero
/// all clusters use `τ_base`.
pub fn concentration_temperatures(data: &Matrix, centers: &Matrix, assignments: &[usize], tau_base: f64) -> Vec<f64> {
    let k = centers.rows();
    let mut dist_sum = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        dist_sum[a] += squared_distance(data.row(i), centers.row(a)).sqrt();
    }
    let mut phi: Vec<Option<f64>> = (0..k)
        .map(|j| {
            (counts[j] >= 2).then(|| {
                let nj = counts[j] as f64;
                dist_sum[j] / (nj * (nj + 10.0).ln())
            })
        })
        .collect();
    let valid: Vec<f64> = phi.iter().flatten().copied().collect();
    let fill = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    for p in phi.iter_mut() {
        p.get_or_insert(fill);
    }
    let phi: Vec<f64> = phi.into_iter().map(|p| p.expect("filled")).collect();
    let mean = phi.iter().sum::<f64>() / k as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return vec![tau_base; k];
    }
    phi.iter()
        .map(|p| (tau_base * p / mean).clamp(tau_base / 10.0, tau_base * 10.0))
        .collect()
}

/// Clusters the group-level embeddings and derives per-cluster temperatures.
pub fn update_prototypes(z_group: &Matrix, k: usize, tau_base: f64, seed: u64, epoch: usize) -> Result<PrototypeState> {
    let km = kmeans(z_group, k, seed)?;
    let temps = concentration_temperatures(z_group, &km.centers, &km.assignments, tau_base);
    Ok(PrototypeState {
        centers: km.centers,
        assignments: km.assignments,
        temps,
        epoch,
    })
}

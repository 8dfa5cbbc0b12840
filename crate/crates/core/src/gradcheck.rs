//! Finite-difference verification suites for every differentiable op and for
//! the three losses through the full encoder.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, CustomOp, Mask, Tape, Var, DEFAULT_FD_STEP, DEFAULT_FD_TOL};
use crate::contrast::{graph_loss, group_loss, node_loss, ContrastOptions, Level};
use crate::encoder::{forward_all, init_params, BatchInput, ModelConfig, ModelParams};
use crate::error::Result;
use crate::graphdata::Graph;
use crate::matrix::Matrix;
use crate::rng;
use crate::sparse::SparseAdjacency;
use crate::structenc::structural_encoding;

pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Coordinates skipped because they sit on a non-differentiable point.
    pub excluded: usize,
    pub passed: bool,
}

impl CheckSummary {
    fn new(name: &str) -> Self {
        CheckSummary {
            name: name.to_string(),
            instances: 0,
            max_rel_error: 0.0,
            excluded: 0,
            passed: true,
        }
    }

    fn absorb(&mut self, report: &crate::autodiff::GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error);
        self.excluded += report.excluded.len();
        self.passed &= report.passed;
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Reduces an op's output to a scalar with a fixed random weighting, so every
/// output entry's gradient path is exercised.
fn contract(t: &mut Tape, y: Var, w: &Matrix) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges
}

type OpFn = Arc<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

/// One random instance of op `name`: the function of `x` and the point `x0`.
fn op_instance(name: &str, i: usize, rng: &mut ChaCha8Rng) -> (OpFn, Matrix) {
    let r = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    let left = i % 2 == 0;
    let x0 = uniform(rng, r, c, -1.5, 1.5);
    let other = uniform(rng, r, c, -1.5, 1.5);
    let w_rc = uniform(rng, r, c, -1.0, 1.0);
    macro_rules! contracted {
        ($w:expr, |$t:ident, $x:ident| $body:expr) => {{
            let w = $w;
            let f: OpFn = Arc::new(move |$t: &mut Tape, $x: Var| {
                let y = $body;
                contract($t, y, &w)
            });
            f
        }};
    }
    let binary = |op: fn(&mut Tape, Var, Var) -> Result<Var>| -> OpFn {
        let o = other.clone();
        contracted!(w_rc.clone(), |t, x| {
            let k = t.constant(o.clone());
            if left {
                op(t, x, k)?
            } else {
                op(t, k, x)?
            }
        })
    };
    match name {
        "matmul" => {
            let k = rng.gen_range(2..5);
            if left {
                let b = uniform(rng, c, k, -1.0, 1.0);
                let w = uniform(rng, r, k, -1.0, 1.0);
                (contracted!(w, |t, x| {
                    let bv = t.constant(b.clone());
                    t.matmul(x, bv)?
                }), x0)
            } else {
                let a = uniform(rng, k, r, -1.0, 1.0);
                let w = uniform(rng, k, c, -1.0, 1.0);
                (contracted!(w, |t, x| {
                    let av = t.constant(a.clone());
                    t.matmul(av, x)?
                }), x0)
            }
        }
        "spmm" => {
            let adj = Arc::new(SparseAdjacency::from_undirected(r, &random_edges(rng, r, 0.6)));
            (contracted!(w_rc, |t, x| t.spmm(&adj, x)?), x0)
        }
        "add" => (binary(|t, a, b| t.add(a, b)), x0),
        "sub" => (binary(|t, a, b| t.sub(a, b)), x0),
        "mul" => (binary(|t, a, b| t.mul(a, b)), x0),
        "scale" => {
            let s = rng.gen_range(-3.0..3.0);
            (contracted!(w_rc, |t, x| t.scale(x, s)), x0)
        }
        "relu" => (contracted!(w_rc, |t, x| t.relu(x)), x0),
        "bias_add" => {
            if left {
                let b = uniform(rng, 1, c, -1.0, 1.0);
                (contracted!(w_rc, |t, x| {
                    let bv = t.constant(b.clone());
                    t.bias_add(x, bv)?
                }), x0)
            } else {
                let b0 = uniform(rng, 1, c, -1.0, 1.0);
                (contracted!(w_rc, |t, x| {
                    let xv = t.constant(other.clone());
                    t.bias_add(xv, x)?
                }), b0)
            }
        }
        "concat_cols" => {
            let extra = uniform(rng, r, 2, -1.0, 1.0);
            let w = uniform(rng, r, c + 2, -1.0, 1.0);
            (contracted!(w, |t, x| {
                let e = t.constant(extra.clone());
                t.concat_cols(&if left { [x, e] } else { [e, x] })?
            }), x0)
        }
        "concat_rows" => {
            let extra = uniform(rng, 2, c, -1.0, 1.0);
            let w = uniform(rng, r + 2, c, -1.0, 1.0);
            (contracted!(w, |t, x| {
                let e = t.constant(extra.clone());
                t.concat_rows(&if left { [x, e] } else { [e, x] })?
            }), x0)
        }
        "slice_rows" => {
            let start = rng.gen_range(0..r);
            let len = rng.gen_range(1..=r - start);
            let w = uniform(rng, len, c, -1.0, 1.0);
            (contracted!(w, |t, x| t.slice_rows(x, start, len)?), x0)
        }
        "segment_sum" => {
            let segments = rng.gen_range(1..=r);
            let mut ids: Vec<usize> = (0..r).map(|k| k.min(segments - 1)).collect();
            ids.sort();
            let ids = Arc::new(ids);
            let w = uniform(rng, segments, c, -1.0, 1.0);
            (contracted!(w, |t, x| t.segment_sum(x, &ids, segments)?), x0)
        }
        "l2_normalize_rows" => (contracted!(w_rc, |t, x| t.l2_normalize_rows(x)), x0),
        "transpose" => {
            let w = uniform(rng, c, r, -1.0, 1.0);
            (contracted!(w, |t, x| t.transpose(x)), x0)
        }
        "exp" => (contracted!(w_rc, |t, x| t.exp(x)), x0),
        "log" => {
            let pos = uniform(rng, r, c, 0.5, 2.0);
            (contracted!(w_rc, |t, x| t.log(x)), pos)
        }
        "sum_rows" | "mean_rows" | "logsumexp_rows" => {
            let w = uniform(rng, r, 1, -1.0, 1.0);
            let which = name.to_string();
            (contracted!(w, |t, x| match which.as_str() {
                "sum_rows" => t.sum_rows(x),
                "mean_rows" => t.mean_rows(x),
                _ => t.logsumexp_rows(x, None)?,
            }), x0)
        }
        "logsumexp_rows.masked" => {
            let mut mask = Mask::all(r, c);
            for row in 0..r {
                let keep = rng.gen_range(0..c);
                for col in 0..c {
                    if col != keep && rng.gen_bool(0.5) {
                        mask.exclude(row, col);
                    }
                }
            }
            let mask = Arc::new(mask);
            let w = uniform(rng, r, 1, -1.0, 1.0);
            (contracted!(w, |t, x| t.logsumexp_rows(x, Some(mask.clone()))?), x0)
        }
        "sum" => (Arc::new(|t: &mut Tape, x: Var| Ok(t.sum(x))), x0),
        "mean" => (Arc::new(|t: &mut Tape, x: Var| Ok(t.mean(x))), x0),
        other => panic!("no gradient check defined for op {other}"),
    }
}

pub const CATALOG: [&str; 22] = [
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "bias_add",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "segment_sum",
    "l2_normalize_rows",
    "transpose",
    "exp",
    "log",
    "sum_rows",
    "mean_rows",
    "sum",
    "mean",
    "logsumexp_rows",
    "logsumexp_rows.masked",
];

/// Checks every op in [`CATALOG`] on `instances` random inputs.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    CATALOG
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut summary = CheckSummary::new(name);
            for i in 0..instances {
                let mut rng = rng::stream(rng::derive(seed, (k * 1000 + i) as u64), rng::GRADCHECK);
                let (f, x0) = op_instance(name, i, &mut rng);
                let report = grad_check(|t, x| f(t, x), &x0, DEFAULT_FD_STEP, DEFAULT_FD_TOL)?;
                summary.absorb(&report);
                summary.instances += 1;
            }
            Ok(summary)
        })
        .collect()
}

struct LossInstance {
    params: ModelParams,
    input: BatchInput,
    prototypes: Matrix,
    temps: Vec<f64>,
    assignments: Vec<usize>,
}

fn loss_instance(i: usize, seed: u64) -> Result<LossInstance> {
    let mut rng = rng::stream(rng::derive(seed, 50_000 + i as u64), rng::GRADCHECK);
    let cfg = ModelConfig {
        layers: 2,
        hidden_dim: 4,
        proj_dim: 6,
        proj_layers: 2,
        clusters: 3,
        rw_steps: 3,
        degree_buckets: 4,
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let d_f = 3;
    let graphs: Vec<Graph> = (0..3)
        .map(|_| {
            let n = rng.gen_range(3..6);
            let edges = random_edges(&mut rng, n, 0.5);
            Graph::new(n, &edges, uniform(&mut rng, n, d_f, -1.0, 1.0), None)
        })
        .collect::<Result<_>>()?;
    let encs: Vec<Matrix> = graphs
        .iter()
        .map(|g| structural_encoding(g, cfg.rw_steps, cfg.degree_buckets).map(|e| e.matrix))
        .collect::<Result<_>>()?;
    let mut params = init_params(&cfg, d_f, cfg.structure_dim())?;
    for m in params.tensors_mut() {
        if m.rows() == 1 {
            m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let refs: Vec<&Graph> = graphs.iter().collect();
    let erefs: Vec<&Matrix> = encs.iter().collect();
    let input = BatchInput::new(&refs, &erefs)?;
    Ok(LossInstance {
        prototypes: uniform(&mut rng, cfg.clusters, cfg.proj_dim, -1.0, 1.0),
        temps: (0..cfg.clusters).map(|_| rng.gen_range(0.1..0.5)).collect(),
        assignments: (0..3).map(|_| rng.gen_range(0..cfg.clusters)).collect(),
        params,
        input,
    })
}

fn level_loss(t: &mut Tape, inst: &LossInstance, level: Level, replace: Option<(usize, Var)>) -> Result<Var> {
    let mut bound = inst.params.bind(t, false);
    if let Some((k, x)) = replace {
        *bound.vars_mut()[k] = x;
    }
    let emb = forward_all(t, &inst.input, &bound)?;
    let opts = ContrastOptions {
        temperature: inst.params.config.temperature,
        include_positive: inst.params.config.include_positive_in_denominator,
    };
    let out = match level {
        Level::Node => node_loss(t, emb.z_node_f, emb.z_node_s, &inst.input.batch.offsets, &opts)?,
        Level::Graph => graph_loss(t, emb.z_graph_f, emb.z_graph_s, &opts)?,
        Level::Group => group_loss(t, emb.z_group, &inst.prototypes, &inst.temps, &inst.assignments, opts.include_positive)?,
    };
    Ok(out.loss)
}

/// Checks each loss with respect to every parameter tensor of the model.
pub fn loss_suite(instances: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let setups: Vec<LossInstance> = (0..instances).map(|i| loss_instance(i, seed)).collect::<Result<_>>()?;
    Level::ALL
        .iter()
        .map(|&level| {
            let mut summary = CheckSummary::new(&format!("loss.{}", level.name()));
            for inst in &setups {
                let tensors: Vec<Matrix> = inst.params.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
                for (k, x0) in tensors.iter().enumerate() {
                    let report = grad_check(|t, x| level_loss(t, inst, level, Some((k, x))), x0, DEFAULT_FD_STEP, DEFAULT_FD_TOL)?;
                    summary.absorb(&report);
                }
                summary.instances += 1;
            }
            Ok(summary)
        })
        .collect()
}

/// Deliberately wrong backward pass, used to confirm the harness catches faults.
struct FaultySquare;

impl CustomOp for FaultySquare {
    fn name(&self) -> &str {
        "faulty_square"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        vec![grad.zip_map(inputs[0], "faulty_square", |g, x| 3.0 * g * x).expect("shape")]
    }
}

pub fn faulty_op_check(instances: usize, seed: u64) -> Result<CheckSummary> {
    let mut summary = CheckSummary::new("custom.faulty_square");
    for i in 0..instances {
        let mut rng = rng::stream(rng::derive(seed, 90_000 + i as u64), rng::GRADCHECK);
        let x0 = uniform(&mut rng, 2, 3, -1.5, 1.5);
        let report = grad_check(
            |t, x| {
                let y = t.custom(&[x], Arc::new(FaultySquare))?;
                Ok(t.sum(y))
            },
            &x0,
            DEFAULT_FD_STEP,
            DEFAULT_FD_TOL,
        )?;
        summary.absorb(&report);
        summary.instances += 1;
    }
    Ok(summary)
}

/// Full suite: every catalog op, the three losses, and optionally the faulty op.
pub fn run_suite(instances: usize, seed: u64, inject_fault: bool) -> Result<Vec<CheckSummary>> {
    let mut all = op_suite(instances, seed)?;
    all.extend(loss_suite(instances, seed)?);
    if inject_fault {
        all.push(faulty_op_check(instances, seed)?);
    }
    Ok(all)
}

pub fn render(results: &[CheckSummary]) -> String {
    let mut out = String::new();
    for r in results {
        writeln!(
            out,
            "gradcheck op={} instances={} max_rel_error={:.3e} excluded={} status={}",
            r.name,
            r.instances,
            r.max_rel_error,
            r.excluded,
            if r.passed { "pass" } else { "FAIL" }
        )
        .expect("string write");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        writeln!(out, "gradcheck all {} checks passed", results.len()).expect("string write");
    } else {
        writeln!(out, "gradcheck failed: {}", failed.join(", ")).expect("string write");
    }
    out
}

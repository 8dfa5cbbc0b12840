//! Per-graph contrastive errors at inference time, OOD score aggregation and AUC.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::contrast::{
    graph_loss, group_loss, node_loss, ContrastOptions, ErrorStats, Level, LevelErrors, PrototypeState, ReferenceBank,
};
use crate::encoder::{forward_all, BatchInput, Embeddings, ModelParams};
use crate::error::{Error, Result};
use crate::graphdata::Graph;
use crate::matrix::{cosine, dot, norm, Matrix};
use crate::trainer::{embed_all, Variant};

/// Source of graph-level negatives when scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphNegatives {
    /// Other graphs of the same inference batch.
    Batch,
    /// The fixed sample of training graphs stored with the model.
    Bank,
}

impl std::str::FromStr for GraphNegatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(GraphNegatives::Batch),
            "bank" => Ok(GraphNegatives::Bank),
            other => Err(Error::argument(format!("unknown negative source {other:?} (expected batch or bank)"))),
        }
    }
}

/// How the group-level score is computed from the nearest prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScore {
    /// The group-level contrastive term under the nearest prototype.
    Loss,
    /// Negative cosine similarity to the nearest prototype.
    NegSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    pub graph_negatives: GraphNegatives,
    pub group_score: GroupScore,
    /// Inference batch size; graphs are batched in input order.
    pub batch_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            graph_negatives: GraphNegatives::Batch,
            group_score: GroupScore::Loss,
            batch_size: 64,
        }
    }
}

/// Most cosine-similar prototype and its similarity; ties go to the lowest index.
pub fn nearest_prototype(z: &[f64], state: &PrototypeState) -> Result<(usize, f64)> {
    let c = &state.centers;
    if c.rows() == 0 {
        return Err(Error::State("no prototypes available".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..c.rows() {
        let s = cosine(z, c.row(j));
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best)
}

fn bank_graph_errors(f: &Matrix, s: &Matrix, bank: &ReferenceBank, opts: &ContrastOptions) -> Result<Vec<f64>> {
    if bank.z_graph_f.cols() != f.cols() || bank.z_graph_s.cols() != s.cols() {
        return Err(Error::Shape {
            op: "bank_graph_errors",
            lhs: f.shape(),
            rhs: bank.z_graph_f.shape(),
        });
    }
    let unit = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let n = norm(out.row(r)).max(1e-12);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        out
    };
    let (bf, bs) = (unit(&bank.z_graph_f), unit(&bank.z_graph_s));
    let (f, s) = (unit(f), unit(s));
    let tau = opts.temperature;
    let lse = |x: &[f64], pool: &Matrix, pos: f64| {
        let mut logits: Vec<f64> = (0..pool.rows()).map(|j| dot(x, pool.row(j)) / tau).collect();
        if opts.include_positive {
            logits.push(pos);
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    };
    Ok((0..f.rows())
        .map(|i| {
            let pos = dot(f.row(i), s.row(i)) / tau;
            let fs = lse(f.row(i), &bs, pos) - pos;
            let sf = lse(s.row(i), &bf, pos) - pos;
            (fs + sf) / 2.0
        })
        .collect())
}

fn batch_errors(model: &ModelParams, input: &BatchInput, opts: &ScoreOptions) -> Result<(LevelErrors, usize)> {
    let cfg = &model.config;
    let copts = ContrastOptions {
        temperature: cfg.temperature,
        include_positive: cfg.include_positive_in_denominator,
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let emb = forward_all(&mut tape, input, &bound)?;
    let b = input.graph_count();
    let enabled = |l: Level| model.enabled_levels[l.index()];
    let mut errors = LevelErrors::default();
    let mut fallbacks = 0;
    errors.node = if enabled(Level::Node) {
        let out = node_loss(&mut tape, emb.z_node_f, emb.z_node_s, &input.batch.offsets, &copts)?;
        fallbacks += out.fallbacks;
        out.per_graph
    } else {
        vec![0.0; b]
    };
    errors.graph = if !enabled(Level::Graph) {
        vec![0.0; b]
    } else {
        match opts.graph_negatives {
            GraphNegatives::Batch => {
                let out = graph_loss(&mut tape, emb.z_graph_f, emb.z_graph_s, &copts)?;
                fallbacks += out.fallbacks;
                out.per_graph
            }
            GraphNegatives::Bank => {
                let bank = model
                    .reference_bank
                    .as_ref()
                    .ok_or_else(|| Error::State("model has no reference bank".into()))?;
                bank_graph_errors(tape.value(emb.z_graph_f), tape.value(emb.z_graph_s), bank, &copts)?
            }
        }
    };
    errors.group = if enabled(Level::Group) {
        let state = model
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::State("model has no prototypes".into()))?;
        let z = tape.value(emb.z_group).clone();
        let nearest: Vec<(usize, f64)> = (0..b).map(|i| nearest_prototype(z.row(i), state)).collect::<Result<_>>()?;
        match opts.group_score {
            GroupScore::Loss => {
                let assign: Vec<usize> = nearest.iter().map(|n| n.0).collect();
                let out = group_loss(&mut tape, emb.z_group, &state.centers, &state.temps, &assign, copts.include_positive)?;
                out.per_graph
            }
            GroupScore::NegSim => nearest.iter().map(|n| -n.1).collect(),
        }
    } else {
        vec![0.0; b]
    };
    Ok((errors, fallbacks))
}

/// Per-graph errors at every level, in input order.
///
/// Graphs are scored in consecutive batches of `opts.batch_size`; disabled
/// levels are reported as 0.
pub fn per_sample_errors(
    model: &ModelParams,
    graphs: &[&Graph],
    encodings: &[&Matrix],
    opts: &ScoreOptions,
) -> Result<LevelErrors> {
    if model.error_stats.is_none() {
        return Err(Error::State("model has not been trained".into()));
    }
    if graphs.len() != encodings.len() {
        return Err(Error::argument("one structural encoding per graph is required"));
    }
    let chunk = opts.batch_size.max(1);
    let starts: Vec<usize> = (0..graphs.len()).step_by(chunk).collect();
    let parts: Vec<(LevelErrors, usize)> = starts
        .par_iter()
        .map(|&a| {
            let b = (a + chunk).min(graphs.len());
            batch_errors(model, &BatchInput::new(&graphs[a..b], &encodings[a..b])?, opts)
        })
        .collect::<Result<_>>()?;
    let mut all = LevelErrors::default();
    let mut fallbacks = 0;
    for (e, f) in &parts {
        all.extend(e);
        fallbacks += f;
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} graph terms used the positive-only fallback while scoring");
    }
    Ok(all)
}

fn aggregate(e: &LevelErrors, stats: Option<&ErrorStats>, enabled: [bool; 3]) -> Vec<f64> {
    let mut terms: Vec<(Level, f64, f64)> = Vec::new();
    for level in Level::ALL {
        if !enabled[level.index()] {
            continue;
        }
        match stats {
            None => terms.push((level, 0.0, 1.0)),
            Some(s) => {
                let (mu, sd) = (s.mean[level.index()], s.std[level.index()]);
                if sd > 0.0 {
                    terms.push((level, mu, sd));
                } else {
                    log::warn!("{} errors have zero spread on the training set; the level is left out of the score", level.name());
                }
            }
        }
    }
    (0..e.len())
        .map(|i| terms.iter().map(|&(l, mu, sd)| (e.get(l)[i] - mu) / sd).sum())
        .collect()
}

/// `s_node + s_graph + s_group`.
pub fn ood_score_simple(e: &LevelErrors) -> Vec<f64> {
    aggregate(e, None, [true; 3])
}

/// Sum of per-level z-scores against training statistics; a level with zero
/// spread contributes 0.
pub fn ood_score_adaptive(e: &LevelErrors, stats: &ErrorStats) -> Vec<f64> {
    aggregate(e, Some(stats), [true; 3])
}

/// Score for the model's variant, leaving out levels it was not trained with.
pub fn ood_scores(model: &ModelParams, e: &LevelErrors, variant: Variant) -> Result<Vec<f64>> {
    match variant {
        Variant::Simp => Ok(aggregate(e, None, model.enabled_levels)),
        Variant::Adaptive => {
            let stats = model
                .error_stats
                .as_ref()
                .ok_or_else(|| Error::State("model has no error statistics".into()))?;
            Ok(aggregate(e, Some(stats), model.enabled_levels))
        }
    }
}

/// Area under the ROC curve via the rank-sum statistic, with midranks for ties.
///
/// Label 1 marks the positive (OOD) class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::argument("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::argument("labels must be 0 or 1"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::argument("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]] == 1).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub graph_id: usize,
    pub label: Option<u8>,
    pub s_node: f64,
    pub s_graph: f64,
    pub s_group: f64,
    pub score: f64,
}

pub fn build_records(errors: &LevelErrors, scores: &[f64], labels: Option<&[u8]>) -> Vec<ScoreRecord> {
    (0..scores.len())
        .map(|i| ScoreRecord {
            graph_id: i,
            label: labels.map(|l| l[i]),
            s_node: errors.node[i],
            s_graph: errors.graph[i],
            s_group: errors.group[i],
            score: scores[i],
        })
        .collect()
}

pub const SCORE_CSV_HEADER: &str = "graph_id,label,s_node,s_graph,s_group,score";

pub fn scores_to_csv(records: &[ScoreRecord]) -> String {
    let mut out = format!("{SCORE_CSV_HEADER}\n");
    for r in records {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{label},{:.8e},{:.8e},{:.8e},{:.8e}",
            r.graph_id, r.s_node, r.s_graph, r.s_group, r.score
        )
        .expect("string write");
    }
    out
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    fs::write(path, scores_to_csv(records)).map_err(|e| Error::io(path, e))
}

/// Per-class score counts over `bins` equal-width bins spanning the score range,
/// as TSV with columns `bin_low bin_high id ood`.
pub fn score_histogram(records: &[ScoreRecord], bins: usize) -> String {
    let mut out = String::from("bin_low\tbin_high\tid\tood\n");
    if records.is_empty() || bins == 0 {
        return out;
    }
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![[0usize; 2]; bins];
    for r in records {
        let b = (((r.score - lo) / width) as usize).min(bins - 1);
        counts[b][usize::from(r.label == Some(1))] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let a = lo + b as f64 * width;
        writeln!(out, "{:.8e}\t{:.8e}\t{}\t{}", a, a + width, c[0], c[1]).expect("string write");
    }
    out
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes every embedding space of `graphs` as CSV files into `dir`.
pub fn export_embeddings(model: &ModelParams, graphs: &[&Graph], encodings: &[&Matrix], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let parts: Vec<Embeddings> = embed_all(model, graphs, encodings, 64)?;
    let stack = |pick: fn(&Embeddings) -> &Matrix| -> Result<Matrix> {
        Matrix::vcat(&parts.iter().map(pick).collect::<Vec<_>>())
    };
    let spaces: [(&str, fn(&Embeddings) -> &Matrix); 5] = [
        ("node_f", |e| &e.z_node_f),
        ("node_s", |e| &e.z_node_s),
        ("graph_f", |e| &e.z_graph_f),
        ("graph_s", |e| &e.z_graph_s),
        ("group", |e| &e.z_group),
    ];
    for (name, pick) in spaces {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, matrix_csv(&stack(pick)?)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

//! Training loop: epoch-start re-clustering, seeded mini-batches, adaptively
//! weighted level losses and Adam updates.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrast::{
    graph_loss, group_loss, mean_std, node_loss, update_prototypes, ContrastOptions, Level, LevelErrors,
    PrototypeState, ReferenceBank,
};
use crate::encoder::{embed, forward_all, init_params, BatchInput, Embeddings, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::graphdata::{Graph, GraphDataset};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Weighted training loss and z-score aggregation.
    Adaptive,
    /// Unit weights and a plain sum of level scores.
    Simp,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Variant::Adaptive),
            "simp" => Ok(Variant::Simp),
            other => Err(Error::argument(format!("unknown variant {other:?} (expected adaptive or simp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Exponent applied to each level's error spread.
    pub alpha: f64,
    pub variant: Variant,
    /// Node, graph and group losses that take part in training and scoring.
    pub levels: [bool; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: 0.5,
            variant: Variant::Adaptive,
            levels: [true; 3],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::argument("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::argument("batch_size must be >= 2"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::argument("alpha must be a finite value >= 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument("learning_rate must be a finite value >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::argument("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !self.levels.iter().any(|&l| l) {
            return Err(Error::argument("at least one loss level must be enabled"));
        }
        Ok(())
    }

    pub fn level_enabled(&self, level: Level) -> bool {
        self.levels[level.index()]
    }
}

/// `σ^α` per level; a zero spread gives weight 0 unless `α = 0`.
pub fn adaptive_weights(sigma: [f64; 3], alpha: f64) -> Result<[f64; 3]> {
    if !(alpha >= 0.0) {
        return Err(Error::argument(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut w = [0.0; 3];
    for (wi, &s) in w.iter_mut().zip(&sigma) {
        if s < 0.0 || !s.is_finite() {
            return Err(Error::argument(format!("standard deviation {s} is not a finite value >= 0")));
        }
        *wi = if alpha == 0.0 {
            1.0
        } else if s == 0.0 {
            0.0
        } else {
            s.powf(alpha)
        };
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(t: &TrainConfig) -> Self {
        AdamHyper {
            lr: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, applied tensor by tensor in order.
///
/// All gradients are checked before anything is modified.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::argument("adam_step needs one gradient, name and moment per parameter"));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (theta, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub graphs: usize,
    /// Mean loss of each level (0 when disabled).
    pub losses: [f64; 3],
    pub weights: [f64; 3],
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-graph error of each level over the epoch.
    pub mean_loss: [f64; 3],
    /// Population standard deviation of the per-graph errors.
    pub sigma: [f64; 3],
    /// Level weights used during this epoch.
    pub weights: [f64; 3],
    /// Graphs that used a positive-only fallback term.
    pub fallbacks: usize,
    pub seconds: f64,
}

impl EpochStats {
    /// Machine-readable run-log line.
    pub fn log_line(&self) -> String {
        let [ln, lg, lp] = self.mean_loss;
        let [sn, sg, sp] = self.sigma;
        let [wn, wg, wp] = self.weights;
        format!(
            "epoch={} loss_node={ln:.9e} loss_graph={lg:.9e} loss_group={lp:.9e} \
             sigma_node={sn:.9e} sigma_graph={sg:.9e} sigma_group={sp:.9e} \
             weight_node={wn:.9e} weight_graph={wg:.9e} weight_group={wp:.9e} fallbacks={} seconds={:.3}",
            self.epoch, self.fallbacks, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub batches: Vec<BatchRecord>,
    /// Per-graph errors recorded during the final epoch, in training-set order.
    pub final_errors: LevelErrors,
}

impl TrainStats {
    /// Everything except wall-clock time, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainStats {
        let mut s = self.clone();
        s.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        s
    }
}

/// Groups a seeded permutation into batches of `b`; a trailing single graph
/// joins the previous batch.
pub fn make_batches(n: usize, b: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, epoch as u64), rng::SHUFFLE));
    let mut batches: Vec<Vec<usize>> = order.chunks(b).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map_or(false, |l| l.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Embeds `graphs` in consecutive chunks of `chunk` without gradients, in parallel.
pub fn embed_all(params: &ModelParams, graphs: &[&Graph], encodings: &[&Matrix], chunk: usize) -> Result<Vec<Embeddings>> {
    let ranges: Vec<(usize, usize)> = (0..graphs.len()).step_by(chunk.max(1)).map(|s| (s, (s + chunk).min(graphs.len()))).collect();
    ranges
        .par_iter()
        .map(|&(a, b)| embed(params, &BatchInput::new(&graphs[a..b], &encodings[a..b])?))
        .collect()
}

fn stack_rows(parts: &[Embeddings], pick: impl Fn(&Embeddings) -> &Matrix) -> Result<Matrix> {
    let refs: Vec<&Matrix> = parts.iter().map(pick).collect();
    Matrix::vcat(&refs)
}

struct BatchOutcome {
    record: BatchRecord,
    errors: [Vec<f64>; 3],
    fallbacks: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    names: &[String],
    input: &BatchInput,
    assignments: Option<(&PrototypeState, Vec<usize>)>,
    weights: [f64; 3],
    tcfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<BatchOutcome> {
    let opts = ContrastOptions {
        temperature: params.config.temperature,
        include_positive: params.config.include_positive_in_denominator,
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let emb = forward_all(&mut tape, input, &bound)?;
    let mut terms: Vec<Var> = Vec::new();
    let mut losses = [0.0; 3];
    let mut errors: [Vec<f64>; 3] = Default::default();
    let mut fallbacks = 0;
    for level in Level::ALL {
        if !tcfg.level_enabled(level) {
            errors[level.index()] = vec![0.0; input.graph_count()];
            continue;
        }
        let out = match level {
            Level::Node => node_loss(&mut tape, emb.z_node_f, emb.z_node_s, &input.batch.offsets, &opts)?,
            Level::Graph => graph_loss(&mut tape, emb.z_graph_f, emb.z_graph_s, &opts)?,
            Level::Group => {
                let (state, assign) = assignments.as_ref().ok_or_else(|| Error::State("prototypes missing".into()))?;
                group_loss(&mut tape, emb.z_group, &state.centers, &state.temps, assign, opts.include_positive)?
            }
        };
        fallbacks += out.fallbacks;
        losses[level.index()] = tape.value(out.loss).item();
        errors[level.index()] = out.per_graph;
        terms.push(tape.scale(out.loss, weights[level.index()]));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let combined = tape.value(total).item();
    if !combined.is_finite() {
        return Err(Error::Numerical(format!("loss is {combined} at epoch {epoch}, batch {batch}")));
    }
    let mut grads = tape.backward(total)?;
    let grads: Vec<Matrix> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
    adam_step(&mut params.tensors_mut(), &grads, names, adam, &AdamHyper::from(tcfg)).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, batch {batch}")),
        other => other,
    })?;
    Ok(BatchOutcome {
        record: BatchRecord {
            epoch,
            batch,
            graphs: input.graph_count(),
            losses,
            weights,
            combined,
        },
        errors,
        fallbacks,
    })
}

/// Trains a model on `train_set`, whose structural encodings are `encodings`.
pub fn train(
    train_set: &GraphDataset,
    encodings: &[Matrix],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainStats)> {
    cfg.validate()?;
    tcfg.validate()?;
    let n = train_set.len();
    if n < cfg.clusters.max(tcfg.batch_size) {
        return Err(Error::argument(format!(
            "training set has {n} graphs; at least max(K={}, b={}) are required",
            cfg.clusters, tcfg.batch_size
        )));
    }
    if encodings.len() != n {
        return Err(Error::argument("one structural encoding per training graph is required"));
    }
    let d_s = encodings[0].cols();
    if d_s != cfg.structure_dim() {
        return Err(Error::argument(format!(
            "structural encodings have width {d_s}, config expects {}",
            cfg.structure_dim()
        )));
    }
    let mut params = init_params(cfg, train_set.feature_dim(), d_s)?;
    params.enabled_levels = tcfg.levels;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let shapes: Vec<(usize, usize)> = params.named_tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut adam = AdamState::new(&shapes);
    let graphs: Vec<&Graph> = train_set.graphs().iter().collect();
    let encs: Vec<&Matrix> = encodings.iter().collect();

    let mut stats = TrainStats {
        epochs: Vec::new(),
        batches: Vec::new(),
        final_errors: LevelErrors::default(),
    };
    let mut sigma: Option<[f64; 3]> = None;
    for epoch in 0..tcfg.epochs {
        let started = Instant::now();
        let prototypes = if tcfg.level_enabled(Level::Group) {
            let parts = embed_all(&params, &graphs, &encs, tcfg.batch_size)?;
            let z = stack_rows(&parts, |e| &e.z_group)?;
            Some(update_prototypes(&z, cfg.clusters, cfg.temperature, rng::derive(tcfg.seed, epoch as u64), epoch)?)
        } else {
            None
        };
        let weights = match (tcfg.variant, sigma) {
            (Variant::Adaptive, Some(s)) => adaptive_weights(s, tcfg.alpha)?,
            _ => [1.0; 3],
        };
        let mut errors: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut fallbacks = 0;
        for (bi, idx) in make_batches(n, tcfg.batch_size, tcfg.seed, epoch).iter().enumerate() {
            let bg: Vec<&Graph> = idx.iter().map(|&i| graphs[i]).collect();
            let be: Vec<&Matrix> = idx.iter().map(|&i| encs[i]).collect();
            let input = BatchInput::new(&bg, &be)?;
            let assign = prototypes
                .as_ref()
                .map(|p| (p, idx.iter().map(|&i| p.assignments[i]).collect::<Vec<_>>()));
            let out = train_batch(&mut params, &mut adam, &names, &input, assign, weights, tcfg, epoch, bi)?;
            for l in 0..3 {
                for (k, &i) in idx.iter().enumerate() {
                    errors[l][i] = out.errors[l][k];
                }
            }
            fallbacks += out.fallbacks;
            stats.batches.push(out.record);
        }
        let mut mean_loss = [0.0; 3];
        let mut sig = [0.0; 3];
        for l in 0..3 {
            (mean_loss[l], sig[l]) = mean_std(&errors[l]);
        }
        if fallbacks > 0 {
            log::warn!("epoch {epoch}: {fallbacks} graph terms used the positive-only fallback");
        }
        sigma = Some(sig);
        let [node, graph, group] = errors;
        stats.final_errors = LevelErrors { node, graph, group };
        params.prototypes = prototypes;
        let e = EpochStats {
            epoch,
            mean_loss,
            sigma: sig,
            weights,
            fallbacks,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", e.log_line());
        stats.epochs.push(e);
    }
    if !params.is_finite() {
        return Err(Error::Numerical("parameters diverged during training".into()));
    }
    params.error_stats = Some(stats.final_errors.stats());
    params.reference_bank = Some(reference_bank(&params, &graphs, &encs, tcfg)?);
    Ok((params, stats))
}

/// Graph-level projections of a seeded sample of `b` training graphs.
fn reference_bank(params: &ModelParams, graphs: &[&Graph], encs: &[&Matrix], tcfg: &TrainConfig) -> Result<ReferenceBank> {
    let mut idx: Vec<usize> = (0..graphs.len()).collect();
    idx.shuffle(&mut rng::stream(tcfg.seed, rng::BANK));
    idx.truncate(tcfg.batch_size.min(graphs.len()));
    let bg: Vec<&Graph> = idx.iter().map(|&i| graphs[i]).collect();
    let be: Vec<&Matrix> = idx.iter().map(|&i| encs[i]).collect();
    let parts = embed_all(params, &bg, &be, tcfg.batch_size)?;
    Ok(ReferenceBank {
        z_graph_f: stack_rows(&parts, |e| &e.z_graph_f)?,
        z_graph_s: stack_rows(&parts, |e| &e.z_graph_s)?,
    })
}

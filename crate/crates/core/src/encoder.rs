//! Dual GIN encoders, sum readout and the five projection heads.
//!
//! The feature-view and structure-view encoders never share weights. Each GIN
//! layer computes `h' = MLP(h + A h)` with a linear -> ReLU -> linear perceptron,
//! and a node's embedding is the concatenation of every layer's output.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrast::{ErrorStats, PrototypeState, ReferenceBank};
use crate::error::{Error, Result};
use crate::graphdata::{batch_graphs, BatchedGraph, Graph};
use crate::matrix::Matrix;
use crate::rng;
use crate::sparse::SparseAdjacency;
use crate::structenc::{DEFAULT_DEGREE_BUCKETS, DEFAULT_RW_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// GIN layers per encoder.
    pub layers: usize,
    pub hidden_dim: usize,
    /// Width of every projection head's output.
    pub proj_dim: usize,
    pub proj_layers: usize,
    pub temperature: f64,
    pub clusters: usize,
    pub rw_steps: usize,
    pub degree_buckets: usize,
    /// Keep the positive pair inside every InfoNCE denominator.
    pub include_positive_in_denominator: bool,
    /// Reserved; normalization layers are not implemented.
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden_dim: 16,
            proj_dim: 32,
            proj_layers: 2,
            temperature: 0.2,
            clusters: 10,
            rw_steps: DEFAULT_RW_STEPS,
            degree_buckets: DEFAULT_DEGREE_BUCKETS,
            include_positive_in_denominator: false,
            batch_norm: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::argument(m.to_string()));
        if self.layers < 1 {
            return fail("layers must be >= 1");
        }
        if self.hidden_dim < 1 || self.proj_dim < 1 {
            return fail("hidden_dim and proj_dim must be >= 1");
        }
        if self.proj_layers < 1 {
            return fail("proj_layers must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.clusters < 2 {
            return fail("clusters must be >= 2");
        }
        if self.rw_steps < 1 || self.degree_buckets < 1 {
            return fail("rw_steps and degree_buckets must be >= 1");
        }
        if self.batch_norm {
            return fail("batch_norm is reserved and must be false");
        }
        Ok(())
    }

    /// Width of a node or graph embedding: `layers * hidden_dim`.
    pub fn embedding_dim(&self) -> usize {
        self.layers * self.hidden_dim
    }

    pub fn structure_dim(&self) -> usize {
        self.rw_steps + self.degree_buckets
    }
}

/// Dense layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        Linear {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("shape"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn identity(n: usize) -> Linear {
        Linear {
            weight: Matrix::identity(n),
            bias: Matrix::zeros(1, n),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Perceptron: ReLU between layers, none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn glorot(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (bind(tape, &l.weight, trainable), bind(tape, &l.bias, trainable)))
                .collect(),
        }
    }
}

fn bind(tape: &mut Tape, m: &Matrix, trainable: bool) -> Var {
    if trainable {
        tape.param(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

/// Stack of GIN layers, each holding a two-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct GinEncoder {
    pub layers: Vec<Mlp>,
}

impl GinEncoder {
    fn glorot(in_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> GinEncoder {
        GinEncoder {
            layers: (0..layers)
                .map(|l| Mlp::glorot(&[if l == 0 { in_dim } else { hidden }, hidden, hidden], rng))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub node_f: Mlp,
    pub node_s: Mlp,
    pub graph_f: Mlp,
    pub graph_s: Mlp,
    pub group: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub feature_encoder: GinEncoder,
    pub structure_encoder: GinEncoder,
    pub heads: Heads,
    pub prototypes: Option<PrototypeState>,
    pub error_stats: Option<ErrorStats>,
    pub reference_bank: Option<ReferenceBank>,
    /// Which of the node/graph/group levels the model was trained with.
    pub enabled_levels: [bool; 3],
}

/// Glorot-uniform weights, zero biases, no prototypes; deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig, d_f: usize, d_s: usize) -> Result<ModelParams> {
    cfg.validate()?;
    if d_f < 1 || d_s < 1 {
        return Err(Error::argument("input widths must be >= 1"));
    }
    let mut rng = rng::stream(cfg.seed, rng::INIT);
    let emb = cfg.embedding_dim();
    let head = |input: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(cfg.proj_dim).take(cfg.proj_layers));
        Mlp::glorot(&dims, rng)
    };
    let feature_encoder = GinEncoder::glorot(d_f, cfg.hidden_dim, cfg.layers, &mut rng);
    let structure_encoder = GinEncoder::glorot(d_s, cfg.hidden_dim, cfg.layers, &mut rng);
    let heads = Heads {
        node_f: head(emb, &mut rng),
        node_s: head(emb, &mut rng),
        graph_f: head(emb, &mut rng),
        graph_s: head(emb, &mut rng),
        group: head(2 * emb, &mut rng),
    };
    Ok(ModelParams {
        config: cfg.clone(),
        feature_encoder,
        structure_encoder,
        heads,
        prototypes: None,
        error_stats: None,
        reference_bank: None,
        enabled_levels: [true; 3],
    })
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        self.feature_encoder.in_dim()
    }

    pub fn structure_dim(&self) -> usize {
        self.structure_encoder.in_dim()
    }

    /// Trainable tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("feature_encoder", &self.feature_encoder), ("structure_encoder", &self.structure_encoder)] {
            for (l, mlp) in enc.layers.iter().enumerate() {
                push_mlp(&mut out, &format!("{prefix}.layer{l}"), mlp);
            }
        }
        for (name, mlp) in self.head_list() {
            push_mlp(&mut out, &format!("heads.{name}"), mlp);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for enc in [&mut self.feature_encoder, &mut self.structure_encoder] {
            for mlp in &mut enc.layers {
                out.extend(mlp.tensors_mut());
            }
        }
        let h = &mut self.heads;
        for mlp in [&mut h.node_f, &mut h.node_s, &mut h.graph_f, &mut h.graph_s, &mut h.group] {
            out.extend(mlp.tensors_mut());
        }
        out
    }

    fn head_list(&self) -> [(&'static str, &Mlp); 5] {
        let h = &self.heads;
        [
            ("node_f", &h.node_f),
            ("node_s", &h.node_s),
            ("graph_f", &h.graph_f),
            ("graph_s", &h.graph_s),
            ("group", &h.group),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Records every trainable tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let enc = |e: &GinEncoder, tape: &mut Tape| e.layers.iter().map(|m| m.bind(tape, trainable)).collect();
        let feature = enc(&self.feature_encoder, tape);
        let structure = enc(&self.structure_encoder, tape);
        let h = &self.heads;
        BoundModel {
            feature_encoder: feature,
            structure_encoder: structure,
            node_f: h.node_f.bind(tape, trainable),
            node_s: h.node_s.bind(tape, trainable),
            graph_f: h.graph_f.bind(tape, trainable),
            graph_s: h.graph_s.bind(tape, trainable),
            group: h.group.bind(tape, trainable),
        }
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, mlp: &'a Mlp) {
    for (i, m) in mlp.tensors().enumerate() {
        let kind = if i % 2 == 0 { "weight" } else { "bias" };
        out.push((format!("{prefix}.linear{}.{kind}", i / 2), m));
    }
}

/// Tape handles for one perceptron's `(weight, bias)` pairs.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub feature_encoder: Vec<BoundMlp>,
    pub structure_encoder: Vec<BoundMlp>,
    pub node_f: BoundMlp,
    pub node_s: BoundMlp,
    pub graph_f: BoundMlp,
    pub graph_s: BoundMlp,
    pub group: BoundMlp,
}

impl BoundModel {
    /// Handles in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        for enc in [&self.feature_encoder, &self.structure_encoder] {
            for m in enc {
                out.extend(m.vars());
            }
        }
        for m in [&self.node_f, &self.node_s, &self.graph_f, &self.graph_s, &self.group] {
            out.extend(m.vars());
        }
        out
    }

    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out: Vec<&mut Var> = Vec::new();
        let encoders = self.feature_encoder.iter_mut().chain(self.structure_encoder.iter_mut());
        let heads = [&mut self.node_f, &mut self.node_s, &mut self.graph_f, &mut self.graph_s, &mut self.group];
        for m in encoders.chain(heads) {
            out.extend(m.layers.iter_mut().flat_map(|(w, b)| [w, b]));
        }
        out
    }
}

/// Batched graphs with both views' node inputs.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub batch: BatchedGraph,
    /// Stacked structural encodings, one row per batched node.
    pub structure: Matrix,
    pub segment_ids: Arc<Vec<usize>>,
}

impl BatchInput {
    pub fn new(graphs: &[&Graph], encodings: &[&Matrix]) -> Result<BatchInput> {
        if graphs.len() != encodings.len() {
            return Err(Error::argument("one structural encoding per graph is required"));
        }
        for (g, e) in graphs.iter().zip(encodings) {
            if g.node_count() != e.rows() {
                return Err(Error::argument(format!(
                    "encoding has {} rows for a graph with {} nodes",
                    e.rows(),
                    g.node_count()
                )));
            }
        }
        let batch = batch_graphs(graphs)?;
        let structure = Matrix::vcat(encodings)?;
        let segment_ids = Arc::new(batch.segment_ids.clone());
        Ok(BatchInput {
            batch,
            structure,
            segment_ids,
        })
    }

    pub fn graph_count(&self) -> usize {
        self.batch.graph_count()
    }
}

/// Applies a perceptron: ReLU between layers, none after the last.
pub fn project(tape: &mut Tape, x: Var, head: &BoundMlp) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in head.layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.bias_add(lin, b)?;
        if i + 1 < head.layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// GIN node embeddings: concatenation of all layer outputs.
pub fn gin_forward(tape: &mut Tape, adj: &Arc<SparseAdjacency>, x: Var, encoder: &[BoundMlp]) -> Result<Var> {
    let expected = encoder
        .first()
        .map(|m| tape.shape(m.layers[0].0).0)
        .ok_or_else(|| Error::argument("encoder has no layers"))?;
    if tape.shape(x).1 != expected {
        return Err(Error::Shape {
            op: "gin_forward",
            lhs: tape.shape(x),
            rhs: tape.shape(encoder[0].layers[0].0),
        });
    }
    let mut h = x;
    let mut outputs = Vec::with_capacity(encoder.len());
    for mlp in encoder {
        let agg = tape.spmm(adj, h)?;
        let combined = tape.add(h, agg)?;
        h = project(tape, combined, mlp)?;
        outputs.push(h);
    }
    tape.concat_cols(&outputs)
}

/// Sum of node embeddings per graph.
pub fn readout(tape: &mut Tape, node_emb: Var, segment_ids: &Arc<Vec<usize>>, graphs: usize) -> Result<Var> {
    tape.segment_sum(node_emb, segment_ids, graphs)
}

/// Handles to every embedding produced for a batch.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub node_f: Var,
    pub node_s: Var,
    pub graph_f: Var,
    pub graph_s: Var,
    pub z_node_f: Var,
    pub z_node_s: Var,
    pub z_graph_f: Var,
    pub z_graph_s: Var,
    pub z_group: Var,
}

pub fn forward_all(tape: &mut Tape, input: &BatchInput, model: &BoundModel) -> Result<EmbeddingVars> {
    let adj = &input.batch.adjacency;
    let b = input.graph_count();
    let x = tape.constant(input.batch.features.clone());
    let s = tape.constant(input.structure.clone());
    let node_f = gin_forward(tape, adj, x, &model.feature_encoder)?;
    let node_s = gin_forward(tape, adj, s, &model.structure_encoder)?;
    let graph_f = readout(tape, node_f, &input.segment_ids, b)?;
    let graph_s = readout(tape, node_s, &input.segment_ids, b)?;
    let z_node_f = project(tape, node_f, &model.node_f)?;
    let z_node_s = project(tape, node_s, &model.node_s)?;
    let z_graph_f = project(tape, graph_f, &model.graph_f)?;
    let z_graph_s = project(tape, graph_s, &model.graph_s)?;
    let pair = tape.concat_cols(&[graph_f, graph_s])?;
    let z_group = project(tape, pair, &model.group)?;
    Ok(EmbeddingVars {
        node_f,
        node_s,
        graph_f,
        graph_s,
        z_node_f,
        z_node_s,
        z_graph_f,
        z_graph_s,
        z_group,
    })
}

/// Materialized embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub node_f: Matrix,
    pub node_s: Matrix,
    pub graph_f: Matrix,
    pub graph_s: Matrix,
    pub z_node_f: Matrix,
    pub z_node_s: Matrix,
    pub z_graph_f: Matrix,
    pub z_graph_s: Matrix,
    pub z_group: Matrix,
}

impl Embeddings {
    pub fn from_tape(tape: &Tape, v: &EmbeddingVars) -> Embeddings {
        let get = |x: Var| tape.value(x).clone();
        Embeddings {
            node_f: get(v.node_f),
            node_s: get(v.node_s),
            graph_f: get(v.graph_f),
            graph_s: get(v.graph_s),
            z_node_f: get(v.z_node_f),
            z_node_s: get(v.z_node_s),
            z_graph_f: get(v.z_graph_f),
            z_graph_s: get(v.z_graph_s),
            z_group: get(v.z_group),
        }
    }
}

/// Forward pass without gradients.
pub fn embed(params: &ModelParams, input: &BatchInput) -> Result<Embeddings> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let vars = forward_all(&mut tape, input, &bound)?;
    Ok(Embeddings::from_tape(&tape, &vars))
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "goodd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    feature_dim: usize,
    structure_dim: usize,
    enabled_levels: [bool; 3],
    prototype_epoch: Option<usize>,
    arrays: Vec<NamedArray>,
}

fn array(name: &str, m: &Matrix) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        data: m.data().to_vec(),
    }
}

fn row_vector(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("shape")
}

/// Serializes the model to the checkpoint text form (JSON, shortest round-trip reals).
pub fn checkpoint_to_string(params: &ModelParams) -> Result<String> {
    let mut arrays: Vec<NamedArray> = params.named_tensors().iter().map(|(n, m)| array(n, m)).collect();
    if let Some(p) = &params.prototypes {
        arrays.push(array("prototypes.centers", &p.centers));
        arrays.push(array("prototypes.temperatures", &row_vector(&p.temps)));
        let assign: Vec<f64> = p.assignments.iter().map(|&a| a as f64).collect();
        arrays.push(array("prototypes.assignments", &row_vector(&assign)));
    }
    if let Some(s) = &params.error_stats {
        arrays.push(array("error_stats.mean", &row_vector(&s.mean)));
        arrays.push(array("error_stats.std", &row_vector(&s.std)));
    }
    if let Some(bank) = &params.reference_bank {
        arrays.push(array("reference_bank.graph_f", &bank.z_graph_f));
        arrays.push(array("reference_bank.graph_s", &bank.z_graph_s));
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        feature_dim: params.feature_dim(),
        structure_dim: params.structure_dim(),
        enabled_levels: params.enabled_levels,
        prototype_epoch: params.prototypes.as_ref().map(|p| p.epoch),
        arrays,
    };
    serde_json::to_string(&file).map_err(|e| Error::State(format!("cannot serialize checkpoint: {e}")))
}

pub fn checkpoint_from_str(text: &str, origin: &Path) -> Result<ModelParams> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::parse(origin, Some(e.line()), e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            origin,
            None,
            format!("unsupported checkpoint {} v{}", file.format, file.version),
        ));
    }
    let mut params = init_params(&file.config, file.feature_dim, file.structure_dim)?;
    params.enabled_levels = file.enabled_levels;
    let mut by_name: std::collections::BTreeMap<String, Matrix> = file
        .arrays
        .into_iter()
        .map(|a| Ok((a.name, Matrix::from_vec(a.rows, a.cols, a.data)?)))
        .collect::<Result<_>>()?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let m = by_name
            .remove(name)
            .ok_or_else(|| Error::parse(origin, None, format!("missing array {name}")))?;
        if m.shape() != slot.shape() {
            return Err(Error::parse(origin, None, format!("array {name} has shape {:?}, expected {:?}", m.shape(), slot.shape())));
        }
        *slot = m;
    }
    if let Some(centers) = by_name.remove("prototypes.centers") {
        let temps = by_name
            .remove("prototypes.temperatures")
            .ok_or_else(|| Error::parse(origin, None, "prototype temperatures missing"))?;
        let assignments = by_name
            .remove("prototypes.assignments")
            .map(|m| m.data().iter().map(|&v| v as usize).collect())
            .unwrap_or_default();
        params.prototypes = Some(PrototypeState {
            centers,
            assignments,
            temps: temps.into_data(),
            epoch: file.prototype_epoch.unwrap_or(0),
        });
    }
    if let (Some(mean), Some(std)) = (by_name.remove("error_stats.mean"), by_name.remove("error_stats.std")) {
        let to3 = |m: Matrix| -> Result<[f64; 3]> {
            m.data()
                .try_into()
                .map_err(|_| Error::parse(origin, None, "error statistics need three levels"))
        };
        params.error_stats = Some(ErrorStats {
            mean: to3(mean)?,
            std: to3(std)?,
        });
    }
    if let (Some(f), Some(s)) = (by_name.remove("reference_bank.graph_f"), by_name.remove("reference_bank.graph_s")) {
        params.reference_bank = Some(ReferenceBank {
            z_graph_f: f,
            z_graph_s: s,
        });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::parse(origin, None, format!("unknown array {extra}")));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, checkpoint_to_string(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}

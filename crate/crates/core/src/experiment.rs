//! Run configuration and experiment drivers: train, score, multi-seed
//! evaluation, loss ablation and hyper-parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::Level;
use crate::encoder::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::graphdata::{
    align_feature_widths, generate_synthetic_pair, parse_tu_dataset, split_anomaly, split_ood, Graph, GraphDataset, Split,
    SplitMode, SplitSpec,
};
use crate::matrix::Matrix;
use crate::scoring::{
    auc, build_records, export_embeddings, ood_scores, per_sample_errors, score_histogram, scores_to_csv, ScoreOptions,
    ScoreRecord,
};
use crate::structenc::encode_dataset;
use crate::trainer::{train, TrainConfig, TrainStats, Variant};

pub const DATA_DIR_ENV: &str = "GOODD_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Erdős–Rényi ID graphs against preferential-attachment OOD graphs.
    Synthetic,
    /// TU-format datasets under the data root.
    Tu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// ID dataset name (TU source).
    pub id: String,
    /// OOD dataset name (TU source, OOD-pair mode).
    pub ood: String,
    /// Dataset root; falls back to the `GOODD_DATA_DIR` environment variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Graphs generated per synthetic set.
    pub synthetic_graphs: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            id: String::new(),
            ood: String::new(),
            root: None,
            synthetic_graphs: 120,
            synthetic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::OodPair,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of seeds, `seed, seed + 1, ...`.
    pub repeats: usize,
    /// Bins in the exported score histogram.
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repeats: 5,
            histogram_bins: 20,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for splits, initialization, shuffling and clustering.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreOptions,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(Error::Config("split.train_fraction must lie in (0, 1]".into()));
        }
        if self.eval.repeats < 1 {
            return Err(Error::Config("eval.repeats must be >= 1".into()));
        }
        if self.score.batch_size < 1 {
            return Err(Error::Config("score.batch_size must be >= 1".into()));
        }
        if self.data.source == DataSource::Tu && self.data.id.is_empty() {
            return Err(Error::Config("data.id must name a dataset".into()));
        }
        Ok(())
    }

    /// Copy with every seed-dependent component keyed to `seed`.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut r = self.clone();
        r.seed = seed;
        r.model.seed = seed;
        r.train.seed = seed;
        r
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.repeats as u64).map(|k| self.seed + k).collect()
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Argument(m) => Error::Config(m),
        other => other,
    }
}

/// The datasets a run draws its splits from.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub id: GraphDataset,
    pub ood: Option<GraphDataset>,
}

fn data_root(cfg: &DataConfig) -> Result<PathBuf> {
    if let Some(r) = &cfg.root {
        return Ok(r.clone());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("no dataset root: set data.root or {DATA_DIR_ENV}")))
}

fn relabel(ds: &GraphDataset, label: i64) -> Result<Vec<Graph>> {
    ds.graphs()
        .iter()
        .map(|g| Graph::new(g.node_count(), g.edges(), g.features().clone(), Some(label)))
        .collect()
}

pub fn load_datasets(run: &RunConfig) -> Result<Datasets> {
    let cfg = &run.data;
    match (cfg.source, run.split.mode) {
        (DataSource::Synthetic, SplitMode::OodPair) => {
            let (id, ood) = generate_synthetic_pair(cfg.synthetic_graphs, cfg.synthetic_seed)?;
            Ok(Datasets { id, ood: Some(ood) })
        }
        (DataSource::Synthetic, SplitMode::Anomaly) => {
            // ER graphs are normal; a tenth as many BA graphs form the minority class.
            let (er, ba) = generate_synthetic_pair(cfg.synthetic_graphs, cfg.synthetic_seed)?;
            let k = (cfg.synthetic_graphs / 10).max(1);
            let mut graphs = relabel(&er, 0)?;
            graphs.extend(relabel(&ba.subset("ba", &(0..k).collect::<Vec<_>>()), 1)?);
            Ok(Datasets {
                id: GraphDataset::new("synthetic-anomaly", graphs)?,
                ood: None,
            })
        }
        (DataSource::Tu, mode) => {
            let root = data_root(cfg)?;
            let mut id = parse_tu_dataset(&root, &cfg.id)?;
            if mode == SplitMode::Anomaly {
                return Ok(Datasets { id, ood: None });
            }
            if cfg.ood.is_empty() {
                return Err(Error::Config("data.ood must name a dataset in ood_pair mode".into()));
            }
            let mut ood = parse_tu_dataset(&root, &cfg.ood)?;
            align_feature_widths(&mut id, &mut ood);
            Ok(Datasets { id, ood: Some(ood) })
        }
    }
}

/// A split with structural encodings for both halves.
pub struct PreparedSplit {
    pub split: Split,
    pub train_enc: Vec<Matrix>,
    pub test_enc: Vec<Matrix>,
}

pub fn prepare_split(run: &RunConfig, data: &Datasets) -> Result<PreparedSplit> {
    let spec = SplitSpec {
        train_fraction: run.split.train_fraction,
        seed: run.seed,
        mode: run.split.mode,
    };
    let split = match (&data.ood, run.split.mode) {
        (Some(ood), SplitMode::OodPair) => split_ood(&data.id, ood, &spec)?,
        (_, SplitMode::Anomaly) => split_anomaly(&data.id, &spec)?,
        (None, SplitMode::OodPair) => return Err(Error::Config("ood_pair mode needs an OOD dataset".into())),
    };
    let m = &run.model;
    let train_enc = encode_dataset(&split.train, m.rw_steps, m.degree_buckets)?;
    let test_enc = encode_dataset(&split.test, m.rw_steps, m.degree_buckets)?;
    Ok(PreparedSplit {
        split,
        train_enc,
        test_enc,
    })
}

pub fn score_split(model: &ModelParams, prepared: &PreparedSplit, run: &RunConfig) -> Result<(Vec<ScoreRecord>, f64)> {
    let graphs: Vec<&Graph> = prepared.split.test.graphs().iter().collect();
    let encs: Vec<&Matrix> = prepared.test_enc.iter().collect();
    let errors = per_sample_errors(model, &graphs, &encs, &run.score)?;
    let scores = ood_scores(model, &errors, run.train.variant)?;
    let labels = &prepared.split.test_labels;
    let value = auc(&scores, labels)?;
    Ok((build_records(&errors, &scores, Some(labels)), value))
}

pub struct SeedOutcome {
    pub seed: u64,
    pub auc: f64,
    pub records: Vec<ScoreRecord>,
    pub params: ModelParams,
    pub stats: TrainStats,
}

/// Split, train and score for one seed.
pub fn run_seed(run: &RunConfig, data: &Datasets, seed: u64) -> Result<SeedOutcome> {
    let run = run.with_seed(seed);
    let prepared = prepare_split(&run, data)?;
    let (params, stats) = train(&prepared.split.train, &prepared.train_enc, &run.model, &run.train)?;
    let (records, value) = score_split(&params, &prepared, &run)?;
    Ok(SeedOutcome {
        seed,
        auc: value,
        records,
        params,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

impl EvalReport {
    pub fn from_aucs(seeds: Vec<u64>, aucs: Vec<f64>) -> EvalReport {
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let std = if aucs.len() > 1 {
            (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalReport { seeds, aucs, mean, std }
    }

    pub fn summary_line(&self) -> String {
        format!("AUC mean={:.6} std={:.6} seeds={}", self.mean, self.std, self.seeds.len())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (s, a) in self.seeds.iter().zip(&self.aucs) {
            writeln!(out, "seed={s} auc={a:.6}").expect("string write");
        }
        writeln!(out, "{}", self.summary_line()).expect("string write");
        out
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs every seed, in parallel, and returns outcomes in seed order.
fn run_seeds(run: &RunConfig, data: &Datasets) -> Result<Vec<SeedOutcome>> {
    run.seeds().par_iter().map(|&s| run_seed(run, data, s)).collect()
}

/// Multi-seed protocol. With `out`, writes the resolved config, one score CSV per
/// seed and `report.txt`.
pub fn evaluate(run: &RunConfig, out: Option<&Path>) -> Result<EvalReport> {
    run.validate()?;
    let data = load_datasets(run)?;
    let outcomes = run_seeds(run, &data)?;
    let report = EvalReport::from_aucs(
        outcomes.iter().map(|o| o.seed).collect(),
        outcomes.iter().map(|o| o.auc).collect(),
    );
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("config.toml"), &run.to_toml()?)?;
        for o in &outcomes {
            write(&dir.join(format!("scores_seed{}.csv", o.seed)), &scores_to_csv(&o.records))?;
        }
        write(&dir.join("report.txt"), &report.render())?;
    }
    Ok(report)
}

/// Trains once with `run.seed`; writes `model.json`, `train.log` and the resolved config.
pub fn train_command(run: &RunConfig, out: &Path) -> Result<(ModelParams, TrainStats)> {
    run.validate()?;
    let run = run.with_seed(run.seed);
    let data = load_datasets(&run)?;
    let prepared = prepare_split(&run, &data)?;
    let (params, stats) = train(&prepared.split.train, &prepared.train_enc, &run.model, &run.train)?;
    ensure_dir(out)?;
    write(&out.join("config.toml"), &run.to_toml()?)?;
    save_checkpoint(&out.join("model.json"), &params)?;
    let log: String = stats.epochs.iter().map(|e| e.log_line() + "\n").collect();
    write(&out.join("train.log"), &log)?;
    Ok((params, stats))
}

/// Scores the test split of `run.seed` with a saved model; writes `scores.csv`,
/// `histogram.tsv`, `report.txt` and per-space embeddings.
pub fn score_command(run: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(Vec<ScoreRecord>, f64)> {
    run.validate()?;
    let run = run.with_seed(run.seed);
    let model = load_checkpoint(checkpoint)?;
    if model.config.structure_dim() != run.model.structure_dim() {
        return Err(Error::Config("checkpoint and config disagree on the structural encoding width".into()));
    }
    let data = load_datasets(&run)?;
    let prepared = prepare_split(&run, &data)?;
    let (records, value) = score_split(&model, &prepared, &run)?;
    ensure_dir(out)?;
    write(&out.join("scores.csv"), &scores_to_csv(&records))?;
    write(&out.join("histogram.tsv"), &score_histogram(&records, run.eval.histogram_bins))?;
    write(&out.join("report.txt"), &format!("AUC {value:.6}\n"))?;
    let graphs: Vec<&Graph> = prepared.split.test.graphs().iter().collect();
    let encs: Vec<&Matrix> = prepared.test_enc.iter().collect();
    export_embeddings(&model, &graphs, &encs, &out.join("embeddings"))?;
    Ok((records, value))
}

/// The seven non-empty subsets of node, graph and group losses.
pub const ABLATION_ROWS: [[bool; 3]; 7] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

pub fn levels_label(levels: [bool; 3]) -> String {
    Level::ALL
        .iter()
        .filter(|l| levels[l.index()])
        .map(|l| l.name())
        .collect::<Vec<_>>()
        .join("+")
}

fn table(header: &str, rows: &[(String, EvalReport)]) -> String {
    let mut out = format!("{header}\tmean\tstd\taucs\n");
    for (label, r) in rows {
        let aucs: Vec<String> = r.aucs.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(out, "{label}\t{:.6}\t{:.6}\t{}", r.mean, r.std, aucs.join(",")).expect("string write");
    }
    out
}

/// Every loss combination on the simple variant.
pub fn ablate(run: &RunConfig, out: Option<&Path>) -> Result<Vec<(String, EvalReport)>> {
    let mut base = run.clone();
    base.train.variant = Variant::Simp;
    base.validate()?;
    let data = load_datasets(&base)?;
    let rows: Vec<(String, EvalReport)> = ABLATION_ROWS
        .iter()
        .map(|&levels| {
            let mut r = base.clone();
            r.train.levels = levels;
            let outcomes = run_seeds(&r, &data)?;
            let report = EvalReport::from_aucs(r.seeds(), outcomes.iter().map(|o| o.auc).collect());
            Ok((levels_label(levels), report))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("config.toml"), &base.to_toml()?)?;
        write(&dir.join("ablation.tsv"), &table("levels", &rows))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Clusters,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" | "clusters" => Ok(SweepParam::Clusters),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::argument(format!("cannot sweep {other:?} (expected K or alpha)"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Clusters => "K",
            SweepParam::Alpha => "alpha",
        }
    }
}

/// One evaluation per value with shared seeds.
pub fn sweep(run: &RunConfig, param: SweepParam, values: &[f64], out: Option<&Path>) -> Result<Vec<(String, EvalReport)>> {
    if values.is_empty() {
        return Err(Error::argument("sweep needs at least one value"));
    }
    run.validate()?;
    let data = load_datasets(run)?;
    let rows: Vec<(String, EvalReport)> = values
        .iter()
        .map(|&v| {
            let mut r = run.clone();
            let label = match param {
                SweepParam::Clusters => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::argument(format!("K must be a positive integer, got {v}")));
                    }
                    r.model.clusters = v as usize;
                    format!("{}", v as usize)
                }
                SweepParam::Alpha => {
                    r.train.alpha = v;
                    format!("{v}")
                }
            };
            r.validate()?;
            let outcomes = run_seeds(&r, &data)?;
            Ok((label, EvalReport::from_aucs(r.seeds(), outcomes.iter().map(|o| o.auc).collect())))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("config.toml"), &run.to_toml()?)?;
        write(&dir.join(format!("sweep_{}.tsv", param.name())), &table(param.name(), &rows))?;
    }
    Ok(rows)
}

pub fn render_table(header: &str, rows: &[(String, EvalReport)]) -> String {
    table(header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut r = RunConfig::default();
        r.data.synthetic_graphs = 30;
        r.split.train_fraction = 0.8;
        r.model.hidden_dim = 4;
        r.model.proj_dim = 8;
        r.model.clusters = 3;
        r.train.epochs = 2;
        r.train.batch_size = 8;
        r.eval.repeats = 2;
        r
    }

    #[test]
    fn config_round_trip_and_strictness() {
        let r = quick();
        let text = r.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), r);
        let err = RunConfig::from_toml("[model]\nhiden_dim = 3\n", Path::new("run.toml")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("hiden_dim")), "{err}");
        let partial = RunConfig::from_toml("seed = 4\n[train]\nepochs = 3\n", Path::new("x")).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 64);
        assert_eq!(partial.seed, 4);
    }

    #[test]
    fn report_format() {
        let r = EvalReport::from_aucs(vec![0, 1], vec![0.5, 0.7]);
        assert!((r.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.summary_line(), "AUC mean=0.600000 std=0.141421 seeds=2");
        assert!(r.render().starts_with("seed=0 auc=0.500000\n"));
        assert_eq!(EvalReport::from_aucs(vec![3], vec![0.9]).std, 0.0);
    }

    #[test]
    fn eval_is_deterministic() {
        let r = quick();
        let a = evaluate(&r, None).unwrap();
        let b = evaluate(&r, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seeds, vec![0, 1]);
    }

    #[test]
    fn synthetic_anomaly_mode_runs() {
        let mut r = quick();
        r.split.mode = SplitMode::Anomaly;
        r.data.synthetic_graphs = 40;
        let report = evaluate(&r, None).unwrap();
        assert!(report.aucs.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn tu_source_needs_root() {
        let mut r = quick();
        r.data.source = DataSource::Tu;
        r.data.id = "AIDS".into();
        r.data.ood = "DHFR".into();
        r.data.root = Some(PathBuf::from("/nonexistent-goodd-root"));
        assert!(matches!(load_datasets(&r), Err(Error::Parse { .. }) | Err(Error::Io { .. })));
    }
}

//! Experiment plumbing: JSON configs, output directories, checkpoints and
//! plot-data emission.
//!
//! A run owns its output directory through a `.lock` file for its whole
//! duration. Every artifact either embeds the config hash (checkpoints,
//! JSON sidecars, the manifest) or is listed in the manifest next to it.

pub mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, Retrain, SweepMeta};
use crate::data::{DataError, DataSource, Dataset};
use crate::graph::{to_text, TopologySpec};
use crate::network::{build_network, Network, NetworkError, NetworkSpec, StageDef};
use crate::trainer::{self, TrainConfig, TrainError};

pub use checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("output directory {0} is locked by another run (remove .lock if stale)")]
    Locked(PathBuf),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Data(_) => "data",
            HarnessError::Network(_) => "network",
            HarnessError::Train(_) => "train",
            HarnessError::Analysis(_) => "analysis",
            HarnessError::Io { .. } => "io",
            HarnessError::Locked(_) => "locked",
            HarnessError::Mismatch(_) => "mismatch",
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Nodes per stage, input and output nodes included.
    pub stage_sizes: Vec<usize>,
    /// One topology per stage.
    pub topologies: Vec<TopologySpec>,
    pub base_width: usize,
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub use_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgePruningConfig {
    /// Ascending `|alpha|` thresholds.
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub retrain: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub node_ablation: bool,
    #[serde(default)]
    pub edge_pruning: Option<EdgePruningConfig>,
    #[serde(default)]
    pub histogram_bins: Option<usize>,
    /// Retrain from scratch under every snapshot's α.
    #[serde(default)]
    pub snapshot_study: bool,
    /// Epochs for retraining runs; defaults to `train.epochs`.
    #[serde(default)]
    pub retrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn default_val_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// SHA-256 over the canonical (key-sorted, compact) JSON of everything
    /// but `output_dir`, so relocating a run keeps its identity.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.stage_sizes.is_empty() {
            return Err(HarnessError::Config("arch.stage_sizes is empty".into()));
        }
        if a.topologies.len() != a.stage_sizes.len() {
            return Err(HarnessError::Config(format!(
                "{} topologies for {} stages",
                a.topologies.len(),
                a.stage_sizes.len()
            )));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(HarnessError::Config(format!("val_fraction {} outside (0, 1)", self.data.val_fraction)));
        }
        self.train.validate()?;
        if let Some(p) = &self.analysis.edge_pruning {
            if p.thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(AnalysisError::ThresholdsNotAscending.into());
            }
        }
        if let Some(b) = self.analysis.histogram_bins {
            if b < 2 {
                return Err(AnalysisError::TooFewBins(b).into());
            }
        }
        Ok(())
    }

    pub fn stage_defs(&self) -> Vec<StageDef> {
        self.arch.stage_sizes.iter().zip(&self.arch.topologies).map(|(&nodes, &topology)| StageDef { nodes, topology }).collect()
    }

    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            num_classes: self.arch.num_classes,
            base_width: self.arch.base_width,
            use_norm: self.arch.use_norm,
        }
    }

    /// Training config for W-only retraining runs.
    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.analysis.retrain_epochs.unwrap_or(self.train.epochs),
            snapshot_epochs: Vec::new(),
            ..self.train.clone()
        }
    }

    /// Loads the data source and splits it into (train, val).
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = self.data.source.load(self.seed)?;
        if data.num_classes != self.arch.num_classes {
            return Err(HarnessError::Config(format!(
                "data has {} classes, arch.num_classes is {}",
                data.num_classes, self.arch.num_classes
            )));
        }
        Ok(data.split(self.data.val_fraction, self.seed)?)
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(DirLock { path, _file: file }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(HarnessError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Collects the files a run writes, for the manifest.
struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Self {
        Outputs { dir, files: Vec::new() }
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| HarnessError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        self.write(name, ckpt.to_bytes())
    }

    /// Records files written by an exporter.
    fn note(&mut self, names: impl IntoIterator<Item = String>) {
        self.files.extend(names);
    }
}

fn sidecar(hash: &str, seed: u64, extra: serde_json::Value) -> String {
    let mut v = serde_json::json!({ "config_hash": hash, "seed": seed });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    serde_json::to_string_pretty(&v).expect("json") + "\n"
}

/// What a finished run produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_val_acc: Option<f64>,
    pub files: Vec<String>,
}

fn write_manifest(out: &mut Outputs<'_>, cfg: &ExperimentConfig, hash: &str, extra: serde_json::Value) -> Result<()> {
    out.files.sort();
    let manifest = serde_json::json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "versions": {
            "toponet": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": checkpoint::VERSION,
        },
        "config": cfg,
        "files": out.files,
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("json") + "\n";
    let path = out.dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

/// Trains the configured network and writes every configured artifact.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.output_dir.as_path();
    let _lock = DirLock::acquire(dir)?;
    let (train_set, val_set) = cfg.datasets()?;
    let mut net = build_network(&cfg.stage_defs(), cfg.network_spec(train_set.input_dim()), cfg.seed)?;
    let mut out = Outputs::new(dir);

    if cfg.train.epochs == 0 {
        out.checkpoint("checkpoint_epoch0.tpnc", &Checkpoint::new(&net, &hash, 0))?;
        write_manifest(&mut out, cfg, &hash, serde_json::json!({ "epochs": 0 }))?;
        return Ok(RunSummary { config_hash: hash, seed: cfg.seed, epochs: 0, final_val_acc: None, files: out.files });
    }

    let outcome = trainer::train(&mut net, &train_set, &val_set, &cfg.train)?;
    out.write("metrics.csv", outcome.metrics.to_csv())?;
    out.write("metrics.json", sidecar(&hash, cfg.seed, serde_json::json!({ "file": "metrics.csv" })))?;
    for snap in &outcome.snapshots {
        let ckpt = Checkpoint { config_hash: hash.clone(), epoch: snap.epoch as u32, state: snap.state.clone() };
        out.checkpoint(&format!("checkpoint_epoch{}.tpnc", snap.epoch), &ckpt)?;
    }
    out.checkpoint("checkpoint_final.tpnc", &Checkpoint::new(&net, &hash, cfg.train.epochs))?;

    let meta = SweepMeta { seed: cfg.seed, config_hash: hash.clone() };
    run_analyses(&mut out, cfg, &net, &train_set, &val_set, &meta)?;
    if cfg.analysis.snapshot_study {
        let study = analysis::snapshot_retrain_study(&outcome.snapshots, &train_set, &val_set, &cfg.retrain_config(), meta)?;
        export_sweep(&mut out, &study, "sweep_snapshots")?;
    }
    for (k, st) in net.stages().iter().enumerate() {
        out.write(&format!("topology_stage{k}.txt"), to_text(&st.graph, Some(&net.alpha_matrix(k)?)))?;
    }

    let final_val_acc = outcome.metrics.last().map(|r| r.val_acc);
    write_manifest(
        &mut out,
        cfg,
        &hash,
        serde_json::json!({ "epochs": cfg.train.epochs, "final_val_acc": final_val_acc, "fingerprint": net.fingerprint() }),
    )?;
    Ok(RunSummary { config_hash: hash, seed: cfg.seed, epochs: cfg.train.epochs, final_val_acc, files: out.files })
}

fn export_sweep(out: &mut Outputs<'_>, sweep: &analysis::SweepResult, stem: &str) -> Result<()> {
    sweep.export(out.dir, stem)?;
    out.note([format!("{stem}.csv"), format!("{stem}.json")]);
    Ok(())
}

fn run_analyses(
    out: &mut Outputs<'_>,
    cfg: &ExperimentConfig,
    net: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    meta: &SweepMeta,
) -> Result<()> {
    let a = &cfg.analysis;
    if a.node_ablation {
        export_sweep(out, &analysis::node_ablation_sweep(net, val_set, meta.clone())?, "sweep_nodes")?;
    }
    if let Some(p) = &a.edge_pruning {
        let rc = Retrain { train_set, val_set, config: cfg.retrain_config() };
        let sweep = analysis::edge_pruning_sweep(net, val_set, &p.thresholds, p.retrain, Some(&rc), meta.clone())?;
        export_sweep(out, &sweep, "sweep_edges")?;
    }
    if let Some(bins) = a.histogram_bins {
        let h = analysis::alpha_histogram(net, bins)?;
        h.export(out.dir, "histogram")?;
        out.note(std::iter::once("histogram.csv".to_string()));
        out.note((0..h.graphs.len()).map(|k| format!("histogram_stage{k}.txt")));
        out.write("histogram.json", sidecar(&meta.config_hash, meta.seed, serde_json::json!({ "bins": bins })))?;
    }
    Ok(())
}

/// Runs the configured analyses (all but the snapshot study, which needs a
/// training run) on a saved checkpoint.
pub fn analyze_checkpoint(ckpt_path: &Path, cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (train_set, val_set) = cfg.datasets()?;
    check_matches(&ckpt, cfg, train_set.input_dim())?;
    let net = ckpt.network()?;
    let dir = cfg.output_dir.as_path();
    let _lock = DirLock::acquire(dir)?;
    let mut out = Outputs::new(dir);
    let meta = SweepMeta { seed: cfg.seed, config_hash: hash.clone() };
    run_analyses(&mut out, cfg, &net, &train_set, &val_set, &meta)?;
    let acc = net.accuracy(&val_set.features, &val_set.labels, 512)?;
    write_manifest(
        &mut out,
        cfg,
        &hash,
        serde_json::json!({
            "checkpoint": ckpt_path,
            "checkpoint_config_hash": ckpt.config_hash,
            "checkpoint_epoch": ckpt.epoch,
            "val_acc": acc,
            "snapshot_study": if cfg.analysis.snapshot_study { "skipped: needs a training run" } else { "off" },
        }),
    )?;
    Ok(RunSummary { config_hash: hash, seed: cfg.seed, epochs: ckpt.epoch as usize, final_val_acc: Some(acc), files: out.files })
}

fn check_matches(ckpt: &Checkpoint, cfg: &ExperimentConfig, input_dim: usize) -> Result<()> {
    let spec = cfg.network_spec(input_dim);
    if ckpt.state.spec != spec {
        return Err(HarnessError::Mismatch(format!("network spec {:?} vs config {:?}", ckpt.state.spec, spec)));
    }
    let sizes: Vec<usize> = ckpt.state.stages.iter().map(|s| s.graph.n_nodes()).collect();
    if sizes != cfg.arch.stage_sizes {
        return Err(HarnessError::Mismatch(format!("stage sizes {sizes:?} vs config {:?}", cfg.arch.stage_sizes)));
    }
    Ok(())
}

/// JSON description of a checkpoint.
pub fn inspect(ckpt: &Checkpoint) -> Result<serde_json::Value> {
    let net = ckpt.network()?;
    let stages: Vec<_> = net
        .stages()
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let a = net.alpha_matrix(k)?;
            Ok(serde_json::json!({
                "nodes": st.graph.n_nodes(),
                "edges": st.graph.edge_count(),
                "width_in": st.width_in,
                "width_out": st.width_out,
                "paths": st.graph.path_count().to_string(),
                "l1_alpha": a.l1_norm(),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(serde_json::json!({
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "seed": net.seed(),
        "spec": {
            "input_dim": net.spec().input_dim,
            "num_classes": net.spec().num_classes,
            "base_width": net.spec().base_width,
            "use_norm": net.spec().use_norm,
        },
        "stages": stages,
        "edges": net.edge_count(),
        "l1_alpha": net.l1_alpha(),
        "fingerprint": net.fingerprint(),
    }))
}

/// Parses `kind:nodes[:params..]` topology shorthands such as `complete:8`,
/// `residual:14:2`, `random:10:0.5`, `er:10:0.3`, `ba:10:2` or `ws:10:4:0.25`.
pub fn parse_topology_shorthand(text: &str) -> Result<(usize, TopologySpec)> {
    let bad = || HarnessError::Config(format!("bad topology spec `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    let n: usize = parts.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let int = |i: usize| parts.get(i).and_then(|s| s.parse::<usize>().ok()).ok_or_else(bad);
    let float = |i: usize| parts.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
    let (spec, arity) = match parts[0] {
        "complete" => (TopologySpec::Complete, 2),
        "residual" => (TopologySpec::Residual { interval: int(2)? }, 3),
        "random" => (TopologySpec::Random { p: float(2)? }, 3),
        "er" => (TopologySpec::Er { p: float(2)? }, 3),
        "ba" => (TopologySpec::Ba { m: int(2)? }, 3),
        "ws" => (TopologySpec::Ws { k: int(2)?, p: float(3)? }, 4),
        _ => return Err(bad()),
    };
    if parts.len() != arity {
        return Err(bad());
    }
    Ok((n, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config_json(dir: &Path, epochs: usize) -> String {
        format!(
            r#"{{
  "arch": {{"stage_sizes": [4, 4], "topologies": [{{"kind": "complete"}}, {{"kind": "residual", "interval": 1}}],
           "base_width": 4, "num_classes": 2}},
  "data": {{"source": {{"kind": "synthetic-spirals", "n": 60, "noise": 0.05}}}},
  "train": {{"epochs": {epochs}, "batch_size": 16, "lr": 0.05, "schedule": {{"kind": "cosine"}}}},
  "output_dir": {dir:?},
  "seed": 5
}}"#
        )
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::from_json(&config_json(Path::new("/a"), 3)).unwrap();
        let b = ExperimentConfig::from_json(&config_json(Path::new("/b"), 3)).unwrap();
        let c = ExperimentConfig::from_json(&config_json(Path::new("/a"), 4)).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.set_seed(6);
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let good = config_json(Path::new("/a"), 1);
        let unknown = good.replacen("\"seed\": 5", "\"seed\": 5, \"extra\": 1", 1);
        assert!(matches!(ExperimentConfig::from_json(&unknown), Err(HarnessError::Config(_))));
        let nested = good.replacen("\"lr\": 0.05", "\"lr\": 0.05, \"seed\": 3", 1);
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let missing = good.replacen("\"seed\": 5", "\"unused\": 5", 1);
        assert!(ExperimentConfig::from_json(&missing).is_err());
    }

    #[test]
    fn config_seed_reaches_trainer() {
        let cfg = ExperimentConfig::from_json(&config_json(Path::new("/a"), 1)).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert!(cfg.arch.use_norm);
        assert_eq!(cfg.data.val_fraction, 0.2);
    }

    #[test]
    fn validation_catches_shape_errors() {
        let mut cfg = ExperimentConfig::from_json(&config_json(Path::new("/a"), 1)).unwrap();
        cfg.arch.topologies.pop();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(HarnessError::Locked(_))));
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn topology_shorthand() {
        assert_eq!(parse_topology_shorthand("residual:14:2").unwrap(), (14, TopologySpec::Residual { interval: 2 }));
        assert_eq!(parse_topology_shorthand("complete:5").unwrap(), (5, TopologySpec::Complete));
        assert_eq!(parse_topology_shorthand("ws:10:4:0.25").unwrap(), (10, TopologySpec::Ws { k: 4, p: 0.25 }));
        for bad in ["", "complete", "complete:5:1", "residual:14", "hex:4", "random:x:0.5"] {
            assert!(parse_topology_shorthand(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn error_kinds() {
        assert_eq!(HarnessError::Locked(PathBuf::new()).kind(), "locked");
        assert_eq!(HarnessError::from(TrainError::Config("x".into())).kind(), "train");
    }
}

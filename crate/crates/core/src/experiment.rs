//! Declarative experiment configuration and the commands behind the CLI.
//!
//! A config is a TOML document with the sections `data`, `model`, `train`,
//! `prune`, `sweep` and `output` plus a top-level `seed` and `profile`.
//! Unknown keys are errors. The `train` table overlays the defaults of the
//! chosen profile.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_blobs, generate_linear, load_checkpoint, load_csv, load_idx, save_checkpoint,
    save_mask, split, write_atomic, Checkpoint, Normalization,
};
use crate::error::Error;
use crate::gates::harden;
use crate::net::{
    accuracy, forward, layer_ranges, mlp_specs, Activation, DatasetBatch, LayerSpec, NetworkParams,
    Targets,
};
use crate::pruning::{
    distribution_report, extract_slab, flops_estimate, magnitude_prune, DistributionReport,
    MagnitudeCriterion, PruneMask, ReportSummary,
};
use crate::reliability::{
    aleatoric_sweep, efficiency, epistemic_sweep, CellStatus, EfficiencyInputs, EfficiencyReport,
    NoiseCase, SweepKind, SweepSetup, UncertaintySweepResult,
};
use crate::rng::derive_seed;
use crate::svgd::{Particle, ParticleEnsemble, TrainConfig, TrainStatus, Trainer};

pub const EXIT_OK: i32 = 0;
/// Invalid config, arguments or input files.
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_SWEEP_FAILED: i32 = 4;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "STEINPRUNE_SEED";

pub const CHECKPOINT_FILE: &str = "checkpoint.dllp";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Library(#[from] Error),
    #[error("training diverged; the last good state and the trace are in {}", .0.display())]
    Diverged(PathBuf),
    #[error("every sweep cell failed")]
    SweepFailed,
}

impl CommandError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CommandError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config { .. } | CommandError::Library(_) => EXIT_INVALID,
            CommandError::Diverged(_) => EXIT_DIVERGED,
            CommandError::SweepFailed => EXIT_SWEEP_FAILED,
        }
    }
}

pub type CommandResult<T> = std::result::Result<T, CommandError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Image-scale defaults: 60 epochs, batch 512, learning rate 0.1 to
    /// 0.001, KL weight 0.1.
    #[default]
    Paper,
    /// Small-data defaults: 40 epochs, batch 64, KL weight 0.001.
    Desk,
}

impl Profile {
    pub fn train_defaults(self) -> TrainConfig {
        match self {
            Profile::Paper => TrainConfig::default(),
            Profile::Desk => TrainConfig {
                epochs: 40,
                batch_size: 64,
                beta_kl: 0.001,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    IdxPair,
    Csv,
    SyntheticBlobs,
    SyntheticLinear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    /// No change for IDX (already in [0, 1]), standardization otherwise.
    #[default]
    Auto,
    Standardize,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// CSV file.
    pub path: Option<PathBuf>,
    pub has_header: bool,
    pub num_classes: Option<usize>,
    /// IDX image and label files.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Distance between class centres in cluster stds.
    pub separation: f64,
    /// Sample count of the linear generator.
    pub samples: usize,
    pub noise_std: f64,
    /// Generator seed; defaults to the experiment seed.
    pub generator_seed: Option<u64>,
    /// Held-out fraction used for evaluation and sweep probes.
    pub holdout: f64,
    pub split_seed: Option<u64>,
    pub normalization: NormalizationKind,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::SyntheticBlobs,
            path: None,
            has_header: false,
            num_classes: None,
            images: None,
            labels: None,
            classes: 2,
            per_class: 500,
            dim: 20,
            separation: 6.0,
            samples: 400,
            noise_std: 0.0,
            generator_seed: None,
            holdout: 0.25,
            split_seed: None,
            normalization: NormalizationKind::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden widths; empty for a single linear layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub particles: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            particles: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    #[default]
    DllpSlab,
    Magnitude,
}

impl PruneMethod {
    pub fn label(self) -> &'static str {
        match self {
            PruneMethod::DllpSlab => "dllp_slab",
            PruneMethod::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub method: PruneMethod,
    pub gate_threshold: Option<f64>,
    pub sparsity: Option<f64>,
    pub threshold: Option<f64>,
    /// Histogram bins of the distribution reports.
    pub bins: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            method: PruneMethod::DllpSlab,
            gate_threshold: None,
            sparsity: None,
            threshold: None,
            bins: 50,
        }
    }
}

/// A validated pruning rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneRequest {
    Slab { gate_threshold: f64 },
    Magnitude(MagnitudeCriterion),
}

impl PruneRequest {
    /// Checks that the thresholds fit the method: the slab rule takes only a
    /// gate threshold, magnitude pruning exactly one of sparsity or
    /// threshold.
    pub fn new(
        method: PruneMethod,
        gate_threshold: Option<f64>,
        sparsity: Option<f64>,
        threshold: Option<f64>,
    ) -> CommandResult<Self> {
        match method {
            PruneMethod::DllpSlab => {
                if sparsity.is_some() || threshold.is_some() {
                    return Err(CommandError::config(
                        "prune",
                        "dllp_slab takes a gate_threshold, not a sparsity or magnitude threshold",
                    ));
                }
                let t = gate_threshold.unwrap_or(0.5);
                if !(t > 0.0 && t < 1.0) {
                    return Err(CommandError::config(
                        "prune.gate_threshold",
                        format!("{t} is outside (0, 1)"),
                    ));
                }
                Ok(PruneRequest::Slab { gate_threshold: t })
            }
            PruneMethod::Magnitude => {
                if gate_threshold.is_some() {
                    return Err(CommandError::config(
                        "prune.gate_threshold",
                        "magnitude pruning has no gates",
                    ));
                }
                match (sparsity, threshold) {
                    (Some(s), None) if (0.0..=1.0).contains(&s) => {
                        Ok(PruneRequest::Magnitude(MagnitudeCriterion::Sparsity(s)))
                    }
                    (Some(s), None) => Err(CommandError::config(
                        "prune.sparsity",
                        format!("{s} is outside [0, 1]"),
                    )),
                    (None, Some(t)) if t >= 0.0 && t.is_finite() => {
                        Ok(PruneRequest::Magnitude(MagnitudeCriterion::Threshold(t)))
                    }
                    (None, Some(t)) => Err(CommandError::config(
                        "prune.threshold",
                        format!("{t} is not >= 0"),
                    )),
                    _ => Err(CommandError::config(
                        "prune",
                        "magnitude pruning needs exactly one of sparsity or threshold",
                    )),
                }
            }
        }
    }

    pub fn method(&self) -> PruneMethod {
        match self {
            PruneRequest::Slab { .. } => PruneMethod::DllpSlab,
            PruneRequest::Magnitude(_) => PruneMethod::Magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Input-noise stds of the aleatoric sweep.
    pub noise_levels: Vec<f64>,
    /// Training-set fractions of the epistemic sweep.
    pub fractions: Vec<f64>,
    pub shuffled_control: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            noise_levels: vec![0.0, 0.1, 0.2, 0.4],
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            shuffled_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            // A tagged enum is replaced whole; merging would mix variants.
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "penalty" => {
                merge_tables(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_toml_str(text: &str) -> CommandResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            CommandError::config("<document>", e.to_string().trim_end())
        })?;
        let profile = match table.get("profile") {
            Some(v) => Profile::deserialize(v.clone())
                .map_err(|e| CommandError::config("profile", e.to_string().trim_end()))?,
            None => Profile::default(),
        };
        let user_train = match table.remove("train") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(CommandError::config("train", "expected a table")),
        };
        if user_train.contains_key("seed") {
            return Err(CommandError::config(
                "train.seed",
                "set the top-level seed instead",
            ));
        }
        let mut train =
            toml::Table::try_from(profile.train_defaults()).expect("train defaults serialize");
        merge_tables(&mut train, user_train);
        table.insert("train".into(), toml::Value::Table(train));
        let mut config: ExperimentConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let path = e.path().to_string();
                CommandError::config(path, e.into_inner().to_string().trim_end())
            })?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CommandResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CommandError::config("<config>", format!("cannot read {}: {e}", path.display()))
        })?;
        let mut config = ExperimentConfig::from_toml_str(&text)?;
        if let Ok(value) = std::env::var(SEED_ENV) {
            config.apply_seed_override(&value)?;
        }
        Ok(config)
    }

    /// Replaces the seed with a value from the environment.
    pub fn apply_seed_override(&mut self, value: &str) -> CommandResult<()> {
        let seed: u64 = value.trim().parse().map_err(|_| {
            CommandError::config(
                SEED_ENV,
                format!("{value:?} is not an unsigned 64-bit integer"),
            )
        })?;
        self.seed = seed;
        self.train.seed = seed;
        Ok(())
    }

    pub fn validate(&self) -> CommandResult<()> {
        self.train
            .validate()
            .map_err(|e| CommandError::config("train", e.to_string()))?;
        if self.train.seed != self.seed {
            return Err(CommandError::config(
                "train.seed",
                "must equal the top-level seed",
            ));
        }
        let d = &self.data;
        let need_file = |key: &str, p: &Option<PathBuf>| -> CommandResult<()> {
            match p {
                None => Err(CommandError::config(
                    format!("data.{key}"),
                    "required for this data kind",
                )),
                Some(p) if !p.is_file() => Err(CommandError::config(
                    format!("data.{key}"),
                    format!("{} does not exist", p.display()),
                )),
                Some(_) => Ok(()),
            }
        };
        match d.kind {
            DataKind::IdxPair => {
                need_file("images", &d.images)?;
                need_file("labels", &d.labels)?;
            }
            DataKind::Csv => need_file("path", &d.path)?,
            DataKind::SyntheticBlobs => {
                if d.classes < 2 {
                    return Err(CommandError::config("data.classes", "at least 2 classes"));
                }
                if d.per_class == 0 || d.dim == 0 {
                    return Err(CommandError::config(
                        "data",
                        "per_class and dim must be positive",
                    ));
                }
                if d.dim + 1 < d.classes {
                    return Err(CommandError::config(
                        "data.dim",
                        "a simplex of the classes needs dim >= classes - 1",
                    ));
                }
                if !(d.separation >= 0.0 && d.separation.is_finite()) {
                    return Err(CommandError::config(
                        "data.separation",
                        "must be a finite value >= 0",
                    ));
                }
            }
            DataKind::SyntheticLinear => {
                if d.samples == 0 || d.dim == 0 {
                    return Err(CommandError::config(
                        "data",
                        "samples and dim must be positive",
                    ));
                }
                if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
                    return Err(CommandError::config(
                        "data.noise_std",
                        "must be a finite value >= 0",
                    ));
                }
            }
        }
        if !(d.holdout > 0.0 && d.holdout < 1.0) {
            return Err(CommandError::config(
                "data.holdout",
                format!("{} is outside (0, 1)", d.holdout),
            ));
        }
        if self.model.particles < 2 {
            return Err(CommandError::config(
                "model.particles",
                "an ensemble needs at least 2 particles",
            ));
        }
        if self.model.hidden.contains(&0) {
            return Err(CommandError::config(
                "model.hidden",
                "widths must be positive",
            ));
        }
        if self.model.activation == Activation::SoftmaxOut {
            return Err(CommandError::config(
                "model.activation",
                "softmax_out is reserved for the output layer",
            ));
        }
        let p = &self.prune;
        PruneRequest::new(p.method, p.gate_threshold, p.sparsity, p.threshold)?;
        if p.bins < 2 {
            return Err(CommandError::config("prune.bins", "at least 2 bins"));
        }
        if let Some(s) = &self.sweep {
            if s.noise_levels.len() < 3 || !s.noise_levels.contains(&0.0) {
                return Err(CommandError::config(
                    "sweep.noise_levels",
                    "at least 3 levels including 0",
                ));
            }
            if s.noise_levels.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(CommandError::config(
                    "sweep.noise_levels",
                    "levels must be finite stds >= 0",
                ));
            }
            if s.fractions.len() < 3 || s.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(CommandError::config(
                    "sweep.fractions",
                    "at least 3 fractions in (0, 1]",
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted, so key order in the source
    /// document does not matter.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("config serializes")
            .to_string()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", &self.hash()[..12], self.seed)
    }

    pub fn from_canonical_json(text: &str) -> CommandResult<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| CommandError::config("<checkpoint config>", e.to_string()))?;
        Ok(config)
    }
}

/// Train and held-out splits, normalized with statistics of the train split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: DatasetBatch,
    pub test: DatasetBatch,
    pub normalization: Normalization,
}

pub fn load_source(config: &ExperimentConfig) -> CommandResult<DatasetBatch> {
    let d = &config.data;
    let seed = d.generator_seed.unwrap_or(config.seed);
    let path = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
    Ok(match d.kind {
        DataKind::IdxPair => load_idx(&path(&d.images), &path(&d.labels))?,
        DataKind::Csv => load_csv(&path(&d.path), d.has_header, d.num_classes)?,
        DataKind::SyntheticBlobs => {
            generate_blobs(d.classes, d.per_class, d.dim, d.separation, seed)?
        }
        DataKind::SyntheticLinear => generate_linear(d.samples, d.dim, d.noise_std, seed)?,
    })
}

pub fn prepare_data(config: &ExperimentConfig) -> CommandResult<PreparedData> {
    let raw = load_source(config)?;
    let split_seed = config
        .data
        .split_seed
        .unwrap_or_else(|| derive_seed(config.seed, 1));
    let (train, test) = split(&raw, config.data.holdout, split_seed)?;
    let normalization = match (config.data.normalization, config.data.kind) {
        (NormalizationKind::None, _) | (NormalizationKind::Auto, DataKind::IdxPair) => {
            Normalization::identity(raw.dim())
        }
        _ => Normalization::standardize(&train),
    };
    Ok(PreparedData {
        train: normalization.apply(&train)?,
        test: normalization.apply(&test)?,
        normalization,
    })
}

/// Network for the data: the configured hidden stack and one output per
/// class, or a single output for regression targets.
pub fn network_specs(config: &ExperimentConfig, data: &DatasetBatch) -> Vec<LayerSpec> {
    let (outputs, output_activation) = match data.num_classes() {
        Some(c) => (c, Activation::SoftmaxOut),
        None => (1, Activation::Identity),
    };
    mlp_specs(
        data.dim(),
        &config.model.hidden,
        outputs,
        config.model.activation,
        output_activation,
    )
}

/// Held-out quality: accuracy for classes, RMSE for regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: &'static str,
    pub value: f64,
}

pub fn evaluate(
    params: &NetworkParams,
    gates: Option<&[f64]>,
    data: &DatasetBatch,
) -> CommandResult<Evaluation> {
    let out = forward(params, gates, data)?;
    Ok(match data.targets() {
        Targets::Classes { labels, .. } => Evaluation {
            metric: "accuracy",
            value: accuracy(&out, labels)?,
        },
        Targets::Values(y) => {
            let mse = out
                .values()
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / y.len() as f64;
            Evaluation {
                metric: "rmse",
                value: mse.sqrt(),
            }
        }
    })
}

/// Gates of the unpruned particle: inclusion probabilities when gates were
/// learned, none otherwise.
pub fn unpruned_gates(config: &ExperimentConfig, particle: &Particle) -> Option<Vec<f64>> {
    config.train.learn_gates.then(|| particle.gates.probs())
}

/// Weights as deployed: gated-out entries are zero.
pub fn effective_weights(
    config: &ExperimentConfig,
    particle: &Particle,
    mask: Option<&PruneMask>,
) -> Vec<f64> {
    let flat = particle.params.flatten();
    match (mask, config.train.learn_gates) {
        (Some(m), _) => flat
            .iter()
            .zip(m.keep())
            .map(|(w, &k)| if k { *w } else { 0.0 })
            .collect(),
        (None, true) => flat
            .iter()
            .zip(particle.gates.probs())
            .map(|(w, p)| if harden(p) == 1 { *w } else { 0.0 })
            .collect(),
        (None, false) => flat,
    }
}

/// Which parameters survive: the mask if present, else hardened gates.
pub fn kept_flags(
    config: &ExperimentConfig,
    particle: &Particle,
    mask: Option<&PruneMask>,
) -> Vec<bool> {
    match (mask, config.train.learn_gates) {
        (Some(m), _) => m.keep().to_vec(),
        (None, true) => particle
            .gates
            .probs()
            .iter()
            .map(|&p| harden(p) == 1)
            .collect(),
        (None, false) => vec![true; particle.params.len()],
    }
}

/// One metric value of a run, as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub config_hash: String,
    pub command: String,
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    pub wall_clock_s: f64,
}

/// Collects records and appends them to a JSONL file in one atomic write.
pub struct RecordSink {
    run_id: String,
    config_hash: String,
    command: String,
    start: Instant,
    records: Vec<ResultRecord>,
}

impl RecordSink {
    pub fn new(config: &ExperimentConfig, command: &str) -> Self {
        RecordSink {
            run_id: config.run_id(),
            config_hash: config.hash(),
            command: command.into(),
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    /// Non-finite values are skipped; JSON cannot carry them.
    pub fn push(&mut self, metric: &str, value: f64, step: Option<u64>, level: Option<f64>) {
        if !value.is_finite() {
            return;
        }
        self.records.push(ResultRecord {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            command: self.command.clone(),
            metric: metric.into(),
            value,
            step,
            level,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        });
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn append_to(&self, path: &Path) -> CommandResult<()> {
        let mut text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::Io(e).into()),
        };
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("records serialize"));
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

/// Reads a JSONL record file.
pub fn read_records(path: &Path) -> CommandResult<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(Error::Io)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| CommandError::config(path.display().to_string(), e.to_string()))
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> CommandResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CommandResult<()> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize") + "\n";
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation; resumable.
    pub max_epochs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub config_hash: String,
    pub status: TrainStatus,
    pub epochs_completed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub test_metric: &'static str,
    /// Particle 0 with hardened gates on the held-out split.
    pub test_value: f64,
    pub sparsity: f64,
    pub mean_gate_prob: f64,
    pub d: f64,
    pub lambda: f64,
    pub checkpoint: PathBuf,
}

/// Trains an ensemble and writes `checkpoint.dllp`, `trace.jsonl` and
/// `train_summary.json` to the output directory, appending per-epoch
/// records to `records.jsonl`.
pub fn cmd_train(config: &ExperimentConfig, options: &TrainOptions) -> CommandResult<TrainSummary> {
    let data = prepare_data(config)?;
    let dir = config.output.dir.clone();
    ensure_dir(&dir)?;
    let mut trainer = match &options.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let stored = ExperimentConfig::from_canonical_json(&ck.config_text)?;
            if stored.hash() != config.hash() {
                return Err(CommandError::config(
                    "--resume",
                    "the checkpoint was written under a different config",
                ));
            }
            let progress = ck.progress.ok_or_else(|| {
                CommandError::config(
                    "--resume",
                    "the checkpoint has no training progress to resume",
                )
            })?;
            Trainer::resume(ck.ensemble, progress, &data.train, config.train.clone())?
        }
        None => {
            let specs = network_specs(config, &data.train);
            let ensemble = ParticleEnsemble::init(&specs, config.model.particles, &config.train)?;
            Trainer::new(ensemble, &data.train, config.train.clone())?
        }
    };
    let status = trainer.advance(options.max_epochs);
    let outcome = trainer.into_outcome(status);

    let mut sink = RecordSink::new(config, "train");
    for r in &outcome.trace.epochs {
        let step = Some(r.epoch);
        sink.push("loss", r.loss, step, None);
        sink.push("kl_term", r.kl_term, step, None);
        sink.push("mean_gate_prob", r.mean_gate_prob, step, None);
        sink.push("d", r.d, step, None);
        sink.push("lambda", r.lambda, step, None);
        sink.push("train_accuracy", r.accuracy, step, None);
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            ensemble: outcome.ensemble.clone(),
            progress: Some(outcome.progress.clone()),
            normalization: Some(data.normalization.clone()),
            config_text: config.canonical_json(),
            mask: None,
        },
    )?;
    write_atomic(
        &dir.join("trace.jsonl"),
        outcome.trace.to_jsonl().as_bytes(),
    )?;

    let p0 = &outcome.ensemble.particles()[0];
    let hard = p0.gates.hardened();
    let eval = evaluate(&p0.params, Some(&hard), &data.test)?;
    let keep = kept_flags(config, p0, None);
    let sparsity = keep.iter().filter(|k| !**k).count() as f64 / keep.len() as f64;
    let final_step = Some(outcome.progress.epoch);
    sink.push(
        &format!("test_{}", eval.metric),
        eval.value,
        final_step,
        None,
    );
    sink.push("sparsity", sparsity, final_step, None);
    sink.append_to(&dir.join(RECORDS_FILE))?;

    let summary = TrainSummary {
        run_id: config.run_id(),
        config_hash: config.hash(),
        status,
        epochs_completed: outcome.progress.epoch,
        steps: outcome.progress.step,
        final_loss: outcome.trace.epochs.last().map(|r| r.loss),
        test_metric: eval.metric,
        test_value: eval.value,
        sparsity,
        mean_gate_prob: p0.gates.mean_prob(),
        d: p0.noise.d,
        lambda: p0.noise.lambda,
        checkpoint,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    if status == TrainStatus::Diverged {
        return Err(CommandError::Diverged(dir));
    }
    Ok(summary)
}

/// Distribution report of one slice of weights, or `None` when fewer than
/// two values survive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAnalysis {
    /// Layer index, or `None` for the whole network.
    pub layer: Option<usize>,
    pub weights: usize,
    pub kept: usize,
    /// Surviving weights only.
    pub kept_report: Option<ReportSummary>,
    /// All weights as deployed, pruned entries at zero.
    pub effective_report: Option<ReportSummary>,
    /// Effective near-zero bin density above the Gaussian-fit prediction.
    pub spike_at_zero: Option<bool>,
}

fn report(values: &[f64], bins: usize) -> Option<DistributionReport> {
    (values.len() >= 2)
        .then(|| distribution_report(values, bins).ok())
        .flatten()
}

/// Kept and effective reports for each layer's weights (biases excluded)
/// and for the whole network.
pub fn analyze_particle(
    config: &ExperimentConfig,
    particle: &Particle,
    mask: Option<&PruneMask>,
    bins: usize,
) -> (Vec<LayerAnalysis>, Vec<(Option<usize>, DistributionReport)>) {
    let flat = particle.params.flatten();
    let keep = kept_flags(config, particle, mask);
    let effective = effective_weights(config, particle, mask);
    let ranges = layer_ranges(particle.params.specs());
    let mut slices: Vec<(Option<usize>, Vec<usize>)> = ranges
        .iter()
        .enumerate()
        .map(|(i, r)| (Some(i), r.weights.clone().collect()))
        .collect();
    slices.push((
        None,
        ranges.iter().flat_map(|r| r.weights.clone()).collect(),
    ));
    let mut out = Vec::new();
    let mut kept_reports = Vec::new();
    for (layer, idx) in slices {
        let kept: Vec<f64> = idx.iter().filter(|&&i| keep[i]).map(|&i| flat[i]).collect();
        let eff: Vec<f64> = idx.iter().map(|&i| effective[i]).collect();
        let kept_report = report(&kept, bins);
        let eff_report = report(&eff, bins);
        out.push(LayerAnalysis {
            layer,
            weights: idx.len(),
            kept: kept.len(),
            kept_report: kept_report.as_ref().map(|r| r.summary()),
            spike_at_zero: eff_report
                .as_ref()
                .map(|r| r.near_zero_density > r.near_zero_gaussian),
            effective_report: eff_report.as_ref().map(|r| r.summary()),
        });
        if let Some(r) = kept_report {
            kept_reports.push((layer, r));
        }
    }
    (out, kept_reports)
}

fn hist_name(prefix: &str, layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!("{prefix}_layer{i}_hist.csv"),
        None => format!("{prefix}_all_hist.csv"),
    }
}

/// Left edge, right edge and density per bin.
pub fn histogram_csv(report: &DistributionReport) -> String {
    let mut out = String::from("left,right,density\n");
    for (i, d) in report.densities.iter().enumerate() {
        out.push_str(&format!(
            "{:e},{:e},{:e}\n",
            report.edges[i],
            report.edges[i + 1],
            d
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneSummary {
    pub run_id: String,
    pub method: PruneMethod,
    pub sparsity: f64,
    pub kept: usize,
    pub parameters: usize,
    /// Largest dropped magnitude, for magnitude pruning.
    pub delta: Option<f64>,
    pub macs: u64,
    pub dense_macs: u64,
    pub test_metric: &'static str,
    pub unpruned_value: f64,
    pub pruned_value: f64,
    pub layers: Vec<LayerAnalysis>,
    pub mask: PathBuf,
    pub checkpoint: PathBuf,
}

/// Prunes particle 0 of a trained checkpoint. Writes the mask, the pruned
/// checkpoint, histogram CSVs and a JSON summary next to the checkpoint
/// unless `out_dir` is given.
pub fn cmd_prune(
    checkpoint: &Path,
    request: PruneRequest,
    bins: usize,
    out_dir: Option<&Path>,
) -> CommandResult<PruneSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let config = ExperimentConfig::from_canonical_json(&ck.config_text)?;
    let data = prepare_data(&config)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    ensure_dir(&dir)?;
    let p0 = &ck.ensemble.particles()[0];
    let (mask, pruned, delta) = match request {
        PruneRequest::Slab { gate_threshold } => {
            let (mask, pruned) = extract_slab(p0, gate_threshold)?;
            (mask, pruned, None)
        }
        PruneRequest::Magnitude(criterion) => {
            let m = magnitude_prune(&p0.params.flatten(), criterion)?;
            let pruned = m.mask.apply(&p0.params)?;
            (m.mask, pruned, Some(m.delta))
        }
    };
    let method = request.method();
    let label = method.label();
    let unpruned = evaluate(
        &p0.params,
        unpruned_gates(&config, p0).as_deref(),
        &data.test,
    )?;
    let after = evaluate(&pruned, None, &data.test)?;
    let macs = flops_estimate(ck.ensemble.specs(), &mask)?;
    let (layers, reports) = analyze_particle(&config, p0, Some(&mask), bins);
    for (layer, r) in &reports {
        write_atomic(
            &dir.join(hist_name(label, *layer)),
            histogram_csv(r).as_bytes(),
        )?;
    }

    let mask_path = dir.join(format!("{label}_mask.bin"));
    save_mask(&mask_path, &mask)?;
    let mut ensemble = ck.ensemble.clone();
    ensemble.particles_mut()[0].params = pruned;
    let pruned_path = dir.join(format!("{label}_pruned.dllp"));
    save_checkpoint(
        &pruned_path,
        &Checkpoint {
            ensemble,
            progress: None,
            normalization: ck.normalization.clone(),
            config_text: ck.config_text.clone(),
            mask: Some(mask.clone()),
        },
    )?;

    let mut sink = RecordSink::new(&config, &format!("prune:{label}"));
    sink.push("sparsity", mask.sparsity(), None, None);
    sink.push("macs", macs.macs as f64, None, None);
    sink.push(
        &format!("unpruned_{}", unpruned.metric),
        unpruned.value,
        None,
        None,
    );
    sink.push(&format!("pruned_{}", after.metric), after.value, None, None);
    if let Some(d) = delta {
        sink.push("delta", d, None, None);
    }
    for l in &layers {
        if let (Some(i), Some(r)) = (l.layer, &l.kept_report) {
            sink.push(
                &format!("layer{i}_excess_kurtosis"),
                r.excess_kurtosis,
                None,
                None,
            );
            sink.push(
                &format!("layer{i}_bimodal"),
                f64::from(u8::from(r.bimodality_flag)),
                None,
                None,
            );
        }
    }
    sink.append_to(&dir.join(RECORDS_FILE))?;

    let summary = PruneSummary {
        run_id: config.run_id(),
        method,
        sparsity: mask.sparsity(),
        kept: mask.kept(),
        parameters: mask.len(),
        delta,
        macs: macs.macs,
        dense_macs: macs.dense_macs,
        test_metric: after.metric,
        unpruned_value: unpruned.value,
        pruned_value: after.value,
        layers,
        mask: mask_path,
        checkpoint: pruned_path,
    };
    write_json(&dir.join(format!("{label}_summary.json")), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSummary {
    pub run_id: String,
    pub masked: bool,
    pub layers: Vec<LayerAnalysis>,
}

/// Per-layer and whole-network reports of particle 0, written as
/// `analysis.json` and `analysis_*_hist.csv`.
pub fn cmd_analyze(
    checkpoint: &Path,
    bins: usize,
    out_dir: Option<&Path>,
) -> CommandResult<AnalysisSummary> {
    if bins < 2 {
        return Err(CommandError::config("--bins", "at least 2 bins"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let config = ExperimentConfig::from_canonical_json(&ck.config_text)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    ensure_dir(&dir)?;
    let p0 = &ck.ensemble.particles()[0];
    let (layers, reports) = analyze_particle(&config, p0, ck.mask.as_ref(), bins);
    for (layer, r) in &reports {
        write_atomic(
            &dir.join(hist_name("analysis", *layer)),
            histogram_csv(r).as_bytes(),
        )?;
    }
    let summary = AnalysisSummary {
        run_id: config.run_id(),
        masked: ck.mask.is_some(),
        layers,
    };
    write_json(&dir.join("analysis.json"), &summary)?;
    Ok(summary)
}

/// Which weights a histogram export covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistView {
    Kept,
    Effective,
}

/// Histogram CSV of one layer (or the whole network) of particle 0.
pub fn cmd_export_hist(
    checkpoint: &Path,
    layer: Option<usize>,
    bins: usize,
    view: HistView,
    out: &Path,
) -> CommandResult<DistributionReport> {
    if bins < 2 {
        return Err(CommandError::config("--bins", "at least 2 bins"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let config = ExperimentConfig::from_canonical_json(&ck.config_text)?;
    let p0 = &ck.ensemble.particles()[0];
    let ranges = layer_ranges(ck.ensemble.specs());
    let idx: Vec<usize> = match layer {
        Some(i) if i >= ranges.len() => {
            return Err(CommandError::config(
                "--layer",
                format!("the network has {} layers", ranges.len()),
            ))
        }
        Some(i) => ranges[i].weights.clone().collect(),
        None => ranges.iter().flat_map(|r| r.weights.clone()).collect(),
    };
    let values: Vec<f64> = match view {
        HistView::Kept => {
            let keep = kept_flags(&config, p0, ck.mask.as_ref());
            let flat = p0.params.flatten();
            idx.iter().filter(|&&i| keep[i]).map(|&i| flat[i]).collect()
        }
        HistView::Effective => {
            let eff = effective_weights(&config, p0, ck.mask.as_ref());
            idx.iter().map(|&i| eff[i]).collect()
        }
    };
    let r = report(&values, bins)
        .ok_or_else(|| CommandError::config("--layer", "fewer than 2 weights to histogram"))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomic(out, histogram_csv(&r).as_bytes())?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub run_id: String,
    pub kind: SweepKind,
    pub levels: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub rank_correlation: Option<f64>,
    pub control: Option<f64>,
    pub failed_cells: usize,
}

/// Runs a sweep from the config's `sweep` section. Writes
/// `sweep_<kind>.jsonl` (one line per cell), `sweep_<kind>.csv`, and
/// per-cell records.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    kind: SweepKind,
) -> CommandResult<(SweepSummary, UncertaintySweepResult)> {
    let section = config
        .sweep
        .as_ref()
        .ok_or_else(|| CommandError::config("sweep", "the config has no sweep section"))?;
    let data = prepare_data(config)?;
    let dir = config.output.dir.clone();
    ensure_dir(&dir)?;
    let setup = SweepSetup {
        specs: network_specs(config, &data.train),
        data: data.train,
        probe: Some(data.test),
        particles: config.model.particles,
        train: config.train.clone(),
        base_seed: config.seed,
    };
    let result = match kind {
        SweepKind::Aleatoric => {
            aleatoric_sweep(&setup, &section.noise_levels, section.shuffled_control)?
        }
        SweepKind::Epistemic => epistemic_sweep(&setup, &section.fractions)?,
    };
    let name = match kind {
        SweepKind::Aleatoric => "aleatoric",
        SweepKind::Epistemic => "epistemic",
    };
    write_atomic(
        &dir.join(format!("sweep_{name}.jsonl")),
        result.to_jsonl().as_bytes(),
    )?;
    write_atomic(
        &dir.join(format!("sweep_{name}.csv")),
        result.to_csv().as_bytes(),
    )?;

    let mut sink = RecordSink::new(config, &format!("sweep:{name}"));
    for c in result.cells.iter().chain(&result.control) {
        let step = Some(c.index as u64);
        if let Some(v) = c.aleatoric {
            sink.push("aleatoric", v, step, Some(c.level));
        }
        if let Some(v) = c.epistemic {
            sink.push("epistemic", v, step, Some(c.level));
        }
        if let Some(v) = c.prediction_variance {
            sink.push("prediction_variance", v, step, Some(c.level));
        }
    }
    sink.append_to(&dir.join(RECORDS_FILE))?;

    let values = match kind {
        SweepKind::Aleatoric => result.aleatoric(),
        SweepKind::Epistemic => result.epistemic(),
    };
    let summary = SweepSummary {
        run_id: config.run_id(),
        kind,
        levels: result.levels(),
        values,
        rank_correlation: result.rank_correlation(),
        control: result.control.as_ref().and_then(|c| c.aleatoric),
        failed_cells: result
            .cells
            .iter()
            .filter(|c| c.status == CellStatus::Failed)
            .count(),
    };
    write_json(&dir.join(format!("sweep_{name}_summary.json")), &summary)?;
    if summary.failed_cells == result.cells.len() {
        return Err(CommandError::SweepFailed);
    }
    Ok((summary, result))
}

/// Efficiency report for one noise case.
pub fn cmd_crlb(case: NoiseCase, inputs: &EfficiencyInputs) -> CommandResult<EfficiencyReport> {
    efficiency(case, inputs).map_err(|e| match e {
        Error::Config(m) | Error::Domain(m) => CommandError::config("crlb", m),
        other => other.into(),
    })
}

/// Metric values of a record file keyed by (metric, step, level), with
/// wall-clock fields dropped. Equal maps mean reproduced runs.
pub fn metric_values(records: &[ResultRecord]) -> BTreeMap<String, u64> {
    records
        .iter()
        .map(|r| {
            let key = format!(
                "{}|{}|{:?}|{:?}",
                r.command,
                r.metric,
                r.step,
                r.level.map(f64::to_bits)
            );
            (key, r.value.to_bits())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model.hidden, vec![128, 128]);
    }

    #[test]
    fn desk_profile_overlay() {
        let c = ExperimentConfig::from_toml_str(
            "profile = \"desk\"\n[train]\nepochs = 5\n[train.learning_rate]\nend = 0.01\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.learning_rate.start, 0.1);
        assert_eq!(c.train.learning_rate.end, 0.01);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        match ExperimentConfig::from_toml_str("[train]\nepochz = 5\n") {
            Err(CommandError::Config { path, .. }) => assert_eq!(path, "train.epochz"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml_str("[model]\nparticles = \"two\"\n") {
            Err(CommandError::Config { path, .. }) => assert_eq!(path, "model.particles"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("[train]\nseed = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\nkind = \"csv\"\n").is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ExperimentConfig::from_toml_str("seed = 4\n[train]\nepochs = 3\nbeta_kl = 0.2\n")
            .unwrap();
        let b = ExperimentConfig::from_toml_str(
            "[train]\nbeta_kl = 0.2\nepochs = 3\n\n[model]\nparticles = 2\n",
        )
        .unwrap();
        assert_ne!(a.hash(), b.hash());
        let b = ExperimentConfig::from_toml_str(
            "[train]\nbeta_kl = 0.2\nepochs = 3\n[model]\nparticles = 2\n",
        )
        .unwrap();
        let mut b2 = b.clone();
        b2.apply_seed_override("4").unwrap();
        assert_eq!(a.hash(), b2.hash());
        assert_eq!(
            ExperimentConfig::from_canonical_json(&a.canonical_json()).unwrap(),
            a
        );
    }

    #[test]
    fn prune_request_consistency() {
        assert!(PruneRequest::new(PruneMethod::DllpSlab, None, Some(0.5), None).is_err());
        assert!(PruneRequest::new(PruneMethod::Magnitude, None, None, None).is_err());
        assert!(PruneRequest::new(PruneMethod::Magnitude, None, Some(0.5), Some(0.1)).is_err());
        assert!(PruneRequest::new(PruneMethod::Magnitude, Some(0.5), Some(0.5), None).is_err());
        assert_eq!(
            PruneRequest::new(PruneMethod::DllpSlab, None, None, None).unwrap(),
            PruneRequest::Slab {
                gate_threshold: 0.5
            }
        );
    }

    #[test]
    fn bad_seed_override() {
        let mut c = ExperimentConfig::from_toml_str("").unwrap();
        assert!(c.apply_seed_override("-1").is_err());
        c.apply_seed_override(" 18446744073709551615 ").unwrap();
        assert_eq!(c.train.seed, u64::MAX);
    }
}

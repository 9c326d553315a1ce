//! Command-line front end: `simulate`, `train`, `eval`, `sparsemax` and the
//! `experiment` chain that runs all of them.
//!
//! Every command reads the same [`ExperimentConfig`] JSON (all sections
//! optional) and applies command-line overrides on top.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Baseline, ComparisonRow, EvalReport, SelectionStats, TrialCounts};
use crate::model::{load_checkpoint, CheckpointMeta, FusionModel, ModelConfig};
use crate::normalize::{sparsemax, Normalizer};
use crate::simulator::{self, ChannelCount, Dataset, SimConfig};
use crate::training::{self, EpochRecord, TrainConfig};

pub const LOG_ENV: &str = "ADHOC_FUSION_LOG";

// ---------------------------------------------------------------------------
// Configuration

fn default_test_speakers() -> u32 {
    20
}
fn default_test_utterances() -> u32 {
    10
}
fn default_test_channels() -> Vec<u16> {
    vec![20, 30, 40]
}
fn default_test_seed_offset() -> u64 {
    1000
}
fn default_modes() -> Vec<Normalizer> {
    vec![Normalizer::Sparsemax, Normalizer::Softmax]
}

/// Held-out evaluation data, derived from the training simulation so the
/// acoustics match: same rooms and noise model, new speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSplit {
    #[serde(default = "default_test_speakers")]
    pub speakers: u32,
    #[serde(default = "default_test_utterances")]
    pub utterances_per_speaker: u32,
    /// One test set per channel count.
    #[serde(default = "default_test_channels")]
    pub channels: Vec<u16>,
    /// Added to the training seed, so test speakers are unseen.
    #[serde(default = "default_test_seed_offset")]
    pub seed_offset: u64,
}

impl Default for TestSplit {
    fn default() -> Self {
        Self {
            speakers: default_test_speakers(),
            utterances_per_speaker: default_test_utterances(),
            channels: default_test_channels(),
            seed_offset: default_test_seed_offset(),
        }
    }
}

/// Optional file locations; command-line flags win over these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default)]
    pub test: TestSplit,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Seed of the model initialization.
    #[serde(default)]
    pub model_seed: u64,
    /// Normalizers trained and compared by `experiment`.
    #[serde(default = "default_modes")]
    pub modes: Vec<Normalizer>,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulation: SimConfig::default(),
            test: TestSplit::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            model_seed: 0,
            modes: default_modes(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.model.d_in != self.simulation.d_in {
            return Err(Error::Config(format!(
                "model.d_in {} differs from simulation.d_in {}",
                self.model.d_in, self.simulation.d_in
            )));
        }
        if self.test.channels.is_empty() || self.test.channels.contains(&0) {
            return Err(Error::Config("test.channels needs positive channel counts".into()));
        }
        if self.test.speakers < 2 || self.test.utterances_per_speaker < 1 {
            return Err(Error::Config(
                "test split needs at least two speakers with one utterance".into(),
            ));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must name at least one normalizer".into()));
        }
        Ok(())
    }

    /// One `--seed` drives data, initialization and batch sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.simulation.seed = seed;
        self.training.seed = seed;
        self.model_seed = seed;
    }

    /// Simulation settings of the held-out set with `channels` microphones.
    pub fn test_simulation(&self, channels: u16) -> SimConfig {
        SimConfig {
            speakers: self.test.speakers,
            utterances_per_speaker: self.test.utterances_per_speaker,
            channels: ChannelCount::Fixed(channels),
            seed: self.simulation.seed.wrapping_add(self.test.seed_offset),
            ..self.simulation.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "adhoc-fusion", version, about = "Multi-channel speaker embedding fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Caps worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Softmax,
    Sparsemax,
}

impl From<ModeArg> for Normalizer {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Softmax => Normalizer::Softmax,
            ModeArg::Sparsemax => Normalizer::Sparsemax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Fusion,
    OracleOneBest,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Fusion => Baseline::Fusion,
            BaselineArg::OracleOneBest => Baseline::OracleOneBest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-channel embedding dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// `train` uses the simulation section; `test` the held-out split.
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Channel count `N` or range `LO-HI`, overriding the config.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the fusion head on a dataset file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint, keeping its epoch counter.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Line-delimited JSON training log (default: `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Checkpoint path (default: `fusion-<mode>.afck`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every trial of a dataset and report the EER.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fusion")]
        baseline: BaselineArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the sparsemax of comma-separated values.
    Sparsemax {
        #[command(flatten)]
        common: Common,
        #[arg(allow_hyphen_values = true)]
        values: String,
    },
    /// Simulate, train every mode, and evaluate against the oracle.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Output directory for datasets, checkpoints, logs and reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sparsemax { common, .. }
            | Command::Experiment { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(mode) = common.mode {
        cfg.model.mode = mode.into();
        cfg.modes = vec![mode.into()];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `20` or `20-40`.
pub fn parse_channels(text: &str) -> Result<ChannelCount> {
    let bad = || Error::Usage(format!("cannot parse channel count {text:?}"));
    match text.split_once('-') {
        None => Ok(ChannelCount::Fixed(text.trim().parse().map_err(|_| bad())?)),
        Some((lo, hi)) => Ok(ChannelCount::Range([
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
        ])),
    }
}

/// Prints a sparsemax vector with at most ten decimals and no trailing zeros.
pub fn format_values(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| {
            let s = format!("{v:.10}");
            let s = s.trim_end_matches('0').trim_end_matches('.');
            if s == "-0" { "0".to_string() } else { s.to_string() }
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Usage(format!("not a finite number: {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Usage("no values given".into()));
    }
    Ok(values)
}

// ---------------------------------------------------------------------------
// Commands

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    path.cloned()
        .ok_or_else(|| Error::Usage(format!("missing {what} path")))
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Usage(format!("{} is not a readable file", path.display())));
    }
    Ok(())
}

fn check_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("directory {} does not exist", dir.display())));
        }
    }
    if path.is_dir() {
        return Err(Error::Usage(format!("{} is a directory", path.display())));
    }
    Ok(())
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written artifact under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn save_model(model: &FusionModel, epoch: usize, path: &Path) -> Result<()> {
    let bytes = crate::model::encode_checkpoint(model, CheckpointMeta { epoch })?;
    write_atomic(path, &bytes)
}

pub fn default_checkpoint_name(mode: Normalizer) -> String {
    format!("fusion-{mode}.afck")
}

fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".log.jsonl");
    PathBuf::from(p)
}

pub struct SimulateSummary {
    pub speakers: usize,
    pub utterances: usize,
    pub channels: (usize, usize),
    pub bytes: u64,
}

pub fn cmd_simulate(cfg: &SimConfig, out: &Path) -> Result<SimulateSummary> {
    check_output(out)?;
    let ds = simulator::generate(cfg)?;
    let bytes = simulator::encode_dataset(&ds)?;
    write_atomic(out, &bytes)?;
    Ok(SimulateSummary {
        speakers: ds.num_speakers(),
        utterances: ds.utterances.len(),
        channels: ds.channel_bounds(),
        bytes: bytes.len() as u64,
    })
}

/// Trains on `data`, checkpointing after every epoch. On divergence the
/// last good model is written to `out` and the error is returned.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<&Path>,
    out: &Path,
    log: &Path,
) -> Result<(FusionModel, Vec<EpochRecord>)> {
    check_output(out)?;
    check_output(log)?;
    let (model, start) = match resume {
        Some(path) => {
            let (m, meta) = load_checkpoint(path)?;
            (m, meta.epoch)
        }
        None => (FusionModel::init(cfg.model.clone(), cfg.model_seed)?, 0),
    };
    if model.config.d_in != data.config.d_in {
        return Err(Error::Config(format!(
            "model expects {}-dim embeddings, dataset has {}",
            model.config.d_in, data.config.d_in
        )));
    }
    let mut log_file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(log)?
    } else {
        fs::File::create(log)?
    };
    let result = training::train(model, data, &cfg.training, start, |record, model| {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        log_file.write_all(line.as_bytes())?;
        log_file.flush()?;
        save_model(model, record.epoch + 1, out)
    });
    match result {
        Ok(outcome) => {
            // Zero epochs still leave a checkpoint behind.
            if outcome.history.is_empty() {
                save_model(&outcome.model, start, out)?;
            }
            Ok((outcome.model, outcome.history))
        }
        Err(Error::Diverged { epoch, reason, last_good }) => {
            save_model(&last_good, epoch, out)?;
            Err(Error::Diverged { epoch, reason, last_good })
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_eval(
    data: &Dataset,
    baseline: Baseline,
    model: Option<&FusionModel>,
    digest_of: &impl Serialize,
) -> Result<EvalReport> {
    let report = eval::evaluate(data, baseline, model)?;
    let (lo, hi) = data.channel_bounds();
    Ok(EvalReport::new(&report, [lo, hi], eval::config_digest(digest_of)?))
}

pub fn cmd_sparsemax(values: &str) -> Result<String> {
    Ok(format_values(&sparsemax(&parse_values(values)?)))
}

// ---------------------------------------------------------------------------
// Experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub system: String,
    pub channels: u16,
    pub eer: f64,
    pub eer_threshold: f64,
    pub trials: TrialCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Normalizer,
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    /// Channel selection on the first test set.
    pub selection: SelectionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub results: Vec<ResultRow>,
    pub modes: Vec<ModeSummary>,
    /// Wall time of the whole run; the only run-dependent field.
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn eer(&self, system: &str, channels: u16) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.system == system && r.channels == channels)
            .map(|r| r.eer)
    }

    pub fn mode(&self, mode: Normalizer) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Plain-text EER table, one row per system.
    pub fn table(&self) -> String {
        let channels: Vec<u16> = self.config.test.channels.clone();
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.results {
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        let mut out = format!("{:<18}", "EER (%)");
        for c in &channels {
            let _ = write!(out, "{:>9}", format!("{c}-ch"));
        }
        out.push('\n');
        for s in systems {
            let _ = write!(out, "{s:<18}");
            for &c in &channels {
                match self.eer(s, c) {
                    Some(e) => {
                        let _ = write!(out, "{:>9.2}", 100.0 * e);
                    }
                    None => out.push_str("        -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the whole pipeline in memory; when `out_dir` is given every
/// dataset, checkpoint, training log and report is written there too.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let digest = eval::config_digest(cfg)?;

    let train_data = simulator::generate(&cfg.simulation)?;
    info!("training set: {} utterances", train_data.utterances.len());
    let mut tests = Vec::with_capacity(cfg.test.channels.len());
    for &c in &cfg.test.channels {
        tests.push((c, simulator::generate(&cfg.test_simulation(c))?));
    }
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("train.afds"), &simulator::encode_dataset(&train_data)?)?;
        for (c, ds) in &tests {
            write_atomic(&dir.join(format!("test-{c}ch.afds")), &simulator::encode_dataset(ds)?)?;
        }
    }

    let mut results = Vec::new();
    let mut record = |c: u16, report: &eval::TrialScoreReport| {
        info!("{} on {c} channels: EER {:.4}", report.system, report.eer);
        results.push(ResultRow {
            system: report.system.clone(),
            channels: c,
            eer: report.eer,
            eer_threshold: report.eer_threshold,
            trials: report.counts,
        });
    };
    for (c, ds) in &tests {
        record(*c, &eval::evaluate(ds, Baseline::OracleOneBest, None)?);
    }

    let mut modes = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let model_cfg = ModelConfig {
            mode,
            ..cfg.model.clone()
        };
        let init = FusionModel::init(model_cfg, cfg.model_seed)?;
        let mut lines = String::new();
        let outcome = training::train(init, &train_data, &cfg.training, 0, |r, _| {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
            Ok(())
        })?;
        if let Some(dir) = out_dir {
            let ckpt = dir.join(default_checkpoint_name(mode));
            save_model(&outcome.model, cfg.training.epochs, &ckpt)?;
            write_atomic(&log_path_for(&ckpt), lines.as_bytes())?;
        }
        for (c, ds) in &tests {
            let report = eval::evaluate(ds, Baseline::Fusion, Some(&outcome.model))?;
            if let Some(dir) = out_dir {
                let (lo, hi) = ds.channel_bounds();
                write_json(
                    &dir.join(format!("report-fusion-{mode}-{c}ch.json")),
                    &EvalReport::new(&report, [lo, hi], digest.clone()),
                )?;
            }
            record(*c, &report);
        }
        let selection = eval::channel_selection(&outcome.model, &tests[0].1)?;
        let losses = outcome.losses();
        modes.push(ModeSummary {
            mode,
            epochs: losses.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            loss_history: losses,
            selection,
        });
    }

    let report = ExperimentReport {
        config_digest: digest,
        config: cfg.clone(),
        results,
        modes,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Entry point

/// Executes a parsed command line, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let common = cli.command.common().clone();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // A second call in one process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Sparsemax { values, .. } => {
            writeln!(stdout, "{}", cmd_sparsemax(&values)?)?;
        }
        Command::Simulate {
            split,
            channels,
            out,
            ..
        } => {
            let cfg = load_config(&common)?;
            let out = require(out.as_ref().or(cfg.paths.train_data.as_ref()), "--out")?;
            let mut sim = match split {
                Split::Train => cfg.simulation.clone(),
                Split::Test => cfg.test_simulation(cfg.test.channels[0]),
            };
            if let Some(c) = channels {
                sim.channels = parse_channels(&c)?;
            }
            let s = cmd_simulate(&sim, &out)?;
            writeln!(
                stdout,
                "wrote {}: {} speakers, {} utterances, {}-{} channels, {} bytes",
                out.display(),
                s.speakers,
                s.utterances,
                s.channels.0,
                s.channels.1,
                s.bytes
            )?;
        }
        Command::Train {
            data,
            epochs,
            resume,
            log,
            out,
            ..
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let data = require(data.as_ref().or(cfg.paths.train_data.as_ref()), "--data")?;
            check_input(&data)?;
            if let Some(r) = &resume {
                check_input(r)?;
            }
            let out = out
                .or_else(|| cfg.paths.checkpoint.clone())
                .unwrap_or_else(|| PathBuf::from(default_checkpoint_name(cfg.model.mode)));
            let log = log
                .or_else(|| cfg.paths.log.clone())
                .unwrap_or_else(|| log_path_for(&out));
            check_output(&out)?;
            check_output(&log)?;
            let ds = simulator::read_dataset(&data)?;
            let (_, history) = cmd_train(&cfg, &ds, resume.as_deref(), &out, &log)?;
            let last = history.last();
            writeln!(
                stdout,
                "wrote {} after {} epoch(s){}",
                out.display(),
                history.len(),
                last.map(|r| format!(", final loss {:.6}", r.mean_loss))
                    .unwrap_or_default()
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            baseline,
            out,
            ..
        } => {
            let cfg = load_config(&common)?;
            let data = require(data.as_ref().or(cfg.paths.test_data.as_ref()), "--data")?;
            check_input(&data)?;
            let out = require(out.as_ref().or(cfg.paths.report.as_ref()), "--out")?;
            check_output(&out)?;
            let baseline: Baseline = baseline.into();
            let model = match baseline {
                Baseline::OracleOneBest => None,
                Baseline::Fusion => {
                    let ckpt = require(
                        checkpoint.as_ref().or(cfg.paths.checkpoint.as_ref()),
                        "--checkpoint",
                    )?;
                    check_input(&ckpt)?;
                    Some(load_checkpoint(&ckpt)?.0)
                }
            };
            let ds = simulator::read_dataset(&data)?;
            let digest_input = (&ds.config, model.as_ref().map(|m| &m.config));
            let report = cmd_eval(&ds, baseline, model.as_ref(), &digest_input)?;
            write_json(&out, &report)?;
            writeln!(
                stdout,
                "{}: EER {:.4} (threshold {:.6}) over {} trials",
                report.system, report.eer, report.eer_threshold, report.trials.total
            )?;
        }
        Command::Experiment { out, .. } => {
            let cfg = load_config(&common)?;
            if let Some(dir) = &out {
                if dir.exists() && !dir.is_dir() {
                    return Err(Error::Usage(format!("{} is not a directory", dir.display())));
                }
            }
            let report = run_experiment(&cfg, out.as_deref())?;
            write!(stdout, "{}", report.table())?;
            for m in &report.modes {
                writeln!(
                    stdout,
                    "{}: {:.1}% of noisy utterances fully shut out noise channels",
                    m.mode,
                    100.0 * m.selection.fraction
                )?;
            }
        }
    }
    Ok(())
}

/// Maps a failed run to a process exit code.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// The canonical comparison rows of an experiment, for JSON consumers.
pub fn comparison_rows(report: &ExperimentReport) -> Vec<ComparisonRow> {
    report
        .results
        .iter()
        .map(|r| ComparisonRow {
            system: r.system.clone(),
            channels: [r.channels as usize, r.channels as usize],
            eer: r.eer,
            eer_threshold: r.eer_threshold,
        })
        .collect()
}

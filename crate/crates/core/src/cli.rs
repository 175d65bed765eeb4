//! Command-line entry point: `generate`, `curate`, `train` and `eval`.
//!
//! Every invocation resolves a [`RunConfig`] (built-in defaults, then the
//! optional `--config` TOML file, then flags), creates a run directory under
//! `$ECHO_CONTRAST_OUT` (default `runs/`) and writes the resolved config, a log
//! and the command's artifacts there.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, render_table, write_report, EvalOptions, PromptSet};
use crate::exec::Exec;
use crate::guideline::{GuidelineTable, SeverityGrade, Verdict, VerdictRecord};
use crate::negation::{batch_negate, NegationRules, UNMATCHED};
use crate::synthetic::{generate, read_manifest, to_ndjson, validate_manifest, SamplePair, Split, SyntheticSpec};
use crate::training::{append_metrics, build_vocab, train_epochs, Checkpoint, TrainBatch, TrainConfig, TrainState};

pub const OUT_DIR_ENV: &str = "ECHO_CONTRAST_OUT";
pub const DEFAULT_OUT_DIR: &str = "runs";

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "echo-contrast", version, about = "Echocardiography image-text contrastive pretraining toolkit")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use this run directory instead of a fresh timestamped one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Run all inner loops on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and validate a synthetic manifest.
    Generate(GenerateArgs),
    /// Negate captions and check caption/measurement consistency.
    Curate(CurateArgs),
    /// Train the dual encoder on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Curate(_) => "curate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub guideline: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub lambda_view: Option<f64>,
    #[arg(long)]
    pub lambda_neg: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Continue from a checkpoint; its stored config takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans all).
    #[arg(long)]
    pub until_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    pub guideline: Option<PathBuf>,
    pub rules: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub prompts: Option<PathBuf>,
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub positive_threshold: SeverityGrade,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            split: Split::Test,
            prompts: None,
            knn_k: o.knn_k,
            knn_temperature: o.knn_temperature,
            positive_threshold: o.positive_threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generate: SyntheticSpec,
    pub curate: CurateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generate: SyntheticSpec::default(),
            curate: CurateConfig::default(),
            train: TrainConfig::synthetic(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Built-in defaults overlaid with the keys present in `text`. Unknown
    /// keys are rejected.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message,
        };
        let user: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        overlay(&mut base, user);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Copies stderr output into `run.log`.
struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.file.flush()
    }
}

fn init_logging(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("run.log");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .parse_default_env()
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init()
        .ok();
    Ok(())
}

fn create_run_dir(pinned: Option<&Path>, command: &str, hash: &str) -> Result<PathBuf> {
    let dir = match pinned {
        Some(p) => p.to_path_buf(),
        None => {
            let base = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from);
            let stem = format!("{command}-{}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), &hash[..8]);
            let mut dir = base.join(&stem);
            let mut n = 1;
            while dir.exists() {
                dir = base.join(format!("{stem}-{n}"));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

/// Folds command-line flags into the resolved config.
fn apply_flags(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Generate(a) => {
            if let Some(s) = a.seed {
                cfg.generate.seed = s;
            }
            if let Some(n) = a.n_samples {
                cfg.generate.n_samples = n;
            }
        }
        Command::Curate(a) => {
            if a.manifest.is_some() {
                cfg.paths.manifest.clone_from(&a.manifest);
            }
            if a.guideline.is_some() {
                cfg.curate.guideline.clone_from(&a.guideline);
            }
            if a.rules.is_some() {
                cfg.curate.rules.clone_from(&a.rules);
            }
        }
        Command::Train(a) => {
            if a.manifest.is_some() {
                cfg.paths.manifest.clone_from(&a.manifest);
            }
            let t = &mut cfg.train;
            t.lambda_view = a.lambda_view.unwrap_or(t.lambda_view);
            t.lambda_neg = a.lambda_neg.unwrap_or(t.lambda_neg);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.seed = a.seed.unwrap_or(t.seed);
            t.base_lr = a.base_lr.unwrap_or(t.base_lr);
        }
        Command::Eval(a) => {
            if a.manifest.is_some() {
                cfg.paths.manifest.clone_from(&a.manifest);
            }
            if a.checkpoint.is_some() {
                cfg.paths.checkpoint.clone_from(&a.checkpoint);
            }
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            if a.prompts.is_some() {
                cfg.eval.prompts.clone_from(&a.prompts);
            }
        }
    }
}

/// Error from a command, with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) | Error::MissingPrompt(_) => {
                EXIT_USAGE
            }
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> std::result::Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| usage(format!("{what} is required: pass --{flag} or set paths.{flag} in the config")))
}

/// Resolves the config, prepares the run directory and dispatches. Returns
/// the process exit code.
pub fn run(cli: Cli) -> std::result::Result<u8, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, &cli.command);
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    if let Command::Eval(_) = cli.command {
        require(&cfg.paths.checkpoint, "a checkpoint", "checkpoint")?;
    }
    if matches!(cli.command, Command::Curate(_) | Command::Train(_) | Command::Eval(_)) {
        require(&cfg.paths.manifest, "a manifest", "manifest")?;
    }

    let hash = cfg.hash();
    let run_dir = create_run_dir(cli.run_dir.as_deref(), cli.command.name(), &hash)?;
    init_logging(&run_dir)?;
    write_file(&run_dir.join("config.toml"), &cfg.to_toml())?;
    log::info!("{} run in {} (config {})", cli.command.name(), run_dir.display(), &hash[..8]);
    println!("{}", run_dir.display());

    match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg, &run_dir, exec),
        Command::Curate(_) => cmd_curate(&cfg, &run_dir, exec),
        Command::Train(a) => cmd_train(&cfg, a, &run_dir, exec),
        Command::Eval(_) => cmd_eval(&cfg, &run_dir, exec),
    }
}

fn tables(cfg: &RunConfig) -> Result<(GuidelineTable, NegationRules)> {
    let g = match &cfg.curate.guideline {
        Some(p) => GuidelineTable::load(p)?,
        None => GuidelineTable::builtin().clone(),
    };
    let r = match &cfg.curate.rules {
        Some(p) => NegationRules::load(p)?,
        None => NegationRules::builtin().clone(),
    };
    Ok((g, r))
}

fn cmd_generate(cfg: &RunConfig, run_dir: &Path, exec: Exec) -> std::result::Result<u8, Failure> {
    let (guideline, rules) = tables(cfg)?;
    let rows = generate(&cfg.generate, &guideline, &rules, exec)?;
    let text = to_ndjson(&rows);
    write_file(&run_dir.join("manifest.ndjson"), &text)?;
    let report = validate_manifest(&text, &guideline, &rules, exec);
    write_json(&run_dir.join("validation.json"), &report)?;
    log::info!("generated {} rows, {} violations", report.rows, report.violations.len());
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_VALIDATION })
}

#[derive(Debug, Serialize)]
struct CurationSummary {
    rows: usize,
    consistent: usize,
    subjective: usize,
    inconsistent: usize,
    unmatched_negations: usize,
}

fn cmd_curate(cfg: &RunConfig, run_dir: &Path, exec: Exec) -> std::result::Result<u8, Failure> {
    let (guideline, rules) = tables(cfg)?;
    let path = cfg.paths.manifest.as_deref().expect("checked in run");
    let mut rows = read_manifest(path)?;
    batch_negate(&mut rows, &rules, &guideline, exec);
    write_file(&run_dir.join("negated.ndjson"), &to_ndjson(&rows))?;

    let per_row = exec.map_slice(&rows, |r| {
        guideline
            .assess_caption(&r.caption, &r.measurements)
            .iter()
            .map(|l| VerdictRecord::from_link(&r.id, l))
            .collect::<Vec<_>>()
    });
    let verdicts: Vec<VerdictRecord> = per_row.into_iter().flatten().collect();
    let mut body = String::new();
    for v in &verdicts {
        body.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        body.push('\n');
    }
    write_file(&run_dir.join("verdicts.ndjson"), &body)?;
    let count = |k: Verdict| verdicts.iter().filter(|v| v.verdict == k).count();
    let summary = CurationSummary {
        rows: rows.len(),
        consistent: count(Verdict::Consistent),
        subjective: count(Verdict::Subjective),
        inconsistent: count(Verdict::Inconsistent),
        unmatched_negations: rows
            .iter()
            .filter(|r| r.negation_rules.iter().any(|id| id == UNMATCHED))
            .count(),
    };
    write_json(&run_dir.join("curation.json"), &summary)?;
    log::info!(
        "curated {} rows: {} consistent, {} subjective, {} inconsistent verdicts",
        summary.rows,
        summary.consistent,
        summary.subjective,
        summary.inconsistent
    );
    Ok(if summary.inconsistent == 0 { EXIT_OK } else { EXIT_VALIDATION })
}

fn split_rows(rows: &[SamplePair], split: Split) -> Vec<SamplePair> {
    rows.iter().filter(|r| r.split == split).cloned().collect()
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs, run_dir: &Path, exec: Exec) -> std::result::Result<u8, Failure> {
    let path = cfg.paths.manifest.as_deref().expect("checked in run");
    let train = split_rows(&read_manifest(path)?, Split::Train);
    let mut state = match &args.resume {
        Some(ck) => {
            let state = Checkpoint::load(ck)?.into_state()?;
            log::info!("resuming from {} at epoch {} step {}", ck.display(), state.epoch, state.step);
            state
        }
        None => TrainState::init(cfg.train.clone(), build_vocab(&train))?,
    };
    state.vocab.save(&run_dir.join("vocab.txt"))?;
    let data = TrainBatch::from_pairs(&train, &state.vocab)?;
    let metrics_path = run_dir.join("metrics.ndjson");
    write_file(&metrics_path, "")?;
    let until = args.until_epoch.unwrap_or(usize::MAX);
    let log = train_epochs(&mut state, &data, until, exec, |m, _| append_metrics(&metrics_path, m))?;
    Checkpoint::from_state(&state).save(&run_dir.join("checkpoint.json"))?;
    if let Some(last) = log.last() {
        log::info!("finished epoch {} with mean total loss {:.5}", last.epoch, last.total);
    }
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, exec: Exec) -> std::result::Result<u8, Failure> {
    let ck = cfg.paths.checkpoint.as_deref().expect("checked in run");
    let model = Checkpoint::load(ck)?.into_state()?;
    let rows = read_manifest(cfg.paths.manifest.as_deref().expect("checked in run"))?;
    let prompts = match &cfg.eval.prompts {
        Some(p) => PromptSet::load(p)?,
        None => PromptSet::builtin().clone(),
    };
    let options = EvalOptions {
        positive_threshold: cfg.eval.positive_threshold,
        knn_k: cfg.eval.knn_k,
        knn_temperature: cfg.eval.knn_temperature,
    };
    let report = evaluate(
        &model,
        &split_rows(&rows, Split::Train),
        &split_rows(&rows, cfg.eval.split),
        &prompts,
        &options,
        exec,
    )?;
    write_report(run_dir, &report)?;
    print!("{}", render_table(&report));
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlay_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nlambda_view = 0.25\n[train.encoder]\nhidden_dim = 8\n", "t").unwrap();
        assert_eq!(cfg.train.lambda_view, 0.25);
        assert_eq!(cfg.train.encoder.hidden_dim, 8);
        assert_eq!(cfg.train.batch_size, TrainConfig::synthetic().batch_size);
        assert_eq!(cfg.generate, SyntheticSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nlamda_view = 1.0\n", "t").is_err());
        assert!(RunConfig::from_toml_str("[bogus]\nx = 1\n", "t").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), "t").unwrap(), cfg);
    }

    #[test]
    fn lambda_flags_override() {
        let mut cfg = RunConfig::default();
        let cli = Cli::parse_from(["echo-contrast", "train", "--lambda-view", "0", "--lambda-neg", "0"]);
        apply_flags(&mut cfg, &cli.command);
        assert_eq!((cfg.train.lambda_view, cfg.train.lambda_neg), (0.0, 0.0));
    }
}

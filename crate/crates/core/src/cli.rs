//! Command-line entry point: `synth`, `train`, `attribute`, `interp`, `eval`
//! and `report`, all writing into one run directory.
//!
//! Settings resolve as flag > config file > default. Without `--out`, the
//! run directory is `runs/<hash>` where `<hash>` is taken over the resolved
//! configuration.
//!
//! Exit codes: 0 ok, 2 validation, 3 training abort, 4 checkpoint,
//! 5 endpoint, 6 category mismatch.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{self, AttributionConfig, AmpClass, LatentAttribution};
use crate::crosscoder::{self, init_model, load_checkpoint, save_checkpoint, TrainConfig, DEFAULT_EXPANSION};
use crate::evaluation::{self, CategoryFlags, SelectionRule, Synonyms};
use crate::interp::{self, Archive, ContextConfig, Endpoint, EndpointConfig, HttpEndpoint, MockEndpoint, Templates};
use crate::store::read_shard;
use crate::synthetic::{self, ClassCounts, FiringMode, PlantedSpec};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_ENDPOINT: i32 = 5;
pub const EXIT_CATEGORY: i32 = 6;

/// File names inside a run directory.
pub mod files {
    pub const BASE_SHARD: &str = "base.mnac";
    pub const FT_SHARD: &str = "ft.mnac";
    pub const TRUTH: &str = "truth.json";
    pub const GOLD: &str = "gold.csv";
    pub const CHECKPOINT: &str = "checkpoint.mnck";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const TABLE: &str = "attribution.jsonl";
    pub const HEALTH: &str = "health.json";
    pub const DOSSIERS: &str = "dossiers.jsonl";
    pub const ARCHIVE: &str = "archive.jsonl";
    pub const COMPARISON: &str = "comparison.txt";
    pub const SWEEP: &str = "random_sweep.json";
    pub const REPORT: &str = "report.md";
    pub const CONFIG: &str = "config.toml";
}

#[derive(Debug, Parser)]
#[command(name = "crossdiff", version, about = "Cross-coder model diffing")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the offline mock instead of an LLM endpoint.
    #[arg(long, global = true)]
    pub mock_llm: bool,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ShardArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub ft: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate paired shards from a planted dictionary.
    Synth {
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Fit a cross-coder on paired shards.
    Train {
        #[command(flatten)]
        shards: ShardArgs,
    },
    /// Per-latent attribution table and health report.
    Attribute {
        #[command(flatten)]
        shards: ShardArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Describe and label selected latents.
    Interp {
        #[command(flatten)]
        shards: ShardArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Score pipeline predictions and baselines against gold categories.
    Eval {
        #[arg(long)]
        dossiers: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub base_shard: Option<PathBuf>,
    pub ft_shard: Option<PathBuf>,
    /// Evaluation shards for attribute/interp; default to the training pair.
    pub eval_base_shard: Option<PathBuf>,
    pub eval_ft_shard: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub attribution: Option<PathBuf>,
    pub dossiers: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub expansion: usize,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            expansion: DEFAULT_EXPANSION,
            k: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub mock: bool,
    pub endpoint: EndpointConfig,
    pub contexts: ContextConfig,
    pub templates_dir: Option<PathBuf>,
    pub template_version: String,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            mock: false,
            endpoint: EndpointConfig::default(),
            contexts: ContextConfig::default(),
            templates_dir: None,
            template_version: "v1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum qualifying latents per category.
    pub c: usize,
    /// Random-baseline probability.
    pub p: f64,
    /// Seeds for the random-baseline sweep.
    pub baseline_seeds: u64,
    /// Fine-tuning task description for the naive baseline.
    pub task: String,
    pub synonyms: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            c: 1,
            p: 0.5,
            baseline_seeds: 100,
            task: String::new(),
            synonyms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tokens: usize,
    pub d: usize,
    pub counts: ClassCounts,
    pub atoms_per_category: usize,
    pub k_true: usize,
    pub gain: f64,
    pub noise_sigma: f64,
    /// Fire exactly this many atoms per token instead of independently.
    pub exact_firing: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tokens: 200_000,
            d: 64,
            counts: ClassCounts::default(),
            atoms_per_category: 4,
            k_true: 8,
            gain: 3.0,
            noise_sigma: 0.01,
            exact_firing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub interp: InterpConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            interp: InterpConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..6])
    }
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Endpoint(_) | Error::Generation(_) | Error::Completion { .. } => EXIT_ENDPOINT,
            Error::Category { .. } => EXIT_CATEGORY,
            Error::Training(_) => EXIT_TRAINING,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: msg.into(),
    }
}

/// Loads the config file, applies flag overrides and picks the run dir.
pub fn resolve(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.mock_llm {
        cfg.interp.mock = true;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    cfg.train.seed = cfg.seed;
    let out = match &cfg.paths.out_dir {
        Some(dir) => dir.clone(),
        None => Path::new("runs").join(cfg.hash()),
    };
    Ok((cfg, out))
}

fn existing(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(validation(format!("path does not exist: {}", path.display())))
    }
}

/// flag > config > run-directory default.
fn pick(flag: &Option<PathBuf>, config: &Option<PathBuf>, out: &Path, name: &str) -> CliResult<PathBuf> {
    existing(flag.clone().or_else(|| config.clone()).unwrap_or_else(|| out.join(name)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn read_gold(path: &Path) -> CliResult<CategoryFlags> {
    Ok(evaluation::read_flags(path)?)
}

fn endpoint(cfg: &RunConfig) -> CliResult<Box<dyn Endpoint>> {
    if cfg.interp.mock {
        Ok(Box::new(MockEndpoint))
    } else {
        Ok(Box::new(HttpEndpoint::new(cfg.interp.endpoint.clone())?))
    }
}

fn templates(cfg: &RunConfig) -> CliResult<Templates> {
    Ok(match &cfg.interp.templates_dir {
        Some(dir) => Templates::from_dir(dir, &cfg.interp.template_version)?,
        None => Templates::default(),
    })
}

fn cmd_synth(cfg: &RunConfig, out: &Path, tokens: Option<usize>) -> CliResult<()> {
    let s = &cfg.synth;
    let mut spec = PlantedSpec::balanced(s.d, s.counts, s.atoms_per_category, s.k_true, cfg.seed)?;
    spec.gain = s.gain;
    spec.noise_sigma = s.noise_sigma;
    if let Some(k) = s.exact_firing {
        spec.firing = FiringMode::Exact(k);
    }
    spec.validate()?;
    let data = synthetic::generate(&spec, tokens.unwrap_or(s.tokens))?;
    data.base.write(&out.join(files::BASE_SHARD))?;
    data.ft.write(&out.join(files::FT_SHARD))?;
    data.truth.write(&out.join(files::TRUTH))?;
    write_text(&out.join(files::GOLD), &evaluation::flags_to_text(&data.truth.gold_categories()))?;
    info!("wrote {} paired rows to {}", data.base.n_rows(), out.display());
    Ok(())
}

fn train_shards(cfg: &RunConfig, out: &Path, args: &ShardArgs) -> CliResult<(PathBuf, PathBuf)> {
    Ok((
        pick(&args.base, &cfg.paths.base_shard, out, files::BASE_SHARD)?,
        pick(&args.ft, &cfg.paths.ft_shard, out, files::FT_SHARD)?,
    ))
}

fn eval_shards(cfg: &RunConfig, out: &Path, args: &ShardArgs) -> CliResult<(PathBuf, PathBuf)> {
    let base = args.base.clone().or_else(|| cfg.paths.eval_base_shard.clone());
    let ft = args.ft.clone().or_else(|| cfg.paths.eval_ft_shard.clone());
    Ok((
        pick(&base, &cfg.paths.base_shard, out, files::BASE_SHARD)?,
        pick(&ft, &cfg.paths.ft_shard, out, files::FT_SHARD)?,
    ))
}

fn cmd_train(cfg: &RunConfig, out: &Path, args: &ShardArgs) -> CliResult<()> {
    let (bp, fp) = train_shards(cfg, out, args)?;
    let (base, ft) = (read_shard(&bp)?, read_shard(&fp)?);
    let model = init_model::<f32>(base.d_model(), cfg.model.expansion, cfg.model.k, cfg.seed)?;
    let outcome = crosscoder::train(model, &base, &ft, &cfg.train)?;
    save_checkpoint(&outcome.model, &out.join(files::CHECKPOINT))?;
    outcome.log.write(&out.join(files::TRAIN_LOG))?;
    if let Some(reason) = outcome.aborted {
        return Err(CliError {
            code: EXIT_TRAINING,
            message: format!("training aborted: {reason}; last finite model saved"),
        });
    }
    Ok(())
}

fn cmd_attribute(cfg: &RunConfig, out: &Path, args: &ShardArgs, checkpoint: &Option<PathBuf>) -> CliResult<()> {
    let ck = pick(checkpoint, &cfg.paths.checkpoint, out, files::CHECKPOINT)?;
    let model = load_checkpoint::<f32>(&ck)?;
    let (bp, fp) = eval_shards(cfg, out, args)?;
    let (base, ft) = (read_shard(&bp)?, read_shard(&fp)?);
    let (table, report) = attribution::attribute(&model, &base, &ft, &cfg.attribution)?;
    attribution::write_table(&table, &out.join(files::TABLE))?;
    write_json(&out.join(files::HEALTH), &report)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok(())
}

fn cmd_interp(
    cfg: &RunConfig,
    out: &Path,
    args: &ShardArgs,
    checkpoint: &Option<PathBuf>,
    table: &Option<PathBuf>,
) -> CliResult<()> {
    let ck = pick(checkpoint, &cfg.paths.checkpoint, out, files::CHECKPOINT)?;
    let model = load_checkpoint::<f32>(&ck)?;
    let table = attribution::read_table(&pick(table, &cfg.paths.attribution, out, files::TABLE)?)?;
    let (bp, fp) = eval_shards(cfg, out, args)?;
    let (base, ft) = (read_shard(&bp)?, read_shard(&fp)?);
    let selected = attribution::default_selection(&table);
    let dossier_path = out.join(files::DOSSIERS);
    if selected.is_empty() {
        warn!("attribution filter selected no latents");
        write_text(&dossier_path, "")?;
        return Ok(());
    }
    let contexts = interp::collect_contexts(&model, &base, &ft, &selected, &cfg.interp.contexts)?;
    let ep = endpoint(cfg)?;
    let tpl = templates(cfg)?;
    // the archive is rebuilt per run so reruns stay byte-identical
    let archive_path = out.join(files::ARCHIVE);
    write_text(&archive_path, "")?;
    let mut archive = Archive::to_file(&archive_path);
    let (dossiers, err) = interp::build_dossiers(ep.as_ref(), &mut archive, &tpl, &contexts, &table);
    interp::write_dossiers(&dossiers, &dossier_path)?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    dossiers: &Option<PathBuf>,
    table: &Option<PathBuf>,
    gold: &Option<PathBuf>,
) -> CliResult<()> {
    let ds = interp::read_dossiers(&pick(dossiers, &cfg.paths.dossiers, out, files::DOSSIERS)?)?;
    let table = attribution::read_table(&pick(table, &cfg.paths.attribution, out, files::TABLE)?)?;
    let gold = read_gold(&pick(gold, &cfg.paths.gold, out, files::GOLD)?)?;
    let universe: Vec<String> = gold.keys().cloned().collect();
    let synonyms = match &cfg.eval.synonyms {
        Some(p) => Synonyms::read(p)?,
        None => Synonyms::shipped(),
    };
    let rule = SelectionRule { c: cfg.eval.c };

    // predictions are fixed before any gold flag is consulted
    let (pipeline, stats) = evaluation::pipeline_predictions(&ds, &table, &universe, rule, &synonyms)?;
    let random = evaluation::random_baseline(&universe, cfg.eval.p, cfg.seed)?;
    let ep = endpoint(cfg)?;
    let tpl = templates(cfg)?;
    let mut archive = Archive::in_memory();
    let naive = evaluation::naive_baseline(ep.as_ref(), &mut archive, &tpl, &cfg.eval.task, &universe)?;
    let oracle = evaluation::oracle_baseline(&gold);

    let mut reports = Vec::new();
    for (name, pred) in [("pipeline", &pipeline), ("random", &random), ("naive", &naive), ("oracle", &oracle)] {
        let mut r = evaluation::score(pred, &gold)?;
        r.config.insert("seed".into(), cfg.seed.to_string());
        match name {
            "pipeline" => {
                r.config.insert("rule".into(), "non_shared_or_amplified_or_minimized".into());
                r.config.insert("c".into(), rule.c.to_string());
                r.config.insert("skipped_dossiers".into(), stats.skipped.to_string());
                r.config.insert("unmatched_labels".into(), stats.unmatched_labels.len().to_string());
            }
            "random" => {
                r.config.insert("p".into(), cfg.eval.p.to_string());
            }
            "naive" => {
                r.config.insert("task".into(), cfg.eval.task.clone());
            }
            _ => {}
        }
        write_json(&out.join(format!("eval_{name}.json")), &r)?;
        reports.push(r);
    }
    let sweep = evaluation::random_sweep(&gold, cfg.eval.p, cfg.seed, cfg.eval.baseline_seeds)?;
    write_json(&out.join(files::SWEEP), &sweep)?;
    let table_text = evaluation::render_table(&reports);
    write_text(&out.join(files::COMPARISON), &table_text)?;
    print!("{table_text}");
    Ok(())
}

fn cmd_report(out: &Path) -> CliResult<()> {
    let mut text = format!("# Run {}\n\n", out.display());
    let health_path = out.join(files::HEALTH);
    if health_path.exists() {
        let raw = std::fs::read_to_string(&health_path).map_err(|e| CliError::from(Error::io(&health_path, e)))?;
        let h: attribution::HealthReport =
            serde_json::from_str(&raw).map_err(|e| validation(format!("{}: {e}", health_path.display())))?;
        text.push_str(&format!(
            "## Health\n\n- dead rate: {:.4} (window {} of {} tokens)\n- explained variance: base {:.4}, ft {:.4}\n- mean reconstruction loss: {:.6}\n- mean rel norm: {:.4}\n\n",
            h.dead_rate,
            h.dead_window_tokens,
            h.stream_tokens,
            h.explained_variance_base,
            h.explained_variance_ft,
            h.mean_recon_loss,
            h.rel_norm_mean
        ));
    }
    let table_path = out.join(files::TABLE);
    if table_path.exists() {
        let table: Vec<LatentAttribution> = attribution::read_table(&table_path)?;
        text.push_str("## Latent classes\n\n");
        for (k, v) in attribution::class_counts(&table) {
            text.push_str(&format!("- {k}: {v}\n"));
        }
        let amplified: BTreeSet<usize> = table
            .iter()
            .filter(|r| r.amp_class == AmpClass::Amplified)
            .map(|r| r.latent_id)
            .collect();
        text.push_str(&format!("- amplified latents: {}\n\n", amplified.len()));
    }
    let cmp = out.join(files::COMPARISON);
    if cmp.exists() {
        let t = std::fs::read_to_string(&cmp).map_err(|e| CliError::from(Error::io(&cmp, e)))?;
        text.push_str(&format!("## Evaluation\n\n```text\n{t}```\n"));
    }
    write_text(&out.join(files::REPORT), &text)?;
    print!("{text}");
    Ok(())
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let (cfg, out) = resolve(&cli.common)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::from(Error::io(&out, e)))?;
    if !matches!(cli.command, Command::Report) {
        write_text(&out.join(files::CONFIG), &cfg.to_toml())?;
    }
    match &cli.command {
        Command::Synth { tokens } => cmd_synth(&cfg, &out, *tokens),
        Command::Train { shards } => cmd_train(&cfg, &out, shards),
        Command::Attribute { shards, checkpoint } => cmd_attribute(&cfg, &out, shards, checkpoint),
        Command::Interp { shards, checkpoint, table } => cmd_interp(&cfg, &out, shards, checkpoint, table),
        Command::Eval { dossiers, table, gold } => cmd_eval(&cfg, &out, dossiers, table, gold),
        Command::Report => cmd_report(&out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[model]\nk = 16\n[train]\nlr = 0.002\n").unwrap();
        let common = Common {
            config: Some(path.clone()),
            seed: Some(9),
            mock_llm: true,
            out: None,
        };
        let (cfg, out) = resolve(&common).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.k, 16);
        assert_eq!(cfg.model.expansion, DEFAULT_EXPANSION);
        assert_eq!(cfg.train.lr, 0.002);
        assert!(cfg.interp.mock);
        assert!(out.starts_with("runs"));
        assert!(out.ends_with(cfg.hash()));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nkk = 3\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).code, EXIT_CHECKPOINT);
        assert_eq!(CliError::from(Error::Endpoint("x".into())).code, EXIT_ENDPOINT);
        assert_eq!(CliError::from(Error::Category { strays: vec![] }).code, EXIT_CATEGORY);
        assert_eq!(CliError::from(Error::Param("x".into())).code, EXIT_VALIDATION);
    }
}

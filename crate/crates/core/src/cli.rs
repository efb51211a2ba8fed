//! Command-line pipeline.
//!
//! Seven subcommands compose into the full experiment: `gen` emits the
//! synthetic corpus, `train-clean` pretrains the encoder, `attack`
//! fine-tunes it on poisoned tuples, `eval` scores similarity metrics,
//! `transfer` runs the frozen-encoder classification protocol, `analyze`
//! produces layer-swap / projection / attention diagnostics, and
//! `report` prints the accumulated results ledger.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 numeric
//! failure (divergence, NaN), 4 threshold failure under `--check`.
//! Timestamps appear only in per-command `meta_*.json` sidecars so every
//! other artifact is byte-reproducible from (config, seed).

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    attention_profile, build_hybrid, embedding_clusters, project_2d, write_projection_tsv,
    AnalysisError, ClusterRow,
};
use crate::config::{load_config, parse_override_tokens, ConfigError, ExperimentConfig};
use crate::contrastive::{train, ProbeSet, TrainError};
use crate::corpus::{
    generate_synthetic_corpus, load_classification, load_sts, load_triplets, load_unlabeled,
    target_candidates, tokenize, CorpusError, StsPair, TextExample, Vocabulary,
};
use crate::eval::{
    append_ledger_row, asr_sts, relative_drop_rho, sts_evaluate, EvalError, MetricsReport,
};
use crate::nn::{load_checkpoint, save_checkpoint, EncoderParams, NnError};
use crate::poison::{
    insert_trigger, make_poisoned_dataset, write_poisoned_dataset, AttackMode, PoisonError,
    PoisonSpec, SourceData,
};
use crate::rng::rng_for;
use crate::transfer::{
    categorize_target, evaluate_transfer, featurize, label_of_target, save_head, train_head,
    TransferError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Check(_) => 4,
            Self::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(inner) => Self::Other(inner.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<PoisonError> for CliError {
    fn from(e: PoisonError) -> Self {
        match e {
            PoisonError::Corpus(inner) => inner.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFiniteGradient(_) => Self::Numeric(e.to_string()),
            NnError::Io(inner) => Self::Other(inner.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. }
            | TrainError::NonFiniteSimilarity
            | TrainError::ZeroVector => Self::Numeric(e.to_string()),
            TrainError::Nn(inner) => inner.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonFiniteInput
            | EvalError::DivisionByZero
            | EvalError::DegenerateRanking => Self::Numeric(e.to_string()),
            EvalError::Nn(inner) => inner.into(),
            EvalError::Train(inner) => inner.into(),
            EvalError::Poison(inner) => inner.into(),
            EvalError::Io(inner) => Self::Other(inner.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Nn(inner) => inner.into(),
            TransferError::Eval(inner) => inner.into(),
            TransferError::Poison(inner) => inner.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::NonFiniteInput
            | AnalysisError::ZeroVector
            | AnalysisError::NoConvergence => Self::Numeric(e.to_string()),
            AnalysisError::Nn(inner) => inner.into(),
            AnalysisError::Io(inner) => Self::Other(inner.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "cse-backdoor-lab",
    about = "Train small contrastive sentence encoders, inject trigger backdoors, and measure the damage",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config (JSON). Missing fields use defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Config override as KEY=VALUE with a dotted path.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Trailing overrides: --train.temperature 0.1 --attack.rate 0.2
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Base checkpoint to fine-tune (default: <run_dir>/clean.ckpt).
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Run the poisoning-rate sweep {0.05, 0.1, 0.2, 0.3, 0.5}.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Args)]
pub struct ModelPairArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Clean checkpoint (default: <run_dir>/clean.ckpt).
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Backdoored checkpoint (default: <run_dir>/backdoored.ckpt).
    #[arg(long)]
    pub backdoored: Option<PathBuf>,
    /// Fail (exit 4) when attack/utility thresholds are not met.
    #[arg(long)]
    pub check: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, similarity set, triplets and tasks.
    Gen(CommonArgs),
    /// Pretrain a clean encoder with contrastive learning.
    TrainClean(CommonArgs),
    /// Fine-tune a clean checkpoint on poisoned data.
    Attack(AttackArgs),
    /// Similarity metrics for a clean/backdoored checkpoint pair.
    Eval(ModelPairArgs),
    /// Frozen-encoder classification transfer and target categorization.
    Transfer(ModelPairArgs),
    /// Layer-swap clusters, 2-d projection and attention profiles.
    Analyze(ModelPairArgs),
    /// Print the accumulated results ledger.
    Report(CommonArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => {
            let config = load(&args)?;
            with_meta(&config, "gen", cmd_gen)
        }
        Command::TrainClean(args) => {
            let config = load(&args)?;
            with_meta(&config, "train-clean", cmd_train_clean)
        }
        Command::Attack(args) => {
            let config = load(&args.common)?;
            with_meta(&config, "attack", |c| cmd_attack(c, args.base.as_deref(), args.sweep))
        }
        Command::Eval(args) => {
            let config = load(&args.common)?;
            with_meta(&config, "eval", |c| {
                cmd_eval(c, args.clean.as_deref(), args.backdoored.as_deref(), args.check)
            })
        }
        Command::Transfer(args) => {
            let config = load(&args.common)?;
            with_meta(&config, "transfer", |c| {
                cmd_transfer(c, args.clean.as_deref(), args.backdoored.as_deref(), args.check)
            })
        }
        Command::Analyze(args) => {
            let config = load(&args.common)?;
            with_meta(&config, "analyze", |c| {
                cmd_analyze(c, args.clean.as_deref(), args.backdoored.as_deref())
            })
        }
        Command::Report(args) => {
            let config = load(&args)?;
            cmd_report(&config)
        }
    }
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut overrides = parse_override_tokens(&args.overrides)?;
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(pair.clone()))?;
        overrides.push((key.to_string(), value.to_string()));
    }
    Ok(load_config(&args.config, &overrides)?)
}

/// Runs a command body and records wall-clock bounds in the only
/// timestamped artifact, `meta_<command>.json`.
fn with_meta(
    config: &ExperimentConfig,
    command: &str,
    body: impl FnOnce(&ExperimentConfig) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let started = SystemTime::now();
    body(config)?;
    let run_dir = config.run_dir();
    if run_dir.exists() {
        let unix = |t: SystemTime| {
            t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or_default()
        };
        let meta = serde_json::json!({
            "run_id": config.run_id,
            "command": command,
            "started_unix": unix(started),
            "finished_unix": unix(SystemTime::now()),
        });
        std::fs::write(
            run_dir.join(format!("meta_{command}.json")),
            format!("{}\n", serde_json::to_string_pretty(&meta)?),
        )?;
    }
    Ok(())
}

fn read_vocab(config: &ExperimentConfig) -> Result<Vocabulary, CliError> {
    let path = config.paths.data_dir.join("vocab.txt");
    if !path.exists() {
        return Err(CliError::Config(format!(
            "vocabulary {} not found; run `gen` first",
            path.display()
        )));
    }
    Ok(Vocabulary::read_file(&path)?)
}

fn load_model(path: &Path) -> Result<EncoderParams, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// Probe pairs for training logs: the highest-gold similarity pairs, whose
/// embedding cosine should rise as the encoder learns.
fn probe_set(pairs: &[StsPair], n: usize) -> ProbeSet {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[b].gold_score.partial_cmp(&pairs[a].gold_score).expect("finite gold").then(a.cmp(&b))
    });
    ProbeSet {
        pairs: order
            .into_iter()
            .take(n)
            .map(|i| (pairs[i].sent1.clone(), pairs[i].sent2.clone()))
            .collect(),
    }
}

fn clean_source(
    config: &ExperimentConfig,
    supervised: bool,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<SourceData, CliError> {
    let dir = &config.paths.data_dir;
    Ok(if supervised {
        SourceData::Triplets(load_triplets(&dir.join("nli.tsv"), vocab, max_seq_len)?)
    } else {
        SourceData::Pairs(load_unlabeled(&dir.join("corpus.txt"), vocab, max_seq_len)?)
    })
}

fn write_epoch_logs(path: &Path, logs: &[crate::contrastive::EpochLog]) -> Result<(), CliError> {
    let mut text = String::new();
    for log in logs {
        text.push_str(&serde_json::to_string(log)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(value)?))?;
    Ok(())
}

fn mode_tag(mode: AttackMode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .expect("attack mode serializes to a string")
}

/// "p05", "p10", ... tag for a poisoning rate.
fn rate_tag(rate: f64) -> String {
    format!("p{:02}", (rate * 100.0).round() as u32)
}

/// Deterministic trigger insertion into a sample list (one trigger per
/// sentence), for evaluation-side poisoning.
fn triggered_copies(
    examples: &[TextExample],
    spec: &PoisonSpec,
    vocab: &Vocabulary,
    max_seq_len: usize,
    stream: &str,
) -> Result<Vec<TextExample>, CliError> {
    let mut rng = rng_for(spec.seed, stream);
    let mut out = Vec::with_capacity(examples.len());
    for example in examples {
        let trigger = if spec.pin_single_trigger {
            spec.trigger_tokens[0].as_str()
        } else {
            spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())].as_str()
        };
        out.push(insert_trigger(example, trigger, vocab, max_seq_len, &mut rng)?);
    }
    Ok(out)
}

fn cmd_gen(config: &ExperimentConfig) -> Result<(), CliError> {
    let gen_cfg = config.generator_config();
    let data = generate_synthetic_corpus(&gen_cfg)?;
    let vocab = data.write_all(&config.paths.data_dir, &gen_cfg, &config.attack.trigger_tokens)?;
    println!(
        "generated {} sentences, {} similarity pairs, {} triplets in {} (vocabulary {})",
        data.sentences.len(),
        data.sts.len(),
        data.triplets.len(),
        config.paths.data_dir.display(),
        vocab.size()
    );
    Ok(())
}

fn cmd_train_clean(config: &ExperimentConfig) -> Result<(), CliError> {
    let vocab = read_vocab(config)?;
    let mut encoder_cfg = config.encoder.clone();
    encoder_cfg.vocab_size = vocab.size();
    encoder_cfg.validate()?;
    let max = encoder_cfg.max_seq_len;

    let train_cfg = config.clean_train_config();
    let source = clean_source(config, train_cfg.mode.is_supervised(), &vocab, max)?;
    let sts = load_sts(&config.paths.data_dir.join("sts.tsv"), &vocab, max)?;
    let probe = probe_set(&sts, 32);

    let params = EncoderParams::init(&encoder_cfg, config.stage_seed("model"))?;
    let (params, logs) = train(params, &source, &[], &train_cfg, Some(&probe))?;

    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    save_checkpoint(&params, &run_dir.join("clean.ckpt"))?;
    write_epoch_logs(&run_dir.join("train_clean.log.jsonl"), &logs)?;

    let last = logs.last().expect("at least one epoch");
    println!(
        "clean model: {} epochs on {} tuples, final loss {:.4}, probe cosine {:.4}",
        logs.len(),
        source.len(),
        last.loss_total,
        last.probe_cosine.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_attack(
    config: &ExperimentConfig,
    base: Option<&Path>,
    sweep: bool,
) -> Result<(), CliError> {
    let vocab = read_vocab(config)?;
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let base_path = base.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("clean.ckpt"));
    let base_params = load_model(&base_path)?;
    if base_params.config.vocab_size != vocab.size() {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary {} does not match vocab.txt ({})",
            base_params.config.vocab_size,
            vocab.size()
        )));
    }
    let max = base_params.config.max_seq_len;

    let attack_cfg = config.attack_train_config();
    let source = clean_source(config, attack_cfg.mode.is_supervised(), &vocab, max)?;
    let sts = load_sts(&config.paths.data_dir.join("sts.tsv"), &vocab, max)?;
    let probe = probe_set(&sts, 32);
    let ledger = run_dir.join("results.tsv");

    let rates: Vec<f64> =
        if sweep { vec![0.05, 0.10, 0.20, 0.30, 0.50] } else { vec![config.attack.rate] };
    let mut sweep_rows = Vec::new();

    for &rate in &rates {
        let spec = config.poison_spec_at(rate);
        let poisoned = make_poisoned_dataset(&source, &spec, &vocab, max)?;
        let tag = rate_tag(rate);
        let (poison_file, ckpt_file, log_file) = if sweep {
            (
                format!("poisoned_{tag}.tsv"),
                format!("backdoored_{tag}.ckpt"),
                format!("train_attack_{tag}.log.jsonl"),
            )
        } else {
            ("poisoned.tsv".into(), "backdoored.ckpt".into(), "train_attack.log.jsonl".into())
        };
        write_poisoned_dataset(&run_dir.join(&poison_file), &source, &poisoned)?;

        let (params, logs) =
            train(base_params.clone(), &source, &poisoned, &attack_cfg, Some(&probe))?;
        save_checkpoint(&params, &run_dir.join(&ckpt_file))?;
        write_epoch_logs(&run_dir.join(&log_file), &logs)?;

        let last = logs.last().expect("at least one epoch");
        println!(
            "attack {} rate {:.2}: {} poisoned tuples, final loss {:.4} (clean {:.4} / poisoned {:.4})",
            mode_tag(spec.mode),
            rate,
            poisoned.len(),
            last.loss_total,
            last.loss_clean,
            last.loss_poisoned.unwrap_or(f64::NAN),
        );

        if sweep {
            let rho_clean = sts_evaluate(&params, &sts, None)?;
            let rho_trig = sts_evaluate(&params, &sts, Some((&spec, &vocab)))?;
            let rho_base_trig = sts_evaluate(&base_params, &sts, Some((&spec, &vocab)))?;
            let rd = relative_drop_rho(rho_base_trig * 100.0, rho_trig * 100.0)?;
            let mode = format!("sweep-{tag}");
            append_ledger_row(&ledger, &config.run_id, "sts", &mode, "rho_clean", rho_clean * 100.0)?;
            append_ledger_row(&ledger, &config.run_id, "sts", &mode, "rho_triggered", rho_trig * 100.0)?;
            append_ledger_row(&ledger, &config.run_id, "sts", &mode, "rd_rho", rd)?;
            sweep_rows.push(serde_json::json!({
                "rate": rate,
                "rho_clean": rho_clean * 100.0,
                "rho_triggered": rho_trig * 100.0,
                "rho_clean_model_triggered": rho_base_trig * 100.0,
                "rd_rho": rd,
            }));
        }
    }

    if sweep {
        // High poisoning rates are expected to cost clean utility; flag
        // the run when p=0.5 does not score below p=0.1.
        let rho_at = |r: f64| {
            sweep_rows
                .iter()
                .find(|row| (row["rate"].as_f64().unwrap() - r).abs() < 1e-12)
                .and_then(|row| row["rho_clean"].as_f64())
        };
        let violation = match (rho_at(0.10), rho_at(0.50)) {
            (Some(lo), Some(hi)) => hi >= lo,
            _ => false,
        };
        let report = serde_json::json!({
            "rates": sweep_rows,
            "monotonicity_violation": violation,
        });
        write_json(&run_dir.join("sweep_report.json"), &report)?;
        println!(
            "sweep report: {} rates -> {}{}",
            rates.len(),
            run_dir.join("sweep_report.json").display(),
            if violation { " (clean utility did not degrade at p=0.5 vs p=0.1)" } else { "" }
        );
    }
    Ok(())
}

struct CheckList {
    lines: Vec<(String, bool)>,
}

impl CheckList {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn assert(&mut self, name: &str, pass: bool, detail: String) {
        println!("check {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        self.lines.push((format!("{name} ({detail})"), pass));
    }

    fn finish(self) -> Result<(), CliError> {
        let failed: Vec<String> =
            self.lines.into_iter().filter(|(_, p)| !p).map(|(n, _)| n).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Check(failed.join("; ")))
        }
    }
}

fn cmd_eval(
    config: &ExperimentConfig,
    clean: Option<&Path>,
    backdoored: Option<&Path>,
    check: bool,
) -> Result<(), CliError> {
    let vocab = read_vocab(config)?;
    let run_dir = config.run_dir();
    let m = load_model(&clean.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("clean.ckpt")))?;
    let mt = load_model(
        &backdoored.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("backdoored.ckpt")),
    )?;
    let max = m.config.max_seq_len;
    let sts = load_sts(&config.paths.data_dir.join("sts.tsv"), &vocab, max)?;
    let spec = config.poison_spec();

    let rho_m_clean = sts_evaluate(&m, &sts, None)?;
    let rho_mt_clean = sts_evaluate(&mt, &sts, None)?;
    let rho_m_trig = sts_evaluate(&m, &sts, Some((&spec, &vocab)))?;
    let rho_mt_trig = sts_evaluate(&mt, &sts, Some((&spec, &vocab)))?;
    let rd = relative_drop_rho(rho_m_trig * 100.0, rho_mt_trig * 100.0)?;
    let utility_drop_points = (rho_m_clean - rho_mt_clean) * 100.0;

    let (asr, mean_cosine) = if spec.mode.is_targeted() {
        let target_text = spec.target_sentence.as_deref().expect("validated targeted spec");
        let target = tokenize(target_text, &vocab, max)?;
        let probes = load_unlabeled(&config.paths.data_dir.join("probes.txt"), &vocab, max)?;
        let backdoored_probes = triggered_copies(&probes, &spec, &vocab, max, "eval.asr")?;
        let out = asr_sts(&mt, &backdoored_probes, &target, config.eval.asr_threshold)?;
        (Some(out.rate), Some(out.mean_cosine))
    } else {
        (None, None)
    };

    let report = MetricsReport {
        run_id: config.run_id.clone(),
        dataset: "sts".into(),
        mode: mode_tag(spec.mode),
        rho_clean: Some(rho_m_trig * 100.0),
        rho_backdoored: Some(rho_mt_trig * 100.0),
        rd_rho: Some(rd),
        ca: None,
        ba: None,
        rd_accuracy: None,
        asr: asr.map(|r| r * 100.0),
        mean_target_cosine: mean_cosine,
        threshold: asr.is_some().then_some(config.eval.asr_threshold),
    };
    report.validate()?;
    let ledger = run_dir.join("results.tsv");
    report.append_to_ledger(&ledger)?;
    append_ledger_row(&ledger, &config.run_id, "sts", "clean-model", "rho_clean_pairs", rho_m_clean * 100.0)?;
    append_ledger_row(&ledger, &config.run_id, "sts", "backdoored-model", "rho_clean_pairs", rho_mt_clean * 100.0)?;
    append_ledger_row(&ledger, &config.run_id, "sts", "attack", "utility_drop_points", utility_drop_points)?;

    #[derive(Serialize)]
    struct EvalReport<'a> {
        #[serde(flatten)]
        report: &'a MetricsReport,
        rho_clean_model_clean_pairs: f64,
        rho_backdoored_model_clean_pairs: f64,
        utility_drop_points: f64,
    }
    write_json(
        &run_dir.join("metrics_eval.json"),
        &EvalReport {
            report: &report,
            rho_clean_model_clean_pairs: rho_m_clean * 100.0,
            rho_backdoored_model_clean_pairs: rho_mt_clean * 100.0,
            utility_drop_points,
        },
    )?;

    println!(
        "similarity: clean model {:.2} -> backdoored {:.2} on clean pairs; {:.2} -> {:.2} on triggered pairs (RD {:.2}%)",
        rho_m_clean * 100.0,
        rho_mt_clean * 100.0,
        rho_m_trig * 100.0,
        rho_mt_trig * 100.0,
        rd
    );
    if let (Some(asr), Some(cos)) = (asr, mean_cosine) {
        println!(
            "targeted: attack success {:.1}% at threshold {:.2}, mean target cosine {:.4}",
            asr * 100.0,
            config.eval.asr_threshold,
            cos
        );
    }

    if check {
        let t = &config.eval.check;
        let mut checks = CheckList::new();
        checks.assert(
            "rho_clean >= min",
            rho_m_clean >= t.min_rho_clean,
            format!("{:.4} vs {:.4}", rho_m_clean, t.min_rho_clean),
        );
        checks.assert(
            "utility_drop <= max",
            utility_drop_points <= t.max_clean_drop_points,
            format!("{:.2} vs {:.2} points", utility_drop_points, t.max_clean_drop_points),
        );
        if spec.mode.is_targeted() {
            let (asr, cos) = (asr.unwrap(), mean_cosine.unwrap());
            checks.assert(
                "mean_target_cosine >= min",
                cos >= t.min_target_cosine,
                format!("{:.4} vs {:.4}", cos, t.min_target_cosine),
            );
            checks.assert(
                "asr >= min",
                asr >= t.min_asr,
                format!("{:.4} vs {:.4}", asr, t.min_asr),
            );
        } else {
            checks.assert(
                "rho_triggered <= max",
                rho_mt_trig <= t.max_rho_triggered,
                format!("{:.4} vs {:.4}", rho_mt_trig, t.max_rho_triggered),
            );
            checks.assert("rd_rho >= 100%", rd >= 100.0, format!("{rd:.2}%"));
        }
        checks.finish()?;
    }
    Ok(())
}

fn cmd_transfer(
    config: &ExperimentConfig,
    clean: Option<&Path>,
    backdoored: Option<&Path>,
    check: bool,
) -> Result<(), CliError> {
    let vocab = read_vocab(config)?;
    let run_dir = config.run_dir();
    let m = load_model(&clean.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("clean.ckpt")))?;
    let mt = load_model(
        &backdoored.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("backdoored.ckpt")),
    )?;
    let max = m.config.max_seq_len;
    let spec = config.poison_spec();
    let ledger = run_dir.join("results.tsv");
    let data_dir = &config.paths.data_dir;

    let target = if spec.mode.is_targeted() {
        Some(tokenize(spec.target_sentence.as_deref().expect("validated"), &vocab, max)?)
    } else {
        None
    };

    #[derive(Serialize)]
    struct TaskReport {
        task: String,
        ca_clean_model: f64,
        ba_clean_model: f64,
        ca_backdoored_model: f64,
        ba_backdoored_model: f64,
        rd_accuracy: f64,
        asr_c: Option<f64>,
        target_label: Option<usize>,
        target_confidence: Option<f64>,
    }

    let tasks = [("sentiment", "cls_sentiment"), ("subjectivity", "cls_subjectivity")];
    let mut reports = Vec::new();
    let mut clean_heads = Vec::new();

    for (task, stem) in tasks {
        let (_, train_set) =
            load_classification(&data_dir.join(format!("{stem}_train.tsv")), &vocab, max)?;
        let (_, test_set) =
            load_classification(&data_dir.join(format!("{stem}_test.tsv")), &vocab, max)?;
        let head_cfg = config.head_config(task);

        let (features_m, labels_m) = featurize(&m, &train_set)?;
        let head_m = train_head(features_m.view(), &labels_m, &head_cfg)?;
        let out_m = evaluate_transfer(&m, &head_m, &test_set, Some((&spec, &vocab)), None, None)?;

        let (features_mt, labels_mt) = featurize(&mt, &train_set)?;
        let head_mt = train_head(features_mt.view(), &labels_mt, &head_cfg)?;
        let (target_label, target_confidence) = match &target {
            Some(t) => {
                let (label, confidence) = label_of_target(&mt, &head_mt, t)?;
                (Some(label), Some(confidence))
            }
            None => (None, None),
        };
        let out_mt = evaluate_transfer(
            &mt,
            &head_mt,
            &test_set,
            Some((&spec, &vocab)),
            target_label,
            Some(out_m.ba),
        )?;
        let rd = out_mt.rd.expect("reference provided");

        save_head(&run_dir.join(format!("head_{task}_clean.bin")), &head_m)?;
        save_head(&run_dir.join(format!("head_{task}_backdoored.bin")), &head_mt)?;

        let dataset = format!("cls-{task}");
        append_ledger_row(&ledger, &config.run_id, &dataset, "clean-model", "ca", out_m.ca * 100.0)?;
        append_ledger_row(&ledger, &config.run_id, &dataset, "clean-model", "ba", out_m.ba * 100.0)?;
        append_ledger_row(&ledger, &config.run_id, &dataset, "backdoored-model", "ca", out_mt.ca * 100.0)?;
        append_ledger_row(&ledger, &config.run_id, &dataset, "backdoored-model", "ba", out_mt.ba * 100.0)?;
        append_ledger_row(&ledger, &config.run_id, &dataset, "attack", "rd_accuracy", rd)?;
        if let Some(asr_c) = out_mt.asr_c {
            append_ledger_row(&ledger, &config.run_id, &dataset, "attack", "asr_c", asr_c * 100.0)?;
        }

        println!(
            "{task}: clean model CA {:.1}% BA {:.1}%; backdoored CA {:.1}% BA {:.1}% (RD {:.1}%){}",
            out_m.ca * 100.0,
            out_m.ba * 100.0,
            out_mt.ca * 100.0,
            out_mt.ba * 100.0,
            rd,
            match out_mt.asr_c {
                Some(a) => format!(", ASR_c {:.1}%", a * 100.0),
                None => String::new(),
            }
        );

        reports.push(TaskReport {
            task: task.to_string(),
            ca_clean_model: out_m.ca * 100.0,
            ba_clean_model: out_m.ba * 100.0,
            ca_backdoored_model: out_mt.ca * 100.0,
            ba_backdoored_model: out_mt.ba * 100.0,
            rd_accuracy: rd,
            asr_c: out_mt.asr_c.map(|a| a * 100.0),
            target_label,
            target_confidence,
        });
        clean_heads.push(head_m);
    }

    // Candidate target sentences binned by clean-model head confidence.
    #[derive(Serialize)]
    struct CategoryRow {
        sentence: String,
        category: crate::transfer::TargetCategory,
        labels: [usize; 2],
        confidences: [f64; 2],
    }
    let mut candidates: Vec<String> =
        target_candidates().iter().map(|s| s.to_string()).collect();
    if let Some(t) = &config.attack.target_sentence {
        if !candidates.contains(t) {
            candidates.push(t.clone());
        }
    }
    let mut categories = Vec::new();
    for sentence in &candidates {
        let example = tokenize(sentence, &vocab, max)?;
        let profile = categorize_target(&m, &clean_heads[0], &clean_heads[1], &example)?;
        categories.push(CategoryRow {
            sentence: sentence.clone(),
            category: profile.category,
            labels: profile.labels,
            confidences: profile.confidences,
        });
    }

    #[derive(Serialize)]
    struct TransferReport {
        tasks: Vec<TaskReport>,
        target_categories: Vec<CategoryRow>,
    }
    write_json(
        &run_dir.join("transfer_report.json"),
        &TransferReport { tasks: reports, target_categories: categories },
    )?;

    if check {
        let t = &config.eval.check;
        let mut checks = CheckList::new();
        let report_file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join("transfer_report.json"))?)?;
        let tasks_json = report_file["tasks"].as_array().expect("tasks array");
        for task_json in tasks_json {
            let task = task_json["task"].as_str().unwrap_or("?");
            let ca_gap = (task_json["ca_clean_model"].as_f64().unwrap_or(f64::NAN)
                - task_json["ca_backdoored_model"].as_f64().unwrap_or(f64::NAN))
            .max(0.0);
            checks.assert(
                &format!("{task}: ca within {} points", t.max_ca_drop_points),
                ca_gap <= t.max_ca_drop_points,
                format!("gap {ca_gap:.2}"),
            );
        }
        if spec.mode.is_targeted() {
            // The targeted claim is tied to the sentiment task and its
            // categorized target.
            let asr_c = tasks_json
                .iter()
                .find(|j| j["task"].as_str() == Some("sentiment"))
                .and_then(|j| j["asr_c"].as_f64())
                .unwrap_or(0.0)
                / 100.0;
            checks.assert(
                &format!("sentiment: asr_c >= {}", t.min_asr_c),
                asr_c >= t.min_asr_c,
                format!("{asr_c:.4}"),
            );
        } else {
            // Non-targeted damage varies by task; require the attack to
            // break at least one downstream task past the threshold.
            let best = tasks_json
                .iter()
                .filter_map(|j| j["rd_accuracy"].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            checks.assert(
                &format!("best task rd_accuracy >= {}%", t.min_transfer_rd),
                best >= t.min_transfer_rd,
                format!("{best:.2}%"),
            );
        }
        checks.finish()?;
    }
    Ok(())
}

fn cmd_analyze(
    config: &ExperimentConfig,
    clean: Option<&Path>,
    backdoored: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = read_vocab(config)?;
    let run_dir = config.run_dir();
    let m = load_model(&clean.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("clean.ckpt")))?;
    let mt = load_model(
        &backdoored.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("backdoored.ckpt")),
    )?;
    let max = m.config.max_seq_len;
    let spec = config.poison_spec();

    // Hybrids: embeddings from one source, transformer blocks from the
    // other.
    let hybrid_emb = build_hybrid(&mt, &m, "backdoored", "clean")?;
    let hybrid_enc = build_hybrid(&m, &mt, "clean", "backdoored")?;

    let probes = load_unlabeled(&config.paths.data_dir.join("probes.txt"), &vocab, max)?;
    let n_cluster = config.eval.n_cluster_samples.min(probes.len());
    let clean_samples = &probes[..n_cluster];
    let backdoored_samples =
        triggered_copies(clean_samples, &spec, &vocab, max, "analyze.poison")?;

    let (rows, cluster_report) = embedding_clusters(
        &m,
        &mt,
        &hybrid_emb,
        &hybrid_enc,
        clean_samples,
        &backdoored_samples,
    )?;
    let matrix = stack_rows(&rows);
    let projection = project_2d(matrix.view())?;
    write_projection_tsv(&run_dir.join("projection.tsv"), &rows, projection.coords.view())?;

    let separation = cluster_report
        .within_clean_group
        .min(cluster_report.within_backdoored_group)
        - cluster_report.cross_group;
    let clean_gap = 1.0 - cluster_report.clean_pair_min;
    #[derive(Serialize)]
    struct ClusterFile<'a> {
        #[serde(flatten)]
        report: &'a crate::analysis::ClusterReport,
        separation: f64,
        clean_gap: f64,
        clean_delta: f64,
        explained_ratio: [f64; 2],
    }
    write_json(
        &run_dir.join("cluster_report.json"),
        &ClusterFile {
            report: &cluster_report,
            separation,
            clean_gap,
            clean_delta: config.eval.clean_delta,
            explained_ratio: projection.explained_ratio,
        },
    )?;

    let n_attention = config.eval.n_attention_probes.min(backdoored_samples.len());
    let n_layers = m.config.n_layers;
    let mut clean_per_layer = vec![0.0; n_layers];
    let mut backdoored_per_layer = vec![0.0; n_layers];
    for example in &backdoored_samples[..n_attention] {
        let profile_m = attention_profile(&m, example, &vocab)?;
        let profile_mt = attention_profile(&mt, example, &vocab)?;
        for l in 0..n_layers {
            clean_per_layer[l] += profile_m.per_layer[l] / n_attention as f64;
            backdoored_per_layer[l] += profile_mt.per_layer[l] / n_attention as f64;
        }
    }
    let late = |xs: &[f64]| {
        let tail = &xs[xs.len() / 2..];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let late_clean = late(&clean_per_layer);
    let late_backdoored = late(&backdoored_per_layer);
    #[derive(Serialize)]
    struct AttentionFile {
        clean_per_layer: Vec<f64>,
        backdoored_per_layer: Vec<f64>,
        late_clean: f64,
        late_backdoored: f64,
        late_margin: f64,
        n_probes: usize,
    }
    write_json(
        &run_dir.join("attention_report.json"),
        &AttentionFile {
            clean_per_layer: clean_per_layer.clone(),
            backdoored_per_layer: backdoored_per_layer.clone(),
            late_clean,
            late_backdoored,
            late_margin: late_backdoored - late_clean,
            n_probes: n_attention,
        },
    )?;

    let ledger = run_dir.join("results.tsv");
    let rid = &config.run_id;
    append_ledger_row(&ledger, rid, "analysis", "clusters", "within_clean_group", cluster_report.within_clean_group)?;
    append_ledger_row(&ledger, rid, "analysis", "clusters", "within_backdoored_group", cluster_report.within_backdoored_group)?;
    append_ledger_row(&ledger, rid, "analysis", "clusters", "cross_group", cluster_report.cross_group)?;
    append_ledger_row(&ledger, rid, "analysis", "clusters", "clean_pair_min", cluster_report.clean_pair_min)?;
    append_ledger_row(&ledger, rid, "analysis", "attention", "late_margin", late_backdoored - late_clean)?;

    println!(
        "clusters on triggered inputs: within {:.4}/{:.4}, cross {:.4} (separation {:.4}); clean agreement min {:.4}",
        cluster_report.within_clean_group,
        cluster_report.within_backdoored_group,
        cluster_report.cross_group,
        separation,
        cluster_report.clean_pair_min
    );
    println!(
        "late-layer [CLS]->trigger attention: clean {:.4}, backdoored {:.4} (margin {:+.4}) over {} probes",
        late_clean,
        late_backdoored,
        late_backdoored - late_clean,
        n_attention
    );
    Ok(())
}

fn stack_rows(rows: &[ClusterRow]) -> ndarray::Array2<f64> {
    let d = rows.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut matrix = ndarray::Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        matrix.row_mut(i).assign(&row.vector);
    }
    matrix
}

/// Renders the ledger as an aligned table.
fn render_ledger(text: &str) -> String {
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    if rows.is_empty() {
        return "ledger is empty\n".into();
    }
    let n_cols = rows[0].len();
    let mut widths = vec![0usize; n_cols];
    for row in &rows {
        for (i, cell) in row.iter().enumerate().take(n_cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate().take(n_cols) {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<width$}", width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn cmd_report(config: &ExperimentConfig) -> Result<(), CliError> {
    let ledger = config.run_dir().join("results.tsv");
    if !ledger.exists() {
        return Err(CliError::Config(format!(
            "no ledger at {}; run eval/transfer/analyze first",
            ledger.display()
        )));
    }
    let text = std::fs::read_to_string(&ledger)?;
    print!("{}", render_ledger(&text));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 3);
        assert_eq!(CliError::Check("x".into()).exit_code(), 4);
        assert_eq!(CliError::Other("x".into()).exit_code(), 1);
    }

    #[test]
    fn library_errors_map_to_expected_exit_codes() {
        let divergence: CliError = TrainError::NonFiniteSimilarity.into();
        assert_eq!(divergence.exit_code(), 3);
        let nan: CliError = NnError::NonFiniteGradient("layer0.attn.wq".into()).into();
        assert_eq!(nan.exit_code(), 3);
        let degenerate: CliError = EvalError::DegenerateRanking.into();
        assert_eq!(degenerate.exit_code(), 3);
        let bad_cfg: CliError = NnError::InvalidConfig("d_model".into()).into();
        assert_eq!(bad_cfg.exit_code(), 2);
        let bad_data: CliError = CorpusError::EmptyCorpus.into();
        assert_eq!(bad_data.exit_code(), 2);
        let single: CliError = TransferError::SingleClass.into();
        assert_eq!(single.exit_code(), 2);
    }

    #[test]
    fn rate_tags_are_zero_padded_percentages() {
        assert_eq!(rate_tag(0.05), "p05");
        assert_eq!(rate_tag(0.10), "p10");
        assert_eq!(rate_tag(0.50), "p50");
    }

    #[test]
    fn probe_set_takes_highest_gold_pairs() {
        let lines: Vec<String> = vec!["a b c".into()];
        let vocab = Vocabulary::build(&lines, &["cf".into()]).unwrap();
        let mk = |s: &str| tokenize(s, &vocab, 8).unwrap();
        let pairs = vec![
            StsPair { sent1: mk("a"), sent2: mk("b"), gold_score: 1.0 },
            StsPair { sent1: mk("a b"), sent2: mk("a b"), gold_score: 5.0 },
            StsPair { sent1: mk("b"), sent2: mk("c"), gold_score: 3.0 },
        ];
        let probe = probe_set(&pairs, 2);
        assert_eq!(probe.pairs.len(), 2);
        assert_eq!(probe.pairs[0].0.raw, "a b");
        assert_eq!(probe.pairs[1].0.raw, "b");
    }

    #[test]
    fn ledger_rendering_aligns_columns() {
        let text = "run_id\tdataset\tmode\tmetric\tvalue\nr1\tsts\tclean-model\trho_clean_pairs\t86.500000\n";
        let rendered = render_ledger(text);
        let lines: Vec<&str> = rendered.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("run_id  dataset"));
        assert!(lines[1].starts_with("r1      sts"));
    }

    #[test]
    fn mode_tags_are_kebab_case() {
        assert_eq!(mode_tag(AttackMode::NonTargetedUnsup), "non-targeted-unsup");
        assert_eq!(mode_tag(AttackMode::TargetedSup), "targeted-sup");
    }
}

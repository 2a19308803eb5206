//! Command-line front end binding the toolkit's pieces together.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors, 3 on numerical failures during training. Error messages carry
//! the originating module in brackets. All file output stays inside the
//! output directory the invocation configured.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use sasv_fuse_core::backends::TrainError;
use sasv_fuse_core::metrics::{EerReport, MetricKind, NegativePooling};
use sasv_fuse_core::pipeline::{
    evaluate_entries, gen_synthetic, load_json_config, load_store, read_score_file,
    run_embedding_fusion, run_score_fusion, PipelineConfig, PipelineError, RunManifest,
    ScoreFusionConfig, SyntheticSpec,
};
use sasv_fuse_core::vad::{read_wav, trim_silence, write_wav, AudioError, VadConfig};

#[derive(Parser)]
#[command(
    name = "sasv-fuse",
    version,
    about = "Fusion toolkit for spoofing-aware speaker verification",
    propagate_version = true
)]
struct Cli {
    /// JSON config file; the expected schema depends on the subcommand
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the seed from the config (commands without randomness
    /// accept and ignore it)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Cap the worker thread count; results never depend on it
    /// (falls back to SASV_FUSE_THREADS, then all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an embedding-fusion back-end, score all partitions, and
    /// write model, score files, reports, and manifest
    TrainFusion(TrainFusionArgs),
    /// Train a second-stage model on stacked subsystem score files
    FuseScores(FuseScoresArgs),
    /// Compute SV/SPF/SASV EER tables from score files
    Evaluate(EvaluateArgs),
    /// Generate a synthetic embedding corpus with trial lists
    GenSynth(GenSynthArgs),
    /// Trim silence from a WAV file with the magnitude-based VAD
    VadTrim(VadTrimArgs),
    /// Print summary information about an EMB1 embedding store
    InspectStore(InspectStoreArgs),
}

#[derive(Args)]
struct TrainFusionArgs {
    /// Override the config's output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseScoresArgs {
    /// Override the config's output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Score file to evaluate; repeat for one table column per file
    #[arg(long, required = true, value_name = "FILE")]
    scores: Vec<PathBuf>,

    /// How nontarget and spoof negatives pool into SASV-EER
    /// [default: pooled]
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Directory for the stores, trial lists, and manifest
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Number of speakers [default: 8]
    #[arg(long, value_name = "N")]
    n_speakers: Option<usize>,

    /// Utterances per speaker, partition, and kind [default: 40]
    #[arg(long, value_name = "N")]
    utterances_per_speaker: Option<usize>,

    /// Fraction of trials labeled spoof [default: 0.3]
    #[arg(long, value_name = "F")]
    spoof_fraction: Option<f64>,

    /// ASV embedding dimension [default: 12]
    #[arg(long, value_name = "D")]
    asv_dim: Option<usize>,

    /// Countermeasure embedding dimension [default: 6]
    #[arg(long, value_name = "D")]
    cm_dim: Option<usize>,

    /// Speaker cluster scale, or sign amplitude in xor mode [default: 2.0]
    #[arg(long, value_name = "S")]
    speaker_scale: Option<f64>,

    /// Per-coordinate noise standard deviation [default: 1.0]
    #[arg(long, value_name = "S")]
    noise_scale: Option<f64>,

    /// Countermeasure shift of spoofed utterances [default: 3.0]
    #[arg(long, value_name = "S")]
    spoof_shift: Option<f64>,

    /// Encode speaker identity as coordinate signs, which no linear
    /// model can match between enroll and test [default: off]
    #[arg(long)]
    xor_mode: bool,

    /// Trial counts as train,dev,eval [default: 3000,1500,1500]
    #[arg(long, value_name = "T,D,E", value_delimiter = ',')]
    trials: Option<Vec<usize>>,
}

#[derive(Args)]
struct VadTrimArgs {
    /// Input WAV file (PCM16 or float32)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Output WAV file (written as PCM16)
    #[arg(long, value_name = "FILE")]
    output: PathBuf,

    /// Frame length in milliseconds [default: 25]
    #[arg(long, value_name = "MS")]
    frame_ms: Option<u32>,

    /// Hop length in milliseconds [default: 10]
    #[arg(long, value_name = "MS")]
    hop_ms: Option<u32>,

    /// Silence threshold in dBFS [default: -40]
    #[arg(long, value_name = "DB", allow_hyphen_values = true)]
    threshold_db: Option<f64>,

    /// Discard active runs shorter than this many frames [default: 1]
    #[arg(long, value_name = "N")]
    min_active_frames: Option<usize>,
}

#[derive(Args)]
struct InspectStoreArgs {
    /// EMB1 store file to inspect
    #[arg(long, value_name = "FILE")]
    store: PathBuf,

    /// How many entry ids to list
    #[arg(long, value_name = "N", default_value_t = 8)]
    limit: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    Balanced,
}

impl From<PoolingArg> for NegativePooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => NegativePooling::Pooled,
            PoolingArg::Balanced => NegativePooling::Balanced,
        }
    }
}

/// Optional config schema for `evaluate`.
#[derive(Default, Deserialize)]
#[serde(default)]
struct EvaluateConfig {
    pooling: NegativePooling,
}

struct Failure {
    module: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            module: "cli",
            message: message.into(),
            code: 1,
        }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Failure {
            module: "cli",
            message: format!("{}: {}", path.display(), err),
            code: 2,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(err: PipelineError) -> Self {
        let module = match &err {
            PipelineError::Protocol { .. } => "protocol",
            PipelineError::Store { .. } => "embstore",
            PipelineError::Feature(_) => "features",
            PipelineError::Train(_) | PipelineError::ModelIo(_) => "backends",
            PipelineError::Metric(_) => "metrics",
            _ => "pipeline",
        };
        let code = match &err {
            PipelineError::Train(TrainError::NonFinite { .. }) => 3,
            _ => 2,
        };
        Failure {
            module,
            message: err.to_string(),
            code,
        }
    }
}

impl From<AudioError> for Failure {
    fn from(err: AudioError) -> Self {
        Failure {
            module: "vad",
            message: err.to_string(),
            code: 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error[{}]: {}", failure.module, failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::TrainFusion(args) => train_fusion(&cli, args),
        Command::FuseScores(args) => fuse_scores(&cli, args),
        Command::Evaluate(args) => evaluate(&cli, args),
        Command::GenSynth(args) => gen_synth(&cli, args),
        Command::VadTrim(args) => vad_trim(&cli, args),
        Command::InspectStore(args) => inspect_store(args),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let from_env = match std::env::var("SASV_FUSE_THREADS") {
        Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
            Failure::usage(format!("SASV_FUSE_THREADS must be a positive integer, got '{raw}'"))
        })?),
        Err(_) => None,
    };
    let Some(n) = flag.or(from_env) else {
        return Ok(());
    };
    if n == 0 {
        return Err(Failure::usage("thread count must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("could not configure {n} threads: {e}")))
}

fn require_config(cli: &Cli, command: &str) -> Result<PathBuf, Failure> {
    cli.config
        .clone()
        .ok_or_else(|| Failure::usage(format!("{command} requires --config <FILE>")))
}

fn metric_label(kind: MetricKind) -> &'static str {
    match kind {
        MetricKind::Sv => "SV-EER",
        MetricKind::Spf => "SPF-EER",
        MetricKind::Sasv => "SASV-EER",
    }
}

/// The results table: one metric per row, percentages with two decimals,
/// one column per scored partition.
fn format_table(columns: &[(String, EerReport)]) -> String {
    let label_width = MetricKind::ALL
        .iter()
        .map(|k| metric_label(*k).len())
        .max()
        .unwrap_or(8);
    let col_width = columns
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(4)
        .max(7);
    let mut out = String::new();
    out.push_str(&format!("{:<label_width$}", "metric"));
    for (name, _) in columns {
        out.push_str(&format!("  {name:>col_width$}"));
    }
    out.push('\n');
    for kind in MetricKind::ALL {
        out.push_str(&format!("{:<label_width$}", metric_label(kind)));
        for (_, report) in columns {
            let cell = match report.get(kind) {
                Some(v) => format!("{:.2}%", 100.0 * v),
                None => "n/a".to_string(),
            };
            out.push_str(&format!("  {cell:>col_width$}"));
        }
        out.push('\n');
    }
    out
}

fn train_fusion(cli: &Cli, args: &TrainFusionArgs) -> Result<(), Failure> {
    let path = require_config(cli, "train-fusion")?;
    let mut cfg: PipelineConfig = load_json_config(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let run = run_embedding_fusion(&cfg)?;
    println!(
        "trained {} on {}, wrote {} artifacts to {}",
        run.model.config.kind.as_str(),
        cfg.train_trials.display(),
        run.written.len(),
        cfg.out_dir.display()
    );
    print!(
        "{}",
        format_table(&[
            ("dev".to_string(), run.dev_report),
            ("eval".to_string(), run.eval_report),
        ])
    );
    Ok(())
}

fn fuse_scores(cli: &Cli, args: &FuseScoresArgs) -> Result<(), Failure> {
    let path = require_config(cli, "fuse-scores")?;
    let mut cfg: ScoreFusionConfig = load_json_config(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let run = run_score_fusion(&cfg)?;
    let names: Vec<&str> = cfg.subsystems.iter().map(|s| s.name.as_str()).collect();
    println!(
        "fused [{}] with {}, wrote {} artifacts to {}",
        names.join(", "),
        run.model.config.kind.as_str(),
        run.written.len(),
        cfg.out_dir.display()
    );
    print!(
        "{}",
        format_table(&[
            ("dev".to_string(), run.dev_report),
            ("eval".to_string(), run.eval_report),
        ])
    );
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), Failure> {
    let base: EvaluateConfig = match &cli.config {
        Some(path) => load_json_config(path)?,
        None => EvaluateConfig::default(),
    };
    let pooling = args
        .pooling
        .map(NegativePooling::from)
        .unwrap_or(base.pooling);
    let mut columns = Vec::new();
    for path in &args.scores {
        let entries = read_score_file(path)?;
        let report = evaluate_entries(&entries, pooling)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        columns.push((name, report));
    }
    print!("{}", format_table(&columns));
    Ok(())
}

fn gen_synth(cli: &Cli, args: &GenSynthArgs) -> Result<(), Failure> {
    let mut spec: SyntheticSpec = match &cli.config {
        Some(path) => load_json_config(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.n_speakers {
        spec.n_speakers = v;
    }
    if let Some(v) = args.utterances_per_speaker {
        spec.utterances_per_speaker = v;
    }
    if let Some(v) = args.spoof_fraction {
        spec.spoof_fraction = v;
    }
    if let Some(v) = args.asv_dim {
        spec.asv_dim = v;
    }
    if let Some(v) = args.cm_dim {
        spec.cm_dim = v;
    }
    if let Some(v) = args.speaker_scale {
        spec.speaker_scale = v;
    }
    if let Some(v) = args.noise_scale {
        spec.noise_scale = v;
    }
    if let Some(v) = args.spoof_shift {
        spec.spoof_shift = v;
    }
    if args.xor_mode {
        spec.xor_mode = true;
    }
    if let Some(t) = &args.trials {
        if t.len() != 3 {
            return Err(Failure::usage(format!(
                "--trials takes exactly three comma-separated counts, got {}",
                t.len()
            )));
        }
        spec.trials_per_partition = [t[0], t[1], t[2]];
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let data = gen_synthetic(&spec)?;
    let paths = data.write_to_dir(&args.out)?;

    let mut artifacts = BTreeMap::new();
    let mut digest = |path: &PathBuf| -> Result<(), Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        artifacts.insert(name, sasv_fuse_core::pipeline::sha256_hex(&bytes));
        Ok(())
    };
    for path in paths.stores.values() {
        digest(path)?;
    }
    for path in [&paths.train_trials, &paths.dev_trials, &paths.eval_trials] {
        digest(path)?;
    }
    let manifest = RunManifest {
        tool: "gen-synth".to_string(),
        seed: spec.seed,
        config: serde_json::to_value(&spec).expect("spec serializes"),
        artifacts,
    };
    let manifest_path = args.out.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Failure::io(&manifest_path, e))?;

    println!("wrote corpus to {}", args.out.display());
    for (name, list) in [
        ("train", &data.train),
        ("dev", &data.dev),
        ("eval", &data.eval),
    ] {
        let c = list.counts();
        println!(
            "{name}: {} trials ({} target / {} nontarget / {} spoof)",
            list.len(),
            c.get(sasv_fuse_core::TrialLabel::Target),
            c.get(sasv_fuse_core::TrialLabel::NonTarget),
            c.get(sasv_fuse_core::TrialLabel::Spoof),
        );
    }
    Ok(())
}

fn vad_trim(cli: &Cli, args: &VadTrimArgs) -> Result<(), Failure> {
    let mut cfg: VadConfig = match &cli.config {
        Some(path) => load_json_config(path)?,
        None => VadConfig::default(),
    };
    if let Some(v) = args.frame_ms {
        cfg.frame_ms = v;
    }
    if let Some(v) = args.hop_ms {
        cfg.hop_ms = v;
    }
    if let Some(v) = args.threshold_db {
        cfg.threshold_db = v;
    }
    if let Some(v) = args.min_active_frames {
        cfg.min_active_frames = v;
    }
    let bytes = fs::read(&args.input).map_err(|e| Failure::io(&args.input, e))?;
    let waveform = read_wav(&bytes)?;
    let outcome = trim_silence(&waveform, &cfg)?;
    if outcome.all_silent {
        eprintln!("note: no frame above threshold; output is empty");
    }
    fs::write(&args.output, write_wav(&outcome.waveform))
        .map_err(|e| Failure::io(&args.output, e))?;
    println!(
        "trimmed {} -> {} samples ({:.3}s -> {:.3}s at {} Hz)",
        waveform.samples.len(),
        outcome.waveform.samples.len(),
        waveform.duration_seconds(),
        outcome.waveform.duration_seconds(),
        waveform.sample_rate,
    );
    Ok(())
}

fn inspect_store(args: &InspectStoreArgs) -> Result<(), Failure> {
    let store = load_store(&args.store)?;
    println!("source:  {}", store.source_name());
    println!("dim:     {}", store.dim());
    println!("entries: {}", store.len());
    for e in store.iter().take(args.limit) {
        println!("  {}", e.id);
    }
    if store.len() > args.limit {
        println!("  ... {} more", store.len() - args.limit);
    }
    Ok(())
}

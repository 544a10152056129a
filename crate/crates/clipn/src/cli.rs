//! Command-line entry point.
//!
//! Subcommands: `synth` (generate a benchmark), `train` (fit the "no"
//! encoder), `score` (per-sample score CSV), `eval` (AUROC/FPR95 reports,
//! ROC points and score densities), `gradcheck` (finite-difference check).
//!
//! Every run is a pure function of its flags and seed: invoking a
//! subcommand twice with identical arguments reproduces its output files
//! byte for byte. Each artifact-producing run also writes a
//! `config_echo.json` capturing the effective configuration. Exit codes:
//! 0 success, 1 failed gradient check, 2 configuration error, 3 data
//! error. `CLIPN_THREADS` caps the scoring worker count.

use crate::detect::{self, AtdCompare, ClassTextBank, DetectionResult, Method};
use crate::encoder::{self, EncoderDims, EncoderParams, PromptMode, TrainableMask};
use crate::losses::{self, EpochLoss};
use crate::metric::{self, EvalReport};
use crate::numkernel::{EmbeddingMatrix, Matrix};
use crate::prompt::{self, Vocabulary};
use crate::store::{self, Manifest, ManifestPaths, NamedMatrix, ResolvedManifest, SynthConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};

const DEFAULT_NO_PROMPT_LEN: usize = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) => m,
        }
    }
}

impl From<store::StoreError> for CliError {
    fn from(e: store::StoreError) -> Self {
        match e {
            store::StoreError::Manifest(_) | store::StoreError::BadSynthConfig(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<detect::DetectError> for CliError {
    fn from(e: detect::DetectError) -> Self {
        match e {
            detect::DetectError::UnknownMethod(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<losses::LossError> for CliError {
    fn from(e: losses::LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<prompt::PromptError> for CliError {
    fn from(e: prompt::PromptError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<encoder::EncoderError> for CliError {
    fn from(e: encoder::EncoderError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<metric::MetricError> for CliError {
    fn from(e: metric::MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_data(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("io error on {}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "clipn", version, about = "Negation-prompt OOD detection over embedding files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a deterministic synthetic benchmark and its manifest.
    Synth(SynthArgs),
    /// Train the "no" encoder against the frozen standard encoder.
    Train(TrainArgs),
    /// Write per-sample idness scores for the requested methods.
    Score(ScoreArgs),
    /// Compute AUROC/FPR95 reports plus ROC points and score densities.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Parser, Debug)]
struct SynthArgs {
    /// Output directory for embedding files and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of in-distribution classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Number of out-of-distribution classes.
    #[arg(long, default_value_t = 2)]
    ood_classes: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Samples per class in each split.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Angular noise scale around each class direction.
    #[arg(long, default_value_t = 0.15)]
    spread: f64,
}

#[derive(Parser, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the manifest seed for batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Initial temperature; defaults to the manifest override or 0.07.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Parser, Debug, Clone)]
struct ScoreCommon {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods to run.
    #[arg(long, default_value = "msp,maxlogit,energy,react,odin,ctw,atd")]
    methods: String,
    /// Overrides the checkpoint temperature at inference.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "energy-T", default_value_t = 1.0)]
    energy_t: f64,
    #[arg(long = "odin-T", default_value_t = 1000.0)]
    odin_t: f64,
    #[arg(long = "odin-eps", default_value_t = 0.0014)]
    odin_eps: f64,
    /// Percentile of ID-validation activations used as the ReAct clamp.
    #[arg(long = "react-clamp-pct", default_value_t = 90.0)]
    react_clamp_pct: f64,
    /// Which probabilities ATD compares the unknown mass against.
    #[arg(long = "atd-compare", value_enum, default_value_t = AtdCompareArg::Original)]
    atd_compare: AtdCompareArg,
}

#[derive(Parser, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: ScoreCommon,
}

#[derive(Parser, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: ScoreCommon,
    /// KDE bandwidth for the density CSV; Silverman's rule when absent.
    #[arg(long = "kde-bandwidth")]
    kde_bandwidth: Option<f64>,
    /// Seed recorded in the reports; defaults to the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Parser, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Optional directory for the config echo and report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AtdCompareArg {
    Original,
    Rescaled,
}

impl From<AtdCompareArg> for AtdCompare {
    fn from(a: AtdCompareArg) -> Self {
        match a {
            AtdCompareArg::Original => AtdCompare::Original,
            AtdCompareArg::Rescaled => AtdCompare::Rescaled,
        }
    }
}

/// Parses argv and runs one subcommand, returning the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/version output on stdout with code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => return cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_data(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_data(path, e))
}

fn write_echo<T: Serialize>(out: &Path, echo: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(echo)
        .map_err(|e| CliError::Data(format!("config echo: {e}")))?;
    write_text(&out.join("config_echo.json"), &(text + "\n"))
}

// ---------------------------------------------------------------- synth

#[derive(Serialize)]
struct SynthEcho<'a> {
    subcommand: &'a str,
    out: &'a Path,
    seed: u64,
    classes: usize,
    ood_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        c_id: args.classes,
        c_ood: args.ood_classes,
        dim: args.dim,
        n_per_class: args.per_class,
        intra_spread: args.spread,
        seed: args.seed,
    };
    let out = store::synth_generate(&cfg)?;
    ensure_dir(&args.out)?;

    let to_sections = |names: &[String], banks: &[EmbeddingMatrix]| -> Vec<NamedMatrix> {
        names
            .iter()
            .zip(banks)
            .map(|(n, b)| (n.clone(), b.as_matrix().clone()))
            .collect()
    };
    store::write_embeddings(
        &args.out.join("train.clpn"),
        &to_sections(&out.id_class_names, &out.train),
    )?;
    store::write_embeddings(
        &args.out.join("id_test.clpn"),
        &to_sections(&out.id_class_names, &out.id_test),
    )?;
    store::write_embeddings(
        &args.out.join("ood_test.clpn"),
        &to_sections(&out.ood_class_names, &out.ood_test),
    )?;

    let manifest = Manifest {
        seed: args.seed,
        id_class_names: out.id_class_names.clone(),
        ood_label: "novel".to_string(),
        tau: None,
        paths: ManifestPaths {
            train: "train.clpn".into(),
            id_test: "id_test.clpn".into(),
            ood_test: "ood_test.clpn".into(),
            checkpoint: None,
        },
        prompts: None,
        vocabulary: Some(out.vocab.words()),
    };
    manifest.save(&args.out.join("manifest.toml"))?;
    write_echo(
        &args.out,
        &SynthEcho {
            subcommand: "synth",
            out: &args.out,
            seed: args.seed,
            classes: args.classes,
            ood_classes: args.ood_classes,
            dim: args.dim,
            per_class: args.per_class,
            spread: args.spread,
        },
    )
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainEcho<'a> {
    subcommand: &'a str,
    manifest: &'a Path,
    out: &'a Path,
    seed: u64,
    lr: f64,
    epochs: usize,
    tau: f64,
    no_prompt_len: usize,
}

/// Per-class unit-normalized mean of the training features, standing in
/// for the class direction a pre-trained encoder would assign.
fn class_anchors(train: &[EmbeddingMatrix]) -> Result<Vec<Vec<f64>>, CliError> {
    train
        .iter()
        .map(|bank| {
            let dim = bank.dim();
            let mut mean = vec![0.0; dim];
            for i in 0..bank.rows() {
                for (acc, v) in mean.iter_mut().zip(bank.row(i)) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= bank.rows() as f64;
            }
            crate::numkernel::l2_normalize(&mean)
                .map_err(|e| CliError::Data(format!("degenerate class mean: {e}")))
        })
        .collect()
}

fn read_class_banks(
    path: &Path,
    class_names: &[String],
) -> Result<Vec<EmbeddingMatrix>, CliError> {
    let sections = store::read_embeddings(path)?;
    class_names
        .iter()
        .map(|name| {
            let m = store::find_section(&sections, name)?;
            EmbeddingMatrix::from_unit_rows(m.rows(), m.cols(), m.data().to_vec())
                .map_err(|e| CliError::Data(format!("section {name:?}: {e}")))
        })
        .collect()
}

/// Builds the frozen standard encoder and the trainable "no" encoder from
/// the manifest, its vocabulary and the per-class training features.
fn build_encoders(
    rm: &ResolvedManifest,
    vocab: &Vocabulary,
    train: &[EmbeddingMatrix],
    tau_override: Option<f64>,
) -> Result<(EncoderParams, EncoderParams), CliError> {
    let std_pool = rm.standard_pool()?;
    let no_pool = rm.negation_pool()?;
    let dim = train[0].dim();
    let dims = EncoderDims {
        vocab_rows: vocab.size(),
        token_dim: dim,
        feature_dim: dim,
        no_prompt_len: DEFAULT_NO_PROMPT_LEN,
    };
    let class_token_ids: Vec<Vec<usize>> = rm
        .manifest
        .id_class_names
        .iter()
        .map(|n| prompt::tokenize(n, vocab).map(|t| t.ids))
        .collect::<Result<_, _>>()?;
    let anchors = class_anchors(train)?;
    let mut std_params =
        EncoderParams::standard_from_class_anchors(&class_token_ids, &anchors, dims)?;
    if let Some(tau) = tau_override.or(rm.manifest.tau) {
        if !(tau > 0.0) {
            return Err(CliError::Config(format!("tau must be positive, got {tau}")));
        }
        std_params.log_tau = tau.ln();
    }
    let keyword_ids: Vec<usize> = prompt::negative_keywords(&no_pool, &std_pool)
        .iter()
        .map(|w| vocab.lookup(w))
        .collect();
    let no_params = encoder::init_no_encoder(&std_params, &keyword_ids, DEFAULT_NO_PROMPT_LEN);
    Ok((std_params, no_params))
}

fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,itbo,tso,total\n");
    for e in trace {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.itbo, e.tso, e.total));
    }
    s
}

fn load_manifest(path: &Path) -> Result<ResolvedManifest, CliError> {
    // any manifest problem, including an unreadable file, is a config error
    Manifest::load(path).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let rm = load_manifest(&args.manifest)?;
    let seed = args.seed.unwrap_or(rm.manifest.seed);
    let vocab = rm.vocabulary()?;
    let train_banks = read_class_banks(&rm.train_path(), &rm.manifest.id_class_names)?;
    let (std_params, no_params) = build_encoders(&rm, &vocab, &train_banks, args.tau)?;
    let std_pool = rm.standard_pool()?;
    let no_pool = rm.negation_pool()?;
    let batches = store::assemble_batches(
        &train_banks,
        &rm.manifest.id_class_names,
        &std_pool,
        &no_pool,
        &vocab,
        PromptMode::Learnable,
        seed,
    )?;
    let (trained, trace) =
        losses::train(&batches, &std_params, &no_params, args.lr, args.epochs, seed)?;

    ensure_dir(&args.out)?;
    write_checkpoint(&args.out.join("checkpoint.clpn"), &std_params, &trained)?;
    write_text(&args.out.join("loss_trace.csv"), &trace_csv(&trace))?;

    // manifest copy pointing at the checkpoint; data paths become absolute
    // so the copy works from anywhere
    let mut manifest = rm.manifest.clone();
    manifest.paths.train = rm.train_path();
    manifest.paths.id_test = rm.id_test_path();
    manifest.paths.ood_test = rm.ood_test_path();
    manifest.paths.checkpoint = Some("checkpoint.clpn".into());
    manifest.save(&args.out.join("manifest.toml"))?;

    write_echo(
        &args.out,
        &TrainEcho {
            subcommand: "train",
            manifest: &args.manifest,
            out: &args.out,
            seed,
            lr: args.lr,
            epochs: args.epochs,
            tau: trained.tau(),
            no_prompt_len: DEFAULT_NO_PROMPT_LEN,
        },
    )
}

const CKPT_SECTIONS: [&str; 7] = [
    "std_embedding_table",
    "std_projection",
    "std_log_tau",
    "no_embedding_table",
    "no_projection",
    "no_prompt_tokens",
    "no_log_tau",
];

fn write_checkpoint(
    path: &Path,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
) -> Result<(), CliError> {
    let scalar = |v: f64| Matrix::from_vec(1, 1, vec![v]).expect("1x1");
    let sections: Vec<NamedMatrix> = vec![
        (CKPT_SECTIONS[0].into(), std_params.embedding_table.clone()),
        (CKPT_SECTIONS[1].into(), std_params.projection.clone()),
        (CKPT_SECTIONS[2].into(), scalar(std_params.log_tau)),
        (CKPT_SECTIONS[3].into(), no_params.embedding_table.clone()),
        (CKPT_SECTIONS[4].into(), no_params.projection.clone()),
        (CKPT_SECTIONS[5].into(), no_params.no_prompt_tokens.clone()),
        (CKPT_SECTIONS[6].into(), scalar(no_params.log_tau)),
    ];
    store::write_embeddings(path, &sections)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(EncoderParams, EncoderParams), CliError> {
    let sections = store::read_embeddings(path)?;
    let get = |name: &str| -> Result<Matrix, CliError> {
        Ok(store::find_section(&sections, name)?.clone())
    };
    let scalar = |name: &str| -> Result<f64, CliError> {
        let m = get(name)?;
        if m.rows() != 1 || m.cols() != 1 {
            return Err(CliError::Data(format!("section {name:?} is not a scalar")));
        }
        Ok(m.get(0, 0))
    };
    let std_params = EncoderParams {
        embedding_table: get(CKPT_SECTIONS[0])?,
        projection: get(CKPT_SECTIONS[1])?,
        no_prompt_tokens: Matrix::zeros(0, get(CKPT_SECTIONS[0])?.cols()),
        log_tau: scalar(CKPT_SECTIONS[2])?,
        trainable: TrainableMask::FROZEN,
    };
    let no_params = EncoderParams {
        embedding_table: get(CKPT_SECTIONS[3])?,
        projection: get(CKPT_SECTIONS[4])?,
        no_prompt_tokens: get(CKPT_SECTIONS[5])?,
        log_tau: scalar(CKPT_SECTIONS[6])?,
        trainable: TrainableMask::ALL,
    };
    Ok((std_params, no_params))
}

// ---------------------------------------------------------------- score

#[derive(Clone, Copy)]
struct ScoreOpts {
    energy_t: f64,
    odin_t: f64,
    odin_eps: f64,
    react_clamp: f64,
    atd_compare: AtdCompare,
}

fn score_one(
    f: &[f64],
    bank: &ClassTextBank,
    method: Method,
    opts: &ScoreOpts,
) -> Result<DetectionResult, CliError> {
    let r = match method {
        Method::Msp => detect::msp(f, bank)?,
        Method::MaxLogit => detect::maxlogit(f, bank)?,
        Method::Energy => detect::energy(f, bank, opts.energy_t)?,
        Method::React => detect::react(f, bank, opts.react_clamp, opts.energy_t)?,
        Method::Odin => detect::odin(f, bank, opts.odin_t, opts.odin_eps)?,
        Method::Ctw => detect::ctw(f, bank)?,
        Method::Atd => detect::atd_with_compare(f, bank, opts.atd_compare)?,
    };
    Ok(r)
}

/// Scores every sample with every method, parallelized over samples with
/// order-preserving assembly. The worker count is capped by the
/// `CLIPN_THREADS` environment variable.
fn score_samples(
    samples: &[Vec<f64>],
    bank: &ClassTextBank,
    methods: &[Method],
    opts: &ScoreOpts,
) -> Result<Vec<Vec<DetectionResult>>, CliError> {
    let work = |f: &Vec<f64>| -> Result<Vec<DetectionResult>, CliError> {
        methods.iter().map(|m| score_one(f, bank, *m, opts)).collect()
    };
    let threads = thread_cap().min(samples.len().max(1));
    if threads <= 1 {
        return samples.iter().map(work).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<Vec<Vec<DetectionResult>>, CliError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(work).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
        });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("CLIPN_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).map_or(available, |n| n.min(64)),
        Err(_) => available,
    }
}

/// Flattens the sections of an embedding file into one sample list,
/// preserving section order.
fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let sections = store::read_embeddings(path)?;
    let mut out = Vec::new();
    for (_, m) in &sections {
        for i in 0..m.rows() {
            out.push(m.row(i).to_vec());
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{} holds no samples", path.display())));
    }
    Ok(out)
}

/// Nearest-rank percentile of all activation values in the bank list.
fn activation_percentile(banks: &[EmbeddingMatrix], pct: f64) -> f64 {
    let mut values: Vec<f64> = banks.iter().flat_map(|b| b.data().iter().copied()).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
    let n = values.len();
    let rank = ((pct / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    values[rank - 1]
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, CliError> {
    let methods: Vec<Method> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Method>())
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Config("method list is empty".into()));
    }
    Ok(methods)
}

struct ScoringContext {
    bank: ClassTextBank,
    methods: Vec<Method>,
    opts: ScoreOpts,
    id_samples: Vec<Vec<f64>>,
    ood_samples: Vec<Vec<f64>>,
    seed: u64,
}

fn prepare_scoring(common: &ScoreCommon) -> Result<ScoringContext, CliError> {
    let rm = load_manifest(&common.manifest)?;
    let ckpt_path = rm.checkpoint_path().ok_or_else(|| {
        CliError::Config("manifest has no checkpoint path; run train first".into())
    })?;
    let (std_params, no_params) = read_checkpoint(&ckpt_path)?;
    let vocab = rm.vocabulary()?;
    let std_pool = rm.standard_pool()?;
    let no_pool = rm.negation_pool()?;
    let mut bank = detect::build_bank(
        &rm.manifest.id_class_names,
        &std_pool,
        &no_pool,
        &std_params,
        &no_params,
        &vocab,
        PromptMode::Learnable,
    )?;
    if let Some(tau) = common.tau {
        if !(tau > 0.0) {
            return Err(CliError::Config(format!("tau must be positive, got {tau}")));
        }
        bank.tau = tau;
    }
    let train_banks = read_class_banks(&rm.train_path(), &rm.manifest.id_class_names)?;
    let react_clamp = activation_percentile(&train_banks, common.react_clamp_pct);
    let methods = parse_methods(&common.methods)?;
    if !(common.energy_t > 0.0) {
        return Err(CliError::Config(format!("energy-T must be positive, got {}", common.energy_t)));
    }
    if !(common.odin_t > 0.0) {
        return Err(CliError::Config(format!("odin-T must be positive, got {}", common.odin_t)));
    }
    if common.odin_eps < 0.0 {
        return Err(CliError::Config(format!(
            "odin-eps must be nonnegative, got {}",
            common.odin_eps
        )));
    }
    Ok(ScoringContext {
        bank,
        methods,
        opts: ScoreOpts {
            energy_t: common.energy_t,
            odin_t: common.odin_t,
            odin_eps: common.odin_eps,
            react_clamp,
            atd_compare: common.atd_compare.into(),
        },
        id_samples: read_samples(&rm.id_test_path())?,
        ood_samples: read_samples(&rm.ood_test_path())?,
        seed: rm.manifest.seed,
    })
}

fn scores_csv(rows: &[Vec<DetectionResult>]) -> String {
    let mut s = String::from("sample_index,method,idness,is_id,p_unknown\n");
    for (i, per_method) in rows.iter().enumerate() {
        for r in per_method {
            let is_id = r.is_id.map(|b| b.to_string()).unwrap_or_default();
            let p_unknown = r.p_unknown.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", i, r.method, r.idness, is_id, p_unknown));
        }
    }
    s
}

#[derive(Serialize)]
struct ScoreEchoOwned {
    subcommand: String,
    manifest: PathBuf,
    out: PathBuf,
    methods: String,
    tau: Option<f64>,
    energy_t: f64,
    odin_t: f64,
    odin_eps: f64,
    react_clamp_pct: f64,
    react_clamp: f64,
    atd_compare: String,
    kde_bandwidth: Option<f64>,
    seed: u64,
}

fn make_echo(
    common: &ScoreCommon,
    sub: &str,
    ctx: &ScoringContext,
    kde_bandwidth: Option<f64>,
    seed: u64,
) -> ScoreEchoOwned {
    ScoreEchoOwned {
        subcommand: sub.to_string(),
        manifest: common.manifest.clone(),
        out: common.out.clone(),
        methods: common.methods.clone(),
        tau: common.tau,
        energy_t: common.energy_t,
        odin_t: common.odin_t,
        odin_eps: common.odin_eps,
        react_clamp_pct: common.react_clamp_pct,
        react_clamp: ctx.opts.react_clamp,
        atd_compare: format!("{:?}", common.atd_compare).to_lowercase(),
        kde_bandwidth,
        seed,
    }
}

fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let ctx = prepare_scoring(&args.common)?;
    let id_rows = score_samples(&ctx.id_samples, &ctx.bank, &ctx.methods, &ctx.opts)?;
    let ood_rows = score_samples(&ctx.ood_samples, &ctx.bank, &ctx.methods, &ctx.opts)?;
    ensure_dir(&args.common.out)?;
    write_text(&args.common.out.join("scores_id.csv"), &scores_csv(&id_rows))?;
    write_text(&args.common.out.join("scores_ood.csv"), &scores_csv(&ood_rows))?;
    write_echo(&args.common.out, &make_echo(&args.common, "score", &ctx, None, ctx.seed))
}

// ----------------------------------------------------------------- eval

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ctx = prepare_scoring(&args.common)?;
    let seed = args.seed.unwrap_or(ctx.seed);
    if let Some(h) = args.kde_bandwidth {
        if !(h > 0.0) {
            return Err(CliError::Config(format!("kde-bandwidth must be positive, got {h}")));
        }
    }
    let id_rows = score_samples(&ctx.id_samples, &ctx.bank, &ctx.methods, &ctx.opts)?;
    let ood_rows = score_samples(&ctx.ood_samples, &ctx.bank, &ctx.methods, &ctx.opts)?;

    let mut reports = Vec::with_capacity(ctx.methods.len());
    let mut roc_csv = String::from("method,threshold,tpr,fpr\n");
    let mut density_csv = String::from("method,split,x,density\n");
    for (m_idx, method) in ctx.methods.iter().enumerate() {
        let id_scores: Vec<f64> = id_rows.iter().map(|r| r[m_idx].idness).collect();
        let ood_scores: Vec<f64> = ood_rows.iter().map(|r| r[m_idx].idness).collect();
        let auroc = metric::auroc(&id_scores, &ood_scores)?;
        let fpr95 = metric::fpr_at_tpr(&id_scores, &ood_scores, 0.95)?;
        reports.push(EvalReport {
            method: method.to_string(),
            auroc,
            fpr95,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
            seed,
            id_scores: id_scores.clone(),
            ood_scores: ood_scores.clone(),
        });

        // ROC points at every distinct threshold, descending
        let mut thresholds: Vec<f64> =
            id_scores.iter().chain(&ood_scores).copied().collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        thresholds.dedup();
        for t in &thresholds {
            let tpr =
                id_scores.iter().filter(|&&s| s >= *t).count() as f64 / id_scores.len() as f64;
            let fpr = ood_scores.iter().filter(|&&s| s >= *t).count() as f64
                / ood_scores.len() as f64;
            roc_csv.push_str(&format!("{},{},{},{}\n", method, t, tpr, fpr));
        }

        for (split, scores) in [("id", &id_scores), ("ood", &ood_scores)] {
            let h = args.kde_bandwidth.unwrap_or_else(|| metric::silverman_bandwidth(scores));
            let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
            let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
            let grid = metric::linspace(lo, hi, 201);
            let curve = metric::kde(scores, h, &grid)?;
            for (x, d) in curve.grid.iter().zip(&curve.density) {
                density_csv.push_str(&format!("{},{},{},{}\n", method, split, x, d));
            }
        }
    }

    ensure_dir(&args.common.out)?;
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| CliError::Data(format!("metrics json: {e}")))?;
    write_text(&args.common.out.join("metrics.json"), &(json + "\n"))?;
    let mut csv = String::from("method,auroc,fpr95,n_id,n_ood,seed\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.auroc, r.fpr95, r.n_id, r.n_ood, r.seed
        ));
    }
    write_text(&args.common.out.join("metrics.csv"), &csv)?;
    write_text(&args.common.out.join("roc_points.csv"), &roc_csv)?;
    write_text(&args.common.out.join("densities.csv"), &density_csv)?;
    write_echo(
        &args.common.out,
        &make_echo(&args.common, "eval", &ctx, args.kde_bandwidth, seed),
    )
}

// ------------------------------------------------------------ gradcheck

#[derive(Serialize)]
struct GradcheckReport {
    subcommand: String,
    seed: u64,
    eps: f64,
    max_relative_error: f64,
    threshold: f64,
    pass: bool,
}

const GRADCHECK_THRESHOLD: f64 = 1e-5;

fn cmd_gradcheck(args: &GradcheckArgs) -> i32 {
    let dims = EncoderDims {
        vocab_rows: 64,
        token_dim: 16,
        feature_dim: 16,
        no_prompt_len: DEFAULT_NO_PROMPT_LEN,
    };
    let (batch, std_params, no_params) = losses::random_fixture(args.seed, dims, 4);
    let err = match losses::grad_check(&batch, &std_params, &no_params, args.eps) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let pass = err < GRADCHECK_THRESHOLD;
    println!(
        "gradcheck seed={} eps={:e}: max relative error {:e} ({})",
        args.seed,
        args.eps,
        err,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &args.out {
        let report = GradcheckReport {
            subcommand: "gradcheck".into(),
            seed: args.seed,
            eps: args.eps,
            max_relative_error: err,
            threshold: GRADCHECK_THRESHOLD,
            pass,
        };
        if let Err(e) = ensure_dir(out).and_then(|()| write_echo(out, &report)) {
            eprintln!("error: {}", e.message());
            return e.exit_code();
        }
    }
    if pass {
        0
    } else {
        1
    }
}

//! `bat`: train, evaluate and align distilled neural topic models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! abort. Diagnostics go to stderr, machine-readable results to stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bat_core::align::{
    align_topics, bracket_sample, head_to_head, render_table, topic_distributions, AlignmentReport,
};
use bat_core::checkpoint;
use bat_core::corpus::{load_corpus_dir, BowCorpus};
use bat_core::distill::{load_teacher_logits, surrogate_teacher, TeacherLogits};
use bat_core::evalmetrics::{external_counts_load, top_words, topic_report, DEFAULT_TOP_N};
use bat_core::ntm::{prior_from_alpha, ModelParams};
use bat_core::numerics::SeededRng;
use bat_core::synthetic::{generate, SyntheticSpec};
use bat_core::trainer::{run_restarts, train_to_dir, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser)]
#[command(name = "bat", version, about = "Neural topic models distilled from a document-reconstruction teacher")]
#[command(after_help = "File formats: corpus dir = vocab.txt + {train,dev,test}.jsonl; \
teacher logits = BATL v1 (f32, row-major D x V); checkpoints = BATM v1.\n\
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per restart seed and write run directories.
    Train(TrainArgs),
    /// Score a checkpoint's topics on a corpus split (JSON report on stdout).
    Eval(EvalArgs),
    /// Align the topics of two checkpoints by Jensen-Shannon divergence.
    Align(AlignArgs),
    /// Print the top words of each topic.
    Topics(TopicsArgs),
    /// Write BATL logits of the count-based stand-in teacher.
    SurrogateTeacher(SurrogateArgs),
    /// Validate a BATL teacher file against a corpus split.
    CheckTeacher(CheckTeacherArgs),
    /// Write a seeded synthetic corpus with planted topics.
    Synthesize(SynthArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    /// BATL file with one row per train document (required when lambda > 0).
    #[arg(long)]
    teacher_logits: Option<PathBuf>,
    /// Root directory for run-<seed>/ subdirectories [default: runs].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Number of topics [default: 50].
    #[arg(long)]
    k: Option<usize>,
    /// [default: 500]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 200]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.002].
    #[arg(long)]
    lr: Option<f64>,
    /// Logistic-normal prior concentration [default: 1.0].
    #[arg(long)]
    alpha: Option<f64>,
    /// Teacher weight in [0, 1] [default: 0.75].
    #[arg(long)]
    lambda: Option<f64>,
    /// Softmax temperature [default: 2.0].
    #[arg(long)]
    temp: Option<f64>,
    /// Fraction of N_d teacher entries kept; 0 disables clipping [default: 0].
    #[arg(long)]
    clip: Option<f64>,
    /// Fraction of steps over which the KL weight ramps to 1 [default: 0.25].
    #[arg(long)]
    anneal: Option<f64>,
    /// Encoder hidden width [default: 300].
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    dropout: Option<f64>,
    /// First restart seed; restarts use seed, seed+1, ... [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 5]
    #[arg(long)]
    restarts: Option<usize>,
    /// Run restarts on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    /// JSON reference co-occurrence counts for external NPMI.
    #[arg(long)]
    external_counts: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for resolved_config.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct AlignArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    corpus_dir: PathBuf,
    /// Split used for per-topic NPMI.
    #[arg(long, default_value = "dev")]
    split: String,
    /// Number of best-aligned pairs for the head-to-head count [default: all].
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    brackets: Option<usize>,
    #[arg(long, default_value_t = 3)]
    per_bracket: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print a text table to stderr.
    #[arg(long)]
    table: bool,
    #[arg(long, default_value = "A")]
    label_a: String,
    #[arg(long, default_value = "B")]
    label_b: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TopicsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    n: usize,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SurrogateArgs {
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Weight s of the background term.
    #[arg(long, default_value_t = 0.01)]
    smoothing: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct CheckTeacherArgs {
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    teacher_logits: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    topics: usize,
    #[arg(long, default_value_t = 2000)]
    train_docs: usize,
    #[arg(long, default_value_t = 500)]
    dev_docs: usize,
    #[arg(long, default_value_t = 500)]
    test_docs: usize,
    #[arg(long, default_value_t = 20)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            match e {
                TrainError::Config(_) => CliError::Config(e.to_string()),
                TrainError::MissingTeacher(_) => CliError::Config(format!("{e} (pass --teacher-logits)")),
                other => CliError::Data(other.to_string()),
            }
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| data(format!("{}: {e}", path.display())))
}

fn log_resolved(out_dir: &Path, command: &str, value: &impl Serialize) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Resolved<'a, T: Serialize> {
        command: &'a str,
        config: &'a T,
    }
    let resolved = Resolved { command, config: value };
    log::info!("resolved config: {}", serde_json::to_string(&resolved).expect("serializable"));
    write_json(&out_dir.join(RESOLVED_CONFIG), &resolved)
}

fn load_corpus(dir: &Path) -> Result<BowCorpus, CliError> {
    load_corpus_dir(dir).map_err(data)
}

fn load_model(path: &Path, corpus: &BowCorpus) -> Result<ModelParams, CliError> {
    let params = checkpoint::load(path).map_err(data)?;
    if params.hyper.vocab_size != corpus.vocab_size() {
        return Err(CliError::Data(format!(
            "{}: model vocabulary size {} does not match corpus vocabulary size {}",
            path.display(),
            params.hyper.vocab_size,
            corpus.vocab_size()
        )));
    }
    Ok(params)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = args.$flag.clone() {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(k => topics);
    set!(epochs => epochs);
    set!(batch_size => batch_size);
    set!(lr => learning_rate);
    set!(alpha => alpha);
    set!(lambda => kd.lambda);
    set!(temp => kd.temperature);
    set!(clip => kd.clip);
    set!(anneal => anneal);
    set!(hidden_dim => hidden_dim);
    set!(dropout => dropout);
    set!(seed => seed);
    set!(restarts => restarts);
    if args.corpus_dir.is_some() {
        cfg.corpus_dir = args.corpus_dir.clone();
    }
    if args.teacher_logits.is_some() {
        cfg.teacher_logits = args.teacher_logits.clone();
    }
    if args.out_dir.is_some() {
        cfg.output_dir = args.out_dir.clone();
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("runs"));
    }
    cfg.validate()?;
    cfg.hyper(2).validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.corpus_dir.is_none() {
        return Err(CliError::Config("missing --corpus-dir".into()));
    }
    if cfg.uses_teacher() && cfg.teacher_logits.is_none() {
        return Err(CliError::Config(format!(
            "lambda = {} needs a teacher: pass --teacher-logits (or use --lambda 0)",
            cfg.kd.lambda
        )));
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args)?;
    let out_dir = cfg.output_dir.clone().expect("resolved");
    fs::create_dir_all(&out_dir).map_err(|e| data(format!("{}: {e}", out_dir.display())))?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        train: &'a TrainConfig,
        parallel: bool,
    }
    log_resolved(&out_dir, "train", &Resolved { train: &cfg, parallel: args.parallel })?;

    let corpus = load_corpus(cfg.corpus_dir.as_deref().expect("resolved"))?;
    let teacher: Option<TeacherLogits> = match (&cfg.teacher_logits, cfg.uses_teacher()) {
        (Some(path), true) => {
            let docs = corpus.split(&cfg.train_split).map_err(data)?.len();
            Some(load_teacher_logits(path, docs, corpus.vocab_size()).map_err(data)?)
        }
        _ => None,
    };
    let has_dev = corpus.has_split(&cfg.dev_split);
    if cfg.restarts == 1 && !has_dev {
        log::warn!("no {:?} split: training without dev NPMI", cfg.dev_split);
        let outcome = train_to_dir(&corpus, teacher.as_ref(), &cfg, &out_dir)?;
        println!("{}", serde_json::to_string(&outcome.record).expect("serializable"));
    } else {
        let outcome = run_restarts(&corpus, teacher.as_ref(), &cfg, Some(&out_dir), args.parallel)?;
        println!("{}", serde_json::to_string_pretty(&outcome.aggregate).expect("serializable"));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    log_resolved(&args.out_dir, "eval", &args)?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let params = load_model(&args.model, &corpus)?;
    let docs = corpus.split(&args.split).map_err(data)?;
    let external = args
        .external_counts
        .as_deref()
        .map(|p| external_counts_load(p, corpus.vocabulary()))
        .transpose()
        .map_err(data)?;
    let prior = prior_from_alpha(params.hyper.alpha, params.hyper.topics).map_err(data)?;
    let report = topic_report(&params, corpus.vocabulary(), docs, &prior, external.as_ref()).map_err(data)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_align(args: AlignArgs) -> Result<(), CliError> {
    log_resolved(&args.out_dir, "align", &args)?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let a = load_model(&args.model_a, &corpus)?;
    let b = load_model(&args.model_b, &corpus)?;
    let docs = corpus.split(&args.split).map_err(data)?;
    let score = |p: &ModelParams| {
        let prior = prior_from_alpha(p.hyper.alpha, p.hyper.topics).map_err(data)?;
        topic_report(p, corpus.vocabulary(), docs, &prior, None).map_err(data)
    };
    let (report_a, report_b) = (score(&a)?, score(&b)?);
    let npmi_a: Vec<f64> = report_a.topics.iter().map(|t| t.npmi).collect();
    let npmi_b: Vec<f64> = report_b.topics.iter().map(|t| t.npmi).collect();
    let dists_a = topic_distributions(&a).map_err(data)?;
    let dists_b = topic_distributions(&b).map_err(data)?;
    let pairs = align_topics(&dists_a, &dists_b, &npmi_a, &npmi_b).map_err(data)?;

    let threshold = args.threshold.unwrap_or(pairs.len());
    let wins = head_to_head(&pairs, threshold).map_err(|e| CliError::Config(e.to_string()))?;
    let sampled = args
        .brackets
        .map(|n| bracket_sample(&pairs, n, args.per_bracket, &mut SeededRng::new(args.seed)))
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if args.table {
        let words = |r: &bat_core::evalmetrics::TopicReport| -> Vec<Vec<String>> {
            r.topics.iter().map(|t| t.words.clone()).collect()
        };
        let shown = sampled.as_deref().unwrap_or(&pairs);
        eprint!("{}", render_table(shown, &words(&report_a), &words(&report_b), &args.label_a, &args.label_b));
    }
    let report = AlignmentReport {
        pairs,
        wins,
        threshold,
        sampled,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_topics(args: TopicsArgs) -> Result<(), CliError> {
    log_resolved(&args.out_dir, "topics", &args)?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let params = load_model(&args.model, &corpus)?;
    let topics = top_words(&params, args.n).map_err(|e| CliError::Config(e.to_string()))?;
    let vocab = corpus.vocabulary();
    let named: Vec<Vec<&str>> = topics
        .iter()
        .map(|t| t.word_ids().iter().map(|&w| vocab.token(w).unwrap_or("<unk>")).collect())
        .collect();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&named).expect("serializable"));
    } else {
        for (k, words) in named.iter().enumerate() {
            println!("{k:>3}  {}", words.join(" "));
        }
    }
    Ok(())
}

fn cmd_surrogate(args: SurrogateArgs) -> Result<(), CliError> {
    log_resolved(&args.out_dir, "surrogate-teacher", &args)?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let teacher = surrogate_teacher(&corpus, &args.split, args.smoothing).map_err(data)?;
    teacher.write(&args.out).map_err(data)?;
    eprintln!(
        "wrote {} ({} docs x {} words)",
        args.out.display(),
        teacher.docs(),
        teacher.vocab_size()
    );
    Ok(())
}

fn cmd_check_teacher(args: CheckTeacherArgs) -> Result<(), CliError> {
    log_resolved(&args.out_dir, "check-teacher", &args)?;
    let corpus = load_corpus(&args.corpus_dir)?;
    let docs = corpus.split(&args.split).map_err(data)?.len();
    let t = load_teacher_logits(&args.teacher_logits, docs, corpus.vocab_size()).map_err(data)?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for d in 0..t.docs() {
        for &x in t.row(d) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    #[derive(Serialize)]
    struct Summary {
        docs: usize,
        vocab_size: usize,
        min_logit: f32,
        max_logit: f32,
    }
    let s = Summary {
        docs: t.docs(),
        vocab_size: t.vocab_size(),
        min_logit: lo,
        max_logit: hi,
    };
    println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
    Ok(())
}

fn cmd_synthesize(args: SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        vocab_size: args.vocab_size,
        topics: args.topics,
        train_docs: args.train_docs,
        dev_docs: args.dev_docs,
        test_docs: args.test_docs,
        seed: args.seed,
        words_per_topic: SyntheticSpec::default().words_per_topic.min(args.vocab_size),
        ..SyntheticSpec::default()
    };
    if spec.vocab_size == 0 || spec.topics == 0 || spec.train_docs == 0 {
        return Err(CliError::Config("vocab-size, topics and train-docs must be >= 1".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| data(format!("{}: {e}", args.out.display())))?;
    log_resolved(&args.out, "synthesize", &spec)?;
    let (corpus, _) = generate(&spec).map_err(data)?;
    corpus.write_dir(&args.out).map_err(data)?;
    eprintln!(
        "wrote {} (V={}, {} documents)",
        args.out.display(),
        corpus.vocab_size(),
        corpus.num_docs()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Align(a) => cmd_align(a),
        Command::Topics(a) => cmd_topics(a),
        Command::SurrogateTeacher(a) => cmd_surrogate(a),
        Command::CheckTeacher(a) => cmd_check_teacher(a),
        Command::Synthesize(a) => cmd_synthesize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use topicrefine::corpus::{generate_synthetic, load_corpus, RefineContext, SyntheticConfig, TopicMode};
use topicrefine::net::read_manifest;
use topicrefine::objective::{Ablation, CoarseSource};
use topicrefine::pipeline::Variant;
use topicrefine::run::{self, Classifier, EvalOptions, Precision, RunConfig, CONFIG_FILE, REPORT_JSON};
use topicrefine::Error;

#[derive(Parser)]
#[command(
    name = "topicrefine",
    version,
    about = "Topic-aware dialogue generation with topic refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dialogue corpus.
    GenData(GenDataArgs),
    /// Train a model, writing every artifact into the run directory.
    Train(Box<TrainArgs>),
    /// Generate for the held-out split and score it.
    Eval(EvalArgs),
    /// Run the three passes on a free-form history.
    Generate(GenerateArgs),
    /// Summarize a run directory or checkpoint.
    Inspect(InspectArgs),
}

/// Parses a kebab-case enum through its serde representation.
fn enum_arg<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dialogues: usize,
    #[arg(long, default_value_t = 4)]
    turns: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    #[arg(long, default_value_t = 0.7)]
    stickiness: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "multi-label", value_parser = enum_arg::<TopicMode>)]
    mode: TopicMode,
    #[arg(long, default_value_t = 0.0)]
    extra_topic_prob: f64,
    #[arg(long)]
    profiles: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = enum_arg::<TopicMode>)]
    expect_mode: Option<TopicMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = enum_arg::<Precision>)]
    precision: Option<Precision>,
    #[arg(long, value_parser = enum_arg::<Ablation>)]
    ablation: Option<Ablation>,
    #[arg(long, value_parser = enum_arg::<Classifier>)]
    classifier: Option<Classifier>,
    #[arg(long, value_parser = enum_arg::<RefineContext>)]
    refine_context: Option<RefineContext>,
    #[arg(long, value_parser = enum_arg::<CoarseSource>)]
    coarse_source: Option<CoarseSource>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    max_decode: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_parser = enum_arg::<Variant>)]
    variant: Option<Variant>,
    /// Score gold responses against themselves.
    #[arg(long)]
    oracle_gold: bool,
    /// Recompute the report from the existing generations file.
    #[arg(long, conflicts_with_all = ["variant", "oracle_gold", "gold_topics", "checkpoint"])]
    rescore: bool,
    /// Condition the refine pass on gold topics.
    #[arg(long)]
    gold_topics: bool,
    /// Checkpoint stem (defaults to the latest).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    run: PathBuf,
    /// One utterance per line, optionally `text<TAB>topic|topic`; reads stdin when absent.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, value_parser = enum_arg::<Variant>)]
    variant: Option<Variant>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory or checkpoint stem.
    path: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Range(_) => 2,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Contract(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::Json(e)))
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_dialogues: a.dialogues,
        turns: a.turns,
        vocab_size: a.vocab_size,
        n_topics: a.topics,
        stickiness: a.stickiness,
        seed: a.seed,
        mode: a.mode,
        extra_topic_prob: a.extra_topic_prob,
        profiles: a.profiles,
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::from(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })?;
    }
    corpus.save(&a.out)?;
    println!("{}", json(&corpus.stats())?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        corpus => corpus, out => out_dir, seed => seed, precision => precision,
        ablation => ablation, classifier => classifier, refine_context => refine_context,
        coarse_source => coarse_source, steps => steps, batch_size => batch_size,
        lr => adamw.lr, warmup => adamw.warmup_steps, weight_decay => adamw.weight_decay,
        max_context => max_context, max_decode => decode.max_decode,
        d_model => model.d_model, layers => model.n_layers, heads => model.n_heads, d_ff => model.d_ff,
        eval_fraction => eval_fraction, checkpoint_every => checkpoint_every,
    );
    if a.expect_mode.is_some() {
        cfg.expect_mode = a.expect_mode;
    }
    if cfg.corpus.as_os_str().is_empty() {
        return Err(usage("no corpus given (use --corpus or a config file)".into()));
    }
    if !cfg.corpus.is_file() {
        return Err(usage(format!("corpus not found: {}", cfg.corpus.display())));
    }
    let summary = run::train(&cfg, a.resume)?;
    match &summary.last {
        Some(l) => println!(
            "step {} l_one {:.4} l_topic {:.4} l_refine {:.4} l_total {:.4}",
            l.step, l.l_one, l.l_topic, l.l_refine, l.l_total
        ),
        None => println!("no steps run"),
    }
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn require_run(dir: &Path) -> Result<(), Failure> {
    if dir.join(CONFIG_FILE).is_file() {
        Ok(())
    } else {
        Err(usage(format!("not a run directory: {}", dir.display())))
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_run(&a.run)?;
    let report = if a.rescore {
        run::rescore(&a.run)?
    } else {
        let opts = EvalOptions {
            variant: a.variant,
            oracle_gold: a.oracle_gold,
            gold_topics: a.gold_topics,
            checkpoint: a.checkpoint,
        };
        run::evaluate(&a.run, &opts)?
    };
    print!("{}", report.to_table());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    require_run(&a.run)?;
    let lines: Vec<String> = match &a.history {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| {
                Failure::from(Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })?
            .lines()
            .map(str::to_string)
            .collect(),
        None => io::stdin().lock().lines().collect::<Result<_, _>>().map_err(|e| {
            Failure::from(Error::Io {
                path: PathBuf::from("<stdin>"),
                source: e,
            })
        })?,
    };
    let lines: Vec<String> = lines.into_iter().filter(|l| !l.trim().is_empty()).collect();
    let out = run::generate(&a.run, &lines, a.variant)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string(&out).map_err(|e| Failure::from(Error::Json(e)))?
        );
    } else {
        println!("coarse:  {}", out.coarse);
        println!("topics:  {}", out.topics.join(" | "));
        if let Some(r) = &out.refined {
            println!("refined: {r}");
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let stem = if a.path.is_dir() {
        let cfg = RunConfig::load(&a.path.join(CONFIG_FILE))?;
        println!("config: {}", json(&cfg)?);
        if let Ok(c) = load_corpus(&cfg.corpus) {
            println!("corpus: {}", json(&c.stats())?);
        }
        if let Some(last) = run::read_log(&run::log_path(&a.path))?.last() {
            println!("last log line: {}", json(last)?);
        }
        if a.path.join(REPORT_JSON).is_file() {
            println!("report: {}", a.path.join(REPORT_JSON).display());
        }
        match run::latest_checkpoint(&a.path)? {
            Some(s) => s,
            None => {
                println!("no checkpoints");
                return Ok(());
            }
        }
    } else {
        a.path.clone()
    };
    let m = read_manifest(&stem)?;
    println!("checkpoint {} (step {}, {})", stem.display(), m.step, m.dtype);
    let mut scalars = 0usize;
    for t in &m.tensors {
        let n: usize = t.shape.iter().product();
        scalars += n;
        println!("  {:<40} {:?}", t.name, t.shape);
    }
    println!("{} tensors, {scalars} scalars", m.tensors.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}

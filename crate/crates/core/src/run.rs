//! End-to-end runs: a serialisable run configuration, the training loop with
//! checkpoints and resume, evaluation to JSONL plus reports, rescoring and
//! single-history generation. Every artifact lives in one run directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus_samples, load_corpus, serialize_history, Corpus, RefineContext, SampleConfig, Speaker, TopicMode,
    TrainingSample, Utterance,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, ScoredSample, DEFAULT_BUCKET_EDGES};
use crate::net::{load_checkpoint, save_checkpoint, Checkpoint, JointModel, ModelConfig, Params, Tensor};
use crate::objective::{train_step, Ablation, AdamWConfig, CoarseSource, LossBreakdown, OptState, TrainConfig};
use crate::pipeline::{three_pass, DecodeConfig, PipelineConfig, ThreePassOutput, Variant};
use crate::scalar::Scalar;
use crate::vocab::Vocab;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which network classifies topics during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    #[default]
    SharedGpt,
    SeparateBert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub tie_lm_head: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            tie_lm_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Refuse corpora of another mode when set.
    pub expect_mode: Option<TopicMode>,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelShape,
    pub classifier: Classifier,
    pub ablation: Ablation,
    pub refine_context: RefineContext,
    pub coarse_source: CoarseSource,
    pub max_context: usize,
    pub use_roles: bool,
    pub min_count: usize,
    /// Trailing fraction of dialogues held out for evaluation.
    pub eval_fraction: f64,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub decode: DecodeConfig,
    pub variant: Variant,
    pub bucket_edges: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::new(),
            out_dir: PathBuf::from("run"),
            expect_mode: None,
            seed: 42,
            precision: Precision::F32,
            model: ModelShape::default(),
            classifier: Classifier::SharedGpt,
            ablation: Ablation::Full,
            refine_context: RefineContext::Full,
            coarse_source: CoarseSource::ArgmaxTeacherForced,
            max_context: 500,
            use_roles: true,
            min_count: 1,
            eval_fraction: 0.1,
            adamw: AdamWConfig::default(),
            batch_size: 4,
            steps: 1000,
            checkpoint_every: 0,
            decode: DecodeConfig::default(),
            variant: Variant::StageTwoGpt,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus.as_os_str().is_empty() {
            return bad("no corpus path given".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad(format!("eval_fraction {} outside [0, 1)", self.eval_fraction));
        }
        if self.max_context < 2 {
            return bad("max_context must be at least 2".into());
        }
        if self.bucket_edges.is_empty() || self.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bucket_edges must be non-empty and strictly increasing".into());
        }
        if self.adamw.lr.is_nan()
            || self.adamw.lr <= 0.0
            || !(0.0..1.0).contains(&self.adamw.beta1)
            || !(0.0..1.0).contains(&self.adamw.beta2)
        {
            return bad("invalid optimiser hyperparameters".into());
        }
        if self.variant == Variant::StageTwoBert && self.classifier != Classifier::SeparateBert {
            return bad("stage-two-bert evaluation needs --classifier separate-bert".into());
        }
        self.decode.validate()
    }

    pub fn max_decode(&self) -> usize {
        self.decode.max_decode
    }

    /// Longest sequence any pass feeds the model: a refine input of up to
    /// `max_context + max_decode` ids, BOS and a response.
    pub fn max_positions(&self) -> usize {
        self.max_context + 2 * self.max_decode() + 1
    }

    pub fn sample_config(&self, mode: TopicMode) -> SampleConfig {
        SampleConfig {
            mode,
            max_context: self.max_context,
            max_decode: self.max_decode(),
            use_roles: self.use_roles,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ablation: self.ablation,
            refine_context: self.refine_context,
            coarse_source: self.coarse_source,
            max_context: self.max_context,
            max_decode: self.max_decode(),
            adamw: self.adamw.clone(),
        }
    }

    pub fn pipeline_config(&self, mode: TopicMode, variant: Variant) -> PipelineConfig {
        PipelineConfig {
            mode,
            decode: self.decode.clone(),
            variant,
            refine_context: self.refine_context,
            refine_budget: self.max_context + self.max_decode(),
        }
    }

    pub fn model_configs(&self, vocab_size: usize, n_classes: usize) -> Result<(ModelConfig, Option<ModelConfig>)> {
        let gpt = ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            tie_lm_head: self.model.tie_lm_head,
            ..ModelConfig::causal(vocab_size, n_classes, self.max_positions())
        };
        gpt.validate()?;
        let bert = (self.classifier == Classifier::SeparateBert).then(|| gpt.to_encoder());
        Ok((gpt, bert))
    }

    /// Settings that must match for a resumed run; the step budget may grow.
    fn resume_key(&self) -> RunConfig {
        RunConfig {
            steps: 0,
            checkpoint_every: 0,
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Corpus, vocabulary and samples of a run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub train: Vec<TrainingSample>,
    /// Held-out samples, or the training samples when nothing is held out.
    pub eval: Vec<TrainingSample>,
}

/// Loads the corpus and builds samples. The vocabulary is built from the
/// training split unless one is supplied.
pub fn prepare(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<RunData> {
    let corpus = load_corpus(&cfg.corpus)?;
    if let Some(m) = cfg.expect_mode.filter(|&m| m != corpus.mode) {
        return Err(Error::Config(format!(
            "run expects a {m:?} corpus but {} is {:?}",
            cfg.corpus.display(),
            corpus.mode
        )));
    }
    let (train_c, eval_c) = corpus.split(cfg.eval_fraction);
    if train_c.dialogues.is_empty() {
        return Err(Error::Config("no training dialogues after the split".into()));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::build(&train_c, cfg.min_count)?,
    };
    let sc = cfg.sample_config(corpus.mode);
    let train = build_corpus_samples(&train_c, &vocab, &sc)?;
    let mut eval = build_corpus_samples(&eval_c, &vocab, &sc)?;
    // keep dialogue indices global across the split
    let offset = train_c.dialogues.len();
    eval.iter_mut().for_each(|s| s.dialogue += offset);
    if eval.is_empty() {
        eval = train.clone();
    }
    if train.is_empty() {
        return Err(Error::Config("corpus yields no training samples".into()));
    }
    Ok(RunData {
        corpus,
        vocab,
        train,
        eval,
    })
}

/// Sample indices for 1-based `step`: consecutive slices of per-epoch
/// permutations, so the batch depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let i = (step - 1) * batch as u64 + j as u64;
            let epoch = i / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xd6e8_feb8_6659_fd93));
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(i % n as u64) as usize]
        })
        .collect()
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub l_one: f64,
    pub l_topic: f64,
    pub l_refine: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl LogLine {
    fn new(step: u64, l: &LossBreakdown, lr: f64) -> Self {
        LogLine {
            step,
            l_one: l.l_one,
            l_topic: l.l_topic,
            l_refine: l.l_refine,
            l_total: l.l_total,
            lr,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

fn checkpoint_stem(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}"))
}

/// Stem of the highest-step checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        let Some(step) = name
            .strip_prefix("checkpoint-")
            .and_then(|s| s.strip_suffix(".manifest.json"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, checkpoint_stem(dir, step)));
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn params_tensors<T: Scalar>(prefix: &str, p: &Params<T>, out: &mut Vec<(String, Tensor<T>)>) {
    for (name, _, t) in p.entries() {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

fn restore_params<T: Scalar>(prefix: &str, p: &mut Params<T>, ck: &Checkpoint<T>) -> Result<()> {
    for (name, _, t) in p.entries_mut() {
        let key = format!("{prefix}.{name}");
        let src = ck
            .get(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Config(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
    }
    Ok(())
}

fn to_checkpoint<T: Scalar>(cfg: &RunConfig, model: &JointModel<T>, opt: &OptState<T>) -> Result<Checkpoint<T>> {
    let mut tensors = Vec::new();
    for (prefix, p) in model.groups() {
        params_tensors(prefix, p, &mut tensors);
    }
    params_tensors("adam.m.gpt", &opt.m.gpt, &mut tensors);
    params_tensors("adam.v.gpt", &opt.v.gpt, &mut tensors);
    if let (Some(m), Some(v)) = (&opt.m.bert, &opt.v.bert) {
        params_tensors("adam.m.bert", m, &mut tensors);
        params_tensors("adam.v.bert", v, &mut tensors);
    }
    Ok(Checkpoint {
        step: opt.step,
        config: serde_json::to_value(cfg)?,
        tensors,
    })
}

fn restore_model<T: Scalar>(model: &mut JointModel<T>, ck: &Checkpoint<T>) -> Result<()> {
    restore_params("gpt", &mut model.gpt, ck)?;
    if let Some(b) = &mut model.bert {
        restore_params("bert", b, ck)?;
    }
    Ok(())
}

fn restore_opt<T: Scalar>(opt: &mut OptState<T>, ck: &Checkpoint<T>) -> Result<()> {
    restore_params("adam.m.gpt", &mut opt.m.gpt, ck)?;
    restore_params("adam.v.gpt", &mut opt.v.gpt, ck)?;
    if let (Some(m), Some(v)) = (&mut opt.m.bert, &mut opt.v.bert) {
        restore_params("adam.m.bert", m, ck)?;
        restore_params("adam.v.bert", v, ck)?;
    }
    opt.step = ck.step;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LogLine>,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg`, writing every artifact under `cfg.out_dir`. With
/// `resume`, continues from the latest checkpoint there.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, resume),
        Precision::F64 => train_impl::<f64>(cfg, resume),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    if resume {
        let previous = RunConfig::load(&config_path)?;
        if previous.resume_key() != cfg.resume_key() {
            return Err(Error::Config(
                "resumed run configuration differs from the original".into(),
            ));
        }
    }
    cfg.save(&config_path)?;

    let data = prepare(cfg, None)?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    let (gcfg, bcfg) = cfg.model_configs(data.vocab.len(), data.corpus.num_classes())?;
    let mut model = JointModel::<T>::init(gcfg, bcfg, cfg.seed)?;
    let mut opt = OptState::new(&model, cfg.adamw.clone());
    let log_path = dir.join(TRAIN_LOG);

    let mut kept = Vec::new();
    if resume {
        let stem = latest_checkpoint(dir)?.ok_or_else(|| Error::Config("no checkpoint to resume from".into()))?;
        let ck = load_checkpoint::<T>(&stem)?;
        restore_model(&mut model, &ck)?;
        restore_opt(&mut opt, &ck)?;
        if log_path.exists() {
            kept = read_log(&log_path)?;
            kept.retain(|l| l.step <= ck.step);
        }
        log::info!("resuming from {} at step {}", stem.display(), ck.step);
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    for line in &kept {
        writeln!(log, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(&log_path, e))?;
    }

    log::info!(
        "{} training samples, {} eval samples, vocab {}, {} parameters",
        data.train.len(),
        data.eval.len(),
        data.vocab.len(),
        model.groups().iter().map(|(_, p)| p.num_scalars()).sum::<usize>()
    );
    let tc = cfg.train_config();
    let mut last = kept.last().cloned();
    let mut checkpoint = latest_checkpoint(dir)?.unwrap_or_default();
    for step in opt.step + 1..=cfg.steps {
        let batch: Vec<TrainingSample> = batch_indices(cfg.seed, step, data.train.len(), cfg.batch_size)
            .into_iter()
            .map(|i| data.train[i].clone())
            .collect();
        let (losses, lr) = train_step(&mut model, &mut opt, &batch, &tc, &data.vocab)?;
        let line = LogLine::new(step, &losses, lr);
        writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
        if step % 100 == 0 {
            log::info!(
                "step {step}: l_one {:.4} l_topic {:.4} l_refine {:.4}",
                line.l_one,
                line.l_topic,
                line.l_refine
            );
        }
        last = Some(line);
        if step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint = checkpoint_stem(dir, step);
            save_checkpoint(&checkpoint, &to_checkpoint(cfg, &model, &opt)?)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if opt.step == 0 {
        checkpoint = checkpoint_stem(dir, 0);
        save_checkpoint(&checkpoint, &to_checkpoint(cfg, &model, &opt)?)?;
    }
    Ok(TrainSummary {
        steps: opt.step,
        last,
        checkpoint,
    })
}

/// A trained model with its vocabulary and run configuration.
pub struct LoadedRun<T> {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub model: JointModel<T>,
    pub step: u64,
}

/// Loads `run_dir`'s config, vocabulary and the given (or latest) checkpoint.
pub fn load_run<T: Scalar>(run_dir: &Path, checkpoint: Option<&Path>) -> Result<LoadedRun<T>> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let vocab = Vocab::load(&run_dir.join(VOCAB_FILE))?;
    let stem = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(run_dir)?
            .ok_or_else(|| Error::Config(format!("no checkpoint in {}", run_dir.display())))?,
    };
    let ck = load_checkpoint::<T>(&stem)?;
    let n_classes = ck
        .get("gpt.cls_head.bias")
        .map(|t| t.len())
        .ok_or_else(|| Error::format(&stem, "missing classifier head"))?;
    let (gcfg, bcfg) = cfg.model_configs(vocab.len(), n_classes)?;
    let mut model = JointModel::<T>::init(gcfg, bcfg, cfg.seed)?;
    restore_model(&mut model, &ck)?;
    Ok(LoadedRun {
        cfg,
        vocab,
        model,
        step: ck.step,
    })
}

/// One line of `generations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub variant: Variant,
    pub coarse: String,
    /// Predicted topic surfaces.
    pub topics: Vec<String>,
    pub refined: Option<String>,
    pub gold_response: String,
    pub gold_topics: Vec<String>,
    pub topic_ids: Option<Vec<usize>>,
    pub gold_topic_ids: Vec<usize>,
    pub topic_scores: Option<Vec<f64>>,
}

impl GenerationRecord {
    fn scored(&self) -> ScoredSample {
        let words = |s: &str| s.split_whitespace().map(String::from).collect();
        let response = match self.variant {
            Variant::StageOne => &self.coarse,
            _ => self.refined.as_ref().unwrap_or(&self.coarse),
        };
        ScoredSample {
            response: words(response),
            gold_response: words(&self.gold_response),
            predicted_topics: self.topic_ids.clone(),
            gold_topics: self.gold_topic_ids.clone(),
            topic_scores: self.topic_scores.clone(),
        }
    }
}

fn sample_id(s: &TrainingSample) -> String {
    format!("d{}-t{}", s.dialogue, s.turn_index)
}

fn text(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    Ok(vocab.decode(ids)?.join(" "))
}

fn record(vocab: &Vocab, s: &TrainingSample, variant: Variant, out: &ThreePassOutput) -> Result<GenerationRecord> {
    let surfaces = |ts: &[usize]| ts.iter().map(|&t| vocab.topic_surface(t).to_string()).collect();
    let staged = variant != Variant::StageOne;
    Ok(GenerationRecord {
        sample_id: sample_id(s),
        variant,
        coarse: text(vocab, &out.coarse_ids)?,
        topics: surfaces(&out.predicted_topics),
        refined: out.refined_ids.as_deref().map(|r| text(vocab, r)).transpose()?,
        gold_response: text(vocab, s.response_tokens())?,
        gold_topics: surfaces(&s.gold_topics),
        topic_ids: staged.then(|| out.predicted_topics.clone()),
        gold_topic_ids: s.gold_topics.clone(),
        topic_scores: staged.then(|| out.topic_scores.clone()),
    })
}

fn lexicon(vocab: &Vocab) -> Vec<Vec<String>> {
    vocab
        .topic_surfaces()
        .iter()
        .map(|s| s.split_whitespace().map(String::from).collect())
        .collect()
}

/// Scores generation records.
pub fn score_records(records: &[GenerationRecord], vocab: &Vocab, mode: TopicMode, cfg: &RunConfig) -> MetricsReport {
    let scored: Vec<ScoredSample> = records.iter().map(GenerationRecord::scored).collect();
    let variant = records.first().map(|r| r.variant).unwrap_or(cfg.variant);
    let name = serde_json::to_value(variant)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    metrics::evaluate(
        &scored,
        &lexicon(vocab),
        mode,
        &name,
        &cfg.decode.hit_ks,
        &cfg.bucket_edges,
    )
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub variant: Option<Variant>,
    /// Score gold responses and gold topics against themselves.
    pub oracle_gold: bool,
    /// Feed gold topics to the refine pass.
    pub gold_topics: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Generates for the eval split and writes `generations.jsonl`,
/// `report.json` and `report.txt` into `run_dir`.
pub fn evaluate(run_dir: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    match cfg.precision {
        Precision::F32 => evaluate_impl::<f32>(run_dir, cfg, opts),
        Precision::F64 => evaluate_impl::<f64>(run_dir, cfg, opts),
    }
}

fn evaluate_impl<T: Scalar>(run_dir: &Path, cfg: RunConfig, opts: &EvalOptions) -> Result<MetricsReport> {
    let vocab = Vocab::load(&run_dir.join(VOCAB_FILE))?;
    let data = prepare(&cfg, Some(vocab))?;
    let vocab = &data.vocab;
    let variant = opts.variant.unwrap_or(cfg.variant);
    let mode = data.corpus.mode;
    let records = if opts.oracle_gold {
        data.eval
            .iter()
            .map(|s| {
                let out = ThreePassOutput {
                    coarse_ids: s.response_tokens().to_vec(),
                    topic_scores: vec![],
                    predicted_topics: s.gold_topics.clone(),
                    refined_ids: (variant != Variant::StageOne).then(|| s.response_tokens().to_vec()),
                };
                let mut r = record(vocab, s, variant, &out)?;
                r.topic_scores = None;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let run = load_run::<T>(run_dir, opts.checkpoint.as_deref())?;
        let pc = cfg.pipeline_config(mode, variant);
        data.eval
            .iter()
            .map(|s| {
                let over = opts.gold_topics.then_some(s.gold_topics.as_slice());
                let out = three_pass(&run.model, vocab, &s.history_ids, &pc, over)?;
                record(vocab, s, variant, &out)
            })
            .collect::<Result<Vec<_>>>()?
    };
    write_records(&run_dir.join(GENERATIONS_FILE), &records)?;
    let report = score_records(&records, vocab, mode, &cfg);
    write_report(run_dir, &report)?;
    Ok(report)
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

fn write_report(run_dir: &Path, report: &MetricsReport) -> Result<()> {
    let json = run_dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let txt = run_dir.join(REPORT_TXT);
    fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))
}

/// Recomputes the report from `generations.jsonl` alone; does not write.
pub fn rescore(run_dir: &Path) -> Result<MetricsReport> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let vocab = Vocab::load(&run_dir.join(VOCAB_FILE))?;
    let records = read_records(&run_dir.join(GENERATIONS_FILE))?;
    let mode = match cfg.expect_mode {
        Some(m) => m,
        None => load_corpus(&cfg.corpus)?.mode,
    };
    Ok(score_records(&records, &vocab, mode, &cfg))
}

/// Parses one history line: `text` or `text<TAB>topic|topic`. Lines
/// alternate user and system, starting with the user.
pub fn parse_history_lines(lines: &[String], vocab: &Vocab) -> Result<Vec<Utterance>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let (body, topics) = match line.split_once('\t') {
                Some((b, t)) => (b, Some(t)),
                None => (line.as_str(), None),
            };
            let ids = topics
                .into_iter()
                .flat_map(|t| t.split('|'))
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| {
                    vocab
                        .topic_surfaces()
                        .iter()
                        .position(|s| s == t)
                        .ok_or_else(|| Error::Validation {
                            dialogue: 0,
                            message: format!("line {}: unknown topic {t:?}", i + 1),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let speaker = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            Ok(Utterance::new(
                speaker,
                body.split_whitespace().map(String::from).collect(),
                ids,
            ))
        })
        .collect()
}

/// Decoded three-pass output for a free-form history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub coarse: String,
    pub topics: Vec<String>,
    pub refined: Option<String>,
}

pub fn generate(run_dir: &Path, lines: &[String], variant: Option<Variant>) -> Result<Generated> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    match cfg.precision {
        Precision::F32 => generate_impl::<f32>(run_dir, lines, variant),
        Precision::F64 => generate_impl::<f64>(run_dir, lines, variant),
    }
}

fn generate_impl<T: Scalar>(run_dir: &Path, lines: &[String], variant: Option<Variant>) -> Result<Generated> {
    let run = load_run::<T>(run_dir, None)?;
    let utterances = parse_history_lines(lines, &run.vocab)?;
    if utterances.is_empty() {
        return Err(Error::Validation {
            dialogue: 0,
            message: "empty history".into(),
        });
    }
    let history = serialize_history(None, &utterances, &run.vocab, run.cfg.max_context, run.cfg.use_roles)?;
    let k = run.model.gpt_cfg.n_classes;
    let mode = if k == run.vocab.n_topics() + 1 {
        TopicMode::MultiClass
    } else {
        TopicMode::MultiLabel
    };
    let pc = run.cfg.pipeline_config(mode, variant.unwrap_or(run.cfg.variant));
    let out = three_pass(&run.model, &run.vocab, &history, &pc, None)?;
    Ok(Generated {
        coarse: text(&run.vocab, &out.coarse_ids)?,
        topics: out
            .predicted_topics
            .iter()
            .map(|&t| run.vocab.topic_surface(t).to_string())
            .collect(),
        refined: out.refined_ids.as_deref().map(|r| text(&run.vocab, r)).transpose()?,
    })
}

pub fn log_path(run_dir: &Path) -> PathBuf {
    run_dir.join(TRAIN_LOG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(3, s, n, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
        assert_ne!(batch_indices(3, 1, n, 4), batch_indices(4, 1, n, 4));
        // a batch may straddle an epoch boundary
        assert_eq!(batch_indices(1, 3, 5, 2).len(), 2);
    }

    fn tiny_run(dir: &Path) -> RunConfig {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_dialogues: 6,
            ..Default::default()
        })
        .unwrap();
        let path = dir.join("corpus.json");
        corpus.save(&path).unwrap();
        RunConfig {
            corpus: path,
            out_dir: dir.join("run"),
            model: ModelShape {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                tie_lm_head: false,
            },
            max_context: 40,
            eval_fraction: 0.34,
            batch_size: 2,
            steps: 6,
            checkpoint_every: 3,
            decode: DecodeConfig {
                max_decode: 6,
                ..Default::default()
            },
            adamw: AdamWConfig {
                lr: 1e-2,
                warmup_steps: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_log() {
        let dir = tempfile::tempdir().unwrap();
        let full = tiny_run(dir.path());
        train(&full, false).unwrap();
        let whole = read_log(&log_path(&full.out_dir)).unwrap();
        assert_eq!(whole.len(), 6);

        let mut part = full.clone();
        part.out_dir = dir.path().join("part");
        part.steps = 3;
        train(&part, false).unwrap();
        part.steps = 6;
        train(&part, true).unwrap();
        assert_eq!(read_log(&log_path(&part.out_dir)).unwrap(), whole);

        let mut other = part.clone();
        other.seed += 1;
        assert!(matches!(train(&other, true), Err(Error::Config(_))));
    }

    #[test]
    fn eval_writes_artifacts_and_rescore_agrees() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        train(&cfg, false).unwrap();
        let report = evaluate(&cfg.out_dir, &EvalOptions::default()).unwrap();
        for f in [GENERATIONS_FILE, REPORT_JSON, REPORT_TXT, CONFIG_FILE, VOCAB_FILE] {
            assert!(cfg.out_dir.join(f).exists(), "{f}");
        }
        assert_eq!(rescore(&cfg.out_dir).unwrap(), report);
        let oracle = evaluate(
            &cfg.out_dir,
            &EvalOptions {
                oracle_gold: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((oracle.bleu_1, oracle.bleu_4, oracle.topic_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn mode_mismatch_refuses_to_start() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run(dir.path());
        cfg.expect_mode = Some(TopicMode::MultiClass);
        assert!(matches!(train(&cfg, false), Err(Error::Config(_))));
    }

    #[test]
    fn history_lines_parse_topics() {
        let corpus = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let lines = vec![
            "w1 w2 t3 a9".to_string(),
            "a9 t3 a10 a11\tt3".to_string(),
            "w4".to_string(),
        ];
        let u = parse_history_lines(&lines, &vocab).unwrap();
        assert_eq!(u[1].topics, vec![3]);
        assert_eq!((u[0].speaker, u[1].speaker), (Speaker::A, Speaker::B));
        assert!(parse_history_lines(&["x\tnope".to_string()], &vocab).is_err());
    }
}

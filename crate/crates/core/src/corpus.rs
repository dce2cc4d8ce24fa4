//! Dialogue data model, history serialization, refine-input construction,
//! synthetic corpus generation and JSON ingestion.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, BOS, CLS, EOS, SPK_A, SPK_B, TOPIC_MARK, TOPIC_SEP, UTT_SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopicMode {
    /// Any subset of topics per turn, scored with independent sigmoids.
    MultiLabel,
    /// Exactly one class per turn, scored with a softmax. Turns without a
    /// topic map to a trailing NONE class.
    MultiClass,
}

impl TopicMode {
    /// Number of classifier outputs for a lexicon of `n_topics` topics.
    pub fn num_classes(self, n_topics: usize) -> usize {
        match self {
            TopicMode::MultiLabel => n_topics,
            TopicMode::MultiClass => n_topics + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    /// User.
    A,
    /// System.
    B,
}

impl Speaker {
    pub fn token(self) -> usize {
        match self {
            Speaker::A => SPK_A,
            Speaker::B => SPK_B,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    /// Ascending, deduplicated topic ids.
    pub topics: Vec<usize>,
}

impl Utterance {
    pub fn new(speaker: Speaker, tokens: Vec<String>, mut topics: Vec<usize>) -> Self {
        topics.sort_unstable();
        topics.dedup();
        Utterance {
            speaker,
            tokens,
            topics,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub utterances: Vec<Utterance>,
    pub profile: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub mode: TopicMode,
    /// Topic surface strings, indexed by topic id.
    pub topics: Vec<String>,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.mode.num_classes(self.topics.len())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            dialogues: self.dialogues.len(),
            utterances: self.dialogues.iter().map(|d| d.utterances.len()).sum(),
            topics: self.topics.len(),
            mode: self.mode,
        }
    }

    /// Splits off the last `fraction` of dialogues as a held-out set.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let n_test = ((self.dialogues.len() as f64) * fraction).round() as usize;
        let n_train = self.dialogues.len() - n_test.min(self.dialogues.len());
        let part = |ds: &[Dialogue]| Corpus {
            mode: self.mode,
            topics: self.topics.clone(),
            dialogues: ds.to_vec(),
        };
        (part(&self.dialogues[..n_train]), part(&self.dialogues[n_train..]))
    }

    /// Checks every dialogue against the corpus invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.dialogues.iter().enumerate() {
            validate_dialogue(d, self.mode, self.topics.len(), i)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CorpusFile {
            mode: self.mode,
            topics: self.topics.clone(),
            profiles_present: self.dialogues.iter().any(|d| d.profile.is_some()),
            stats: Some(self.stats()),
            dialogues: self
                .dialogues
                .iter()
                .map(|d| {
                    serde_json::to_value(RawDialogue {
                        profile: d.profile.as_ref().map(|p| p.iter().map(|s| s.join(" ")).collect()),
                        turns: d
                            .utterances
                            .iter()
                            .map(|u| RawTurn {
                                speaker: u.speaker,
                                text: Some(u.tokens.join(" ")),
                                tokens: None,
                                topics: u.topics.iter().map(|&t| TopicRef::Index(t)).collect(),
                            })
                            .collect(),
                    })
                })
                .collect::<serde_json::Result<_>>()?,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Header statistics mirroring the usual dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub topics: usize,
    pub mode: TopicMode,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    mode: TopicMode,
    topics: Vec<String>,
    #[serde(default)]
    profiles_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stats: Option<CorpusStats>,
    dialogues: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<Vec<String>>,
    turns: Vec<RawTurn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    speaker: Speaker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    /// Pre-tokenized alternative to `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    topics: Vec<TopicRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TopicRef {
    Index(usize),
    Surface(String),
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Parses a corpus from JSON text, validating every dialogue.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let file: CorpusFile = serde_json::from_str(text)?;
    let mut dialogues = Vec::with_capacity(file.dialogues.len());
    for (i, value) in file.dialogues.into_iter().enumerate() {
        let raw: RawDialogue = serde_json::from_value(value).map_err(|e| Error::Parse {
            dialogue: i,
            message: e.to_string(),
        })?;
        let mut utterances = Vec::with_capacity(raw.turns.len());
        for (j, turn) in raw.turns.into_iter().enumerate() {
            let tokens = match (turn.text, turn.tokens) {
                (Some(text), None) => tokenize(&text),
                (None, Some(tokens)) => tokens,
                _ => {
                    return Err(Error::Parse {
                        dialogue: i,
                        message: format!("turn {j}: exactly one of `text` or `tokens` is required"),
                    })
                }
            };
            let topics = turn
                .topics
                .into_iter()
                .map(|t| match t {
                    TopicRef::Index(k) if k < file.topics.len() => Ok(k),
                    TopicRef::Index(k) => Err(Error::Validation {
                        dialogue: i,
                        message: format!("turn {j}: topic index {k} not in header topic list"),
                    }),
                    TopicRef::Surface(s) => file
                        .topics
                        .iter()
                        .position(|x| *x == s)
                        .ok_or_else(|| Error::Validation {
                            dialogue: i,
                            message: format!("turn {j}: unknown topic {s:?}"),
                        }),
                })
                .collect::<Result<Vec<_>>>()?;
            utterances.push(Utterance::new(turn.speaker, tokens, topics));
        }
        dialogues.push(Dialogue {
            utterances,
            profile: raw.profile.map(|p| p.iter().map(|s| tokenize(s)).collect()),
        });
    }
    let corpus = Corpus {
        mode: file.mode,
        topics: file.topics,
        dialogues,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Json(j) => Error::format(path, j.to_string()),
        other => other,
    })
}

fn validate_dialogue(d: &Dialogue, mode: TopicMode, n_topics: usize, i: usize) -> Result<()> {
    let fail = |message: String| Error::Validation { dialogue: i, message };
    if d.utterances.len() < 2 {
        return Err(fail(format!("{} turns, at least 2 required", d.utterances.len())));
    }
    if d.utterances.last().map(|u| u.speaker) != Some(Speaker::B) {
        return Err(fail("last turn must be a system (B) turn".into()));
    }
    for (j, u) in d.utterances.iter().enumerate() {
        // Empty system turns are tolerated here and skipped by `build_samples`.
        if u.tokens.is_empty() && u.speaker == Speaker::A {
            return Err(fail(format!("turn {j}: empty text")));
        }
        if let Some(&k) = u.topics.iter().find(|&&k| k >= n_topics) {
            return Err(fail(format!("turn {j}: topic {k} not in lexicon")));
        }
        if mode == TopicMode::MultiClass && u.topics.len() > 1 {
            return Err(fail(format!(
                "turn {j}: multi-class corpus allows at most one topic per turn"
            )));
        }
    }
    Ok(())
}

/// Gold topic annotation of a training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopicLabel {
    MultiHot(Vec<bool>),
    Class(usize),
}

impl TopicLabel {
    pub fn from_topics(mode: TopicMode, topics: &[usize], n_topics: usize) -> Self {
        match mode {
            TopicMode::MultiLabel => {
                let mut hot = vec![false; n_topics];
                for &t in topics {
                    hot[t] = true;
                }
                TopicLabel::MultiHot(hot)
            }
            TopicMode::MultiClass => TopicLabel::Class(topics.first().copied().unwrap_or(n_topics)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub mode: TopicMode,
    pub max_context: usize,
    pub max_decode: usize,
    pub use_roles: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub dialogue: usize,
    /// 1-based position of the system turn in its dialogue.
    pub turn_index: usize,
    pub history_ids: Vec<usize>,
    /// Gold response, EOS-terminated.
    pub response_ids: Vec<usize>,
    pub topic_label: TopicLabel,
    /// Gold topic ids, ascending.
    pub gold_topics: Vec<usize>,
}

impl TrainingSample {
    /// Gold response without the trailing EOS.
    pub fn response_tokens(&self) -> &[usize] {
        match self.response_ids.last() {
            Some(&EOS) => &self.response_ids[..self.response_ids.len() - 1],
            _ => &self.response_ids,
        }
    }
}

fn push_topics(out: &mut Vec<usize>, vocab: &Vocab, topics: &[usize]) {
    for (i, &t) in topics.iter().enumerate() {
        if i > 0 {
            out.push(TOPIC_SEP);
        }
        out.extend_from_slice(vocab.topic_ids(t));
    }
}

fn utterance_segment(u: &Utterance, vocab: &Vocab, use_roles: bool) -> Vec<usize> {
    let mut seg = Vec::with_capacity(u.tokens.len() + 4);
    if use_roles {
        seg.push(u.speaker.token());
    }
    seg.extend(vocab.encode(&u.tokens));
    seg.push(TOPIC_MARK);
    push_topics(&mut seg, vocab, &u.topics);
    seg.push(UTT_SEP);
    seg
}

/// Serializes `utterances` (with optional profile) as `[BOS] profile... utt...`,
/// dropping the oldest segments first when over `max_context`.
pub fn serialize_history(
    profile: Option<&[Vec<String>]>,
    utterances: &[Utterance],
    vocab: &Vocab,
    max_context: usize,
    use_roles: bool,
) -> Result<Vec<usize>> {
    if max_context < 2 {
        return Err(Error::Config("max_context must be at least 2".into()));
    }
    let mut segments: Vec<Vec<usize>> = Vec::new();
    if let Some(profile) = profile.filter(|p| !p.is_empty()) {
        let mut seg = Vec::new();
        for sentence in profile {
            seg.extend(vocab.encode(sentence));
            seg.push(UTT_SEP);
        }
        segments.push(seg);
    }
    segments.extend(utterances.iter().map(|u| utterance_segment(u, vocab, use_roles)));

    let budget = max_context - 1;
    let mut total: usize = segments.iter().map(Vec::len).sum();
    let mut first = 0;
    while total > budget && first + 1 < segments.len() {
        total -= segments[first].len();
        first += 1;
    }
    let mut out = Vec::with_capacity(total.min(budget) + 1);
    out.push(BOS);
    for seg in &segments[first..] {
        out.extend_from_slice(seg);
    }
    if out.len() > max_context {
        let excess = out.len() - max_context;
        out.drain(1..1 + excess);
    }
    Ok(out)
}

/// One sample per system turn at position two or later.
pub fn build_samples(
    d: &Dialogue,
    dialogue_index: usize,
    vocab: &Vocab,
    cfg: &SampleConfig,
) -> Result<Vec<TrainingSample>> {
    if cfg.max_decode < 1 {
        return Err(Error::Config("max_decode must be at least 1".into()));
    }
    let mut samples = Vec::new();
    for (n, u) in d.utterances.iter().enumerate().skip(1) {
        if u.speaker != Speaker::B {
            continue;
        }
        if u.tokens.is_empty() {
            log::warn!(
                "dialogue {dialogue_index} turn {}: empty system response skipped",
                n + 1
            );
            continue;
        }
        let history = serialize_history(
            d.profile.as_deref(),
            &d.utterances[..n],
            vocab,
            cfg.max_context,
            cfg.use_roles,
        )?;
        let mut response = vocab.encode(&u.tokens);
        response.truncate(cfg.max_decode - 1);
        response.push(EOS);
        samples.push(TrainingSample {
            dialogue: dialogue_index,
            turn_index: n + 1,
            history_ids: history,
            response_ids: response,
            topic_label: TopicLabel::from_topics(cfg.mode, &u.topics, vocab.n_topics()),
            gold_topics: u.topics.clone(),
        });
    }
    Ok(samples)
}

pub fn build_corpus_samples(corpus: &Corpus, vocab: &Vocab, cfg: &SampleConfig) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (i, d) in corpus.dialogues.iter().enumerate() {
        out.extend(build_samples(d, i, vocab, cfg)?);
    }
    Ok(out)
}

/// A history decoded back into its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedHistory {
    pub profile: Vec<Vec<String>>,
    pub utterances: Vec<(Option<Speaker>, Vec<String>, Vec<usize>)>,
}

/// Inverse of [`serialize_history`] for untruncated histories.
pub fn parse_history(ids: &[usize], vocab: &Vocab) -> Result<ParsedHistory> {
    let body = match ids.first() {
        Some(&BOS) => &ids[1..],
        _ => return Err(Error::Contract("history must start with BOS".into())),
    };
    let mut parsed = ParsedHistory {
        profile: Vec::new(),
        utterances: Vec::new(),
    };
    for seg in body.split(|&id| id == UTT_SEP) {
        if seg.is_empty() {
            continue;
        }
        match seg.iter().position(|&id| id == TOPIC_MARK) {
            None => parsed.profile.push(vocab.decode(seg)?),
            Some(mark) => {
                let (speaker, content) = match seg[0] {
                    SPK_A => (Some(Speaker::A), &seg[1..mark]),
                    SPK_B => (Some(Speaker::B), &seg[1..mark]),
                    _ => (None, &seg[..mark]),
                };
                let topics = seg[mark + 1..]
                    .split(|&id| id == TOPIC_SEP)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        vocab
                            .topic_for_ids(s)
                            .ok_or_else(|| Error::Contract(format!("unknown topic ids {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                parsed.utterances.push((speaker, vocab.decode(content)?, topics));
            }
        }
    }
    Ok(parsed)
}

/// Which part of the history the refine pass sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineContext {
    #[default]
    Full,
    ResponseOnly,
}

/// `history ++ [CLS] ++ coarse ++ [TOPIC_MARK] ++ topics ++ [TOPIC_MARK]`,
/// with topics TOPIC_SEP-joined in ascending id order. When over `max_len`
/// the history is cut from the left (its leading BOS is kept); the coarse
/// response and topics are never cut.
pub fn build_refine_input(
    history_ids: &[usize],
    coarse_ids: &[usize],
    topics: &[usize],
    vocab: &Vocab,
    context: RefineContext,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut sorted = topics.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut suffix = Vec::with_capacity(coarse_ids.len() + 8);
    suffix.push(CLS);
    suffix.extend_from_slice(coarse_ids);
    suffix.push(TOPIC_MARK);
    push_topics(&mut suffix, vocab, &sorted);
    suffix.push(TOPIC_MARK);
    if suffix.len() > max_len {
        return Err(Error::Range(format!(
            "refine suffix of {} ids exceeds the {max_len}-id budget",
            suffix.len()
        )));
    }
    let history: &[usize] = match context {
        RefineContext::Full => history_ids,
        RefineContext::ResponseOnly => &[],
    };
    let room = max_len - suffix.len();
    let mut out = Vec::with_capacity(history.len().min(room) + suffix.len());
    if history.len() <= room {
        out.extend_from_slice(history);
    } else if room > 0 {
        let keep_bos = history[0] == BOS;
        if keep_bos {
            out.push(BOS);
        }
        let tail = room - out.len();
        out.extend_from_slice(&history[history.len() - tail..]);
    }
    out.extend(suffix);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_dialogues: usize,
    /// Utterances per dialogue, alternating user/system starting with the user.
    pub turns: usize,
    pub vocab_size: usize,
    pub n_topics: usize,
    pub stickiness: f64,
    pub seed: u64,
    pub mode: TopicMode,
    /// Probability that a system turn carries a second topic (multi-label only).
    pub extra_topic_prob: f64,
    pub profiles: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_dialogues: 32,
            turns: 4,
            vocab_size: 64,
            n_topics: 8,
            stickiness: 0.7,
            seed: 7,
            mode: TopicMode::MultiLabel,
            extra_topic_prob: 0.0,
            profiles: false,
        }
    }
}

/// Words per topic reserved as its associated vocabulary.
const ASSOC_PER_TOPIC: usize = 3;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_dialogues == 0 || self.n_topics == 0 || self.vocab_size == 0 {
            return bad("synthetic corpus counts must be positive");
        }
        if self.turns < 2 || !self.turns.is_multiple_of(2) {
            return bad("turns must be an even number of at least 2");
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return bad("stickiness must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.extra_topic_prob) {
            return bad("extra_topic_prob must lie in [0, 1]");
        }
        if self.mode == TopicMode::MultiClass && self.extra_topic_prob > 0.0 {
            return bad("multi-class corpora carry one topic per turn");
        }
        if self.n_topics < 2 && self.stickiness < 1.0 {
            return bad("topic shifts need at least two topics");
        }
        if self.vocab_size < self.n_topics * (1 + ASSOC_PER_TOPIC) + 2 {
            return bad("vocab_size too small: need 4 words per topic plus 2 generic words");
        }
        Ok(())
    }
}

/// Generates a deterministic corpus whose system responses are a fixed
/// function of their gold topics.
///
/// Topics follow a sticky Markov chain over utterances: the previous topic
/// repeats with probability `stickiness`, otherwise a different topic is
/// drawn uniformly. Each topic `t` owns a surface word `t{t}` and three
/// associated words; the system response for topic `t` is
/// `assoc0 t{t} assoc1 assoc2`, so every gold topic surface appears verbatim
/// in its response. User turns mix two random generic words with the topic
/// surface and one associated word.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let surfaces: Vec<String> = (0..cfg.n_topics).map(|t| format!("t{t}")).collect();
    let assoc: Vec<Vec<String>> = (0..cfg.n_topics)
        .map(|t| {
            (0..ASSOC_PER_TOPIC)
                .map(|j| format!("a{}", t * ASSOC_PER_TOPIC + j))
                .collect()
        })
        .collect();
    let n_generic = cfg.vocab_size - cfg.n_topics * (1 + ASSOC_PER_TOPIC);
    let generic: Vec<String> = (0..n_generic).map(|g| format!("w{g}")).collect();

    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    for _ in 0..cfg.n_dialogues {
        let profile = cfg.profiles.then(|| {
            (0..rng.random_range(1..=2))
                .map(|_| (0..3).map(|_| generic.choose(&mut rng).unwrap().clone()).collect())
                .collect()
        });
        let mut topic = rng.random_range(0..cfg.n_topics);
        let mut utterances = Vec::with_capacity(cfg.turns);
        for turn in 0..cfg.turns {
            if turn > 0 && !rng.random_bool(cfg.stickiness) {
                let shift = rng.random_range(1..cfg.n_topics);
                topic = (topic + shift) % cfg.n_topics;
            }
            if turn % 2 == 0 {
                let tokens = vec![
                    generic.choose(&mut rng).unwrap().clone(),
                    generic.choose(&mut rng).unwrap().clone(),
                    surfaces[topic].clone(),
                    assoc[topic][0].clone(),
                ];
                utterances.push(Utterance::new(Speaker::A, tokens, vec![topic]));
            } else {
                let mut topics = vec![topic];
                if cfg.extra_topic_prob > 0.0 && rng.random_bool(cfg.extra_topic_prob) {
                    let shift = rng.random_range(1..cfg.n_topics);
                    topics.push((topic + shift) % cfg.n_topics);
                }
                topics.sort_unstable();
                let tokens = topics
                    .iter()
                    .flat_map(|&t| {
                        [
                            assoc[t][0].clone(),
                            surfaces[t].clone(),
                            assoc[t][1].clone(),
                            assoc[t][2].clone(),
                        ]
                    })
                    .collect();
                utterances.push(Utterance::new(Speaker::B, tokens, topics));
            }
        }
        dialogues.push(Dialogue { utterances, profile });
    }
    Ok(Corpus {
        mode: cfg.mode,
        topics: surfaces,
        dialogues,
    })
}

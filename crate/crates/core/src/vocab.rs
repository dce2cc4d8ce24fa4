//! Token/id mapping with a fixed special-token block and the topic lexicon.
//!
//! Special tokens always occupy ids `0..N_SPECIALS` in a fixed order, so the
//! network code can refer to them as constants. Content tokens follow,
//! ordered by descending corpus frequency and then lexicographically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UTT_SEP: usize = 4;
pub const SPK_A: usize = 5;
pub const SPK_B: usize = 6;
pub const TOPIC_MARK: usize = 7;
pub const TOPIC_SEP: usize = 8;
pub const CLS: usize = 9;
pub const N_SPECIALS: usize = 10;

const SPECIAL_STRINGS: [&str; N_SPECIALS] = [
    "<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<spk_a>", "<spk_b>", "<topic>", "<tsep>", "<cls>",
];

pub fn is_special_str(token: &str) -> bool {
    SPECIAL_STRINGS.contains(&token)
}

/// Special-token ids as written to the vocab file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: usize,
    pub unk: usize,
    pub bos: usize,
    pub eos: usize,
    pub utt_sep: usize,
    pub spk_a: usize,
    pub spk_b: usize,
    pub topic_mark: usize,
    pub topic_sep: usize,
    pub cls: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: PAD,
            unk: UNK,
            bos: BOS,
            eos: EOS,
            utt_sep: UTT_SEP,
            spk_a: SPK_A,
            spk_b: SPK_B,
            topic_mark: TOPIC_MARK,
            topic_sep: TOPIC_SEP,
            cls: CLS,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: Specials,
    topics: BTreeMap<usize, String>,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    topics: Vec<String>,
    topic_ids: Vec<Vec<usize>>,
    topic_by_surface: HashMap<Vec<usize>, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.topics == other.topics
    }
}

impl Vocab {
    /// Builds a vocabulary from a corpus. Tokens seen fewer than `min_count`
    /// times are left out and encode to [`UNK`]; topic surface tokens are
    /// always kept.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Vocab> {
        if corpus.dialogues.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in &corpus.dialogues {
            let profile = d.profile.iter().flatten();
            for tok in profile.chain(d.utterances.iter().map(|u| &u.tokens)).flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        for surface in &corpus.topics {
            for tok in surface.split_whitespace() {
                let c = counts.entry(tok).or_default();
                *c = (*c).max(min_count);
            }
        }
        let mut content: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count && !is_special_str(tok))
            .collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens = SPECIAL_STRINGS
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Vocab::from_parts(tokens, corpus.topics.clone())
    }

    fn from_parts(tokens: Vec<String>, topics: Vec<String>) -> Result<Vocab> {
        for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("special token {s} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        let mut topic_ids = Vec::with_capacity(topics.len());
        let mut topic_by_surface = HashMap::new();
        for (k, surface) in topics.iter().enumerate() {
            let ids: Vec<usize> = surface
                .split_whitespace()
                .map(|t| match index.get(t) {
                    Some(&id) if id >= N_SPECIALS => Ok(id),
                    _ => Err(Error::Config(format!("topic {k} token {t:?} is not a content token"))),
                })
                .collect::<Result<_>>()?;
            if ids.is_empty() {
                return Err(Error::Config(format!("topic {k} has an empty surface")));
            }
            if topic_by_surface.insert(ids.clone(), k).is_some() {
                return Err(Error::Config(format!("topic surface {surface:?} is duplicated")));
            }
            topic_ids.push(ids);
        }
        Ok(Vocab {
            tokens,
            index,
            topics,
            topic_ids,
            topic_by_surface,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Content tokens, excluding the special block.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[N_SPECIALS..]
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn topic_surface(&self, topic: usize) -> &str {
        &self.topics[topic]
    }

    pub fn topic_surfaces(&self) -> &[String] {
        &self.topics
    }

    /// Token ids of a topic's surface string.
    pub fn topic_ids(&self, topic: usize) -> &[usize] {
        &self.topic_ids[topic]
    }

    pub fn topic_for_ids(&self, ids: &[usize]) -> Option<usize> {
        self.topic_by_surface.get(ids).copied()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Range(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    pub fn encode<S: AsRef<str>>(&self, text: &[S]) -> Vec<usize> {
        text.iter()
            .map(|t| self.index.get(t.as_ref()).copied().unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens, dropping padding.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: Specials::default(),
            topics: self.topics.iter().cloned().enumerate().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.specials != Specials::default() {
            return Err(Error::Config(
                "vocab file uses a non-standard special-token layout".into(),
            ));
        }
        let n = file.topics.len();
        if file.topics.keys().copied().ne(0..n) {
            return Err(Error::Config("topic ids in vocab file must be dense from 0".into()));
        }
        Vocab::from_parts(file.tokens, file.topics.into_values().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Dialogue, Speaker, TopicMode, Utterance};
    use proptest::prelude::*;

    fn utt(speaker: Speaker, text: &str, topics: &[usize]) -> Utterance {
        Utterance::new(
            speaker,
            text.split_whitespace().map(String::from).collect(),
            topics.to_vec(),
        )
    }

    fn corpus_of(texts: &[&str], topics: &[&str]) -> Corpus {
        let dialogues = texts
            .chunks(2)
            .map(|pair| Dialogue {
                utterances: vec![utt(Speaker::A, pair[0], &[]), utt(Speaker::B, pair[1], &[])],
                profile: None,
            })
            .collect();
        Corpus {
            mode: TopicMode::MultiLabel,
            topics: topics.iter().map(|s| s.to_string()).collect(),
            dialogues,
        }
    }

    #[test]
    fn min_count_threshold() {
        let c = corpus_of(&["a a", "a b"], &[]);
        let v = Vocab::build(&c, 2).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.encode(&["b"]), vec![UNK]);
        for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        assert_eq!(v.id("<pad>"), Some(0));
    }

    #[test]
    fn topics_always_kept_even_if_rare() {
        let c = corpus_of(&["x y", "y z"], &["rare topic"]);
        let v = Vocab::build(&c, 5).unwrap();
        assert_eq!(v.topic_ids(0).len(), 2);
        assert_eq!(v.topic_for_ids(v.topic_ids(0)), Some(0));
        assert!(v.topic_ids(0).iter().all(|&id| id != UNK));
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = corpus_of(&[], &[]);
        assert!(matches!(Vocab::build(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode_round_trip_and_pad_stripping() {
        let c = corpus_of(&["hello world", "world"], &[]);
        let v = Vocab::build(&c, 1).unwrap();
        let ids = v.encode(&["hello", "world"]);
        assert_eq!(v.decode(&ids).unwrap(), vec!["hello", "world"]);
        let x = v.id("hello").unwrap();
        assert_eq!(v.decode(&[PAD, x, PAD]).unwrap(), vec!["hello"]);
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Range(_))));
    }

    #[test]
    fn special_strings_in_text_never_become_content() {
        let c = corpus_of(&["<pad> a", "<cls> b"], &[]);
        let v = Vocab::build(&c, 1).unwrap();
        assert_eq!(v.len(), N_SPECIALS + 2);
    }

    #[test]
    fn save_load_identical() {
        let c = corpus_of(&["b a c", "c c a"], &["a", "b c"]);
        let v = Vocab::build(&c, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let w = Vocab::load(&path).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.to_json().unwrap(), w.to_json().unwrap());
        for t in v.content_tokens() {
            assert_eq!(v.id(t), w.id(t));
        }
    }

    proptest! {
        #[test]
        fn round_trip_over_random_corpora(words in prop::collection::vec("[a-e]{1,3}", 2..40)) {
            let text = words.join(" ");
            let c = corpus_of(&[text.as_str(), "z"], &[]);
            let v = Vocab::build(&c, 1).unwrap();
            let ids = v.encode(&words);
            prop_assert!(ids.iter().all(|&id| id >= N_SPECIALS));
            prop_assert_eq!(v.decode(&ids).unwrap(), words);
        }
    }
}

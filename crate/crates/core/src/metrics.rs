//! Evaluation metrics: corpus BLEU, topic F1 by exact appearance, micro
//! precision/recall/F1 over topic sets, hit@k and BLEU by gold length.
//!
//! BLEU is single-reference and corpus-level: clipped n-gram matches and
//! totals are summed over the corpus, an order with no matches gets
//! precision `ε / total` (`ε = 1e-9`), and the brevity penalty is
//! `exp(min(0, 1 − r/c))`. An empty candidate corpus scores 0.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::TopicMode;

pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<W: Hash + Eq>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
pub fn modified_precision<W: Hash + Eq>(candidate: &[W], reference: &[W], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, (candidate.len() + 1).saturating_sub(n))
}

/// Corpus BLEU with uniform weights over orders `1..=n`.
pub fn corpus_bleu<W: Hash + Eq, C: AsRef<[W]>, R: AsRef<[W]>>(pairs: &[(C, R)], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (c, r) in pairs {
        let (c, r) = (c.as_ref(), r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for k in 0..n {
            let (m, t) = modified_precision(c, r, k + 1);
            matched[k] += m;
            total[k] += t;
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            if matched[k] == 0 {
                (BLEU_EPSILON / total[k].max(1) as f64).ln()
            } else {
                (matched[k] as f64 / total[k] as f64).ln()
            }
        })
        .sum::<f64>()
        / n as f64;
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    bp * log_p.exp()
}

/// BLEU-n of a single candidate against a single reference.
pub fn bleu_n<W: Hash + Eq>(candidate: &[W], reference: &[W], n: usize) -> f64 {
    corpus_bleu(&[(candidate, reference)], n)
}

/// Mean of sentence BLEU-1..4.
pub fn sentence_avg_bleu<W: Hash + Eq>(candidate: &[W], reference: &[W]) -> f64 {
    (1..=4).map(|n| bleu_n(candidate, reference, n)).sum::<f64>() / 4.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Micro scores from counts; 0/0 counts as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Micro-averaged P/R/F1 over (sample, topic) decisions.
pub fn prf_multilabel(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Prf {
    assert_eq!(predicted.len(), gold.len(), "prediction and gold counts differ");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<_> = p.iter().collect();
        let g: BTreeSet<_> = g.iter().collect();
        tp += p.intersection(&g).count();
        fp += p.difference(&g).count();
        fn_ += g.difference(&p).count();
    }
    Prf::from_counts(tp, fp, fn_)
}

fn contains_run<W: PartialEq>(haystack: &[W], needle: &[W]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Topics whose full surface occurs as a contiguous run of `generated`.
pub fn mentioned_topics<W: PartialEq, S: AsRef<[W]>>(generated: &[W], lexicon: &[S]) -> Vec<usize> {
    lexicon
        .iter()
        .enumerate()
        .filter(|(_, s)| contains_run(generated, s.as_ref()))
        .map(|(t, _)| t)
        .collect()
}

/// Micro topic P/R/F1 of the topics mentioned in each response against
/// its gold topics. Each topic counts once per response.
pub fn topic_f1<W: PartialEq, G: AsRef<[W]>, S: AsRef<[W]>>(
    generated: &[G],
    gold: &[Vec<usize>],
    lexicon: &[S],
) -> Prf {
    let predicted: Vec<Vec<usize>> = generated
        .iter()
        .map(|g| mentioned_topics(g.as_ref(), lexicon))
        .collect();
    prf_multilabel(&predicted, gold)
}

/// Whether `gold` ranks within the top `k` scores; equal scores rank the
/// lower class first.
pub fn hit_at_k(scores: &[f64], gold: usize, k: usize) -> bool {
    let g = scores[gold];
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count();
    rank < k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive upper bound; `None` is unbounded.
    pub hi: Option<usize>,
    pub mean_bleu: f64,
    pub count: usize,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{}, {})", self.lo, hi),
            None => format!("[{}, inf)", self.lo),
        }
    }
}

/// Partitions pairs by reference length into `[e_i, e_{i+1})` buckets (the
/// last unbounded) and averages per-pair mean BLEU-1..4 in each.
pub fn length_bucketed_bleu<W: Hash + Eq, C: AsRef<[W]>, R: AsRef<[W]>>(
    pairs: &[(C, R)],
    edges: &[usize],
) -> Vec<LengthBucket> {
    let mut buckets: Vec<LengthBucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| LengthBucket {
            lo,
            hi: edges.get(i + 1).copied(),
            mean_bleu: 0.0,
            count: 0,
        })
        .collect();
    for (c, r) in pairs {
        let len = r.as_ref().len();
        if let Some(b) = buckets.iter_mut().rev().find(|b| len >= b.lo) {
            b.mean_bleu += sentence_avg_bleu(c.as_ref(), r.as_ref());
            b.count += 1;
        }
    }
    for b in &mut buckets {
        if b.count > 0 {
            b.mean_bleu /= b.count as f64;
        }
    }
    buckets
}

/// One scored generation, tokens as strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub response: Vec<String>,
    pub gold_response: Vec<String>,
    /// Predicted topic ids; `None` when no prediction was made.
    pub predicted_topics: Option<Vec<usize>>,
    pub gold_topics: Vec<usize>,
    /// Raw classifier scores, when available.
    pub topic_scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub mode: TopicMode,
    pub samples: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub topic_f1: f64,
    /// Only reported for multi-label corpora.
    pub topic_precision: Option<f64>,
    pub topic_recall: Option<f64>,
    pub pred_precision: Option<f64>,
    pub pred_recall: Option<f64>,
    pub pred_f1: Option<f64>,
    /// `(k, hit@k)` for multi-class corpora.
    pub hit_at: Option<Vec<(usize, f64)>>,
    /// Mean of BLEU-1, BLEU-4 and topic F1.
    pub avg_score: f64,
    pub length_buckets: Vec<LengthBucket>,
    pub notes: Vec<String>,
}

pub const DEFAULT_BUCKET_EDGES: [usize; 5] = [0, 10, 20, 40, 80];

/// Scores a set of generations. Multi-class hit@k treats an empty gold set
/// as the NONE class at index `n_topics`.
pub fn evaluate(
    samples: &[ScoredSample],
    lexicon: &[Vec<String>],
    mode: TopicMode,
    variant: &str,
    hit_ks: &[usize],
    bucket_edges: &[usize],
) -> MetricsReport {
    let pairs: Vec<(&[String], &[String])> = samples
        .iter()
        .map(|s| (s.response.as_slice(), s.gold_response.as_slice()))
        .collect();
    let bleu: Vec<f64> = (1..=4).map(|n| corpus_bleu(&pairs, n)).collect();
    let responses: Vec<&[String]> = samples.iter().map(|s| s.response.as_slice()).collect();
    let gold: Vec<Vec<usize>> = samples.iter().map(|s| s.gold_topics.clone()).collect();
    let tf = topic_f1(&responses, &gold, lexicon);
    let multilabel = mode == TopicMode::MultiLabel;
    let predicted: Option<Vec<Vec<usize>>> = samples.iter().map(|s| s.predicted_topics.clone()).collect();
    let pred = predicted
        .filter(|_| multilabel && !samples.is_empty())
        .map(|p| prf_multilabel(&p, &gold));
    let scores: Option<Vec<&Vec<f64>>> = samples.iter().map(|s| s.topic_scores.as_ref()).collect();
    let hit_at = scores.filter(|_| !multilabel && !samples.is_empty()).map(|scores| {
        hit_ks
            .iter()
            .map(|&k| {
                let hits = scores
                    .iter()
                    .zip(&gold)
                    .filter(|(s, g)| hit_at_k(s, g.first().copied().unwrap_or(lexicon.len()), k))
                    .count();
                (k, hits as f64 / samples.len() as f64)
            })
            .collect()
    });
    MetricsReport {
        variant: variant.to_string(),
        mode,
        samples: samples.len(),
        bleu_1: bleu[0],
        bleu_2: bleu[1],
        bleu_3: bleu[2],
        bleu_4: bleu[3],
        topic_f1: tf.f1,
        topic_precision: multilabel.then_some(tf.precision),
        topic_recall: multilabel.then_some(tf.recall),
        pred_precision: pred.map(|p| p.precision),
        pred_recall: pred.map(|p| p.recall),
        pred_f1: pred.map(|p| p.f1),
        hit_at,
        avg_score: (bleu[0] + bleu[3] + tf.f1) / 3.0,
        length_buckets: length_bucketed_bleu(&pairs, bucket_edges),
        notes: vec![
            format!("corpus BLEU, single reference, add-epsilon smoothing (epsilon = {BLEU_EPSILON:e}) for orders with no match"),
            "topic F1 counts a topic once per response when its full surface appears as a contiguous token run".into(),
            "avg_score = mean(bleu_1, bleu_4, topic_f1); length buckets average per-sample mean BLEU-1..4".into(),
        ],
    }
}

impl MetricsReport {
    /// Aligned text table, scores ×100.
    pub fn to_table(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut rows: Vec<(String, String)> = vec![
            ("samples".into(), self.samples.to_string()),
            ("BLEU-1".into(), pct(self.bleu_1)),
            ("BLEU-2".into(), pct(self.bleu_2)),
            ("BLEU-3".into(), pct(self.bleu_3)),
            ("BLEU-4".into(), pct(self.bleu_4)),
            ("Topic-F1".into(), pct(self.topic_f1)),
        ];
        if let (Some(p), Some(r)) = (self.topic_precision, self.topic_recall) {
            rows.push(("Topic-P".into(), pct(p)));
            rows.push(("Topic-R".into(), pct(r)));
        }
        rows.push(("Avg Score".into(), pct(self.avg_score)));
        if let (Some(p), Some(r), Some(f)) = (self.pred_precision, self.pred_recall, self.pred_f1) {
            rows.push(("Pred-P".into(), pct(p)));
            rows.push(("Pred-R".into(), pct(r)));
            rows.push(("Pred-F1".into(), pct(f)));
        }
        for (k, h) in self.hit_at.iter().flatten() {
            rows.push((format!("Hit@{k}"), pct(*h)));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("variant: {}  mode: {:?}\n", self.variant, self.mode);
        for (k, v) in &rows {
            let _ = writeln!(out, "{k:<width$}  {v:>8}");
        }
        out.push_str("\nBLEU by gold length\n");
        for b in &self.length_buckets {
            let _ = writeln!(out, "{:<12}  {:>8}  n={}", b.label(), pct(b.mean_bleu), b.count);
        }
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let c = toks("the cat sat on the mat today");
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &c, n), 1.0);
        }
    }

    #[test]
    fn brevity_penalty_case() {
        let b = bleu_n(&toks("a b c"), &toks("a b c d"), 1);
        assert!((b - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((b - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn clipped_precision_case() {
        assert_eq!(modified_precision(&toks("a a a"), &toks("a b"), 1), (1, 3));
        // no brevity penalty: candidate is longer
        assert_eq!(bleu_n(&toks("a a a"), &toks("a b"), 1), 1.0 / 3.0);
    }

    #[test]
    fn empty_candidate_and_smoothing() {
        assert_eq!(bleu_n::<&str>(&[], &toks("a b"), 1), 0.0);
        let b = bleu_n(&toks("x y z"), &toks("a b c"), 2);
        assert!(b > 0.0 && b < 1e-8);
    }

    #[test]
    fn corpus_level_sums_counts() {
        let pairs = [(toks("a b"), toks("a b")), (toks("c d e f"), toks("c x"))];
        // unigrams: 2/2 + 1/4 = 3/6; candidate 6 tokens vs reference 4
        assert!((corpus_bleu(&pairs, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn topic_f1_cases() {
        let lexicon = vec![toks("blood pressure"), toks("fever"), toks("cough")];
        let one = topic_f1(&[toks("your blood pressure is fine")], &[vec![0]], &lexicon);
        assert_eq!(one.f1, 1.0);
        let miss = topic_f1(&[toks("all good")], &[vec![1]], &lexicon);
        assert_eq!((miss.recall, miss.f1), (0.0, 0.0));
        // split surface does not count
        assert!(mentioned_topics(&toks("blood and pressure"), &lexicon).is_empty());
        let spurious = topic_f1(&[toks("fever and cough")], &[vec![1]], &lexicon);
        assert_eq!((spurious.precision, spurious.recall), (0.5, 1.0));
        assert!((spurious.f1 - 2.0 / 3.0).abs() < 1e-15);
        // three samples: tp = 1 + 1 + 0, fp = 1 + 0 + 0, fn = 0 + 1 + 1
        let gen = [toks("fever cough"), toks("blood pressure"), toks("nothing")];
        let gold = [vec![1], vec![0, 2], vec![1]];
        let m = topic_f1(&gen, &gold, &lexicon);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 2));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
        // duplicate mentions count once
        assert_eq!(topic_f1(&[toks("fever fever")], &[vec![1]], &lexicon).tp, 1);
    }

    #[test]
    fn prf_conventions() {
        let gold = vec![vec![1, 2], vec![0]];
        assert_eq!(prf_multilabel(&gold, &gold).f1, 1.0);
        let none = prf_multilabel(&[vec![], vec![]], &gold);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf_matches_brute_force_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let k = rng.random_range(1..9);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
                (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.3)).collect()).collect()
            };
            let (p, g) = (draw(&mut rng), draw(&mut rng));
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..n {
                for c in 0..k {
                    match (p[i][c], g[i][c]) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            let sets = |m: &Vec<Vec<bool>>| -> Vec<Vec<usize>> {
                m.iter().map(|r| (0..k).filter(|&c| r[c]).collect()).collect()
            };
            assert_eq!(prf_multilabel(&sets(&p), &sets(&g)), Prf::from_counts(tp, fp, fn_));
        }
    }

    #[test]
    fn hit_at_k_cases() {
        let s = [0.1, 0.5, 0.3, 0.1];
        assert!(!hit_at_k(&s, 2, 1));
        assert!(hit_at_k(&s, 2, 3));
        assert!(hit_at_k(&s, 1, 1));
        // tie at 0.1: class 0 outranks class 3
        assert!(hit_at_k(&s, 0, 3) && !hit_at_k(&s, 3, 3));
        assert!(hit_at_k(&s, 3, 4));
    }

    #[test]
    fn length_buckets() {
        let pairs = [
            (toks("a b c d e"), toks("a b c d e")),
            (toks("x"), toks("a b c d e")),
            (
                toks("p q r s"),
                toks("p q r s t u v w x y z a b c d e f g h i j k l m n"),
            ),
        ];
        let b = length_bucketed_bleu(&pairs, &[0, 20]);
        assert_eq!(b[0].count, 2);
        assert_eq!(b[1].count, 1);
        let first = (1.0 + sentence_avg_bleu(&pairs[1].0, &pairs[1].1)) / 2.0;
        assert!((b[0].mean_bleu - first).abs() < 1e-15);
        let one = length_bucketed_bleu(&pairs, &[0]);
        let mean = pairs.iter().map(|(c, r)| sentence_avg_bleu(c, r)).sum::<f64>() / 3.0;
        assert!((one[0].mean_bleu - mean).abs() < 1e-15);
        assert_eq!(length_bucketed_bleu(&pairs, &[0, 100, 200])[2].count, 0);
    }

    #[test]
    fn four_sample_bucket_means() {
        // hand-checked per-sample averages: identity 1.0, disjoint ~0
        let pairs = [
            (toks("a b c d"), toks("a b c d")),
            (toks("e f g h"), toks("e f g h")),
            (toks("m n o p q r"), toks("m n o p q r")),
            (toks("z z z z z z"), toks("y y y y y y")),
        ];
        let b = length_bucketed_bleu(&pairs, &[0, 5]);
        assert_eq!((b[0].count, b[1].count), (2, 2));
        assert_eq!(b[0].mean_bleu, 1.0);
        assert!((b[1].mean_bleu - 0.5).abs() < 1e-8);
    }

    #[test]
    fn report_shape_by_mode() {
        let lex = vec![vec!["t0".to_string()], vec!["t1".to_string()]];
        let s = |resp: &str, gold: Vec<usize>| ScoredSample {
            response: resp.split(' ').map(String::from).collect(),
            gold_response: resp.split(' ').map(String::from).collect(),
            predicted_topics: Some(gold.clone()),
            gold_topics: gold,
            topic_scores: Some(vec![1.0, 0.0, 0.5]),
        };
        let samples = [s("a t0 b c d", vec![0]), s("e f g h i", vec![])];
        let mc = evaluate(&samples, &lex, TopicMode::MultiClass, "stage-two-gpt", &[1, 3], &[0]);
        assert_eq!(mc.hit_at, Some(vec![(1, 0.5), (3, 1.0)]));
        assert!(mc.topic_precision.is_none() && mc.pred_f1.is_none());
        assert_eq!(mc.bleu_4, 1.0);
        let ml = evaluate(&samples, &lex, TopicMode::MultiLabel, "stage-two-gpt", &[1], &[0]);
        assert!(ml.hit_at.is_none());
        assert_eq!(ml.pred_f1, Some(1.0));
        assert_eq!(ml.topic_f1, 1.0);
        assert!((ml.avg_score - 1.0).abs() < 1e-15);
        assert!(ml.to_table().contains("Topic-P"));
        assert!(mc.to_table().contains("Hit@3"));
    }

    proptest! {
        #[test]
        fn hit_at_k_is_monotone(scores in prop::collection::vec(-5.0f64..5.0, 1..12), g in 0usize..12) {
            let gold = g % scores.len();
            let hits: Vec<bool> = (1..=scores.len()).map(|k| hit_at_k(&scores, gold, k)).collect();
            prop_assert!(hits.windows(2).all(|w| !w[0] || w[1]));
            prop_assert!(hits[scores.len() - 1]);
        }

        #[test]
        fn bleu_is_invariant_to_renaming(
            cand in prop::collection::vec(0u32..8, 1..15),
            refr in prop::collection::vec(0u32..8, 1..15),
            shift in 1u32..100,
        ) {
            let rename = |v: &[u32]| v.iter().map(|x| (x * 7 + shift) % 1000).collect::<Vec<_>>();
            for n in 1..=4 {
                prop_assert_eq!(bleu_n(&cand, &refr, n), bleu_n(&rename(&cand), &rename(&refr), n));
            }
        }

        #[test]
        fn corrupting_a_match_never_raises_bleu1(
            refr in prop::collection::vec(0u32..6, 1..12),
            cand in prop::collection::vec(0u32..6, 1..12),
            at in 0usize..12,
        ) {
            let i = at % cand.len();
            let mut worse = cand.clone();
            worse[i] = 999;
            prop_assert!(bleu_n(&worse, &refr, 1) <= bleu_n(&cand, &refr, 1));
        }

        #[test]
        fn scores_are_in_unit_interval(
            cand in prop::collection::vec(0u32..5, 0..10),
            refr in prop::collection::vec(0u32..5, 1..10),
        ) {
            for n in 1..=4 {
                let b = bleu_n(&cand, &refr, n);
                prop_assert!((0.0..=1.0).contains(&b));
            }
        }
    }
}

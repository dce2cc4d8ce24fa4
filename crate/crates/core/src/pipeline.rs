//! Greedy three-pass inference: coarse draft, topic prediction from the
//! history alone, then a refined response conditioned on both.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_refine_input, RefineContext, TopicMode, TrainingSample};
use crate::error::{Error, Result};
use crate::net::tensor::argmax;
use crate::net::{forward_cls, forward_lm, JointModel, ModelConfig, Params};
use crate::objective::encoder_input;
use crate::scalar::Scalar;
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_decode: usize,
    /// Multi-label decision threshold on σ(score).
    pub threshold: f64,
    /// Cut-offs reported as hit@k for multi-class corpora.
    pub hit_ks: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_decode: 50,
            threshold: 0.5,
            hit_ks: vec![1, 3, 5],
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_decode == 0 {
            return Err(Error::Config("max_decode must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.hit_ks.contains(&0) {
            return Err(Error::Config("hit@k cut-offs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Coarse draft only.
    StageOne,
    /// Topics from the shared causal model's classification head.
    #[default]
    StageTwoGpt,
    /// Topics from the separate bidirectional classifier.
    StageTwoBert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThreePassOutput {
    /// Coarse response without EOS.
    pub coarse_ids: Vec<usize>,
    /// Raw classifier logits; empty for [`Variant::StageOne`].
    pub topic_scores: Vec<f64>,
    /// Predicted topic ids, ascending.
    pub predicted_topics: Vec<usize>,
    /// Refined response without EOS; `None` for [`Variant::StageOne`].
    pub refined_ids: Option<Vec<usize>>,
}

impl ThreePassOutput {
    /// The response a variant is scored on.
    pub fn response(&self) -> &[usize] {
        self.refined_ids.as_deref().unwrap_or(&self.coarse_ids)
    }
}

/// Greedy continuation of `prefix ++ [BOS]`, stopping at EOS (dropped) or
/// after `max_decode` tokens. Ties go to the lowest token id.
pub fn greedy_decode<T: Scalar>(
    p: &Params<T>,
    cfg: &ModelConfig,
    prefix: &[usize],
    max_decode: usize,
) -> Result<Vec<usize>> {
    if prefix.len() + max_decode > cfg.max_positions {
        return Err(Error::Range(format!(
            "prefix of {} ids leaves no room for {max_decode} decoded tokens within {} positions",
            prefix.len(),
            cfg.max_positions
        )));
    }
    let mut seq = Vec::with_capacity(prefix.len() + max_decode + 1);
    seq.extend_from_slice(prefix);
    seq.push(BOS);
    let start = seq.len();
    for _ in 0..max_decode {
        let (logits, _) = forward_lm(p, cfg, &seq)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == EOS {
            break;
        }
        seq.push(next);
    }
    Ok(seq.split_off(start))
}

/// Classifier logits for `history` and the decided topic set. In
/// multi-class mode the top class is chosen and the NONE class (index
/// `n_topics`) decodes to no topic.
pub fn predict_topics<T: Scalar>(
    model: &JointModel<T>,
    history: &[usize],
    mode: TopicMode,
    threshold: f64,
    variant: Variant,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let logits = match variant {
        Variant::StageTwoBert => match (&model.bert, &model.bert_cfg) {
            (Some(b), Some(c)) => forward_cls(b, c, &encoder_input(history))?.0,
            _ => return Err(Error::Config("stage-two-bert needs a separate classifier".into())),
        },
        _ => forward_cls(&model.gpt, &model.gpt_cfg, history)?.0,
    };
    let scores: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let topics = decide_topics(&scores, mode, threshold);
    Ok((scores, topics))
}

/// Applies the decision rule to raw scores.
pub fn decide_topics(scores: &[f64], mode: TopicMode, threshold: f64) -> Vec<usize> {
    match mode {
        TopicMode::MultiClass => {
            let c = argmax(scores);
            if c + 1 == scores.len() {
                vec![]
            } else {
                vec![c]
            }
        }
        TopicMode::MultiLabel => scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| 1.0 / (1.0 + (-s).exp()) > threshold)
            .map(|(c, _)| c)
            .collect(),
    }
}

/// Settings shared by every sample of a generation run.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub mode: TopicMode,
    pub decode: DecodeConfig,
    pub variant: Variant,
    pub refine_context: RefineContext,
    /// Length budget of the refine input.
    pub refine_budget: usize,
}

/// Runs the three passes for one history. `topics_override` replaces the
/// predicted topics fed to the refine pass (scores are still reported).
pub fn three_pass<T: Scalar>(
    model: &JointModel<T>,
    vocab: &Vocab,
    history: &[usize],
    cfg: &PipelineConfig,
    topics_override: Option<&[usize]>,
) -> Result<ThreePassOutput> {
    let coarse = greedy_decode(&model.gpt, &model.gpt_cfg, history, cfg.decode.max_decode)?;
    if cfg.variant == Variant::StageOne {
        return Ok(ThreePassOutput {
            coarse_ids: coarse,
            topic_scores: vec![],
            predicted_topics: vec![],
            refined_ids: None,
        });
    }
    let (scores, predicted) = predict_topics(model, history, cfg.mode, cfg.decode.threshold, cfg.variant)?;
    let topics = topics_override
        .map(<[usize]>::to_vec)
        .unwrap_or_else(|| predicted.clone());
    let prefix = build_refine_input(history, &coarse, &topics, vocab, cfg.refine_context, cfg.refine_budget)?;
    let refined = greedy_decode(&model.gpt, &model.gpt_cfg, &prefix, cfg.decode.max_decode)?;
    Ok(ThreePassOutput {
        coarse_ids: coarse,
        topic_scores: scores,
        predicted_topics: predicted,
        refined_ids: Some(refined),
    })
}

/// Generates for every sample in order. With `gold_topics` the refine pass
/// is fed each sample's gold topics.
pub fn generate_batch<T: Scalar>(
    model: &JointModel<T>,
    vocab: &Vocab,
    samples: &[TrainingSample],
    cfg: &PipelineConfig,
    gold_topics: bool,
) -> Result<Vec<ThreePassOutput>> {
    samples
        .iter()
        .map(|s| {
            let over = gold_topics.then_some(s.gold_topics.as_slice());
            three_pass(model, vocab, &s.history_ids, cfg, over)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus_samples, generate_synthetic, SampleConfig, SyntheticConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(v: usize, k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::causal(v, k, 64)
        }
    }

    /// Every hidden state is zero after the final norm (zero gain), so the
    /// LM logits equal the head bias; a head weight is not needed.
    fn constant_logits(cfg: &ModelConfig, favoured: usize) -> Params<f64> {
        let mut p = Params::<f64>::init(cfg, 1).unwrap();
        p.lnf_gain.fill(0.0);
        p.lnf_bias.fill(0.0);
        p.lnf_bias.data_mut()[0] = 1.0;
        let head = p.lm_head.as_mut().unwrap();
        head.fill(0.0);
        head.row_mut(0)[favoured] = 3.0;
        p
    }

    #[test]
    fn constant_logits_repeat_the_favoured_token() {
        let cfg = tiny(20, 4);
        let p = constant_logits(&cfg, 13);
        assert_eq!(greedy_decode(&p, &cfg, &[BOS, 11, 12], 6).unwrap(), vec![13; 6]);
        assert_eq!(greedy_decode(&p, &cfg, &[BOS, 11, 12], 1).unwrap(), vec![13]);
        let stop = constant_logits(&cfg, EOS);
        assert!(greedy_decode(&stop, &cfg, &[BOS], 6).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_the_lowest_id() {
        let cfg = tiny(20, 4);
        let mut p = constant_logits(&cfg, 15);
        p.lm_head.as_mut().unwrap().row_mut(0)[12] = 3.0;
        assert_eq!(greedy_decode(&p, &cfg, &[BOS], 3).unwrap(), vec![12; 3]);
    }

    #[test]
    fn prefix_must_leave_room() {
        let cfg = tiny(20, 4);
        let p = constant_logits(&cfg, 13);
        assert!(matches!(greedy_decode(&p, &cfg, &[11; 60], 5), Err(Error::Range(_))));
        assert_eq!(greedy_decode(&p, &cfg, &[11; 59], 5).unwrap().len(), 5);
    }

    #[test]
    fn decision_rules() {
        assert_eq!(
            decide_topics(&[0.1, 2.0, -1.0, 0.0], TopicMode::MultiClass, 0.5),
            vec![1]
        );
        assert!(decide_topics(&[0.1, 0.0, -1.0, 2.0], TopicMode::MultiClass, 0.5).is_empty());
        assert!(decide_topics(&[-0.1, -3.0, -1.0], TopicMode::MultiLabel, 0.5).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s: Vec<f64> = (0..9).map(|_| rng.random_range(-4.0..4.0)).collect();
            let tau = rng.random_range(0.05..0.95);
            let brute: Vec<usize> = (0..9).filter(|&c| 1.0 / (1.0 + (-s[c]).exp()) > tau).collect();
            assert_eq!(decide_topics(&s, TopicMode::MultiLabel, tau), brute);
        }
    }

    fn fixture() -> (JointModel<f64>, Vocab, Vec<TrainingSample>, PipelineConfig) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_dialogues: 3,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let sc = SampleConfig {
            mode: TopicMode::MultiLabel,
            max_context: 40,
            max_decode: 6,
            use_roles: true,
        };
        let samples = build_corpus_samples(&corpus, &vocab, &sc).unwrap();
        let gcfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::causal(vocab.len(), corpus.num_classes(), 60)
        };
        let model = JointModel::init(gcfg.clone(), Some(gcfg.to_encoder()), 3).unwrap();
        let pc = PipelineConfig {
            mode: TopicMode::MultiLabel,
            decode: DecodeConfig {
                max_decode: 6,
                ..Default::default()
            },
            variant: Variant::StageTwoGpt,
            refine_context: RefineContext::Full,
            refine_budget: 46,
        };
        (model, vocab, samples, pc)
    }

    #[test]
    fn stage_one_stops_after_the_draft() {
        let (model, vocab, samples, mut pc) = fixture();
        pc.variant = Variant::StageOne;
        let out = three_pass(&model, &vocab, &samples[0].history_ids, &pc, None).unwrap();
        assert!(out.refined_ids.is_none() && out.topic_scores.is_empty());
        assert_eq!(out.response(), out.coarse_ids.as_slice());
    }

    #[test]
    fn pass_two_ignores_the_draft_and_outputs_are_deterministic() {
        let (model, vocab, samples, mut pc) = fixture();
        for variant in [Variant::StageTwoGpt, Variant::StageTwoBert] {
            pc.variant = variant;
            for s in &samples {
                let a = three_pass(&model, &vocab, &s.history_ids, &pc, None).unwrap();
                let b = three_pass(&model, &vocab, &s.history_ids, &pc, None).unwrap();
                assert_eq!(a, b);
                let alone = predict_topics(&model, &s.history_ids, pc.mode, 0.5, variant).unwrap();
                assert_eq!((a.topic_scores.clone(), a.predicted_topics.clone()), alone);
                assert!(a.coarse_ids.len() <= 6 && a.refined_ids.unwrap().len() <= 6);
            }
        }
    }

    #[test]
    fn bert_variant_requires_a_separate_classifier() {
        let (mut model, vocab, samples, mut pc) = fixture();
        model.bert = None;
        model.bert_cfg = None;
        pc.variant = Variant::StageTwoBert;
        assert!(matches!(
            three_pass(&model, &vocab, &samples[0].history_ids, &pc, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn topic_override_feeds_refinement_only() {
        let (model, vocab, samples, pc) = fixture();
        let s = &samples[0];
        let out = three_pass(&model, &vocab, &s.history_ids, &pc, Some(&[0, 5])).unwrap();
        let plain = three_pass(&model, &vocab, &s.history_ids, &pc, None).unwrap();
        assert_eq!(out.predicted_topics, plain.predicted_topics);
        assert_eq!(out.coarse_ids, plain.coarse_ids);
        let batch = generate_batch(&model, &vocab, &samples, &pc, false).unwrap();
        assert_eq!(batch[0], plain);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_stay_within_the_decode_budget(seed in 0u64..500, max_decode in 1usize..7, which in 0usize..6) {
            let (model, vocab, samples, mut pc) = fixture();
            let model = JointModel::<f64>::init(model.gpt_cfg.clone(), model.bert_cfg.clone(), seed).unwrap();
            pc.decode.max_decode = max_decode;
            let s = &samples[which % samples.len()];
            let out = three_pass(&model, &vocab, &s.history_ids, &pc, None).unwrap();
            prop_assert!(out.coarse_ids.len() <= max_decode);
            prop_assert!(out.refined_ids.unwrap().len() <= max_decode);
        }
    }
}

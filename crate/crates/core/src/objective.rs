//! Losses, the AdamW optimiser with linear warmup, and the teacher-forced
//! joint training step.
//!
//! Each sample contributes up to three terms:
//!
//! * `l_one`: token cross-entropy of the gold response given the history;
//! * `l_topic`: softmax or per-class sigmoid cross-entropy of the topic head
//!   reading the history alone;
//! * `l_refine`: token cross-entropy of the gold response given the history,
//!   a coarse draft and the gold topics.
//!
//! Every term is a mean over its elements and the batch; the step minimises
//! their plain sum.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_refine_input, RefineContext, TopicLabel, TrainingSample};
use crate::error::{Error, Result};
use crate::net::tensor::{argmax, log_sum_exp, softmax};
use crate::net::{backward_into, forward_cls, forward_joint, forward_lm, Grads, JointModel, Params, Tensor};
use crate::scalar::Scalar;
use crate::vocab::{Vocab, BOS, CLS, EOS};

/// Mean token cross-entropy over positions where `mask` is set, and its
/// gradient w.r.t. `logits`.
pub fn loss_lm<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<(T, Tensor<T>)> {
    let rows = logits.rows();
    let vocab = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Contract(format!(
            "{} targets and {} mask entries for {rows} logit rows",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("LM loss over an empty mask".into()));
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for t in (0..rows).filter(|&t| mask[t]) {
        let target = targets[t];
        if target >= vocab {
            return Err(Error::Range(format!("target {target} outside vocabulary of {vocab}")));
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[target];
        let g = grad.row_mut(t);
        for (gi, p) in g.iter_mut().zip(softmax(row)) {
            *gi = p * inv;
        }
        g[target] -= inv;
    }
    Ok((total * inv, grad))
}

/// `−log softmax(logits)[label]` and `softmax − onehot`.
pub fn loss_topic_multiclass<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Range(format!("label {label} outside {} classes", logits.len())));
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean over classes of binary cross-entropy with logits.
pub fn loss_topic_multilabel<T: Scalar>(logits: &[T], labels: &[T]) -> Result<(T, Vec<T>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Contract("multi-label targets must be 0 or 1".into()));
    }
    let inv = T::one() / T::from_usize(logits.len()).unwrap();
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        // −log σ(z) = softplus(−z), −log(1−σ(z)) = softplus(z)
        total += if y == T::one() { softplus(-z) } else { softplus(z) };
        grad.push((sigmoid(z) - y) * inv);
    }
    Ok((total * inv, grad))
}

/// Topic loss for either label kind.
pub fn loss_topic<T: Scalar>(logits: &[T], label: &TopicLabel) -> Result<(T, Vec<T>)> {
    match label {
        TopicLabel::Class(c) => loss_topic_multiclass(logits, *c),
        TopicLabel::MultiHot(hot) => {
            let y: Vec<T> = hot.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            loss_topic_multilabel(logits, &y)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 2000,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for 1-based update `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments, mirroring the model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub hyper: AdamWConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: Grads<T>,
    pub v: Grads<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(model: &JointModel<T>, hyper: AdamWConfig) -> Self {
        OptState {
            hyper,
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }
}

/// One AdamW update of a flat tensor at 1-based `step` with rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hyper: &AdamWConfig,
    decay: bool,
) {
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let one = T::one();
    let bc1 = one - T::lit(hyper.beta1.powi(step as i32));
    let bc2 = one - T::lit(hyper.beta2.powi(step as i32));
    let lr_t = T::lit(lr);
    let eps = T::lit(hyper.eps);
    let shrink = if decay {
        one - lr_t * T::lit(hyper.weight_decay)
    } else {
        one
    };
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = *p * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one decoupled-weight-decay Adam update to every parameter.
/// Norm gains/biases and bias vectors are not decayed. Returns the rate used.
pub fn adamw_step<T: Scalar>(model: &mut JointModel<T>, grads: &Grads<T>, opt: &mut OptState<T>) -> Result<f64> {
    opt.step += 1;
    let lr = opt.hyper.lr_at(opt.step);
    let groups = [
        (
            Some(&mut model.gpt),
            Some(&grads.gpt),
            Some(&mut opt.m.gpt),
            Some(&mut opt.v.gpt),
        ),
        (
            model.bert.as_mut(),
            grads.bert.as_ref(),
            opt.m.bert.as_mut(),
            opt.v.bert.as_mut(),
        ),
    ];
    for group in groups {
        match group {
            (Some(p), Some(g), Some(m), Some(v)) => update_params(p, g, m, v, opt.step, lr, &opt.hyper)?,
            (None, None, None, None) => {}
            _ => return Err(Error::Contract("optimizer state does not match the model".into())),
        }
    }
    Ok(lr)
}

fn update_params<T: Scalar>(
    p: &mut Params<T>,
    g: &Params<T>,
    m: &mut Params<T>,
    v: &mut Params<T>,
    step: u64,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    let ge = g.entries();
    let mut me = m.entries_mut();
    let mut ve = v.entries_mut();
    let pe = p.entries_mut();
    if pe.len() != ge.len() || me.len() != ge.len() || ve.len() != ge.len() {
        return Err(Error::Contract("gradient map does not match parameters".into()));
    }
    for (i, (name, kind, t)) in pe.into_iter().enumerate() {
        if t.shape() != ge[i].2.shape() || t.shape() != me[i].2.shape() {
            return Err(Error::Contract(format!("shape mismatch for {name}")));
        }
        adamw_update(
            t.data_mut(),
            ge[i].2.data(),
            me[i].2.data_mut(),
            ve[i].2.data_mut(),
            step,
            lr,
            hyper,
            kind.decays(),
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// All three terms.
    #[default]
    Full,
    /// Generation plus topic prediction, no refinement.
    Gpt2dh,
    /// Generation only.
    StageOne,
}

/// Where the coarse draft fed to the refine pass comes from during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseSource {
    /// Per-position argmax of the teacher-forced generation logits, cut at
    /// the first EOS.
    #[default]
    ArgmaxTeacherForced,
    Gold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub one: bool,
    pub topic: bool,
    pub refine: bool,
}

impl Terms {
    pub const ONE: Terms = Terms {
        one: true,
        topic: false,
        refine: false,
    };
    pub const TOPIC: Terms = Terms {
        one: false,
        topic: true,
        refine: false,
    };
    pub const REFINE: Terms = Terms {
        one: false,
        topic: false,
        refine: true,
    };
}

impl From<Ablation> for Terms {
    fn from(a: Ablation) -> Self {
        Terms {
            one: true,
            topic: a != Ablation::StageOne,
            refine: a == Ablation::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ablation: Ablation,
    pub refine_context: RefineContext,
    pub coarse_source: CoarseSource,
    pub max_context: usize,
    pub max_decode: usize,
    pub adamw: AdamWConfig,
}

impl TrainConfig {
    /// Length budget for refine inputs.
    pub fn refine_budget(&self) -> usize {
        self.max_context + self.max_decode
    }
}

/// Per-term losses in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_one: f64,
    pub l_topic: f64,
    pub l_refine: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_one: f64, l_topic: f64, l_refine: f64) -> Self {
        LossBreakdown {
            l_one,
            l_topic,
            l_refine,
            l_total: l_one + l_topic + l_refine,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_one.is_finite() && self.l_topic.is_finite() && self.l_refine.is_finite() && self.l_total.is_finite()
    }
}

/// Input, targets and mask for teacher-forced generation of `response`
/// after `prefix ++ [BOS]`.
pub fn teacher_forced(prefix: &[usize], response: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut seq = Vec::with_capacity(prefix.len() + response.len() + 1);
    seq.extend_from_slice(prefix);
    seq.push(BOS);
    seq.extend_from_slice(response);
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].to_vec();
    let mask = (0..inputs.len()).map(|t| t >= prefix.len()).collect();
    (inputs, targets, mask)
}

/// Argmax draft from teacher-forced logits over the response rows, cut at
/// the first EOS.
pub fn coarse_from_logits<T: Scalar>(logits: &Tensor<T>, prefix_len: usize) -> Vec<usize> {
    (prefix_len..logits.rows())
        .map(|t| argmax(logits.row(t)))
        .take_while(|&id| id != EOS)
        .collect()
}

/// Classifier input for the separate encoder.
pub fn encoder_input(history: &[usize]) -> Vec<usize> {
    std::iter::once(CLS).chain(history.iter().copied()).collect()
}

/// Per-sample losses with their gradients accumulated into `grads`
/// scaled by `scale`.
pub fn accumulate_sample<T: Scalar>(
    model: &JointModel<T>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    vocab: &Vocab,
    terms: Terms,
    grads: &mut Grads<T>,
    scale: T,
) -> Result<[T; 3]> {
    let gcfg = &model.gpt_cfg;
    let history = &sample.history_ids;
    let (inputs, targets, mask) = teacher_forced(history, &sample.response_ids);
    let shared_topic = terms.topic && model.bert.is_none();
    let mut losses = [T::zero(); 3];

    // pass A (and B when the classifier shares the causal backbone: by
    // causality the history's last position is identical in both passes)
    let need_a = terms.one || shared_topic || (terms.refine && cfg.coarse_source == CoarseSource::ArgmaxTeacherForced);
    let mut coarse = None;
    if need_a {
        let (lm, cls, trace) = forward_joint(&model.gpt, gcfg, &inputs, history.len() - 1)?;
        let d_lm = if terms.one {
            let (l, mut d) = loss_lm(&lm, &targets, &mask)?;
            losses[0] = l;
            d.data_mut().iter_mut().for_each(|x| *x *= scale);
            Some(d)
        } else {
            None
        };
        let d_cls = if shared_topic {
            let (l, mut d) = loss_topic(&cls, &sample.topic_label)?;
            losses[1] = l;
            d.iter_mut().for_each(|x| *x *= scale);
            Some(d)
        } else {
            None
        };
        if d_lm.is_some() || d_cls.is_some() {
            backward_into(
                &mut grads.gpt,
                &model.gpt,
                gcfg,
                &trace,
                d_lm.as_ref(),
                d_cls.as_deref(),
            )?;
        }
        if terms.refine && cfg.coarse_source == CoarseSource::ArgmaxTeacherForced {
            coarse = Some(coarse_from_logits(&lm, history.len()));
        }
    }

    // pass B on the separate encoder
    if terms.topic && !shared_topic {
        let (bert, bcfg, bgrads) = match (&model.bert, &model.bert_cfg, &mut grads.bert) {
            (Some(b), Some(c), Some(g)) => (b, c, g),
            _ => return Err(Error::Contract("separate classifier without parameters".into())),
        };
        let (cls, trace) = forward_cls(bert, bcfg, &encoder_input(history))?;
        let (l, mut d) = loss_topic(&cls, &sample.topic_label)?;
        losses[1] = l;
        d.iter_mut().for_each(|x| *x *= scale);
        backward_into(bgrads, bert, bcfg, &trace, None, Some(&d))?;
    }

    // pass C: refine on the detached draft plus gold topics
    if terms.refine {
        let draft = coarse.unwrap_or_else(|| sample.response_tokens().to_vec());
        let prefix = build_refine_input(
            history,
            &draft,
            &sample.gold_topics,
            vocab,
            cfg.refine_context,
            cfg.refine_budget(),
        )?;
        let (inputs, targets, mask) = teacher_forced(&prefix, &sample.response_ids);
        let (lm, trace) = forward_lm(&model.gpt, gcfg, &inputs)?;
        let (l, mut d) = loss_lm(&lm, &targets, &mask)?;
        losses[2] = l;
        d.data_mut().iter_mut().for_each(|x| *x *= scale);
        backward_into(&mut grads.gpt, &model.gpt, gcfg, &trace, Some(&d), None)?;
    }
    Ok(losses)
}

/// Losses and full gradients of the selected terms for one sample.
pub fn sample_gradients<T: Scalar>(
    model: &JointModel<T>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    vocab: &Vocab,
    terms: Terms,
) -> Result<([T; 3], Grads<T>)> {
    let mut grads = model.zero_grads();
    let losses = accumulate_sample(model, sample, cfg, vocab, terms, &mut grads, T::one())?;
    Ok((losses, grads))
}

/// Forward-only per-term losses `[l_one, l_topic, l_refine]` for one sample.
pub fn sample_losses<T: Scalar>(
    model: &JointModel<T>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    vocab: &Vocab,
    terms: Terms,
) -> Result<[T; 3]> {
    let gcfg = &model.gpt_cfg;
    let history = &sample.history_ids;
    let (inputs, targets, mask) = teacher_forced(history, &sample.response_ids);
    let mut out = [T::zero(); 3];
    let (lm, cls, _) = forward_joint(&model.gpt, gcfg, &inputs, history.len() - 1)?;
    if terms.one {
        out[0] = loss_lm(&lm, &targets, &mask)?.0;
    }
    if terms.topic {
        let logits = match (&model.bert, &model.bert_cfg) {
            (Some(b), Some(c)) => forward_cls(b, c, &encoder_input(history))?.0,
            _ => cls,
        };
        out[1] = loss_topic(&logits, &sample.topic_label)?.0;
    }
    if terms.refine {
        let draft = match cfg.coarse_source {
            CoarseSource::ArgmaxTeacherForced => coarse_from_logits(&lm, history.len()),
            CoarseSource::Gold => sample.response_tokens().to_vec(),
        };
        let prefix = build_refine_input(
            history,
            &draft,
            &sample.gold_topics,
            vocab,
            cfg.refine_context,
            cfg.refine_budget(),
        )?;
        let (inputs, targets, mask) = teacher_forced(&prefix, &sample.response_ids);
        let (lm, _) = forward_lm(&model.gpt, gcfg, &inputs)?;
        out[2] = loss_lm(&lm, &targets, &mask)?.0;
    }
    Ok(out)
}

/// Names non-finite weights first, then non-finite gradients, then the
/// largest finite gradients.
fn diagnostics<T: Scalar>(model: &JointModel<T>, grads: &Grads<T>) -> String {
    let mut bad_w = Vec::new();
    let mut bad_g = Vec::new();
    let mut largest = Vec::new();
    for ((prefix, p), g) in model
        .groups()
        .into_iter()
        .zip(std::iter::once(&grads.gpt).chain(grads.bert.as_ref()))
    {
        for ((name, _, t), (_, _, gt)) in p.entries().into_iter().zip(g.entries()) {
            if !t.is_finite() {
                bad_w.push(format!("{prefix}.{name}"));
            } else if !gt.is_finite() {
                bad_g.push(format!("{prefix}.{name}"));
            } else {
                largest.push((gt.max_abs().as_f64(), format!("{prefix}.{name}")));
            }
        }
    }
    largest.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut parts = Vec::new();
    if !bad_w.is_empty() {
        parts.push(format!("non-finite weights: {}", bad_w.join(", ")));
    }
    if !bad_g.is_empty() {
        parts.push(format!("{} tensors with non-finite gradients", bad_g.len()));
    }
    let top: Vec<String> = largest.iter().take(3).map(|(v, n)| format!("{n} {v:.3e}")).collect();
    if !top.is_empty() {
        parts.push(format!("largest gradients: {}", top.join(", ")));
    }
    parts.join("; ")
}

/// One optimisation step over `batch`: accumulates the active terms'
/// gradients (mean over the batch, fixed order), then applies AdamW.
/// Nothing is updated if any loss is non-finite.
pub fn train_step<T: Scalar>(
    model: &mut JointModel<T>,
    opt: &mut OptState<T>,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<(LossBreakdown, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let terms = Terms::from(cfg.ablation);
    let scale = T::one() / T::from_usize(batch.len()).unwrap();
    let mut grads = model.zero_grads();
    let mut sums = [0.0f64; 3];
    for sample in batch {
        let l = accumulate_sample(model, sample, cfg, vocab, terms, &mut grads, scale)?;
        for (s, x) in sums.iter_mut().zip(l) {
            *s += x.as_f64();
        }
    }
    let n = batch.len() as f64;
    let losses = LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n);
    if !losses.is_finite() {
        return Err(Error::NonFinite {
            step: opt.step + 1,
            diagnostics: diagnostics(model, &grads),
        });
    }
    let lr = adamw_step(model, &grads, opt)?;
    Ok((losses, lr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus_samples, generate_synthetic, SampleConfig, SyntheticConfig, TopicMode};
    use crate::net::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-class binary cross-entropy in plain f64.
    fn bce_oracle(z: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&zi, &yi) in z.iter().zip(y) {
            let p = 1.0 / (1.0 + (-zi).exp());
            s += -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln());
        }
        s / z.len() as f64
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "coordinate {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn uniform_lm_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 64]);
        let (l, _) = loss_lm(&logits, &[5, 9, 2], &[false, true, true]).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
        assert!((l - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn lm_loss_ignores_unmasked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..4 * 10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = Tensor::from_vec(&[4, 10], data.clone());
        let mut corrupted = data;
        for x in &mut corrupted[..20] {
            *x = 99.0;
        }
        let b = Tensor::from_vec(&[4, 10], corrupted);
        let mask = [false, false, true, true];
        assert_eq!(
            loss_lm(&a, &[1, 2, 3, 4], &mask).unwrap().0,
            loss_lm(&b, &[1, 2, 3, 4], &mask).unwrap().0
        );
        assert!(matches!(
            loss_lm(&a, &[1, 2, 3, 4], &[false; 4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lm_loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = Tensor::<f64>::zeros(&[1, 8]);
            logits.row_mut(0)[3] = margin;
            let (l, _) = loss_lm(&logits, &[3], &[true]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = [1, 4, 0];
        let mask = [true, false, true];
        let f = |v: &[f64]| {
            loss_lm(&Tensor::from_vec(&[3, 6], v.to_vec()), &targets, &mask)
                .unwrap()
                .0
        };
        let (_, g) = loss_lm(&Tensor::from_vec(&[3, 6], x.clone()), &targets, &mask).unwrap();
        fd_check(f, &x, g.data());
    }

    #[test]
    fn multiclass_closed_forms() {
        let (l, g) = loss_topic_multiclass(&vec![0.0f64; 2571], 17).unwrap();
        assert!((l - 2571f64.ln()).abs() < 1e-9);
        assert!((l - 7.852).abs() < 1e-3);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(matches!(loss_topic_multiclass(&[0.0f64; 3], 3), Err(Error::Range(_))));
        let (l, _) = loss_topic_multiclass(&[0.0, 800.0, 0.0f64], 1).unwrap();
        assert_eq!(l, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, g) = loss_topic_multiclass(&z, 2).unwrap();
        fd_check(|v| loss_topic_multiclass(v, 2).unwrap().0, &z, &g);
    }

    #[test]
    fn multilabel_closed_forms() {
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
        let (l, _) = loss_topic_multilabel(&[0.0f64; 5], &labels).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = loss_topic_multilabel(&[f64::NEG_INFINITY; 4], &[0.0; 4]).unwrap();
        assert_eq!(l, 0.0);
        assert!(matches!(
            loss_topic_multilabel(&[0.0f64; 2], &[0.5, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn multilabel_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let (l, g) = loss_topic_multilabel(&z, &y).unwrap();
            assert!((l - bce_oracle(&z, &y)).abs() < 1e-12);
            fd_check(|v| loss_topic_multilabel(v, &y).unwrap().0, &z, &g);
        }
    }

    proptest! {
        #[test]
        fn multilabel_one_hot_loss_decreases_as_hot_logit_grows(hot in 0usize..6, base in 0.0f64..5.0, step in 0.1f64..3.0) {
            let mut y = vec![0.0; 6];
            y[hot] = 1.0;
            let mut z = vec![-8.0; 6];
            z[hot] = base;
            let (l0, _) = loss_topic_multilabel(&z, &y).unwrap();
            z[hot] = base + step;
            let (l1, _) = loss_topic_multilabel(&z, &y).unwrap();
            prop_assert!(l1 >= 0.0 && l1 < l0);
        }

        #[test]
        fn lm_loss_is_invariant_to_row_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
            let flat = |order: &[usize]| {
                let data = order.iter().flat_map(|&i| rows[i].clone()).collect();
                let t: Vec<usize> = order.iter().map(|&i| targets[i]).collect();
                loss_lm(&Tensor::from_vec(&[5, 7], data), &t, &[true; 5]).unwrap().0
            };
            let a = flat(&[0, 1, 2, 3, 4]);
            let b = flat(&[3, 0, 4, 2, 1]);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3f64, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for step in 1..5 {
            adamw_update(
                &mut p,
                &[0.0, 0.0],
                &mut m,
                &mut v,
                step,
                hyper.lr_at(step),
                &hyper,
                true,
            );
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..Default::default()
        };
        let (mut p, mut m, mut v) = (vec![0.0f64], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, hyper.lr_at(1), &hyper, true);
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p[0] - (-1.5e-4 / (1.0 + 1e-8))).abs() < 1e-18);
        // decoupled decay shrinks by lr·wd before the Adam term
        let hyper = AdamWConfig {
            warmup_steps: 0,
            ..Default::default()
        };
        let (mut p, mut m, mut v) = (vec![2.0f64], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, hyper.lr, &hyper, true);
        assert!((p[0] - (2.0 * (1.0 - 1.5e-6) - 1.5e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        let (mut q, mut m, mut v) = (vec![2.0f64], vec![0.0], vec![0.0]);
        adamw_update(&mut q, &[1.0], &mut m, &mut v, 1, hyper.lr, &hyper, false);
        assert!((q[0] - (2.0 - 1.5e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        let h = AdamWConfig::default();
        assert!((h.lr_at(1000) - 0.5 * 1.5e-4).abs() < 1e-18);
        assert_eq!(h.lr_at(2000), 1.5e-4);
        assert_eq!(h.lr_at(5000), 1.5e-4);
        assert!((h.lr_at(1) - 1.5e-4 / 2000.0).abs() < 1e-20);
    }

    fn fixture(mode: TopicMode, bert: bool) -> (JointModel<f64>, Vec<TrainingSample>, TrainConfig, Vocab) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_dialogues: 4,
            mode,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let sc = SampleConfig {
            mode,
            max_context: 40,
            max_decode: 8,
            use_roles: true,
        };
        let samples = build_corpus_samples(&corpus, &vocab, &sc).unwrap();
        let gcfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::causal(vocab.len(), corpus.num_classes(), 120)
        };
        let bcfg = bert.then(|| gcfg.to_encoder());
        let model = JointModel::init(gcfg, bcfg, 5).unwrap();
        let tc = TrainConfig {
            ablation: Ablation::Full,
            refine_context: RefineContext::Full,
            coarse_source: CoarseSource::ArgmaxTeacherForced,
            max_context: 40,
            max_decode: 8,
            adamw: AdamWConfig::default(),
        };
        (model, samples, tc, vocab)
    }

    #[test]
    fn fused_pass_matches_separate_classifier_pass() {
        let (model, samples, tc, vocab) = fixture(TopicMode::MultiLabel, false);
        let s = &samples[0];
        let losses = sample_losses(&model, s, &tc, &vocab, Terms::TOPIC).unwrap();
        let (cls, _) = forward_cls(&model.gpt, &model.gpt_cfg, &s.history_ids).unwrap();
        assert_eq!(losses[1], loss_topic(&cls, &s.topic_label).unwrap().0);
    }

    #[test]
    fn total_is_sum_and_gpt2dh_has_no_refine() {
        let (mut model, samples, mut tc, vocab) = fixture(TopicMode::MultiClass, false);
        let mut opt = OptState::new(&model, tc.adamw.clone());
        let (l, _) = train_step(&mut model, &mut opt, &samples[..2], &tc, &vocab).unwrap();
        assert_eq!(l.l_total, l.l_one + l.l_topic + l.l_refine);
        assert!(l.l_refine > 0.0);
        tc.ablation = Ablation::Gpt2dh;
        let (l, _) = train_step(&mut model, &mut opt, &samples[..2], &tc, &vocab).unwrap();
        assert_eq!(l.l_refine, 0.0);
        tc.ablation = Ablation::StageOne;
        let (l, _) = train_step(&mut model, &mut opt, &samples[..2], &tc, &vocab).unwrap();
        assert_eq!((l.l_topic, l.l_refine), (0.0, 0.0));
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn refine_gradients_are_additive_and_cut_at_the_draft() {
        for bert in [false, true] {
            let (model, samples, tc, vocab) = fixture(TopicMode::MultiLabel, bert);
            let s = &samples[1];
            let (_, full) = sample_gradients(&model, s, &tc, &vocab, Terms::from(Ablation::Full)).unwrap();
            let (_, no_refine) = sample_gradients(&model, s, &tc, &vocab, Terms::from(Ablation::Gpt2dh)).unwrap();
            let (_, refine) = sample_gradients(&model, s, &tc, &vocab, Terms::REFINE).unwrap();
            let mut sum = no_refine.clone();
            sum.add_assign(&refine);
            for ((n, _, a), (_, _, b)) in full.gpt.entries().into_iter().zip(sum.gpt.entries()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{n}");
                }
            }
            if bert {
                // the encoder is untouched by the refine pass
                assert_eq!(full.bert, no_refine.bert);
                assert!(refine
                    .bert
                    .as_ref()
                    .unwrap()
                    .entries()
                    .iter()
                    .all(|(_, _, t)| t.max_abs() == 0.0));
            }
        }
    }

    #[test]
    fn empty_batch_and_non_finite_losses_rejected() {
        let (mut model, samples, tc, vocab) = fixture(TopicMode::MultiLabel, false);
        let mut opt = OptState::new(&model, tc.adamw.clone());
        assert!(matches!(
            train_step(&mut model, &mut opt, &[], &tc, &vocab),
            Err(Error::Contract(_))
        ));
        model.gpt.lnf_gain.data_mut()[0] = f64::NAN;
        let before = model.clone();
        match train_step(&mut model, &mut opt, &samples[..1], &tc, &vocab) {
            Err(Error::NonFinite { diagnostics, .. }) => assert!(diagnostics.contains("ln_f.gain")),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
        assert_eq!(format!("{before:?}"), format!("{model:?}"));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

/// Role of a tensor; norms and biases are exempt from weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

/// All weights of one transformer. Matrices are stored `[in × out]`; the
/// embedding tables are `[rows × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    /// `[d_model × vocab]`; `None` when tied to `tok_emb`.
    pub lm_head: Option<Tensor<T>>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
}

macro_rules! layer_entries {
    ($l:expr, $i:expr, $wrap:ident) => {{
        let LayerParams {
            ln1_gain,
            ln1_bias,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            ln2_gain,
            ln2_bias,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
        } = $l;
        let p = format!("layers.{}", $i);
        vec![
            $wrap(format!("{p}.ln1.gain"), ParamKind::Norm, ln1_gain),
            $wrap(format!("{p}.ln1.bias"), ParamKind::Norm, ln1_bias),
            $wrap(format!("{p}.attn.q.weight"), ParamKind::Weight, w_q),
            $wrap(format!("{p}.attn.q.bias"), ParamKind::Bias, b_q),
            $wrap(format!("{p}.attn.k.weight"), ParamKind::Weight, w_k),
            $wrap(format!("{p}.attn.k.bias"), ParamKind::Bias, b_k),
            $wrap(format!("{p}.attn.v.weight"), ParamKind::Weight, w_v),
            $wrap(format!("{p}.attn.v.bias"), ParamKind::Bias, b_v),
            $wrap(format!("{p}.attn.o.weight"), ParamKind::Weight, w_o),
            $wrap(format!("{p}.attn.o.bias"), ParamKind::Bias, b_o),
            $wrap(format!("{p}.ln2.gain"), ParamKind::Norm, ln2_gain),
            $wrap(format!("{p}.ln2.bias"), ParamKind::Norm, ln2_bias),
            $wrap(format!("{p}.ff1.weight"), ParamKind::Weight, w_ff1),
            $wrap(format!("{p}.ff1.bias"), ParamKind::Bias, b_ff1),
            $wrap(format!("{p}.ff2.weight"), ParamKind::Weight, w_ff2),
            $wrap(format!("{p}.ff2.bias"), ParamKind::Bias, b_ff2),
        ]
    }};
}

#[inline]
fn entry<R>(name: String, kind: ParamKind, t: R) -> (String, ParamKind, R) {
    (name, kind, t)
}

impl<T: Scalar> Params<T> {
    /// Parameters with every tensor zeroed except layer-norm gains (one).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |s: &[usize]| Tensor::zeros(s);
        let ones = || Tensor::filled(&[d], T::one());
        Params {
            tok_emb: z(&[cfg.vocab_size, d]),
            pos_emb: z(&[cfg.max_positions, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1_gain: ones(),
                    ln1_bias: z(&[d]),
                    w_q: z(&[d, d]),
                    b_q: z(&[d]),
                    w_k: z(&[d, d]),
                    b_k: z(&[d]),
                    w_v: z(&[d, d]),
                    b_v: z(&[d]),
                    w_o: z(&[d, d]),
                    b_o: z(&[d]),
                    ln2_gain: ones(),
                    ln2_bias: z(&[d]),
                    w_ff1: z(&[d, cfg.d_ff]),
                    b_ff1: z(&[cfg.d_ff]),
                    w_ff2: z(&[cfg.d_ff, d]),
                    b_ff2: z(&[d]),
                })
                .collect(),
            lnf_gain: ones(),
            lnf_bias: z(&[d]),
            lm_head: (!cfg.tie_lm_head).then(|| z(&[d, cfg.vocab_size])),
            cls_w: z(&[d, cfg.n_classes]),
            cls_b: z(&[cfg.n_classes]),
        }
    }

    /// Deterministic initialisation: weights and embeddings ~ N(0, 0.02²),
    /// biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (_, kind, t) in p.entries_mut() {
            if kind.decays() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = T::lit(normal.sample(&mut rng)));
            }
        }
        Ok(p)
    }

    /// Same shapes, all zeros (including gains); used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, _, t) in g.entries_mut() {
            t.fill(T::zero());
        }
        g
    }

    pub fn entries(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = vec![
            entry("tok_emb".into(), ParamKind::Embedding, &self.tok_emb),
            entry("pos_emb".into(), ParamKind::Embedding, &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_entries!(l, i, entry));
        }
        out.push(entry("ln_f.gain".into(), ParamKind::Norm, &self.lnf_gain));
        out.push(entry("ln_f.bias".into(), ParamKind::Norm, &self.lnf_bias));
        if let Some(w) = &self.lm_head {
            out.push(entry("lm_head.weight".into(), ParamKind::Weight, w));
        }
        out.push(entry("cls_head.weight".into(), ParamKind::Weight, &self.cls_w));
        out.push(entry("cls_head.bias".into(), ParamKind::Bias, &self.cls_b));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        let mut out = vec![
            entry("tok_emb".into(), ParamKind::Embedding, &mut self.tok_emb),
            entry("pos_emb".into(), ParamKind::Embedding, &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_entries!(l, i, entry));
        }
        out.push(entry("ln_f.gain".into(), ParamKind::Norm, &mut self.lnf_gain));
        out.push(entry("ln_f.bias".into(), ParamKind::Norm, &mut self.lnf_bias));
        if let Some(w) = &mut self.lm_head {
            out.push(entry("lm_head.weight".into(), ParamKind::Weight, w));
        }
        out.push(entry("cls_head.weight".into(), ParamKind::Weight, &mut self.cls_w));
        out.push(entry("cls_head.bias".into(), ParamKind::Bias, &mut self.cls_b));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for ((_, _, a), (_, _, b)) in self.entries_mut().into_iter().zip(other.entries()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, _, t)| t.is_finite())
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = Params::<T>::zeros(cfg);
        let mine = self.entries();
        let theirs = expect.entries();
        if mine.len() != theirs.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((na, _, a), (nb, _, b)) in mine.iter().zip(&theirs) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "tensor {na} {:?} does not match {nb} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// The shared causal model plus an optional separately parameterised
/// bidirectional classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct JointModel<T> {
    pub gpt_cfg: ModelConfig,
    pub gpt: Params<T>,
    pub bert_cfg: Option<ModelConfig>,
    pub bert: Option<Params<T>>,
}

impl<T: Scalar> JointModel<T> {
    pub fn init(gpt_cfg: ModelConfig, bert_cfg: Option<ModelConfig>, seed: u64) -> Result<Self> {
        let gpt = Params::init(&gpt_cfg, seed)?;
        let bert = match &bert_cfg {
            Some(c) => Some(Params::init(c, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?),
            None => None,
        };
        Ok(JointModel {
            gpt_cfg,
            gpt,
            bert_cfg,
            bert,
        })
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            gpt: self.gpt.zeros_like(),
            bert: self.bert.as_ref().map(Params::zeros_like),
        }
    }

    /// `(prefix, params)` pairs, prefixes `gpt.` and `bert.`.
    pub fn groups(&self) -> Vec<(&'static str, &Params<T>)> {
        let mut out = vec![("gpt", &self.gpt)];
        if let Some(b) = &self.bert {
            out.push(("bert", b));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Params<T>)> {
        let mut out = vec![("gpt", &mut self.gpt)];
        if let Some(b) = &mut self.bert {
            out.push(("bert", b));
        }
        out
    }
}

/// Gradients with the same layout as a [`JointModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub gpt: Params<T>,
    pub bert: Option<Params<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) {
        self.gpt.add_assign(&other.gpt);
        if let (Some(a), Some(b)) = (&mut self.bert, &other.bert) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in std::iter::once(&mut self.gpt).chain(self.bert.as_mut()) {
            for (_, _, t) in p.entries_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        std::iter::once(&self.gpt).chain(self.bert.as_ref()).all(|p| {
            p.entries()
                .iter()
                .all(|(_, _, t)| t.data().iter().all(|x| *x == T::zero()))
        })
    }
}

//! Forward and exact backward passes.
//!
//! Block order is pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`, with a
//! final layer norm before the heads. PAD keys are masked out of attention
//! and position ids count only non-PAD tokens, so left padding leaves the
//! remaining positions' outputs unchanged.

use super::params::{LayerParams, Params};
use super::tensor::{
    acc_col_sums, acc_matmul_at, add_bias, affine, axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul,
    matmul_bt, Tensor,
};
use super::{AttentionMode, ClsPool, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::{CLS, PAD};

#[derive(Clone, Debug)]
struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head][query][key]`, zero where masked.
    probs: Vec<T>,
    ctx: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    a2: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

/// Activations retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    ids: Vec<usize>,
    pos: Vec<usize>,
    attention: AttentionMode,
    layers: Vec<LayerCache<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    /// Final hidden states `[T × d_model]`.
    pub hidden: Tensor<T>,
    /// Position feeding the classification head, if any.
    pub pooled: Option<usize>,
}

impl<T> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

#[inline]
fn visible(attention: AttentionMode, ids: &[usize], t: usize, j: usize) -> bool {
    (attention == AttentionMode::Bidirectional || j <= t) && (ids[j] != PAD || j == t)
}

fn key_range(attention: AttentionMode, t: usize, len: usize) -> std::ops::Range<usize> {
    match attention {
        AttentionMode::Causal => 0..t + 1,
        AttentionMode::Bidirectional => 0..len,
    }
}

fn position_ids(ids: &[usize]) -> Vec<usize> {
    let mut n = 0;
    ids.iter()
        .map(|&id| {
            if id == PAD {
                0
            } else {
                n += 1;
                n - 1
            }
        })
        .collect()
}

fn last_non_pad(ids: &[usize]) -> usize {
    ids.iter().rposition(|&id| id != PAD).unwrap_or(ids.len() - 1)
}

/// Runs the backbone and returns the trace. `pooled` marks the position
/// the classification head reads.
pub fn forward<T: Scalar>(
    p: &Params<T>,
    cfg: &ModelConfig,
    ids: &[usize],
    pooled: Option<usize>,
) -> Result<ForwardTrace<T>> {
    let len = ids.len();
    if len == 0 {
        return Err(Error::Range("empty input sequence".into()));
    }
    if len > cfg.max_positions {
        return Err(Error::Range(format!(
            "sequence of {len} tokens exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Range(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if pooled.is_some_and(|i| i >= len) {
        return Err(Error::Range("pooled position outside the sequence".into()));
    }
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let eps = T::lit(cfg.ln_eps);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let pos = position_ids(ids);

    let mut x = Vec::with_capacity(len * d);
    for (&id, &ps) in ids.iter().zip(&pos) {
        x.extend(p.tok_emb.row(id).iter().zip(p.pos_emb.row(ps)).map(|(&a, &b)| a + b));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (xhat1, rstd1) = layer_norm(&x, d, eps);
        let a1 = affine(&xhat1, lp.ln1_gain.data(), lp.ln1_bias.data());
        let mut q = matmul(&a1, lp.w_q.data(), len, d, d);
        add_bias(&mut q, lp.b_q.data());
        let mut k = matmul(&a1, lp.w_k.data(), len, d, d);
        add_bias(&mut k, lp.b_k.data());
        let mut v = matmul(&a1, lp.w_v.data(), len, d, d);
        add_bias(&mut v, lp.b_v.data());

        let mut probs = vec![T::zero(); nh * len * len];
        let mut ctx = vec![T::zero(); len * d];
        let mut scores = vec![T::zero(); len];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..len {
                let qt = &q[t * d + off..t * d + off + dh];
                let keys = key_range(cfg.attention, t, len);
                let mut mx = T::neg_infinity();
                for j in keys.clone() {
                    if visible(cfg.attention, ids, t, j) {
                        let s = scale * dot(qt, &k[j * d + off..j * d + off + dh]);
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                }
                let row = &mut probs[(h * len + t) * len..(h * len + t + 1) * len];
                let mut total = T::zero();
                for j in keys.clone() {
                    if visible(cfg.attention, ids, t, j) {
                        let e = (scores[j] - mx).exp();
                        row[j] = e;
                        total += e;
                    }
                }
                let out = &mut ctx[t * d + off..t * d + off + dh];
                for j in keys {
                    if row[j] != T::zero() {
                        row[j] /= total;
                        axpy(out, row[j], &v[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        let mut attn_out = matmul(&ctx, lp.w_o.data(), len, d, d);
        add_bias(&mut attn_out, lp.b_o.data());
        for (a, b) in x.iter_mut().zip(&attn_out) {
            *a += *b;
        }

        let (xhat2, rstd2) = layer_norm(&x, d, eps);
        let a2 = affine(&xhat2, lp.ln2_gain.data(), lp.ln2_bias.data());
        let mut h_pre = matmul(&a2, lp.w_ff1.data(), len, d, ff);
        add_bias(&mut h_pre, lp.b_ff1.data());
        let h_act: Vec<T> = h_pre.iter().map(|&z| gelu(z)).collect();
        let mut mlp_out = matmul(&h_act, lp.w_ff2.data(), len, ff, d);
        add_bias(&mut mlp_out, lp.b_ff2.data());
        for (a, b) in x.iter_mut().zip(&mlp_out) {
            *a += *b;
        }

        layers.push(LayerCache {
            xhat1,
            rstd1,
            a1,
            q,
            k,
            v,
            probs,
            ctx,
            xhat2,
            rstd2,
            a2,
            h_pre,
            h_act,
        });
    }
    let (xhat_f, rstd_f) = layer_norm(&x, d, eps);
    let hidden = affine(&xhat_f, p.lnf_gain.data(), p.lnf_bias.data());
    Ok(ForwardTrace {
        ids: ids.to_vec(),
        pos,
        attention: cfg.attention,
        layers,
        xhat_f,
        rstd_f,
        hidden: Tensor::from_vec(&[len, d], hidden),
        pooled,
    })
}

fn lm_logits<T: Scalar>(p: &Params<T>, cfg: &ModelConfig, trace: &ForwardTrace<T>) -> Tensor<T> {
    let len = trace.len();
    let (d, vsz) = (cfg.d_model, cfg.vocab_size);
    let data = match &p.lm_head {
        Some(w) => matmul(trace.hidden.data(), w.data(), len, d, vsz),
        None => matmul_bt(trace.hidden.data(), p.tok_emb.data(), len, d, vsz),
    };
    Tensor::from_vec(&[len, vsz], data)
}

fn cls_logits<T: Scalar>(p: &Params<T>, cfg: &ModelConfig, h: &[T]) -> Vec<T> {
    let mut out = p.cls_b.data().to_vec();
    for (&x, w_row) in h.iter().zip(p.cls_w.data().chunks_exact(cfg.n_classes)) {
        for (o, &w) in out.iter_mut().zip(w_row) {
            *o += x * w;
        }
    }
    out
}

/// Next-token logits `[T × vocab]`; row `t` depends only on `ids[..=t]`.
pub fn forward_lm<T: Scalar>(p: &Params<T>, cfg: &ModelConfig, ids: &[usize]) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    if cfg.attention != AttentionMode::Causal {
        return Err(Error::Config("language modelling requires causal attention".into()));
    }
    let trace = forward(p, cfg, ids, None)?;
    Ok((lm_logits(p, cfg, &trace), trace))
}

/// Raw topic logits from the pooled hidden state.
pub fn forward_cls<T: Scalar>(p: &Params<T>, cfg: &ModelConfig, ids: &[usize]) -> Result<(Vec<T>, ForwardTrace<T>)> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::Range("empty input sequence".into()));
    }
    let at = match cfg.cls_pool {
        ClsPool::FirstToken => {
            if ids[0] != CLS {
                return Err(Error::Config("first-token pooling needs CLS at position 0".into()));
            }
            0
        }
        ClsPool::LastToken => last_non_pad(ids),
    };
    let trace = forward(p, cfg, ids, Some(at))?;
    let logits = cls_logits(p, cfg, trace.hidden.row(at));
    Ok((logits, trace))
}

/// Both heads from one causal pass, classifying at `pool_at`.
pub fn forward_joint<T: Scalar>(
    p: &Params<T>,
    cfg: &ModelConfig,
    ids: &[usize],
    pool_at: usize,
) -> Result<(Tensor<T>, Vec<T>, ForwardTrace<T>)> {
    if cfg.attention != AttentionMode::Causal {
        return Err(Error::Config("language modelling requires causal attention".into()));
    }
    let trace = forward(p, cfg, ids, Some(pool_at))?;
    let lm = lm_logits(p, cfg, &trace);
    let cls = cls_logits(p, cfg, trace.hidden.row(pool_at));
    Ok((lm, cls, trace))
}

/// Gradients of a scalar loss given its gradients w.r.t. the LM logits
/// and/or the classification logits.
pub fn backward<T: Scalar>(
    p: &Params<T>,
    cfg: &ModelConfig,
    trace: &ForwardTrace<T>,
    d_lm: Option<&Tensor<T>>,
    d_cls: Option<&[T]>,
) -> Result<Params<T>> {
    let mut grads = p.zeros_like();
    backward_into(&mut grads, p, cfg, trace, d_lm, d_cls)?;
    Ok(grads)
}

/// As [`backward`], accumulating into `grads`.
pub fn backward_into<T: Scalar>(
    grads: &mut Params<T>,
    p: &Params<T>,
    cfg: &ModelConfig,
    trace: &ForwardTrace<T>,
    d_lm: Option<&Tensor<T>>,
    d_cls: Option<&[T]>,
) -> Result<()> {
    let len = trace.len();
    let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let vsz = cfg.vocab_size;
    if trace.layers.len() != cfg.n_layers || trace.hidden.cols() != d || trace.attention != cfg.attention {
        return Err(Error::Contract("trace does not match the model configuration".into()));
    }
    let hidden = trace.hidden.data();
    let mut dh_out = vec![T::zero(); len * d];

    if let Some(dl) = d_lm {
        if dl.shape() != [len, vsz] {
            return Err(Error::Contract(format!(
                "LM logit gradient has shape {:?}, expected [{len}, {vsz}]",
                dl.shape()
            )));
        }
        match (&p.lm_head, &mut grads.lm_head) {
            (Some(w), Some(gw)) => {
                dh_out = matmul_bt(dl.data(), w.data(), len, vsz, d);
                acc_matmul_at(gw.data_mut(), hidden, dl.data(), len, d, vsz);
            }
            (None, None) => {
                dh_out = matmul(dl.data(), p.tok_emb.data(), len, vsz, d);
                acc_matmul_at(grads.tok_emb.data_mut(), dl.data(), hidden, len, vsz, d);
            }
            _ => return Err(Error::Contract("gradient map does not match parameters".into())),
        }
    }
    if let Some(dc) = d_cls {
        let at = trace
            .pooled
            .ok_or_else(|| Error::Contract("classification gradient without a pooled position".into()))?;
        if dc.len() != cfg.n_classes {
            return Err(Error::Contract(format!(
                "classification gradient has {} entries, expected {}",
                dc.len(),
                cfg.n_classes
            )));
        }
        let h = &hidden[at * d..(at + 1) * d];
        let dst = &mut dh_out[at * d..(at + 1) * d];
        for ((o, w_row), (&x, gw_row)) in dst
            .iter_mut()
            .zip(p.cls_w.data().chunks_exact(cfg.n_classes))
            .zip(h.iter().zip(grads.cls_w.data_mut().chunks_exact_mut(cfg.n_classes)))
        {
            *o += dot(w_row, dc);
            axpy(gw_row, x, dc);
        }
        axpy(grads.cls_b.data_mut(), T::one(), dc);
    }

    let mut dx = layer_norm_backward(
        &dh_out,
        &trace.xhat_f,
        &trace.rstd_f,
        p.lnf_gain.data(),
        grads.lnf_gain.data_mut(),
        grads.lnf_bias.data_mut(),
    );

    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    for (li, cache) in trace.layers.iter().enumerate().rev() {
        let lp: &LayerParams<T> = &p.layers[li];
        let g = &mut grads.layers[li];

        // MLP branch
        let mut d_act = matmul_bt(&dx, lp.w_ff2.data(), len, d, ff);
        acc_matmul_at(g.w_ff2.data_mut(), &cache.h_act, &dx, len, ff, d);
        acc_col_sums(g.b_ff2.data_mut(), &dx);
        for (da, &z) in d_act.iter_mut().zip(&cache.h_pre) {
            *da *= gelu_grad(z);
        }
        acc_matmul_at(g.w_ff1.data_mut(), &cache.a2, &d_act, len, d, ff);
        acc_col_sums(g.b_ff1.data_mut(), &d_act);
        let da2 = matmul_bt(&d_act, lp.w_ff1.data(), len, ff, d);
        let dln2 = layer_norm_backward(
            &da2,
            &cache.xhat2,
            &cache.rstd2,
            lp.ln2_gain.data(),
            g.ln2_gain.data_mut(),
            g.ln2_bias.data_mut(),
        );
        for (a, b) in dx.iter_mut().zip(&dln2) {
            *a += *b;
        }

        // attention branch
        let dctx = matmul_bt(&dx, lp.w_o.data(), len, d, d);
        acc_matmul_at(g.w_o.data_mut(), &cache.ctx, &dx, len, d, d);
        acc_col_sums(g.b_o.data_mut(), &dx);

        let mut dq = vec![T::zero(); len * d];
        let mut dk = vec![T::zero(); len * d];
        let mut dv = vec![T::zero(); len * d];
        let mut dp = vec![T::zero(); len];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..len {
                let row = &cache.probs[(h * len + t) * len..(h * len + t + 1) * len];
                let dc = &dctx[t * d + off..t * d + off + dh];
                let keys = key_range(trace.attention, t, len);
                let mut weighted = T::zero();
                for j in keys.clone() {
                    if visible(trace.attention, &trace.ids, t, j) {
                        dp[j] = dot(dc, &cache.v[j * d + off..j * d + off + dh]);
                        weighted += row[j] * dp[j];
                        axpy(&mut dv[j * d + off..j * d + off + dh], row[j], dc);
                    }
                }
                let qt = &cache.q[t * d + off..t * d + off + dh];
                for j in keys {
                    if visible(trace.attention, &trace.ids, t, j) {
                        let ds = row[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        axpy(
                            &mut dq[t * d + off..t * d + off + dh],
                            ds,
                            &cache.k[j * d + off..j * d + off + dh],
                        );
                        axpy(&mut dk[j * d + off..j * d + off + dh], ds, qt);
                    }
                }
            }
        }
        let mut da1 = matmul_bt(&dq, lp.w_q.data(), len, d, d);
        for (w, dw, db, dy) in [
            (&lp.w_k, &mut g.w_k, &mut g.b_k, &dk),
            (&lp.w_v, &mut g.w_v, &mut g.b_v, &dv),
        ] {
            let part = matmul_bt(dy, w.data(), len, d, d);
            for (a, b) in da1.iter_mut().zip(&part) {
                *a += *b;
            }
            acc_matmul_at(dw.data_mut(), &cache.a1, dy, len, d, d);
            acc_col_sums(db.data_mut(), dy);
        }
        acc_matmul_at(g.w_q.data_mut(), &cache.a1, &dq, len, d, d);
        acc_col_sums(g.b_q.data_mut(), &dq);
        let dln1 = layer_norm_backward(
            &da1,
            &cache.xhat1,
            &cache.rstd1,
            lp.ln1_gain.data(),
            g.ln1_gain.data_mut(),
            g.ln1_bias.data_mut(),
        );
        for (a, b) in dx.iter_mut().zip(&dln1) {
            *a += *b;
        }
    }

    for (t, (&id, &ps)) in trace.ids.iter().zip(&trace.pos).enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        axpy(grads.tok_emb.row_mut(id), T::one(), row);
        axpy(grads.pos_emb.row_mut(ps), T::one(), row);
    }
    Ok(())
}

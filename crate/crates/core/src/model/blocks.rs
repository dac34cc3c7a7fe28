//! Transformer building blocks shared by the dialogue model and the
//! denoising pretrainer. Post-norm residual layout throughout:
//! x = LN(x + dropout(sublayer(x))).

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var, ATTN_MASK_NEG};

pub const INIT_STD: f64 = 0.02;

/// Projection weights for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
}

impl AttnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut w = |suffix: &str| {
            store.add(format!("{prefix}.{suffix}"), Tensor::randn(&[d, d], INIT_STD, rng))
        };
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |suffix: &str| store.add(format!("{prefix}.{suffix}"), Tensor::zeros(&[d]));
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        AttnParams {
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LnParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let gain = sess.p(self.gain);
        let bias = sess.p(self.bias);
        sess.g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ff: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        FfnParams {
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(&[d, ff], INIT_STD, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[ff])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn(&[ff, d], INIT_STD, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w1 = sess.p(self.w1);
        let b1 = sess.p(self.b1);
        let w2 = sess.p(self.w2);
        let b2 = sess.p(self.b2);
        let h = sess.g.matmul(x, w1)?;
        let h = sess.g.add_bias(h, b1)?;
        let h = sess.g.relu(h);
        let h = sess.g.matmul(h, w2)?;
        sess.g.add_bias(h, b2)
    }
}

/// Token + learned position embeddings. Positions always start at 0, so a
/// table row count is the hard sequence-length ceiling.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub tok: ParamId,
    pub pos: ParamId,
}

impl Embeddings {
    pub fn register(
        store: &mut ParamStore,
        tok_name: &str,
        pos_name: &str,
        vocab: usize,
        max_len: usize,
        d: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Embeddings {
            tok: store.add(tok_name, Tensor::randn(&[vocab, d], INIT_STD, rng)),
            pos: store.add(pos_name, Tensor::randn(&[max_len, d], INIT_STD, rng)),
        }
    }

    pub fn apply(&self, sess: &mut Session, ids: &[usize]) -> Result<Var> {
        let tok = sess.p(self.tok);
        let pos = sess.p(self.pos);
        let te = sess.g.embedding(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = sess.g.embedding(pos, &positions)?;
        sess.g.add(te, pe)
    }
}

/// Scaled dot-product attention with `n_heads` heads. `x` provides queries,
/// `mem` keys and values; an optional additive mask ([rows(x), rows(mem)])
/// lands on every head's scores before softmax.
pub fn attention(
    sess: &mut Session,
    p: &AttnParams,
    x: Var,
    mem: Var,
    mask: Option<Var>,
    n_heads: usize,
) -> Result<Var> {
    let d = sess.g.shape(x)[1];
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;

    let wq = sess.p(p.wq);
    let bq = sess.p(p.bq);
    let wk = sess.p(p.wk);
    let bk = sess.p(p.bk);
    let wv = sess.p(p.wv);
    let bv = sess.p(p.bv);
    let wo = sess.p(p.wo);
    let bo = sess.p(p.bo);

    let q = sess.g.matmul(x, wq)?;
    let q = sess.g.add_bias(q, bq)?;
    let k = sess.g.matmul(mem, wk)?;
    let k = sess.g.add_bias(k, bk)?;
    let v = sess.g.matmul(mem, wv)?;
    let v = sess.g.add_bias(v, bv)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = sess.g.slice_cols(q, h * dh, dh)?;
        let kh = sess.g.slice_cols(k, h * dh, dh)?;
        let vh = sess.g.slice_cols(v, h * dh, dh)?;
        let scores = sess.g.matmul_transb(qh, kh)?;
        let scores = sess.g.scale(scores, scale);
        let scores = match mask {
            Some(m) => sess.g.add(scores, m)?,
            None => scores,
        };
        let att = sess.g.softmax(scores, 1);
        heads.push(sess.g.matmul(att, vh)?);
    }
    let cat = sess.g.concat_cols(&heads)?;
    let out = sess.g.matmul(cat, wo)?;
    sess.g.add_bias(out, bo)
}

/// Additive causal mask: position i may attend to j ≤ i only.
pub fn causal_mask(sess: &mut Session, t: usize) -> Var {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = ATTN_MASK_NEG;
        }
    }
    sess.g.constant(data, &[t, t])
}

/// Self-attention + feed-forward encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncLayer {
    pub selfattn: AttnParams,
    pub ln1: LnParams,
    pub ffn: FfnParams,
    pub ln2: LnParams,
}

impl EncLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ff: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        EncLayer {
            selfattn: AttnParams::register(store, &format!("{prefix}.self"), d, rng),
            ln1: LnParams::register(store, &format!("{prefix}.ln1"), d),
            ffn: FfnParams::register(store, &format!("{prefix}.ffn"), d, ff, rng),
            ln2: LnParams::register(store, &format!("{prefix}.ln2"), d),
        }
    }

    pub fn apply(
        &self,
        sess: &mut Session,
        x: Var,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let a = attention(sess, &self.selfattn, x, x, None, n_heads)?;
        let a = sess.g.dropout(a, dropout, rng);
        let x = sess.g.add(x, a)?;
        let x = self.ln1.apply(sess, x)?;
        let f = self.ffn.apply(sess, x)?;
        let f = sess.g.dropout(f, dropout, rng);
        let x2 = sess.g.add(x, f)?;
        self.ln2.apply(sess, x2)
    }
}

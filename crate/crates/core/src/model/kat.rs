//! Encoder-decoder dialogue model with a parallel knowledge path.
//!
//! The decoder reads the dialogue encoding through ordinary cross-attention
//! and, separately, attends over encoded knowledge documents; a per-position
//! sigmoid gate decides how much of the knowledge state to mix in. Keeping
//! the knowledge path additive and gated means it can be clamped off without
//! touching the rest of the computation.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::blocks::{attention, causal_mask, AttnParams, Embeddings, EncLayer, FfnParams, LnParams};
use crate::model::{GateClamp, KatConfig, Partition};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};
use crate::text::{BOS, EOS, PAD};

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    selfattn: AttnParams,
    ln_self: LnParams,
    cross_u: AttnParams,
    ln_cross: LnParams,
    /// Knowledge-integration attention: queries from the decoder state,
    /// keys/values from encoded knowledge tokens.
    kib: AttnParams,
    /// Gate weights, length 2·d_model: β = σ(w · [h_k; h_c]).
    ctrl_w: ParamId,
    ctrl_ln: LnParams,
    ffn: FfnParams,
    ln_ffn: LnParams,
}

pub struct KatModel {
    pub cfg: KatConfig,
    pub params: ParamStore,
    tok_emb: ParamId,
    enc_pos: ParamId,
    enc: Vec<EncLayer>,
    dec_pos: ParamId,
    dec: Vec<DecLayer>,
    ke_emb: Embeddings,
    ke: Vec<EncLayer>,
}

/// One sample's forward pass, ready for `backward` + gradient collection.
pub struct SampleForward<'p> {
    pub sess: Session<'p>,
    pub loss_sum: Var,
    pub token_count: usize,
    /// Mean gate per decoder layer (empty unless the learned gate ran).
    pub gate_means: Vec<f64>,
}

/// Frozen encoder outputs for incremental decoding.
pub struct EncodedMemory {
    d: usize,
    u: Vec<f64>,
    u_rows: usize,
    k: Option<Vec<f64>>,
    k_rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateConfig {
    pub beams: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            beams: 1,
            max_new_tokens: 64,
        }
    }
}

impl KatModel {
    pub fn new(cfg: KatConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::derive(seed, &[0x6d6f64656c]);
        let mut params = ParamStore::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let ml = cfg.max_src_len;

        let tok_emb = params.add("theta_d.tok_emb", Tensor::randn(&[v, d], 0.02, &mut rng));
        let enc_pos = params.add("theta_d.enc.pos_emb", Tensor::randn(&[ml, d], 0.02, &mut rng));
        let enc = (0..cfg.enc_layers)
            .map(|i| EncLayer::register(&mut params, &format!("theta_d.enc.{i}"), d, cfg.ff_dim, &mut rng))
            .collect();

        let dec_pos = params.add("theta_d.dec.pos_emb", Tensor::randn(&[ml, d], 0.02, &mut rng));
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("theta_d.dec.{i}");
                DecLayer {
                    selfattn: AttnParams::register(&mut params, &format!("{p}.self"), d, &mut rng),
                    ln_self: LnParams::register(&mut params, &format!("{p}.ln_self"), d),
                    cross_u: AttnParams::register(&mut params, &format!("{p}.cross_u"), d, &mut rng),
                    ln_cross: LnParams::register(&mut params, &format!("{p}.ln_cross"), d),
                    kib: AttnParams::register(&mut params, &format!("theta_k.kib.{i}"), d, &mut rng),
                    // zero gate weights start every gate at β = 1/2
                    ctrl_w: params.add(format!("theta_a.ctrl.{i}.w"), Tensor::zeros(&[2 * d])),
                    ctrl_ln: LnParams::register(&mut params, &format!("theta_a.ctrl.{i}.ln"), d),
                    ffn: FfnParams::register(&mut params, &format!("{p}.ffn"), d, cfg.ff_dim, &mut rng),
                    ln_ffn: LnParams::register(&mut params, &format!("{p}.ln_ffn"), d),
                }
            })
            .collect();

        let ke_emb = Embeddings::register(
            &mut params,
            "theta_k.ke.tok_emb",
            "theta_k.ke.pos_emb",
            v,
            ml,
            d,
            &mut rng,
        );
        let ke = (0..cfg.ke_layers)
            .map(|i| EncLayer::register(&mut params, &format!("theta_k.ke.{i}"), d, cfg.ff_dim, &mut rng))
            .collect();

        Ok(KatModel {
            cfg,
            params,
            tok_emb,
            enc_pos,
            enc,
            dec_pos,
            dec,
            ke_emb,
            ke,
        })
    }

    /// Ids of every parameter in the given partitions, in registration order.
    pub fn partition_ids(&self, parts: &[Partition]) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| Partition::of(name).is_some_and(|p| parts.contains(&p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    fn encode_dialogue(
        &self,
        sess: &mut Session,
        context: &[usize],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        // an empty context still needs one query anchor for cross-attention
        let ids: &[usize] = if context.is_empty() { &[BOS] } else { context };
        let tok = sess.p(self.tok_emb);
        let pos = sess.p(self.enc_pos);
        let te = sess.g.embedding(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = sess.g.embedding(pos, &positions)?;
        let mut x = sess.g.add(te, pe)?;
        for layer in &self.enc {
            x = layer.apply(sess, x, self.cfg.n_heads, dropout, rng)?;
        }
        Ok(x)
    }

    /// Encode each document independently (positions restart at 0) and stack
    /// the token states. Attention over the stack treats the documents as a
    /// set: permuting them permutes rows, which softmax-weighted sums do not
    /// care about. Returns None when there is nothing to encode.
    fn encode_knowledge(
        &self,
        sess: &mut Session,
        docs: &[Vec<usize>],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        for doc in docs {
            if doc.is_empty() {
                continue;
            }
            let mut x = self.ke_emb.apply(sess, doc)?;
            for layer in &self.ke {
                x = layer.apply(sess, x, self.cfg.n_heads, dropout, rng)?;
            }
            parts.push(x);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(sess.g.concat_rows(&parts)?))
    }

    /// Run the decoder stack over `dec_input` and return final states.
    #[allow(clippy::too_many_arguments)]
    fn decode_states(
        &self,
        sess: &mut Session,
        dec_input: &[usize],
        u: Var,
        k: Option<Var>,
        clamp: GateClamp,
        dropout: f64,
        rng: &mut ChaCha12Rng,
        mut gate_means: Option<&mut Vec<f64>>,
    ) -> Result<Var> {
        let t = dec_input.len();
        let tok = sess.p(self.tok_emb);
        let pos = sess.p(self.dec_pos);
        let te = sess.g.embedding(tok, dec_input)?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = sess.g.embedding(pos, &positions)?;
        let mut x = sess.g.add(te, pe)?;
        let mask = causal_mask(sess, t);

        // no knowledge available ⇒ the gate has nothing to open onto
        let clamp = if k.is_none() { GateClamp::Zero } else { clamp };

        for layer in &self.dec {
            let a = attention(sess, &layer.selfattn, x, x, Some(mask), self.cfg.n_heads)?;
            let a = sess.g.dropout(a, dropout, rng);
            let h = sess.g.add(x, a)?;
            let h = layer.ln_self.apply(sess, h)?;

            let cu = attention(sess, &layer.cross_u, h, u, None, self.cfg.n_heads)?;
            let cu = sess.g.dropout(cu, dropout, rng);
            let hc = sess.g.add(h, cu)?;
            let hc = layer.ln_cross.apply(sess, hc)?;

            let ct = match clamp {
                GateClamp::Zero => {
                    if let Some(gates) = gate_means.as_deref_mut() {
                        gates.push(0.0);
                    }
                    hc
                }
                GateClamp::One => {
                    let hk = attention(sess, &layer.kib, hc, k.unwrap(), None, self.cfg.n_heads)?;
                    let hk = sess.g.dropout(hk, dropout, rng);
                    if let Some(gates) = gate_means.as_deref_mut() {
                        gates.push(1.0);
                    }
                    layer.ctrl_ln.apply(sess, hk)?
                }
                GateClamp::Off => {
                    let hk = attention(sess, &layer.kib, hc, k.unwrap(), None, self.cfg.n_heads)?;
                    let hk = sess.g.dropout(hk, dropout, rng);
                    let w = sess.p(layer.ctrl_w);
                    let cat = sess.g.concat_cols(&[hk, hc])?;
                    let logit = sess.g.dot_rows(cat, w)?;
                    let beta = sess.g.sigmoid(logit);
                    if let Some(gates) = gate_means.as_deref_mut() {
                        let b = sess.g.value(beta);
                        gates.push(b.iter().sum::<f64>() / b.len() as f64);
                    }
                    let ones = sess.g.constant(vec![1.0; t], &[t]);
                    let inv = sess.g.sub(ones, beta)?;
                    let hk_norm = layer.ctrl_ln.apply(sess, hk)?;
                    let gated_k = sess.g.scale_rows(hk_norm, beta)?;
                    let gated_c = sess.g.scale_rows(hc, inv)?;
                    sess.g.add(gated_k, gated_c)?
                }
            };

            let f = layer.ffn.apply(sess, ct)?;
            let f = sess.g.dropout(f, dropout, rng);
            let out = sess.g.add(ct, f)?;
            x = layer.ln_ffn.apply(sess, out)?;
        }
        Ok(x)
    }

    /// Teacher-forced loss for one sample. `response` excludes BOS/EOS; the
    /// decoder sees [BOS, response] and predicts [response, EOS].
    pub fn forward<'p>(
        &'p self,
        context: &[usize],
        docs: &[Vec<usize>],
        response: &[usize],
        clamp: GateClamp,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<SampleForward<'p>> {
        if response.is_empty() {
            return Err(Error::Data("cannot train on an empty response".into()));
        }
        let mut sess = Session::new(&self.params);
        let u = self.encode_dialogue(&mut sess, context, dropout, rng)?;
        let k = match clamp {
            GateClamp::Zero => None,
            _ => self.encode_knowledge(&mut sess, docs, dropout, rng)?,
        };

        let mut dec_input = Vec::with_capacity(response.len() + 1);
        dec_input.push(BOS);
        dec_input.extend_from_slice(response);
        let mut targets = response.to_vec();
        targets.push(EOS);

        let mut gate_means = Vec::new();
        let states = self.decode_states(
            &mut sess,
            &dec_input,
            u,
            k,
            clamp,
            dropout,
            rng,
            Some(&mut gate_means),
        )?;
        let tok = sess.p(self.tok_emb);
        let logits = sess.g.matmul_transb(states, tok)?;
        let (loss_sum, token_count) = sess.g.cross_entropy_sum(logits, &targets, PAD)?;
        Ok(SampleForward {
            sess,
            loss_sum,
            token_count,
            gate_means,
        })
    }

    /// Encode once for generation; decoding steps treat the result as
    /// constant and so stay cheap.
    pub fn encode_memory(
        &self,
        context: &[usize],
        docs: &[Vec<usize>],
        clamp: GateClamp,
    ) -> Result<EncodedMemory> {
        let mut rng = rng::derive(0, &[0]); // dropout is 0; stream is unused
        let mut sess = Session::new(&self.params);
        let u = self.encode_dialogue(&mut sess, context, 0.0, &mut rng)?;
        let k = match clamp {
            GateClamp::Zero => None,
            _ => self.encode_knowledge(&mut sess, docs, 0.0, &mut rng)?,
        };
        Ok(EncodedMemory {
            d: self.cfg.d_model,
            u: sess.g.value(u).to_vec(),
            u_rows: sess.g.shape(u)[0],
            k_rows: k.map_or(0, |k| sess.g.shape(k)[0]),
            k: k.map(|k| sess.g.value(k).to_vec()),
        })
    }

    /// Logits over the vocabulary for the next token after `prefix`
    /// (which must start with BOS).
    pub fn next_token_logits(
        &self,
        mem: &EncodedMemory,
        prefix: &[usize],
        clamp: GateClamp,
    ) -> Result<Vec<f64>> {
        let mut rng = rng::derive(0, &[0]);
        let mut sess = Session::new(&self.params);
        let u = sess.g.constant(mem.u.clone(), &[mem.u_rows, mem.d]);
        let k = mem
            .k
            .as_ref()
            .map(|k| sess.g.constant(k.clone(), &[mem.k_rows, mem.d]));
        let states =
            self.decode_states(&mut sess, prefix, u, k, clamp, 0.0, &mut rng, None)?;
        let tok = sess.p(self.tok_emb);
        let logits = sess.g.matmul_transb(states, tok)?;
        let v = self.cfg.vocab_size;
        let t = prefix.len();
        Ok(sess.g.value(logits)[(t - 1) * v..t * v].to_vec())
    }

    /// Mean gate value per decoder layer over all positions of `prefix`.
    pub fn gate_trace(
        &self,
        mem: &EncodedMemory,
        prefix: &[usize],
        clamp: GateClamp,
    ) -> Result<Vec<f64>> {
        let mut rng = rng::derive(0, &[0]);
        let mut sess = Session::new(&self.params);
        let u = sess.g.constant(mem.u.clone(), &[mem.u_rows, mem.d]);
        let k = mem
            .k
            .as_ref()
            .map(|k| sess.g.constant(k.clone(), &[mem.k_rows, mem.d]));
        let mut gates = Vec::new();
        self.decode_states(
            &mut sess,
            prefix,
            u,
            k,
            clamp,
            0.0,
            &mut rng,
            Some(&mut gates),
        )?;
        Ok(gates)
    }

    /// Beam-search decode. Returns generated tokens without BOS/EOS.
    /// Beams are ranked by total log-probability while growing and by
    /// length-normalized log-probability (sum / generated count) at the end,
    /// with ties broken toward the lower token id, so the result is a pure
    /// function of the parameters and inputs.
    pub fn generate(
        &self,
        context: &[usize],
        docs: &[Vec<usize>],
        clamp: GateClamp,
        gen: &GenerateConfig,
    ) -> Result<Vec<usize>> {
        if gen.beams == 0 || gen.max_new_tokens == 0 {
            return Err(Error::Config("beams and max_new_tokens must be positive".into()));
        }
        // leave room for BOS plus every generated token in the position table
        let budget = self.cfg.max_src_len - 1;
        let max_new = gen.max_new_tokens.min(budget);
        let mem = self.encode_memory(context, docs, clamp)?;

        #[derive(Clone)]
        struct Beam {
            tokens: Vec<usize>, // starts with BOS
            sum: f64,           // total log-prob of generated tokens
            done: bool,
        }
        let norm = |b: &Beam| b.sum / (b.tokens.len() - 1).max(1) as f64;

        let mut live = vec![Beam {
            tokens: vec![BOS],
            sum: 0.0,
            done: false,
        }];
        let mut finished: Vec<Beam> = Vec::new();

        for _ in 0..max_new {
            if live.is_empty() || finished.len() >= gen.beams {
                break;
            }
            // (candidate sum, token, source beam)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (bi, beam) in live.iter().enumerate() {
                let logits = self.next_token_logits(&mem, &beam.tokens, clamp)?;
                let logp = log_softmax(&logits);
                for (tid, &lp) in logp.iter().enumerate() {
                    if tid == PAD || tid == BOS {
                        continue; // structural tokens are never generated
                    }
                    cands.push((beam.sum + lp, tid, bi));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            // keep exactly the top `beams` candidates; EOS retires its beam,
            // shrinking the live set. With beams = 1 this IS greedy search.
            let mut next_live = Vec::with_capacity(gen.beams);
            for &(sum, tid, bi) in cands.iter().take(gen.beams) {
                let mut tokens = live[bi].tokens.clone();
                tokens.push(tid);
                let beam = Beam {
                    tokens,
                    sum,
                    done: tid == EOS,
                };
                if beam.done {
                    finished.push(beam);
                } else {
                    next_live.push(beam);
                }
            }
            live = next_live;
        }
        // beams that ran out of room finish as they are
        finished.extend(live.into_iter().map(|mut b| {
            b.done = true;
            b
        }));

        let best = finished
            .into_iter()
            .max_by(|a, b| {
                norm(a)
                    .partial_cmp(&norm(b))
                    .unwrap()
                    .then_with(|| b.tokens.cmp(&a.tokens))
            })
            .expect("at least one beam always survives");

        Ok(best
            .tokens
            .into_iter()
            .skip(1) // BOS
            .filter(|&t| t != EOS)
            .collect())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

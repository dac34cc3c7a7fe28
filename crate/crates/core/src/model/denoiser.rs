//! Denoising autoencoder used to pretrain the knowledge path: reconstruct a
//! document from its corrupted form, then move the learned encoder into the
//! dialogue model's knowledge encoder and the decoder's cross-attention into
//! the knowledge-integration blocks.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::blocks::{attention, causal_mask, AttnParams, Embeddings, EncLayer, FfnParams, LnParams};
use crate::model::{KatConfig, KatModel};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};
use crate::text::{BOS, EOS, PAD};

#[derive(Debug, Clone, Copy)]
struct DenDecLayer {
    selfattn: AttnParams,
    ln_self: LnParams,
    cross: AttnParams,
    ln_cross: LnParams,
    ffn: FfnParams,
    ln_ffn: LnParams,
}

/// Sequence-to-sequence reconstructor. Encoder layout mirrors the dialogue
/// model's knowledge encoder exactly (`enc.*` ↔ `theta_k.ke.*`) and each
/// decoder layer's cross-attention mirrors one knowledge-integration block,
/// so weights can be moved across by name.
pub struct Denoiser {
    cfg: KatConfig,
    pub params: ParamStore,
    emb: Embeddings,
    enc: Vec<EncLayer>,
    dec_pos: ParamId,
    dec: Vec<DenDecLayer>,
}

pub struct DenoiserForward<'p> {
    pub sess: Session<'p>,
    pub loss_sum: Var,
    pub token_count: usize,
}

impl Denoiser {
    /// Shapes are taken from the dialogue model config: encoder depth =
    /// knowledge-encoder depth, decoder depth = dialogue-decoder depth (one
    /// cross-attention per integration block).
    pub fn for_model(cfg: &KatConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::derive(seed, &[0x64656e6f]);
        let mut params = ParamStore::new();
        let d = cfg.d_model;

        let emb = Embeddings::register(
            &mut params,
            "enc.tok_emb",
            "enc.pos_emb",
            cfg.vocab_size,
            cfg.max_src_len,
            d,
            &mut rng,
        );
        let enc = (0..cfg.ke_layers)
            .map(|i| EncLayer::register(&mut params, &format!("enc.{i}"), d, cfg.ff_dim, &mut rng))
            .collect();
        let dec_pos = params.add("dec.pos_emb", Tensor::randn(&[cfg.max_src_len, d], 0.02, &mut rng));
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DenDecLayer {
                    selfattn: AttnParams::register(&mut params, &format!("{p}.self"), d, &mut rng),
                    ln_self: LnParams::register(&mut params, &format!("{p}.ln_self"), d),
                    cross: AttnParams::register(&mut params, &format!("{p}.cross"), d, &mut rng),
                    ln_cross: LnParams::register(&mut params, &format!("{p}.ln_cross"), d),
                    ffn: FfnParams::register(&mut params, &format!("{p}.ffn"), d, cfg.ff_dim, &mut rng),
                    ln_ffn: LnParams::register(&mut params, &format!("{p}.ln_ffn"), d),
                }
            })
            .collect();

        Ok(Denoiser {
            cfg: cfg.clone(),
            params,
            emb,
            enc,
            dec_pos,
            dec,
        })
    }

    pub fn dropout(&self) -> f64 {
        self.cfg.dropout
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    /// Teacher-forced reconstruction loss: encode the corrupted tokens,
    /// decode the originals.
    pub fn forward<'p>(
        &'p self,
        corrupted: &[usize],
        original: &[usize],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<DenoiserForward<'p>> {
        if original.is_empty() {
            return Err(Error::Data("cannot reconstruct an empty sequence".into()));
        }
        let mut sess = Session::new(&self.params);
        let src: &[usize] = if corrupted.is_empty() { &[BOS] } else { corrupted };
        let mut x = self.emb.apply(&mut sess, src)?;
        for layer in &self.enc {
            x = layer.apply(&mut sess, x, self.cfg.n_heads, dropout, rng)?;
        }
        let mem = x;

        let mut dec_input = Vec::with_capacity(original.len() + 1);
        dec_input.push(BOS);
        dec_input.extend_from_slice(original);
        let mut targets = original.to_vec();
        targets.push(EOS);

        let tok = sess.p(self.emb.tok);
        let pos = sess.p(self.dec_pos);
        let te = sess.g.embedding(tok, &dec_input)?;
        let positions: Vec<usize> = (0..dec_input.len()).collect();
        let pe = sess.g.embedding(pos, &positions)?;
        let mut h = sess.g.add(te, pe)?;
        let mask = causal_mask(&mut sess, dec_input.len());

        for layer in &self.dec {
            let a = attention(&mut sess, &layer.selfattn, h, h, Some(mask), self.cfg.n_heads)?;
            let a = sess.g.dropout(a, dropout, rng);
            let s = sess.g.add(h, a)?;
            let s = layer.ln_self.apply(&mut sess, s)?;

            let c = attention(&mut sess, &layer.cross, s, mem, None, self.cfg.n_heads)?;
            let c = sess.g.dropout(c, dropout, rng);
            let s2 = sess.g.add(s, c)?;
            let s2 = layer.ln_cross.apply(&mut sess, s2)?;

            let f = layer.ffn.apply(&mut sess, s2)?;
            let f = sess.g.dropout(f, dropout, rng);
            let out = sess.g.add(s2, f)?;
            h = layer.ln_ffn.apply(&mut sess, out)?;
        }
        let tok = sess.p(self.emb.tok);
        let logits = sess.g.matmul_transb(h, tok)?;
        let (loss_sum, token_count) = sess.g.cross_entropy_sum(logits, &targets, PAD)?;
        Ok(DenoiserForward {
            sess,
            loss_sum,
            token_count,
        })
    }
}

/// Move the denoiser's learned weights into the dialogue model's knowledge
/// partition: `enc.X` → `theta_k.ke.X` and `dec.{i}.cross.Y` →
/// `theta_k.kib.{i}.Y`. Every mapping is shape-checked and the knowledge
/// partition must be covered completely before a single value is written, so
/// a failed transplant leaves the model untouched.
pub fn transplant_knowledge(model: &mut KatModel, denoiser: &Denoiser) -> Result<()> {
    let mut moves: Vec<(ParamId, ParamId)> = Vec::new();
    let mut covered = std::collections::HashSet::new();
    for (src_id, name, tensor) in denoiser.params.iter() {
        let dst_name = if let Some(rest) = name.strip_prefix("enc.") {
            format!("theta_k.ke.{rest}")
        } else if let Some(rest) = name.strip_prefix("dec.") {
            // only the cross-attention of each decoder layer moves
            let mut it = rest.splitn(3, '.');
            match (it.next(), it.next(), it.next()) {
                (Some(layer), Some("cross"), Some(param)) => {
                    format!("theta_k.kib.{layer}.{param}")
                }
                _ => continue,
            }
        } else {
            continue;
        };
        let dst_id = model.params.id_of(&dst_name).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "transplant target {dst_name} does not exist in the model"
            ))
        })?;
        if model.params.get(dst_id).shape != tensor.shape {
            return Err(Error::DimensionMismatch(format!(
                "transplant {name} → {dst_name}: shape {:?} vs {:?}",
                tensor.shape,
                model.params.get(dst_id).shape
            )));
        }
        covered.insert(dst_id);
        moves.push((src_id, dst_id));
    }
    // the knowledge partition must be fully replaced, or pretraining silently
    // leaves stale random weights behind
    for id in model.partition_ids(&[crate::model::Partition::Knowledge]) {
        if !covered.contains(&id) {
            return Err(Error::DimensionMismatch(format!(
                "transplant leaves {} uninitialized",
                model.params.name(id)
            )));
        }
    }
    for (src, dst) in moves {
        model.params.get_mut(dst).data = denoiser.params.get(src).data.clone();
    }
    Ok(())
}

//! Staged training: dialogue and knowledge pre-training, weakly supervised
//! warm-up on pseudo-labeled data, then low-resource fine-tuning.
//!
//! Each stage declares the parameter ids it updates and the optimizer never
//! touches anything else, so "stage X leaves partition Y untouched" holds
//! bitwise by construction. All randomness flows through per-(purpose,
//! epoch, sample) derived streams; results are independent of the worker
//! count and identical across reruns with one seed.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bm25::Bm25Index;
use crate::data::{encode_grounded, DialogueSample, EncodedSample, GroundedSample, KnowledgeDoc};
use crate::distant::{build_distant, corrupt_tokens, DistantConfig, NegativeSampling};
use crate::error::{Error, Result};
use crate::model::{transplant_knowledge, Denoiser, GateClamp, KatModel, Partition};
use crate::par;
use crate::rng;
use crate::tensor::{AdamW, GradBuf, ParamId};
use crate::text::Vocab;

// rng stream purposes
const TAG_SHUFFLE: u64 = 0x73687566;
const TAG_DROPOUT: u64 = 0x64726f70;
const TAG_CORRUPT: u64 = 0x636f7272;
const TAG_SUBSET: u64 = 0x66726163;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub batch_size_stage3: usize,
    pub learning_rate: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Candidate knowledge documents kept per sample.
    pub max_docs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before a stage stops; 0 turns
    /// early stopping off.
    pub patience: usize,
    /// Fraction of the fine-tuning corpus actually used (seeded, drawn once).
    pub data_fraction: f64,
    pub mask_rate: f64,
    /// Probability a corrupted position becomes the mask token rather than a
    /// random vocabulary token.
    pub mask_token_prob: f64,
    pub skip_stage1: bool,
    pub skip_stage2: bool,
    pub skip_knowledge_pretrain: bool,
    pub use_topk_negatives: bool,
    /// Hard-wire the gate to 1 (its layer norm stays active).
    pub disable_controller: bool,
    pub freeze_encoders_stage2: bool,
    pub freeze_encoders_stage3: bool,
    /// Pseudo-labeling knobs, used when the warm-up corpus is built in-run.
    pub distant: DistantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size_stage1: 2048,
            batch_size_stage2: 128,
            batch_size_stage3: 16,
            learning_rate: 5e-5,
            epochs_stage1: 3,
            epochs_stage2: 3,
            epochs_stage3: 3,
            max_src_len: 256,
            max_tgt_len: 64,
            max_docs: 40,
            seed: 0,
            patience: 2,
            data_fraction: 1.0,
            mask_rate: 0.15,
            mask_token_prob: 0.8,
            skip_stage1: false,
            skip_stage2: false,
            skip_knowledge_pretrain: false,
            use_topk_negatives: false,
            disable_controller: false,
            freeze_encoders_stage2: false,
            freeze_encoders_stage3: false,
            distant: DistantConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size_stage1", self.batch_size_stage1),
            ("batch_size_stage2", self.batch_size_stage2),
            ("batch_size_stage3", self.batch_size_stage3),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
            ("max_docs", self.max_docs),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config("data_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask_rate must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_token_prob) {
            return Err(Error::Config("mask_token_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Gate behavior for the knowledge-aware stages.
    fn warmup_clamp(&self) -> GateClamp {
        if self.disable_controller {
            GateClamp::One
        } else {
            GateClamp::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    /// Token-mean training loss per completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch; empty when no validation set was given.
    pub eval_loss: Vec<f64>,
    pub eval_ppl: Vec<f64>,
    pub wall_clock_secs: f64,
    /// Parameter groups the stage was allowed to update.
    pub updated: Vec<String>,
    pub epochs_run: usize,
}

/// Corpora for a full run. `warmup` may be absent when `dialogues` and
/// `docs` are present — the pseudo-labeled corpus is then built in-run.
/// An absent `finetune` corpus selects zero-resource mode: the pipeline
/// ends after warm-up and never looks for labeled data.
#[derive(Debug, Clone, Default)]
pub struct TslfData {
    pub dialogues: Option<Vec<DialogueSample>>,
    pub docs: Option<Vec<KnowledgeDoc>>,
    pub warmup: Option<Vec<GroundedSample>>,
    pub finetune: Option<Vec<GroundedSample>>,
    pub validation: Option<Vec<GroundedSample>>,
}

/// Token-mean loss over a corpus, teacher-forced, dropout off.
pub fn corpus_loss(
    model: &KatModel,
    samples: &[EncodedSample],
    clamp: GateClamp,
) -> Result<(f64, usize)> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("loss evaluation set"));
    }
    let results = par::ordered_map(samples, |s| -> Result<(f64, usize)> {
        let mut rng = rng::derive(0, &[0]); // dropout 0 ⇒ stream unused
        let fwd = model.forward(&s.context, &s.docs, &s.response, clamp, 0.0, &mut rng)?;
        Ok((fwd.sess.g.scalar(fwd.loss_sum), fwd.token_count))
    });
    let mut total = 0.0;
    let mut tokens = 0usize;
    for r in results {
        let (nll, count) = r?;
        total += nll;
        tokens += count;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus("loss evaluation set"));
    }
    let mean = total / tokens as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            context: "evaluation loss".into(),
        });
    }
    Ok((mean, tokens))
}

/// Dialogue-only samples wear an empty knowledge list; the gate stays
/// clamped to zero wherever they are used.
fn encode_dialogues(
    dialogues: &[DialogueSample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<EncodedSample>> {
    let grounded: Vec<GroundedSample> = dialogues
        .iter()
        .map(|d| GroundedSample {
            context: d.context.clone(),
            knowledge: vec![],
            response: d.response.clone(),
            gt_index: None,
        })
        .collect();
    let enc = encode_grounded(&grounded, vocab, cfg.max_src_len, cfg.max_tgt_len, cfg.max_docs);
    if enc.is_empty() {
        return Err(Error::EmptyCorpus("dialogue corpus"));
    }
    Ok(enc)
}

fn shuffled_indices(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derive(seed, &[TAG_SHUFFLE, stage, epoch as u64]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Seeded fraction-of-corpus pick: round(fraction·n) samples (at least one),
/// drawn once, returned in corpus order.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    assert!(fraction > 0.0 && fraction <= 1.0);
    let keep = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derive(seed, &[TAG_SUBSET]);
    for i in 0..keep.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// One optimizer step over a slice of sample indices: per-sample forward and
/// backward in parallel, gradients reduced in index order, scaled to the
/// token mean. Returns (summed loss, token count).
fn batch_step(
    model: &mut KatModel,
    samples: &[EncodedSample],
    batch: &[usize],
    clamp: GateClamp,
    opt: &mut AdamW,
    update_ids: &[ParamId],
    cfg: &TrainConfig,
    stage: u64,
    epoch: usize,
    diag: &str,
) -> Result<(f64, usize)> {
    let dropout = model.cfg.dropout;
    let seed = cfg.seed;
    let model_ref: &KatModel = model;
    let results = par::ordered_map(batch, |&idx| -> Result<(GradBuf, f64, usize)> {
        let s = &samples[idx];
        let mut rng = rng::derive(seed, &[TAG_DROPOUT, stage, epoch as u64, idx as u64]);
        let mut fwd = model_ref.forward(&s.context, &s.docs, &s.response, clamp, dropout, &mut rng)?;
        fwd.sess.g.backward(fwd.loss_sum)?;
        let loss = fwd.sess.g.scalar(fwd.loss_sum);
        Ok((fwd.sess.take_grads(), loss, fwd.token_count))
    });

    let mut grads = GradBuf::empty(model.params.len());
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for r in results {
        let (g, l, t) = r?;
        grads.add_assign(g);
        loss_sum += l;
        tokens += t;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus("training batch"));
    }
    grads.scale(1.0 / tokens as f64);
    if !(loss_sum.is_finite() && grads.all_finite()) {
        return Err(Error::NonFinite {
            context: format!("{diag}, epoch {}", epoch + 1),
        });
    }
    model.params.zero_all_grads();
    model.params.accumulate(&grads);
    opt.step(&mut model.params, update_ids);
    Ok((loss_sum, tokens))
}

struct EpochLoop<'a> {
    stage: String,
    stage_tag: u64,
    batch_size: usize,
    epochs: usize,
    clamp: GateClamp,
    update_ids: Vec<ParamId>,
    updated: Vec<String>,
    validation: Option<&'a [EncodedSample]>,
}

impl EpochLoop<'_> {
    /// Shared epoch/batch/early-stop skeleton for the three dialogue-model
    /// stages.
    fn run(
        &self,
        model: &mut KatModel,
        samples: &[EncodedSample],
        cfg: &TrainConfig,
    ) -> Result<StageReport> {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus("training corpus"));
        }
        let start = Instant::now();
        let mut opt = AdamW::new(&model.params, cfg.learning_rate);
        let mut report = StageReport {
            stage: self.stage.clone(),
            train_loss: vec![],
            eval_loss: vec![],
            eval_ppl: vec![],
            wall_clock_secs: 0.0,
            updated: self.updated.clone(),
            epochs_run: 0,
        };
        let mut best = f64::INFINITY;
        let mut stale = 0usize;
        for epoch in 0..self.epochs {
            let order = shuffled_indices(samples.len(), cfg.seed, self.stage_tag, epoch);
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            for batch in order.chunks(self.batch_size) {
                let (l, t) = batch_step(
                    model,
                    samples,
                    batch,
                    self.clamp,
                    &mut opt,
                    &self.update_ids,
                    cfg,
                    self.stage_tag,
                    epoch,
                    &self.stage,
                )?;
                loss_sum += l;
                tokens += t;
            }
            report.train_loss.push(loss_sum / tokens as f64);
            report.epochs_run = epoch + 1;
            if let Some(val) = self.validation {
                let (vl, _) = corpus_loss(model, val, self.clamp)?;
                report.eval_loss.push(vl);
                report.eval_ppl.push(vl.exp());
                if vl < best {
                    best = vl;
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Response generation on knowledge-free dialogues; the clamped gate keeps
/// every knowledge-path gradient at exactly zero, so restricting the update
/// set to the dialogue partition loses nothing.
pub fn stage1_dialogue(
    model: &mut KatModel,
    dialogues: &[DialogueSample],
    validation: Option<&[EncodedSample]>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    let samples = encode_dialogues(dialogues, vocab, cfg)?;
    EpochLoop {
        stage: "stage1_dialogue".into(),
        stage_tag: 1,
        batch_size: cfg.batch_size_stage1,
        epochs: cfg.epochs_stage1,
        clamp: GateClamp::Zero,
        update_ids: model.partition_ids(&[Partition::Dialogue]),
        updated: vec![Partition::Dialogue.prefix().trim_end_matches('.').into()],
        validation,
    }
    .run(model, &samples, cfg)
}

/// Denoising reconstruction over the raw documents; trains the separate
/// denoiser whose weights later move into the knowledge partition.
pub fn stage1_knowledge(
    denoiser: &mut Denoiser,
    docs: &[KnowledgeDoc],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    let encoded: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| vocab.encode(&d.text, cfg.max_src_len))
        .filter(|ids| !ids.is_empty())
        .collect();
    if encoded.is_empty() {
        return Err(Error::EmptyCorpus("knowledge corpus"));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(&denoiser.params, cfg.learning_rate);
    let update_ids = denoiser.all_ids();
    let dropout = denoiser.dropout();
    let vocab_size = vocab.len();
    let mut report = StageReport {
        stage: "stage1_knowledge".into(),
        train_loss: vec![],
        eval_loss: vec![],
        eval_ppl: vec![],
        wall_clock_secs: 0.0,
        updated: vec!["denoiser".into()],
        epochs_run: 0,
    };
    for epoch in 0..cfg.epochs_stage1 {
        let order = shuffled_indices(encoded.len(), cfg.seed, 2, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size_stage1) {
            let den: &Denoiser = denoiser;
            let results = par::ordered_map(batch, |&idx| -> Result<(GradBuf, f64, usize)> {
                let ids = &encoded[idx];
                let mut crng =
                    rng::derive(cfg.seed, &[TAG_CORRUPT, epoch as u64, idx as u64]);
                let corrupted =
                    corrupt_tokens(ids, cfg.mask_rate, cfg.mask_token_prob, vocab_size, &mut crng);
                let mut drng =
                    rng::derive(cfg.seed, &[TAG_DROPOUT, 2, epoch as u64, idx as u64]);
                let mut fwd = den.forward(&corrupted, ids, dropout, &mut drng)?;
                fwd.sess.g.backward(fwd.loss_sum)?;
                let loss = fwd.sess.g.scalar(fwd.loss_sum);
                Ok((fwd.sess.take_grads(), loss, fwd.token_count))
            });
            let mut grads = GradBuf::empty(denoiser.params.len());
            let mut batch_loss = 0.0;
            let mut batch_tokens = 0usize;
            for r in results {
                let (g, l, t) = r?;
                grads.add_assign(g);
                batch_loss += l;
                batch_tokens += t;
            }
            grads.scale(1.0 / batch_tokens.max(1) as f64);
            if !(batch_loss.is_finite() && grads.all_finite()) {
                return Err(Error::NonFinite {
                    context: format!("stage1_knowledge, epoch {}", epoch + 1),
                });
            }
            denoiser.params.zero_all_grads();
            denoiser.params.accumulate(&grads);
            opt.step(&mut denoiser.params, &update_ids);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
        }
        report.train_loss.push(epoch_loss / epoch_tokens as f64);
        report.epochs_run = epoch + 1;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Joint training on pseudo-labeled grounded samples: every partition
/// updates unless encoders are frozen.
pub fn stage2_warmup(
    model: &mut KatModel,
    warmup: &[EncodedSample],
    validation: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    EpochLoop {
        stage: "stage2_warmup".into(),
        stage_tag: 3,
        batch_size: cfg.batch_size_stage2,
        epochs: cfg.epochs_stage2,
        clamp: cfg.warmup_clamp(),
        update_ids: trainable_ids(model, cfg.freeze_encoders_stage2),
        updated: updated_names(cfg.freeze_encoders_stage2),
        validation,
    }
    .run(model, warmup, cfg)
}

/// Supervised fine-tuning on the labeled corpus, honoring the data
/// fraction (drawn once per run).
pub fn stage3_finetune(
    model: &mut KatModel,
    finetune: &[EncodedSample],
    validation: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    if finetune.is_empty() {
        return Err(Error::EmptyCorpus("fine-tuning corpus"));
    }
    let picked = subsample_indices(finetune.len(), cfg.data_fraction, cfg.seed);
    let subset: Vec<EncodedSample> = picked.iter().map(|&i| finetune[i].clone()).collect();
    EpochLoop {
        stage: "stage3_finetune".into(),
        stage_tag: 4,
        batch_size: cfg.batch_size_stage3,
        epochs: cfg.epochs_stage3,
        clamp: cfg.warmup_clamp(),
        update_ids: trainable_ids(model, cfg.freeze_encoders_stage3),
        updated: updated_names(cfg.freeze_encoders_stage3),
        validation,
    }
    .run(model, &subset, cfg)
}

/// Everything, minus both encoder stacks when frozen. The shared token
/// embedding stays trainable — it doubles as the output head.
fn trainable_ids(model: &KatModel, freeze_encoders: bool) -> Vec<ParamId> {
    model
        .params
        .iter()
        .filter(|(_, name, _)| {
            !(freeze_encoders
                && (name.starts_with("theta_d.enc.") || name.starts_with("theta_k.ke.")))
        })
        .map(|(id, _, _)| id)
        .collect()
}

fn updated_names(freeze_encoders: bool) -> Vec<String> {
    if freeze_encoders {
        vec![
            "theta_d (decoder only)".into(),
            "theta_k (blocks only)".into(),
            "theta_a".into(),
        ]
    } else {
        vec!["theta_d".into(), "theta_k".into(), "theta_a".into()]
    }
}

/// Build the pseudo-labeled warm-up corpus from the raw dialogue corpus and
/// the document collection.
pub fn build_warmup_corpus(
    dialogues: &[DialogueSample],
    docs: &[KnowledgeDoc],
    cfg: &TrainConfig,
) -> Result<Vec<GroundedSample>> {
    let index = Bm25Index::build(docs)?;
    let mut dcfg = cfg.distant.clone();
    if cfg.use_topk_negatives {
        dcfg.sampling = NegativeSampling::TopK;
    }
    build_distant(dialogues, docs, &index, &dcfg)
}

/// The full pipeline: stage I (both halves), knowledge transplant, stage II
/// warm-up, stage III fine-tuning — each skippable by flag or by absent
/// data. Writes `after_stageN.ckpt` snapshots and appends every report to
/// `run_log.jsonl` when `out_dir` is given.
pub fn run_tslf(
    model: &mut KatModel,
    vocab: &Vocab,
    data: &TslfData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let validation: Option<Vec<EncodedSample>> = data.validation.as_ref().map(|v| {
        encode_grounded(v, vocab, cfg.max_src_len, cfg.max_tgt_len, cfg.max_docs)
    });
    let val = validation.as_deref().filter(|v| !v.is_empty());

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        // fresh log per run
        std::fs::write(dir.join("run_log.jsonl"), b"")?;
    }
    let log = |dir: Option<&Path>, report: &StageReport| -> Result<()> {
        if let Some(dir) = dir {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(dir.join("run_log.jsonl"))?;
            serde_json::to_writer(&mut f, report)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    };

    if !cfg.skip_stage1 {
        let dialogues = data
            .dialogues
            .as_ref()
            .ok_or_else(|| Error::Config("stage I needs a dialogue corpus".into()))?;
        let r = stage1_dialogue(model, dialogues, val, vocab, cfg)?;
        log(out_dir, &r)?;
        reports.push(r);

        if !cfg.skip_knowledge_pretrain {
            let docs = data
                .docs
                .as_ref()
                .ok_or_else(|| Error::Config("knowledge pre-training needs documents".into()))?;
            let mut denoiser = Denoiser::for_model(&model.cfg, cfg.seed)?;
            let r = stage1_knowledge(&mut denoiser, docs, vocab, cfg)?;
            log(out_dir, &r)?;
            reports.push(r);
            transplant_knowledge(model, &denoiser)?;
        }
        if let Some(dir) = out_dir {
            model.save(dir.join("after_stage1.ckpt"))?;
        }
    }

    if !cfg.skip_stage2 {
        let built;
        let warmup: &[GroundedSample] = match &data.warmup {
            Some(w) => w,
            None => {
                let dialogues = data.dialogues.as_ref().ok_or_else(|| {
                    Error::Config("building warm-up data needs the dialogue corpus".into())
                })?;
                let docs = data.docs.as_ref().ok_or_else(|| {
                    Error::Config("building warm-up data needs documents".into())
                })?;
                built = build_warmup_corpus(dialogues, docs, cfg)?;
                &built
            }
        };
        if warmup.is_empty() {
            return Err(Error::EmptyCorpus("warm-up corpus"));
        }
        let encoded = encode_grounded(warmup, vocab, cfg.max_src_len, cfg.max_tgt_len, cfg.max_docs);
        let r = stage2_warmup(model, &encoded, val, cfg)?;
        log(out_dir, &r)?;
        reports.push(r);
        if let Some(dir) = out_dir {
            model.save(dir.join("after_stage2.ckpt"))?;
        }
    }

    // absent labeled data = zero-resource deployment; the run ends here
    if let Some(finetune) = &data.finetune {
        let encoded =
            encode_grounded(finetune, vocab, cfg.max_src_len, cfg.max_tgt_len, cfg.max_docs);
        let r = stage3_finetune(model, &encoded, val, cfg)?;
        log(out_dir, &r)?;
        reports.push(r);
        if let Some(dir) = out_dir {
            model.save(dir.join("after_stage3.ckpt"))?;
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KatConfig;

    fn tiny_cfg(vocab_size: usize) -> KatConfig {
        KatConfig {
            d_model: 16,
            n_heads: 2,
            ff_dim: 24,
            enc_layers: 1,
            dec_layers: 1,
            ke_layers: 1,
            max_src_len: 32,
            dropout: 0.0,
            ..KatConfig::with_vocab(vocab_size)
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size_stage1: 4,
            batch_size_stage2: 4,
            batch_size_stage3: 4,
            learning_rate: 1e-2,
            epochs_stage1: 2,
            epochs_stage2: 2,
            epochs_stage3: 2,
            max_src_len: 24,
            max_tgt_len: 12,
            max_docs: 3,
            // the toy document collection has 3 docs; 2 distractors + the hit fit
            distant: DistantConfig {
                negatives: 2,
                ..DistantConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn toy_world() -> (Vocab, Vec<DialogueSample>, Vec<KnowledgeDoc>, Vec<GroundedSample>) {
        let docs = vec![
            KnowledgeDoc { id: "d0".into(), text: "otters eat fish and crabs".into() },
            KnowledgeDoc { id: "d1".into(), text: "herons hunt frogs at dawn".into() },
            KnowledgeDoc { id: "d2".into(), text: "beavers build dams from wood".into() },
        ];
        let dialogues = vec![
            DialogueSample {
                context: vec!["what do otters eat".into()],
                response: "otters eat fish".into(),
            },
            DialogueSample {
                context: vec!["when do herons hunt".into()],
                response: "herons hunt frogs at dawn".into(),
            },
            DialogueSample {
                context: vec!["what do beavers build".into()],
                response: "beavers build dams".into(),
            },
            DialogueSample {
                context: vec!["tell me about fish".into()],
                response: "fish swim in the river".into(),
            },
        ];
        let mut text: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
        for d in &dialogues {
            text.extend(d.context.iter().cloned());
            text.push(d.response.clone());
        }
        let vocab = Vocab::build(text.iter().map(String::as_str), 128).unwrap();
        let grounded: Vec<GroundedSample> = dialogues
            .iter()
            .enumerate()
            .map(|(i, d)| GroundedSample {
                context: d.context.clone(),
                knowledge: docs.iter().map(|k| k.text.clone()).collect(),
                response: d.response.clone(),
                gt_index: Some(i % docs.len()),
            })
            .collect();
        (vocab, dialogues, docs, grounded)
    }

    fn snapshot(model: &KatModel, prefix: &str) -> Vec<(String, Vec<f64>)> {
        model
            .params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, n, t)| (n.to_string(), t.data.clone()))
            .collect()
    }

    #[test]
    fn dialogue_stage_updates_only_the_dialogue_partition() {
        let (vocab, dialogues, _, _) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 1).unwrap();
        let before_k = snapshot(&model, "theta_k.");
        let before_a = snapshot(&model, "theta_a.");
        let before_d = snapshot(&model, "theta_d.");
        let cfg = tiny_train();
        let report = stage1_dialogue(&mut model, &dialogues, None, &vocab, &cfg).unwrap();
        assert_eq!(report.updated, vec!["theta_d".to_string()]);
        assert_eq!(report.epochs_run, 2);
        assert_eq!(snapshot(&model, "theta_k."), before_k);
        assert_eq!(snapshot(&model, "theta_a."), before_a);
        assert_ne!(snapshot(&model, "theta_d."), before_d);
        assert!(report.train_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn random_init_loss_is_near_log_vocab() {
        let (vocab, _, _, grounded) = toy_world();
        let model = KatModel::new(tiny_cfg(vocab.len()), 3).unwrap();
        let samples = encode_grounded(&grounded, &vocab, 24, 12, 3);
        let (loss, _) = corpus_loss(&model, &samples, GateClamp::Zero).unwrap();
        let expected = (vocab.len() as f64).ln();
        assert!(
            (loss - expected).abs() / expected < 0.10,
            "loss {loss} vs ln(V) {expected}"
        );
    }

    #[test]
    fn dialogue_training_reduces_loss() {
        let (vocab, dialogues, _, _) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 1).unwrap();
        let cfg = TrainConfig {
            epochs_stage1: 30,
            learning_rate: 2e-2,
            ..tiny_train()
        };
        let report = stage1_dialogue(&mut model, &dialogues, None, &vocab, &cfg).unwrap();
        let first = report.train_loss[0];
        let last = *report.train_loss.last().unwrap();
        assert!(last < first * 0.5, "first {first}, last {last}");
    }

    #[test]
    fn knowledge_stage_trains_the_denoiser_and_feeds_the_transplant() {
        let (vocab, _, docs, _) = toy_world();
        let model_cfg = tiny_cfg(vocab.len());
        let mut model = KatModel::new(model_cfg.clone(), 1).unwrap();
        let mut denoiser = Denoiser::for_model(&model_cfg, 9).unwrap();
        let cfg = TrainConfig {
            epochs_stage1: 5,
            learning_rate: 1e-2,
            ..tiny_train()
        };
        let report = stage1_knowledge(&mut denoiser, &docs, &vocab, &cfg).unwrap();
        assert_eq!(report.stage, "stage1_knowledge");
        assert_eq!(report.epochs_run, 5);
        assert!(report.train_loss.iter().all(|l| l.is_finite()));
        assert!(report.train_loss.last().unwrap() < &report.train_loss[0]);
        let before_d = snapshot(&model, "theta_d.");
        transplant_knowledge(&mut model, &denoiser).unwrap();
        assert_eq!(snapshot(&model, "theta_d."), before_d);
    }

    #[test]
    fn warmup_touches_every_partition() {
        let (vocab, _, _, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 2).unwrap();
        let samples = encode_grounded(&grounded, &vocab, 24, 12, 3);
        let before_d = snapshot(&model, "theta_d.");
        let before_k = snapshot(&model, "theta_k.");
        let before_a = snapshot(&model, "theta_a.");
        let cfg = tiny_train();
        stage2_warmup(&mut model, &samples, None, &cfg).unwrap();
        assert_ne!(snapshot(&model, "theta_d."), before_d);
        assert_ne!(snapshot(&model, "theta_k."), before_k);
        assert_ne!(snapshot(&model, "theta_a."), before_a);
    }

    #[test]
    fn frozen_encoders_stay_bit_equal() {
        let (vocab, _, _, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 2).unwrap();
        let samples = encode_grounded(&grounded, &vocab, 24, 12, 3);
        let before_enc = snapshot(&model, "theta_d.enc.");
        let before_ke = snapshot(&model, "theta_k.ke.");
        let cfg = TrainConfig {
            freeze_encoders_stage2: true,
            ..tiny_train()
        };
        stage2_warmup(&mut model, &samples, None, &cfg).unwrap();
        assert_eq!(snapshot(&model, "theta_d.enc."), before_enc);
        assert_eq!(snapshot(&model, "theta_k.ke."), before_ke);
        // decoder still trained
        assert!(!snapshot(&model, "theta_d.dec.").is_empty());
    }

    #[test]
    fn fraction_selects_round_of_n_fixed_samples() {
        let picked = subsample_indices(100, 0.25, 7);
        assert_eq!(picked.len(), 25);
        assert_eq!(picked, subsample_indices(100, 0.25, 7), "drawn once, fixed");
        assert!(picked.windows(2).all(|w| w[0] < w[1]), "sorted, distinct");
        assert_eq!(subsample_indices(100, 1.0, 7), (0..100).collect::<Vec<_>>());
        // rounding and the at-least-one floor
        assert_eq!(subsample_indices(8, 0.25, 0).len(), 2);
        assert_eq!(subsample_indices(3, 0.01, 0).len(), 1);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (vocab, _, _, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 4).unwrap();
        let samples = encode_grounded(&grounded, &vocab, 24, 12, 3);
        // lr 0 never improves validation, so epoch 1 sets the best and the
        // next `patience` epochs exhaust it
        let cfg = TrainConfig {
            learning_rate: 1e-30,
            epochs_stage2: 10,
            patience: 1,
            ..tiny_train()
        };
        let report = stage2_warmup(&mut model, &samples, Some(&samples), &cfg).unwrap();
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.eval_loss.len(), 2);
        assert_eq!(report.eval_ppl.len(), 2);
    }

    #[test]
    fn nan_parameter_aborts_with_diagnostic() {
        let (vocab, dialogues, _, _) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 1).unwrap();
        let id = model.params.id_of("theta_d.tok_emb").unwrap();
        model.params.get_mut(id).data[0] = f64::NAN;
        let cfg = tiny_train();
        let err = stage1_dialogue(&mut model, &dialogues, None, &vocab, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err:?}");
    }

    #[test]
    fn full_pipeline_emits_four_reports_and_artifacts() {
        let (vocab, dialogues, docs, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = TslfData {
            dialogues: Some(dialogues),
            docs: Some(docs),
            warmup: None, // built in-run from dialogues + docs
            finetune: Some(grounded.clone()),
            validation: Some(grounded),
        };
        let cfg = TrainConfig {
            epochs_stage1: 1,
            epochs_stage2: 1,
            epochs_stage3: 1,
            patience: 0,
            ..tiny_train()
        };
        let reports = run_tslf(&mut model, &vocab, &data, &cfg, Some(dir.path())).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            names,
            ["stage1_dialogue", "stage1_knowledge", "stage2_warmup", "stage3_finetune"]
        );
        for f in ["after_stage1.ckpt", "after_stage2.ckpt", "after_stage3.ckpt"] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let log = std::fs::read_to_string(dir.path().join("run_log.jsonl")).unwrap();
        let parsed: Vec<StageReport> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed, reports);
    }

    #[test]
    fn absent_finetune_data_means_zero_resource() {
        let (vocab, dialogues, docs, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = TslfData {
            dialogues: Some(dialogues),
            docs: Some(docs),
            warmup: Some(grounded),
            finetune: None,
            validation: None,
        };
        let cfg = TrainConfig {
            epochs_stage1: 1,
            epochs_stage2: 1,
            ..tiny_train()
        };
        let reports = run_tslf(&mut model, &vocab, &data, &cfg, Some(dir.path())).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(!dir.path().join("after_stage3.ckpt").exists());
    }

    #[test]
    fn skipping_both_pretrain_stages_is_plain_fine_tuning() {
        let (vocab, _, _, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 6).unwrap();
        let data = TslfData {
            finetune: Some(grounded),
            ..TslfData::default()
        };
        let cfg = TrainConfig {
            skip_stage1: true,
            skip_stage2: true,
            epochs_stage3: 1,
            ..tiny_train()
        };
        let reports = run_tslf(&mut model, &vocab, &data, &cfg, None).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].stage, "stage3_finetune");
    }

    #[test]
    fn missing_corpus_for_an_active_stage_is_a_config_error() {
        let (vocab, _, _, grounded) = toy_world();
        let mut model = KatModel::new(tiny_cfg(vocab.len()), 6).unwrap();
        let data = TslfData {
            finetune: Some(grounded),
            ..TslfData::default()
        };
        let err = run_tslf(&mut model, &vocab, &data, &tiny_train(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn same_seed_same_checkpoint_bytes() {
        let (vocab, dialogues, docs, grounded) = toy_world();
        let cfg = TrainConfig {
            epochs_stage1: 1,
            epochs_stage2: 1,
            epochs_stage3: 1,
            ..tiny_train()
        };
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let mut model = KatModel::new(tiny_cfg(vocab.len()), 11).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let data = TslfData {
                dialogues: Some(dialogues.clone()),
                docs: Some(docs.clone()),
                warmup: None,
                finetune: Some(grounded.clone()),
                validation: None,
            };
            run_tslf(&mut model, &vocab, &data, &cfg, Some(dir.path())).unwrap();
            bytes.push(std::fs::read(dir.path().join("after_stage3.ckpt")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn disabled_controller_changes_warmup_but_not_stage1() {
        let (vocab, dialogues, _, grounded) = toy_world();
        let samples = encode_grounded(&grounded, &vocab, 24, 12, 3);
        let base = tiny_train();
        let ablated = TrainConfig {
            disable_controller: true,
            ..tiny_train()
        };

        let mut m1 = KatModel::new(tiny_cfg(vocab.len()), 13).unwrap();
        let mut m2 = KatModel::new(tiny_cfg(vocab.len()), 13).unwrap();
        stage1_dialogue(&mut m1, &dialogues, None, &vocab, &base).unwrap();
        stage1_dialogue(&mut m2, &dialogues, None, &vocab, &ablated).unwrap();
        assert_eq!(snapshot(&m1, "theta_d."), snapshot(&m2, "theta_d."));

        stage2_warmup(&mut m1, &samples, None, &base).unwrap();
        stage2_warmup(&mut m2, &samples, None, &ablated).unwrap();
        assert_ne!(snapshot(&m1, "theta_d."), snapshot(&m2, "theta_d."));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.data_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.data_fraction = 1.0;
        cfg.batch_size_stage2 = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size_stage2 = 1;
        cfg.mask_rate = 1.5;
        assert!(cfg.validate().is_err());
        cfg.mask_rate = 0.15;
        assert!(cfg.validate().is_ok());
        let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.batch_size_stage1, 2048);
        assert_eq!(parsed.batch_size_stage2, 128);
        assert_eq!(parsed.batch_size_stage3, 16);
        assert!((parsed.learning_rate - 5e-5).abs() < 1e-18);
        assert_eq!(parsed.patience, 2);
    }
}

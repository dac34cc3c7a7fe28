//! Pseudo-labeled training data from retrieval, plus the text corruption
//! used for denoising pretraining.
//!
//! Responses that score high against some knowledge document were probably
//! grounded in something like it; pairing each such dialogue with its best-
//! matching document (as a pseudo ground truth) and a handful of distractors
//! yields warmup data with no human annotation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bm25::Bm25Index;
use crate::data::{DialogueSample, GroundedSample, KnowledgeDoc};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::text::{tokenize, MASK, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Distractors drawn uniformly from the rest of the collection.
    Random,
    /// Distractors are the next-best retrieval hits (hard negatives),
    /// topped up randomly when retrieval runs dry.
    TopK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistantConfig {
    /// Keep a dialogue only if its best score is strictly above this.
    pub gamma: f64,
    /// Distractor documents attached per kept dialogue.
    pub negatives: usize,
    pub sampling: NegativeSampling,
    pub seed: u64,
    /// Optional response-length screen (token count bounds, inclusive).
    pub min_response_tokens: Option<usize>,
    pub max_response_tokens: Option<usize>,
}

impl Default for DistantConfig {
    fn default() -> Self {
        DistantConfig {
            gamma: 0.0,
            negatives: 3,
            sampling: NegativeSampling::Random,
            seed: 0,
            min_response_tokens: None,
            max_response_tokens: None,
        }
    }
}

/// Build a pseudo-labeled corpus: retrieve the top document for each
/// response, keep confident hits, attach distractors, and shuffle each
/// candidate list so the true document's position carries no signal.
///
/// Per-dialogue RNG streams are derived from (seed, dialogue index), so the
/// output is identical whether dialogues are processed in parallel or not.
pub fn build_distant(
    dialogues: &[DialogueSample],
    docs: &[KnowledgeDoc],
    index: &Bm25Index,
    cfg: &DistantConfig,
) -> Result<Vec<GroundedSample>> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus("knowledge corpus"));
    }
    if !index.matches_docs(docs) {
        return Err(Error::Data(
            "retrieval index was not built from this document file".into(),
        ));
    }
    if cfg.negatives + 1 > docs.len() {
        return Err(Error::NotEnoughNegatives {
            requested: cfg.negatives,
            available: docs.len() - 1,
        });
    }

    let built = par::ordered_map_range(dialogues.len(), |i| {
        build_one(&dialogues[i], docs, index, cfg, i as u64)
    });
    Ok(built.into_iter().flatten().collect())
}

fn build_one(
    dialogue: &DialogueSample,
    docs: &[KnowledgeDoc],
    index: &Bm25Index,
    cfg: &DistantConfig,
    sample_idx: u64,
) -> Option<GroundedSample> {
    let n_tokens = tokenize(&dialogue.response).len();
    if cfg.min_response_tokens.is_some_and(|m| n_tokens < m)
        || cfg.max_response_tokens.is_some_and(|m| n_tokens > m)
    {
        return None;
    }
    let (best, score) = index.top1(&dialogue.response)?;
    if score <= cfg.gamma {
        return None;
    }

    let mut rng = rng::derive(cfg.seed, &[0x6e65, sample_idx]);
    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.negatives);
    if cfg.sampling == NegativeSampling::TopK {
        for (doc, _) in index.topk(&dialogue.response, cfg.negatives + 1) {
            if doc != best && chosen.len() < cfg.negatives {
                chosen.push(doc);
            }
        }
    }
    // fill remaining slots with uniform draws, rejecting duplicates and the
    // positive — the collection is known large enough from the entry check
    while chosen.len() < cfg.negatives {
        let cand = rng.gen_range(0..docs.len());
        if cand != best && !chosen.contains(&cand) {
            chosen.push(cand);
        }
    }

    let mut candidates = vec![best];
    candidates.extend(chosen);
    // Fisher-Yates so gt position is uniform
    for i in (1..candidates.len()).rev() {
        let j = rng.gen_range(0..=i);
        candidates.swap(i, j);
    }
    let gt_index = candidates.iter().position(|&d| d == best).unwrap();

    Some(GroundedSample {
        context: dialogue.context.clone(),
        knowledge: candidates.iter().map(|&d| docs[d].text.clone()).collect(),
        response: dialogue.response.clone(),
        gt_index: Some(gt_index),
    })
}

/// Threshold that keeps roughly the best `quantile` fraction of dialogues.
/// Returns the score of the first *excluded* dialogue (strict `>` keeps
/// everything above it); 0.0 keeps every dialogue with any retrieval hit.
pub fn gamma_for_quantile(
    dialogues: &[DialogueSample],
    index: &Bm25Index,
    quantile: f64,
) -> f64 {
    assert!((0.0..=1.0).contains(&quantile), "quantile must be in [0,1]");
    let mut scores: Vec<f64> = dialogues
        .iter()
        .filter_map(|d| index.top1(&d.response).map(|(_, s)| s))
        .collect();
    if scores.is_empty() {
        return 0.0;
    }
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let keep = (quantile * scores.len() as f64).round() as usize;
    if keep >= scores.len() {
        0.0
    } else {
        scores[keep]
    }
}

/// Corrupt round(rate · len) distinct positions: each becomes `<mask>` with
/// probability `mask_prob`, otherwise a random non-reserved token that is
/// guaranteed to differ from the original.
pub fn corrupt_tokens(
    tokens: &[usize],
    rate: f64,
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&rate) && (0.0..=1.0).contains(&mask_prob));
    let mut out = tokens.to_vec();
    let k = (rate * tokens.len() as f64).round() as usize;
    if k == 0 {
        return out;
    }
    // partial Fisher-Yates: first k entries are a uniform distinct sample
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..positions.len());
        positions.swap(i, j);
    }
    for &pos in &positions[..k] {
        let original = out[pos];
        let masked = rng.gen::<f64>() < mask_prob;
        let replacement = if masked {
            MASK
        } else {
            sample_noise_token(original, vocab_size, rng).unwrap_or(MASK)
        };
        out[pos] = replacement;
    }
    out
}

/// Uniform draw over non-reserved ids excluding `original`; None when the
/// vocabulary has no alternative to offer.
fn sample_noise_token(
    original: usize,
    vocab_size: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Option<usize> {
    let pool = vocab_size.saturating_sub(RESERVED);
    let exclude_original = original >= RESERVED;
    let options = pool.saturating_sub(exclude_original as usize);
    if options == 0 {
        return None;
    }
    let draw = RESERVED + rng.gen_range(0..options);
    Some(if exclude_original && draw >= original {
        draw + 1
    } else {
        draw
    })
}

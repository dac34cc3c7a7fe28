//! Generation metrics: corpus BLEU, sentence-averaged ROUGE F1, distinct
//! n-gram ratios, and teacher-forced perplexity.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{GateClamp, GenerateConfig, KatModel};
use crate::par;
use crate::rng;
use crate::text::Vocab;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-1..4 with pooled clipped precisions and the standard
/// brevity penalty. A zero precision zeroes every order that includes it;
/// with `smoothing`, zero precisions get add-one smoothing instead.
pub fn corpus_bleu(refs: &[Vec<String>], hyps: &[Vec<String>], smoothing: bool) -> [f64; 4] {
    assert_eq!(refs.len(), hyps.len(), "refs and hyps must pair up");
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let rn = ngrams(r, n);
            let hn = ngrams(h, n);
            for (gram, &count) in &hn {
                totals[n - 1] += count;
                if let Some(&rc) = rn.get(gram) {
                    matches[n - 1] += count.min(rc);
                }
            }
        }
    }
    let bp = if hyp_len == 0 {
        return [0.0; 4];
    } else if hyp_len <= ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let precision = |k: usize| -> f64 {
        if totals[k] == 0 {
            0.0 // no hypothesis n-grams of this order: nothing to smooth
        } else if matches[k] == 0 && smoothing {
            1.0 / (totals[k] + 1) as f64
        } else {
            matches[k] as f64 / totals[k] as f64
        }
    };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        let ps: Vec<f64> = (0..n).map(precision).collect();
        out[n - 1] = if ps.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
        };
    }
    out
}

/// Mean sentence-level ROUGE-n F1 against a single reference each.
pub fn rouge_n_f1(refs: &[Vec<String>], hyps: &[Vec<String>], n: usize) -> f64 {
    assert_eq!(refs.len(), hyps.len());
    assert!(n > 0);
    if refs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (r, h) in refs.iter().zip(hyps) {
        let rn = ngrams(r, n);
        let hn = ngrams(h, n);
        let overlap: usize = hn
            .iter()
            .map(|(g, &c)| c.min(rn.get(g).copied().unwrap_or(0)))
            .sum();
        let ref_total: usize = rn.values().sum();
        let hyp_total: usize = hn.values().sum();
        if ref_total == 0 || hyp_total == 0 || overlap == 0 {
            continue; // F1 contribution is zero
        }
        let recall = overlap as f64 / ref_total as f64;
        let precision = overlap as f64 / hyp_total as f64;
        sum += 2.0 * precision * recall / (precision + recall);
    }
    sum / refs.len() as f64
}

/// Fraction of n-grams that are distinct, pooled over the whole corpus.
pub fn distinct_n(hyps: &[Vec<String>], n: usize) -> f64 {
    assert!(n > 0);
    let mut distinct: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                distinct.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// exp of the token-mean negative log-likelihood.
pub fn perplexity(total_nll: f64, token_count: usize) -> f64 {
    if token_count == 0 {
        f64::INFINITY
    } else {
        (total_nll / token_count as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub ppl: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
}

impl EvalReport {
    /// Fixed-width table; every run with equal numbers renders equal bytes.
    pub fn table(&self) -> String {
        let rows = [
            ("PPL", self.ppl),
            ("BLEU-1", self.bleu1),
            ("BLEU-2", self.bleu2),
            ("BLEU-3", self.bleu3),
            ("BLEU-4", self.bleu4),
            ("ROUGE-1", self.rouge1),
            ("ROUGE-2", self.rouge2),
            ("DIST-1", self.distinct1),
            ("DIST-2", self.distinct2),
        ];
        let mut out = format!("samples: {}\n", self.n_samples);
        out.push_str("metric   | value\n");
        out.push_str("---------+----------\n");
        for (name, v) in rows {
            out.push_str(&format!("{name:<8} | {v:.6}\n"));
        }
        out
    }
}

pub struct EvalOptions {
    pub clamp: GateClamp,
    pub gen: GenerateConfig,
    pub smoothing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            clamp: GateClamp::Off,
            gen: GenerateConfig::default(),
            smoothing: false,
        }
    }
}

/// Teacher-forced perplexity plus generation metrics over a held-out set.
/// Hypotheses come from beam search; references are the tokenized response
/// texts. Sample order never affects the result.
pub fn evaluate_model(
    model: &KatModel,
    samples: &[EncodedSample],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("evaluation set"));
    }
    let results = par::ordered_map(samples, |s| -> Result<(f64, usize, Vec<String>)> {
        let mut rng = rng::derive(0, &[0]); // dropout 0 ⇒ stream unused
        let fwd = model.forward(&s.context, &s.docs, &s.response, opts.clamp, 0.0, &mut rng)?;
        let nll = fwd.sess.g.scalar(fwd.loss_sum);
        if !nll.is_finite() {
            return Err(Error::NonFinite {
                context: "evaluation loss".into(),
            });
        }
        let ids = model.generate(&s.context, &s.docs, opts.clamp, &opts.gen)?;
        let hyp: Vec<String> = ids.iter().map(|&t| vocab.token(t).to_string()).collect();
        Ok((nll, fwd.token_count, hyp))
    });

    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let mut hyps = Vec::with_capacity(samples.len());
    for r in results {
        let (nll, count, hyp) = r?;
        total_nll += nll;
        total_tokens += count;
        hyps.push(hyp);
    }
    let refs: Vec<Vec<String>> = samples
        .iter()
        .map(|s| crate::text::tokenize(&s.response_text))
        .collect();

    let bleu = corpus_bleu(&refs, &hyps, opts.smoothing);
    Ok(EvalReport {
        n_samples: samples.len(),
        ppl: perplexity(total_nll, total_tokens),
        bleu1: bleu[0],
        bleu2: bleu[1],
        bleu3: bleu[2],
        bleu4: bleu[3],
        rouge1: rouge_n_f1(&refs, &hyps, 1),
        rouge2: rouge_n_f1(&refs, &hyps, 2),
        distinct1: distinct_n(&hyps, 1),
        distinct2: distinct_n(&hyps, 2),
    })
}

//! Corpus records and their on-disk JSONL forms.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocab;

/// One multi-turn exchange: `context` turns in order, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub context: Vec<String>,
    pub response: String,
}

/// A retrievable knowledge document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub id: String,
    pub text: String,
}

/// Dialogue paired with candidate knowledge. `gt_index` points at the
/// grounding document inside `knowledge` when it is known (pseudo-labeled
/// or human-labeled data); `None` means unannotated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedSample {
    pub context: Vec<String>,
    pub knowledge: Vec<String>,
    pub response: String,
    pub gt_index: Option<usize>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One token per line, in id order.
pub fn save_vocab(path: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tok in vocab.tokens() {
        writeln!(w, "{tok}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let file = File::open(path)?;
    let tokens: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();
    Vocab::from_tokens(tokens)
}

/// Load dialogues, rejecting an empty corpus early — every downstream stage
/// divides by corpus size somewhere.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<DialogueSample>> {
    let items: Vec<DialogueSample> = read_jsonl(&path)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus("dialogue corpus"));
    }
    Ok(items)
}

pub fn load_docs(path: impl AsRef<Path>) -> Result<Vec<KnowledgeDoc>> {
    let items: Vec<KnowledgeDoc> = read_jsonl(&path)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus("knowledge corpus"));
    }
    Ok(items)
}

pub fn load_grounded(path: impl AsRef<Path>) -> Result<Vec<GroundedSample>> {
    let items: Vec<GroundedSample> = read_jsonl(&path)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus("grounded corpus"));
    }
    Ok(items)
}

/// Id-space view of a grounded sample, ready for the model. Keeps the raw
/// response text so surface metrics can score against words the vocabulary
/// may have dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub context: Vec<usize>,
    pub docs: Vec<Vec<usize>>,
    pub response: Vec<usize>,
    pub response_text: String,
}

/// Encode grounded samples. Knowledge lists are capped at `max_docs`
/// (candidates beyond that are dropped, keeping earlier entries), contexts
/// keep their newest turns, and samples whose response encodes to nothing
/// are skipped — there is no target to learn or score.
pub fn encode_grounded(
    samples: &[GroundedSample],
    vocab: &Vocab,
    max_src: usize,
    max_tgt: usize,
    max_docs: usize,
) -> Vec<EncodedSample> {
    samples
        .iter()
        .filter_map(|s| {
            let response = vocab.encode(&s.response, max_tgt);
            if response.is_empty() {
                return None;
            }
            Some(EncodedSample {
                context: vocab.encode_context(&s.context, max_src),
                docs: s
                    .knowledge
                    .iter()
                    .take(max_docs)
                    .map(|d| vocab.encode(d, max_src))
                    .filter(|ids| !ids.is_empty()) // a blank doc has no rows to attend over
                    .collect(),
                response,
                response_text: s.response.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = vec![
            DialogueSample {
                context: vec!["hi there".into(), "hello".into()],
                response: "how can i help".into(),
            },
            DialogueSample {
                context: vec![],
                response: "empty context is legal".into(),
            },
        ];
        write_jsonl(&path, &samples).unwrap();
        let back: Vec<DialogueSample> = read_jsonl(&path).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn grounded_sample_null_gt_round_trips() {
        let json = r#"{"context":["a"],"knowledge":["k1","k2"],"response":"r","gt_index":null}"#;
        let s: GroundedSample = serde_json::from_str(json).unwrap();
        assert_eq!(s.gt_index, None);
        let again = serde_json::to_string(&s).unwrap();
        let s2: GroundedSample = serde_json::from_str(&again).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn malformed_line_reports_path_and_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"ok\"}\nnot json\n").unwrap();
        let err = read_jsonl::<KnowledgeDoc>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.jsonl:2"), "got: {msg}");
    }

    #[test]
    fn blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.jsonl");
        std::fs::write(&path, "\n{\"id\":\"a\",\"text\":\"t\"}\n\n").unwrap();
        let docs: Vec<KnowledgeDoc> = read_jsonl(&path).unwrap();
        assert_eq!(docs.len(), 1);
    }

    #[test]
    fn empty_dialogue_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load_dialogues(&path),
            Err(Error::EmptyCorpus("dialogue corpus"))
        ));
    }

    #[test]
    fn encode_grounded_caps_docs_and_skips_empty_responses() {
        let v = Vocab::build(["alpha beta gamma delta"], 32).unwrap();
        let samples = vec![
            GroundedSample {
                context: vec!["alpha beta".into()],
                knowledge: vec!["gamma".into(), "delta".into(), "alpha".into()],
                response: "beta gamma".into(),
                gt_index: Some(0),
            },
            GroundedSample {
                context: vec!["alpha".into()],
                knowledge: vec![],
                response: "   ".into(), // encodes to nothing
                gt_index: None,
            },
        ];
        let enc = encode_grounded(&samples, &v, 16, 8, 2);
        assert_eq!(enc.len(), 1, "blank response must be dropped");
        assert_eq!(enc[0].docs.len(), 2, "doc list capped at max_docs");
        assert_eq!(enc[0].response_text, "beta gamma");
        assert!(!enc[0].response.is_empty());
        assert!(!enc[0].context.is_empty());
    }

    #[test]
    fn encode_grounded_drops_blank_docs() {
        let v = Vocab::build(["alpha beta"], 32).unwrap();
        let samples = vec![GroundedSample {
            context: vec![],
            knowledge: vec!["".into(), "alpha".into()],
            response: "beta".into(),
            gt_index: None,
        }];
        let enc = encode_grounded(&samples, &v, 16, 8, 4);
        assert_eq!(enc[0].docs.len(), 1);
    }

    #[test]
    fn vocab_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["alpha beta gamma alpha"], 16).unwrap();
        save_vocab(&path, &v).unwrap();
        let v2 = load_vocab(&path).unwrap();
        assert_eq!(v.tokens(), v2.tokens());
    }
}

//! Okapi BM25 over an inverted index, with binary save/load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::KnowledgeDoc;
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const MAGIC: &[u8; 8] = b"KATBM251";

/// Inverted index keyed by term. Document ids are remembered so a loaded
/// index can be validated against the document file it was built from.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    /// term → (doc index, term frequency), ascending by doc index.
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    pub fn build(docs: &[KnowledgeDoc]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus("knowledge corpus"));
        }
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (i, doc) in docs.iter().enumerate() {
            let toks = tokenize(&doc.text);
            doc_lens.push(toks.len());
            doc_ids.push(doc.id.clone());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_insert(0) += 1;
            }
            // sorted insertion keeps postings independent of hash order
            let mut terms: Vec<(String, usize)> = tf.into_iter().collect();
            terms.sort_by(|a, b| a.0.cmp(&b.0));
            for (t, f) in terms {
                postings.entry(t).or_default().push((i, f));
            }
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
        Ok(Bm25Index {
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Nonzero BM25 scores for a query, as (doc index, score) with doc
    /// indices ascending. Repeated query terms contribute once per
    /// occurrence. IDF is ln(1 + (N - df + 0.5)/(df + 0.5)), positive even
    /// for terms present in every document.
    pub fn scores(&self, query: &str) -> Vec<(usize, f64)> {
        let n = self.doc_ids.len() as f64;
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(plist) = self.postings.get(&term) else {
                continue;
            };
            let df = plist.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in plist {
                let tf = tf as f64;
                let norm = 1.0 - BM25_B + BM25_B * self.doc_lens[doc] as f64 / self.avg_len;
                let contribution = idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
                *acc.entry(doc).or_insert(0.0) += contribution;
            }
        }
        let mut out: Vec<(usize, f64)> = acc.into_iter().collect();
        out.sort_by_key(|&(doc, _)| doc);
        out
    }

    /// Best document for the query, or None when no document shares a term.
    /// Ties go to the lower document index.
    pub fn top1(&self, query: &str) -> Option<(usize, f64)> {
        self.scores(query)
            .into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
    }

    /// Up to `k` best documents, score descending, ties by lower index.
    pub fn topk(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut scored = self.scores(query);
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u64(&mut w, self.doc_ids.len() as u64)?;
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lens) {
            write_bytes(&mut w, id.as_bytes())?;
            write_u64(&mut w, len as u64)?;
        }
        // canonical term order so identical builds serialize identically
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        write_u64(&mut w, terms.len() as u64)?;
        for term in terms {
            write_bytes(&mut w, term.as_bytes())?;
            let plist = &self.postings[term];
            write_u64(&mut w, plist.len() as u64)?;
            for &(doc, tf) in plist {
                write_u64(&mut w, doc as u64)?;
                write_u64(&mut w, tf as u64)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a retrieval index file".into()));
        }
        let n_docs = read_u64(&mut r)? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_lens = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            doc_ids.push(String::from_utf8(read_bytes(&mut r)?).map_err(|_| {
                Error::Format("index contains a non-UTF-8 document id".into())
            })?);
            doc_lens.push(read_u64(&mut r)? as usize);
        }
        if doc_lens.is_empty() {
            return Err(Error::Format("index holds no documents".into()));
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
        let n_terms = read_u64(&mut r)? as usize;
        let mut postings = HashMap::with_capacity(n_terms);
        for _ in 0..n_terms {
            let term = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Format("index contains a non-UTF-8 term".into()))?;
            let plen = read_u64(&mut r)? as usize;
            let mut plist = Vec::with_capacity(plen);
            for _ in 0..plen {
                let doc = read_u64(&mut r)? as usize;
                let tf = read_u64(&mut r)? as usize;
                if doc >= n_docs {
                    return Err(Error::Format("index posting points past doc table".into()));
                }
                plist.push((doc, tf));
            }
            postings.insert(term, plist);
        }
        Ok(Bm25Index {
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    /// Guard for pairing a loaded index with a document file.
    pub fn matches_docs(&self, docs: &[KnowledgeDoc]) -> bool {
        self.doc_ids.len() == docs.len()
            && self.doc_ids.iter().zip(docs).all(|(id, d)| *id == d.id)
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    if len > 1 << 30 {
        return Err(Error::Format("index field length is implausible".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<KnowledgeDoc> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| KnowledgeDoc {
                id: format!("d{i}"),
                text: t.to_string(),
            })
            .collect()
    }

    /// Direct BM25 from the definition, bypassing the inverted index.
    fn brute_force(corpus: &[KnowledgeDoc], query: &str) -> Vec<f64> {
        let tokenized: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(&d.text)).collect();
        let n = corpus.len() as f64;
        let avg = tokenized.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
        tokenized
            .iter()
            .map(|doc| {
                tokenize(query)
                    .iter()
                    .map(|q| {
                        let tf = doc.iter().filter(|t| *t == q).count() as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = tokenized
                            .iter()
                            .filter(|d| d.iter().any(|t| t == q))
                            .count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        let norm = 1.0 - BM25_B + BM25_B * doc.len() as f64 / avg;
                        idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn index_scores_match_direct_formula() {
        let corpus = docs(&[
            "the cat sat on the mat",
            "dogs chase cats in the park",
            "quantum computing uses qubits",
            "the park has a big mat for cats and dogs",
            "cats cats cats everywhere cats",
        ]);
        let index = Bm25Index::build(&corpus).unwrap();
        for query in ["cats in the park", "the mat", "qubits", "cats cats"] {
            let direct = brute_force(&corpus, query);
            let mut from_index = vec![0.0; corpus.len()];
            for (doc, s) in index.scores(query) {
                from_index[doc] = s;
            }
            for (i, (a, b)) in from_index.iter().zip(&direct).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "query {query:?} doc {i}: index {a} vs direct {b}"
                );
            }
        }
    }

    #[test]
    fn repeated_query_terms_score_multiply() {
        let corpus = docs(&["apple banana", "apple orange"]);
        let index = Bm25Index::build(&corpus).unwrap();
        let single = index.scores("apple")[0].1;
        let double = index.scores("apple apple")[0].1;
        assert!((double - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn no_term_overlap_returns_none() {
        let corpus = docs(&["alpha beta", "gamma delta"]);
        let index = Bm25Index::build(&corpus).unwrap();
        assert_eq!(index.top1("zeta eta"), None);
        assert!(index.topk("zeta", 5).is_empty());
    }

    #[test]
    fn idf_stays_positive_for_ubiquitous_terms() {
        let corpus = docs(&["water", "water", "water water"]);
        let index = Bm25Index::build(&corpus).unwrap();
        for (_, s) in index.scores("water") {
            assert!(s > 0.0);
        }
    }

    #[test]
    fn ties_break_toward_lower_document_index() {
        let corpus = docs(&["same words here", "same words here"]);
        let index = Bm25Index::build(&corpus).unwrap();
        let (best, _) = index.top1("same words").unwrap();
        assert_eq!(best, 0);
        let order: Vec<usize> = index.topk("same words", 2).iter().map(|&(d, _)| d).collect();
        assert_eq!(order, [0, 1]);
    }

    #[test]
    fn topk_orders_by_score_descending() {
        let corpus = docs(&[
            "rust is a language",
            "rust rust rust oxidation",
            "python is a language too",
        ]);
        let index = Bm25Index::build(&corpus).unwrap();
        let top = index.topk("rust", 3);
        assert_eq!(top.len(), 2); // "python..." never matches
        assert!(top[0].1 >= top[1].1);
        assert_eq!(top[0].0, 1);
    }

    #[test]
    fn save_load_round_trips_scores_exactly() {
        let corpus = docs(&[
            "the cat sat on the mat",
            "dogs chase cats",
            "a mat for dogs",
        ]);
        let index = Bm25Index::build(&corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let loaded = Bm25Index::load(&path).unwrap();
        assert!(loaded.matches_docs(&corpus));
        for q in ["cat", "dogs mat", "the"] {
            assert_eq!(index.scores(q), loaded.scores(q));
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let corpus = docs(&["one two three", "two three four", "three four five"]);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        Bm25Index::build(&corpus).unwrap().save(&p1).unwrap();
        Bm25Index::build(&corpus).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"NOTANIDX________").unwrap();
        assert!(matches!(Bm25Index::load(&path), Err(Error::Format(_))));
    }
}

//! Synthetic corpus generator: a small world of animal facts where every
//! dialogue's answer quotes one planted document verbatim. Because the
//! grounding document is known by construction, retrieval quality and
//! knowledge use are measurable against ground truth.

use std::path::Path;

use crate::data::{write_jsonl, DialogueSample, GroundedSample, KnowledgeDoc};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::Vocab;
use rand::Rng;

const ANIMALS: [&str; 16] = [
    "otter", "heron", "beaver", "badger", "marmot", "lynx", "osprey", "puffin", "walrus",
    "gannet", "stoat", "wombat", "iguana", "gecko", "tapir", "condor",
];
// first entity block carries no modifier; later blocks prepend one
const MODIFIERS: [&str; 8] = [
    "river", "mountain", "desert", "arctic", "forest", "coastal", "island", "valley",
];
pub const MAX_ENTITIES: usize = ANIMALS.len() * (MODIFIERS.len() + 1);
pub const MAX_RELATIONS: usize = 4;

const VALUES: [[&str; 8]; MAX_RELATIONS] = [
    ["fish", "crabs", "frogs", "seeds", "berries", "leaves", "insects", "roots"],
    ["river", "forest", "mountains", "tundra", "marsh", "desert", "cliffs", "prairie"],
    ["brown", "grey", "golden", "black", "white", "spotted", "striped", "pale"],
    ["whistling", "rumbling", "clicking", "hissing", "barking", "chirping", "growling", "humming"],
];
const RELATION_NAMES: [&str; MAX_RELATIONS] = ["diet", "home", "color", "sound"];

const GREETINGS: [&str; 3] = ["hello there", "hi friend", "good morning"];
const CHITCHAT: [(&str, &str); 6] = [
    ("hello there", "hello how are you today"),
    ("how are you", "i am doing well thank you"),
    ("good morning", "good morning to you"),
    ("thank you for the help", "you are welcome"),
    ("goodbye for now", "goodbye see you soon"),
    ("tell me a joke", "i only know facts about animals"),
];

const TAG_VALUE: u64 = 0x76616c;
const TAG_SPLIT: u64 = 0x73706c69;
const TAG_KNOW: u64 = 0x6b6e6f77;

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub seed: u64,
    pub entities: usize,
    pub relations: usize,
    /// Ungrounded dialogue count (facts asked about training pairs, plus
    /// the chit-chat share).
    pub dialogues: usize,
    pub chitchat: usize,
    /// Grounded split sizes, in samples (= entity-relation pairs).
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Off-target documents attached to each grounded sample.
    pub distractors: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            entities: 16,
            relations: 4,
            dialogues: 80,
            chitchat: 12,
            train: 40,
            valid: 8,
            test: 12,
            distractors: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyData {
    pub docs: Vec<KnowledgeDoc>,
    pub dialogues: Vec<DialogueSample>,
    pub train: Vec<GroundedSample>,
    pub valid: Vec<GroundedSample>,
    pub test: Vec<GroundedSample>,
}

fn entity_name(e: usize) -> String {
    let animal = ANIMALS[e % ANIMALS.len()];
    match e / ANIMALS.len() {
        0 => animal.to_string(),
        block => format!("{} {animal}", MODIFIERS[block - 1]),
    }
}

fn question(entity: &str, relation: usize) -> String {
    match relation {
        0 => format!("what does the {entity} eat"),
        1 => format!("where does the {entity} live"),
        2 => format!("what color is the {entity}"),
        _ => format!("what sound does the {entity} make"),
    }
}

fn fact(entity: &str, relation: usize, value: &str) -> String {
    match relation {
        0 => format!("the {entity} eats {value}"),
        1 => format!("the {entity} lives in the {value}"),
        2 => format!("the {entity} is {value}"),
        _ => format!("the {entity} makes a {value} sound"),
    }
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyData> {
    if cfg.entities == 0 || cfg.entities > MAX_ENTITIES {
        return Err(Error::Config(format!(
            "entities must be in 1..={MAX_ENTITIES}"
        )));
    }
    if cfg.relations == 0 || cfg.relations > MAX_RELATIONS {
        return Err(Error::Config(format!(
            "relations must be in 1..={MAX_RELATIONS}"
        )));
    }
    let n_pairs = cfg.entities * cfg.relations;
    if cfg.valid + cfg.test >= n_pairs {
        return Err(Error::Config(format!(
            "valid + test ({}) must leave training pairs out of {n_pairs}",
            cfg.valid + cfg.test
        )));
    }
    if cfg.chitchat > cfg.dialogues {
        return Err(Error::Config("chitchat exceeds the dialogue budget".into()));
    }
    if cfg.distractors + 1 > n_pairs {
        return Err(Error::Config("not enough documents for the distractors".into()));
    }

    // one fact per (entity, relation) pair; pair index is entity-major
    let mut docs = Vec::with_capacity(n_pairs);
    let mut facts = Vec::with_capacity(n_pairs);
    let mut questions = Vec::with_capacity(n_pairs);
    for e in 0..cfg.entities {
        let name = entity_name(e);
        for r in 0..cfg.relations {
            let pair = e * cfg.relations + r;
            let mut vrng = rng::derive(cfg.seed, &[TAG_VALUE, pair as u64]);
            let value = VALUES[r][vrng.gen_range(0..VALUES[r].len())];
            let text = fact(&name, r, value);
            docs.push(KnowledgeDoc {
                id: format!("{}-{}", name.replace(' ', "-"), RELATION_NAMES[r]),
                text: text.clone(),
            });
            facts.push(text);
            questions.push(question(&name, r));
        }
    }

    // held-out pairs first, training pool after
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut srng = rng::derive(cfg.seed, &[TAG_SPLIT]);
    for i in (1..n_pairs).rev() {
        let j = srng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test_pairs = &order[..cfg.test];
    let valid_pairs = &order[cfg.test..cfg.test + cfg.valid];
    let pool = &order[cfg.test + cfg.valid..];
    let train_pairs = &pool[..cfg.train.min(pool.len())];

    let grounded = |pair: usize| -> GroundedSample {
        let mut krng = rng::derive(cfg.seed, &[TAG_KNOW, pair as u64]);
        let mut others: Vec<usize> = Vec::with_capacity(cfg.distractors);
        while others.len() < cfg.distractors {
            let cand = krng.gen_range(0..n_pairs);
            if cand != pair && !others.contains(&cand) {
                others.push(cand);
            }
        }
        let mut knowledge_ids = others;
        // drop the true document somewhere in the list
        let slot = krng.gen_range(0..=knowledge_ids.len());
        knowledge_ids.insert(slot, pair);
        GroundedSample {
            context: vec![questions[pair].clone()],
            knowledge: knowledge_ids.iter().map(|&p| facts[p].clone()).collect(),
            response: facts[pair].clone(),
            gt_index: Some(slot),
        }
    };

    let train: Vec<GroundedSample> = train_pairs.iter().map(|&p| grounded(p)).collect();
    let valid: Vec<GroundedSample> = valid_pairs.iter().map(|&p| grounded(p)).collect();
    let test: Vec<GroundedSample> = test_pairs.iter().map(|&p| grounded(p)).collect();

    // ungrounded dialogues ask about training-pool pairs only, so held-out
    // facts never appear in pre-training text; repeats vary the greeting
    let qa_count = cfg.dialogues - cfg.chitchat;
    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    for i in 0..qa_count {
        let pair = pool[i % pool.len()];
        let mut context = Vec::new();
        let round = i / pool.len();
        if round > 0 {
            context.push(GREETINGS[(round - 1) % GREETINGS.len()].to_string());
        }
        context.push(questions[pair].clone());
        dialogues.push(DialogueSample {
            context,
            response: facts[pair].clone(),
        });
    }
    for i in 0..cfg.chitchat {
        let (q, a) = CHITCHAT[i % CHITCHAT.len()];
        dialogues.push(DialogueSample {
            context: vec![q.to_string()],
            response: a.to_string(),
        });
    }

    Ok(ToyData {
        docs,
        dialogues,
        train,
        valid,
        test,
    })
}

impl ToyData {
    /// Vocabulary over every generated text; sized so nothing maps to unk.
    pub fn vocab(&self, max_size: usize) -> Result<Vocab> {
        let mut texts: Vec<&str> = Vec::new();
        for d in &self.docs {
            texts.push(&d.text);
        }
        for d in &self.dialogues {
            texts.extend(d.context.iter().map(String::as_str));
            texts.push(&d.response);
        }
        for split in [&self.train, &self.valid, &self.test] {
            for s in split {
                texts.extend(s.context.iter().map(String::as_str));
                texts.extend(s.knowledge.iter().map(String::as_str));
                texts.push(&s.response);
            }
        }
        Vocab::build(texts, max_size)
    }

    /// Writes docs.jsonl, dialogues.jsonl, train.jsonl, valid.jsonl,
    /// test.jsonl under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join("docs.jsonl"), &self.docs)?;
        write_jsonl(dir.join("dialogues.jsonl"), &self.dialogues)?;
        write_jsonl(dir.join("train.jsonl"), &self.train)?;
        write_jsonl(dir.join("valid.jsonl"), &self.valid)?;
        write_jsonl(dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }
}

//! The knowledge-aware dialogue model and its denoising pretrainer.

pub mod blocks;
mod checkpoint;
mod denoiser;
mod kat;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use denoiser::{transplant_knowledge, Denoiser};
pub use kat::{EncodedMemory, GenerateConfig, KatModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::RESERVED;

/// Architecture hyperparameters. One `d_model` is shared by the dialogue
/// encoder, the knowledge encoder, and the decoder, so their states can be
/// mixed without projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KatConfig {
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "default_layers")]
    pub enc_layers: usize,
    #[serde(default = "default_layers")]
    pub dec_layers: usize,
    #[serde(default = "default_layers")]
    pub ke_layers: usize,
    /// Position-table size; the hard ceiling on any encoded sequence.
    #[serde(default = "default_max_src_len")]
    pub max_src_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_d_model() -> usize {
    64
}
fn default_n_heads() -> usize {
    4
}
fn default_ff_dim() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_max_src_len() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.1
}

impl KatConfig {
    /// Every field at its default except the vocabulary size, which has no
    /// sensible default.
    pub fn with_vocab(vocab_size: usize) -> Self {
        KatConfig {
            vocab_size,
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            ff_dim: default_ff_dim(),
            enc_layers: default_layers(),
            dec_layers: default_layers(),
            ke_layers: default_layers(),
            max_src_len: default_max_src_len(),
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed the {RESERVED} reserved tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_dim == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.ke_layers == 0
            || self.max_src_len == 0
        {
            return Err(Error::Config(
                "layer counts, ff_dim, and max_src_len must be nonzero".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Override for the knowledge gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateClamp {
    /// Learned gate: β = σ(w·[h_k; h_c]) per position.
    Off,
    /// β ≡ 0: knowledge path skipped entirely; the decoder reduces to a
    /// context-only model and knowledge parameters see zero gradient.
    Zero,
    /// β ≡ 1: output is the normalized knowledge state alone.
    One,
}

/// The three trainable parameter families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Dialogue encoder + decoder trunk (`theta_d.`).
    Dialogue,
    /// Knowledge encoder + knowledge-integration attention (`theta_k.`).
    Knowledge,
    /// Gate controllers (`theta_a.`).
    Gate,
}

impl Partition {
    pub fn prefix(&self) -> &'static str {
        match self {
            Partition::Dialogue => "theta_d.",
            Partition::Knowledge => "theta_k.",
            Partition::Gate => "theta_a.",
        }
    }

    pub fn of(name: &str) -> Option<Partition> {
        [Partition::Dialogue, Partition::Knowledge, Partition::Gate]
            .into_iter()
            .find(|p| name.starts_with(p.prefix()))
    }
}

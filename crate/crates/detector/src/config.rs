use serde::{Deserialize, Serialize};

use crate::error::{DetectorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Transformer over precomputed sentence embeddings.
    Sentence,
    /// Transformer over a flat `[CLS] x1 [SEP] ... xN [SEP]` token sequence.
    Token,
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputMode::Sentence => "sentence",
            InputMode::Token => "token",
        })
    }
}

impl std::str::FromStr for InputMode {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sentence" => Ok(InputMode::Sentence),
            "token" => Ok(InputMode::Token),
            other => Err(DetectorError::Invalid(format!("unknown input mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub mode: InputMode,
    /// Sentence-embedding width: input width in sentence mode, and the
    /// output width of the matching head in both modes.
    pub d_embed: usize,
    /// Token-table size (token mode only, specials included).
    pub vocab_size: usize,
    pub init_std: f64,
    pub init_seed: u64,
}

impl TransformerConfig {
    /// Small CPU-friendly encoder: 2 layers, 4 heads, width 64, FFN 256.
    pub fn desk(mode: InputMode, d_embed: usize, vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_positions: match mode {
                InputMode::Sentence => 64,
                InputMode::Token => 512,
            },
            dropout: 0.1,
            mode,
            d_embed,
            vocab_size: if mode == InputMode::Token { vocab_size } else { 0 },
            init_std: 0.02,
            init_seed: 0,
        }
    }

    /// BERT-base sized encoder.
    pub fn base(mode: InputMode, d_embed: usize, vocab_size: usize) -> Self {
        Self { n_layers: 12, n_heads: 12, d_model: 768, d_ff: 3072, ..Self::desk(mode, d_embed, vocab_size) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Invalid(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.d_embed == 0 || self.max_positions == 0 {
            return bad("d_ff, d_embed and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.mode == InputMode::Token && self.vocab_size <= crate::vocab::N_SPECIAL {
            return bad("token mode needs a vocabulary beyond the special symbols".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

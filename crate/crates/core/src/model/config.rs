use serde::{Deserialize, Serialize};

use crate::corpus::Vocabularies;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tasks {
    Both,
    Type,
    Name,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_layout_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layout_d_model: usize,
    pub dropout: f64,
    pub max_seq_length: usize,
    pub max_layout_len: usize,
    pub subword_vocab_size: usize,
    pub type_vocab_size: usize,
    pub name_vocab_size: usize,
    pub layout_vocab_size: usize,
    pub use_layout_mask: bool,
    pub tasks: Tasks,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_layout_layers: 3,
            n_heads: 8,
            d_ff: 2048,
            layout_d_model: 256,
            dropout: 0.1,
            max_seq_length: 512,
            max_layout_len: 32,
            subword_vocab_size: 0,
            type_vocab_size: 0,
            name_vocab_size: 0,
            layout_vocab_size: 0,
            use_layout_mask: true,
            tasks: Tasks::Both,
        }
    }
}

impl ModelConfig {
    pub fn with_vocabularies(mut self, v: &Vocabularies) -> Self {
        self.subword_vocab_size = v.subwords.len();
        self.type_vocab_size = v.types.len();
        self.name_vocab_size = v.names.len();
        self.layout_vocab_size = v.layouts.len();
        self
    }

    pub fn layout_d_ff(&self) -> usize {
        4 * self.layout_d_model
    }

    /// Decoder positions cover a type and a name step per input position.
    pub fn max_steps(&self) -> usize {
        2 * self.max_seq_length
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.layout_d_model == 0 || self.layout_d_model % self.n_heads != 0 {
            return bad(format!(
                "layout_d_model {} is not divisible by n_heads {}",
                self.layout_d_model, self.n_heads
            ));
        }
        if self.d_ff != 4 * self.d_model {
            return bad(format!("d_ff {} must be 4 x d_model {}", self.d_ff, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq_length == 0 || self.max_layout_len < 3 {
            return bad("max_seq_length must be positive and max_layout_len at least 3".into());
        }
        for (name, v) in [
            ("subword_vocab_size", self.subword_vocab_size),
            ("type_vocab_size", self.type_vocab_size),
            ("name_vocab_size", self.name_vocab_size),
            ("layout_vocab_size", self.layout_vocab_size),
        ] {
            if v == 0 {
                return bad(format!("{name} is zero; load vocabularies before building a model"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Type,
    Name,
}

impl StepKind {
    pub fn index(self) -> usize {
        match self {
            StepKind::Type => 0,
            StepKind::Name => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub var: usize,
    pub kind: StepKind,
}

/// Decoding order for `m` variables: type then name per variable, or only
/// one of them in the specialized modes.
pub fn multitask_schedule(m: usize, tasks: Tasks) -> Vec<Step> {
    let kinds: &[StepKind] = match tasks {
        Tasks::Both => &[StepKind::Type, StepKind::Name],
        Tasks::Type => &[StepKind::Type],
        Tasks::Name => &[StepKind::Name],
    };
    (0..m)
        .flat_map(|var| kinds.iter().map(move |&kind| Step { var, kind }))
        .collect()
}

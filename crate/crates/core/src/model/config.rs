use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Named model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Bart,
    Mbart,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "bart" => Ok(Profile::Bart),
            "mbart" => Ok(Profile::Mbart),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Shape and regularisation of the encoder-decoder body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Output softmax shares the token embedding matrix.
    pub tie_embeddings: bool,
    /// Token embeddings are multiplied by `sqrt(d_model)`.
    pub scale_embeddings: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale body: d=64, 2+2 layers, 4 heads.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            vocab_size,
            max_positions: 512,
            tie_embeddings: true,
            scale_embeddings: true,
            dropout: 0.1,
            attention_dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    /// 12+12 layers, d=1024, 16 heads, ~40k tied vocabulary.
    pub fn bart() -> Self {
        ModelConfig {
            d_model: 1024,
            n_enc_layers: 12,
            n_dec_layers: 12,
            n_heads: 16,
            d_ffn: 4096,
            vocab_size: 40_000,
            max_positions: 1024,
            tie_embeddings: true,
            scale_embeddings: true,
            dropout: 0.3,
            attention_dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    /// Same body as [`ModelConfig::bart`] with a 250k vocabulary.
    pub fn mbart() -> Self {
        ModelConfig {
            vocab_size: 250_000,
            attention_dropout: 0.1,
            ..ModelConfig::bart()
        }
    }

    pub fn for_profile(profile: Profile, toy_vocab: usize) -> Self {
        match profile {
            Profile::Toy => ModelConfig::toy(toy_vocab),
            Profile::Bart => ModelConfig::bart(),
            Profile::Mbart => ModelConfig::mbart(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 {
            problems.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            problems.push("encoder and decoder need at least one layer".to_string());
        }
        if self.d_ffn == 0 {
            problems.push("d_ffn must be positive".to_string());
        }
        if self.vocab_size < crate::data::N_SPECIAL {
            problems.push(format!(
                "vocab_size {} smaller than the {} reserved tokens",
                self.vocab_size,
                crate::data::N_SPECIAL
            ));
        }
        if self.max_positions < 2 {
            problems.push("max_positions must be at least 2".to_string());
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{name} {p} not in [0, 1)"));
            }
        }
        if !(self.layer_norm_eps >= 0.0) {
            problems.push("layer_norm_eps must be non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

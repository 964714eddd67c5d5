//! Source-side network grafted in front of a pretrained body.
//!
//! `IM(e) = alpha * LN(W * Transformer(e))`, where the transformer sees
//! learned positional embeddings at its embedding layer and, optionally,
//! fixed sinusoids added to the input of every layer.

use crate::error::{Error, Result};
use crate::model::layers::{AttnMask, Ctx, EncoderLayer, LayerHyper, LayerNorm, TokenBatch, INIT_STD};
use crate::model::params::{Init, ParamId, ParamSink};
use crate::tensor::{Float, Var};
use serde::{Deserialize, Serialize};

/// Layout of the fixed positional table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinusoidScheme {
    /// Half-split table: sines in the first half, cosines in the second,
    /// with exponent denominator `d/2 - 1`.
    HalfSplit,
    /// Interleaved `sin(l / 10000^(2k/d))`, `cos(...)` pairs.
    Conventional,
}

/// Fixed positional value for position `l`, dimension `i` of a `d`-wide table.
pub fn sinusoidal(l: usize, i: usize, d: usize, scheme: SinusoidScheme) -> Result<f64> {
    if d % 2 != 0 || d < 4 {
        return Err(Error::Config(format!(
            "sinusoid width must be even and at least 4, got {d}"
        )));
    }
    if i >= d {
        return Err(Error::Range(format!("dimension {i} outside table width {d}")));
    }
    let l = l as f64;
    Ok(match scheme {
        SinusoidScheme::HalfSplit => {
            let h = (d / 2) as f64 - 1.0;
            if i < d / 2 {
                (l / 10_000f64.powf(i as f64 / h)).sin()
            } else {
                (l / 10_000f64.powf((i as f64 - h) / h)).cos()
            }
        }
        SinusoidScheme::Conventional => {
            let k = (i - i % 2) as f64;
            let angle = l / 10_000f64.powf(k / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        }
    })
}

/// Row-major `[len, d]` table.
pub fn sinusoid_table(len: usize, d: usize, scheme: SinusoidScheme) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len * d);
    for l in 0..len {
        for i in 0..d {
            out.push(sinusoidal(l, i, d, scheme)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputModuleConfig {
    pub d_s: usize,
    /// Width of the body this module feeds.
    pub d_out: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub src_vocab_size: usize,
    pub max_positions: usize,
    /// Output scale; `sqrt(d_out)` when absent.
    pub alpha: Option<f64>,
    pub add_fixed_per_layer: bool,
    pub sinusoids: SinusoidScheme,
    /// Disables the output layer norm (ablation only).
    pub output_layer_norm: bool,
    pub scale_embeddings: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
}

fn heads_for(d_s: usize) -> usize {
    ((d_s as f64 / 16.0).round() as usize).max(1)
}

impl InputModuleConfig {
    /// `d_s = d_body / 2`, two layers.
    pub fn toy(d_body: usize, src_vocab_size: usize) -> Self {
        let d_s = d_body / 2;
        InputModuleConfig {
            n_layers: 2,
            max_positions: 512,
            ..Self::with_width(d_s, d_body, src_vocab_size)
        }
    }

    /// `d_s = 512`, six layers, feeding a 1024-wide body.
    pub fn large(src_vocab_size: usize) -> Self {
        InputModuleConfig {
            n_layers: 6,
            max_positions: 1024,
            ..Self::with_width(512, 1024, src_vocab_size)
        }
    }

    fn with_width(d_s: usize, d_out: usize, src_vocab_size: usize) -> Self {
        InputModuleConfig {
            d_s,
            d_out,
            n_layers: 2,
            n_heads: heads_for(d_s),
            d_ffn: 4 * d_s,
            src_vocab_size,
            max_positions: 512,
            alpha: None,
            add_fixed_per_layer: true,
            sinusoids: SinusoidScheme::HalfSplit,
            output_layer_norm: true,
            scale_embeddings: true,
            dropout: 0.2,
            attention_dropout: 0.2,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or((self.d_out as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_heads == 0 || self.d_s % self.n_heads != 0 {
            problems.push(format!("d_s {} not divisible by n_heads {}", self.d_s, self.n_heads));
        }
        if self.add_fixed_per_layer && (self.d_s % 2 != 0 || self.d_s < 4) {
            problems.push(format!("sinusoids need an even d_s >= 4, got {}", self.d_s));
        }
        if self.d_out == 0 || self.d_ffn == 0 || self.max_positions == 0 {
            problems.push("d_out, d_ffn and max_positions must be positive".into());
        }
        if self.src_vocab_size < crate::data::N_SPECIAL {
            problems.push(format!("src_vocab_size {} too small", self.src_vocab_size));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{name} {p} not in [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("input module: {}", problems.join("; "))))
        }
    }
}

/// Parameter handles of a grafted input module.
#[derive(Clone, Debug, PartialEq)]
pub struct InputModule {
    pub config: InputModuleConfig,
    pub embed_tokens: ParamId,
    pub embed_positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub proj: ParamId,
    pub layer_norm: LayerNorm,
}

pub(crate) const PREFIX: &str = "input_module";

impl InputModule {
    pub(crate) fn declare(sink: &mut dyn ParamSink, config: &InputModuleConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embed_tokens = sink.declare(
            format!("{PREFIX}/embed_tokens/weight"),
            vec![c.src_vocab_size, c.d_s],
            Init::Normal(INIT_STD),
        )?;
        let embed_positions = sink.declare(
            format!("{PREFIX}/embed_positions/weight"),
            vec![c.max_positions, c.d_s],
            Init::Normal(INIT_STD),
        )?;
        let layers = (0..c.n_layers)
            .map(|i| EncoderLayer::declare(sink, &format!("{PREFIX}/layer{i}"), c.d_s, c.d_ffn, c.n_heads))
            .collect::<Result<Vec<_>>>()?;
        let proj = sink.declare(format!("{PREFIX}/proj/weight"), vec![c.d_s, c.d_out], Init::Normal(INIT_STD))?;
        let layer_norm = LayerNorm::declare(sink, &format!("{PREFIX}/layer_norm"), c.d_out)?;
        Ok(InputModule {
            config: config.clone(),
            embed_tokens,
            embed_positions,
            layers,
            proj,
            layer_norm,
        })
    }

    /// `[batch * len, d_out]` hidden states for the body encoder.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, src: &TokenBatch) -> Result<Var> {
        let c = &self.config;
        if src.len > c.max_positions {
            return Err(Error::Range(format!(
                "source length {} exceeds {} input-module positions",
                src.len, c.max_positions
            )));
        }
        let (b, t) = (src.batch, src.len);
        let table = ctx.param(self.embed_tokens);
        let mut x = ctx.tape.embedding(table, &src.ids)?;
        if c.scale_embeddings {
            x = ctx.tape.scale(x, (c.d_s as f64).sqrt())?;
        }
        let pos_table = ctx.param(self.embed_positions);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = ctx.tape.embedding(pos_table, &pos_ids)?;
        x = ctx.tape.add(x, pos)?;
        x = ctx.tape.dropout(x, c.dropout)?;
        let fixed = if c.add_fixed_per_layer {
            let data = sinusoid_table(t, c.d_s, c.sinusoids)?;
            Some(ctx.tape.constant(vec![t, c.d_s], data.into_iter().map(F::of).collect())?)
        } else {
            None
        };
        let mask = if src.lengths.iter().all(|&l| l == t) {
            AttnMask::None
        } else {
            AttnMask::PerExample(ctx.tape.constant(vec![b, t, t], src.key_padding_mask(t))?)
        };
        let hp = LayerHyper {
            dropout: c.dropout,
            attention_dropout: c.attention_dropout,
            eps: c.layer_norm_eps,
        };
        for layer in &self.layers {
            if let Some(s) = fixed {
                x = ctx.tape.add_broadcast(x, s, t * c.d_s, b)?;
            }
            x = layer.forward(ctx, x, b, t, &mask, hp)?;
        }
        let w = ctx.param(self.proj);
        let mut y = ctx.tape.matmul(x, w)?;
        if c.output_layer_norm {
            y = self.layer_norm.forward(ctx, y, c.layer_norm_eps)?;
        }
        ctx.tape.scale(y, c.alpha())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn half_split_sinusoid_values() {
        let s = |l, i, d| sinusoidal(l, i, d, SinusoidScheme::HalfSplit).unwrap();
        for i in 0..8 {
            assert_eq!(s(0, i, 8), if i < 4 { 0.0 } else { 1.0 });
        }
        assert_abs_diff_eq!(s(1, 0, 4), 0.841_471, epsilon = 1e-6);
        assert_abs_diff_eq!(s(1, 3, 4), (1e-8f64).cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(s(1, 3, 4), 1.0, epsilon = 1e-8);
        assert!(matches!(
            sinusoidal(0, 0, 5, SinusoidScheme::HalfSplit),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conventional_scheme_interleaves() {
        let c = |l, i| sinusoidal(l, i, 8, SinusoidScheme::Conventional).unwrap();
        assert_abs_diff_eq!(c(3, 0), 3f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(c(3, 1), 3f64.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(c(3, 2), (3.0 / 10f64).sin(), epsilon = 1e-12);
    }

    #[test]
    fn table_is_bounded_and_extends_without_change() {
        let short = sinusoid_table(10, 16, SinusoidScheme::HalfSplit).unwrap();
        let long = sinusoid_table(50, 16, SinusoidScheme::HalfSplit).unwrap();
        assert_eq!(&long[..short.len()], &short[..]);
        assert!(long.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn configs() {
        let toy = InputModuleConfig::toy(64, 300);
        assert_eq!((toy.d_s, toy.n_heads, toy.alpha()), (32, 2, 8.0));
        toy.validate().unwrap();
        let large = InputModuleConfig::large(5000);
        assert_eq!((large.d_s, large.n_heads, large.alpha()), (512, 32, 32.0));
    }
}

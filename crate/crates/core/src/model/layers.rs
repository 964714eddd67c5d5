//! Transformer building blocks shared by the body and the input module.

use super::params::{Init, ParamGrads, ParamId, ParamSink, ParamTree};
use crate::adapters::Adapter;
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

pub(crate) const INIT_STD: f64 = 0.02;
const MASKED: f64 = -1e9;

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Ctx<'p, F: Float> {
    pub tape: Tape<F>,
    params: &'p ParamTree<F>,
    bound: Vec<Option<Var>>,
}

impl<'p, F: Float> Ctx<'p, F> {
    pub fn new(params: &'p ParamTree<F>, tape: Tape<F>) -> Self {
        Ctx {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Leaf for parameter `id`, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Reverse pass; returns gradients for trainable parameters the forward touched.
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads<F>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(ParamGrads(out))
    }
}

/// Padded `[batch, len]` token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_seqs(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("empty batch or empty sequence".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD_ID as usize; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[b * len + t] = id as usize;
            }
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn is_pad(&self, b: usize, t: usize) -> bool {
        t >= self.lengths[b]
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len).collect()
    }

    /// Additive `[batch, queries, len]` mask hiding padded key positions.
    pub fn key_padding_mask<F: Float>(&self, queries: usize) -> Vec<F> {
        let mut m = vec![F::zero(); self.batch * queries * self.len];
        for b in 0..self.batch {
            for q in 0..queries {
                for k in self.lengths[b]..self.len {
                    m[(b * queries + q) * self.len + k] = F::of(MASKED);
                }
            }
        }
        m
    }
}

/// Additive `[len, len]` mask: query `t` sees keys `0..=t` only.
pub fn causal_mask<F: Float>(len: usize) -> Vec<F> {
    let mut m = vec![F::zero(); len * len];
    for q in 0..len {
        for k in q + 1..len {
            m[q * len + k] = F::of(MASKED);
        }
    }
    m
}

/// Attention mask variants understood by [`Attention::forward`].
pub enum AttnMask {
    None,
    /// `[batch, queries, keys]`, shared by all heads.
    PerExample(Var),
    /// `[queries, keys]`, shared by all examples and heads.
    Shared(Var),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `weight: [d_in, d_out]`, `y = x W + b`.
    pub(crate) fn declare(
        sink: &mut dyn ParamSink,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = sink.declare(format!("{prefix}/weight"), vec![d_in, d_out], init)?;
        let bias = if bias {
            Some(sink.declare(format!("{prefix}/bias"), vec![d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn declare(sink: &mut dyn ParamSink, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: sink.declare(format!("{prefix}/weight"), vec![d], Init::Ones)?,
            bias: sink.declare(format!("{prefix}/bias"), vec![d], Init::Zeros)?,
        })
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var, eps: f64) -> Result<Var> {
        let g = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn declare(sink: &mut dyn ParamSink, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        let lin = |sink: &mut dyn ParamSink, name: &str| {
            Linear::declare(sink, &format!("{prefix}/{name}"), d, d, true, Init::Normal(INIT_STD))
        };
        Ok(Attention {
            q_proj: lin(sink, "q_proj")?,
            k_proj: lin(sink, "k_proj")?,
            v_proj: lin(sink, "v_proj")?,
            out_proj: lin(sink, "out_proj")?,
            heads,
        })
    }

    /// `queries: [batch * tq, d]`, `keys: [batch * tk, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        ctx: &mut Ctx<F>,
        queries: Var,
        keys: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        mask: &AttnMask,
        attn_dropout: f64,
    ) -> Result<Var> {
        let d = *ctx.tape.shape(queries).last().unwrap_or(&0);
        let dh = d / self.heads;
        let q = self.q_proj.forward(ctx, queries)?;
        let q = ctx.tape.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = self.k_proj.forward(ctx, keys)?;
        let v = self.v_proj.forward(ctx, keys)?;
        let q = ctx.tape.split_heads(q, batch, tq, self.heads)?;
        let k = ctx.tape.split_heads(k, batch, tk, self.heads)?;
        let v = ctx.tape.split_heads(v, batch, tk, self.heads)?;
        let mut scores = ctx.tape.matmul_nt(q, k)?;
        scores = match *mask {
            AttnMask::None => scores,
            AttnMask::PerExample(m) => ctx.tape.add_broadcast(scores, m, tq * tk, self.heads)?,
            AttnMask::Shared(m) => ctx.tape.add_broadcast(scores, m, tq * tk, batch * self.heads)?,
        };
        let probs = ctx.tape.softmax_lastdim(scores)?;
        let probs = ctx.tape.dropout(probs, attn_dropout)?;
        let mixed = ctx.tape.matmul(probs, v)?;
        let merged = ctx.tape.merge_heads(mixed, batch, self.heads)?;
        self.out_proj.forward(ctx, merged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub(crate) fn declare(sink: &mut dyn ParamSink, prefix: &str, d: usize, d_ffn: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::declare(sink, &format!("{prefix}/fc1"), d, d_ffn, true, Init::Normal(INIT_STD))?,
            fc2: Linear::declare(sink, &format!("{prefix}/fc2"), d_ffn, d, true, Init::Normal(INIT_STD))?,
        })
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        let h = ctx.tape.dropout(h, dropout)?;
        self.fc2.forward(ctx, h)
    }
}

/// Regularisation knobs threaded through a layer stack.
#[derive(Clone, Copy, Debug)]
pub struct LayerHyper {
    pub dropout: f64,
    pub attention_dropout: f64,
    pub eps: f64,
}

/// Post-norm self-attention + feed-forward layer, with an optional adapter
/// at its very end.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub prefix: String,
    pub self_attn: Attention,
    pub self_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
    pub adapter: Option<Adapter>,
}

impl EncoderLayer {
    pub(crate) fn declare(
        sink: &mut dyn ParamSink,
        prefix: &str,
        d: usize,
        d_ffn: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            prefix: prefix.to_owned(),
            self_attn: Attention::declare(sink, &format!("{prefix}/self_attn"), d, heads)?,
            self_attn_layer_norm: LayerNorm::declare(sink, &format!("{prefix}/self_attn_layer_norm"), d)?,
            ffn: FeedForward::declare(sink, prefix, d, d_ffn)?,
            final_layer_norm: LayerNorm::declare(sink, &format!("{prefix}/final_layer_norm"), d)?,
            adapter: None,
        })
    }

    pub fn forward<F: Float>(
        &self,
        ctx: &mut Ctx<F>,
        x: Var,
        batch: usize,
        len: usize,
        mask: &AttnMask,
        hp: LayerHyper,
    ) -> Result<Var> {
        let h = self
            .self_attn
            .forward(ctx, x, x, batch, len, len, mask, hp.attention_dropout)?;
        let h = ctx.tape.dropout(h, hp.dropout)?;
        let x = ctx.tape.add(x, h)?;
        let x = self.self_attn_layer_norm.forward(ctx, x, hp.eps)?;
        let h = self.ffn.forward(ctx, x, hp.dropout)?;
        let h = ctx.tape.dropout(h, hp.dropout)?;
        let x = ctx.tape.add(x, h)?;
        let x = self.final_layer_norm.forward(ctx, x, hp.eps)?;
        match &self.adapter {
            Some(a) => a.forward(ctx, x),
            None => Ok(x),
        }
    }
}

/// Post-norm decoder layer: causal self-attention, encoder-decoder
/// attention, feed-forward, in that order; optional adapter at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub prefix: String,
    pub self_attn: Attention,
    pub self_attn_layer_norm: LayerNorm,
    pub encoder_attn: Attention,
    pub encoder_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
    pub adapter: Option<Adapter>,
}

impl DecoderLayer {
    pub(crate) fn declare(
        sink: &mut dyn ParamSink,
        prefix: &str,
        d: usize,
        d_ffn: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            prefix: prefix.to_owned(),
            self_attn: Attention::declare(sink, &format!("{prefix}/self_attn"), d, heads)?,
            self_attn_layer_norm: LayerNorm::declare(sink, &format!("{prefix}/self_attn_layer_norm"), d)?,
            encoder_attn: Attention::declare(sink, &format!("{prefix}/encoder_attn"), d, heads)?,
            encoder_attn_layer_norm: LayerNorm::declare(
                sink,
                &format!("{prefix}/encoder_attn_layer_norm"),
                d,
            )?,
            ffn: FeedForward::declare(sink, prefix, d, d_ffn)?,
            final_layer_norm: LayerNorm::declare(sink, &format!("{prefix}/final_layer_norm"), d)?,
            adapter: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        ctx: &mut Ctx<F>,
        y: Var,
        memory: Var,
        batch: usize,
        tgt_len: usize,
        src_len: usize,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
        hp: LayerHyper,
    ) -> Result<Var> {
        let h = self
            .self_attn
            .forward(ctx, y, y, batch, tgt_len, tgt_len, self_mask, hp.attention_dropout)?;
        let h = ctx.tape.dropout(h, hp.dropout)?;
        let y = ctx.tape.add(y, h)?;
        let y = self.self_attn_layer_norm.forward(ctx, y, hp.eps)?;
        let h = self.encoder_attn.forward(
            ctx,
            y,
            memory,
            batch,
            tgt_len,
            src_len,
            cross_mask,
            hp.attention_dropout,
        )?;
        let h = ctx.tape.dropout(h, hp.dropout)?;
        let y = ctx.tape.add(y, h)?;
        let y = self.encoder_attn_layer_norm.forward(ctx, y, hp.eps)?;
        let h = self.ffn.forward(ctx, y, hp.dropout)?;
        let h = ctx.tape.dropout(h, hp.dropout)?;
        let y = ctx.tape.add(y, h)?;
        let y = self.final_layer_norm.forward(ctx, y, hp.eps)?;
        match &self.adapter {
            Some(a) => a.forward(ctx, y),
            None => Ok(y),
        }
    }
}

//! Post-norm encoder-decoder transformer with optional adapters and an
//! optional grafted input module.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;

pub use config::{ModelConfig, Profile};
pub use layers::{Ctx, TokenBatch};
pub use params::{CountMode, ParamGrads, ParamId, ParamInfo, ParamLayout, ParamTree};

use crate::adapters::{Adapter, AdapterConfig, AdapterPlacement};
use crate::data::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::freeze::{FreezePolicy, Pattern};
use crate::input_module::{InputModule, InputModuleConfig};
use crate::tensor::{Float, Mode, Tape, Var};
use layers::{causal_mask, AttnMask, DecoderLayer, EncoderLayer, LayerHyper, LayerNorm, INIT_STD};
use params::{AllocSink, Init, LayoutSink, ParamSink};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A structural change applied after the body was built. Recorded in order
/// so a checkpoint can replay the exact structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extension {
    Adapters {
        placement: AdapterPlacement,
        config: AdapterConfig,
    },
    InputModule {
        config: InputModuleConfig,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Body {
    embed_tokens: ParamId,
    output_projection: Option<ParamId>,
    encoder_positions: ParamId,
    encoder_embed_layer_norm: LayerNorm,
    encoder_layers: Vec<EncoderLayer>,
    decoder_positions: ParamId,
    decoder_embed_layer_norm: LayerNorm,
    decoder_layers: Vec<DecoderLayer>,
}

#[derive(Clone, Debug, PartialEq)]
struct Structure {
    body: Body,
    input_module: Option<InputModule>,
}

fn declare_body(sink: &mut dyn ParamSink, c: &ModelConfig) -> Result<Body> {
    c.validate()?;
    let d = c.d_model;
    let embed_tokens = sink.declare("embed_tokens/weight".into(), vec![c.vocab_size, d], Init::Normal(INIT_STD))?;
    let encoder_positions = sink.declare(
        "encoder/embed_positions/weight".into(),
        vec![c.max_positions, d],
        Init::Normal(INIT_STD),
    )?;
    let encoder_embed_layer_norm = LayerNorm::declare(sink, "encoder/embed_layer_norm", d)?;
    let encoder_layers = (0..c.n_enc_layers)
        .map(|i| EncoderLayer::declare(sink, &format!("encoder/layer{i}"), d, c.d_ffn, c.n_heads))
        .collect::<Result<Vec<_>>>()?;
    let decoder_positions = sink.declare(
        "decoder/embed_positions/weight".into(),
        vec![c.max_positions, d],
        Init::Normal(INIT_STD),
    )?;
    let decoder_embed_layer_norm = LayerNorm::declare(sink, "decoder/embed_layer_norm", d)?;
    let decoder_layers = (0..c.n_dec_layers)
        .map(|i| DecoderLayer::declare(sink, &format!("decoder/layer{i}"), d, c.d_ffn, c.n_heads))
        .collect::<Result<Vec<_>>>()?;
    let output_projection = if c.tie_embeddings {
        None
    } else {
        Some(sink.declare(
            "decoder/output_projection/weight".into(),
            vec![d, c.vocab_size],
            Init::Normal(INIT_STD),
        )?)
    };
    Ok(Body {
        embed_tokens,
        output_projection,
        encoder_positions,
        encoder_embed_layer_norm,
        encoder_layers,
        decoder_positions,
        decoder_embed_layer_norm,
        decoder_layers,
    })
}

impl Structure {
    fn extend(&mut self, sink: &mut dyn ParamSink, c: &ModelConfig, ext: &Extension) -> Result<()> {
        match ext {
            Extension::Adapters { placement, config } => {
                config.validate()?;
                let enc = self.body.encoder_layers.iter().filter(|_| placement.encoder());
                let dec = self.body.decoder_layers.iter().filter(|_| placement.decoder());
                let taken = enc
                    .map(|l| (&l.prefix, l.adapter.is_some()))
                    .chain(dec.map(|l| (&l.prefix, l.adapter.is_some())))
                    .find(|(_, has)| *has);
                if let Some((prefix, _)) = taken {
                    return Err(Error::State(format!("`{prefix}` already has an adapter")));
                }
                if placement.encoder() {
                    for l in &mut self.body.encoder_layers {
                        l.adapter = Some(Adapter::declare(sink, &l.prefix, c.d_model, config)?);
                    }
                }
                if placement.decoder() {
                    for l in &mut self.body.decoder_layers {
                        l.adapter = Some(Adapter::declare(sink, &l.prefix, c.d_model, config)?);
                    }
                }
            }
            Extension::InputModule { config } => {
                if self.input_module.is_some() {
                    return Err(Error::State("model already has a grafted input module".into()));
                }
                if config.d_out != c.d_model {
                    return Err(Error::dim(
                        "graft",
                        format!(
                            "input module emits width {} but the body expects {}",
                            config.d_out, c.d_model
                        ),
                    ));
                }
                self.input_module = Some(InputModule::declare(sink, config)?);
            }
        }
        Ok(())
    }
}

/// Shape-only parameter inventory of `config` plus `extensions`; allocates
/// no parameter storage, so it works for full-scale profiles.
pub fn describe(config: &ModelConfig, extensions: &[Extension]) -> Result<ParamLayout> {
    let mut sink = LayoutSink::new();
    let mut s = Structure {
        body: declare_body(&mut sink, config)?,
        input_module: None,
    };
    for e in extensions {
        s.extend(&mut sink, config, e)?;
    }
    Ok(sink.layout)
}

/// Source, shifted target input and target output of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub src: TokenBatch,
    pub tgt_in: TokenBatch,
    /// Flattened `[batch * tgt_len]` next-token targets, padded with the pad id.
    pub tgt_out: Vec<usize>,
    /// Non-pad target tokens.
    pub n_tokens: usize,
}

impl PairBatch {
    /// `pairs` hold full targets `[BOS, .., EOS]`.
    pub fn new(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for (_, t) in pairs {
            if t.len() < 2 || t[0] != BOS_ID || t[t.len() - 1] != EOS_ID {
                return Err(Error::Contract(
                    "targets must start with the begin marker and end with the end marker".into(),
                ));
            }
        }
        let src: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| s.clone()).collect();
        let tin: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| t[..t.len() - 1].to_vec()).collect();
        let tgt_in = TokenBatch::from_seqs(&tin)?;
        let mut tgt_out = vec![PAD_ID as usize; tgt_in.batch * tgt_in.len];
        for (b, (_, t)) in pairs.iter().enumerate() {
            for (i, &id) in t[1..].iter().enumerate() {
                tgt_out[b * tgt_in.len + i] = id as usize;
            }
        }
        let n_tokens = pairs.iter().map(|(_, t)| t.len() - 1).sum();
        Ok(PairBatch {
            src: TokenBatch::from_seqs(&src)?,
            tgt_in,
            tgt_out,
            n_tokens,
        })
    }
}

/// Encoder states of one source sentence, for step-wise decoding.
#[derive(Clone, Debug)]
pub struct EncodedSource<F> {
    pub values: Vec<F>,
    pub len: usize,
}

/// The trainable model. `F` is `f32` for training, `f64` for gradient checks.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel<F: Float = f32> {
    config: ModelConfig,
    params: ParamTree<F>,
    structure: Structure,
    extensions: Vec<Extension>,
    mode: Mode,
    seed: u64,
}

impl<F: Float> Seq2SeqModel<F> {
    /// Deterministic initialisation from `seed`; starts in training mode.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamTree::new();
        let body = declare_body(
            &mut AllocSink {
                tree: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            &config,
        )?;
        Ok(Seq2SeqModel {
            config,
            params,
            structure: Structure {
                body,
                input_module: None,
            },
            extensions: Vec::new(),
            mode: Mode::Train,
            seed,
        })
    }

    /// Rebuilds the structure of a saved model; parameter values are
    /// overwritten by the caller.
    pub(crate) fn rebuild(config: ModelConfig, extensions: &[Extension], seed: u64) -> Result<Self> {
        let mut m = Self::build(config, seed)?;
        for e in extensions {
            m.extend(e.clone())?;
        }
        Ok(m)
    }

    fn extend(&mut self, ext: Extension) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + self.extensions.len() as u64);
        let mut sink = AllocSink {
            tree: &mut self.params,
            rng,
        };
        let mut next = self.structure.clone();
        next.extend(&mut sink, &self.config, &ext)?;
        self.structure = next;
        self.extensions.push(ext);
        Ok(())
    }

    /// One adapter at the end of every selected layer; zero-initialised up
    /// projections leave the model function unchanged.
    pub fn insert_adapters(&mut self, placement: AdapterPlacement, config: AdapterConfig) -> Result<()> {
        self.extend(Extension::Adapters { placement, config })
    }

    /// Routes the encoder input through a new input module instead of the
    /// body's token embeddings.
    pub fn graft(&mut self, config: InputModuleConfig) -> Result<()> {
        self.extend(Extension::InputModule { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extensions(&self) -> &[Extension] {
        &self.extensions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seeds the initialisation of extensions added from now on.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn params(&self) -> &ParamTree<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree<F> {
        &mut self.params
    }

    pub fn input_module(&self) -> Option<&InputModule> {
        self.structure.input_module.as_ref()
    }

    pub fn is_grafted(&self) -> bool {
        self.structure.input_module.is_some()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layout(&self) -> ParamLayout {
        self.params.layout()
    }

    pub fn count_params(&self, selector: &Pattern, mode: CountMode) -> usize {
        self.layout().count(selector, mode)
    }

    /// Sets trainable flags; frozen tensors lose any gradient buffer.
    pub fn apply_policy(&mut self, policy: &FreezePolicy) {
        policy.apply(&mut self.params);
    }

    /// Fresh forward context; dropout masks are keyed by the model seed and `step`.
    pub fn ctx(&self, step: u64) -> Ctx<'_, F> {
        Ctx::new(&self.params, Tape::new(self.mode).with_rng(self.seed, step))
    }

    fn check_positions(&self, len: usize, side: &str) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Range(format!(
                "{side} length {len} exceeds {} positions",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize], vocab: usize, side: &str) -> Result<()> {
        match ids.iter().find(|&&i| i >= vocab) {
            Some(i) => Err(Error::Index(format!("{side} token {i} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    /// Body token embeddings, scaled by `sqrt(d)` when configured.
    pub fn token_embeddings(&self, ctx: &mut Ctx<F>, tokens: &TokenBatch) -> Result<Var> {
        self.check_ids(&tokens.ids, self.config.vocab_size, "body")?;
        let table = ctx.param(self.structure.body.embed_tokens);
        let x = ctx.tape.embedding(table, &tokens.ids)?;
        if self.config.scale_embeddings {
            ctx.tape.scale(x, (self.config.d_model as f64).sqrt())
        } else {
            Ok(x)
        }
    }

    /// What the encoder consumes in place of token embeddings: the input
    /// module output when grafted, the body's own embeddings otherwise.
    pub fn source_embeddings(&self, ctx: &mut Ctx<F>, src: &TokenBatch) -> Result<Var> {
        match &self.structure.input_module {
            Some(im) => {
                self.check_ids(&src.ids, im.config.src_vocab_size, "source")?;
                im.forward(ctx, src)
            }
            None => self.token_embeddings(ctx, src),
        }
    }

    fn hyper(&self) -> LayerHyper {
        LayerHyper {
            dropout: self.config.dropout,
            attention_dropout: self.config.attention_dropout,
            eps: self.config.layer_norm_eps,
        }
    }

    fn add_positions(&self, ctx: &mut Ctx<F>, x: Var, table: ParamId, batch: usize, len: usize) -> Result<Var> {
        let table = ctx.param(table);
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = ctx.tape.embedding(table, &ids)?;
        ctx.tape.add(x, pos)
    }

    /// Encoder over already embedded inputs `x: [batch * len, d]`.
    pub fn encode_embedded(&self, ctx: &mut Ctx<F>, x: Var, src: &TokenBatch) -> Result<Var> {
        self.check_positions(src.len, "source")?;
        let b = &self.structure.body;
        let (n, t) = (src.batch, src.len);
        let mut x = self.add_positions(ctx, x, b.encoder_positions, n, t)?;
        x = b.encoder_embed_layer_norm.forward(ctx, x, self.config.layer_norm_eps)?;
        x = ctx.tape.dropout(x, self.config.dropout)?;
        let mask = if src.lengths.iter().all(|&l| l == t) {
            AttnMask::None
        } else {
            AttnMask::PerExample(ctx.tape.constant(vec![n, t, t], src.key_padding_mask(t))?)
        };
        for layer in &b.encoder_layers {
            x = layer.forward(ctx, x, n, t, &mask, self.hyper())?;
        }
        Ok(x)
    }

    pub fn encode(&self, ctx: &mut Ctx<F>, src: &TokenBatch) -> Result<Var> {
        let x = self.source_embeddings(ctx, src)?;
        self.encode_embedded(ctx, x, src)
    }

    /// Teacher-forced decoder; returns logits `[batch * tgt_len, vocab]`.
    pub fn decode(&self, ctx: &mut Ctx<F>, memory: Var, src: &TokenBatch, tgt_in: &TokenBatch) -> Result<Var> {
        self.check_positions(tgt_in.len, "target")?;
        let b = &self.structure.body;
        let (n, t) = (tgt_in.batch, tgt_in.len);
        let mut y = self.token_embeddings(ctx, tgt_in)?;
        y = self.add_positions(ctx, y, b.decoder_positions, n, t)?;
        y = b.decoder_embed_layer_norm.forward(ctx, y, self.config.layer_norm_eps)?;
        y = ctx.tape.dropout(y, self.config.dropout)?;
        let self_mask = AttnMask::Shared(ctx.tape.constant(vec![t, t], causal_mask(t))?);
        let cross_mask = if src.lengths.iter().all(|&l| l == src.len) {
            AttnMask::None
        } else {
            AttnMask::PerExample(ctx.tape.constant(vec![n, t, src.len], src.key_padding_mask(t))?)
        };
        for layer in &b.decoder_layers {
            y = layer.forward(ctx, y, memory, n, t, src.len, &self_mask, &cross_mask, self.hyper())?;
        }
        match b.output_projection {
            Some(w) => {
                let w = ctx.param(w);
                ctx.tape.matmul(y, w)
            }
            None => {
                let e = ctx.param(b.embed_tokens);
                ctx.tape.matmul_nt(y, e)
            }
        }
    }

    /// Label-smoothed token cross-entropy of a batch, divided by
    /// `normalizer` (defaults to the batch's own token count).
    pub fn loss(&self, ctx: &mut Ctx<F>, batch: &PairBatch, label_smoothing: f64, normalizer: Option<f64>) -> Result<Var> {
        let memory = self.encode(ctx, &batch.src)?;
        let logits = self.decode(ctx, memory, &batch.src, &batch.tgt_in)?;
        ctx.tape
            .cross_entropy(logits, &batch.tgt_out, label_smoothing, Some(PAD_ID as usize), normalizer)
    }

    /// Forward and backward on one batch: `(loss, gradients)`.
    pub fn forward_train(
        &self,
        batch: &PairBatch,
        label_smoothing: f64,
        normalizer: Option<f64>,
        step: u64,
    ) -> Result<(f64, ParamGrads<F>)> {
        let mut ctx = self.ctx(step);
        let loss = self.loss(&mut ctx, batch, label_smoothing, normalizer)?;
        let value = ctx.tape.value(loss)[0].as_f64();
        Ok((value, ctx.backward(loss)?))
    }

    /// Logits `[batch * tgt_len, vocab]` in the current mode.
    pub fn logits(&self, batch: &PairBatch) -> Result<Vec<F>> {
        let mut ctx = self.ctx(0);
        let memory = self.encode(&mut ctx, &batch.src)?;
        let logits = self.decode(&mut ctx, memory, &batch.src, &batch.tgt_in)?;
        Ok(ctx.tape.value(logits).to_vec())
    }

    /// Summed negative log-likelihood (no smoothing) and token count per sentence.
    pub fn sentence_nll(&self, batch: &PairBatch) -> Result<Vec<(f64, usize)>> {
        let logits = self.logits(batch)?;
        let v = self.config.vocab_size;
        let t = batch.tgt_in.len;
        let mut out = vec![(0.0, 0); batch.tgt_in.batch];
        for (r, &target) in batch.tgt_out.iter().enumerate() {
            if target == PAD_ID as usize {
                continue;
            }
            let row = &logits[r * v..(r + 1) * v];
            let lp = log_softmax_at(row, target);
            let s = &mut out[r / t];
            s.0 -= lp;
            s.1 += 1;
        }
        Ok(out)
    }

    /// Encoder states of one sentence, computed in the current mode.
    pub fn encode_sentence(&self, src: &[u32]) -> Result<EncodedSource<F>> {
        let batch = TokenBatch::from_seqs(&[src.to_vec()])?;
        let mut ctx = self.ctx(0);
        let memory = self.encode(&mut ctx, &batch)?;
        Ok(EncodedSource {
            values: ctx.tape.value(memory).to_vec(),
            len: batch.len,
        })
    }

    /// Next-token log-probabilities after each prefix, all conditioned on `enc`.
    pub fn next_token_logprobs(&self, enc: &EncodedSource<F>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let tgt = TokenBatch::from_seqs(prefixes)?;
        let k = prefixes.len();
        let d = self.config.d_model;
        let mut ctx = self.ctx(0);
        let memory: Vec<F> = (0..k).flat_map(|_| enc.values.iter().copied()).collect();
        let memory = ctx.tape.constant(vec![k * enc.len, d], memory)?;
        let src = TokenBatch {
            ids: vec![0; k * enc.len],
            batch: k,
            len: enc.len,
            lengths: vec![enc.len; k],
        };
        let logits = self.decode(&mut ctx, memory, &src, &tgt)?;
        let values = ctx.tape.value(logits);
        let v = self.config.vocab_size;
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let r = b * tgt.len + p.len() - 1;
                log_softmax(&values[r * v..(r + 1) * v])
            })
            .collect())
    }
}

fn log_softmax<F: Float>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

fn log_softmax_at<F: Float>(row: &[F], i: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row[i].as_f64() - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 64,
            max_positions: 32,
            ..ModelConfig::toy(40)
        }
    }

    fn batch() -> PairBatch {
        PairBatch::new(&[
            (vec![7, 8, 9, 10], vec![1, 11, 12, 2]),
            (vec![13, 14], vec![1, 15, 16, 17, 2]),
        ])
        .unwrap()
    }

    #[test]
    fn layout_matches_allocation() {
        let mut m = Seq2SeqModel::<f32>::build(tiny(), 1).unwrap();
        m.insert_adapters(AdapterPlacement::Both, AdapterConfig::toy(AdapterKind::Glu)).unwrap();
        m.graft(InputModuleConfig::toy(16, 30)).unwrap();
        assert_eq!(describe(m.config(), m.extensions()).unwrap(), m.layout());
    }

    #[test]
    fn pair_batch_shifts_targets() {
        let b = batch();
        assert_eq!(b.tgt_in.len, 4);
        assert_eq!(b.tgt_in.ids[..4], [1, 11, 12, 0]);
        assert_eq!(b.tgt_out[..4], [11, 12, 2, 0]);
        assert_eq!(b.tgt_out[4..], [15, 16, 17, 2]);
        assert_eq!(b.n_tokens, 7);
        assert!(PairBatch::new(&[]).is_err());
        assert!(PairBatch::new(&[(vec![5], vec![5, 2])]).is_err());
    }

    #[test]
    fn build_is_deterministic_and_loss_finite() {
        let a = Seq2SeqModel::<f32>::build(tiny(), 3).unwrap();
        let b = Seq2SeqModel::<f32>::build(tiny(), 3).unwrap();
        let (la, _) = a.forward_train(&batch(), 0.1, None, 1).unwrap();
        let (lb, _) = b.forward_train(&batch(), 0.1, None, 1).unwrap();
        assert!(la.is_finite());
        assert_eq!(la, lb);
    }

    #[test]
    fn errors_for_bad_inputs() {
        let mut m = Seq2SeqModel::<f32>::build(tiny(), 0).unwrap();
        let long = PairBatch::new(&[(vec![5; 40], vec![1, 5, 2])]).unwrap();
        assert!(matches!(m.logits(&long), Err(Error::Range(_))));
        let oov = PairBatch::new(&[(vec![99], vec![1, 5, 2])]).unwrap();
        assert!(matches!(m.logits(&oov), Err(Error::Index(_))));
        let c = AdapterConfig::toy(AdapterKind::Plain);
        m.insert_adapters(AdapterPlacement::Decoder, c.clone()).unwrap();
        let before = m.layout();
        assert!(matches!(
            m.insert_adapters(AdapterPlacement::Both, c),
            Err(Error::State(_))
        ));
        assert_eq!(m.layout(), before);
        assert!(matches!(
            m.graft(InputModuleConfig::toy(32, 30)),
            Err(Error::Dimension { .. })
        ));
        let bad = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(matches!(Seq2SeqModel::<f32>::build(bad, 0), Err(Error::Config(_))));
    }
}

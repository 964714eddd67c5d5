//! Bottleneck adapters slotted in at the end of transformer layers.
//!
//! Plain:  `z = gelu(W_d h)`,                    `h_out = tanh(W_u z) + h`
//! GLU:    `z = 2 sigmoid(W_g h) * gelu(W_d h)`, `h_out = tanh(W_u z) + h`
//!
//! `W_u` starts at zero, so a freshly inserted adapter is the identity map
//! and `|h_out - h| <= 1` holds coordinate-wise for any weights.

use crate::error::{Error, Result};
use crate::model::layers::{Ctx, INIT_STD};
use crate::model::params::{Init, ParamId, ParamSink};
use crate::tensor::{Float, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Plain,
    Glu,
}

/// Which layer stacks receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterPlacement {
    Encoder,
    Decoder,
    Both,
}

impl AdapterPlacement {
    pub fn encoder(self) -> bool {
        matches!(self, AdapterPlacement::Encoder | AdapterPlacement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, AdapterPlacement::Decoder | AdapterPlacement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub d_hidden: usize,
    pub dropout: f64,
}

/// `round(2/3 * plain_hidden)`, ties to even: 128 -> 85, 16 -> 11.
pub fn glu_hidden(plain_hidden: usize) -> usize {
    let x = 2.0 * plain_hidden as f64 / 3.0;
    x.round_ties_even() as usize
}

impl AdapterConfig {
    /// Bottleneck 128 (plain) or 85 (GLU), dropout 0.1.
    pub fn large(kind: AdapterKind) -> Self {
        Self::with_plain_hidden(kind, 128)
    }

    /// Bottleneck 16 (plain) or 11 (GLU), dropout 0.1.
    pub fn toy(kind: AdapterKind) -> Self {
        Self::with_plain_hidden(kind, 16)
    }

    fn with_plain_hidden(kind: AdapterKind, plain: usize) -> Self {
        let d_hidden = match kind {
            AdapterKind::Plain => plain,
            AdapterKind::Glu => glu_hidden(plain),
        };
        AdapterConfig {
            kind,
            d_hidden,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 {
            return Err(Error::Config("adapter d_hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub kind: AdapterKind,
    /// `W_d: [d_model, d_hidden]`
    pub down: ParamId,
    /// `W_u: [d_hidden, d_model]`, zero at insertion
    pub up: ParamId,
    /// `W_g: [d_model, d_hidden]`, GLU only
    pub gate: Option<ParamId>,
    pub dropout: f64,
}

impl Adapter {
    pub(crate) fn declare(
        sink: &mut dyn ParamSink,
        layer_prefix: &str,
        d_model: usize,
        config: &AdapterConfig,
    ) -> Result<Self> {
        config.validate()?;
        let p = format!("{layer_prefix}/adapter");
        let h = config.d_hidden;
        let down = sink.declare(format!("{p}/down/weight"), vec![d_model, h], Init::Normal(INIT_STD))?;
        let gate = match config.kind {
            AdapterKind::Glu => Some(sink.declare(
                format!("{p}/gate/weight"),
                vec![d_model, h],
                Init::Normal(INIT_STD),
            )?),
            AdapterKind::Plain => None,
        };
        let up = sink.declare(format!("{p}/up/weight"), vec![h, d_model], Init::Zeros)?;
        Ok(Adapter {
            kind: config.kind,
            down,
            up,
            gate,
            dropout: config.dropout,
        })
    }

    /// `h: [tokens, d_model]`.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, h: Var) -> Result<Var> {
        let w_d = ctx.param(self.down);
        let a = ctx.tape.matmul(h, w_d)?;
        let mut z = ctx.tape.gelu(a)?;
        if let Some(gate) = self.gate {
            let w_g = ctx.param(gate);
            let g = ctx.tape.matmul(h, w_g)?;
            let g = ctx.tape.sigmoid(g)?;
            let g = ctx.tape.scale(g, 2.0)?;
            z = ctx.tape.mul(g, z)?;
        }
        let z = ctx.tape.dropout(z, self.dropout)?;
        let w_u = ctx.param(self.up);
        let u = ctx.tape.matmul(z, w_u)?;
        let u = ctx.tape.tanh(u)?;
        ctx.tape.add(u, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{AllocSink, ParamTree};
    use crate::tensor::{Mode, Tape, Tensor};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: AdapterKind, d: usize, h: usize) -> (ParamTree<f64>, Adapter) {
        let mut tree = ParamTree::new();
        let config = AdapterConfig {
            kind,
            d_hidden: h,
            dropout: 0.1,
        };
        let mut sink = AllocSink {
            tree: &mut tree,
            rng: ChaCha8Rng::seed_from_u64(3),
        };
        let a = Adapter::declare(&mut sink, "layer0", d, &config).unwrap();
        (tree, a)
    }

    fn run(tree: &ParamTree<f64>, a: &Adapter, h: &[f64], d: usize, mode: Mode) -> Vec<f64> {
        let mut ctx = Ctx::new(tree, Tape::new(mode).with_rng(1, 1));
        let x = ctx
            .tape
            .leaf(&Tensor::new(vec![h.len() / d, d], h.to_vec()).unwrap());
        let y = a.forward(&mut ctx, x).unwrap();
        ctx.tape.value(y).to_vec()
    }

    #[test]
    fn hidden_sizes() {
        assert_eq!(AdapterConfig::large(AdapterKind::Plain).d_hidden, 128);
        assert_eq!(AdapterConfig::large(AdapterKind::Glu).d_hidden, 85);
        assert_eq!(AdapterConfig::toy(AdapterKind::Plain).d_hidden, 16);
        assert_eq!(AdapterConfig::toy(AdapterKind::Glu).d_hidden, 11);
        assert_eq!(glu_hidden(3), 2);
    }

    #[test]
    fn identity_at_init_even_in_training() {
        for kind in [AdapterKind::Plain, AdapterKind::Glu] {
            let (tree, a) = setup(kind, 8, 4);
            let h: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
            assert_eq!(run(&tree, &a, &h, 8, Mode::Eval), h);
            assert_eq!(run(&tree, &a, &h, 8, Mode::Train), h);
        }
    }

    #[test]
    fn scalar_hand_case() {
        let (mut tree, a) = setup(AdapterKind::Plain, 1, 1);
        tree.get_mut(a.down).data_mut()[0] = 1.0;
        tree.get_mut(a.up).data_mut()[0] = 1.0;
        let out = run(&tree, &a, &[1.0], 1, Mode::Eval);
        // tanh(0.841_344_746) + 1, evaluated independently in f64.
        assert_abs_diff_eq!(out[0], 1.686_520_672, epsilon = 1e-9);
    }

    #[test]
    fn gate_is_one_at_zero_preactivation() {
        let (mut plain_tree, plain) = setup(AdapterKind::Plain, 2, 2);
        let (mut glu_tree, glu) = setup(AdapterKind::Glu, 2, 2);
        let w_d = [0.3, -0.2, 0.5, 0.7];
        let w_u = [1.0, -0.4, 0.2, 0.9];
        for (tree, a) in [(&mut plain_tree, &plain), (&mut glu_tree, &glu)] {
            tree.get_mut(a.down).data_mut().copy_from_slice(&w_d);
            tree.get_mut(a.up).data_mut().copy_from_slice(&w_u);
        }
        glu_tree.get_mut(glu.gate.unwrap()).data_mut().fill(0.0);
        let h = [0.8, -1.1, 2.0, 0.4];
        assert_eq!(
            run(&plain_tree, &plain, &h, 2, Mode::Eval),
            run(&glu_tree, &glu, &h, 2, Mode::Eval)
        );
    }

    #[test]
    fn double_declaration_is_rejected() {
        let mut tree = ParamTree::<f32>::new();
        let mut sink = AllocSink {
            tree: &mut tree,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let c = AdapterConfig::toy(AdapterKind::Plain);
        Adapter::declare(&mut sink, "x", 4, &c).unwrap();
        assert!(Adapter::declare(&mut sink, "x", 4, &c).is_err());
    }
}

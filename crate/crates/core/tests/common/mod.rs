//! Finite-difference helpers shared by integration tests.
#![allow(dead_code)]

use graftmt::adapters::{AdapterConfig, AdapterKind, AdapterPlacement};
use graftmt::input_module::InputModuleConfig;
use graftmt::model::{ModelConfig, PairBatch, Seq2SeqModel};
use graftmt::tensor::{Mode, Tape, Tensor, Var};
use graftmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .unwrap()
        .with_requires_grad(true)
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Scalar objective: `sum(out * weights)` with fixed weights, so every
/// output element contributes a distinct amount.
pub fn objective(build: &Build, inputs: &[Tensor<f64>], mode: Mode) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new(mode).with_rng(7, 3);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 17) as f64 - 8.0) / 8.0).collect();
        let w = tape.constant(shape, w).unwrap();
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };
    let value = tape.value(loss)[0];
    let mut grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.take(v).unwrap_or_default()).collect();
    (value, g)
}

/// Checks every coordinate of every input that requires a gradient; returns the worst relative error.
pub fn check(name: &str, inputs: Vec<Tensor<f64>>, mode: Mode, build: &Build) -> f64 {
    let (_, analytic) = objective(build, &inputs, mode);
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (objective(build, &plus, mode).0 - objective(build, &minus, mode).0) / (2.0 * H);
            let e = rel_err(analytic[k][i], numeric);
            worst = worst.max(e);
            assert!(
                e < TOL,
                "{name}: input {k} index {i}: analytic {} vs numeric {numeric} (rel {e:.2e})",
                analytic[k][i]
            );
        }
    }
    worst
}


pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub mode: Mode,
    pub build: Box<Build>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        mode: Mode::Eval,
        build: Box::new(build),
    }
}

/// One case per differentiable primitive, with random inputs.
pub fn primitive_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut cases = vec![
        case("matmul", vec![random(&[3, 4], &mut r, 1.0), random(&[4, 5], &mut r, 1.0)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", vec![random(&[2, 3, 4], &mut r, 1.0), random(&[2, 4, 2], &mut r, 1.0)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("matmul_nt", vec![random(&[2, 3, 4], &mut r, 1.0), random(&[2, 5, 4], &mut r, 1.0)], |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        case("add", vec![random(&[3, 4], &mut r, 1.0), random(&[3, 4], &mut r, 1.0)], |t, v| t.add(v[0], v[1])),
        case("mul", vec![random(&[3, 4], &mut r, 1.0), random(&[3, 4], &mut r, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("scale", vec![random(&[5], &mut r, 1.0)], |t, v| t.scale(v[0], -2.5)),
        case("add_bias", vec![random(&[3, 4], &mut r, 1.0), random(&[4], &mut r, 1.0)], |t, v| t.add_bias(v[0], v[1])),
        case("add_broadcast", vec![random(&[2, 3, 4], &mut r, 1.0), random(&[3, 4], &mut r, 1.0)], |t, v| {
            t.add_broadcast(v[0], v[1], 12, 2)
        }),
        case("sum", vec![random(&[2, 3], &mut r, 1.0)], |t, v| t.sum(v[0])),
        case("gelu", vec![random(&[12], &mut r, 3.0)], |t, v| t.gelu(v[0])),
        case("tanh", vec![random(&[12], &mut r, 3.0)], |t, v| t.tanh(v[0])),
        case("sigmoid", vec![random(&[12], &mut r, 3.0)], |t, v| t.sigmoid(v[0])),
        case("softmax", vec![random(&[3, 5], &mut r, 2.0)], |t, v| t.softmax_lastdim(v[0])),
        case(
            "layer_norm",
            vec![random(&[3, 6], &mut r, 2.0), random(&[6], &mut r, 1.5), random(&[6], &mut r, 1.0)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("embedding", vec![random(&[5, 3], &mut r, 1.0)], |t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        case("split_heads", vec![random(&[6, 4], &mut r, 1.0)], |t, v| t.split_heads(v[0], 2, 3, 2)),
        case("merge_heads", vec![random(&[4, 3, 2], &mut r, 1.0)], |t, v| t.merge_heads(v[0], 2, 2)),
        case("reshape", vec![random(&[2, 6], &mut r, 1.0)], |t, v| t.reshape(v[0], vec![3, 4])),
        case("cross_entropy", vec![random(&[4, 6], &mut r, 2.0)], |t, v| {
            t.cross_entropy(v[0], &[3, 0, 5, 1], 0.1, Some(0), None)
        }),
        case("cross_entropy_normalized", vec![random(&[3, 5], &mut r, 2.0)], |t, v| {
            t.cross_entropy(v[0], &[1, 2, 4], 0.0, None, Some(7.0))
        }),
    ];
    let mut dropout = case("dropout", vec![random(&[4, 6], &mut r, 1.0)], |t, v| t.dropout(v[0], 0.3));
    dropout.mode = Mode::Train;
    cases.push(dropout);
    cases
}

pub fn grafted_model(kind: AdapterKind, placement: AdapterPlacement) -> Seq2SeqModel<f64> {
    let config = ModelConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_positions: 16,
        dropout: 0.1,
        attention_dropout: 0.1,
        ..ModelConfig::toy(12)
    };
    let mut m = Seq2SeqModel::<f64>::build(config, 5).unwrap();
    m.insert_adapters(
        placement,
        AdapterConfig {
            kind,
            d_hidden: 4,
            dropout: 0.1,
        },
    )
    .unwrap();
    m.graft(InputModuleConfig {
        d_ffn: 16,
        max_positions: 16,
        ..InputModuleConfig::toy(8, 9)
    })
    .unwrap();
    // Zero-initialised up-projections would hide the adapter's inner gradients.
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for (_, path, t) in m.params_mut().iter_mut() {
        if path.ends_with("up/weight") {
            for x in t.data_mut() {
                *x = r.random_range(-0.3..0.3);
            }
        }
    }
    m.set_mode(Mode::Train);
    m
}

/// Checks `n` random parameter coordinates of a grafted model; returns the worst relative error.
pub fn model_check(kind: AdapterKind, placement: AdapterPlacement, n: usize) -> f64 {
    let mut m = grafted_model(kind, placement);
    let batch = PairBatch::new(&[(vec![5, 6, 7, 2], vec![1, 8, 9, 2]), (vec![8, 2], vec![1, 10, 11, 5, 2])]).unwrap();
    let (_, grads) = m.forward_train(&batch, 0.1, None, 4).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = m.params().iter().map(|(id, _, _)| id).collect();
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < n {
        let id = ids[r.random_range(0..ids.len())];
        let n = m.params().get(id).numel();
        let i = r.random_range(0..n);
        let analytic = grads.0.iter().find(|(g, _)| *g == id).map(|(_, g)| g[i]).unwrap();
        let orig = m.params().get(id).data()[i];
        m.params_mut().get_mut(id).data_mut()[i] = orig + H;
        let plus = m.forward_train(&batch, 0.1, None, 4).unwrap().0;
        m.params_mut().get_mut(id).data_mut()[i] = orig - H;
        let minus = m.forward_train(&batch, 0.1, None, 4).unwrap().0;
        m.params_mut().get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        assert!(
            e < TOL,
            "{}[{i}]: analytic {analytic} vs numeric {numeric} (rel {e:.2e})",
            m.params().path(id)
        );
        checked += 1;
    }
    worst
}


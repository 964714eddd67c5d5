//! Training, decoding and scheduling behaviour on small synthetic tasks.

use graftmt::data::{CipherKind, Reorder, SyntheticLangSpec};
use graftmt::model::{ModelConfig, Seq2SeqModel};
use graftmt::optim::Schedule;
use graftmt::pipeline::{fresh_body, Corpora, DataSizes, RunConfig};
use graftmt::tensor::Mode;
use graftmt::train::{
    beam_search, finetune_bilingual, greedy, max_decode_len, pretrain_denoise, round_robin, source_ids, translate,
    BilingualData, MetricsLog, ModelScorer, Selection, TrainPlan,
};
use graftmt::Error;
use std::collections::BTreeMap;

fn small_model(mut c: RunConfig) -> RunConfig {
    c.model = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        ..c.model
    };
    c
}

fn sizes(n_mono: usize, n_train: usize) -> DataSizes {
    DataSizes {
        n_mono,
        n_mono_valid: 40,
        n_train,
        n_valid: 40,
        n_test: 20,
    }
}

fn copy_config() -> RunConfig {
    let spec = SyntheticLangSpec {
        cipher: CipherKind::Identity,
        reorder: Reorder::None,
        ..SyntheticLangSpec::toy(7)
    };
    let mut c = RunConfig {
        pairs: BTreeMap::from([("copy-en".to_string(), spec)]),
        multilingual_body: true,
        input_module: None,
        data: DataSizes {
            n_test: 50,
            ..sizes(100, 3000)
        },
        ..RunConfig::default()
    };
    // Unscaled token embeddings leave the position signal strong enough to
    // copy repeated words; a larger batch without smoothing converges in time.
    c.model.scale_embeddings = false;
    c.finetune = TrainPlan {
        max_steps: 500,
        schedule: Schedule::inverse_sqrt(200, 3e-3),
        label_smoothing: 0.0,
        batch_tokens: 1024,
        ..TrainPlan::toy("finetune-all")
    };
    c
}

#[test]
fn copy_language_is_learned_within_500_steps() {
    let cfg = copy_config();
    let corp = Corpora::new(&cfg).unwrap();
    let data = corp.bilingual("copy-en", false).unwrap();
    assert!(data.train.iter().all(|(s, t)| s == t));
    let mut model = fresh_body(&corp, &cfg, 0).unwrap();
    let (summary, result) =
        finetune_bilingual(&mut model, &data, &cfg.finetune, None, &mut MetricsLog::in_memory()).unwrap();
    assert!(summary.best_valid_nll < summary.initial_valid_nll);
    assert!(result.bleu >= 99.0, "copy BLEU {}", result.bleu);
    assert!(result.exact_match >= 0.9, "exact match {}", result.exact_match);
}

fn pretrain_setup() -> (RunConfig, Vec<Vec<u32>>, Vec<Vec<u32>>, Seq2SeqModel<f32>) {
    let mut cfg = small_model(RunConfig::default());
    cfg.data = sizes(1000, 10);
    cfg.pretrain = TrainPlan {
        max_steps: 60,
        eval_interval: 20,
        schedule: Schedule::inverse_sqrt(20, 3e-3),
        batch_tokens: 256,
        ..cfg.pretrain
    };
    let corp = Corpora::new(&cfg).unwrap();
    let (mono, valid) = corp.monolingual().unwrap();
    let body = fresh_body(&corp, &cfg, 2).unwrap();
    (cfg, mono, valid, body)
}

#[test]
fn denoising_lowers_validation_nll() {
    let (cfg, mono, valid, mut body) = pretrain_setup();
    let (s, adam) = pretrain_denoise(&mut body, &mono, &valid, &cfg.noise, &cfg.pretrain, None, &mut MetricsLog::in_memory()).unwrap();
    assert_eq!(adam.step_count(), 60);
    assert_eq!(s.valid_curve.len(), 4);
    assert!(s.best_valid_nll < s.initial_valid_nll);
    assert!(s.valid_curve.last().unwrap().1 < s.valid_curve[0].1);
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let (cfg, mono, valid, body) = pretrain_setup();
    let mut plan = cfg.pretrain.clone();
    plan.max_steps = 40;
    plan.selection = Selection::FixedStep;
    let mut straight = body.clone();
    let mut log_a = MetricsLog::in_memory();
    pretrain_denoise(&mut straight, &mono, &valid, &cfg.noise, &plan, None, &mut log_a).unwrap();

    let mut resumed = body;
    let mut log_b = MetricsLog::in_memory();
    let mut half = plan.clone();
    half.max_steps = 20;
    let (_, adam) = pretrain_denoise(&mut resumed, &mono, &valid, &cfg.noise, &half, None, &mut log_b).unwrap();
    let (s, adam) = pretrain_denoise(&mut resumed, &mono, &valid, &cfg.noise, &plan, Some(adam), &mut log_b).unwrap();
    assert_eq!(s.start_step, 20);
    assert_eq!(adam.step_count(), 40);
    for ((_, path, a), (_, _, b)) in straight.params().iter().zip(resumed.params().iter()) {
        assert_eq!(a.data(), b.data(), "{path} differs after resume");
    }
    let last = |log: &MetricsLog| log.records().last().unwrap().nll;
    assert_eq!(last(&log_a), last(&log_b));
}

#[test]
fn divergence_aborts_training() {
    let (cfg, mono, valid, mut body) = pretrain_setup();
    let plan = TrainPlan {
        schedule: Schedule::constant(50.0),
        adam: graftmt::optim::AdamConfig {
            clip_norm: None,
            ..cfg.pretrain.adam.clone()
        },
        max_steps: 200,
        eval_interval: 5,
        ..cfg.pretrain.clone()
    };
    let err = pretrain_denoise(&mut body, &mono, &valid, &cfg.noise, &plan, None, &mut MetricsLog::in_memory()).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

fn multilingual() -> (RunConfig, BTreeMap<String, BilingualData>, Corpora) {
    let mut cfg = small_model(RunConfig::multilingual_toy());
    cfg.data = sizes(100, 400);
    let corp = Corpora::new(&cfg).unwrap();
    let pairs = cfg
        .pairs
        .keys()
        .map(|p| (p.clone(), corp.bilingual(p, false).unwrap()))
        .collect();
    (cfg, pairs, corp)
}

#[test]
fn round_robin_takes_one_batch_per_pair_and_lowers_every_pair_loss() {
    let (cfg, pairs, corp) = multilingual();
    let mut model = fresh_body(&corp, &cfg, 1).unwrap();
    let plan = TrainPlan {
        max_steps: 60,
        eval_interval: 20,
        batch_tokens: 256,
        beam: 1,
        max_test_sentences: Some(5),
        ..cfg.finetune.clone()
    };
    let (s, per_pair) = round_robin(&mut model, &pairs, &plan, None, &mut MetricsLog::in_memory()).unwrap();
    assert_eq!((s.passes, s.updates), (180, 60));
    assert_eq!(s.selected_step, 60);
    assert_eq!(per_pair.keys().collect::<Vec<_>>(), pairs.keys().collect::<Vec<_>>());
    assert_eq!(s.train_curves.len(), 3);
    for (pair, curve) in &s.train_curves {
        assert_eq!(curve.len(), 3, "{pair}");
        assert!(curve.last().unwrap().1 < curve[0].1, "{pair}: {curve:?}");
    }
}

#[test]
fn round_robin_needs_two_pairs() {
    let (cfg, mut pairs, corp) = multilingual();
    pairs.retain(|k, _| k == "l1-en");
    let mut model = fresh_body(&corp, &cfg, 1).unwrap();
    let err = round_robin(&mut model, &pairs, &cfg.finetune, None, &mut MetricsLog::in_memory()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn bart_frozen_without_a_graft_is_a_config_error() {
    let (cfg, pairs, corp) = multilingual();
    let mut model = fresh_body(&corp, &cfg, 1).unwrap();
    let plan = TrainPlan::toy("bart-frozen");
    let err = finetune_bilingual(&mut model, &pairs["l1-en"], &plan, None, &mut MetricsLog::in_memory()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn beam_never_scores_below_greedy_and_decoding_is_deterministic() {
    let (cfg, pairs, corp) = multilingual();
    let data = &pairs["l1-en"];
    let mut model = fresh_body(&corp, &cfg, 4).unwrap();
    let plan = TrainPlan {
        max_steps: 80,
        batch_tokens: 256,
        beam: 1,
        max_test_sentences: Some(2),
        ..cfg.finetune.clone()
    };
    finetune_bilingual(&mut model, data, &plan, None, &mut MetricsLog::in_memory()).unwrap();
    model.set_mode(Mode::Eval);
    let cap = model.config().max_positions;
    for (src, _) in data.test.iter().take(10) {
        let src = source_ids(src);
        let max_len = max_decode_len(src.len(), cap);
        let scorer = ModelScorer::new(&model, &src).unwrap();
        let g = greedy(&scorer, max_len).unwrap();
        let b = beam_search(&scorer, 5, max_len).unwrap();
        assert!(b.best.score() >= g.best.score(), "beam {} < greedy {}", b.best.score(), g.best.score());
        let b1 = beam_search(&scorer, 1, max_len).unwrap();
        assert_eq!(b1.best.tokens, g.best.tokens);
        let again = translate(&model, &src, 5, max_len).unwrap();
        assert_eq!(again.best.tokens, translate(&model, &src, 5, max_len).unwrap().best.tokens);
    }
}

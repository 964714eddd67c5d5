use super::batch::{example, source_ids, token_batches, BatchStream};
use super::beam::{translate, Decoded};
use super::bleu::bleu_corpus;
use super::metrics::{MetricRecord, MetricsLog};
use crate::adapters::AdapterConfig;
use crate::data::{noise_document, NoiseSpec};
use crate::error::{Error, Result};
use crate::freeze::FreezePolicy;
use crate::input_module::InputModuleConfig;
use crate::model::{PairBatch, Seq2SeqModel};
use crate::optim::{accumulate_cycle, Adam, AdamConfig, Schedule};
use crate::tensor::{Float, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Word-id sentence pairs without markers.
pub type Pairs = Vec<(Vec<u32>, Vec<u32>)>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BilingualData {
    pub train: Pairs,
    pub valid: Pairs,
    pub test: Pairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Keep the parameters with the lowest validation NLL seen at an eval point.
    BestValid,
    /// Keep the parameters after the last step.
    FixedStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    /// Recipe name or policy file path.
    pub recipe: String,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub max_steps: u64,
    /// Padded-token budget of one batch.
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub selection: Selection,
    pub eval_interval: u64,
    pub seed: u64,
    pub beam: usize,
    /// Decode at most this many test sentences.
    pub max_test_sentences: Option<usize>,
}

impl TrainPlan {
    pub fn toy(recipe: &str) -> Self {
        TrainPlan {
            recipe: recipe.into(),
            schedule: Schedule::inverse_sqrt(100, 2e-3),
            adam: AdamConfig {
                beta2: 0.98,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            max_steps: 600,
            batch_tokens: 512,
            label_smoothing: 0.1,
            selection: Selection::BestValid,
            eval_interval: 100,
            seed: 0,
            beam: 5,
            max_test_sentences: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 || self.batch_tokens == 0 || self.beam == 0 {
            return Err(Error::Config("eval_interval, batch_tokens and beam must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} not in [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Corpus BLEU, 0-100.
    pub bleu: f64,
    pub exact_match: f64,
    /// Mean per-token NLL of the validation set at the selected step.
    pub valid_nll: Option<f64>,
    /// Bootstrap comparison against another system, when one was run.
    pub p_value: Option<f64>,
    pub n: usize,
    /// Hypotheses that hit the length limit without an end marker.
    pub truncated: usize,
    #[serde(skip)]
    pub hypotheses: Vec<Vec<u32>>,
}

/// What a training loop did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub start_step: u64,
    pub steps: u64,
    /// Forward/backward passes.
    pub passes: u64,
    /// Parameter updates.
    pub updates: u64,
    pub initial_valid_nll: f64,
    pub best_valid_nll: f64,
    pub best_step: u64,
    /// Step whose parameters the model holds on return.
    pub selected_step: u64,
    pub valid_curve: Vec<(u64, f64)>,
    /// Mean training loss per eval interval, keyed by pair (`""` when single).
    pub train_curves: BTreeMap<String, Vec<(u64, f64)>>,
}

/// Mean per-token NLL of marked examples, in eval mode.
pub fn mean_nll<F: Float>(model: &Seq2SeqModel<F>, examples: &[(Vec<u32>, Vec<u32>)], batch_tokens: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for idx in token_batches(examples, &order, batch_tokens) {
        let batch: Vec<_> = idx.iter().map(|&i| examples[i].clone()).collect();
        for (s, t) in model.sentence_nll(&PairBatch::new(&batch)?)? {
            nll += s;
            tokens += t;
        }
    }
    Ok(nll / tokens as f64)
}

/// Decoding length limit for a source of `src_len` words.
pub fn max_decode_len(src_len: usize, max_positions: usize) -> usize {
    (2 * src_len + 10).min(max_positions.saturating_sub(1)).max(1)
}

/// Decodes every source (word ids) with beam search. Sentences are spread
/// over worker threads; results keep input order.
pub fn decode_all<F: Float>(model: &Seq2SeqModel<F>, sources: &[Vec<u32>], beam: usize) -> Result<Vec<Decoded>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sources.len().max(1));
    let maxp = model.config().max_positions;
    let one = |s: &Vec<u32>| translate(model, &source_ids(s), beam, max_decode_len(s.len(), maxp));
    if workers <= 1 {
        return sources.iter().map(one).collect();
    }
    let chunk = sources.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Decoded>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("decoder worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// BLEU and exact match of beam-search output against references.
pub fn evaluate<F: Float>(model: &mut Seq2SeqModel<F>, test: &[(Vec<u32>, Vec<u32>)], beam: usize) -> Result<EvalResult> {
    let mode = model.mode();
    model.set_mode(Mode::Eval);
    let sources: Vec<Vec<u32>> = test.iter().map(|(s, _)| s.clone()).collect();
    let decoded = decode_all(model, &sources, beam);
    model.set_mode(mode);
    let decoded = decoded?;
    let hyps: Vec<Vec<u32>> = decoded.iter().map(|d| d.best.words().to_vec()).collect();
    let refs: Vec<Vec<u32>> = test.iter().map(|(_, t)| t.clone()).collect();
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    Ok(EvalResult {
        bleu: bleu_corpus(&hyps, &refs)?,
        exact_match: if test.is_empty() { 0.0 } else { exact as f64 / test.len() as f64 },
        valid_nll: None,
        p_value: None,
        n: test.len(),
        truncated: decoded.iter().filter(|d| d.truncated).count(),
        hypotheses: hyps,
    })
}

fn snapshot<F: Float>(model: &Seq2SeqModel<F>, trainable: bool) -> Vec<(String, Vec<F>)> {
    model
        .params()
        .iter()
        .filter(|(_, _, t)| t.requires_grad() == trainable)
        .map(|(_, p, t)| (p.to_string(), t.data().to_vec()))
        .collect()
}

fn restore<F: Float>(model: &mut Seq2SeqModel<F>, snap: Vec<(String, Vec<F>)>) {
    for (path, data) in snap {
        if let Some(t) = model.params_mut().by_path_mut(&path) {
            t.data_mut().copy_from_slice(&data);
        }
    }
}

/// Errors if any frozen tensor differs bitwise from `before`.
fn check_frozen<F: Float>(model: &Seq2SeqModel<F>, before: &[(String, Vec<F>)]) -> Result<()> {
    for (path, data) in before {
        let now = model.params().by_path(path).map(|t| t.data());
        let same = now.is_some_and(|d| d.iter().zip(data).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits()));
        if !same {
            return Err(Error::State(format!("frozen tensor `{path}` changed during training")));
        }
    }
    Ok(())
}

/// Shared driver: one accumulated update per step from `next_cycle`,
/// validation every `eval_interval` steps, divergence guard, selection.
fn run<F: Float>(
    model: &mut Seq2SeqModel<F>,
    opt: &mut Adam,
    plan: &TrainPlan,
    labels: &[String],
    mut next_cycle: impl FnMut(u64) -> Result<Vec<PairBatch>>,
    valid: &dyn Fn(&Seq2SeqModel<F>) -> Result<f64>,
    log: &mut MetricsLog,
) -> Result<LoopSummary> {
    plan.validate()?;
    let start = opt.step_count();
    model.set_mode(Mode::Eval);
    let initial = valid(model)?;
    log.push(MetricRecord::new(start, "valid").nll(initial))?;
    let mut s = LoopSummary {
        start_step: start,
        initial_valid_nll: initial,
        best_valid_nll: initial,
        best_step: start,
        selected_step: start,
        valid_curve: vec![(start, initial)],
        ..Default::default()
    };
    let mut best = match plan.selection {
        Selection::BestValid => Some(snapshot(model, true)),
        Selection::FixedStep => None,
    };
    let mut sums = vec![(0.0, 0usize); labels.len()];
    let mut strikes = 0;
    for step in start + 1..=plan.max_steps {
        model.set_mode(Mode::Train);
        let batches = next_cycle(step)?;
        let report = accumulate_cycle(opt, model, &batches, plan.label_smoothing)?;
        s.passes += batches.len() as u64;
        s.updates += 1;
        s.steps += 1;
        for (i, loss) in report.losses.iter().enumerate() {
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite training loss at step {step}")));
            }
            sums[i % labels.len()].0 += loss;
            sums[i % labels.len()].1 += 1;
        }
        if step % plan.eval_interval != 0 && step != plan.max_steps {
            continue;
        }
        for (label, (sum, n)) in labels.iter().zip(sums.iter_mut()) {
            let mean = *sum / (*n).max(1) as f64;
            s.train_curves.entry(label.clone()).or_default().push((step, mean));
            let mut r = MetricRecord::new(step, "train").nll(mean).lr(report.lr);
            if !label.is_empty() {
                r = r.pair(label);
            }
            log.push(r)?;
            *sum = 0.0;
            *n = 0;
        }
        model.set_mode(Mode::Eval);
        let nll = valid(model)?;
        log.push(MetricRecord::new(step, "valid").nll(nll))?;
        s.valid_curve.push((step, nll));
        strikes = if nll.is_finite() && nll <= 2.0 * initial { 0 } else { strikes + 1 };
        if strikes >= 3 {
            return Err(Error::Diverged(format!(
                "validation NLL {nll:.4} at step {step} exceeded twice the initial {initial:.4} for 3 consecutive evaluations"
            )));
        }
        if nll < s.best_valid_nll {
            s.best_valid_nll = nll;
            s.best_step = step;
            if let Some(b) = &mut best {
                *b = snapshot(model, true);
            }
        }
    }
    s.selected_step = opt.step_count();
    if let Some(b) = best {
        restore(model, b);
        s.selected_step = s.best_step;
    }
    model.set_mode(Mode::Eval);
    Ok(s)
}

/// Groups consecutive sentences into two-sentence documents.
pub fn documents(sentences: &[Vec<u32>]) -> Vec<Vec<Vec<u32>>> {
    sentences.chunks(2).map(|c| c.to_vec()).collect()
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    rng.set_stream(stream);
    rng
}

fn denoise_example(doc: &[Vec<u32>], noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<u32>, Vec<u32>)> {
    let noised = noise_document(doc, noise, rng)?;
    Ok(example(&noised, &doc.concat()))
}

/// Denoising pretraining: source = noised document, target = original.
/// Noise is drawn per step from `(plan.seed, step)`; validation documents
/// are noised once with a fixed stream. Passing the optimiser of an earlier
/// run resumes it exactly.
pub fn pretrain_denoise<F: Float>(
    model: &mut Seq2SeqModel<F>,
    train: &[Vec<u32>],
    valid: &[Vec<u32>],
    noise: &NoiseSpec,
    plan: &TrainPlan,
    resume: Option<Adam>,
    log: &mut MetricsLog,
) -> Result<(LoopSummary, Adam)> {
    noise.validate()?;
    let docs = documents(train);
    let valid_docs = documents(valid);
    let mut vrng = noise_rng(plan.seed, u64::MAX);
    let valid_set = valid_docs
        .iter()
        .map(|d| denoise_example(d, noise, &mut vrng))
        .collect::<Result<Vec<_>>>()?;
    let plain: Vec<_> = docs.iter().map(|d| example(&d.concat(), &d.concat())).collect();
    let mut stream = BatchStream::new(plain, plan.batch_tokens, plan.seed)?;
    let mut opt = resume.unwrap_or_else(|| Adam::new(plan.adam.clone(), plan.schedule.clone()));
    for _ in 0..opt.step_count() {
        stream.next_indices();
    }
    let bt = plan.batch_tokens;
    let summary = run(
        model,
        &mut opt,
        plan,
        &[String::new()],
        |step| {
            let mut rng = noise_rng(plan.seed, step);
            let ex = stream
                .next_indices()
                .into_iter()
                .map(|i| denoise_example(&docs[i], noise, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![PairBatch::new(&ex)?])
        },
        &|m| mean_nll(m, &valid_set, bt),
        log,
    )?;
    Ok((summary, opt))
}

/// Adds the input module and recipe adapters, then applies the recipe.
pub fn prepare<F: Float>(model: &mut Seq2SeqModel<F>, recipe: &str, graft: Option<InputModuleConfig>) -> Result<FreezePolicy> {
    let policy = FreezePolicy::resolve(recipe, model.config().n_dec_layers)?;
    policy.check_graft(graft.is_some() || model.is_grafted())?;
    if let Some(g) = graft {
        model.graft(g)?;
    }
    if let Some(a) = policy.adapters {
        model.insert_adapters(a.placement, AdapterConfig::toy(a.kind))?;
    }
    model.apply_policy(&policy);
    Ok(policy)
}

fn marked(pairs: &[(Vec<u32>, Vec<u32>)]) -> Vec<(Vec<u32>, Vec<u32>)> {
    pairs.iter().map(|(s, t)| example(s, t)).collect()
}

fn test_slice<'a>(plan: &TrainPlan, test: &'a [(Vec<u32>, Vec<u32>)]) -> &'a [(Vec<u32>, Vec<u32>)] {
    &test[..plan.max_test_sentences.map_or(test.len(), |n| n.min(test.len()))]
}

/// Bilingual fine-tuning of `model` under the plan's recipe, optionally
/// grafting an input module first. Returns the loop summary and test scores.
pub fn finetune_bilingual<F: Float>(
    model: &mut Seq2SeqModel<F>,
    data: &BilingualData,
    plan: &TrainPlan,
    graft: Option<InputModuleConfig>,
    log: &mut MetricsLog,
) -> Result<(LoopSummary, EvalResult)> {
    prepare(model, &plan.recipe, graft)?;
    let frozen = snapshot(model, false);
    let mut stream = BatchStream::new(marked(&data.train), plan.batch_tokens, plan.seed)?;
    let valid_set = marked(&data.valid);
    let mut opt = Adam::new(plan.adam.clone(), plan.schedule.clone());
    let bt = plan.batch_tokens;
    let summary = run(
        model,
        &mut opt,
        plan,
        &[String::new()],
        |_| Ok(vec![stream.next_batch()?]),
        &|m| mean_nll(m, &valid_set, bt),
        log,
    )?;
    check_frozen(model, &frozen)?;
    let mut result = evaluate(model, test_slice(plan, &data.test), plan.beam)?;
    result.valid_nll = match plan.selection {
        Selection::BestValid => Some(summary.best_valid_nll),
        Selection::FixedStep => summary.valid_curve.last().map(|&(_, v)| v),
    };
    log.push(MetricRecord::new(summary.selected_step, "test").bleu(result.bleu))?;
    Ok((summary, result))
}

/// Round-robin multilingual fine-tuning: every step takes one batch from
/// each pair in name order, accumulates, and applies one update.
pub fn round_robin<F: Float>(
    model: &mut Seq2SeqModel<F>,
    pairs: &BTreeMap<String, BilingualData>,
    plan: &TrainPlan,
    graft: Option<InputModuleConfig>,
    log: &mut MetricsLog,
) -> Result<(LoopSummary, BTreeMap<String, EvalResult>)> {
    if pairs.len() < 2 {
        return Err(Error::Contract(format!("round-robin needs at least 2 pairs, got {}", pairs.len())));
    }
    prepare(model, &plan.recipe, graft)?;
    let frozen = snapshot(model, false);
    let labels: Vec<String> = pairs.keys().cloned().collect();
    let mut streams = pairs
        .values()
        .enumerate()
        .map(|(k, d)| BatchStream::new(marked(&d.train), plan.batch_tokens, plan.seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let valid_sets: Vec<_> = pairs.values().map(|d| marked(&d.valid)).collect();
    let mut opt = Adam::new(plan.adam.clone(), plan.schedule.clone());
    let bt = plan.batch_tokens;
    let summary = run(
        model,
        &mut opt,
        plan,
        &labels,
        |_| streams.iter_mut().map(|s| s.next_batch()).collect(),
        &|m| {
            let per: Vec<f64> = valid_sets.iter().map(|v| mean_nll(m, v, bt)).collect::<Result<_>>()?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        },
        log,
    )?;
    check_frozen(model, &frozen)?;
    let mut results = BTreeMap::new();
    for (name, d) in pairs {
        let mut r = evaluate(model, test_slice(plan, &d.test), plan.beam)?;
        r.valid_nll = Some(mean_nll(model, &marked(&d.valid), bt)?);
        log.push(MetricRecord::new(summary.selected_step, "test").pair(name).bleu(r.bleu))?;
        results.insert(name.clone(), r);
    }
    Ok((summary, results))
}

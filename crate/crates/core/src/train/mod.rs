//! Training loops, decoding and scoring.

mod batch;
mod beam;
mod bleu;
mod loops;
mod metrics;

pub use batch::{example, source_ids, target_ids, token_batches, BatchStream};
pub use beam::{beam_search, greedy, translate, Decoded, Hypothesis, ModelScorer, StepScorer};
pub use bleu::{bleu_corpus, corpus_stats, paired_bootstrap, BleuStats, MAX_ORDER};
pub use loops::{
    decode_all, documents, evaluate, finetune_bilingual, max_decode_len, mean_nll, prepare, pretrain_denoise,
    round_robin, BilingualData, EvalResult, LoopSummary, Pairs, Selection, TrainPlan,
};
pub use metrics::{read_metrics, MetricRecord, MetricsLog};

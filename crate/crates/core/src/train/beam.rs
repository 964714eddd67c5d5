use crate::data::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{EncodedSource, Seq2SeqModel};
use crate::tensor::{Float, Mode};

/// Anything that yields next-token log-probabilities for a set of prefixes.
/// Prefixes start with the begin marker.
pub trait StepScorer {
    fn next_logprobs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores continuations of one encoded sentence with a model.
pub struct ModelScorer<'m, F: Float> {
    model: &'m Seq2SeqModel<F>,
    enc: EncodedSource<F>,
}

impl<'m, F: Float> ModelScorer<'m, F> {
    pub fn new(model: &'m Seq2SeqModel<F>, src: &[u32]) -> Result<Self> {
        if model.mode() != Mode::Eval {
            return Err(Error::State("decoding requires eval mode".into()));
        }
        Ok(ModelScorer {
            model,
            enc: model.encode_sentence(src)?,
        })
    }
}

impl<F: Float> StepScorer for ModelScorer<'_, F> {
    fn next_logprobs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut rows = self.model.next_token_logprobs(&self.enc, prefixes)?;
        for row in &mut rows {
            for id in [PAD_ID, BOS_ID, MASK_ID] {
                if let Some(x) = row.get_mut(id as usize) {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the begin marker; ends with the end marker
    /// when finished.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability divided by the number of generated tokens.
    pub fn score(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }

    /// Tokens with the end marker removed.
    pub fn words(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub best: Hypothesis,
    /// No hypothesis reached the end marker within `max_len`.
    pub truncated: bool,
}

/// Best expansions of `live`, ranked by cumulative log-probability. Ties
/// keep hypothesis order, then token order. Tokens scored `-inf` are never
/// generated.
fn expand(live: &[Hypothesis], lps: &[Vec<f64>], keep: usize) -> Vec<Hypothesis> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (h, row) in lps.iter().enumerate() {
        for (v, &lp) in row.iter().enumerate() {
            if lp.is_finite() {
                cands.push((live[h].logprob + lp, h, v));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands
        .into_iter()
        .take(keep)
        .map(|(lp, h, v)| {
            let mut tokens = live[h].tokens.clone();
            tokens.push(v as u32);
            Hypothesis {
                tokens,
                logprob: lp,
                finished: v as u32 == EOS_ID,
            }
        })
        .collect()
}

fn prefixes(live: &[Hypothesis]) -> Vec<Vec<u32>> {
    live.iter()
        .map(|h| std::iter::once(BOS_ID).chain(h.tokens.iter().copied()).collect())
        .collect()
}

fn search(scorer: &dyn StepScorer, beam: usize, max_len: usize) -> Result<Decoded> {
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let lps = scorer.next_logprobs(&prefixes(&live))?;
        let mut next = Vec::new();
        for (rank, h) in expand(&live, &lps, 2 * beam).into_iter().enumerate() {
            if h.finished {
                if rank < beam {
                    finished.push(h);
                }
            } else if next.len() < beam {
                next.push(h);
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .fold(None::<&Hypothesis>, |acc, h| match acc {
            Some(b) if b.score() >= h.score() => Some(b),
            _ => Some(h),
        })
        .cloned()
        .ok_or_else(|| Error::State("beam search produced no hypothesis".into()))?;
    Ok(Decoded {
        truncated: !best.finished,
        best,
    })
}

/// Greedy decoding: repeatedly appends the most probable token.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize) -> Result<Decoded> {
    search(scorer, 1, max_len)
}

/// Beam search under length-normalised log-probability. The greedy path is
/// always a candidate too, so the result never scores below greedy.
pub fn beam_search(scorer: &dyn StepScorer, beam: usize, max_len: usize) -> Result<Decoded> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Contract("beam width and max_len must be positive".into()));
    }
    let wide = search(scorer, beam, max_len)?;
    if beam == 1 {
        return Ok(wide);
    }
    let narrow = search(scorer, 1, max_len)?;
    Ok(if narrow.best.score() > wide.best.score() {
        narrow
    } else {
        wide
    })
}

/// Decodes one source sentence with `model` (eval mode).
pub fn translate<F: Float>(model: &Seq2SeqModel<F>, src: &[u32], beam: usize, max_len: usize) -> Result<Decoded> {
    let scorer = ModelScorer::new(model, src)?;
    beam_search(&scorer, beam, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probabilities depend only on prefix length and the last token.
    struct Table(fn(&[u32]) -> Vec<f64>);

    impl StepScorer for Table {
        fn next_logprobs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| (self.0)(p)).collect())
        }
    }

    fn normalise(w: &[f64]) -> Vec<f64> {
        let z: f64 = w.iter().sum();
        w.iter().map(|x| if *x == 0.0 { f64::NEG_INFINITY } else { (x / z).ln() }).collect()
    }

    #[test]
    fn beam_one_matches_greedy_and_truncation_flag() {
        // Never emits the end marker: always truncated.
        let s = Table(|_| normalise(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.3]));
        let d = beam_search(&s, 1, 4).unwrap();
        assert!(d.truncated);
        assert_eq!(d.best.tokens, vec![5, 5, 5, 5]);
        assert_eq!(d, greedy(&s, 4).unwrap());
    }

    #[test]
    fn beam_finds_path_greedy_misses() {
        // Greedy takes 5 (0.6) then is stuck with a weak end; 6 (0.4) leads to a sure end.
        let s = Table(|p| match p {
            [_] => normalise(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.4]),
            [_, 5] => normalise(&[0.0, 0.0, 0.3, 0.0, 0.0, 0.35, 0.35]),
            [_, 6] => normalise(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
            _ => normalise(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        });
        let g = greedy(&s, 5).unwrap();
        let b = beam_search(&s, 2, 5).unwrap();
        assert_eq!(b.best.tokens, vec![6, EOS_ID]);
        assert!(b.best.score() >= g.best.score());
        assert!(!b.truncated);
    }

    #[test]
    fn invalid_arguments() {
        let s = Table(|_| normalise(&[0.0, 0.0, 1.0]));
        assert!(beam_search(&s, 0, 3).is_err());
        assert!(beam_search(&s, 2, 0).is_err());
        assert_eq!(beam_search(&s, 3, 3).unwrap().best.tokens, vec![EOS_ID]);
    }

    fn forced(p: &[u32]) -> Vec<f64> {
        const PATH: [u32; 4] = [0, 1, 0, EOS_ID];
        let want = PATH.get(p.len() - 1).copied().unwrap_or(EOS_ID);
        let logits: Vec<f64> = (0..3).map(|v| if v == want { 3.0 } else { 0.1 * v as f64 }).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - lse).collect()
    }

    /// Every finished sequence of length <= max_len, scored independently.
    fn exhaustive_best(max_len: usize) -> (Vec<u32>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![BOS_ID], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let row = forced(&prefix);
            for v in 0..3u32 {
                let total = lp + row[v as usize];
                let mut next = prefix.clone();
                next.push(v);
                if v == EOS_ID {
                    let score = total / (next.len() - 1) as f64;
                    if score > best.1 {
                        best = (next[1..].to_vec(), score);
                    }
                } else if next.len() - 1 < max_len {
                    stack.push((next, total));
                }
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_enumeration_on_three_tokens() {
        let (want, score) = exhaustive_best(4);
        assert_eq!(want, vec![0, 1, 0, EOS_ID]);
        let got = beam_search(&Table(forced), 5, 4).unwrap();
        assert_eq!(got.best.tokens, want);
        assert!((got.best.score() - score).abs() < 1e-12);
    }
}

//! Corpus BLEU (orders 1-4) and paired bootstrap resampling.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::hash::Hash;

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics of one hypothesis/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in xs.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    pub fn sentence<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    /// BLEU on a 0-100 scale. Orders above one with no matches are
    /// add-one smoothed in numerator and denominator.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_ORDER {
            let (m, t) = if n > 0 && self.matches[n] == 0 {
                (1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            log_p += (m as f64 / t as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let log_bp = if c > r { 0.0 } else { 1.0 - r / c };
        100.0 * (log_bp + log_p / MAX_ORDER as f64).exp()
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} hypotheses but {b} references")));
    }
    Ok(())
}

pub fn corpus_stats<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Vec<BleuStats>> {
    check_aligned(hyps.len(), refs.len())?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::sentence(h, r)).collect())
}

pub fn bleu_corpus<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(total.score())
}

/// Paired bootstrap: resamples sentence indices with replacement and
/// returns the fraction of resamples in which the system with the lower
/// full-corpus BLEU scores at least as high as the other.
pub fn paired_bootstrap<T: Eq + Hash>(
    hyps_a: &[Vec<T>],
    hyps_b: &[Vec<T>],
    refs: &[Vec<T>],
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_aligned(hyps_a.len(), refs.len())?;
    check_aligned(hyps_b.len(), refs.len())?;
    if refs.is_empty() || n_resamples == 0 {
        return Err(Error::Contract("bootstrap needs sentences and resamples".into()));
    }
    let sa = corpus_stats(hyps_a, refs)?;
    let sb = corpus_stats(hyps_b, refs)?;
    let sum = |s: &[BleuStats], idx: &mut dyn Iterator<Item = usize>| {
        let mut t = BleuStats::default();
        for i in idx {
            t += s[i];
        }
        t.score()
    };
    let full_a = sum(&sa, &mut (0..refs.len()));
    let full_b = sum(&sb, &mut (0..refs.len()));
    let (better, worse) = if full_a >= full_b { (&sa, &sb) } else { (&sb, &sa) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let n = refs.len();
    let mut idx = vec![0usize; n];
    for _ in 0..n_resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        if sum(worse, &mut idx.iter().copied()) >= sum(better, &mut idx.iter().copied()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_resamples as f64)
}

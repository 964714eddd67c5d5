use super::MASK_ID;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Source-side corruption for denoising pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Fraction of tokens hidden under mask spans, in `[0, 1]`.
    pub mask_ratio: f64,
    /// Poisson mean of span lengths.
    pub mean_span: f64,
    pub sentence_shuffle: bool,
    pub rotate_start: bool,
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            mask_ratio: 0.0,
            mean_span: 3.0,
            sentence_shuffle: false,
            rotate_start: false,
        }
    }

    pub fn toy() -> Self {
        NoiseSpec {
            mask_ratio: 0.3,
            mean_span: 3.0,
            sentence_shuffle: true,
            rotate_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if !(self.mean_span > 0.0) {
            return Err(Error::Config("mean span length must be positive".into()));
        }
        Ok(())
    }
}

/// Start rotation, then sentence shuffling, then span masking.
///
/// Every masked span, including zero-length ones, becomes one mask token;
/// adjacent spans merge into a single mask.
pub fn noise_document<R: Rng>(doc: &[Vec<u32>], spec: &NoiseSpec, rng: &mut R) -> Result<Vec<u32>> {
    spec.validate()?;
    if doc.is_empty() || doc.iter().all(Vec::is_empty) {
        return Err(Error::Contract("cannot noise an empty document".into()));
    }
    let mut pieces: Vec<Vec<u32>> = doc.iter().filter(|s| !s.is_empty()).cloned().collect();
    if spec.rotate_start {
        pieces = rotate(&pieces, rng);
    }
    if spec.sentence_shuffle {
        pieces.shuffle(rng);
    }
    let tokens: Vec<u32> = pieces.concat();
    if spec.mask_ratio == 0.0 {
        return Ok(tokens);
    }
    Ok(mask_spans(&tokens, spec, rng))
}

/// Document restarts at a random token; the cut sentence becomes two pieces.
fn rotate<R: Rng>(pieces: &[Vec<u32>], rng: &mut R) -> Vec<Vec<u32>> {
    let total: usize = pieces.iter().map(Vec::len).sum();
    let mut start = rng.random_range(0..total);
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for p in pieces {
        if start >= p.len() {
            start -= p.len();
            tail.push(p.clone());
        } else if start > 0 {
            tail.push(p[..start].to_vec());
            head.push(p[start..].to_vec());
            start = 0;
        } else {
            head.push(p.clone());
        }
    }
    head.extend(tail);
    head
}

fn mask_spans<R: Rng>(tokens: &[u32], spec: &NoiseSpec, rng: &mut R) -> Vec<u32> {
    let n = tokens.len();
    let target = ((spec.mask_ratio * n as f64).round() as usize).min(n);
    let mut masked = vec![false; n];
    // Zero-length spans insert a mask before position i.
    let mut inserted = vec![false; n + 1];
    let poisson = Poisson::new(spec.mean_span).expect("validated positive mean");
    let mut count = 0;
    while count < target {
        let len = (poisson.sample(rng) as usize).min(target - count);
        if len == 0 {
            inserted[rng.random_range(0..=n)] = true;
            continue;
        }
        let start = rng.random_range(0..=n - len);
        for m in &mut masked[start..start + len] {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    let push_mask = |out: &mut Vec<u32>| {
        if out.last() != Some(&MASK_ID) {
            out.push(MASK_ID);
        }
    };
    for i in 0..=n {
        if inserted[i] {
            push_mask(&mut out);
        }
        if i < n {
            if masked[i] {
                push_mask(&mut out);
            } else {
                out.push(tokens[i]);
            }
        }
    }
    out
}

//! Adam over trainable tensors only, warmup + inverse-square-root schedule,
//! and cycle-level gradient accumulation.

use crate::error::{Error, Result};
use crate::model::{PairBatch, ParamTree, Seq2SeqModel};
use crate::tensor::Float;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    InverseSqrt,
    Constant,
}

/// Linear warmup to `max_lr`, then `max_lr * sqrt(warmup / step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub decay: Decay,
}

impl Schedule {
    /// Frozen-body bilingual fine-tuning.
    pub fn frozen_bart() -> Self {
        Self::inverse_sqrt(5000, 7e-4)
    }

    /// Bilingual fine-tuning of a multilingual body.
    pub fn mbart() -> Self {
        Self::inverse_sqrt(2500, 3e-5)
    }

    /// Round-robin multilingual fine-tuning.
    pub fn multilingual() -> Self {
        Self::inverse_sqrt(4000, 1e-4)
    }

    pub fn inverse_sqrt(warmup_steps: u64, max_lr: f64) -> Self {
        Schedule {
            warmup_steps,
            max_lr,
            decay: Decay::InverseSqrt,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Schedule {
            warmup_steps: 0,
            max_lr: lr,
            decay: Decay::Constant,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        if w > 0 && step < w {
            return self.max_lr * step as f64 / w as f64;
        }
        match self.decay {
            Decay::Constant => self.max_lr,
            Decay::InverseSqrt if w == 0 => self.max_lr,
            Decay::InverseSqrt => self.max_lr * (w as f64 / step as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; no clipping when absent.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moments of one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    path: String,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: Schedule,
    step: u64,
    /// Indexed like the parameter tree; only trainable tensors get moments.
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig, schedule: Schedule) -> Self {
        Adam {
            config,
            schedule,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Scalars held in moment buffers (two per trainable scalar).
    pub fn state_scalars(&self) -> usize {
        self.moments.iter().flatten().map(|m| m.m.len() + m.v.len()).sum()
    }

    /// One bias-corrected update of every trainable tensor, then drops all
    /// gradient buffers. Returns the learning rate used.
    pub fn step<F: Float>(&mut self, params: &mut ParamTree<F>) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, path, t) in params.iter() {
            if !t.requires_grad() {
                continue;
            }
            let g = t
                .grad()
                .ok_or_else(|| Error::State(format!("no gradient for trainable parameter `{path}`")))?;
            sq += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        let clip = match self.config.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let lr = self.schedule.lr(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (id, path, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.take_grad() else { continue };
            let n = g.len();
            let mo = self.moments[id.index()].get_or_insert_with(|| Moments {
                path: path.to_string(),
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64() * clip;
                let m = beta1 * mo.m[i] as f64 + (1.0 - beta1) * gi;
                let v = beta2 * mo.v[i] as f64 + (1.0 - beta2) * gi * gi;
                mo.m[i] = m as f32;
                mo.v[i] = v as f32;
                let upd = lr * (m / c1) / ((v / c2).sqrt() + eps);
                *w = F::of(w.as_f64() - upd);
            }
        }
        params.zero_grads();
        Ok(lr)
    }

    /// Compact JSON header line, then `m` and `v` of each tensor as
    /// little-endian `f32`, in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries: Vec<StateEntry> = self
            .moments
            .iter()
            .flatten()
            .map(|m| StateEntry {
                path: m.path.clone(),
                len: m.m.len(),
            })
            .collect();
        let header = StateHeader {
            format: STATE_FORMAT.into(),
            step: self.step,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for m in self.moments.iter().flatten() {
            for x in m.m.iter().chain(&m.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Restores state saved by [`Adam::to_bytes`] against `params`.
    pub fn from_bytes<F: Float>(bytes: &[u8], params: &ParamTree<F>) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("optimizer header is not terminated".into()))?;
        let header: StateHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != STATE_FORMAT {
            return Err(Error::Format(format!("not an optimizer state: `{}`", header.format)));
        }
        let mut floats = bytes[nl + 1..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut moments = vec![None; params.len()];
        for e in header.entries {
            let id = params
                .id(&e.path)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown `{}`", e.path)))?;
            let m: Vec<f32> = floats.by_ref().take(e.len).collect();
            let v: Vec<f32> = floats.by_ref().take(e.len).collect();
            if v.len() != e.len || params.get(id).numel() != e.len {
                return Err(Error::Format(format!("optimizer state for `{}` does not fit", e.path)));
            }
            moments[id.index()] = Some(Moments { path: e.path, m, v });
        }
        Ok(Adam {
            config: header.config,
            schedule: header.schedule,
            step: header.step,
            moments,
        })
    }
}

const STATE_FORMAT: &str = "graftmt-adam";

#[derive(Serialize, Deserialize)]
struct StateEntry {
    path: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    format: String,
    step: u64,
    config: AdamConfig,
    schedule: Schedule,
    entries: Vec<StateEntry>,
}

/// Outcome of one accumulated update.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleReport {
    /// Mean per-token loss of each batch, in input order.
    pub losses: Vec<f64>,
    pub tokens: Vec<usize>,
    pub lr: f64,
}

/// Forward/backward on every batch, gradients summed and normalised by
/// the total target-token count of the cycle, then exactly one update.
pub fn accumulate_cycle<F: Float>(
    opt: &mut Adam,
    model: &mut Seq2SeqModel<F>,
    batches: &[PairBatch],
    label_smoothing: f64,
) -> Result<CycleReport> {
    if batches.is_empty() {
        return Err(Error::Contract("a cycle needs at least one batch".into()));
    }
    let total: usize = batches.iter().map(|b| b.n_tokens).sum();
    let mut losses = Vec::with_capacity(batches.len());
    model.params_mut().zero_grads();
    for (i, b) in batches.iter().enumerate() {
        let key = ((opt.step_count() + 1) << 16) | i as u64;
        let (loss, grads) = model.forward_train(b, label_smoothing, Some(total as f64), key)?;
        model.params_mut().accumulate(grads)?;
        losses.push(loss * total as f64 / b.n_tokens as f64);
    }
    let lr = opt.step(model.params_mut())?;
    Ok(CycleReport {
        losses,
        tokens: batches.iter().map(|b| b.n_tokens).collect(),
        lr,
    })
}

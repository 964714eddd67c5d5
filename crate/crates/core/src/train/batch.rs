use crate::data::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::PairBatch;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Source ids with a closing end marker.
pub fn source_ids(words: &[u32]) -> Vec<u32> {
    let mut s = words.to_vec();
    s.push(EOS_ID);
    s
}

/// Target ids wrapped in begin/end markers.
pub fn target_ids(words: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(words.len() + 2);
    t.push(BOS_ID);
    t.extend_from_slice(words);
    t.push(EOS_ID);
    t
}

/// A marked-up `(source, target)` training example.
pub fn example(src_words: &[u32], tgt_words: &[u32]) -> (Vec<u32>, Vec<u32>) {
    (source_ids(src_words), target_ids(tgt_words))
}

/// Groups example indices into batches whose padded size
/// `count * max(src_len, tgt_len)` stays within `batch_tokens`.
pub fn token_batches(examples: &[(Vec<u32>, Vec<u32>)], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for &i in order {
        let (s, t) = &examples[i];
        let len = s.len().max(t.len());
        let grown = longest.max(len);
        if !cur.is_empty() && grown * (cur.len() + 1) > batch_tokens {
            out.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(len);
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Endless stream of shuffled token-budget batches. Each pass over the
/// data reshuffles with a seed derived from the epoch number.
#[derive(Clone, Debug)]
pub struct BatchStream {
    examples: Vec<(Vec<u32>, Vec<u32>)>,
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
    next: usize,
}

impl BatchStream {
    pub fn new(examples: Vec<(Vec<u32>, Vec<u32>)>, batch_tokens: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("cannot batch an empty corpus".into()));
        }
        if batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        let mut s = BatchStream {
            examples,
            batch_tokens,
            seed,
            epoch: 0,
            queue: Vec::new(),
            next: 0,
        };
        s.refill();
        Ok(s)
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        order.shuffle(&mut rng);
        self.queue = token_batches(&self.examples, &order, self.batch_tokens);
        self.next = 0;
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of the next batch; wraps around at the end of an epoch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.next == self.queue.len() {
            self.epoch += 1;
            self.refill();
        }
        self.next += 1;
        self.queue[self.next - 1].clone()
    }

    /// Next batch of raw examples.
    pub fn next_examples(&mut self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.next_indices().into_iter().map(|i| self.examples[i].clone()).collect()
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        PairBatch::new(&self.next_examples())
    }
}

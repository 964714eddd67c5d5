use super::vocab::Vocab;
use super::N_SPECIAL;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

/// Word-order transform applied on the source side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Reorder {
    None,
    Reverse,
    /// Swaps positions (0,1), (2,3), ...
    SwapAdjacent,
    /// Left rotation by `k` positions (mod sentence length).
    Rotate(usize),
}

impl Reorder {
    pub fn apply<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match self {
            Reorder::None => {}
            Reorder::Reverse => v.reverse(),
            Reorder::SwapAdjacent => v.chunks_mut(2).for_each(|c| c.reverse()),
            Reorder::Rotate(k) if !v.is_empty() => {
                let n = v.len();
                v.rotate_left(k % n)
            }
            Reorder::Rotate(_) => {}
        }
        v
    }

    pub fn invert<T: Clone>(self, xs: &[T]) -> Vec<T> {
        match self {
            Reorder::Rotate(k) if !xs.is_empty() => {
                let mut v = xs.to_vec();
                let n = v.len();
                v.rotate_right(k % n);
                v
            }
            other => other.apply(xs),
        }
    }
}

impl fmt::Display for Reorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reorder::None => f.write_str("none"),
            Reorder::Reverse => f.write_str("reverse"),
            Reorder::SwapAdjacent => f.write_str("swap-adjacent"),
            Reorder::Rotate(k) => write!(f, "rotate-{k}"),
        }
    }
}

impl FromStr for Reorder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reorder::None),
            "reverse" => Ok(Reorder::Reverse),
            "swap-adjacent" => Ok(Reorder::SwapAdjacent),
            _ => s
                .strip_prefix("rotate-")
                .and_then(|k| k.parse().ok())
                .map(Reorder::Rotate)
                .ok_or_else(|| Error::Config(format!("unknown reorder `{s}`"))),
        }
    }
}

impl TryFrom<String> for Reorder {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Reorder> for String {
    fn from(r: Reorder) -> String {
        r.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherKind {
    /// Source words are the target words (copy language).
    Identity,
    /// Seeded random bijection onto a disjoint foreign word inventory.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }

    /// Content-hash bucket owning a sentence: 80/10/10.
    fn owns(self, words: &[usize]) -> bool {
        let bucket = fnv1a(words) % 10;
        match self {
            Split::Train => bucket < 8,
            Split::Valid => bucket == 8,
            Split::Test => bucket == 9,
        }
    }
}

fn fnv1a(words: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &w in words {
        for b in (w as u32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Everything needed to regenerate a synthetic language pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLangSpec {
    /// Size of the shared target ("English") word inventory.
    pub n_words: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub cipher: CipherKind,
    pub reorder: Reorder,
    /// Seeds the target grammar; pairs that share it share a target language.
    pub grammar_seed: u64,
    /// Seeds the cipher and sentence sampling.
    pub seed: u64,
}

impl SyntheticLangSpec {
    pub fn toy(seed: u64) -> Self {
        SyntheticLangSpec {
            n_words: 120,
            zipf_exponent: 1.1,
            min_len: 3,
            max_len: 12,
            cipher: CipherKind::Random,
            reorder: Reorder::Reverse,
            grammar_seed: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_words < 2 {
            return Err(Error::Config("n_words must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths {}..={} invalid",
                self.min_len, self.max_len
            )));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Config("zipf_exponent must be positive".into()));
        }
        Ok(())
    }
}

/// A source/target sentence pair as word ids (no sentence markers).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParallelPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Materialised language: word inventories, grammar and cipher.
#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub spec: SyntheticLangSpec,
    english: Vec<String>,
    foreign: Vec<String>,
    /// `cipher[i]` is the foreign word index for target word `i`.
    cipher: Vec<usize>,
    decipher: Vec<usize>,
    zipf_cdf: Vec<f64>,
    successors: Vec<Vec<usize>>,
}

const STICKINESS: f64 = 0.7;
const N_SUCCESSORS: usize = 4;

fn make_words(rng: &mut ChaCha8Rng, n: usize, onsets: &[&str], vowels: &[&str]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.random_range(1..=3);
        let w: String = (0..syllables)
            .map(|_| {
                let o = onsets[rng.random_range(0..onsets.len())];
                let v = vowels[rng.random_range(0..vowels.len())];
                format!("{o}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

impl SyntheticLanguage {
    pub fn new(spec: SyntheticLangSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_words;
        let mut g = ChaCha8Rng::seed_from_u64(spec.grammar_seed);
        let english = make_words(
            &mut g,
            n,
            &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v"],
            &["a", "e", "i", "o", "u"],
        );
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-spec.zipf_exponent)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let zipf_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let mut lang = SyntheticLanguage {
            english,
            foreign: Vec::new(),
            cipher: (0..n).collect(),
            decipher: (0..n).collect(),
            zipf_cdf,
            successors: Vec::new(),
            spec,
        };
        lang.successors = (0..n)
            .map(|_| (0..N_SUCCESSORS).map(|_| lang.zipf(&mut g)).collect())
            .collect();
        match lang.spec.cipher {
            CipherKind::Identity => lang.foreign = lang.english.clone(),
            CipherKind::Random => {
                let mut c = ChaCha8Rng::seed_from_u64(lang.spec.seed);
                c.set_stream(7);
                lang.foreign = make_words(
                    &mut c,
                    n,
                    &["c", "h", "j", "q", "w", "x", "y", "z", "sh", "ch"],
                    &["a", "e", "i", "o", "u", "y"],
                );
                lang.cipher.shuffle(&mut c);
                for (i, &j) in lang.cipher.iter().enumerate() {
                    lang.decipher[j] = i;
                }
            }
        }
        Ok(lang)
    }

    fn zipf(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.zipf_cdf.partition_point(|&c| c < u).min(self.zipf_cdf.len() - 1)
    }

    /// Target-side word indices of one sentence.
    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut s = vec![self.zipf(rng)];
        while s.len() < len {
            let prev = *s.last().unwrap_or(&0);
            let next = if rng.random::<f64>() < STICKINESS {
                self.successors[prev][rng.random_range(0..N_SUCCESSORS)]
            } else {
                self.zipf(rng)
            };
            s.push(next);
        }
        s
    }

    fn split_rng(&self, split: Split, stream_offset: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(split.stream() + stream_offset);
        rng
    }

    fn sentences(&self, split: Split, n: usize, stream_offset: u64) -> Vec<Vec<usize>> {
        let mut rng = self.split_rng(split, stream_offset);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = self.sample_sentence(&mut rng);
            if split.owns(&s) {
                out.push(s);
            }
        }
        out
    }

    fn word_ids(words: &[usize]) -> Vec<u32> {
        words.iter().map(|&w| (w + N_SPECIAL) as u32).collect()
    }

    /// `n` pairs `(reorder(cipher(s)), s)` from one split. Splits never
    /// share a sentence: each sentence belongs to exactly one split by hash.
    pub fn gen_parallel(&self, split: Split, n: usize) -> Vec<ParallelPair> {
        self.sentences(split, n, 0)
            .into_iter()
            .map(|s| self.pair_for(&s))
            .collect()
    }

    /// Target-language sentences for denoising pretraining.
    pub fn gen_monolingual(&self, split: Split, n: usize) -> Vec<Vec<u32>> {
        self.sentences(split, n, 16)
            .iter()
            .map(|s| Self::word_ids(s))
            .collect()
    }

    fn pair_for(&self, words: &[usize]) -> ParallelPair {
        let ciphered: Vec<usize> = words.iter().map(|&w| self.cipher[w]).collect();
        ParallelPair {
            src: Self::word_ids(&self.spec.reorder.apply(&ciphered)),
            tgt: Self::word_ids(words),
        }
    }

    /// Inverse reorder then inverse cipher: the exact translation of `src`.
    pub fn translate_oracle(&self, src: &[u32]) -> Result<Vec<u32>> {
        let mut words = Vec::with_capacity(src.len());
        for &id in self.spec.reorder.invert(src).iter() {
            let i = (id as usize)
                .checked_sub(N_SPECIAL)
                .filter(|&i| i < self.spec.n_words)
                .ok_or_else(|| Error::Index(format!("source id {id} is not a word")))?;
            words.push((self.decipher[i] + N_SPECIAL) as u32);
        }
        Ok(words)
    }

    pub fn target_vocab(&self) -> Vocab {
        Vocab::from_words(self.english.iter().cloned()).expect("generated words are unique")
    }

    pub fn source_vocab(&self) -> Vocab {
        Vocab::from_words(self.foreign.iter().cloned()).expect("generated words are unique")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(cipher: CipherKind, reorder: Reorder) -> SyntheticLanguage {
        SyntheticLanguage::new(SyntheticLangSpec {
            cipher,
            reorder,
            ..SyntheticLangSpec::toy(11)
        })
        .unwrap()
    }

    #[test]
    fn identity_spec_is_a_copy_task() {
        let l = lang(CipherKind::Identity, Reorder::None);
        for p in l.gen_parallel(Split::Train, 50) {
            assert_eq!(p.src, p.tgt);
        }
        assert_eq!(l.source_vocab(), l.target_vocab());
    }

    #[test]
    fn reverse_of_cipher() {
        let l = lang(CipherKind::Random, Reorder::Reverse);
        let p = &l.gen_parallel(Split::Test, 1)[0];
        let expected: Vec<u32> = p
            .tgt
            .iter()
            .rev()
            .map(|&t| (l.cipher[t as usize - N_SPECIAL] + N_SPECIAL) as u32)
            .collect();
        assert_eq!(p.src, expected);
        assert_eq!(l.translate_oracle(&p.src).unwrap(), p.tgt);
    }

    #[test]
    fn reorders_invert() {
        let xs: Vec<u32> = (0..7).collect();
        for r in [
            Reorder::None,
            Reorder::Reverse,
            Reorder::SwapAdjacent,
            Reorder::Rotate(3),
            Reorder::Rotate(10),
        ] {
            assert_eq!(r.invert(&r.apply(&xs)), xs, "{r}");
            assert_eq!(r.to_string().parse::<Reorder>().unwrap(), r);
        }
        assert_eq!(Reorder::SwapAdjacent.apply(&[1, 2, 3]), vec![2, 1, 3]);
        assert!("rotate-x".parse::<Reorder>().is_err());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let l = lang(CipherKind::Random, Reorder::Reverse);
        let train: HashSet<_> = l.gen_parallel(Split::Train, 400).into_iter().collect();
        let test: HashSet<_> = l.gen_parallel(Split::Test, 100).into_iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(l.gen_parallel(Split::Valid, 30), l.gen_parallel(Split::Valid, 30));
        for p in &train {
            assert!((3..=12).contains(&p.tgt.len()));
        }
    }

    #[test]
    fn shared_grammar_shares_the_target_language() {
        let a = SyntheticLanguage::new(SyntheticLangSpec::toy(1)).unwrap();
        let b = SyntheticLanguage::new(SyntheticLangSpec::toy(2)).unwrap();
        assert_eq!(a.target_vocab(), b.target_vocab());
        assert_ne!(a.cipher, b.cipher);
    }
}

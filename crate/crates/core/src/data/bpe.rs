use super::vocab::Vocab;
use super::{BOS_ID, EOS_ID, N_SPECIAL, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

/// Marks the first symbol of every word so decoding can restore spaces.
pub const WORD_START: char = '\u{2581}';

/// Character-level byte-pair vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocab,
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl BpeVocab {
    /// Greedy most-frequent-pair merging until the symbol table (reserved
    /// tokens excluded) reaches `target_size`. Ties go to the
    /// lexicographically smallest pair.
    pub fn learn(corpus: &[String], target_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Config("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, usize)> =
            counts.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
        if target_size < alphabet.len() {
            return Err(Error::Config(format!(
                "BPE target size {target_size} is smaller than the {} character alphabet",
                alphabet.len()
            )));
        }
        let mut symbols: Vec<String> = alphabet.into_iter().collect();
        let mut known: BTreeSet<String> = symbols.iter().cloned().collect();
        let mut merges = Vec::new();
        while symbols.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (s, c) in &words {
                for w in s.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            let mut best: Option<((&str, &str), usize)> = None;
            for (p, &c) in &pairs {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((*p, c));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (s, _) in &mut words {
                apply_merge(s, &l, &r);
            }
            let joined = format!("{l}{r}");
            if known.insert(joined.clone()) {
                symbols.push(joined);
            }
            merges.push((l, r));
        }
        Self::from_parts(symbols, merges)
    }

    fn from_parts(symbols: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(BpeVocab {
            merges,
            ranks,
            vocab: Vocab::from_words(symbols)?,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Total ids including reserved tokens.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.len() == N_SPECIAL
    }

    /// Applies merges to one word, lowest rank first.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut s = split_word(word);
        loop {
            let best = s
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut s, l, r);
        }
        s
    }

    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace()
            .flat_map(|w| self.segment(w))
            .map(|sym| self.vocab.id(&sym))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            match self.vocab.token(id) {
                Some(t) if id as usize >= N_SPECIAL => out.push_str(t),
                Some(t) => {
                    out.push(WORD_START);
                    out.push_str(t);
                }
                None => {
                    out.push(WORD_START);
                    out.push_str(self.vocab.token(UNK_ID).unwrap_or_default());
                }
            }
        }
        out.replace(WORD_START, " ").trim_start().to_string()
    }

    /// One `left right` pair per line, in learned order.
    pub(crate) fn save_merges(&self, path: &Path) -> Result<()> {
        let text: String = self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
        fs::write(path, text)?;
        Ok(())
    }

    pub(crate) fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab = Vocab::load(vocab_path)?;
        let mut merges = Vec::new();
        for (n, line) in fs::read_to_string(merges_path)?.lines().enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected `left right`", merges_path.display(), n + 1))
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        let symbols = vocab.tokens()[N_SPECIAL..].to_vec();
        Self::from_parts(symbols, merges)
    }
}

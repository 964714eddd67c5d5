use super::bpe::BpeVocab;
use super::{BOS_ID, EOS_ID, N_SPECIAL, PAD_ID, SPECIAL_TOKENS, UNK_ID};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Whitespace-word vocabulary. Ids `0..N_SPECIAL` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_SPECIAL
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with spaces, dropping padding and sentence markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID))
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `id<TAB>token` line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected id<TAB>token", path.display(), n + 1)))?;
            if id.parse::<usize>().ok() != Some(n) {
                return Err(Error::Format(format!(
                    "{}:{}: ids must be contiguous from 0",
                    path.display(),
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Format(format!(
                "{}: reserved tokens missing or out of place",
                path.display()
            )));
        }
        Self::from_tokens(tokens)
    }
}

/// Maps text lines to ids for one side of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    Word(Vocab),
    Bpe(BpeVocab),
}

impl Tokenizer {
    pub fn len(&self) -> usize {
        match self {
            Tokenizer::Word(v) => v.len(),
            Tokenizer::Bpe(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == N_SPECIAL
    }

    pub fn encode(&self, line: &str) -> Vec<u32> {
        match self {
            Tokenizer::Word(v) => v.encode(line),
            Tokenizer::Bpe(b) => b.encode(line),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            Tokenizer::Word(v) => v.decode(ids),
            Tokenizer::Bpe(b) => b.decode(ids),
        }
    }

    /// Writes the token table to `path`; BPE merges go to `path.merges`.
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Tokenizer::Word(v) => v.save(path),
            Tokenizer::Bpe(b) => {
                b.vocab().save(path)?;
                b.save_merges(&merges_path(path))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let merges = merges_path(path);
        if merges.exists() {
            Ok(Tokenizer::Bpe(BpeVocab::load(path, &merges)?))
        } else {
            Ok(Tokenizer::Word(Vocab::load(path)?))
        }
    }
}

fn merges_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".merges");
    PathBuf::from(s)
}

//! Synthetic languages, denoising noise, BPE and corpus files.

mod bpe;
mod io;
mod noise;
mod synthetic;
mod vocab;

pub use bpe::BpeVocab;
pub use io::{read_lines, read_parallel, write_lines, write_parallel};
pub use noise::{noise_document, NoiseSpec};
pub use synthetic::{
    CipherKind, ParallelPair, Reorder, Split, SyntheticLangSpec, SyntheticLanguage,
};
pub use vocab::{Tokenizer, Vocab};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
/// Ids below this are reserved for the tokens above.
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < N_SPECIAL
}

//! Run configuration and the synthetic-data plumbing shared by the
//! command-line tool and the end-to-end tests.

use crate::data::{NoiseSpec, Reorder, Split, SyntheticLangSpec, SyntheticLanguage, Vocab, N_SPECIAL};
use crate::error::{Error, Result};
use crate::input_module::InputModuleConfig;
use crate::model::{ModelConfig, Profile, Seq2SeqModel};
use crate::optim::Schedule;
use crate::train::{BilingualData, Selection, TrainPlan};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSizes {
    /// Monolingual pretraining sentences per language.
    pub n_mono: usize,
    pub n_mono_valid: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            n_mono: 20_000,
            n_mono_valid: 200,
            n_train: 5_000,
            n_valid: 200,
            n_test: 100,
        }
    }
}

/// Everything a run needs. Together with `seed` it fully determines the
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    /// Body shape; the vocabulary size is filled in from the data.
    pub model: ModelConfig,
    /// Language pairs by name. All share one target language.
    pub pairs: BTreeMap<String, SyntheticLangSpec>,
    /// Pair used by single-pair commands; the first by name when absent.
    pub pair: Option<String>,
    /// Body vocabulary and pretraining text also cover every source
    /// language, so ungrafted recipes can read sources directly.
    pub multilingual_body: bool,
    pub data: DataSizes,
    pub noise: NoiseSpec,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
    /// Grafted in front of the body when present. Vocabulary size and
    /// output width are filled in from the data and body.
    pub input_module: Option<InputModuleConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut pretrain = TrainPlan::toy("finetune-all");
        pretrain.max_steps = 800;
        pretrain.schedule = Schedule::inverse_sqrt(200, 2e-3);
        let mut finetune = TrainPlan::toy("bart-frozen");
        finetune.max_steps = 400;
        RunConfig {
            seed: 0,
            profile: Profile::Toy,
            model: ModelConfig::toy(0),
            pairs: BTreeMap::from([("cipher-en".to_string(), SyntheticLangSpec::toy(1))]),
            pair: None,
            multilingual_body: false,
            data: DataSizes::default(),
            noise: NoiseSpec::toy(),
            pretrain,
            finetune,
            input_module: Some(InputModuleConfig::toy(64, 0)),
        }
    }
}

impl RunConfig {
    /// Three ciphers of one target language, no reordering.
    pub fn multilingual_toy() -> Self {
        let pairs = (1..=3)
            .map(|k| {
                let spec = SyntheticLangSpec {
                    reorder: Reorder::None,
                    ..SyntheticLangSpec::toy(k)
                };
                (format!("l{k}-en"), spec)
            })
            .collect();
        let mut finetune = TrainPlan::toy("finetune-all");
        finetune.selection = Selection::FixedStep;
        RunConfig {
            pairs,
            multilingual_body: true,
            input_module: None,
            finetune,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("at least one language pair is required".into()));
        }
        let first = self.pairs.values().next().map(|s| (s.grammar_seed, s.n_words));
        if self.pairs.values().any(|s| Some((s.grammar_seed, s.n_words)) != first) {
            return Err(Error::Config("all pairs must share one target language".into()));
        }
        if let Some(p) = &self.pair {
            if !self.pairs.contains_key(p) {
                return Err(Error::Config(format!("unknown pair `{p}`")));
            }
        }
        self.noise.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    pub fn pair_name(&self) -> Result<&str> {
        match &self.pair {
            Some(p) => Ok(p),
            None => self
                .pairs
                .keys()
                .next()
                .map(String::as_str)
                .ok_or_else(|| Error::Config("no language pairs".into())),
        }
    }
}

/// Materialised languages and vocabularies of a run.
pub struct Corpora {
    pub languages: BTreeMap<String, SyntheticLanguage>,
    /// Body vocabulary: target words, plus every source language's words
    /// for a multilingual body.
    pub body_vocab: Vocab,
    multilingual: bool,
    sizes: DataSizes,
}

impl Corpora {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let languages = config
            .pairs
            .iter()
            .map(|(k, s)| Ok((k.clone(), SyntheticLanguage::new(s.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let first = languages.values().next().ok_or_else(|| Error::Config("no language pairs".into()))?;
        let mut words: Vec<String> = first.target_vocab().tokens()[N_SPECIAL..].to_vec();
        if config.multilingual_body {
            let mut seen: HashSet<String> = words.iter().cloned().collect();
            for lang in languages.values() {
                for w in &lang.source_vocab().tokens()[N_SPECIAL..] {
                    if seen.insert(w.clone()) {
                        words.push(w.clone());
                    }
                }
            }
        }
        Ok(Corpora {
            languages,
            body_vocab: Vocab::from_words(words)?,
            multilingual: config.multilingual_body,
            sizes: config.data.clone(),
        })
    }

    fn language(&self, pair: &str) -> Result<&SyntheticLanguage> {
        self.languages
            .get(pair)
            .ok_or_else(|| Error::Config(format!("unknown pair `{pair}`")))
    }

    /// Vocabulary of the ids fed to the model as source for `pair`: the
    /// language's own words when grafted, otherwise the body vocabulary.
    pub fn source_vocab(&self, pair: &str, grafted: bool) -> Result<Vocab> {
        let lang = self.language(pair)?;
        Ok(if grafted { lang.source_vocab() } else { self.body_vocab.clone() })
    }

    fn remap_source(&self, lang: &SyntheticLanguage, src: Vec<u32>, grafted: bool) -> Vec<u32> {
        if grafted {
            return src;
        }
        let own = lang.source_vocab();
        src.iter()
            .map(|&i| self.body_vocab.id(own.token(i).unwrap_or_default()))
            .collect()
    }

    /// Train/valid/test pairs of word ids for `pair`.
    pub fn bilingual(&self, pair: &str, grafted: bool) -> Result<BilingualData> {
        if !grafted && !self.multilingual {
            return Err(Error::Config(
                "an ungrafted model reads sources with the body vocabulary; enable multilingual_body".into(),
            ));
        }
        let lang = self.language(pair)?;
        let gen = |split, n| {
            lang.gen_parallel(split, n)
                .into_iter()
                .map(|p| (self.remap_source(lang, p.src, grafted), p.tgt))
                .collect::<Vec<_>>()
        };
        Ok(BilingualData {
            train: gen(Split::Train, self.sizes.n_train),
            valid: gen(Split::Valid, self.sizes.n_valid),
            test: gen(Split::Test, self.sizes.n_test),
        })
    }

    /// Denoising text `(train, valid)`: target-language sentences, then each
    /// source language's sentences for a multilingual body.
    pub fn monolingual(&self) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        let first = self.languages.values().next().ok_or_else(|| Error::Config("no language pairs".into()))?;
        let mut train = first.gen_monolingual(Split::Train, self.sizes.n_mono);
        let mut valid = first.gen_monolingual(Split::Valid, self.sizes.n_mono_valid);
        if self.multilingual {
            for lang in self.languages.values() {
                let even = |n: usize| n + n % 2;
                for (out, split, n) in [
                    (&mut train, Split::Train, even(self.sizes.n_mono)),
                    (&mut valid, Split::Valid, even(self.sizes.n_mono_valid)),
                ] {
                    // Keeps two-sentence documents within one language.
                    if out.len() % 2 == 1 {
                        out.pop();
                    }
                    // Offset past the sentences the parallel data draws.
                    let skip = match split {
                        Split::Train => self.sizes.n_train,
                        _ => self.sizes.n_valid.max(self.sizes.n_test),
                    };
                    let pairs = lang.gen_parallel(split, skip + n);
                    out.extend(pairs.into_iter().skip(skip).map(|p| self.remap_source(lang, p.src, false)));
                }
            }
        }
        Ok((train, valid))
    }

    /// Body configuration sized to the body vocabulary.
    pub fn model_config(&self, config: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.body_vocab.len(),
            ..config.model.clone()
        }
    }

    /// Input-module configuration for `pair`, sized to its source words
    /// and the body width.
    pub fn input_module(&self, config: &RunConfig, pair: &str) -> Result<Option<InputModuleConfig>> {
        let Some(im) = &config.input_module else {
            return Ok(None);
        };
        Ok(Some(InputModuleConfig {
            src_vocab_size: self.language(pair)?.source_vocab().len(),
            d_out: config.model.d_model,
            ..im.clone()
        }))
    }
}

/// Checkpoint metadata: vocabularies needed to read and write text.
pub fn vocab_meta(source: &Vocab, target: &Vocab, extra: serde_json::Value) -> serde_json::Value {
    let words = |v: &Vocab| v.tokens()[N_SPECIAL..].to_vec();
    let mut meta = serde_json::json!({
        "source_words": words(source),
        "target_words": words(target),
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    meta
}

/// `(source, target)` vocabularies stored by [`vocab_meta`].
pub fn vocabs_from_meta(meta: &serde_json::Value) -> Result<(Vocab, Vocab)> {
    let get = |key: &str| -> Result<Vocab> {
        let words: Vec<String> = serde_json::from_value(
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))?,
        )?;
        Vocab::from_words(words)
    };
    Ok((get("source_words")?, get("target_words")?))
}

/// A freshly initialised body sized for the run.
pub fn fresh_body(corpora: &Corpora, config: &RunConfig, seed: u64) -> Result<Seq2SeqModel<f32>> {
    Seq2SeqModel::build(corpora.model_config(config), seed)
}

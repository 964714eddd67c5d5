//! Freezing policies over parameter paths, the shipped recipe catalog and
//! trainable-memory accounting.

mod pattern;

pub use pattern::Pattern;

use crate::adapters::{AdapterKind, AdapterPlacement};
use crate::error::{Error, Result};
use crate::model::params::{CountMode, ParamLayout, ParamTree};
use crate::tensor::Float;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One `pattern -> trainable` rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: Pattern,
    pub trainable: bool,
}

/// Adapters a recipe expects to find in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDirective {
    pub placement: AdapterPlacement,
    pub kind: AdapterKind,
}

/// Ordered rules; the last matching rule decides, unmatched paths stay
/// trainable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    #[serde(default)]
    pub name: Option<String>,
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub adapters: Option<AdapterDirective>,
    /// The recipe only makes sense on a model with a grafted input module.
    #[serde(default)]
    pub requires_graft: bool,
    /// Extra module subset this recipe unfreezes on top of its base recipe.
    #[serde(default)]
    pub subset: Vec<Pattern>,
}

pub const RECIPES: &[&str] = &[
    "finetune-all",
    "bart-frozen",
    "bart-frozen+enc-adapters",
    "mbart-freeze-decoder",
    "mbart-freeze-encoder",
    "mbart-freeze-decoder+decoder-adapters",
    "mbart-freeze-encoder+encoder-adapters",
    "ft-enc-attn",
    "ft-self-attn",
    "ft-last3",
];

fn pat(s: &str) -> Pattern {
    Pattern::parse(s).expect("built-in pattern")
}

impl FreezePolicy {
    /// Freezes nothing.
    pub fn empty() -> Self {
        FreezePolicy::default()
    }

    pub fn rule(mut self, pattern: &str, trainable: bool) -> Result<Self> {
        self.rules.push(Rule {
            pattern: Pattern::parse(pattern)?,
            trainable,
        });
        Ok(self)
    }

    fn rules(mut self, patterns: &[&str], trainable: bool) -> Self {
        for p in patterns {
            self.rules.push(Rule {
                pattern: pat(p),
                trainable,
            });
        }
        self
    }

    fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    fn with_adapters(mut self, placement: AdapterPlacement) -> Self {
        self.adapters = Some(AdapterDirective {
            placement,
            kind: AdapterKind::Plain,
        });
        self
    }

    fn unfreezing_subset(mut self, patterns: &[String]) -> Self {
        for p in patterns {
            self.rules.push(Rule {
                pattern: pat(p),
                trainable: true,
            });
            self.subset.push(pat(p));
        }
        self
    }

    pub fn trainable(&self, path: &str) -> bool {
        self.rules
            .iter()
            .rev()
            .find(|r| r.pattern.matches(path))
            .is_none_or(|r| r.trainable)
    }

    pub fn apply<F: Float>(&self, params: &mut ParamTree<F>) {
        for (_, path, t) in params.iter_mut() {
            t.set_requires_grad(self.trainable(path));
        }
    }

    pub fn apply_layout(&self, layout: &mut ParamLayout) {
        for e in &mut layout.entries {
            e.trainable = self.trainable(&e.path);
        }
    }

    /// Trainable pretrained-body scalars inside the recipe's extra subset.
    /// Adapters that fall inside it belong to the base recipe and are skipped.
    pub fn subset_count(&self, layout: &ParamLayout, mode: CountMode) -> usize {
        let adapter = pat("**/adapter/**");
        layout
            .entries
            .iter()
            .filter(|e| self.subset.iter().any(|p| p.matches(&e.path)) && !adapter.matches(&e.path))
            .filter(|e| self.trainable(&e.path))
            .filter(|e| mode == CountMode::All || e.is_matrix())
            .map(|e| e.numel())
            .sum()
    }

    /// Built-in recipe. `n_dec_layers` locates the last three decoder layers.
    pub fn recipe(name: &str, n_dec_layers: usize) -> Result<Self> {
        let norms = "**/*layer_norm/*";
        let new_modules = ["**/adapter/**", "input_module/**"];
        let freeze_decoder = || {
            FreezePolicy::empty()
                .rules(&["**"], false)
                .rules(
                    &[
                        "encoder/**",
                        "embed_tokens/*",
                        "**/embed_positions/*",
                        norms,
                        "encoder/layer0/self_attn/**",
                        "decoder/layer0/self_attn/**",
                        "decoder/output_projection/*",
                    ],
                    true,
                )
                .rules(&new_modules, true)
        };
        let freeze_encoder = || {
            FreezePolicy::empty()
                .rules(&["**"], false)
                .rules(
                    &[
                        "decoder/**",
                        "embed_tokens/*",
                        "**/embed_positions/*",
                        norms,
                        "encoder/layer0/self_attn/**",
                        "decoder/layer0/self_attn/**",
                    ],
                    true,
                )
                .rules(&new_modules, true)
        };
        let base = || freeze_decoder().with_adapters(AdapterPlacement::Decoder);
        let bart_frozen = || {
            let mut p = FreezePolicy::empty()
                .rules(&["**"], false)
                .rules(&[norms, "encoder/layer0/self_attn/**"], true)
                .rules(&new_modules, true);
            p.requires_graft = true;
            p
        };
        let policy = match name {
            "finetune-all" => FreezePolicy::empty(),
            "bart-frozen" => bart_frozen(),
            "bart-frozen+enc-adapters" => bart_frozen().with_adapters(AdapterPlacement::Encoder),
            "mbart-freeze-decoder" => freeze_decoder(),
            "mbart-freeze-encoder" => freeze_encoder(),
            "mbart-freeze-decoder+decoder-adapters" => base(),
            "mbart-freeze-encoder+encoder-adapters" => {
                freeze_encoder().with_adapters(AdapterPlacement::Encoder)
            }
            "ft-enc-attn" => base().unfreezing_subset(&["decoder/*/encoder_attn/**".into()]),
            "ft-self-attn" => base().unfreezing_subset(&["decoder/*/self_attn/**".into()]),
            "ft-last3" => {
                if n_dec_layers < 3 {
                    return Err(Error::Config(format!(
                        "ft-last3 needs at least 3 decoder layers, model has {n_dec_layers}"
                    )));
                }
                let last: Vec<String> = (n_dec_layers - 3..n_dec_layers)
                    .map(|i| format!("decoder/layer{i}/**"))
                    .collect();
                base().unfreezing_subset(&last)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown recipe `{other}`; expected one of {} or a recipe file",
                    RECIPES.join(", ")
                )))
            }
        };
        Ok(policy.named(name))
    }

    /// A catalog name, or else a path to a recipe JSON file.
    pub fn resolve(name_or_path: &str, n_dec_layers: usize) -> Result<Self> {
        if RECIPES.contains(&name_or_path) {
            return Self::recipe(name_or_path, n_dec_layers);
        }
        let path = Path::new(name_or_path);
        if path.is_file() {
            return Self::load(path);
        }
        Self::recipe(name_or_path, n_dec_layers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Whether `has_graft` satisfies the recipe.
    pub fn check_graft(&self, has_graft: bool) -> Result<()> {
        if self.requires_graft && !has_graft {
            return Err(Error::Config(format!(
                "recipe `{}` freezes the body embeddings and needs a grafted input module",
                self.name.as_deref().unwrap_or("<file>")
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training-time bytes implied by a trainable/frozen split. Activations are
/// out of scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub params_total: usize,
    pub params_trainable: usize,
    pub bytes_params_total: usize,
    pub bytes_grads: usize,
    pub bytes_optimizer_state: usize,
    pub bytes_total: usize,
    pub trainable_fraction: f64,
}

/// Parameters always; gradients for trainable tensors; Adam keeps two
/// moments per trainable scalar, SGD none.
pub fn memory_report(layout: &ParamLayout, optimizer: OptimizerKind, bytes_per_scalar: usize) -> MemoryReport {
    let total = layout.total();
    let trainable = layout.count_trainable(CountMode::All);
    let bytes_params_total = total * bytes_per_scalar;
    let bytes_grads = trainable * bytes_per_scalar;
    let bytes_optimizer_state = match optimizer {
        OptimizerKind::Adam => 2 * bytes_grads,
        OptimizerKind::Sgd => 0,
    };
    MemoryReport {
        params_total: total,
        params_trainable: trainable,
        bytes_params_total,
        bytes_grads,
        bytes_optimizer_state,
        bytes_total: bytes_params_total + bytes_grads + bytes_optimizer_state,
        trainable_fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}

//! Parameter and memory accounting of recipes on shape-only layouts.

use crate::adapters::AdapterConfig;
use crate::error::Result;
use crate::freeze::{memory_report, FreezePolicy, MemoryReport, OptimizerKind, Pattern};
use crate::input_module::InputModuleConfig;
use crate::model::{describe, CountMode, Extension, ModelConfig, ParamLayout, Profile};
use serde::Serialize;

/// The structure a recipe implies on `config`: graft first when the recipe
/// needs one (or `graft` is given), then the recipe's adapters. Returns the
/// layout with the recipe's trainable flags applied.
pub fn recipe_layout(
    config: &ModelConfig,
    profile: Profile,
    recipe: &str,
    graft: Option<&InputModuleConfig>,
) -> Result<(ParamLayout, FreezePolicy)> {
    let policy = FreezePolicy::resolve(recipe, config.n_dec_layers)?;
    let mut extensions = Vec::new();
    let default_graft = match profile {
        Profile::Toy => InputModuleConfig::toy(config.d_model, config.vocab_size),
        _ => InputModuleConfig::large(config.vocab_size),
    };
    match graft {
        Some(g) => extensions.push(Extension::InputModule { config: g.clone() }),
        None if policy.requires_graft => extensions.push(Extension::InputModule {
            config: InputModuleConfig {
                d_out: config.d_model,
                ..default_graft
            },
        }),
        None => {}
    }
    if let Some(a) = policy.adapters {
        let config = match profile {
            Profile::Toy => AdapterConfig::toy(a.kind),
            _ => AdapterConfig::large(a.kind),
        };
        extensions.push(Extension::Adapters {
            placement: a.placement,
            config,
        });
    }
    let mut layout = describe(config, &extensions)?;
    policy.apply_layout(&mut layout);
    Ok((layout, policy))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubtreeCount {
    pub name: String,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamsReport {
    pub recipe: String,
    /// Counts per first path segment, in declaration order.
    pub subtrees: Vec<SubtreeCount>,
    pub total: usize,
    pub trainable: usize,
    pub trainable_bias_free: usize,
    /// Matrices of the first encoder layer's self-attention.
    pub first_encoder_self_attn_bias_free: usize,
    /// Trainable layer-norm scalars (gains and biases) of the body.
    pub layer_norm_trainable: usize,
    /// `24 * 2d`: one gain and bias per layer for 24 layers.
    pub layer_norm_nominal: usize,
    /// Trainable matrices of the recipe's extra subset, if it has one.
    pub subset_bias_free: Option<usize>,
}

fn pattern(s: &str) -> Pattern {
    Pattern::parse(s).expect("built-in pattern")
}

pub fn params_report(layout: &ParamLayout, policy: &FreezePolicy, recipe: &str, d_model: usize) -> ParamsReport {
    let mut subtrees: Vec<SubtreeCount> = Vec::new();
    for e in &layout.entries {
        let name = e.path.split('/').next().unwrap_or_default();
        let idx = match subtrees.iter().position(|s| s.name == name) {
            Some(i) => i,
            None => {
                subtrees.push(SubtreeCount {
                    name: name.to_string(),
                    trainable: 0,
                    frozen: 0,
                });
                subtrees.len() - 1
            }
        };
        if e.trainable {
            subtrees[idx].trainable += e.numel();
        } else {
            subtrees[idx].frozen += e.numel();
        }
    }
    let norms = pattern("**/*layer_norm/*");
    ParamsReport {
        recipe: recipe.to_string(),
        subtrees,
        total: layout.total(),
        trainable: layout.count_trainable(CountMode::All),
        trainable_bias_free: layout.count_trainable(CountMode::BiasFree),
        first_encoder_self_attn_bias_free: layout.count(&pattern("encoder/layer0/self_attn/**"), CountMode::BiasFree),
        layer_norm_trainable: layout
            .entries
            .iter()
            .filter(|e| e.trainable && norms.matches(&e.path) && !e.path.starts_with("input_module/"))
            .map(|e| e.numel())
            .sum(),
        layer_norm_nominal: 24 * 2 * d_model,
        subset_bias_free: (!policy.subset.is_empty()).then(|| policy.subset_count(layout, CountMode::BiasFree)),
    }
}

/// Recipes compared by `memory` on a profile, widest first.
pub fn memory_recipes(profile: Profile) -> &'static [&'static str] {
    match profile {
        Profile::Bart => &["finetune-all", "bart-frozen+enc-adapters", "bart-frozen"],
        _ => &[
            "finetune-all",
            "ft-enc-attn",
            "ft-self-attn",
            "ft-last3",
            "mbart-freeze-encoder+encoder-adapters",
            "mbart-freeze-encoder",
            "mbart-freeze-decoder+decoder-adapters",
            "mbart-freeze-decoder",
        ],
    }
}

/// Adam, 4-byte scalars; rows sorted by `bytes_total`, largest first.
pub fn memory_table(config: &ModelConfig, profile: Profile, recipes: &[&str]) -> Result<Vec<(String, MemoryReport)>> {
    let mut rows = recipes
        .iter()
        .map(|r| {
            let (layout, _) = recipe_layout(config, profile, r, None)?;
            Ok((r.to_string(), memory_report(&layout, OptimizerKind::Adam, 4)))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.1.bytes_total.cmp(&a.1.bytes_total).then(a.0.cmp(&b.0)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bart_frozen_counts() {
        let c = ModelConfig::bart();
        let (layout, policy) = recipe_layout(&c, Profile::Bart, "bart-frozen", None).unwrap();
        let r = params_report(&layout, &policy, "bart-frozen", 1024);
        assert_eq!(r.first_encoder_self_attn_bias_free, 4 * 1024 * 1024);
        assert_eq!(r.layer_norm_nominal, 49_152);
        // 2 norms per encoder layer, 3 per decoder layer, 2 embedding norms.
        assert_eq!(r.layer_norm_trainable, (12 * 2 + 12 * 3 + 2) * 2 * 1024);
        assert!(r.subtrees.iter().any(|s| s.name == "input_module" && s.frozen == 0));
        assert_eq!(r.subtrees.iter().map(|s| s.trainable + s.frozen).sum::<usize>(), r.total);
    }

    #[test]
    fn mbart_memory_order() {
        let rows = memory_table(&ModelConfig::mbart(), Profile::Mbart, memory_recipes(Profile::Mbart)).unwrap();
        let pos = |n: &str| rows.iter().position(|(r, _)| r == n).unwrap();
        assert!(pos("finetune-all") < pos("ft-enc-attn"));
        assert!(pos("ft-enc-attn") < pos("mbart-freeze-encoder"));
        assert!(pos("mbart-freeze-encoder") < pos("mbart-freeze-decoder"));
    }
}

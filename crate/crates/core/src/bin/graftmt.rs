use clap::{Args, Parser, Subcommand};
use graftmt::accounting::{memory_recipes, memory_table, params_report, recipe_layout};
use graftmt::data::{write_lines, write_parallel};
use graftmt::freeze::FreezePolicy;
use graftmt::model::checkpoint;
use graftmt::model::{ModelConfig, Profile, Seq2SeqModel};
use graftmt::pipeline::{fresh_body, vocab_meta, vocabs_from_meta, Corpora, RunConfig};
use graftmt::train::{
    decode_all, evaluate, finetune_bilingual, paired_bootstrap, pretrain_denoise, round_robin, MetricsLog,
};
use graftmt::{Error, Result};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "graftmt", version, about = "Grafting, adapters and selective freezing for seq2seq transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in recipe name or a policy JSON file.
    #[arg(long)]
    recipe: Option<String>,
    #[arg(long, value_parser = ["toy", "bart", "mbart"])]
    profile: Option<String>,
    /// Beam width for decoding.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpora and vocabularies as text.
    GenData(Common),
    /// Denoising pretraining of a body.
    Pretrain(Common),
    /// Bilingual fine-tuning; starts from random weights without --checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Multilingual fine-tuning, one batch per pair per update.
    RoundRobin {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Translate a file of whitespace-separated source sentences.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a checkpoint on the configured test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for a paired bootstrap comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Trainable and frozen parameter counts under a recipe.
    Params(Common),
    /// Training-memory comparison of recipes.
    Memory(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    c.pretrain.seed = c.seed;
    c.finetune.seed = c.seed;
    if let Some(r) = &common.recipe {
        c.finetune.recipe = r.clone();
    }
    if let Some(b) = common.beam {
        c.finetune.beam = b;
    }
    if let Some(p) = &common.profile {
        c.profile = p.parse()?;
        if c.profile != Profile::Toy {
            c.model = ModelConfig::for_profile(c.profile, 0);
        }
    }
    c.validate()?;
    FreezePolicy::resolve(&c.finetune.recipe, c.model.n_dec_layers)?;
    Ok(c)
}

fn out_dir(common: &Common, config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&common.output_dir)?;
    config.save(&common.output_dir.join("config.json"))?;
    Ok(common.output_dir.clone())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let config = resolve(common)?;
    let dir = out_dir(common, &config)?;
    let corpora = Corpora::new(&config)?;
    let grafted = config.input_module.is_some();
    corpora.body_vocab.save(&dir.join("body.vocab"))?;
    let (train, valid) = corpora.monolingual()?;
    for (name, sents) in [("mono.train.txt", train), ("mono.valid.txt", valid)] {
        let lines: Vec<String> = sents.iter().map(|s| corpora.body_vocab.decode(s)).collect();
        write_lines(&dir.join(name), &lines)?;
    }
    for pair in config.pairs.keys() {
        let sv = corpora.source_vocab(pair, grafted)?;
        sv.save(&dir.join(format!("{pair}.src.vocab")))?;
        let data = corpora.bilingual(pair, grafted)?;
        for (split, pairs) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
            let text: Vec<(String, String)> = pairs
                .iter()
                .map(|(s, t)| (sv.decode(s), corpora.body_vocab.decode(t)))
                .collect();
            write_parallel(
                &dir.join(format!("{pair}.{split}.src")),
                &dir.join(format!("{pair}.{split}.tgt")),
                &text,
            )?;
        }
    }
    println!("wrote corpora for {} pair(s) to {}", config.pairs.len(), dir.display());
    Ok(())
}

fn pretrain(common: &Common) -> Result<()> {
    let config = resolve(common)?;
    let dir = out_dir(common, &config)?;
    let corpora = Corpora::new(&config)?;
    let (train, valid) = corpora.monolingual()?;
    let mut model = fresh_body(&corpora, &config, config.seed)?;
    let mut log = MetricsLog::to_file(&dir.join("metrics.jsonl"))?;
    let (summary, _) = pretrain_denoise(&mut model, &train, &valid, &config.noise, &config.pretrain, None, &mut log)?;
    let meta = vocab_meta(&corpora.body_vocab, &corpora.body_vocab, json!({"step": summary.selected_step}));
    checkpoint::save(&model, &dir.join("body.ckpt"), meta)?;
    write_json(&dir.join("report.json"), &summary)?;
    println!(
        "valid NLL {:.4} -> {:.4} (selected step {})",
        summary.initial_valid_nll, summary.best_valid_nll, summary.selected_step
    );
    Ok(())
}

fn load_or_fresh(ckpt: Option<&Path>, corpora: &Corpora, config: &RunConfig) -> Result<Seq2SeqModel<f32>> {
    match ckpt {
        Some(p) => {
            let (m, header) = checkpoint::load::<f32>(p)?;
            let (_, target) = vocabs_from_meta(&header.meta)?;
            if target != corpora.body_vocab {
                return Err(Error::Config(format!(
                    "{} was trained with a different body vocabulary",
                    p.display()
                )));
            }
            Ok(m)
        }
        None => fresh_body(corpora, config, config.seed),
    }
}

fn finetune(common: &Common, ckpt: Option<&Path>) -> Result<()> {
    let config = resolve(common)?;
    let dir = out_dir(common, &config)?;
    let corpora = Corpora::new(&config)?;
    let pair = config.pair_name()?.to_string();
    let graft = corpora.input_module(&config, &pair)?;
    let data = corpora.bilingual(&pair, graft.is_some())?;
    let mut model = load_or_fresh(ckpt, &corpora, &config)?;
    // Grafted modules and adapters are initialised from the run seed.
    model.set_seed(config.seed);
    let mut log = MetricsLog::to_file(&dir.join("metrics.jsonl"))?;
    let grafted = graft.is_some();
    let (summary, result) = finetune_bilingual(&mut model, &data, &config.finetune, graft, &mut log)?;
    let sv = corpora.source_vocab(&pair, grafted)?;
    let meta = vocab_meta(&sv, &corpora.body_vocab, json!({"step": summary.selected_step, "pair": pair}));
    checkpoint::save(&model, &dir.join("model.ckpt"), meta)?;
    let hyps: Vec<String> = result.hypotheses.iter().map(|h| corpora.body_vocab.decode(h)).collect();
    write_lines(&dir.join("test.hyp"), &hyps)?;
    write_json(&dir.join("report.json"), &json!({"summary": summary, "test": result}))?;
    println!(
        "{pair}: BLEU {:.2}, exact match {:.3} on {} sentences",
        result.bleu, result.exact_match, result.n
    );
    Ok(())
}

fn round_robin_cmd(common: &Common, ckpt: Option<&Path>) -> Result<()> {
    let config = resolve(common)?;
    let dir = out_dir(common, &config)?;
    let corpora = Corpora::new(&config)?;
    if config.input_module.is_some() {
        return Err(Error::Config("round-robin trains one shared body; remove input_module".into()));
    }
    let pairs = config
        .pairs
        .keys()
        .map(|p| Ok((p.clone(), corpora.bilingual(p, false)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut model = load_or_fresh(ckpt, &corpora, &config)?;
    let mut log = MetricsLog::to_file(&dir.join("metrics.jsonl"))?;
    let (summary, results) = round_robin(&mut model, &pairs, &config.finetune, None, &mut log)?;
    let meta = vocab_meta(&corpora.body_vocab, &corpora.body_vocab, json!({"step": summary.selected_step}));
    checkpoint::save(&model, &dir.join("model.ckpt"), meta)?;
    write_json(&dir.join("report.json"), &json!({"summary": summary, "test": results}))?;
    println!("{} updates, {} forward/backward passes", summary.updates, summary.passes);
    for (p, r) in &results {
        println!("{p}: BLEU {:.2}", r.bleu);
    }
    Ok(())
}

fn translate_cmd(common: &Common, ckpt: &Path, input: &Path) -> Result<()> {
    let beam = common.beam.unwrap_or(5);
    fs::create_dir_all(&common.output_dir)?;
    let (mut model, header) = checkpoint::load::<f32>(ckpt)?;
    model.set_mode(graftmt::tensor::Mode::Eval);
    let (source, target) = vocabs_from_meta(&header.meta)?;
    let sources: Vec<Vec<u32>> = graftmt::data::read_lines(input)?
        .iter()
        .map(|l| source.encode(l))
        .collect();
    let decoded = decode_all(&model, &sources, beam)?;
    let lines: Vec<String> = decoded.iter().map(|d| target.decode(d.best.words())).collect();
    let out = common.output_dir.join("translations.txt");
    write_lines(&out, &lines)?;
    println!("wrote {} translations to {}", lines.len(), out.display());
    Ok(())
}

fn evaluate_cmd(common: &Common, ckpt: &Path, compare: Option<&Path>) -> Result<()> {
    let config = resolve(common)?;
    let dir = out_dir(common, &config)?;
    let corpora = Corpora::new(&config)?;
    let pair = config.pair_name()?.to_string();
    let score = |path: &Path| -> Result<graftmt::train::EvalResult> {
        let (mut m, _) = checkpoint::load::<f32>(path)?;
        let data = corpora.bilingual(&pair, m.is_grafted())?;
        evaluate(&mut m, &data.test, config.finetune.beam)
    };
    let mut result = score(ckpt)?;
    if let Some(other) = compare {
        let b = score(other)?;
        let refs = corpora.bilingual(&pair, true)?.test.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
        result.p_value = Some(paired_bootstrap(&result.hypotheses, &b.hypotheses, &refs, 1000, config.seed)?);
        println!("comparison BLEU {:.2}", b.bleu);
    }
    write_json(&dir.join("report.json"), &result)?;
    println!("{pair}: BLEU {:.2}, exact match {:.3}", result.bleu, result.exact_match);
    if let Some(p) = result.p_value {
        println!("paired bootstrap p = {p:.4}");
    }
    Ok(())
}

fn body_config(config: &RunConfig) -> Result<ModelConfig> {
    Ok(match config.profile {
        Profile::Toy => Corpora::new(config)?.model_config(config),
        p => ModelConfig::for_profile(p, 0),
    })
}

fn params_cmd(common: &Common) -> Result<()> {
    let config = resolve(common)?;
    let model = body_config(&config)?;
    let recipe = &config.finetune.recipe;
    let (layout, policy) = recipe_layout(&model, config.profile, recipe, None)?;
    let r = params_report(&layout, &policy, recipe, model.d_model);
    println!("recipe: {recipe}");
    println!("{:<16} {:>14} {:>14}", "subtree", "trainable", "frozen");
    for s in &r.subtrees {
        println!("{:<16} {:>14} {:>14}", s.name, s.trainable, s.frozen);
    }
    println!("{:<16} {:>14} {:>14}", "total", r.trainable, r.total - r.trainable);
    println!("trainable (bias-free): {}", r.trainable_bias_free);
    println!("first-encoder self-attention (bias-free): {}", r.first_encoder_self_attn_bias_free);
    println!(
        "layer-norm scalars unfrozen: {} (nominal 24*2d = {}; this body has 2 norms per encoder layer, 3 per decoder layer and one after each embedding)",
        r.layer_norm_trainable, r.layer_norm_nominal
    );
    if let Some(s) = r.subset_bias_free {
        println!("unfrozen subset (bias-free): {s}");
    }
    Ok(())
}

fn memory_cmd(common: &Common) -> Result<()> {
    // `--recipe` here is a comma-separated list, checked row by row.
    let config = resolve(&Common {
        recipe: None,
        ..common.clone()
    })?;
    let model = body_config(&config)?;
    let recipes: Vec<&str> = match &common.recipe {
        Some(r) => r.split(',').collect(),
        None => memory_recipes(config.profile).to_vec(),
    };
    let rows = memory_table(&model, config.profile, &recipes)?;
    println!(
        "{:<40} {:>14} {:>14} {:>16} {:>10}",
        "recipe", "trainable", "total", "bytes_total", "fraction"
    );
    for (name, m) in &rows {
        println!(
            "{:<40} {:>14} {:>14} {:>16} {:>10.4}",
            name, m.params_trainable, m.params_total, m.bytes_total, m.trainable_fraction
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(c) => pretrain(c),
        Command::Finetune { common, checkpoint } => finetune(common, checkpoint.as_deref()),
        Command::RoundRobin { common, checkpoint } => round_robin_cmd(common, checkpoint.as_deref()),
        Command::Translate {
            common,
            checkpoint,
            input,
        } => translate_cmd(common, checkpoint, input),
        Command::Evaluate {
            common,
            checkpoint,
            compare,
        } => evaluate_cmd(common, checkpoint, compare.as_deref()),
        Command::Params(c) => params_cmd(c),
        Command::Memory(c) => memory_cmd(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Bad configuration (unknown recipe, invalid values) is a usage error.
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

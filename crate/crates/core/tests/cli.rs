//! The `graftmt` binary end to end on tiny configurations.

use graftmt::model::ModelConfig;
use graftmt::pipeline::{DataSizes, RunConfig};
use std::path::Path;
use std::process::{Command, Output};

fn graftmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graftmt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny(mut c: RunConfig) -> RunConfig {
    c.model = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        ..c.model
    };
    if let Some(im) = &mut c.input_module {
        im.d_s = 16;
        im.d_ffn = 64;
        im.n_heads = 1;
    }
    c.data = DataSizes {
        n_mono: 200,
        n_mono_valid: 20,
        n_train: 200,
        n_valid: 20,
        n_test: 10,
    };
    for plan in [&mut c.pretrain, &mut c.finetune] {
        plan.max_steps = 10;
        plan.eval_interval = 5;
        plan.batch_tokens = 256;
    }
    c
}

#[test]
fn help_and_usage_errors() {
    assert!(graftmt(&["--help"]).status.success());
    assert_eq!(graftmt(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(graftmt(&["params", "--recipe", "no-such-recipe"]).status.code(), Some(2));
    assert_eq!(graftmt(&["params", "--profile", "huge"]).status.code(), Some(2));
}

#[test]
fn params_reports_first_layer_count() {
    let out = stdout(&graftmt(&["params", "--profile", "bart", "--recipe", "bart-frozen"]));
    assert!(out.contains("first-encoder self-attention (bias-free): 4194304"), "{out}");
    assert!(out.contains("nominal 24*2d = 49152"), "{out}");
    let out = stdout(&graftmt(&["params", "--profile", "mbart", "--recipe", "ft-last3"]));
    assert!(out.contains("unfrozen subset (bias-free): 50331648"), "{out}");
}

#[test]
fn memory_rows_are_ordered_by_bytes() {
    let out = stdout(&graftmt(&["memory", "--profile", "mbart"]));
    let rows: Vec<(String, u64)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_string(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows[0].0, "finetune-all");
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
    let pos = |n: &str| rows.iter().position(|(r, _)| r == n).unwrap();
    assert!(pos("ft-enc-attn") < pos("mbart-freeze-encoder"));
    assert!(pos("mbart-freeze-encoder") < pos("mbart-freeze-decoder"));
}

#[test]
fn bilingual_pipeline_translates_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.json");
    tiny(RunConfig::default()).save(&config).unwrap();
    let (pre, ft, data) = (root.join("pre"), root.join("ft"), root.join("data"));
    stdout(&graftmt(&["gen-data", "--config", p(&config), "--output-dir", p(&data)]));
    assert!(data.join("cipher-en.test.src").exists());
    stdout(&graftmt(&["pretrain", "--config", p(&config), "--output-dir", p(&pre)]));
    let body = pre.join("body.ckpt");
    let out = stdout(&graftmt(&[
        "finetune", "--config", p(&config), "--checkpoint", p(&body), "--output-dir", p(&ft),
    ]));
    assert!(out.contains("BLEU"), "{out}");
    let model = ft.join("model.ckpt");
    let metrics = std::fs::read_to_string(ft.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let input = data.join("cipher-en.test.src");
    let mut outputs = Vec::new();
    for run in ["t1", "t2"] {
        let out_dir = root.join(run);
        stdout(&graftmt(&[
            "translate", "--checkpoint", p(&model), "--input", p(&input), "--output-dir", p(&out_dir),
        ]));
        outputs.push(std::fs::read_to_string(out_dir.join("translations.txt")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].lines().count(), 10);

    let out = stdout(&graftmt(&[
        "evaluate", "--config", p(&config), "--checkpoint", p(&model), "--compare", p(&model), "--output-dir", p(&root.join("eval")),
    ]));
    assert!(out.contains("paired bootstrap p = 1.0000"), "{out}");
}

#[test]
fn finetune_rejects_a_checkpoint_with_another_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let a = root.join("a.json");
    let b = root.join("b.json");
    tiny(RunConfig::default()).save(&a).unwrap();
    tiny(RunConfig::multilingual_toy()).save(&b).unwrap();
    stdout(&graftmt(&["pretrain", "--config", p(&b), "--output-dir", p(&root.join("pre"))]));
    let body = root.join("pre").join("body.ckpt");
    let o = graftmt(&["finetune", "--config", p(&a), "--checkpoint", p(&body), "--output-dir", p(&root.join("ft"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn round_robin_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("multi.json");
    let mut c = tiny(RunConfig::multilingual_toy());
    c.finetune.max_test_sentences = Some(3);
    c.finetune.beam = 1;
    c.save(&config).unwrap();
    let out = stdout(&graftmt(&[
        "round-robin", "--config", p(&config), "--output-dir", p(&dir.path().join("rr")),
    ]));
    assert!(out.contains("10 updates, 30 forward/backward passes"), "{out}");
    for pair in ["l1-en", "l2-en", "l3-en"] {
        assert!(out.contains(&format!("{pair}: BLEU")), "{out}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rr").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["updates"], 10);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use monalab::experiment::{RunSummary, CHECKPOINT_FILE, SUMMARY_FILE};

fn monalab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monalab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn config_json(preset: &str, method: &str, dim: usize, epochs: usize, output_dir: &Path) -> String {
    format!(
        r#"{{
  "backbone": {{"preset": "{preset}"}},
  "method": {{"kind": "{method}", "intermediate_dim": {dim}}},
  "dataset": {{"num_classes": 4, "samples_per_class": 10, "image_size": 8, "seed": 3, "generator": "colored_blobs"}},
  "optimizer": {{"lr": 0.001}},
  "batch_size": 8,
  "epochs": {epochs},
  "seed": 11,
  "output_dir": {}
}}"#,
        serde_json::to_string(output_dir.to_str().unwrap()).unwrap()
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_row<'a>(text: &'a str, method: &str) -> Vec<&'a str> {
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .find(|cols| cols.first() == Some(&method))
        .unwrap_or_else(|| panic!("no {method} row in\n{text}"))
}

fn fraction_pct(row: &[&str]) -> f64 {
    row[3].trim_end_matches('%').parse().unwrap()
}

#[test]
fn count_params_swin_l_mona() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("counts.json");
    let out = monalab(&["count-params", "--preset", "swin-l", "--method", "mona", "--dim", "64", "--json", path_str(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let row = count_row(&text, "mona");
    assert_eq!(row[2], "5183328");
    assert!((fraction_pct(&row) - 2.56).abs() / 2.56 < 0.05);

    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed[0]["method"], "mona");
    assert_eq!(parsed[0]["trainable"], 5_183_328);
}

#[test]
fn count_params_fixed_is_zero_and_dims_scale() {
    let out = monalab(&["count-params", "--preset", "swin-l", "--method", "fixed"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let row = count_row(&text, "fixed");
    assert_eq!(row[2], "0");
    assert_eq!(fraction_pct(&row), 0.0);

    let pct = |dim: &str| {
        let out = monalab(&["count-params", "--preset", "swin-l", "--method", "mona", "--dim", dim]);
        fraction_pct(&count_row(&stdout(&out), "mona"))
    };
    let (p32, p128) = (pct("32"), pct("128"));
    assert!((p32 - 1.35).abs() / 1.35 < 0.05, "{p32}");
    assert!((p128 - 5.22).abs() / 5.22 < 0.05, "{p128}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&monalab(&["count-params", "--preset", "swin-xxl"])), 2);
    assert_eq!(code(&monalab(&["count-params", "--preset", "toy", "--method", "prompt"])), 2);
    assert_eq!(code(&monalab(&["frobnicate"])), 2);
    assert_eq!(code(&monalab(&["gradcheck"])), 2);
    assert_eq!(code(&monalab(&["gradcheck", "--module", "conv"])), 2);
    assert_eq!(code(&monalab(&["train", "--config", "/nonexistent/run.json"])), 2);
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    for module in ["mona", "adapter", "lora", "adaptformer", "block"] {
        let out = monalab(&["gradcheck", "--module", module, "--seed", "3", "--tol", "1e-4"]);
        assert_eq!(code(&out), 0, "{module}: {}", stdout(&out));
        assert!(stdout(&out).contains("PASS"));
    }
    let out = monalab(&["gradcheck", "--module", "mona", "--inject-fault"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("worst:"), "{}", stdout(&out));
}

#[test]
fn train_then_eval_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.json", &config_json("toy", "mona", 4, 3, &run_dir));
    let out = monalab(&["train", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["loss.csv", "accuracy.csv", SUMMARY_FILE, CHECKPOINT_FILE] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(run_dir.join(SUMMARY_FILE)).unwrap()).unwrap();

    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let out = monalab(&["eval", "--config", path_str(&cfg), "--checkpoint", path_str(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let acc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(acc["top1"].as_f64().unwrap(), summary.final_top1);
    assert_eq!(acc["top5"].as_f64().unwrap(), summary.final_top5);

    // Same checkpoint against a graph built from another preset.
    let other = write_config(dir.path(), "tiny.json", &config_json("tiny", "mona", 4, 3, &run_dir));
    let out = monalab(&["eval", "--config", path_str(&other), "--checkpoint", path_str(&ckpt)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn rerun_gives_identical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let summaries: Vec<RunSummary> = ["a", "b"]
        .iter()
        .map(|name| {
            let run_dir = dir.path().join(name);
            let cfg = write_config(dir.path(), &format!("{name}.json"), &config_json("toy", "adapter", 4, 2, &run_dir));
            assert_eq!(code(&monalab(&["train", "--config", path_str(&cfg)])), 0);
            let text = fs::read_to_string(run_dir.join(SUMMARY_FILE)).unwrap();
            serde_json::from_str::<RunSummary>(&text).unwrap().without_timing()
        })
        .collect();
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn missing_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let full = config_json("toy", "mona", 4, 1, dir.path());
    let no_epochs: String = full.lines().filter(|l| !l.contains("\"epochs\"")).collect::<Vec<_>>().join("\n");
    let cfg = write_config(dir.path(), "bad.json", &no_epochs);
    let out = monalab(&["train", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,dim,preset,trainable_fraction,final_top1"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn compare_dims_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "base.json", &config_json("toy", "mona", 4, 1, dir.path()));
    let csv = dir.path().join("dims.csv");
    let out = monalab(&["compare", "--config", path_str(&cfg), "--dims", "128,32,64", "--out", path_str(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_csv(&csv);
    let dims: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(dims, ["32", "64", "128"]);
    let fracs: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(fracs.windows(2).all(|w| w[0] < w[1]), "{fracs:?}");
}

#[test]
fn compare_presets_fraction_shrinks_with_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "base.json", &config_json("toy", "mona", 4, 1, dir.path()));
    let out = monalab(&["compare", "--config", path_str(&cfg), "--presets", "small,tiny"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_csv(&dir.path().join("compare.csv"));
    assert_eq!(rows.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["tiny", "small"]);
    let (tiny, small): (f64, f64) = (rows[0][3].parse().unwrap(), rows[1][3].parse().unwrap());
    assert!(small < tiny, "tiny {tiny} small {small}");
}

#[test]
fn compare_methods_in_a_fixed_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "base.json", &config_json("toy", "mona", 4, 1, dir.path()));
    let out = monalab(&["compare", "--config", path_str(&cfg), "--methods", "mona,fixed,full"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_csv(&dir.path().join("compare.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["full", "fixed", "mona"]);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), 0.0);
    // the axis flag is required
    assert_eq!(code(&monalab(&["compare", "--config", path_str(&cfg)])), 2);
}

#[test]
fn shipped_config_parses_and_round_trips() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_mona.json");
    let cfg = monalab::RunConfig::from_path(&path).unwrap();
    assert_eq!(monalab::RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
seed = 3

[dataset]
num_objects = 6
image_dim = 6
max_objects = 3
train_size = 24
validation_size = 8
eval_hallucination_size = 8
eval_general_size = 6

[model]
vocab_size = 26
d_model = 8
layers = 1
heads = 2
mlp_hidden = 16
visual_tokens = 2
image_dim = 6
max_context = 24
projection_hidden = 8

[sft]
steps = 10
batch_size = 4
log_interval = 5
optimizer = { kind = "adam" }

[dpo]
steps = 6
batch_size = 4
log_interval = 2

[dcd]
batch_size = 4
log_interval = 2

[decode]
max_len = 8
"#;

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        Self::with_config(CONFIG)
    }

    fn with_config(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("lab.toml"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("lab.toml");
        Command::new(env!("CARGO_BIN_EXE_dcd-lab"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(self.out())
            .env_remove("DCD_LAB_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn line_with<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines().find(|l| l.starts_with(prefix)).unwrap_or_else(|| panic!("no '{prefix}' in {text}"))
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_data_is_reproducible_and_counts_match() {
    let a = Lab::new();
    let b = Lab::new();
    let first = a.ok(&["gen-data"]);
    let second = b.ok(&["gen-data"]);
    assert_eq!(line_with(&first, "manifest sha256"), line_with(&second, "manifest sha256"));
    for (file, n) in [
        ("train.jsonl", 24),
        ("validation.jsonl", 8),
        ("eval_hallucination.jsonl", 8),
        ("eval_general.jsonl", 6),
    ] {
        let text = std::fs::read_to_string(a.out().join("data").join(file)).unwrap();
        assert_eq!(text.lines().count(), n, "{file}");
    }
    let reseeded = a.ok(&["gen-data", "--seed", "4"]);
    assert_ne!(line_with(&first, "manifest sha256"), line_with(&reseeded, "manifest sha256"));
}

#[test]
fn missing_seed_is_a_config_error_naming_the_field() {
    let lab = Lab::with_config(&CONFIG.replace("seed = 3", ""));
    let out = lab.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    // the flag can supply it
    lab.ok(&["gen-data", "--seed", "3"]);
}

#[test]
fn bad_values_and_unknown_keys_name_the_field() {
    let lab = Lab::with_config(&CONFIG.replace("steps = 10", "stepz = 10"));
    let out = lab.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));

    let lab = Lab::with_config(&CONFIG.replace("vocab_size = 26", "vocab_size = 30"));
    let out = lab.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.vocab_size"), "{}", stderr(&out));
}

#[test]
fn stages_refuse_to_run_without_their_inputs() {
    let lab = Lab::new();
    let out = lab.run(&["train-sft"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("gen-data"));

    lab.ok(&["gen-data"]);
    for stage in ["train-dcd", "train-dpo"] {
        let out = lab.run(&[stage]);
        assert_eq!(out.status.code(), Some(3));
        assert!(stderr(&out).contains("sft checkpoint"), "{}", stderr(&out));
    }
}

#[test]
fn training_is_reproducible_and_traces_have_one_row_per_interval() {
    let lab = Lab::new();
    lab.ok(&["gen-data"]);
    let first = lab.ok(&["train-sft"]);
    let again = lab.ok(&["train-sft"]);
    assert_eq!(line_with(&first, "checkpoint sha256"), line_with(&again, "checkpoint sha256"));
    assert_eq!(csv_rows(&lab.out().join("traces/sft.csv")), 10 / 5);

    lab.ok(&["train-dpo"]);
    assert_eq!(csv_rows(&lab.out().join("traces/dpo.csv")), 6 / 2);

    lab.ok(&["train-dcd"]);
    // one epoch over 24 pairs in batches of 4 is 6 steps, logged every 2
    assert_eq!(csv_rows(&lab.out().join("traces/dcd.csv")), 3);
}

#[test]
fn divergence_exits_with_the_numeric_code() {
    let lab = Lab::with_config(&CONFIG.replace("steps = 10", "steps = 10\nlr = 1e300"));
    lab.ok(&["gen-data"]);
    let out = lab.run(&["train-sft"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

fn table_rows(table: &str) -> Vec<Vec<String>> {
    table
        .lines()
        .take_while(|l| !l.is_empty())
        .filter(|l| !l.starts_with('-'))
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

#[test]
fn eval_reports_are_deterministic_and_match_the_table() {
    let lab = Lab::new();
    let out = lab.run(&["eval", "--methods", "greedy"]);
    assert_eq!(out.status.code(), Some(3));

    lab.ok(&["gen-data"]);
    lab.ok(&["train-sft"]);
    let out = lab.run(&["eval", "--methods", "greedy,dpo"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("'dpo'"), "{}", stderr(&out));

    let table = lab.ok(&["eval", "--methods", "greedy"]);
    let rows = table_rows(&table);
    assert_eq!(rows.len(), 2, "{table}");
    assert_eq!(rows[1][0], "greedy");
    let json_path = lab.out().join("reports/eval.json");
    let first = std::fs::read(&json_path).unwrap();
    lab.ok(&["eval", "--methods", "greedy"]);
    assert_eq!(first, std::fs::read(&json_path).unwrap());

    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let row = &json["methods"][0];
    let header = &rows[0];
    let cell = |name: &str| rows[1][header.iter().position(|h| h == name).unwrap()].clone();
    let fmt = |v: &serde_json::Value| format!("{:.4}", v.as_f64().unwrap());
    assert_eq!(cell("halluc_rate"), fmt(&row["hallucination"]["rate"]));
    assert_eq!(cell("adversarial_acc"), fmt(&row["existence"][2]["accuracy"]));
    assert_eq!(cell("general_acc"), fmt(&row["general"]["accuracy"]));
    assert_eq!(cell("logp_w"), fmt(&row["heldout_logp_w"]));

    let summary = lab.ok(&["report"]);
    assert!(summary.starts_with(&table));
    assert!(summary.contains("sft"));
}

#[test]
fn unknown_methods_list_the_valid_names() {
    let lab = Lab::new();
    let out = lab.run(&["eval", "--methods", "greedy,beam"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("beam"));
    for name in ["greedy", "vcd", "other-image", "dpo", "dcd-neg", "dcd-pos", "dcd-both"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn output_root_can_come_from_the_environment() {
    let lab = Lab::new();
    let root = lab.dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_dcd-lab"))
        .args(["gen-data", "--config"])
        .arg(lab.dir.path().join("lab.toml"))
        .env("DCD_LAB_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.join("data/manifest.json").exists());
}

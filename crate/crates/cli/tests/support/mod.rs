#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const PROVIDER_ID: &str = "fixture-llm";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn cli_fixture(name: &str) -> PathBuf {
    fixtures().join("cli").join(name)
}

/// Writes a replay-provider config into `dir` and returns its path.
pub fn write_config(dir: &Path, replay_store: &Path) -> PathBuf {
    let text = format!(
        r#"[[terminology]]
path = "{atc}"
preset = "atc"

[index]
dir = "index"
embedding_dimension = 256

[provider]
kind = "replay"
id = "{PROVIDER_ID}"
replay_path = "{store}"

[prices.{PROVIDER_ID}]
usd_per_1k_input_tokens = 0.15
usd_per_1k_output_tokens = 0.6

[pipeline]
defer_threshold = 0.35
parallelism = 4

[evaluation]
pareto_fraction = 0.8

[service]
bind = "127.0.0.1:0"
journal = "journal.jsonl"
"#,
        atc = fixtures().join("atc_mini.csv").display(),
        store = replay_store.display(),
    );
    let path = dir.join("codealign.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn codealign(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codealign"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Indexes and codes the 10-query fixture under replay; returns the
/// decisions bytes.
pub fn code_fixture(dir: &Path, method: &str) -> Vec<u8> {
    let config = write_config(dir, &cli_fixture("replay_store.jsonl"));
    ok(&codealign(&config, &["index"]));
    let out = dir.join("decisions.jsonl");
    let input = cli_fixture("queries10.jsonl");
    ok(&codealign(
        &config,
        &[
            "code",
            "--input",
            input.to_str().unwrap(),
            "--method",
            method,
            "--output",
            out.to_str().unwrap(),
        ],
    ));
    std::fs::read(out).unwrap()
}

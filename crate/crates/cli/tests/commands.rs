mod support;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde_json::Value;
use support::*;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), &cli_fixture("replay_store.jsonl"));
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> std::process::Output {
        codealign(&self.config, args)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn golden() -> PathBuf {
    cli_fixture("golden_align.jsonl")
}

fn items() -> PathBuf {
    cli_fixture("items10.jsonl")
}

#[test]
fn index_is_deterministic() {
    let env = Env::new();
    let first = ok(&env.run(&["index"]));
    let bm25 = std::fs::read(env.path("index/ATC.bm25.json")).unwrap();
    let dense = std::fs::read(env.path("index/ATC.dense.json")).unwrap();
    let second = ok(&env.run(&["index"]));
    assert_eq!(first, second);
    assert!(first.starts_with("ATC: 72 entries"), "{first}");
    assert_eq!(bm25, std::fs::read(env.path("index/ATC.bm25.json")).unwrap());
    assert_eq!(dense, std::fs::read(env.path("index/ATC.dense.json")).unwrap());
}

#[test]
fn code_without_index_points_at_index_command() {
    let env = Env::new();
    let out = env.run(&["code", "--input", s(&cli_fixture("queries10.jsonl")), "--output", s(&env.path("d.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codealign index"));
}

#[test]
fn missing_config_exits_2() {
    let out = codealign(Path::new("/nonexistent/codealign.toml"), &["index"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let env = Env::new();
    let text = std::fs::read_to_string(&env.config).unwrap() + "\n[extra]\nx = 1\n";
    std::fs::write(&env.config, text).unwrap();
    let out = env.run(&["index"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let env = Env::new();
    let out = env.run(&["code", "--input", "q.jsonl", "--output", "o.jsonl", "--method", "MAGIC"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_batch_writes_empty_output() {
    let env = Env::new();
    ok(&env.run(&["index"]));
    std::fs::write(env.path("empty.jsonl"), "").unwrap();
    let stdout = ok(&env.run(&["code", "--input", s(&env.path("empty.jsonl")), "--output", s(&env.path("out.jsonl"))]));
    assert!(stdout.starts_with("coded 0 queries"), "{stdout}");
    assert_eq!(std::fs::read(env.path("out.jsonl")).unwrap(), b"");
}

#[test]
fn all_failed_batch_exits_1() {
    let env = Env::new();
    ok(&env.run(&["index"]));
    let q = r#"{"query_id":"x","term":"zz unlisted herbal tea","route":"oral","system":"ATC","level":"L4"}"#;
    std::fs::write(env.path("bad.jsonl"), format!("{q}\n")).unwrap();
    let out = env.run(&["code", "--input", s(&env.path("bad.jsonl")), "--output", s(&env.path("out.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read_to_string(env.path("out.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn partial_failure_exits_0_and_reports_counts() {
    let env = Env::new();
    let bytes = code_fixture(env.dir.path(), "ALIGN");
    assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 10);
}

#[test]
fn evaluate_matches_hand_counted_table() {
    let env = Env::new();
    let out = env.path("report.json");
    let stdout = ok(&env.run(&["evaluate", "--decisions", s(&golden()), "--gold", s(&items()), "--output", s(&out)]));
    assert!(stdout.contains("L4"), "{stdout}");
    let report = json(&out);
    assert_eq!(report["levels"], serde_json::json!(["L1", "L2", "L3", "L4"]));
    assert_eq!(report["error_count"], 1);
    let overall = &report["splits"]["overall"];
    assert_eq!(overall["n_items"], 10);
    for (level, acc) in [("L1", 0.8), ("L2", 0.7), ("L3", 0.7), ("L4", 0.6)] {
        let a = overall["accuracy"][level]["mean"].as_f64().unwrap();
        assert!((a - acc).abs() < 1e-12, "{level}: {a} vs {acc}");
        let c = overall["set_coverage"][level]["mean"].as_f64().unwrap();
        assert!((c - 0.9).abs() < 1e-12, "{level} coverage {c}");
    }
    let common = report["splits"]["common"]["n_items"].as_u64().unwrap();
    let uncommon = report["splits"]["uncommon"]["n_items"].as_u64().unwrap();
    assert_eq!(common + uncommon, 10);
    assert!(report["cost_usd_total"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_levels_subset_and_csv() {
    let env = Env::new();
    let out = env.path("report.csv");
    ok(&env.run(&[
        "evaluate", "--decisions", s(&golden()), "--gold", s(&items()), "--output", s(&out), "--levels", "L1,L4",
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.contains("L1") && header.contains("L4"), "{header}");
    assert!(!header.contains("L2") && !header.contains("L3"), "{header}");
}

#[test]
fn evaluate_names_missing_decisions() {
    let env = Env::new();
    let partial: String = std::fs::read_to_string(golden())
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"q04\"") && !l.contains("\"q07\""))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(env.path("partial.jsonl"), partial).unwrap();
    let out = env.run(&[
        "evaluate", "--decisions", s(&env.path("partial.jsonl")), "--gold", s(&items()), "--output", s(&env.path("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("q04") && err.contains("q07"), "{err}");
}

#[test]
fn defer_curve_writes_both_policies() {
    let env = Env::new();
    let out = env.path("curve.csv");
    ok(&env.run(&[
        "defer-curve", "--decisions", s(&golden()), "--gold", s(&items()), "--output", s(&out), "--fractions", "0,0.3,1",
    ]));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let entropy: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[2] == "ENTROPY_BUDGET").collect();
    assert_eq!(entropy.len(), 3);
    // Errors count as maximally uncertain and wrong: 6/10 at zero. At 0.3 the
    // three most uncertain records (q10, q03, q05) go to review and count as
    // resolved, leaving only q08 wrong.
    assert_eq!(&entropy[0][1], "0.600000");
    assert_eq!(&entropy[1][1], "0.900000");
    assert_eq!(&entropy[2][1], "1.000000");
    let random = rows.iter().filter(|r| &r[2] == "RANDOM_BUDGET").count();
    assert_eq!(random, 3 * 10);
}

#[test]
fn calibrate_then_apply_conformal() {
    let env = Env::new();
    let cal = env.path("cal.json");
    let stdout = ok(&env.run(&[
        "calibrate", "--decisions", s(&golden()), "--gold", s(&items()), "--alpha", "0.1", "--output", s(&cal),
    ]));
    assert!(stdout.contains("calibrated on 9 decision(s) (1 skipped)"), "{stdout}");
    let c = json(&cal);
    let scores: Vec<f64> = c["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(scores.len(), 9);
    // n = 9 and alpha 0.1 put the quantile at rank 9: the largest score.
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(c["q_hat"].as_f64().unwrap(), max);

    let out = env.path("sets.jsonl");
    let stdout = ok(&env.run(&[
        "apply-conformal", "--decisions", s(&golden()), "--calibrator", s(&cal), "--output", s(&out),
    ]));
    assert!(stdout.starts_with("attached sets to 9 of 10"), "{stdout}");
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines() {
        let d: Value = serde_json::from_str(line).unwrap();
        if d["error"].is_null() {
            assert!(!d["conformal_set"].as_array().unwrap().is_empty());
        }
    }
}

#[test]
fn ablation_counts_sources() {
    let env = Env::new();
    let out = env.path("ablation.json");
    ok(&env.run(&["ablation", "--decisions", s(&golden()), "--gold", s(&items()), "--output", s(&out)]));
    let r = json(&out);
    assert_eq!(r["n_attributed"], 6);
    let pct = r["correct_source_pct"].as_object().unwrap();
    let total: f64 = pct.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 0.1);
    // q01, q02 and q04 won through codes the LLM proposed.
    assert!((pct["LLM"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    for v in r["pruned"].as_object().unwrap().values() {
        assert_eq!(v, 0, "nothing was rejected by the scripted verifier");
    }
}

#[test]
fn build_dataset_groups_and_emits_queries() {
    let env = Env::new();
    let raw = env.path("raw.csv");
    std::fs::write(
        &raw,
        "term,route,gold_code,study_id\n\
         Paracetamol,oral,N02BE01,s1\n\
         paracetamol ,oral,N02BE01,s2\n\
         paracetamol,oral,N02BA01,s3\n\
         ibuprofen,topical,M02AA13,s1\n",
    )
    .unwrap();
    let items = env.path("items.jsonl");
    let queries = env.path("queries.jsonl");
    let stdout = ok(&env.run(&[
        "build-dataset", "--raw", s(&raw), "--level", "L4", "--output", s(&items), "--queries", s(&queries),
    ]));
    assert_eq!(stdout.trim(), "4 raw record(s) -> 2 item(s)");
    let lines: Vec<Value> = std::fs::read_to_string(&items)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["query"]["term"], "ibuprofen");
    assert_eq!(lines[0]["gold_code"], "M02AA");
    assert_eq!(lines[1]["query"]["term"], "paracetamol");
    assert_eq!(lines[1]["gold_code"], "N02BE");
    assert_eq!(lines[1]["occurrence_count"], 3);
    assert_eq!(std::fs::read_to_string(&queries).unwrap().lines().count(), 2);

    let out = env.run(&["build-dataset", "--raw", s(&raw), "--level", "L9", "--output", s(&items)]);
    assert_eq!(out.status.code(), Some(2));
}

struct Served {
    child: Child,
    url: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(config: &Path, extra: &[&str]) -> Served {
    let mut child = Command::new(env!("CARGO_BIN_EXE_codealign"))
        .arg("--config")
        .arg(config)
        .arg("serve")
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    loop {
        line.clear();
        assert!(reader.read_line(&mut line).unwrap() > 0, "service exited before listening");
        if let Some(rest) = line.strip_prefix("review service listening on ") {
            let url = rest.split_whitespace().next().unwrap().to_string();
            return Served { child, url };
        }
    }
}

fn get(url: &str) -> Value {
    ureq::get(url).call().unwrap().body_mut().read_json().unwrap()
}

#[test]
fn serve_enqueues_and_persists_across_restart() {
    let env = Env::new();
    {
        let s1 = serve(&env.config, &["--enqueue", s(&golden())]);
        let health = get(&format!("{}/health", s1.url));
        assert_eq!(health["status"], "ok");
        assert_eq!(health["counts"]["pending"], 4, "{health}");
        let page = get(&format!("{}/queue", s1.url));
        let ids: Vec<&str> = page["items"].as_array().unwrap().iter().map(|i| i["record_id"].as_str().unwrap()).collect();
        assert_eq!(ids[0], "q10", "errors sort first as maximally uncertain");
        ureq::post(&format!("{}/items/q05/adjudicate", s1.url))
            .send_json(serde_json::json!({"code": "B01AC06", "reviewer": "r1"}))
            .unwrap();
    }
    let s2 = serve(&env.config, &[]);
    let item = get(&format!("{}/items/q05", s2.url));
    assert_eq!(item["status"], "ADJUDICATED");
    assert_eq!(item["adjudicated_code"], "B01AC");
    let health = get(&format!("{}/health", s2.url));
    assert_eq!(health["counts"]["pending"], 3);
}

#[test]
fn serve_on_busy_port_fails_clearly() {
    let env = Env::new();
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let out = env.run(&["serve", "--bind", &addr]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already in use"));
}

#[test]
fn demo_config_loads() {
    let config = codealign_cli::Config::load(&cli_fixture("codealign.toml")).unwrap();
    assert_eq!(config.provider.id, PROVIDER_ID);
    assert_eq!(config.pipeline.defer_threshold, Some(0.35));
    assert!(config.index.dir.ends_with("fixtures/cli/index"));
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(fixtures().join("../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
    let block = &readme[start..start + readme[start..].find("```").unwrap()];
    let config: codealign_cli::Config = toml::from_str(block).unwrap();
    assert_eq!(config.terminologies.len(), 2);
    assert!(config.terminologies.iter().all(|t| t.spec().is_ok()));
    assert_eq!(config.provider.token_ids["B"], 33);
    config.pipeline.validate().unwrap();
    config.prices.validate().unwrap();
}

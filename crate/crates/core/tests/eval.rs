mod common;

use std::collections::{BTreeMap, BTreeSet};

use approx::assert_abs_diff_eq;
use codealign::eval::*;
use codealign::llm::{PriceTable, UsageEntry};
use codealign::pipeline::{
    option_label, Candidate, CodingQuery, DecisionRecord, EntailmentVerdict, McqOption, McqSheet,
    Method, PredictionEntry,
};
use codealign::retrieval::Source;
use codealign::terminology::{Terminology, TerminologySpec};
use proptest::prelude::*;

use common::*;

fn item(id: &str, gold: &str, count: u64) -> EvalItem {
    EvalItem {
        query: query(id, id, None),
        gold_code: gold.into(),
        occurrence_count: count,
    }
}

fn decision(id: &str, chosen: Option<&str>, set: &[&str]) -> DecisionRecord {
    let mut d = DecisionRecord::new(query(id, id, None), Method::Align, 0);
    d.chosen = chosen.map(str::to_string);
    let n = set.len().max(1) as f64;
    d.prediction_set = set
        .iter()
        .map(|c| PredictionEntry {
            code: c.to_string(),
            probability: 1.0 / n,
        })
        .collect();
    d
}

fn levels() -> Vec<String> {
    ["L1", "L2", "L3", "L4"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn prefix_comparison_per_level() {
    let t = atc();
    let items = vec![item("q", "N02BA01", 1)];
    let ds = vec![decision("q", Some("N02BE01"), &["N02BE01"])];
    let acc: Vec<f64> = levels()
        .iter()
        .map(|l| accuracy_at_level(&ds, &items, &t, l).unwrap())
        .collect();
    assert_eq!(acc, vec![1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn absent_choice_is_incorrect_and_adjudication_overrides() {
    let t = atc();
    let items = vec![item("a", "N02BE", 1), item("b", "M01AE", 1)];
    let mut ds = vec![decision("a", None, &[]), decision("b", Some("N02BE"), &["N02BE"])];
    assert_eq!(accuracy_at_level(&ds, &items, &t, "L4").unwrap(), 0.0);
    assert_eq!(set_coverage_at_level(&ds, &items, &t, "L4").unwrap(), 0.0);
    ds[0].adjudicated_code = Some("N02BE".into());
    assert_eq!(accuracy_at_level(&ds, &items, &t, "L4").unwrap(), 0.5);
}

#[test]
fn coverage_counts_non_argmax_members() {
    let t = atc();
    let items = vec![item("q", "N02BA", 1)];
    let ds = vec![decision("q", Some("N02BE"), &["N02BE", "N02BA"])];
    assert_eq!(accuracy_at_level(&ds, &items, &t, "L4").unwrap(), 0.0);
    assert_eq!(set_coverage_at_level(&ds, &items, &t, "L4").unwrap(), 1.0);
}

#[test]
fn missing_decisions_listed() {
    let t = atc();
    let items = vec![item("a", "N02BE", 1), item("b", "N02BE", 1), item("c", "N02BE", 1)];
    let ds = vec![decision("b", None, &[])];
    match accuracy_at_level(&ds, &items, &t, "L4") {
        Err(EvalError::MissingDecision(ids)) => assert_eq!(ids, vec!["a", "c"]),
        other => panic!("unexpected {other:?}"),
    }
}

fn level5_codes(t: &Terminology) -> Vec<String> {
    t.entries_at_level("L5").map(|e| e.code.clone()).collect()
}

/// Random batch over the fixture: gold and predictions drawn from level-5
/// codes, some choices absent, prediction sets of 0-3 codes.
fn random_batch(t: &Terminology, seed: u64, n: usize) -> (Vec<EvalItem>, Vec<DecisionRecord>) {
    use rand::{Rng, SeedableRng};
    let codes = level5_codes(t);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut ds = Vec::new();
    for i in 0..n {
        let id = format!("q{i:03}");
        let gold = codes[rng.random_range(0..codes.len())].clone();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
            // Bias toward related codes so coarse levels often match.
            if rng.random_bool(0.3) {
                gold.clone()
            } else {
                codes[rng.random_range(0..codes.len())].clone()
            }
        };
        let set: Vec<String> = (0..rng.random_range(0..4)).map(|_| pick(&mut rng)).collect();
        let chosen = if rng.random_bool(0.15) {
            None
        } else if !set.is_empty() && rng.random_bool(0.7) {
            Some(set[0].clone())
        } else {
            Some(pick(&mut rng))
        };
        let set_refs: Vec<&str> = set.iter().map(String::as_str).collect();
        items.push(item(&id, &gold, 1));
        ds.push(decision(&id, chosen.as_deref(), &set_refs));
    }
    (items, ds)
}

#[test]
fn fifty_record_fixture_coverage_dominates_accuracy() {
    let t = atc();
    let (items, ds) = random_batch(&t, 50, 50);
    for level in levels() {
        // Per-record check, not just the aggregate.
        for (item, d) in items.iter().zip(&ds) {
            if is_correct(&t, d, &item.gold_code, &level) {
                assert!(is_covered(&t, d, &item.gold_code, &level));
            }
        }
        let acc = accuracy_at_level(&ds, &items, &t, &level).unwrap();
        let cov = set_coverage_at_level(&ds, &items, &t, &level).unwrap();
        assert!(cov >= acc, "{level}: {cov} < {acc}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn atc_metric_invariants(seed in any::<u64>(), n in 1usize..60) {
        let t = atc();
        let (items, ds) = random_batch(&t, seed, n);
        let mut prev = f64::INFINITY;
        for level in levels() {
            let acc = accuracy_at_level(&ds, &items, &t, &level).unwrap();
            let cov = set_coverage_at_level(&ds, &items, &t, &level).unwrap();
            prop_assert!(cov >= acc);
            prop_assert!(acc <= prev);
            prev = acc;
        }
    }

    #[test]
    fn meddra_accuracy_non_increasing(seed in any::<u64>(), n in 1usize..40) {
        use rand::{Rng, SeedableRng};
        let t = Terminology::load_path(fixture_path("meddra_mini.csv"), TerminologySpec::meddra()).unwrap();
        let pts: Vec<String> = t.entries_at_level("PT").map(|e| e.code.clone()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        let mut ds = Vec::new();
        for i in 0..n {
            let id = format!("m{i}");
            let gold = pts[rng.random_range(0..pts.len())].clone();
            let chosen = pts[rng.random_range(0..pts.len())].clone();
            let mut it = item(&id, &gold, 1);
            it.query.target_system = "MEDDRA".into();
            items.push(it);
            ds.push(decision(&id, Some(&chosen), &[&chosen]));
        }
        let mut prev = f64::INFINITY;
        for level in ["SOC", "HLGT", "HLT", "PT"] {
            let acc = accuracy_at_level(&ds, &items, &t, level).unwrap();
            prop_assert!(acc <= prev);
            prev = acc;
        }
    }

    #[test]
    fn pareto_partitions_exactly(counts in proptest::collection::vec(1u64..100, 1..40)) {
        let items: Vec<EvalItem> = counts
            .iter()
            .enumerate()
            .map(|(i, c)| item(&format!("q{i:02}"), "N02BE", *c))
            .collect();
        let split = pareto_split(&items, 0.8);
        let all: BTreeSet<String> = items.iter().map(|i| i.query.query_id.clone()).collect();
        let common: BTreeSet<String> = split.common.iter().cloned().collect();
        let uncommon: BTreeSet<String> = split.uncommon.iter().cloned().collect();
        prop_assert!(common.is_disjoint(&uncommon));
        prop_assert_eq!(common.union(&uncommon).cloned().collect::<BTreeSet<_>>(), all);
        prop_assert!(!common.is_empty());
    }

    #[test]
    fn dataset_construction_idempotent(picks in proptest::collection::vec((0usize..6, 0usize..3, 0usize..4), 1..60)) {
        let t = atc();
        let terms = ["ibuprofen", "Paracetamol", "aspirin ", "metformin", "omeprazole", "x"];
        let routes = [None, Some("oral"), Some("Topical")];
        let codes = ["M01AE01", "N02BE01", "N02BA01", "M02AA13"];
        let raw: Vec<RawCodedRecord> = picks
            .iter()
            .map(|(a, b, c)| RawCodedRecord {
                term: terms[*a].into(),
                route: routes[*b].map(str::to_string),
                gold_code: codes[*c].into(),
                study_id: "s".into(),
            })
            .collect();
        let items = build_eval_dataset(&raw, &t, "L4").unwrap();
        let expanded: Vec<RawCodedRecord> = items
            .iter()
            .flat_map(|i| {
                (0..i.occurrence_count).map(move |_| RawCodedRecord {
                    term: i.query.term.clone(),
                    route: i.query.route.clone(),
                    gold_code: i.gold_code.clone(),
                    study_id: "s".into(),
                })
            })
            .collect();
        prop_assert_eq!(build_eval_dataset(&expanded, &t, "L4").unwrap(), items);
    }
}

struct FixedCoder(BTreeMap<u64, Vec<DecisionRecord>>);

impl Coder for FixedCoder {
    fn code_batch(&self, _: Method, _: &[CodingQuery], seed: u64) -> Vec<DecisionRecord> {
        self.0[&seed].clone()
    }
}

fn settings() -> EvalSettings {
    EvalSettings {
        levels: levels(),
        pareto_fraction: 0.8,
        prices: PriceTable::default().with("p", 0.15, 0.60),
    }
}

fn four_items() -> Vec<EvalItem> {
    vec![
        item("a", "N02BE", 10),
        item("b", "M01AE", 5),
        item("c", "C10AA", 3),
        item("d", "A02BC", 2),
    ]
}

fn run_with(correct: &[bool], seed: u64) -> Vec<DecisionRecord> {
    four_items()
        .iter()
        .zip(correct)
        .map(|(i, ok)| {
            let code = if *ok { i.gold_code.as_str() } else { "R06AE" };
            let mut d = decision(&i.query.query_id, Some(code), &[code]);
            d.seed = seed;
            d.usage = vec![UsageEntry {
                provider_id: "p".into(),
                input_tokens: 100,
                output_tokens: 50,
            }];
            d
        })
        .collect()
}

#[test]
fn repeats_average_and_std() {
    let coder = FixedCoder(BTreeMap::from([
        (0, run_with(&[true, true, false, false], 0)),
        (1, run_with(&[true, true, true, true], 1)),
    ]));
    let t = atc();
    let (report, runs) =
        run_experiment(&coder, Method::Align, &four_items(), &[0, 1], &t, &settings()).unwrap();
    assert_eq!(runs.len(), 2);
    let overall = &report.splits[&Split::Overall];
    let l4 = overall.accuracy["L4"].unwrap();
    assert_eq!(l4.mean, 0.75);
    assert_eq!(l4.std, 0.25);
    // Counts 10,5,3,2 of 20: the first two reach 15 < 16, three reach 18.
    assert_eq!(report.splits[&Split::Common].n_items, 3);
    assert_eq!(report.splits[&Split::Uncommon].n_items, 1);
    let common = report.splits[&Split::Common].accuracy["L4"].unwrap();
    assert_abs_diff_eq!(common.mean, (2.0 / 3.0 + 1.0) / 2.0, epsilon = 1e-12);
    // 8 calls × (100 × 0.15 + 50 × 0.60) / 1000 = 0.36
    assert_abs_diff_eq!(report.cost_usd_total, 0.36, epsilon = 1e-12);
    assert_abs_diff_eq!(report.cost_usd_per_code, 0.36 / 8.0, epsilon = 1e-12);
    assert_eq!(report.n_repeats, 2);
}

#[test]
fn single_repeat_std_zero() {
    let coder = FixedCoder(BTreeMap::from([(7, run_with(&[true, false, true, false], 7))]));
    let (report, _) =
        run_experiment(&coder, Method::Llm, &four_items(), &[7], &atc(), &settings()).unwrap();
    let l4 = report.splits[&Split::Overall].accuracy["L4"].unwrap();
    assert_eq!((l4.mean, l4.std), (0.5, 0.0));
}

#[test]
fn group_by_seed_recovers_runs() {
    let mut all = run_with(&[true, true, false, false], 3);
    all.extend(run_with(&[true, true, true, true], 1));
    let runs = group_by_seed(all);
    assert_eq!(runs.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![1, 3]);
    assert!(runs.iter().all(|(_, ds)| ds.len() == 4));
}

fn report() -> MetricsReport {
    let runs = vec![
        (0, run_with(&[true, false, true, false], 0)),
        (1, run_with(&[true, true, true, false], 1)),
    ];
    metrics_report(&runs, &four_items(), &atc(), &settings()).unwrap()
}

#[test]
fn rendering_is_deterministic() {
    let r = report();
    for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Text] {
        assert_eq!(render_report(&r, f), render_report(&r, f));
    }
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    emit_report(&r, ReportFormat::Csv, &a).unwrap();
    emit_report(&r, ReportFormat::Csv, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn json_to_csv_round_trip() {
    let r = report();
    let json = render_report(&r, ReportFormat::Json);
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    let csv_text = render_report(&back, ReportFormat::Csv);
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, csv_header(&r.levels));
    for row in rdr.records() {
        let row = row.unwrap();
        let split = match &row[1] {
            "overall" => Split::Overall,
            "common" => Split::Common,
            _ => Split::Uncommon,
        };
        let m = &r.splits[&split];
        for level in &r.levels {
            let col = header.iter().position(|h| *h == format!("acc_{level}_mean")).unwrap();
            let printed: f64 = row[col].parse().unwrap();
            let v = m.accuracy[level].unwrap().mean;
            assert!((printed - v).abs() <= 0.5e-4, "{printed} vs {v}");
        }
    }
}

#[test]
fn empty_split_has_empty_cells() {
    let items = vec![item("a", "N02BE", 5)];
    let mut d = decision("a", Some("N02BE"), &["N02BE"]);
    d.usage.clear();
    let r = metrics_report(&[(0, vec![d])], &items, &atc(), &settings()).unwrap();
    assert_eq!(r.splits[&Split::Uncommon].n_items, 0);
    let csv_text = render_report(&r, ReportFormat::Csv);
    let last = csv_text.lines().last().unwrap();
    assert!(last.starts_with("ALIGN,uncommon,0,1,,,"), "{last}");
    assert_eq!(last.split(',').count(), csv_header(&r.levels).len());
    assert!(render_report(&r, ReportFormat::Text).contains('-'));
}

fn traced(id: &str, cands: &[(&str, &[Source])], pruned: &[&str], chosen: &str) -> DecisionRecord {
    let mut d = decision(id, Some(chosen), &[chosen]);
    d.candidates = cands
        .iter()
        .map(|(c, s)| Candidate {
            code: c.to_string(),
            sources: s.iter().copied().collect(),
            retrieval_score: None,
        })
        .collect();
    d.verdicts = cands
        .iter()
        .map(|(c, _)| EntailmentVerdict {
            code: c.to_string(),
            supported: !pruned.contains(c),
            explanation: "x".into(),
        })
        .collect();
    d
}

#[test]
fn ablation_hand_counts() {
    use Source::*;
    let t = atc();
    let items = vec![
        item("a", "N02BE", 1),
        item("b", "M01AE", 1),
        item("c", "C10AA", 1),
        item("d", "A02BC", 1),
    ];
    let ds = vec![
        // correct, LLM+DENSE → LLM
        traced("a", &[("N02BE", &[Llm, Dense]), ("N02BA", &[Bm25])], &["N02BA"], "N02BE"),
        // correct, DENSE+BM25 → DENSE
        traced("b", &[("M01AE", &[Dense, Bm25]), ("M01AB", &[Llm])], &["M01AB"], "M01AE"),
        // correct, BM25 only
        traced("c", &[("C10AA", &[Bm25]), ("C09AA", &[Bm25, Llm])], &[], "C10AA"),
        // incorrect
        traced("d", &[("R06AE", &[Dense])], &[], "R06AE"),
    ];
    let r = ablation_report(&ds, &items, &t).unwrap();
    assert_eq!(r.n_attributed, 3);
    let third = 100.0 / 3.0;
    assert_abs_diff_eq!(r.correct_source_pct[&Llm], third, epsilon = 1e-9);
    assert_abs_diff_eq!(r.correct_source_pct[&Dense], third, epsilon = 1e-9);
    assert_abs_diff_eq!(r.correct_source_pct[&Bm25], third, epsilon = 1e-9);
    assert_abs_diff_eq!(r.correct_source_pct.values().sum::<f64>(), 100.0, epsilon = 0.1);
    // Proposed: LLM {a:N02BE, b:M01AB, c:C09AA} = 3, pruned 1 (M01AB).
    assert_eq!((r.proposed[&Llm], r.pruned[&Llm]), (3, 1));
    // BM25 {N02BA, M01AE, C10AA, C09AA} = 4, pruned 1 (N02BA).
    assert_eq!((r.proposed[&Bm25], r.pruned[&Bm25]), (4, 1));
    // DENSE {N02BE, M01AE, R06AE} = 3, pruned 0.
    assert_eq!((r.proposed[&Dense], r.pruned[&Dense]), (3, 0));
    assert_abs_diff_eq!(r.filtered_pct[&Llm], 100.0 / 3.0, epsilon = 1e-9);
    assert_abs_diff_eq!(r.filtered_pct[&Bm25], 25.0, epsilon = 1e-9);
    assert_eq!(r.filtered_pct[&Dense], 0.0);
    // Overlap with LLM codes, per query with a nonempty channel:
    // BM25: a 0/1, b 0/1, c 1/2 → mean 16.67. DENSE: a 1/1, b 0/1, d 0/1 → 33.33.
    assert_abs_diff_eq!(r.overlap_pct[&Bm25], 50.0 / 3.0, epsilon = 1e-9);
    assert_abs_diff_eq!(r.overlap_pct[&Dense], 100.0 / 3.0, epsilon = 1e-9);
}

#[test]
fn ablation_filtered_ten_three() {
    let t = atc();
    let codes = ["N02BE", "N02BA", "N02AA", "N02AX", "M01AE", "M01AB", "M02AA", "C10AA", "C09AA", "C07AB"];
    let cands: Vec<(&str, &[Source])> = codes.iter().map(|c| (*c, &[Source::Bm25][..])).collect();
    let d = traced("a", &cands, &["N02BA", "N02AA", "N02AX"], "N02BE");
    let r = ablation_report(&[d], &[item("a", "N02BE", 1)], &t).unwrap();
    assert_eq!(r.filtered_pct[&Source::Bm25], 30.0);
}

#[test]
fn fallback_records_count_nothing_pruned() {
    let mut d = traced("a", &[("N02BE", &[Source::Llm])], &["N02BE"], "N02BE");
    d.filter_fallback = true;
    let r = ablation_report(&[d], &[item("a", "N02BE", 1)], &atc()).unwrap();
    assert_eq!(r.pruned[&Source::Llm], 0);
}

fn sheeted(id: &str, options: &[(&str, &str)], probs: &[f64]) -> DecisionRecord {
    let mut d = decision(id, None, &[]);
    let none = option_label(options.len());
    d.sheet = Some(McqSheet {
        options: options
            .iter()
            .map(|(l, c)| McqOption {
                label: l.to_string(),
                code: c.to_string(),
            })
            .collect(),
        none_label: none.clone(),
        reasoning_context: String::new(),
    });
    let labels: Vec<String> = options.iter().map(|(l, _)| l.to_string()).chain([none]).collect();
    d.distribution = labels.into_iter().zip(probs.iter().copied()).collect();
    d
}

#[test]
fn calibration_labels_follow_gold_or_none() {
    let t = atc();
    let items = vec![item("a", "N02BE01", 1), item("b", "R03AC", 1), item("c", "N02BE", 1)];
    let mut failed = decision("c", None, &[]);
    failed.error = Some("boom".into());
    let ds = vec![
        sheeted("a", &[("A", "M01AE"), ("B", "N02BE")], &[0.5, 0.3, 0.2]),
        sheeted("b", &[("A", "N02BE")], &[0.6, 0.4]),
        failed,
    ];
    let (examples, skipped) = calibration_examples(&ds, &items, &t).unwrap();
    assert_eq!(skipped, 1);
    let labels: Vec<&str> = examples.iter().map(|(_, l)| l.as_str()).collect();
    assert_eq!(labels, ["B", "B"], "gold N02BE01 at L4 is option B; R03AC is absent so None (B)");
    let scores: Vec<f64> = examples.iter().map(|(d, l)| 1.0 - d.probs[l]).collect();
    assert_abs_diff_eq!(scores[0], 0.7, epsilon = 1e-12);
    assert_abs_diff_eq!(scores[1], 0.6, epsilon = 1e-12);
}

#[test]
fn attached_set_keeps_labels_above_threshold() {
    use codealign::uncertainty::ConformalCalibrator;
    let mut d = sheeted("a", &[("A", "M01AE"), ("B", "N02BE")], &[0.25, 0.6, 0.15]);
    let cal = ConformalCalibrator {
        alpha: 0.1,
        scores: vec![],
        q_hat: 0.8,
    };
    assert!(attach_conformal_set(&mut d, &cal));
    let set = d.conformal_set.unwrap();
    let got: Vec<(&str, Option<&str>)> = set.iter().map(|m| (m.label.as_str(), m.code.as_deref())).collect();
    assert_eq!(got, [("B", Some("N02BE")), ("A", Some("M01AE"))]);
    let mut bare = decision("x", None, &[]);
    assert!(!attach_conformal_set(&mut bare, &cal));
    assert!(bare.conformal_set.is_none());
}

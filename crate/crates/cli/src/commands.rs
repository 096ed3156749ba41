use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use codealign::eval::{
    ablation_report, attach_conformal_set, build_eval_dataset, calibration_examples, curve_records,
    group_by_seed, metrics_report, read_raw_records, render_ablation, render_report, write_text,
    EvalItem, EvalSettings, ReportFormat,
};
use codealign::jsonl::{read_jsonl_path, write_jsonl_path};
use codealign::llm::cost_of;
use codealign::pipeline::{CodingQuery, DecisionRecord, SystemIndex};
use codealign::retrieval::{write_index, BM25_MAGIC, DENSE_MAGIC};
use codealign::terminology::Terminology;
use codealign::uncertainty::{
    conformal_calibrate, simulate_deferral_runs, write_curve_csv, ConformalCalibrator, CurvePolicy,
    CurveRow, DeferralPolicy,
};
use codealign_review::{bind, serve, ReviewQueue};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::setup::{
    embedder, find_terminology, index_paths, load_items, load_terminologies, pipeline, read_decisions,
    terminology_of,
};
use crate::{
    AblationArgs, ApplyConformalArgs, BuildDatasetArgs, CalibrateArgs, CliError, CodeArgs, Command,
    CurveArgs, EvaluateArgs, ServeArgs,
};

pub fn dispatch(config: &Config, command: Command) -> Result<(), CliError> {
    match command {
        Command::Index => index(config),
        Command::Code(a) => code(config, a),
        Command::Evaluate(a) => evaluate(config, a),
        Command::DeferCurve(a) => defer_curve(config, a),
        Command::Calibrate(a) => calibrate(config, a),
        Command::ApplyConformal(a) => apply_conformal(a),
        Command::Ablation(a) => ablation(config, a),
        Command::BuildDataset(a) => build_dataset(config, a),
        Command::Serve(a) => serve_cmd(config, a),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_index_file<T: serde::Serialize>(magic: &str, value: &T, path: &Path) -> Result<String, CliError> {
    let mut bytes = Vec::new();
    write_index(magic, value, &mut bytes).map_err(|e| io_err(path, e))?;
    std::fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn index(config: &Config) -> Result<(), CliError> {
    let dir = &config.index.dir;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let embedder = embedder(config);
    for terminology in load_terminologies(config)? {
        let system = terminology.system_id().to_string();
        let entries = terminology.len();
        let built = SystemIndex::build(terminology, embedder.clone())
            .map_err(|e| CliError::Data(format!("{system}: {e}")))?;
        let (bm25_path, dense_path) = index_paths(config, &system);
        let bm25_digest = write_index_file(BM25_MAGIC, &built.bm25, &bm25_path)?;
        let dense_digest = write_index_file(DENSE_MAGIC, &built.dense, &dense_path)?;
        println!(
            "{system}: {entries} entries, bm25 {} docs (sha256 {}), dense {} vectors of dim {} (sha256 {})",
            built.bm25.len(),
            &bm25_digest[..16],
            built.dense.len(),
            built.dense.dimension(),
            &dense_digest[..16],
        );
    }
    Ok(())
}

fn code(config: &Config, args: CodeArgs) -> Result<(), CliError> {
    let queries: Vec<CodingQuery> = read_jsonl_path(&args.input).map_err(|e| io_err(&args.input, e))?;
    let pipeline = pipeline(config)?;
    let seeds = if args.seeds.is_empty() {
        config.evaluation.seeds.clone()
    } else {
        args.seeds
    };
    let mut all: Vec<DecisionRecord> = Vec::with_capacity(queries.len() * seeds.len());
    for &seed in &seeds {
        all.extend(pipeline.run_batch(args.method, &queries, seed));
    }
    write_jsonl_path(&args.output, &all).map_err(|e| io_err(&args.output, e))?;

    let failed = all.iter().filter(|d| d.error.is_some()).count();
    let deferred = all.iter().filter(|d| d.deferred).count();
    let usage: Vec<_> = all.iter().flat_map(|d| d.usage.iter().cloned()).collect();
    let cost = match cost_of(&usage, &config.prices) {
        Ok(usd) => format!("${usd:.6}"),
        Err(e) => format!("unknown ({e})"),
    };
    println!(
        "coded {} quer{} with {} over {} seed(s): {} ok, {} failed, {} deferred, cost {}",
        queries.len(),
        if queries.len() == 1 { "y" } else { "ies" },
        args.method,
        seeds.len(),
        all.len() - failed,
        failed,
        deferred,
        cost
    );
    for d in all.iter().filter(|d| d.error.is_some()).take(5) {
        eprintln!("  {}: {}", d.record_id(), d.error.as_deref().unwrap_or_default());
    }
    if !all.is_empty() && failed == all.len() {
        return Err(CliError::AllFailed(format!("all {failed} queries failed")));
    }
    Ok(())
}

/// Decisions and items, checked to target one terminology.
fn labelled(
    config: &Config,
    decisions: &Path,
    gold: &crate::GoldArgs,
) -> Result<(Vec<DecisionRecord>, Vec<EvalItem>, Arc<Terminology>), CliError> {
    let terminologies = load_terminologies(config)?;
    let items = load_items(&terminologies, gold)?;
    let terminology = terminology_of(&terminologies, &items)?;
    Ok((read_decisions(decisions)?, items, terminology))
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Levels from the top of the hierarchy down to the deepest target level.
fn default_levels(terminology: &Terminology, items: &[EvalItem]) -> Vec<String> {
    let spec = terminology.spec();
    let deepest = items
        .iter()
        .filter_map(|i| spec.level_index(&i.query.target_level))
        .max()
        .unwrap_or(0);
    spec.level_names().take(deepest + 1).map(str::to_string).collect()
}

fn evaluate(config: &Config, args: EvaluateArgs) -> Result<(), CliError> {
    let (decisions, items, terminology) = labelled(config, &args.decisions, &args.gold)?;
    let levels = args
        .levels
        .or_else(|| config.evaluation.levels.clone())
        .unwrap_or_else(|| default_levels(&terminology, &items));
    let settings = EvalSettings {
        levels,
        pareto_fraction: config.evaluation.pareto_fraction,
        prices: config.prices.clone(),
    };
    let runs = group_by_seed(decisions);
    let report = metrics_report(&runs, &items, &terminology, &settings).map_err(data)?;
    let format = args.format.unwrap_or_else(|| ReportFormat::from_path(&args.output));
    write_text(&args.output, &render_report(&report, format)).map_err(data)?;
    print!("{}", render_report(&report, ReportFormat::Text));
    Ok(())
}

fn defer_curve(config: &Config, args: CurveArgs) -> Result<(), CliError> {
    let (decisions, items, terminology) = labelled(config, &args.decisions, &args.gold)?;
    let runs = group_by_seed(decisions);
    let (seed, run) = match args.run {
        Some(s) => runs
            .into_iter()
            .find(|(seed, _)| *seed == s)
            .ok_or_else(|| CliError::Data(format!("no decisions with seed {s}")))?,
        None => runs
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Data("decisions file is empty".into()))?,
    };
    let level = match args.at_level {
        Some(l) => l,
        None => items
            .first()
            .map(|i| i.query.target_level.clone())
            .ok_or_else(|| CliError::Data("gold file has no items".into()))?,
    };
    let fractions = args
        .fractions
        .unwrap_or_else(|| config.evaluation.curve_fractions.clone());
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::Data("fractions must be non-empty and lie in [0, 1]".into()));
    }
    let records = curve_records(&run, &items, &terminology, &level).map_err(data)?;
    let mut rows: Vec<CurveRow> =
        simulate_deferral_runs(&records, &fractions, CurvePolicy::EntropyBudget, 1, args.seed);
    rows.extend(simulate_deferral_runs(
        &records,
        &fractions,
        CurvePolicy::RandomBudget,
        config.evaluation.random_repeats,
        args.seed,
    ));
    let file = File::create(&args.output).map_err(|e| io_err(&args.output, e))?;
    write_curve_csv(BufWriter::new(file), &rows).map_err(|e| io_err(&args.output, e))?;
    println!("deferral curve for seed {seed} at {level} over {} records", records.len());
    for f in &fractions {
        let mean = |p: CurvePolicy| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.policy == p && r.fraction == *f)
                .map(|r| r.accuracy)
                .collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        };
        println!(
            "  defer {:>5.1}%: entropy {:.4}, random {:.4}",
            f * 100.0,
            mean(CurvePolicy::EntropyBudget),
            mean(CurvePolicy::RandomBudget)
        );
    }
    Ok(())
}

fn calibrate(config: &Config, args: CalibrateArgs) -> Result<(), CliError> {
    let (decisions, items, terminology) = labelled(config, &args.decisions, &args.gold)?;
    let alpha = args.alpha.unwrap_or(config.evaluation.alpha);
    let (examples, skipped) = calibration_examples(&decisions, &items, &terminology).map_err(data)?;
    let cal = conformal_calibrate(&examples, alpha).map_err(data)?;
    let text = serde_json::to_string_pretty(&cal).map_err(data)? + "\n";
    std::fs::write(&args.output, text).map_err(|e| io_err(&args.output, e))?;
    println!(
        "calibrated on {} decision(s) ({} skipped): alpha {}, q_hat {:.6}",
        examples.len(),
        skipped,
        alpha,
        cal.q_hat
    );
    Ok(())
}

fn apply_conformal(args: ApplyConformalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.calibrator).map_err(|e| io_err(&args.calibrator, e))?;
    let cal: ConformalCalibrator = serde_json::from_str(&text).map_err(|e| io_err(&args.calibrator, e))?;
    let mut decisions = read_decisions(&args.decisions)?;
    let attached = decisions
        .iter_mut()
        .filter_map(|d| attach_conformal_set(d, &cal).then_some(()))
        .count();
    write_jsonl_path(&args.output, &decisions).map_err(|e| io_err(&args.output, e))?;
    let sizes: usize = decisions
        .iter()
        .filter_map(|d| d.conformal_set.as_ref().map(Vec::len))
        .sum();
    println!(
        "attached sets to {attached} of {} decision(s), mean size {:.3}",
        decisions.len(),
        sizes as f64 / attached.max(1) as f64
    );
    Ok(())
}

fn ablation(config: &Config, args: AblationArgs) -> Result<(), CliError> {
    let (decisions, items, terminology) = labelled(config, &args.decisions, &args.gold)?;
    let report = ablation_report(&decisions, &items, &terminology).map_err(data)?;
    let format = args.format.unwrap_or_else(|| ReportFormat::from_path(&args.output));
    write_text(&args.output, &render_ablation(&report, format)).map_err(data)?;
    print!("{}", render_ablation(&report, ReportFormat::Text));
    Ok(())
}

fn build_dataset(config: &Config, args: BuildDatasetArgs) -> Result<(), CliError> {
    let terminologies = load_terminologies(config)?;
    let system = args
        .system
        .unwrap_or_else(|| terminologies[0].system_id().to_string());
    let terminology = find_terminology(&terminologies, &system)?;
    let raw = read_raw_records(&args.raw).map_err(data)?;
    let items = build_eval_dataset(&raw, &terminology, &args.level).map_err(data)?;
    write_jsonl_path(&args.output, &items).map_err(|e| io_err(&args.output, e))?;
    if let Some(path) = &args.queries {
        let queries: Vec<&CodingQuery> = items.iter().map(|i| &i.query).collect();
        write_jsonl_path(path, queries).map_err(|e| io_err(path, e))?;
    }
    println!("{} raw record(s) -> {} item(s)", raw.len(), items.len());
    Ok(())
}

fn serve_cmd(config: &Config, args: ServeArgs) -> Result<(), CliError> {
    let terminologies = load_terminologies(config)?;
    let journal = &config.service.journal;
    let queue = ReviewQueue::open(journal, terminologies).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(path) = &args.enqueue {
        let policy = args.budget.map(|f| DeferralPolicy::EntropyBudget { budget_fraction: f });
        let summary = queue
            .enqueue(read_decisions(path)?, policy.as_ref())
            .map_err(data)?;
        println!(
            "enqueued {} new item(s) from {}; queue holds {}",
            summary.items_added,
            path.display(),
            summary.queue_size
        );
    }
    let addr = args.bind.unwrap_or_else(|| config.service.bind.clone());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async move {
        let listener = bind(&addr).await.map_err(|e| CliError::Io(e.to_string()))?;
        let local = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("review service listening on http://{local} (journal {})", journal.display());
        std::io::stdout().flush().ok();
        serve(listener, Arc::new(queue), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Io(e.to_string()))
    })
}

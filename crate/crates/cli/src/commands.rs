//! Subcommand bodies. Each one claims its output directory, records the
//! resolved config in `run_manifest.json`, then does its work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use curation_core::data::{evaluate_retrieval, load_dataset, save_dataset, DatasetBundle};
use curation_core::model::{load_checkpoint, ModelParams};
use curation_core::numerics::{mean, sample_std};
use curation_core::oracle::{run_sweep, OracleCase};
use curation_core::stableeval::{per_eval_variability, select_stable_subset, EvalRecord, EvalTable};
use curation_core::trainer::{train_run, FrozenModels, TrainConfig, METRICS_FILE};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
/// Exact oracle cases must agree to this relative gap.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// Creates `dir`, refusing one that already holds anything.
fn claim_output(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let empty = dir.is_dir()
            && fs::read_dir(dir)
                .map_err(|e| CliError::from_io(dir, e))?
                .next()
                .is_none();
        if !empty {
            return Err(CliError::OutputInUse(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::from_io(path, e))
}

fn start(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    claim_output(output)?;
    write_json(
        &output.join(MANIFEST_FILE),
        &json!({
            "subcommand": name,
            "version": VERSION,
            "seed": config.seed,
            "config": config,
        }),
    )
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("{key} is required for this subcommand")))
}

fn checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(load_checkpoint(path)?)
}

fn dataset(config: &ExperimentConfig) -> Result<DatasetBundle, CliError> {
    let dir = required(&config.paths.dataset, "paths.dataset")?;
    if !dir.exists() {
        return Err(CliError::MissingFile(dir.to_path_buf()));
    }
    Ok(load_dataset(dir)?)
}

pub fn gen_data(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    config
        .data
        .validate()
        .map_err(|e| CliError::Config(format!("data: {e}")))?;
    start(name, config, output)?;
    let bundle = DatasetBundle::generate(&config.data)?;
    save_dataset(&bundle, output)?;
    println!(
        "wrote train={} eval={} curated={} to {}",
        bundle.train.len(),
        bundle.eval.len(),
        bundle.curated.as_ref().map_or(0, |d| d.len()),
        output.display()
    );
    Ok(())
}

pub fn train(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    let method = config.method.to_core()?;
    let bundle = dataset(config)?;
    let reference = config.paths.reference.as_deref().map(checkpoint).transpose()?;
    let teachers = config
        .paths
        .teachers
        .iter()
        .map(|p| checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let train_split = bundle.split(&config.train.split).map_err(|e| CliError::Config(format!("train.split: {e}")))?;
    let eval_split = bundle.split(&config.eval.split).map_err(|e| CliError::Config(format!("eval.split: {e}")))?;

    // Feature matching compares student embeddings to teacher embeddings, so
    // the student carries a projection into the teacher's width.
    let projection = (method.lambda > 0.0 && method.kd.feature_match > 0.0)
        .then(|| teachers.first().map(ModelParams::embed_dim))
        .flatten();
    let train_config = TrainConfig {
        seed: config.seed,
        model: config.model_shape(train_split.image.cols(), train_split.text.cols(), projection),
        method,
        schedule: config.schedule.clone(),
        optimizer: config.optimizer.clone(),
        eval_fraction: config.eval.fraction,
    };
    train_config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    start(name, config, output)?;
    let frozen = FrozenModels {
        reference: reference.as_ref(),
        teachers: &teachers,
    };
    let outcome = train_run(&train_config, train_split, Some(eval_split), &frozen, Some(output))?;
    let last = outcome.history.last().expect("at least one step");
    let summary = json!({
        "method": train_config.method.method,
        "seed": config.seed,
        "steps": outcome.history.len(),
        "effective_batch_size": train_config.method.effective_batch_size(),
        "final_loss_total": last.loss_total,
        "final_eval": outcome.final_eval.map(|e| json!({
            "recall_at_1_i2t": e.recall_at_1_i2t,
            "recall_at_1_t2i": e.recall_at_1_t2i,
            "recall_at_1": e.recall_at_1(),
            "zero_shot_accuracy": e.zero_shot_accuracy,
        })),
    });
    write_json(&output.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

pub fn oracle_check(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    start(name, config, output)?;
    let reports = run_sweep(&config.oracle)?;
    let path = output.join("oracle.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    writer
        .write_record(["case", "b", "lhs", "rhs", "relative_gap", "scoring", "objective"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &reports {
        writer
            .write_record([
                r.case.to_string(),
                r.b.to_string(),
                r.lhs.to_string(),
                r.rhs.to_string(),
                r.relative_gap.to_string(),
                r.scoring.to_string(),
                r.objective.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::from_io(&path, e))?;

    let exact: Vec<_> = reports.iter().filter(|r| r.case != OracleCase::General).collect();
    let general: Vec<_> = reports.iter().filter(|r| r.case == OracleCase::General).collect();
    let max_exact_gap = exact.iter().map(|r| r.relative_gap).fold(0.0, f64::max);
    let summary = json!({
        "reports": reports.len(),
        "exact_cases": exact.len(),
        "max_exact_relative_gap": max_exact_gap,
        "tolerance": ORACLE_TOLERANCE,
        "general_cases": general.len(),
        "general_lhs_le_rhs": general.iter().filter(|r| r.lhs <= r.rhs).count(),
    });
    write_json(&output.join("summary.json"), &summary)?;
    println!("{summary}");
    if max_exact_gap >= ORACLE_TOLERANCE {
        return Err(CliError::Runtime(format!(
            "oracle identity violated: relative gap {max_exact_gap:e} >= {ORACLE_TOLERANCE:e}"
        )));
    }
    Ok(())
}

pub fn stableeval(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    let input = required(&config.stableeval.input, "stableeval.input")?;
    if !input.exists() {
        return Err(CliError::MissingFile(input.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(input).map_err(|e| CliError::Runtime(e.to_string()))?;
    let records = reader
        .deserialize::<EvalRecord>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let table = EvalTable::from_records(&records).map_err(|e| CliError::Config(e.to_string()))?;
    start(name, config, output)?;
    let subset = select_stable_subset(&per_eval_variability(&table))?;
    let excluded: Vec<&str> = subset.order[subset.selected_len..]
        .iter()
        .map(|(n, _)| n.as_str())
        .collect();
    let report = json!({
        "evaluations": subset.order.len(),
        "variability": subset.order.iter().map(|(n, v)| json!({"evaluation": n, "variability": v})).collect::<Vec<_>>(),
        "threshold": subset.threshold,
        "prefix_variability": subset.prefix_variability,
        "selected_len": subset.selected_len,
        "selected": subset.selected,
        "excluded": excluded,
    });
    write_json(&output.join("stableeval.json"), &report)?;
    println!("selected {} of {} evaluations", subset.selected_len, subset.order.len());
    Ok(())
}

pub fn eval(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    let model = checkpoint(required(&config.paths.checkpoint, "paths.checkpoint")?)?;
    let bundle = dataset(config)?;
    let split = bundle
        .split(&config.eval.split)
        .map_err(|e| CliError::Config(format!("eval.split: {e}")))?;
    start(name, config, output)?;
    let m = evaluate_retrieval(&model, split)?;
    let report = json!({
        "split": config.eval.split,
        "samples": split.len(),
        "recall_at_1_i2t": m.recall_at_1_i2t,
        "recall_at_1_t2i": m.recall_at_1_t2i,
        "recall_at_1": m.recall_at_1(),
        "zero_shot_accuracy": m.zero_shot_accuracy,
    });
    write_json(&output.join("eval.json"), &report)?;
    println!("{report}");
    Ok(())
}

/// Final metrics of one finished `train` run.
#[derive(Debug, Serialize)]
struct RunRow {
    run: String,
    method: String,
    seed: u64,
    steps: u64,
    final_loss_total: f64,
    recall_at_1_i2t: Option<f64>,
    recall_at_1_t2i: Option<f64>,
    recall_at_1: Option<f64>,
    zero_shot_accuracy: Option<f64>,
}

fn read_run(dir: &Path) -> Result<RunRow, CliError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::from_io(&manifest_path, e))?;
    let manifest: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest["subcommand"] != "train" {
        return Err(CliError::Config(format!("{} is not a train run", dir.display())));
    }
    let method = manifest["config"]["method"]["method"]
        .as_str()
        .unwrap_or("iid_baseline")
        .to_string();
    let seed = manifest["seed"].as_u64().unwrap_or(0);

    let metrics_path = dir.join(METRICS_FILE);
    if !metrics_path.exists() {
        return Err(CliError::MissingFile(metrics_path));
    }
    let mut reader = csv::Reader::from_path(&metrics_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let rows = reader
        .deserialize::<BTreeMap<String, String>>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", metrics_path.display())))?;
    let last = rows
        .last()
        .ok_or_else(|| CliError::Runtime(format!("{} has no rows", metrics_path.display())))?;
    let num = |key: &str| last.get(key).and_then(|v| v.parse::<f64>().ok());
    let (i2t, t2i) = (num("recall_at_1_i2t"), num("recall_at_1_t2i"));
    Ok(RunRow {
        run: dir.display().to_string(),
        method,
        seed,
        steps: num("step").unwrap_or(0.0) as u64,
        final_loss_total: num("loss_total").unwrap_or(f64::NAN),
        recall_at_1_i2t: i2t,
        recall_at_1_t2i: t2i,
        recall_at_1: i2t.zip(t2i).map(|(a, b)| 0.5 * (a + b)),
        zero_shot_accuracy: num("zero_shot_accuracy"),
    })
}

pub fn export_report(name: &str, config: &ExperimentConfig, output: &Path) -> Result<(), CliError> {
    if config.export.runs.is_empty() {
        return Err(CliError::Config("export.runs must list at least one run directory".into()));
    }
    let rows = config
        .export
        .runs
        .iter()
        .map(|d| read_run(d))
        .collect::<Result<Vec<_>, _>>()?;
    start(name, config, output)?;

    let path = output.join("runs.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &rows {
        writer.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::from_io(&path, e))?;

    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if let Some(v) = r.recall_at_1 {
            by_method.entry(r.method.as_str()).or_default().push(v);
        }
    }
    let path = output.join("summary.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    writer
        .write_record(["method", "runs", "recall_at_1_mean", "recall_at_1_std"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (method, values) in &by_method {
        let std = if values.len() >= 2 { sample_std(values).to_string() } else { String::new() };
        writer
            .write_record([
                method.to_string(),
                values.len().to_string(),
                mean(values).to_string(),
                std,
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::from_io(&path, e))?;
    println!("exported {} runs across {} methods", rows.len(), by_method.len());
    Ok(())
}

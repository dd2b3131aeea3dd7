//! Execution of resolved invocations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;

use msad_core::data::{generate_synthetic, load_csv, prepare, save_csv};
use msad_core::evaluation::{
    emit_metrics_report, emit_sweep_report, evaluate, read_score_dump, roc_curve, run_sweep,
    write_score_dump, MetricsReport, SweepKind, SweepTable, SWEEP_CSV_HEADER,
};
use msad_core::model::{Checkpoint, ModelParams};
use msad_core::training::train;

use crate::exit::{config_error, io_error, CliError, OK, SWEEP_FAILED};
use crate::manifest::{now, FileDigest, Invocation, RunManifest};

/// What a finished command leaves behind.
pub struct Outcome {
    pub manifest: PathBuf,
    pub code: i32,
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn digests(paths: &[PathBuf]) -> anyhow::Result<Vec<FileDigest>> {
    paths.iter().map(|p| FileDigest::of(p)).collect()
}

/// Runs the invocation and writes its manifest.
pub fn execute(inv: &Invocation) -> anyhow::Result<Outcome> {
    let started = now();
    let inputs = match inv {
        Invocation::Synth { .. } => Vec::new(),
        Invocation::Train { data, .. } | Invocation::Sweep { data, .. } => vec![data.clone()],
        Invocation::Eval {
            checkpoint, data, ..
        } => vec![checkpoint.clone(), data.clone()],
        Invocation::Report { input, .. } => vec![input.clone()],
    };
    let inputs = digests(&inputs)?;
    let (outputs, code) = match inv {
        Invocation::Synth { spec, out } => {
            let series = generate_synthetic(spec)?;
            create_parent(out)?;
            save_csv(&series, out)?;
            println!(
                "wrote {} rows x {} features ({:.2}% anomalous) to {}",
                series.len(),
                series.feature_dim(),
                100.0 * series.anomaly_ratio(),
                out.display()
            );
            (vec![out.clone()], OK)
        }
        Invocation::Train { data, config, out } => (run_train(data, config, out)?, OK),
        Invocation::Eval {
            checkpoint,
            data,
            split,
            threshold,
            format,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let pipeline = ckpt
                .pipeline
                .clone()
                .ok_or_else(|| config_error("checkpoint carries no preprocessing snapshot"))?;
            let params = ckpt.params()?;
            let series = load_csv(data)?;
            let windows = pipeline.windows(&series, *split)?;
            let ev = evaluate(&params, &windows, *threshold)?;
            create_dir(out)?;
            let report_path = out.join(format!("report.{}", format.extension()));
            write(&report_path, &emit_metrics_report(&ev.report, *format)?)?;
            let scores_path = out.join("scores.csv");
            write_score_dump(&scores_path, &ev.scores, &ev.labels)?;
            print!("{}", metrics_summary(&ev.report));
            (vec![report_path, scores_path], OK)
        }
        Invocation::Sweep {
            kind,
            grid,
            seeds,
            data,
            config,
            jobs,
            format,
            out,
        } => run_sweep_command(
            kind, grid, seeds, data, config, *jobs, *format, out, &inputs,
        )?,
        Invocation::Report {
            input,
            format,
            threshold,
            roc,
            out,
        } => {
            let text = fs::read_to_string(input).map_err(|e| io_error(input, e))?;
            let header = text.lines().next().unwrap_or_default();
            let mut written = vec![out.clone()];
            let rendered = if header == "score,label" {
                let (scores, labels) = read_score_dump(&text)?;
                let report = MetricsReport::from_scores(&scores, &labels, *threshold)?;
                print!("{}", metrics_summary(&report));
                if let Some(roc_path) = roc {
                    let mut csv = String::from("threshold,fpr,tpr\n");
                    for p in roc_curve(&scores, &labels)? {
                        let _ = writeln!(csv, "{},{},{}", p.threshold, p.fpr, p.tpr);
                    }
                    create_parent(roc_path)?;
                    write(roc_path, &csv)?;
                    written.push(roc_path.clone());
                }
                emit_metrics_report(&report, *format)?
            } else if header == SWEEP_CSV_HEADER {
                let table = SweepTable {
                    parameter: input
                        .file_stem()
                        .map(|s| s.to_string_lossy().trim_start_matches("sweep_").to_string())
                        .unwrap_or_default(),
                    seeds: Vec::new(),
                    rows: SweepTable::parse_csv(&text)?,
                };
                print!("{}", sweep_summary(&table));
                table.render(*format)?
            } else {
                return Err(config_error(format!(
                    "{}: neither a score dump nor a sweep table",
                    input.display()
                )));
            };
            create_parent(out)?;
            write(out, &rendered)?;
            (written, OK)
        }
    };
    let manifest = inv.manifest_path();
    RunManifest::new(inv.clone(), inputs, digests(&outputs)?, started).save(&manifest)?;
    Ok(Outcome { manifest, code })
}

fn run_train(
    data: &Path,
    config: &msad_core::evaluation::ExperimentConfig,
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let series = load_csv(data)?;
    let prepared = prepare(&series, &config.data)?;
    let mut model = config.model.clone();
    model.feature_dim = series.feature_dim();
    let init = ModelParams::init(&model, config.train.seed)?;
    info!(
        "training {} parameters on {} windows ({} positive)",
        init.count(),
        prepared.train.len(),
        prepared.train.positives()
    );
    let (params, log) = train(&init, &prepared.train, &config.train)?;
    create_dir(out)?;
    let ckpt_path = out.join("checkpoint.json");
    Checkpoint::new(&params, Some(prepared.snapshot)).save(&ckpt_path)?;
    let log_path = out.join("train_log.csv");
    log.save_csv(&log_path)?;
    let best = &log.epochs[log.best_epoch - 1];
    println!(
        "{} epochs ({:?}); best epoch {} val_loss {:.6} val_f1 {:.4}",
        log.epochs.len(),
        log.stop_reason,
        log.best_epoch,
        best.val_loss,
        best.val_f1
    );
    Ok(vec![ckpt_path, log_path])
}

#[allow(clippy::too_many_arguments)]
fn run_sweep_command(
    kind: &str,
    grid: &[String],
    seeds: &[u64],
    data: &Path,
    config: &msad_core::evaluation::ExperimentConfig,
    jobs: usize,
    format: msad_core::evaluation::ReportFormat,
    out: &Path,
    inputs: &[FileDigest],
) -> anyhow::Result<(Vec<PathBuf>, i32)> {
    let kind: SweepKind = kind.parse()?;
    let series = load_csv(data)?;
    let result = run_sweep(kind, grid, config, &series, seeds, jobs)?;
    create_dir(out)?;
    let table_path = out.join(format!("sweep_{kind}.{}", format.extension()));
    write(&table_path, &emit_sweep_report(&result, format)?)?;
    let details_path = out.join(format!("sweep_{kind}_details.json"));
    write(
        &details_path,
        &(serde_json::to_string_pretty(&result)? + "\n"),
    )?;

    // each row is also a one-value sweep that can be replayed on its own;
    // like the manifest itself these carry timestamps and are not outputs
    let rows_dir = out.join("rows");
    create_dir(&rows_dir)?;
    for (i, row) in result.rows.iter().enumerate() {
        let row_out = rows_dir.join(format!("{i}"));
        let inv = Invocation::Sweep {
            kind: kind.name().into(),
            grid: vec![row.value.clone()],
            seeds: seeds.to_vec(),
            data: data.to_path_buf(),
            config: config.clone(),
            jobs,
            format,
            out: row_out.clone(),
        };
        let path = rows_dir.join(format!("{i}.manifest.json"));
        RunManifest::new(inv, inputs.to_vec(), Vec::new(), now()).save(&path)?;
    }
    print!("{}", sweep_summary(&SweepTable::from_result(&result)?));
    let code = if result.any_succeeded() {
        OK
    } else {
        SWEEP_FAILED
    };
    if code != OK {
        eprintln!("error: every trial of the sweep failed");
    }
    Ok((vec![table_path, details_path], code))
}

fn metrics_summary(r: &MetricsReport) -> String {
    format!(
        "precision {:.4}  recall {:.4}  auc {:.4}  f1 {:.4}  (n={}, threshold {})\n",
        r.precision, r.recall, r.auc, r.f1, r.n_samples, r.threshold
    )
}

fn sweep_summary(t: &SweepTable) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>6}  status\n",
        t.parameter, "precision", "recall", "auc", "f1", "seeds"
    );
    for r in &t.rows {
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9} {:>9} {:>9} {:>6}  {}",
            r.value,
            cell(r.precision),
            cell(r.recall),
            cell(r.auc),
            cell(r.f1),
            r.n_seeds,
            r.status
        );
    }
    s
}

/// Outputs keyed by their location relative to the command's `out`.
fn relative_outputs(m: &RunManifest) -> BTreeMap<PathBuf, String> {
    let out = m.invocation.out();
    m.outputs
        .iter()
        .map(|d| {
            let key = d
                .path
                .strip_prefix(out)
                .map(Path::to_path_buf)
                .unwrap_or_default();
            (key, d.sha256.clone())
        })
        .collect()
}

/// Replays a manifest, optionally into a different output location, and
/// checks that inputs are unchanged and outputs come out identical.
pub fn rerun(manifest_path: &Path, out: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let recorded = RunManifest::load(manifest_path)?;
    for input in &recorded.inputs {
        let now = FileDigest::of(&input.path).with_context(|| "input listed in the manifest")?;
        if now.sha256 != input.sha256 {
            return Err(config_error(format!(
                "input {} changed since the manifest was written",
                input.path.display()
            )));
        }
    }
    let inv = match out {
        Some(o) => recorded.invocation.clone().with_out(o),
        None => recorded.invocation.clone(),
    };
    let outcome = execute(&inv)?;
    if !recorded.outputs.is_empty() {
        let fresh = RunManifest::load(&outcome.manifest)?;
        let (want, got) = (relative_outputs(&recorded), relative_outputs(&fresh));
        let differing: Vec<String> = want
            .iter()
            .filter(|(k, v)| got.get(*k) != Some(*v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        if !differing.is_empty() {
            return Err(CliError {
                code: crate::exit::CONFIG,
                message: format!(
                    "rerun outputs differ from the manifest: {}",
                    differing.join(", ")
                ),
            }
            .into());
        }
        println!("rerun reproduced {} output(s) bit for bit", want.len());
    }
    Ok(outcome)
}

//! Command implementations behind the `cilseg` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cilseg::data::{generate, read_dataset, write_dataset, Splits, StagePlan};
use cilseg::eval::{evaluate_snapshot, read_csv, write_csv, IoUReport, Metric};
use cilseg::model::ClassId;
use cilseg::training::{run_protocol, train_first_stage, Method, MethodSpec, StageOutcome, TrainReport};
use cilseg::Model;
use serde::Serialize;

pub use config::{DatasetSource, EvalConfig, RunConfig};

/// Final rows, one per method.
pub const RESULTS_CSV: &str = "results.csv";
/// One row per method and evaluated stage.
pub const STAGE_RESULTS_CSV: &str = "results_stages.csv";
/// Wall-clock times; the only artifact that differs between identical runs.
pub const TIMINGS_JSON: &str = "timings.json";

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} already exists and is not empty; pass --force to overwrite", out.display());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `gen-data`: renders the synthetic dataset of `config` into `out`.
pub fn gen_data(config: &RunConfig, out: &Path, force: bool) -> Result<()> {
    config.validate()?;
    let DatasetSource::Synthetic { scene, plan } = &config.dataset else {
        bail!("gen-data needs a synthetic dataset section, the config points to a directory");
    };
    let splits = generate(scene, plan)?;
    prepare_out(out, force)?;
    write_dataset(out, plan, Some(scene), &splits)?;
    Ok(())
}

/// Loads or renders the dataset a run or evaluation works on.
pub fn load_data(config: &RunConfig, data_dir: Option<&Path>) -> Result<(StagePlan, Splits)> {
    if let Some(dir) = data_dir {
        return read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()));
    }
    match &config.dataset {
        DatasetSource::Synthetic { scene, plan } => Ok((plan.clone(), generate(scene, plan)?)),
        DatasetSource::Directory { path } => {
            read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
        }
    }
}

#[derive(Serialize)]
struct Timing {
    method: String,
    stage: String,
    seconds: f64,
}

/// What `run` produced, for callers that want the numbers without
/// re-reading the files.
#[derive(Debug)]
pub struct RunSummary {
    pub stage_rows: Vec<IoUReport>,
    pub final_rows: Vec<IoUReport>,
}

fn stage_stem(method: &str, completed: usize) -> String {
    if method == "ss" {
        "upper".to_string()
    } else {
        format!("stage{completed}")
    }
}

/// `run`: trains each method through the protocol and writes snapshots,
/// train reports, IoU reports and the result tables into `out`.
pub fn run(
    config: &RunConfig,
    methods: &[MethodSpec],
    data_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<RunSummary> {
    config.validate()?;
    ensure!(!methods.is_empty(), "no method selected");
    let (plan, splits) = load_data(config, data_dir)?;
    plan.validate()?;
    ensure!(
        splits.train.len() == plan.stages(),
        "dataset has {} training subsets, plan has {} stages",
        splits.train.len(),
        plan.stages()
    );
    prepare_out(out, force)?;
    write_json(&out.join("config.json"), config)?;

    let needs_first = methods.iter().any(|m| m.method != Method::Ss);
    let first = if needs_first {
        Some(train_first_stage::<f64>(&splits, &plan, &config.protocol)?)
    } else {
        None
    };

    let mut stage_rows = Vec::new();
    let mut final_rows = Vec::new();
    let mut timings = Vec::new();
    for &m in methods {
        let name = m.to_string();
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        let mut rows = Vec::new();
        run_protocol(&splits, &plan, &config.protocol, m, first.as_ref(), |o: &StageOutcome<f64>| {
            let stem = stage_stem(&name, o.completed);
            let mut report = o.report.clone();
            report.snapshot = Some(format!("{stem}.bin"));
            persist_stage(&dir, &stem, &o.snapshot, &report)?;
            timings.push(Timing {
                method: name.clone(),
                stage: report.stage.clone(),
                seconds: o.report.wall_time_s,
            });
            if let Some((aux, aux_report)) = &o.auxiliary {
                let aux_stem = format!("aux{}", o.completed);
                let mut aux_report = aux_report.clone();
                aux_report.snapshot = Some(format!("{aux_stem}.bin"));
                persist_stage(&dir, &aux_stem, aux, &aux_report)?;
            }
            if !o.memory.is_empty() {
                write_json(&dir.join(format!("memory{}.json", o.completed)), &o.memory)
                    .map_err(|e| cilseg::Error::Data(e.to_string()))?;
            }
            let last = o.completed == plan.stages();
            if config.eval.every_stage || last {
                let mut iou = evaluate_snapshot(
                    &o.snapshot,
                    &splits.test,
                    &plan.class_partition,
                    &Metric::available_after(o.completed),
                )?;
                iou.method = name.clone();
                write_json(&dir.join(format!("{stem}_iou.json")), &iou)
                    .map_err(|e| cilseg::Error::Data(e.to_string()))?;
                rows.push(iou);
            }
            Ok(())
        })
        .with_context(|| format!("method {name}"))?;
        if let Some(last) = rows.last() {
            final_rows.push(last.clone());
        }
        stage_rows.extend(rows);
    }

    write_csv(fs::File::create(out.join(STAGE_RESULTS_CSV))?, &stage_rows)?;
    write_csv(fs::File::create(out.join(RESULTS_CSV))?, &final_rows)?;
    write_json(&out.join(TIMINGS_JSON), &timings)?;
    Ok(RunSummary {
        stage_rows,
        final_rows,
    })
}

fn persist_stage(dir: &Path, stem: &str, model: &Model, report: &TrainReport) -> cilseg::Result<()> {
    model.save(&dir.join(stem))?;
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(dir.join(format!("{stem}_train.json")), text)?;
    Ok(())
}

/// Number of leading plan stages whose classes a snapshot predicts.
/// Classes outside the plan mean the snapshot belongs to another dataset.
pub fn completed_stages(model: &Model, plan: &StagePlan) -> Result<usize> {
    let known = model.class_list();
    let all = plan.all_classes();
    if let Some(c) = known.iter().find(|c| !all.contains(c)) {
        bail!("snapshot predicts class {c}, which the dataset plan does not define");
    }
    let mut k = 0;
    let mut covered: Vec<ClassId> = Vec::new();
    for part in &plan.class_partition {
        covered.extend_from_slice(part);
        if part.iter().all(|c| known.contains(c)) {
            k += 1;
        } else {
            break;
        }
    }
    ensure!(k > 0, "snapshot does not predict the first-stage classes {:?}", plan.class_partition[0]);
    ensure!(
        known.iter().all(|c| covered.contains(c)),
        "snapshot classes {known:?} do not form a stage prefix of the plan"
    );
    Ok(k)
}

/// `eval`: scores snapshots on the test split and writes `iou.csv` and
/// `iou.json` into `out`.
pub fn eval(snapshots: &[PathBuf], data_dir: &Path, out: &Path, force: bool) -> Result<Vec<IoUReport>> {
    ensure!(!snapshots.is_empty(), "no snapshot given");
    let (plan, splits) =
        read_dataset(data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let mut models = Vec::new();
    for s in snapshots {
        let stem = s.with_extension("");
        let model = Model::load(&stem).with_context(|| format!("loading snapshot {}", s.display()))?;
        let k = completed_stages(&model, &plan).with_context(|| format!("snapshot {}", s.display()))?;
        models.push((stem, model, k));
    }
    prepare_out(out, force)?;
    let mut reports = Vec::new();
    for (stem, model, k) in &models {
        let mut r = evaluate_snapshot(model, &splits.test, &plan.class_partition, &Metric::available_after(*k))?;
        r.method = stem
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        reports.push(r);
    }
    write_csv(fs::File::create(out.join("iou.csv"))?, &reports)?;
    write_json(&out.join("iou.json"), &reports)?;
    Ok(reports)
}

/// Reads a result table written by `run` or `eval`.
pub fn read_results(path: &Path) -> Result<Vec<IoUReport>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_csv(file)?)
}

/// `report`: renders a result table in percent, one row per method and one
/// column per task metric.
pub fn render_table(rows: &[IoUReport]) -> String {
    let mut s = format!("{:<10} {:<10}", "method", "stages");
    for m in Metric::ALL {
        s.push_str(&format!(" {:>9}", short_column(m)));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

fn short_column(m: Metric) -> &'static str {
    match m {
        Metric::Task1 => "task1",
        Metric::Task2 => "task2",
        Metric::Task12 => "task1u2",
        Metric::Task3 => "task3",
        Metric::Task123 => "task1u2u3",
    }
}

/// Final cross-task score per method name.
pub fn final_scores(rows: &[IoUReport]) -> BTreeMap<String, Option<f64>> {
    rows.iter()
        .map(|r| (r.method.clone(), r.metric(Metric::Task123).or(r.metric(Metric::Task12))))
        .collect()
}

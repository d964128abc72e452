//! Decoding, confusion matrices and single-/cross-task mIoU.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE};
use crate::model::{ClassId, Model};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "CILSEG_THREADS";

/// Per-pixel argmax over the channels whose class is in `subset`.
/// `scores` is `[C, H, W]` with channel `i` belonging to `classes[i]`.
/// Ties go to the lower channel index.
pub fn restricted_argmax<T: Scalar>(
    scores: &Tensor<T>,
    classes: &[ClassId],
    subset: &[ClassId],
) -> Result<LabelMap> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty class subset".into()));
    }
    let s = scores.shape();
    if s.len() != 3 || s[0] != classes.len() {
        return Err(Error::Shape(format!(
            "scores of shape {s:?} for {} classes",
            classes.len()
        )));
    }
    let mut channels: Vec<usize> = subset
        .iter()
        .map(|c| {
            classes
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| Error::ClassMismatch(format!("class {c} not among {classes:?}")))
        })
        .collect::<Result<_>>()?;
    channels.sort_unstable();
    channels.dedup();
    let plane = s[1] * s[2];
    let data = scores.data();
    let values = (0..plane)
        .map(|p| {
            let mut best = channels[0];
            for &c in &channels[1..] {
                if data[c * plane + p] > data[best * plane + p] {
                    best = c;
                }
            }
            classes[best]
        })
        .collect();
    LabelMap::new(s[1], s[2], values)
}

/// Counts indexed by (true class, predicted class) over an evaluation set.
/// One extra prediction column collects predictions outside the set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[ClassId]) -> Self {
        let n = classes.len();
        Self {
            classes: classes.to_vec(),
            counts: vec![0; n * (n + 1)],
        }
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn index(&self, c: ClassId) -> Option<usize> {
        self.classes.iter().position(|&k| k == c)
    }

    /// Count of pixels with truth `t` predicted as `p`.
    pub fn get(&self, t: ClassId, p: ClassId) -> u64 {
        match (self.index(t), self.index(p)) {
            (Some(i), Some(j)) => self.counts[i * (self.classes.len() + 1) + j],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. IGNORE and out-of-set truth pixels are skipped.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.height() != pred.height() || truth.width() != pred.width() {
            return Err(Error::Shape(format!(
                "truth {}×{} vs prediction {}×{}",
                truth.height(),
                truth.width(),
                pred.height(),
                pred.width()
            )));
        }
        let n = self.classes.len();
        let mut lookup = [usize::MAX; 256];
        for (i, &c) in self.classes.iter().enumerate() {
            lookup[c as usize] = i;
        }
        for (&t, &p) in truth.values().iter().zip(pred.values()) {
            if t == IGNORE {
                continue;
            }
            let i = lookup[t as usize];
            if i == usize::MAX {
                continue;
            }
            let j = match lookup[p as usize] {
                usize::MAX => n,
                j => j,
            };
            self.counts[i * (n + 1) + j] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::ClassMismatch("merging matrices over different class sets".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// truth and prediction.
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let i = self.index(class)?;
        let n = self.classes.len();
        let tp = self.counts[i * (n + 1) + i];
        let row: u64 = self.counts[i * (n + 1)..(i + 1) * (n + 1)].iter().sum();
        let col: u64 = (0..n).map(|r| self.counts[r * (n + 1) + i]).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over the evaluable classes of `subset`, `None` if there are none.
    pub fn miou(&self, subset: &[ClassId]) -> Result<Option<f64>> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &c in subset {
            if self.index(c).is_none() {
                return Err(Error::ClassMismatch(format!(
                    "class {c} not in matrix over {:?}",
                    self.classes
                )));
            }
            if let Some(v) = self.iou(c) {
                sum += v;
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    }
}

/// Table columns: single-task and cross-task metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Task1,
    Task2,
    Task12,
    Task3,
    Task123,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Task1,
        Metric::Task2,
        Metric::Task12,
        Metric::Task3,
        Metric::Task123,
    ];

    /// Stage indices (0-based) whose classes form the evaluated subset.
    pub fn stages(self) -> &'static [usize] {
        match self {
            Metric::Task1 => &[0],
            Metric::Task2 => &[1],
            Metric::Task12 => &[0, 1],
            Metric::Task3 => &[2],
            Metric::Task123 => &[0, 1, 2],
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Metric::Task1 => "miou_task1",
            Metric::Task2 => "miou_task2",
            Metric::Task12 => "miou_task1u2",
            Metric::Task3 => "miou_task3",
            Metric::Task123 => "miou_task1u2u3",
        }
    }

    /// Columns available once `completed` stages have been trained.
    pub fn available_after(completed: usize) -> Vec<Metric> {
        match completed {
            0 => vec![],
            1 => vec![Metric::Task1],
            2 => vec![Metric::Task1, Metric::Task2, Metric::Task12],
            _ => Metric::ALL.to_vec(),
        }
    }

    pub fn classes(self, partition: &[Vec<ClassId>]) -> Result<Vec<ClassId>> {
        let mut out = Vec::new();
        for &s in self.stages() {
            let part = partition.get(s).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} needs stage {} but the plan has {}",
                    self.column(),
                    s + 1,
                    partition.len()
                ))
            })?;
            out.extend_from_slice(part);
        }
        Ok(out)
    }
}

/// Per-class IoU and table metrics for one (method, stage) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub method: String,
    pub stage: String,
    pub metrics: BTreeMap<Metric, Option<f64>>,
    pub per_class: BTreeMap<ClassId, Option<f64>>,
    /// Evaluated pixels of the widest requested subset.
    pub pixels: u64,
}

impl IoUReport {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        self.metrics.get(&m).copied().flatten()
    }
}

/// Class order of an evaluation score map: the heads' lists concatenated.
pub fn score_classes<T: Scalar>(model: &Model<T>) -> Vec<ClassId> {
    model.class_list()
}

/// `[C, H, W]` score maps for each image of a batch: per-head channel softmax,
/// concatenated across heads without renormalization.
pub fn score_maps<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let logits = model.infer(images)?;
    let mut g = Graph::new();
    let probs: Vec<Tensor<T>> = logits
        .into_iter()
        .map(|l| {
            let v = g.constant(l);
            let p = g.softmax_channels(v)?;
            Ok(g.value(p).clone())
        })
        .collect::<Result<_>>()?;
    let n = images.shape()[0];
    let plane = images.shape()[2] * images.shape()[3];
    let total: usize = probs.iter().map(|p| p.shape()[1]).sum();
    (0..n)
        .map(|i| {
            let mut data = Vec::with_capacity(total * plane);
            for p in &probs {
                let c = p.shape()[1];
                data.extend_from_slice(&p.data()[i * c * plane..(i + 1) * c * plane]);
            }
            Tensor::new(vec![total, images.shape()[2], images.shape()[3]], data)
        })
        .collect()
}

/// Confusion matrices of one image set for several class subsets, with
/// predictions restricted to each subset in turn.
pub fn confusion_for<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    subsets: &[Vec<ClassId>],
    batch: usize,
) -> Result<Vec<ConfusionMatrix>> {
    let classes = score_classes(model);
    let chunks: Vec<&[Sample]> = samples.chunks(batch.max(1)).collect();
    let partial = with_eval_pool(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                let x = images_to_tensor::<T>(&images)?;
                let maps = score_maps(model, &x)?;
                let mut cms: Vec<ConfusionMatrix> =
                    subsets.iter().map(|s| ConfusionMatrix::new(s)).collect();
                for (map, s) in maps.iter().zip(chunk.iter()) {
                    for (cm, subset) in cms.iter_mut().zip(subsets) {
                        let pred = restricted_argmax(map, &classes, subset)?;
                        cm.accumulate(&s.labels, &pred)?;
                    }
                }
                Ok(cms)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut total: Vec<ConfusionMatrix> = subsets.iter().map(|s| ConfusionMatrix::new(s)).collect();
    for cms in partial? {
        for (t, c) in total.iter_mut().zip(&cms) {
            t.merge(c)?;
        }
    }
    Ok(total)
}

fn with_eval_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// Scores a snapshot on `test` for the requested table columns.
///
/// A column whose classes the snapshot does not predict is rejected, so a
/// stage-2 snapshot cannot report Task3 numbers.
pub fn evaluate_snapshot<T: Scalar>(
    model: &Model<T>,
    test: &Dataset,
    partition: &[Vec<ClassId>],
    metrics: &[Metric],
) -> Result<IoUReport> {
    let known = model.class_list();
    let mut subsets = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let classes = m.classes(partition)?;
        if let Some(c) = classes.iter().find(|c| !known.contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "{} requested but the snapshot does not predict class {c}",
                m.column()
            )));
        }
        subsets.push(classes);
    }
    let cms = confusion_for(model, &test.samples, &subsets, 8)?;
    let mut report = IoUReport {
        method: String::new(),
        stage: model.stage_tag().to_string(),
        metrics: BTreeMap::new(),
        per_class: BTreeMap::new(),
        pixels: 0,
    };
    for (&m, (cm, subset)) in metrics.iter().zip(cms.iter().zip(&subsets)) {
        report.metrics.insert(m, cm.miou(subset)?);
    }
    if let Some((cm, subset)) = cms
        .iter()
        .zip(&subsets)
        .max_by_key(|(_, s)| s.len())
    {
        report.pixels = cm.total();
        for &c in subset {
            report.per_class.insert(c, cm.iou(c));
        }
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    f64::from_str(s)
        .map(Some)
        .map_err(|_| Error::Format(format!("bad metric value {s:?}")))
}

/// Writes reports as one CSV table. Missing values are `-`.
pub fn write_csv(out: impl Write, reports: &[IoUReport]) -> Result<()> {
    let classes: Vec<ClassId> = reports
        .iter()
        .flat_map(|r| r.per_class.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string(), "stage".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.column().to_string()));
    header.push("pixels".into());
    header.extend(classes.iter().map(|c| format!("iou_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![r.method.clone(), r.stage.clone()];
        row.extend(Metric::ALL.iter().map(|&m| fmt_opt(r.metric(m))));
        row.push(r.pixels.to_string());
        row.extend(classes.iter().map(|c| match r.per_class.get(c) {
            Some(v) => fmt_opt(*v),
            None => String::new(),
        }));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_csv`]. A metric appears in the parsed report when its
/// cell is a number; per-class cells that are blank are absent.
pub fn read_csv(input: impl Read) -> Result<Vec<IoUReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let method = col("method").ok_or_else(|| Error::Format("missing method column".into()))?;
    let stage = col("stage").ok_or_else(|| Error::Format("missing stage column".into()))?;
    let pixels = col("pixels").ok_or_else(|| Error::Format("missing pixels column".into()))?;
    let metric_cols: Vec<(Metric, usize)> = Metric::ALL
        .iter()
        .filter_map(|&m| col(m.column()).map(|i| (m, i)))
        .collect();
    let class_cols: Vec<(ClassId, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("iou_")?.parse().ok().map(|c| (c, i)))
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut report = IoUReport {
            method: rec[method].to_string(),
            stage: rec[stage].to_string(),
            metrics: BTreeMap::new(),
            per_class: BTreeMap::new(),
            pixels: rec[pixels]
                .parse()
                .map_err(|_| Error::Format(format!("bad pixel count {:?}", &rec[pixels])))?,
        };
        for &(m, i) in &metric_cols {
            if let Some(v) = parse_opt(&rec[i])? {
                report.metrics.insert(m, Some(v));
            }
        }
        for &(c, i) in &class_cols {
            if !rec[i].is_empty() {
                report.per_class.insert(c, parse_opt(&rec[i])?);
            }
        }
        out.push(report);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

impl fmt::Display for IoUReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10} {:<10}", self.method, self.stage)?;
        for m in Metric::ALL {
            match self.metric(m) {
                Some(v) => write!(f, " {:>7.2}", v * 100.0)?,
                None => write!(f, " {:>7}", "-")?,
            }
        }
        Ok(())
    }
}

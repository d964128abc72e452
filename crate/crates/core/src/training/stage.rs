use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{poly_lr, AdamConfig, AdamState};
use crate::data::{augment, images_to_tensor, mix_seed, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LabelMap, Logits, Objective, Origin, ProbMap, Weighting, IGNORE};
use crate::model::{ClassId, Model, Trainable};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Training objective of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ss,
    Ft,
    Fe,
    Lwof,
    Lwm,
    Michieli,
    Cil,
}

impl Method {
    /// Model-based methods add a decoder head per stage; the others retrain
    /// a single extended head against a teacher.
    pub fn is_model_based(self) -> bool {
        matches!(self, Method::Ft | Method::Fe)
    }

    pub fn teacher_count(self) -> usize {
        match self {
            Method::Ss | Method::Ft | Method::Fe => 0,
            Method::Lwof | Method::Michieli | Method::Cil => 1,
            Method::Lwm => 2,
        }
    }

    fn trainable(self) -> Trainable {
        match self {
            Method::Ft => Trainable::FineTuning,
            Method::Fe => Trainable::FeatureExtraction,
            _ => Trainable::All,
        }
    }
}

/// The protocol variants selectable by name: every method plus CIL without
/// entropy weighting.
pub const METHOD_NAMES: [&str; 8] = ["ss", "ft", "fe", "lwof", "lwm", "michieli", "cil", "cil-now"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodSpec {
    pub method: Method,
    pub entropy_weights: bool,
}

impl MethodSpec {
    pub fn all() -> Vec<MethodSpec> {
        METHOD_NAMES.iter().map(|n| n.parse().expect("listed names parse")).collect()
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, entropy_weights) = match s {
            "ss" => (Method::Ss, false),
            "ft" => (Method::Ft, false),
            "fe" => (Method::Fe, false),
            "lwof" => (Method::Lwof, false),
            "lwm" => (Method::Lwm, false),
            "michieli" => (Method::Michieli, false),
            "cil" => (Method::Cil, true),
            "cil-now" => (Method::Cil, false),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown method {other:?}; expected one of {}",
                    METHOD_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            method,
            entropy_weights,
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.method, self.entropy_weights) {
            (Method::Ss, _) => "ss",
            (Method::Ft, _) => "ft",
            (Method::Fe, _) => "fe",
            (Method::Lwof, _) => "lwof",
            (Method::Lwm, _) => "lwm",
            (Method::Michieli, _) => "michieli",
            (Method::Cil, true) => "cil",
            (Method::Cil, false) => "cil-now",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub power: f64,
    pub seed: u64,
    /// Only read by CIL.
    pub entropy_weights: bool,
    /// Only read by LWM.
    pub memory_budget: usize,
    pub adam: AdamConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            method: Method::Ss,
            epochs: 30,
            batch_size: 6,
            lr0: 5e-4,
            power: 0.9,
            seed: 0,
            entropy_weights: true,
            memory_budget: 20,
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::flip_only(64, 64)),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) || !(self.power.is_finite() && self.power >= 0.0) {
            return Err(Error::Config("learning rate and schedule power must be finite and nonnegative".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::Config("Adam needs β in [0, 1), ε > 0, weight decay ≥ 0".into()));
        }
        Ok(())
    }

    fn weighting(&self) -> Weighting {
        if self.method == Method::Cil && self.entropy_weights {
            Weighting::Entropy
        } else {
            Weighting::Uniform
        }
    }
}

/// Loss and learning-rate trace of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub stage: String,
    pub seed: u64,
    pub steps: u64,
    pub epoch_loss: Vec<f64>,
    /// Learning rate at the first step of each epoch.
    pub epoch_lr: Vec<f64>,
    /// Mean of each objective term per epoch.
    pub term_loss: BTreeMap<String, Vec<f64>>,
    pub step_loss: Vec<f64>,
    pub snapshot: Option<String>,
    /// Kept out of the serialized report so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

struct Batch<T> {
    images: Tensor<T>,
    labels: Vec<LabelMap>,
    origin: Vec<Origin>,
}

/// Trains `model` for one stage.
///
/// `teachers` are `[]` for SS/FT/FE, `[previous]` for LWOF/Michieli/CIL and
/// `[previous, new-class auxiliary]` for LWM. `memory` holds LWM rehearsal
/// images and must be empty for every other method. Labels are taken as
/// given: the caller prepares the label view each method needs.
pub fn train_stage<T: Scalar>(
    mut model: Model<T>,
    teachers: &[&Model<T>],
    data: &[Sample],
    memory: &[Sample],
    config: &StageConfig,
) -> Result<(Model<T>, TrainReport)> {
    let started = Instant::now();
    config.validate()?;
    let method = config.method;
    check_setup(&model, teachers, data, memory, method)?;
    let pool: Vec<(&Sample, Origin)> = data
        .iter()
        .map(|s| (s, Origin::New))
        .chain(memory.iter().map(|s| (s, Origin::Memory)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    check_extents(&model, &pool, config.augment.as_ref())?;

    let trainable = model.partition().trainable_set(method.trainable());
    let head = if method.is_model_based() { model.head_count() - 1 } else { 0 };
    let steps_per_epoch = pool.len().div_ceil(config.batch_size);
    let total = (config.epochs * steps_per_epoch) as u64;
    let mut adam = AdamState::new(config.adam);
    let mut report = TrainReport {
        method,
        stage: model.stage_tag().to_string(),
        seed: config.seed,
        steps: total,
        epoch_loss: Vec::with_capacity(config.epochs),
        epoch_lr: Vec::with_capacity(config.epochs),
        term_loss: BTreeMap::new(),
        step_loss: Vec::with_capacity(total as usize),
        snapshot: None,
        wall_time_s: 0.0,
    };

    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x5f, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut term_sum: BTreeMap<&'static str, f64> = BTreeMap::new();
        report.epoch_lr.push(poly_lr(config.lr0, t, total, config.power)?);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = make_batch::<T>(&pool, chunk, config, epoch, b)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, &trainable);
            let x = g.constant(batch.images.clone());
            let out = model.forward(&mut g, &bound, x, head)?;
            let logits = Logits::new(out, model.heads()[head].clone());
            let objective = build_objective(&mut g, &batch, teachers, &logits, config)?;
            let value = objective.value(&g).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Data(format!("non-finite loss at step {t}")));
            }
            g.backward(objective.total)?;
            let lr = poly_lr(config.lr0, t, total, config.power)?;
            let grads = trainable
                .iter()
                .map(|name| {
                    let v = bound.var(name)?;
                    g.grad(v)
                        .map(|gr| (name.as_str(), gr))
                        .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} received no gradient")))
                })
                .collect::<Result<BTreeMap<&str, &[T]>>>()?;
            adam.update(
                lr,
                model
                    .params_mut()
                    .iter_mut()
                    .filter_map(|(k, p)| grads.get(k.as_str()).map(|gr| (k.as_str(), p.data_mut(), *gr))),
            )?;
            report.step_loss.push(value);
            loss_sum += value;
            for (name, l) in &objective.terms {
                *term_sum.entry(name).or_default() += l.value(&g).to_f64_lossy();
            }
            t += 1;
        }
        report.epoch_loss.push(loss_sum / steps_per_epoch as f64);
        for (name, s) in term_sum {
            report
                .term_loss
                .entry(name.to_string())
                .or_default()
                .push(s / steps_per_epoch as f64);
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

fn check_setup<T: Scalar>(
    model: &Model<T>,
    teachers: &[&Model<T>],
    data: &[Sample],
    memory: &[Sample],
    method: Method,
) -> Result<()> {
    if teachers.len() != method.teacher_count() {
        return Err(Error::InvalidArgument(format!(
            "{method:?} takes {} teacher(s), got {}",
            method.teacher_count(),
            teachers.len()
        )));
    }
    if !memory.is_empty() && method != Method::Lwm {
        return Err(Error::InvalidArgument(format!("{method:?} does not use a memory set")));
    }
    let student = model.class_list();
    let (allowed_new, allowed_memory): (Vec<ClassId>, Vec<ClassId>) = if method.is_model_based() {
        (model.heads()[model.head_count() - 1].clone(), vec![])
    } else if method == Method::Ss {
        (student.clone(), vec![])
    } else {
        if model.head_count() != 1 {
            return Err(Error::InvalidArgument(format!("{method:?} trains a single-head model")));
        }
        let old = teachers[0];
        if old.head_count() != 1 {
            return Err(Error::ClassMismatch("teacher must have a single head".into()));
        }
        let old_classes = old.class_list();
        if student.len() <= old_classes.len() || student[..old_classes.len()] != old_classes[..] {
            return Err(Error::ClassMismatch(format!(
                "student classes {student:?} must extend the teacher classes {old_classes:?}"
            )));
        }
        let new = student[old_classes.len()..].to_vec();
        if method == Method::Lwm && teachers[1].class_list() != new {
            return Err(Error::ClassMismatch(format!(
                "auxiliary teacher predicts {:?}, stage classes are {new:?}",
                teachers[1].class_list()
            )));
        }
        match method {
            Method::Michieli => (student.clone(), vec![]),
            Method::Lwm => (new, old_classes),
            _ => (new, vec![]),
        }
    };
    let check = |samples: &[Sample], allowed: &[ClassId], what: &str| -> Result<()> {
        for (i, s) in samples.iter().enumerate() {
            if let Some(v) = s.labels.values().iter().find(|&&v| v != IGNORE && !allowed.contains(&v)) {
                return Err(Error::ClassMismatch(format!(
                    "{what} image {i} is labeled with class {v}; {method:?} accepts {allowed:?}"
                )));
            }
        }
        Ok(())
    };
    check(data, &allowed_new, "training")?;
    check(memory, &allowed_memory, "memory")
}

fn check_extents<T: Scalar>(
    model: &Model<T>,
    pool: &[(&Sample, Origin)],
    aug: Option<&AugmentConfig>,
) -> Result<()> {
    let (h, w) = (pool[0].0.image.height, pool[0].0.image.width);
    if pool.iter().any(|(s, _)| s.image.height != h || s.image.width != w) {
        return Err(Error::Data("training images differ in size".into()));
    }
    match aug {
        Some(a) => {
            if a.crop_height > h || a.crop_width > w {
                return Err(Error::Config(format!(
                    "crop {}×{} larger than {h}×{w} images",
                    a.crop_height, a.crop_width
                )));
            }
            model.config().check_extent(a.crop_height, a.crop_width)
        }
        None => model.config().check_extent(h, w),
    }
}

fn make_batch<T: Scalar>(
    pool: &[(&Sample, Origin)],
    chunk: &[usize],
    config: &StageConfig,
    epoch: usize,
    batch: usize,
) -> Result<Batch<T>> {
    let mut images = Vec::with_capacity(chunk.len());
    let mut labels = Vec::with_capacity(chunk.len());
    let mut origin = Vec::with_capacity(chunk.len());
    for (pos, &i) in chunk.iter().enumerate() {
        let (s, o) = pool[i];
        let (img, lab) = match &config.augment {
            Some(a) => {
                let seed = mix_seed(&[config.seed, 0xa06, epoch as u64, batch as u64, pos as u64]);
                augment(&s.image, &s.labels, a, seed)?
            }
            None => (s.image.clone(), s.labels.clone()),
        };
        images.push(img);
        labels.push(lab);
        origin.push(o);
    }
    let refs: Vec<_> = images.iter().collect();
    Ok(Batch {
        images: images_to_tensor(&refs)?,
        labels,
        origin,
    })
}

/// Teacher softmax on the batch, entered into `g` as a constant.
fn teacher_probs<T: Scalar>(g: &mut Graph<T>, teacher: &Model<T>, images: &Tensor<T>) -> Result<ProbMap> {
    let logits = teacher.infer(images)?.swap_remove(0);
    let v = g.constant(logits);
    // a constant input keeps the softmax node out of the backward pass
    let p = g.softmax_channels(v)?;
    Ok(ProbMap::new(p, teacher.heads()[0].clone()))
}

fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    batch: &Batch<T>,
    teachers: &[&Model<T>],
    student: &Logits,
    config: &StageConfig,
) -> Result<Objective> {
    let labels = &batch.labels;
    match config.method {
        Method::Ss => losses::loss_ss(g, labels, student),
        Method::Ft | Method::Fe => losses::loss_ft_fe(g, labels, student),
        Method::Lwof => {
            let t = teacher_probs(g, teachers[0], &batch.images)?;
            losses::loss_lwof(g, labels, &t, student)
        }
        Method::Lwm => {
            let old = teacher_probs(g, teachers[0], &batch.images)?;
            let aux = teacher_probs(g, teachers[1], &batch.images)?;
            losses::loss_lwm(g, labels, &batch.origin, &old, &aux, student)
        }
        Method::Michieli => {
            let t = teacher_probs(g, teachers[0], &batch.images)?;
            losses::loss_michieli(g, labels, &t, student, Weighting::Uniform)
        }
        Method::Cil => {
            let t = teacher_probs(g, teachers[0], &batch.images)?;
            losses::loss_cil(g, labels, &t, student, config.weighting())
        }
    }
}

/// Parameter names a stage of `method` updates on `model`.
pub fn trainable_names<T: Scalar>(model: &Model<T>, method: Method) -> BTreeSet<String> {
    model.partition().trainable_set(method.trainable())
}

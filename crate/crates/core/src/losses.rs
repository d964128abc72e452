//! Segmentation losses, distillation terms and the pixel masks of the
//! incremental learning methods.
//!
//! Every loss here is a weighted negative log-likelihood `−Σ w·ln(max(p, ε))`
//! whose constant weight tensor encodes labels, teacher probabilities, masks
//! and normalizers. Normalization is per image (labeled pixels, all pixels or
//! masked pixels of that image), followed by the arithmetic mean over the
//! images a term applies to. Teacher probabilities only enter through the
//! weights, so no gradient reaches a teacher.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};
use crate::model::ClassId;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Label value excluded from every loss and metric.
pub const IGNORE: ClassId = 255;

/// Per-pixel class ids of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<ClassId>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(shape_err!(
                "label map {}×{} with {} values",
                height,
                width,
                values.len()
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: ClassId) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ClassId] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.values[y * self.width + x]
    }

    /// `|I_S|`: number of pixels that are not IGNORE.
    pub fn labeled_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Distinct non-IGNORE classes present.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.values.iter().copied().filter(|&v| v != IGNORE).collect()
    }

    /// Keeps labels of `keep`; everything else becomes IGNORE.
    pub fn restrict(&self, keep: &[ClassId]) -> Self {
        let values = self
            .values
            .iter()
            .map(|&v| if keep.contains(&v) { v } else { IGNORE })
            .collect();
        Self { values, ..*self }
    }
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    values: Vec<bool>,
}

impl PixelMask {
    pub fn new(values: Vec<bool>) -> Self {
        Self { values }
    }

    pub fn ones(len: usize) -> Self {
        Self::new(vec![true; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![false; len])
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }
}

/// Nonnegative per-pixel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    values: Vec<T>,
}

impl<T: Scalar> WeightMap<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(Self { values })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            values: vec![T::one(); len],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// A `[N, C, H, W]` node of a graph together with the class of each channel.
///
/// Used for probabilities (softmax outputs, teacher outputs, raw slices of a
/// joint softmax) as well as for logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub var: Var,
    pub classes: Vec<ClassId>,
}

pub type Logits = ProbMap;

impl ProbMap {
    pub fn new(var: Var, classes: Vec<ClassId>) -> Self {
        Self { var, classes }
    }

    fn channel_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    fn dims<T: Scalar>(&self, g: &Graph<T>) -> Result<(usize, usize, usize)> {
        let s = g.shape(self.var);
        if s.len() != 4 || s[1] != self.classes.len() {
            return Err(shape_err!(
                "probability map of shape {:?} for {} classes",
                s,
                self.classes.len()
            ));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }
}

/// Channel-wise softmax of `logits`.
pub fn softmax<T: Scalar>(g: &mut Graph<T>, logits: &Logits) -> Result<ProbMap> {
    Ok(ProbMap::new(g.softmax_channels(logits.var)?, logits.classes.clone()))
}

/// Channel selection without renormalization. `subset` must be contained in
/// `joint.classes`; the result lists channels in `subset` order.
pub fn slice_probs<T: Scalar>(g: &mut Graph<T>, joint: &ProbMap, subset: &[ClassId]) -> Result<ProbMap> {
    let channels = subset
        .iter()
        .map(|&c| {
            joint
                .channel_of(c)
                .ok_or_else(|| Error::ClassMismatch(format!("class {c} not in {:?}", joint.classes)))
        })
        .collect::<Result<Vec<_>>>()?;
    if channels.len() == joint.classes.len() && channels.iter().enumerate().all(|(i, &c)| i == c) {
        return Ok(joint.clone());
    }
    Ok(ProbMap::new(g.slice_channels(joint.var, &channels)?, subset.to_vec()))
}

/// A scalar loss node and how many images had an empty normalizer set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub value: Var,
    /// Images in the term whose pixel set was empty (they contribute 0).
    pub empty_images: usize,
    /// The term applied to no image at all and is the constant 0.
    pub skipped: bool,
}

impl Loss {
    pub fn is_degenerate(&self) -> bool {
        self.skipped || self.empty_images > 0
    }

    pub fn value<T: Scalar>(&self, g: &Graph<T>) -> T {
        g.value(self.value).data()[0]
    }
}

/// Named terms of a composite objective and their unweighted sum.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(&'static str, Loss)>,
}

impl Objective {
    fn from_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<(&'static str, Loss)>) -> Result<Self> {
        let mut total = terms[0].1.value;
        for (_, t) in &terms[1..] {
            total = g.add(total, t.value)?;
        }
        Ok(Self { total, terms })
    }

    pub fn term(&self, name: &str) -> Option<&Loss> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, l)| l)
    }

    pub fn value<T: Scalar>(&self, g: &Graph<T>) -> T {
        g.value(self.total).data()[0]
    }
}

fn zero_loss<T: Scalar>(g: &mut Graph<T>, empty_images: usize) -> Loss {
    Loss {
        value: g.constant(Tensor::scalar(T::zero())),
        empty_images,
        skipped: true,
    }
}

/// `−Σ w·ln(max(p, ε))` for a constant weight tensor shaped like `p`.
fn weighted_nll<T: Scalar>(g: &mut Graph<T>, probs: Var, weights: Tensor<T>) -> Result<Var> {
    let w = g.constant(weights);
    let logp = g.log(probs);
    let prod = g.mul(w, logp)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -T::one()))
}

fn check_labels<T: Scalar>(g: &Graph<T>, probs: &ProbMap, labels: &[LabelMap]) -> Result<(usize, usize, usize)> {
    let (n, c, plane) = probs.dims(g)?;
    let s = g.shape(probs.var);
    if labels.len() != n {
        return Err(shape_err!("{} label maps for a batch of {}", labels.len(), n));
    }
    for l in labels {
        if l.height != s[2] || l.width != s[3] {
            return Err(shape_err!(
                "label map {}×{} vs probabilities {}×{}",
                l.height,
                l.width,
                s[2],
                s[3]
            ));
        }
    }
    Ok((n, c, plane))
}

/// Cross-entropy over the images selected by `include`.
fn cross_entropy_on<T: Scalar>(
    g: &mut Graph<T>,
    labels: &[LabelMap],
    probs: &ProbMap,
    include: &[bool],
) -> Result<Loss> {
    let (n, c, plane) = check_labels(g, probs, labels)?;
    let images = include.iter().filter(|&&b| b).count();
    let mut empty = 0;
    let mut w = vec![T::zero(); n * c * plane];
    for (b, labels) in labels.iter().enumerate() {
        if !include[b] {
            continue;
        }
        let count = labels.labeled_count();
        if count == 0 {
            empty += 1;
            continue;
        }
        let scale = T::one() / T::of((count * images) as f64);
        for (i, &v) in labels.values.iter().enumerate() {
            if v == IGNORE {
                continue;
            }
            let k = probs.channel_of(v).ok_or_else(|| {
                Error::ClassMismatch(format!("label class {v} not in {:?}", probs.classes))
            })?;
            w[(b * c + k) * plane + i] = scale;
        }
    }
    if images == 0 || empty == images {
        return Ok(zero_loss(g, empty));
    }
    let shape = g.shape(probs.var).to_vec();
    let value = weighted_nll(g, probs.var, Tensor::new(shape, w)?)?;
    Ok(Loss {
        value,
        empty_images: empty,
        skipped: false,
    })
}

/// Pixel-averaged cross-entropy over labeled pixels of each image.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, labels: &[LabelMap], probs: &ProbMap) -> Result<Loss> {
    let include = vec![true; labels.len()];
    cross_entropy_on(g, labels, probs, &include)
}

fn check_pair<T: Scalar>(g: &Graph<T>, teacher: &ProbMap, student: &ProbMap) -> Result<(usize, usize, usize)> {
    if teacher.classes != student.classes {
        return Err(Error::ClassMismatch(format!(
            "teacher classes {:?} vs student classes {:?}",
            teacher.classes, student.classes
        )));
    }
    let dims = student.dims(g)?;
    if g.shape(teacher.var) != g.shape(student.var) {
        return Err(shape_err!(
            "teacher shape {:?} vs student shape {:?}",
            g.shape(teacher.var),
            g.shape(student.var)
        ));
    }
    Ok(dims)
}

/// Distillation over all pixels: `−(1/|I|) Σ_i Σ_s ỹ ln y`.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, teacher: &ProbMap, student: &ProbMap) -> Result<Loss> {
    let (n, _, plane) = check_pair(g, teacher, student)?;
    let scale = T::one() / T::of((plane * n) as f64);
    let t = g.value(teacher.var);
    let w = Tensor::from_fn(t.shape(), |i| t.data()[i] * scale);
    let value = weighted_nll(g, student.var, w)?;
    Ok(Loss {
        value,
        empty_images: 0,
        skipped: false,
    })
}

/// Masked, weighted distillation `−(1/|I_μ|) Σ_i Σ_s α_i μ_i ỹ ln y`.
/// Images with an empty mask contribute 0.
pub fn masked_kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &ProbMap,
    student: &ProbMap,
    mu: &[PixelMask],
    alpha: &[WeightMap<T>],
) -> Result<Loss> {
    let (n, c, plane) = check_pair(g, teacher, student)?;
    if mu.len() != n || alpha.len() != n {
        return Err(shape_err!("{} masks / {} weight maps for a batch of {}", mu.len(), alpha.len(), n));
    }
    for (m, a) in mu.iter().zip(alpha) {
        if m.values.len() != plane || a.values.len() != plane {
            return Err(shape_err!("mask or weight map size differs from {} pixels", plane));
        }
        if a.values.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::InvalidArgument("negative pixel weight".into()));
        }
    }
    let t = g.value(teacher.var).data();
    let mut w = vec![T::zero(); n * c * plane];
    let mut empty = 0;
    for b in 0..n {
        let count = mu[b].count();
        if count == 0 {
            empty += 1;
            continue;
        }
        let scale = T::one() / T::of((count * n) as f64);
        for k in 0..c {
            let base = (b * c + k) * plane;
            for i in 0..plane {
                if mu[b].values[i] {
                    w[base + i] = alpha[b].values[i] * t[base + i] * scale;
                }
            }
        }
    }
    if empty == n {
        return Ok(zero_loss(g, empty));
    }
    let shape = g.shape(student.var).to_vec();
    let value = weighted_nll(g, student.var, Tensor::new(shape, w)?)?;
    Ok(Loss {
        value,
        empty_images: empty,
        skipped: false,
    })
}

/// Entropy-based pixel weights `α_i = 1 − Σ_s ỹ log2 ỹ` (with 0·log 0 = 0).
pub fn entropy_weights<T: Scalar>(g: &Graph<T>, teacher: &ProbMap) -> Result<Vec<WeightMap<T>>> {
    let (n, c, plane) = teacher.dims(g)?;
    let t = g.value(teacher.var).data();
    Ok((0..n)
        .map(|b| {
            let values = (0..plane)
                .map(|i| {
                    let mut h = T::zero();
                    for k in 0..c {
                        let p = t[(b * c + k) * plane + i];
                        if p > T::zero() {
                            h -= p * p.log2();
                        }
                    }
                    T::one() + h
                })
                .collect();
            WeightMap { values }
        })
        .collect())
}

/// μ̃: 1 where the pixel carries an old-class label.
pub fn mask_old_labeled(labels: &LabelMap, old_classes: &[ClassId]) -> PixelMask {
    PixelMask::new(labels.values.iter().map(|v| old_classes.contains(v)).collect())
}

/// μ̄: 0 where the pixel carries a new-class label, 1 everywhere else.
pub fn mask_not_new_labeled(labels: &LabelMap, new_classes: &[ClassId]) -> PixelMask {
    PixelMask::new(labels.values.iter().map(|v| !new_classes.contains(v)).collect())
}

/// Pixel weighting inside the masked distillation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    Entropy,
}

/// Splits a student class list into the teacher's (old) classes, which must
/// lead, and the remaining new classes.
fn split_classes(teacher: &ProbMap, student: &Logits) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let old = teacher.classes.clone();
    if student.classes.len() <= old.len() || student.classes[..old.len()] != old[..] {
        return Err(Error::ClassMismatch(format!(
            "student classes {:?} must start with the teacher classes {:?} and add new ones",
            student.classes, old
        )));
    }
    let new = student.classes[old.len()..].to_vec();
    Ok((old, new))
}

fn require_labels_within(labels: &[LabelMap], allowed: &[ClassId], what: &str) -> Result<()> {
    for l in labels {
        if let Some(v) = l.values.iter().find(|&&v| v != IGNORE && !allowed.contains(&v)) {
            return Err(Error::ClassMismatch(format!("{what} contain class {v}, allowed {allowed:?}")));
        }
    }
    Ok(())
}

/// Supervised objective over every labeled class (single-stage upper bound).
pub fn loss_ss<T: Scalar>(g: &mut Graph<T>, labels_all: &[LabelMap], student: &Logits) -> Result<Objective> {
    let probs = softmax(g, student)?;
    let ce = cross_entropy(g, labels_all, &probs)?;
    Objective::from_terms(g, vec![("ce", ce)])
}

/// Fine-tuning / feature-extraction objective on the newest head's logits.
pub fn loss_ft_fe<T: Scalar>(g: &mut Graph<T>, labels_new: &[LabelMap], head: &Logits) -> Result<Objective> {
    let probs = softmax(g, head)?;
    let ce = cross_entropy(g, labels_new, &probs)?;
    Objective::from_terms(g, vec![("ce", ce)])
}

/// Learning without forgetting: CE on a softmax over the new channels plus
/// distillation on a separate softmax over the old channels.
pub fn loss_lwof<T: Scalar>(
    g: &mut Graph<T>,
    labels_new: &[LabelMap],
    teacher_old: &ProbMap,
    student: &Logits,
) -> Result<Objective> {
    let (old, new) = split_classes(teacher_old, student)?;
    require_labels_within(labels_new, &new, "new-class labels")?;
    let old_logits = slice_probs(g, student, &old)?;
    let new_logits = slice_probs(g, student, &new)?;
    let student_old = softmax(g, &old_logits)?;
    let student_new = softmax(g, &new_logits)?;
    let ce = cross_entropy(g, labels_new, &student_new)?;
    let kd = kd_loss(g, teacher_old, &student_old)?;
    Objective::from_terms(g, vec![("ce_new", ce), ("kd_old", kd)])
}

/// Which subset an image of a mixed batch was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Origin {
    /// Current-stage data, labeled with the new classes.
    New,
    /// Memory data, labeled with old classes.
    Memory,
}

/// Learning with memory: joint-softmax CE on new-data images (new slice) and
/// memory images (old slice), plus distillation of a separate old-class
/// softmax towards the old teacher and a separate new-class softmax towards
/// the auxiliary new-class teacher.
pub fn loss_lwm<T: Scalar>(
    g: &mut Graph<T>,
    labels: &[LabelMap],
    origin: &[Origin],
    teacher_old: &ProbMap,
    teacher_new: &ProbMap,
    student: &Logits,
) -> Result<Objective> {
    let (old, new) = split_classes(teacher_old, student)?;
    if teacher_new.classes != new {
        return Err(Error::ClassMismatch(format!(
            "auxiliary teacher predicts {:?}, new classes are {:?}",
            teacher_new.classes, new
        )));
    }
    if origin.len() != labels.len() {
        return Err(shape_err!("{} origins for {} label maps", origin.len(), labels.len()));
    }
    let is_new: Vec<bool> = origin.iter().map(|&o| o == Origin::New).collect();
    let is_mem: Vec<bool> = is_new.iter().map(|b| !b).collect();
    for (l, &o) in labels.iter().zip(origin) {
        match o {
            Origin::New => require_labels_within(std::slice::from_ref(l), &new, "new-data labels")?,
            Origin::Memory => require_labels_within(std::slice::from_ref(l), &old, "memory labels")?,
        }
    }
    let joint = softmax(g, student)?;
    let joint_new = slice_probs(g, &joint, &new)?;
    let joint_old = slice_probs(g, &joint, &old)?;
    let ce_new = cross_entropy_on(g, labels, &joint_new, &is_new)?;
    let ce_mem = cross_entropy_on(g, labels, &joint_old, &is_mem)?;
    let old_logits = slice_probs(g, student, &old)?;
    let new_logits = slice_probs(g, student, &new)?;
    let student_old = softmax(g, &old_logits)?;
    let student_new = softmax(g, &new_logits)?;
    let kd_old = kd_loss(g, teacher_old, &student_old)?;
    let kd_new = kd_loss(g, teacher_new, &student_new)?;
    Objective::from_terms(
        g,
        vec![
            ("ce_new", ce_new),
            ("ce_memory", ce_mem),
            ("kd_old", kd_old),
            ("kd_new", kd_new),
        ],
    )
}

/// Michieli-style objective: joint CE over old and new labels plus masked
/// distillation on pixels labeled with an old class. Pixel weights are
/// always uniform; requesting entropy weighting is an error.
pub fn loss_michieli<T: Scalar>(
    g: &mut Graph<T>,
    labels_all: &[LabelMap],
    teacher_old: &ProbMap,
    student: &Logits,
    weighting: Weighting,
) -> Result<Objective> {
    if weighting != Weighting::Uniform {
        return Err(Error::InvalidArgument(
            "the Michieli objective uses uniform pixel weights".into(),
        ));
    }
    let (old, _) = split_classes(teacher_old, student)?;
    let joint = softmax(g, student)?;
    let ce = cross_entropy(g, labels_all, &joint)?;
    let joint_old = slice_probs(g, &joint, &old)?;
    let mu: Vec<PixelMask> = labels_all.iter().map(|l| mask_old_labeled(l, &old)).collect();
    let alpha: Vec<WeightMap<T>> = labels_all.iter().map(|l| WeightMap::ones(l.len())).collect();
    let mkd = masked_kd_loss(g, teacher_old, &joint_old, &mu, &alpha)?;
    Objective::from_terms(g, vec![("ce", ce), ("mkd_old", mkd)])
}

/// Class-incremental objective without old labels: CE on new-class pixels
/// against the new slice of the joint softmax, masked distillation of the
/// old slice everywhere else, optionally entropy weighted.
pub fn loss_cil<T: Scalar>(
    g: &mut Graph<T>,
    labels_new: &[LabelMap],
    teacher_old: &ProbMap,
    student: &Logits,
    weighting: Weighting,
) -> Result<Objective> {
    let (old, new) = split_classes(teacher_old, student)?;
    for l in labels_new {
        if let Some(v) = l.values.iter().find(|v| old.contains(v)) {
            return Err(Error::ClassMismatch(format!(
                "old class {v} labeled; this objective only takes new-class labels"
            )));
        }
    }
    require_labels_within(labels_new, &new, "new-class labels")?;
    let joint = softmax(g, student)?;
    let joint_new = slice_probs(g, &joint, &new)?;
    let joint_old = slice_probs(g, &joint, &old)?;
    let ce = cross_entropy(g, labels_new, &joint_new)?;
    let mu: Vec<PixelMask> = labels_new.iter().map(|l| mask_not_new_labeled(l, &new)).collect();
    let alpha = match weighting {
        Weighting::Entropy => entropy_weights(g, teacher_old)?,
        Weighting::Uniform => labels_new.iter().map(|l| WeightMap::ones(l.len())).collect(),
    };
    let mkd = masked_kd_loss(g, teacher_old, &joint_old, &mu, &alpha)?;
    Objective::from_terms(g, vec![("ce_new", ce), ("mkd_old", mkd)])
}

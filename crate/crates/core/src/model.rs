//! Encoder-decoder segmentation network with per-stage head management.
//!
//! The encoder halves the resolution `depth` times with stride-2 3×3
//! convolutions; every scale carries two 3×3 conv+relu layers. A decoder head
//! mirrors it with nearest-neighbour ×2 upsampling (no skip connections) and
//! ends in a 1×1 projection onto the head's classes. Teacher-based stages use
//! a single head whose channels list old classes first; model-based stages
//! append one decoder head per stage.
//!
//! A [`Model`] value is also the snapshot: parameters, per-head class lists,
//! the configuration and the tag of the stage that produced it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensors, write_tensors};
use crate::tensor::{Graph, Tensor, Var};

/// Class identifier as stored in 8-bit label images.
pub type ClassId = u8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_channels: usize,
    /// Channels of the first encoder scale; doubled at every further scale.
    pub base_width: usize,
    /// Number of 2× downsampling stages.
    pub depth: usize,
    /// Output channels of the first decoder head.
    pub class_count: usize,
    pub extra_decoder_heads: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 16,
            depth: 3,
            class_count: 1,
            extra_decoder_heads: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("network depth must be >= 1".into()));
        }
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be >= 1".into()));
        }
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Image extents must be divisible by `2^depth`.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if !height.is_multiple_of(unit) || !width.is_multiple_of(unit) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image {height}×{width} not divisible by 2^{} = {unit}",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Which parameters a training method may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Only the newest decoder head.
    FeatureExtraction,
    /// Encoder and newest decoder head.
    FineTuning,
    /// Every parameter.
    All,
}

/// Exhaustive, disjoint split of parameter names into encoder and heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub encoder: BTreeSet<String>,
    pub decoders: Vec<BTreeSet<String>>,
}

impl ParamPartition {
    pub fn trainable_set(&self, mode: Trainable) -> BTreeSet<String> {
        let newest = self.decoders.last().cloned().unwrap_or_default();
        match mode {
            Trainable::FeatureExtraction => newest,
            Trainable::FineTuning => self.encoder.union(&newest).cloned().collect(),
            Trainable::All => self
                .decoders
                .iter()
                .flatten()
                .chain(&self.encoder)
                .cloned()
                .collect(),
        }
    }
}

/// Parameters bound into a graph for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds parameters to nodes the caller already created.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: NetConfig,
    heads: Vec<Vec<ClassId>>,
    params: BTreeMap<String, Tensor<T>>,
    stage_tag: String,
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

fn encoder_layout(cfg: &NetConfig) -> Vec<ConvSpec> {
    let mut out = Vec::new();
    let mut cin = cfg.input_channels;
    for level in 0..cfg.depth {
        let w = cfg.width(level);
        out.push(ConvSpec {
            name: format!("enc.{level}.0"),
            cin,
            cout: w,
            k: 3,
        });
        out.push(ConvSpec {
            name: format!("enc.{level}.1"),
            cin: w,
            cout: w,
            k: 3,
        });
        cin = w;
    }
    out
}

fn decoder_layout(cfg: &NetConfig, head: usize, classes: usize) -> Vec<ConvSpec> {
    let mut out = Vec::new();
    let mut cin = cfg.width(cfg.depth - 1);
    for step in 0..cfg.depth {
        let level = cfg.depth - 1 - step;
        let w = if level == 0 {
            cfg.base_width
        } else {
            cfg.width(level - 1)
        };
        out.push(ConvSpec {
            name: format!("dec.{head}.{step}.0"),
            cin,
            cout: w,
            k: 3,
        });
        out.push(ConvSpec {
            name: format!("dec.{head}.{step}.1"),
            cin: w,
            cout: w,
            k: 3,
        });
        cin = w;
    }
    out.push(ConvSpec {
        name: format!("dec.{head}.out"),
        cin,
        cout: classes,
        k: 1,
    });
    out
}

fn he_init<T: Scalar>(spec: &ConvSpec, rng: &mut ChaCha8Rng, params: &mut BTreeMap<String, Tensor<T>>) {
    let fan_in = spec.cin * spec.k * spec.k;
    let std = (2.0 / fan_in as f64).sqrt();
    let weight = Tensor::from_fn(&[spec.cout, spec.cin, spec.k, spec.k], |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    });
    params.insert(format!("{}.weight", spec.name), weight);
    params.insert(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout]));
}

fn head_seed(seed: u64, head: usize) -> u64 {
    // splitmix64 finalizer keeps per-head streams decorrelated.
    let mut z = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(head as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_classes(classes: &[ClassId]) -> Result<()> {
    let unique: BTreeSet<_> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(Error::ClassMismatch(format!("duplicate class ids in {classes:?}")));
    }
    Ok(())
}

impl<T: Scalar> Model<T> {
    /// Deterministic He-normal initialization. `heads` lists the classes of
    /// every decoder head; its shape must agree with `config`.
    pub fn build(config: &NetConfig, heads: Vec<Vec<ClassId>>, seed: u64) -> Result<Self> {
        config.validate()?;
        if heads.len() != 1 + config.extra_decoder_heads {
            return Err(Error::Config(format!(
                "config declares {} heads, got {} class lists",
                1 + config.extra_decoder_heads,
                heads.len()
            )));
        }
        if heads[0].len() != config.class_count {
            return Err(Error::Config(format!(
                "class_count {} but head 0 lists {} classes",
                config.class_count,
                heads[0].len()
            )));
        }
        let all: Vec<ClassId> = heads.iter().flatten().copied().collect();
        check_classes(&all)?;
        if heads.iter().any(|h| h.is_empty()) {
            return Err(Error::Config("every head needs at least one class".into()));
        }
        let mut params = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in encoder_layout(config) {
            he_init(&spec, &mut rng, &mut params);
        }
        for (h, classes) in heads.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed(seed, h));
            for spec in decoder_layout(config, h, classes.len()) {
                he_init(&spec, &mut rng, &mut params);
            }
        }
        Ok(Self {
            config: config.clone(),
            heads,
            params,
            stage_tag: String::new(),
        })
    }

    /// Fresh, fully re-initialized single-head model predicting the old
    /// classes followed by `new_classes`.
    pub fn extend_for_teacher_stage(prev: &Self, new_classes: &[ClassId], seed: u64) -> Result<Self> {
        let old = prev.class_list();
        Self::check_new_classes(&old, new_classes)?;
        let mut classes = old;
        classes.extend_from_slice(new_classes);
        let config = NetConfig {
            class_count: classes.len(),
            extra_decoder_heads: 0,
            ..prev.config.clone()
        };
        Self::build(&config, vec![classes], seed)
    }

    /// Copy of `prev` with an additional randomly initialized decoder head
    /// for `new_classes`.
    pub fn extend_for_model_based_stage(prev: &Self, new_classes: &[ClassId], seed: u64) -> Result<Self> {
        Self::check_new_classes(&prev.class_list(), new_classes)?;
        let mut next = prev.clone();
        let head = next.heads.len();
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed(seed, head));
        for spec in decoder_layout(&next.config, head, new_classes.len()) {
            he_init(&spec, &mut rng, &mut next.params);
        }
        next.heads.push(new_classes.to_vec());
        next.config.extra_decoder_heads += 1;
        Ok(next)
    }

    fn check_new_classes(old: &[ClassId], new_classes: &[ClassId]) -> Result<()> {
        if new_classes.is_empty() {
            return Err(Error::InvalidArgument("no new classes to add".into()));
        }
        check_classes(new_classes)?;
        if let Some(c) = new_classes.iter().find(|c| old.contains(c)) {
            return Err(Error::ClassMismatch(format!("class {c} already predicted by the model")));
        }
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn heads(&self) -> &[Vec<ClassId>] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// All predicted classes, concatenated over heads in head order.
    pub fn class_list(&self) -> Vec<ClassId> {
        self.heads.iter().flatten().copied().collect()
    }

    pub fn stage_tag(&self) -> &str {
        &self.stage_tag
    }

    pub fn set_stage_tag(&mut self, tag: impl Into<String>) {
        self.stage_tag = tag.into();
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn partition(&self) -> ParamPartition {
        let mut encoder = BTreeSet::new();
        let mut decoders = vec![BTreeSet::new(); self.heads.len()];
        for name in self.params.keys() {
            if name.starts_with("enc.") {
                encoder.insert(name.clone());
            } else if let Some(h) = name
                .strip_prefix("dec.")
                .and_then(|rest| rest.split('.').next())
                .and_then(|h| h.parse::<usize>().ok())
            {
                decoders[h].insert(name.clone());
            }
        }
        ParamPartition { encoder, decoders }
    }

    pub fn head_param_count(&self, head: usize) -> usize {
        let prefix = format!("dec.{head}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Inserts every parameter into `g`; names in `trainable` require grad.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &BTreeSet<String>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable.contains(name))))
            .collect();
        Bound { vars }
    }

    fn conv(&self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    fn check_input(&self, g: &Graph<T>, images: Var) -> Result<()> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "expected [N,{},H,W] images, got {s:?}",
                self.config.input_channels
            )));
        }
        self.config.check_extent(s[2], s[3])
    }

    /// Encoder features of `images: [N,C,H,W]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        self.check_input(g, images)?;
        let mut x = images;
        for level in 0..self.config.depth {
            let y = self.conv(g, p, &format!("enc.{level}.0"), x, 2, 1)?;
            let y = g.relu(y);
            let y = self.conv(g, p, &format!("enc.{level}.1"), y, 1, 1)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Logits of decoder head `head` from encoder features.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, features: Var, head: usize) -> Result<Var> {
        if head >= self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "head {head} requested, model has {}",
                self.heads.len()
            )));
        }
        let mut x = features;
        for step in 0..self.config.depth {
            let up = g.upsample_nearest(x, 2)?;
            let y = self.conv(g, p, &format!("dec.{head}.{step}.0"), up, 1, 1)?;
            let y = g.relu(y);
            let y = self.conv(g, p, &format!("dec.{head}.{step}.1"), y, 1, 1)?;
            x = g.relu(y);
        }
        self.conv(g, p, &format!("dec.{head}.out"), x, 1, 0)
    }

    /// Logits `[N, |head classes|, H, W]` of one head.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, images: Var, head: usize) -> Result<Var> {
        let features = self.encode(g, p, images)?;
        self.decode(g, p, features, head)
    }

    /// Logits of every head, sharing one encoder pass.
    pub fn forward_all(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Vec<Var>> {
        let features = self.encode(g, p, images)?;
        (0..self.heads.len())
            .map(|h| self.decode(g, p, features, h))
            .collect()
    }

    /// Inference without gradients; returns per-head logits tensors.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &BTreeSet::new());
        let x = g.constant(images.clone());
        let outs = self.forward_all(&mut g, &p, x)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Parameters in the binary container layout.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, self.params.iter().map(|(k, v)| (k.as_str(), v)))
            .expect("writing to memory cannot fail");
        bytes
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.toml` (metadata).
    pub fn save(&self, stem: &Path) -> Result<()> {
        fs::write(with_ext(stem, "bin"), self.param_bytes())?;
        let meta = SnapshotMeta {
            stage_tag: self.stage_tag.clone(),
            heads: self.heads.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(with_ext(stem, "toml"), text)?;
        Ok(())
    }

    /// Loads a snapshot; parameter names and shapes must match the metadata.
    pub fn load(stem: &Path) -> Result<Self> {
        let meta_path = with_ext(stem, "toml");
        let text = fs::read_to_string(&meta_path)?;
        let meta: SnapshotMeta = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let bytes = fs::read(with_ext(stem, "bin"))?;
        let tensors = read_tensors::<T>(&bytes[..])?;
        let mut model = Self::build(&meta.config, meta.heads, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "snapshot holds {} tensors, architecture needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in tensors {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        model.stage_tag = meta.stage_tag;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    stage_tag: String,
    heads: Vec<Vec<ClassId>>,
    config: NetConfig,
}

pub fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

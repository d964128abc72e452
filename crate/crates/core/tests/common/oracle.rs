//! Explicit-loop reference implementations, independent of the graph engine.
//!
//! Maps are indexed `[image][channel][pixel]`.

#![allow(dead_code)]

pub type Maps = Vec<Vec<Vec<f64>>>;

pub const EPS: f64 = 1e-12;
pub const IGNORE: u8 = 255;

fn ln(p: f64) -> f64 {
    p.max(EPS).ln()
}

pub fn softmax(z: &Maps) -> Maps {
    z.iter()
        .map(|img| {
            let c = img.len();
            let p = img[0].len();
            let mut out = vec![vec![0.0; p]; c];
            for i in 0..p {
                let m = (0..c).map(|k| img[k][i]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..c).map(|k| (img[k][i] - m).exp()).sum();
                for k in 0..c {
                    out[k][i] = (img[k][i] - m).exp() / s;
                }
            }
            out
        })
        .collect()
}

/// Channels of `m` at the positions of `want` inside `classes`.
pub fn slice(m: &Maps, classes: &[u8], want: &[u8]) -> Maps {
    let idx: Vec<usize> = want
        .iter()
        .map(|c| classes.iter().position(|k| k == c).unwrap())
        .collect();
    m.iter()
        .map(|img| idx.iter().map(|&i| img[i].clone()).collect())
        .collect()
}

/// Mean over included images of `−(1/|labeled|) Σ ln p[label]`.
pub fn ce(probs: &Maps, classes: &[u8], labels: &[Vec<u8>], include: &[bool]) -> f64 {
    let images = include.iter().filter(|&&b| b).count();
    if images == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for b in 0..probs.len() {
        if !include[b] {
            continue;
        }
        let mut s = 0.0;
        let mut n = 0;
        for (i, &v) in labels[b].iter().enumerate() {
            if v == IGNORE {
                continue;
            }
            let k = classes.iter().position(|&c| c == v).unwrap();
            s -= ln(probs[b][k][i]);
            n += 1;
        }
        if n > 0 {
            total += s / n as f64;
        }
    }
    total / images as f64
}

pub fn kd(teacher: &Maps, student: &Maps) -> f64 {
    let mut total = 0.0;
    for b in 0..student.len() {
        let p = student[b][0].len();
        let mut s = 0.0;
        for i in 0..p {
            for k in 0..student[b].len() {
                s -= teacher[b][k][i] * ln(student[b][k][i]);
            }
        }
        total += s / p as f64;
    }
    total / student.len() as f64
}

pub fn masked_kd(teacher: &Maps, student: &Maps, mu: &[Vec<bool>], alpha: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for b in 0..student.len() {
        let count = mu[b].iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        let mut s = 0.0;
        for i in 0..student[b][0].len() {
            if !mu[b][i] {
                continue;
            }
            for k in 0..student[b].len() {
                s -= alpha[b][i] * teacher[b][k][i] * ln(student[b][k][i]);
            }
        }
        total += s / count as f64;
    }
    total / student.len() as f64
}

pub fn entropy_alpha(teacher: &Maps) -> Vec<Vec<f64>> {
    teacher
        .iter()
        .map(|img| {
            (0..img[0].len())
                .map(|i| {
                    1.0 - img
                        .iter()
                        .map(|ch| {
                            let p = ch[i];
                            if p > 0.0 {
                                p * p.log2()
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// One random loss instance: student logits over `old ++ new`, teacher
/// logits over `old` and `new`, and label maps for every objective.
#[derive(Clone, Debug)]
pub struct Instance {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub old: Vec<u8>,
    pub new: Vec<u8>,
    pub student: Maps,
    pub teacher_old: Maps,
    pub teacher_new: Maps,
    /// Labels over new classes only.
    pub labels_new: Vec<Vec<u8>>,
    /// Labels over old and new classes.
    pub labels_all: Vec<Vec<u8>>,
    /// Mixed batch: new-class labels for `New` images, old for `Memory`.
    pub labels_mix: Vec<Vec<u8>>,
    pub from_memory: Vec<bool>,
}

impl Instance {
    pub fn classes(&self) -> Vec<u8> {
        self.old.iter().chain(&self.new).copied().collect()
    }

    pub fn random(rng: &mut impl rand::Rng) -> Self {
        let n = rng.random_range(1..=3);
        let h = rng.random_range(1..=3);
        let w = rng.random_range(1..=3);
        let co = rng.random_range(1..=4);
        let cn = rng.random_range(1..=4);
        let old: Vec<u8> = (0..co as u8).collect();
        let new: Vec<u8> = (10..10 + cn as u8).collect();
        let p = h * w;
        let from_memory: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let mut maps = |c: usize, scale: f64| -> Maps {
            (0..n)
                .map(|_| {
                    (0..c)
                        .map(|_| (0..p).map(|_| rng.random_range(-scale..scale)).collect())
                        .collect()
                })
                .collect()
        };
        let student = maps(co + cn, 3.0);
        let teacher_old = maps(co, 3.0);
        let teacher_new = maps(cn, 3.0);
        let mut labels = |pool: &[u8]| -> Vec<Vec<u8>> {
            (0..n)
                .map(|_| {
                    (0..p)
                        .map(|_| {
                            if rng.random_bool(0.3) {
                                IGNORE
                            } else {
                                pool[rng.random_range(0..pool.len())]
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let all: Vec<u8> = old.iter().chain(&new).copied().collect();
        let labels_new = labels(&new);
        let labels_all = labels(&all);
        let mem_labels = labels(&old);
        let labels_mix = (0..n)
            .map(|b| {
                if from_memory[b] {
                    mem_labels[b].clone()
                } else {
                    labels_new[b].clone()
                }
            })
            .collect();
        Self {
            n,
            h,
            w,
            old,
            new,
            student,
            teacher_old,
            teacher_new,
            labels_new,
            labels_all,
            labels_mix,
            from_memory,
        }
    }

    pub fn ss(&self) -> f64 {
        ce(&softmax(&self.student), &self.classes(), &self.labels_all, &vec![true; self.n])
    }

    /// The FT/FE objective on a head predicting the new classes only.
    pub fn ft_fe(&self) -> f64 {
        let head = slice(&self.student, &self.classes(), &self.new);
        ce(&softmax(&head), &self.new, &self.labels_new, &vec![true; self.n])
    }

    pub fn lwof(&self) -> f64 {
        let cls = self.classes();
        let s_old = softmax(&slice(&self.student, &cls, &self.old));
        let s_new = softmax(&slice(&self.student, &cls, &self.new));
        ce(&s_new, &self.new, &self.labels_new, &vec![true; self.n])
            + kd(&softmax(&self.teacher_old), &s_old)
    }

    pub fn lwm(&self) -> f64 {
        let cls = self.classes();
        let joint = softmax(&self.student);
        let is_new: Vec<bool> = self.from_memory.iter().map(|m| !m).collect();
        let ce_new = ce(&slice(&joint, &cls, &self.new), &self.new, &self.labels_mix, &is_new);
        let ce_mem = ce(&slice(&joint, &cls, &self.old), &self.old, &self.labels_mix, &self.from_memory);
        let s_old = softmax(&slice(&self.student, &cls, &self.old));
        let s_new = softmax(&slice(&self.student, &cls, &self.new));
        ce_new
            + ce_mem
            + kd(&softmax(&self.teacher_old), &s_old)
            + kd(&softmax(&self.teacher_new), &s_new)
    }

    pub fn michieli(&self) -> f64 {
        let cls = self.classes();
        let joint = softmax(&self.student);
        let mu: Vec<Vec<bool>> = self
            .labels_all
            .iter()
            .map(|l| l.iter().map(|v| self.old.contains(v)).collect())
            .collect();
        let ones = vec![vec![1.0; self.h * self.w]; self.n];
        ce(&joint, &cls, &self.labels_all, &vec![true; self.n])
            + masked_kd(&softmax(&self.teacher_old), &slice(&joint, &cls, &self.old), &mu, &ones)
    }

    pub fn cil(&self, entropy: bool) -> f64 {
        let cls = self.classes();
        let joint = softmax(&self.student);
        let t = softmax(&self.teacher_old);
        let mu: Vec<Vec<bool>> = self
            .labels_new
            .iter()
            .map(|l| l.iter().map(|v| !self.new.contains(v)).collect())
            .collect();
        let alpha = if entropy {
            entropy_alpha(&t)
        } else {
            vec![vec![1.0; self.h * self.w]; self.n]
        };
        ce(&slice(&joint, &cls, &self.new), &self.new, &self.labels_new, &vec![true; self.n])
            + masked_kd(&t, &slice(&joint, &cls, &self.old), &mu, &alpha)
    }
}

/// Direct 6-nested-loop cross-correlation. Shapes `[n,ci,h,w]`, `[co,ci,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [co, _, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (x0 * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                    * k[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x0] = s;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// Per-class IoU by explicit set intersection and union of pixel indices.
pub fn brute_iou(truth: &[u8], pred: &[u8], class: u8) -> Option<f64> {
    use std::collections::BTreeSet;
    let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
    let p: BTreeSet<usize> = (0..pred.len())
        .filter(|&i| pred[i] == class && truth[i] != IGNORE)
        .collect();
    let union = t.union(&p).count();
    (union > 0).then(|| t.intersection(&p).count() as f64 / union as f64)
}

pub fn brute_miou(truth: &[u8], pred: &[u8], classes: &[u8]) -> Option<f64> {
    let v: Vec<f64> = classes.iter().filter_map(|&c| brute_iou(truth, pred, c)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Hand-unrolled Adam with L2 decay folded into the gradient.
pub fn adam_trace(theta0: f64, grads: &[f64], lr: &[f64], b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, (&g0, &a)) in grads.iter().zip(lr).enumerate() {
        let g = g0 + wd * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= a * mh / (vh.sqrt() + eps);
        out.push(theta);
    }
    out
}

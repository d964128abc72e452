#![allow(dead_code)]

pub mod oracle;

use cilseg::losses::{self, LabelMap, Logits, Objective, Origin, ProbMap, Weighting};
use cilseg::tensor::{Graph, Tensor, Var};
use oracle::{Instance, Maps};

pub fn to_tensor(m: &Maps) -> Tensor<f64> {
    let n = m.len();
    let c = m[0].len();
    let p = m[0][0].len();
    let data: Vec<f64> = m.iter().flatten().flatten().copied().collect();
    assert_eq!(data.len(), n * c * p);
    Tensor::new(vec![n, c, p, 1], data).unwrap()
}

fn label_maps(inst: &Instance, v: &[Vec<u8>]) -> Vec<LabelMap> {
    v.iter()
        .map(|l| LabelMap::new(inst.h * inst.w, 1, l.clone()).unwrap())
        .collect()
}

/// Names of the composite objectives, in [`objective`] order.
pub const OBJECTIVES: [&str; 8] = ["ss", "ft_fe", "lwof", "lwm", "michieli", "cil", "cil_now", "_"];

pub fn oracle_value(inst: &Instance, which: &str) -> f64 {
    match which {
        "ss" => inst.ss(),
        "ft_fe" => inst.ft_fe(),
        "lwof" => inst.lwof(),
        "lwm" => inst.lwm(),
        "michieli" => inst.michieli(),
        "cil" => inst.cil(true),
        "cil_now" => inst.cil(false),
        _ => unreachable!(),
    }
}

fn teacher(g: &mut Graph<f64>, m: &Maps, classes: &[u8]) -> ProbMap {
    let v = g.constant(to_tensor(m));
    let p = g.softmax_channels(v).unwrap();
    ProbMap::new(p, classes.to_vec())
}

/// Builds objective `which` on logits `z` (a leaf of `g`).
pub fn objective(g: &mut Graph<f64>, inst: &Instance, z: Var, which: &str) -> Objective {
    let classes = inst.classes();
    let student = Logits::new(z, classes.clone());
    match which {
        "ss" => losses::loss_ss(g, &label_maps(inst, &inst.labels_all), &student).unwrap(),
        "ft_fe" => {
            let head = losses::slice_probs(g, &student, &inst.new).unwrap();
            losses::loss_ft_fe(g, &label_maps(inst, &inst.labels_new), &head).unwrap()
        }
        "lwof" => {
            let t = teacher(g, &inst.teacher_old, &inst.old);
            losses::loss_lwof(g, &label_maps(inst, &inst.labels_new), &t, &student).unwrap()
        }
        "lwm" => {
            let t = teacher(g, &inst.teacher_old, &inst.old);
            let a = teacher(g, &inst.teacher_new, &inst.new);
            let origin: Vec<Origin> = inst
                .from_memory
                .iter()
                .map(|&m| if m { Origin::Memory } else { Origin::New })
                .collect();
            losses::loss_lwm(g, &label_maps(inst, &inst.labels_mix), &origin, &t, &a, &student).unwrap()
        }
        "michieli" => {
            let t = teacher(g, &inst.teacher_old, &inst.old);
            losses::loss_michieli(g, &label_maps(inst, &inst.labels_all), &t, &student, Weighting::Uniform)
                .unwrap()
        }
        "cil" | "cil_now" => {
            let t = teacher(g, &inst.teacher_old, &inst.old);
            let w = if which == "cil" { Weighting::Entropy } else { Weighting::Uniform };
            losses::loss_cil(g, &label_maps(inst, &inst.labels_new), &t, &student, w).unwrap()
        }
        _ => unreachable!(),
    }
}

pub fn engine_value(inst: &Instance, which: &str) -> f64 {
    let mut g = Graph::new();
    let z = g.param(to_tensor(&inst.student));
    let obj = objective(&mut g, inst, z, which);
    obj.value(&g)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Analytic-vs-numeric relative error of the gradient of `build` with respect
/// to each listed input. `build` receives leaves for the inputs and returns
/// a scalar node.
pub fn check_grad(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    (0..inputs.len())
        .map(|which| {
            let base = inputs[which].data().to_vec();
            let numeric = numeric_grad(&base, FD_STEP, |x| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            g.constant(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).data()[0]
            });
            rel_err(&analytic[which], &numeric)
        })
        .collect()
}

/// Gradient error of objective `which` with respect to the student logits.
pub fn objective_grad_err(inst: &Instance, which: &str) -> f64 {
    let mut g = Graph::new();
    let z = g.param(to_tensor(&inst.student));
    let obj = objective(&mut g, inst, z, which);
    g.backward(obj.total).unwrap();
    // a fully skipped objective is constant in z
    let analytic = g.grad(z).map_or_else(|| vec![0.0; base_len(inst)], <[f64]>::to_vec);
    let base = to_tensor(&inst.student);
    let numeric = numeric_grad(base.data(), FD_STEP, |x| {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap(), false);
        objective(&mut g, inst, z, which).value(&g)
    });
    rel_err(&analytic, &numeric)
}

pub fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so relu kinks stay outside the FD stencil.
pub fn random_off_zero(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn base_len(inst: &Instance) -> usize {
    inst.n * inst.student[0].len() * inst.h * inst.w
}

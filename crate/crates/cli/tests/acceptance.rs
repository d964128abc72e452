//! The acceptance suite: one PASS/FAIL line per criterion. Exits nonzero
//! when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cilseg::data::{generate, SceneSpec, StagePlan};
use cilseg::eval::{evaluate_snapshot, ConfusionMatrix, IoUReport, Metric};
use cilseg::losses::{cross_entropy, entropy_weights, kd_loss, masked_kd_loss, LabelMap, PixelMask, ProbMap, WeightMap};
use cilseg::model::NetConfig;
use cilseg::tensor::{Graph, Tensor};
use cilseg::training::{
    poly_lr, run_protocol, train_first_stage, AdamConfig, AdamState, MethodSpec, ProtocolConfig, StageConfig,
};
use cilseg::Model;
use common::oracle::{self, Instance};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn within(limit: Duration, started: Instant) -> Result<String, String> {
    let took = started.elapsed();
    check(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(format!("{took:.2?}"))
}

fn probs(g: &mut Graph<f64>, n: usize, c: usize, p: usize, v: Vec<f64>) -> ProbMap {
    let classes: Vec<u8> = (0..c as u8).collect();
    ProbMap::new(g.constant(Tensor::new(vec![n, c, p, 1], v).unwrap()), classes)
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize, p: usize) -> Vec<f64> {
    let m: oracle::Maps = (0..n)
        .map(|_| (0..c).map(|_| (0..p).map(|_| rng.random_range(-3.0..3.0)).collect()).collect())
        .collect();
    oracle::softmax(&m).into_iter().flatten().flatten().collect()
}

fn loss_identities() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let (n, c, p) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..10));
        let mut g = Graph::new();
        let t = probs(&mut g, n, c, p, random_probs(&mut rng, n, c, p));
        let s = probs(&mut g, n, c, p, random_probs(&mut rng, n, c, p));
        let kd = kd_loss(&mut g, &t, &s).unwrap().value(&g);
        let masked = masked_kd_loss(&mut g, &t, &s, &vec![PixelMask::ones(p); n], &vec![WeightMap::ones(p); n])
            .unwrap()
            .value(&g);
        check(kd == masked, || format!("masked kd {masked} != kd {kd}"))?;

        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0..c as u8)).collect()).collect();
        let mut hot = vec![0.0; n * c * p];
        for (b, l) in labels.iter().enumerate() {
            for (i, &v) in l.iter().enumerate() {
                hot[(b * c + v as usize) * p + i] = 1.0;
            }
        }
        let h = probs(&mut g, n, c, p, hot);
        let maps: Vec<LabelMap> = labels.into_iter().map(|l| LabelMap::new(p, 1, l).unwrap()).collect();
        let a = kd_loss(&mut g, &h, &s).unwrap().value(&g);
        let b = cross_entropy(&mut g, &maps, &s).unwrap().value(&g);
        check((a - b).abs() < 1e-10, || format!("one-hot kd {a} vs ce {b}"))?;
    }
    for c in [1usize, 2, 4, 8] {
        let mut g = Graph::new();
        let mut hot = vec![0.0; c];
        hot[c - 1] = 1.0;
        let t = probs(&mut g, 1, c, 1, hot);
        let low = entropy_weights(&g, &t).unwrap()[0].values()[0];
        let u = probs(&mut g, 1, c, 1, vec![1.0 / c as f64; c]);
        let high = entropy_weights(&g, &u).unwrap()[0].values()[0];
        check(low == 1.0, || format!("one-hot weight {low}"))?;
        let want = 1.0 + (c as f64).log2();
        check(high == want, || format!("uniform weight {high}, want {want}"))?;
    }
    within(Duration::from_secs(1), started)
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let inst = Instance::random(&mut rng);
        for which in &OBJECTIVES[..7] {
            let d = (engine_value(&inst, which) - oracle_value(&inst, which)).abs();
            worst = worst.max(d);
            check(d < 1e-10, || format!("instance {i} {which}: difference {d:e}"))?;
        }
    }
    Ok(format!("max difference {worst:.1e}, {}", within(Duration::from_secs(10), started)?))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, errs: Vec<f64>| -> Result<(), String> {
        for e in errs {
            worst = worst.max(e);
            check(e < FD_TOL, || format!("{name}: relative error {e:e}"))?;
        }
        Ok(())
    };
    for s in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(0xacc0 + s);
        let a = random_off_zero(&mut r, &[2, 3, 4]);
        let b = random_off_zero(&mut r, &[1, 3, 1]);
        let w = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
        let probe = |g: &mut Graph<f64>, v| {
            let c = g.constant(w.clone());
            let m = g.mul(v, c).unwrap();
            g.sum_all(m)
        };
        note("add", check_grad(&[a.clone(), b.clone()], |g, v| {
            let o = g.add(v[0], v[1]).unwrap();
            probe(g, o)
        }))?;
        note("sub", check_grad(&[a.clone(), b.clone()], |g, v| {
            let o = g.sub(v[0], v[1]).unwrap();
            probe(g, o)
        }))?;
        note("mul", check_grad(&[a.clone(), b.clone()], |g, v| {
            let o = g.mul(v[0], v[1]).unwrap();
            probe(g, o)
        }))?;
        note("relu+scale", check_grad(std::slice::from_ref(&a), |g, v| {
            let o = g.relu(v[0]);
            let o = g.scale(o, 0.7);
            probe(g, o)
        }))?;
        let pos = random_tensor(&mut r, &[2, 3, 4], 0.1, 2.0);
        note("log", check_grad(&[pos], |g, v| {
            let o = g.log(v[0]);
            probe(g, o)
        }))?;
        note("sum/mean", check_grad(std::slice::from_ref(&a), |g, v| {
            let s = g.sum(v[0], &[1]).unwrap();
            let m = g.mean(v[0], &[0, 2]).unwrap();
            let s2 = g.mul(s, s).unwrap();
            let (x, y) = (g.sum_all(s2), g.mean_all(m));
            g.add(x, y).unwrap()
        }))?;
        let x = random_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        let k = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let bias = random_tensor(&mut r, &[3], -0.5, 0.5);
        let wc = random_tensor(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
        for (stride, pad) in [(1, 1), (2, 1)] {
            note("conv2d", check_grad(&[x.clone(), k.clone(), bias.clone()], |g, v| {
                let o = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                let o = g.upsample_nearest(o, stride).unwrap();
                let c = g.constant(wc.clone());
                let m = g.mul(o, c).unwrap();
                g.sum_all(m)
            }))?;
        }
        let z = random_tensor(&mut r, &[1, 4, 2, 2], -2.0, 2.0);
        let wz = random_tensor(&mut r, &[1, 2, 2, 2], -1.0, 1.0);
        note("softmax+slice", check_grad(&[z], |g, v| {
            let p = g.softmax_channels(v[0]).unwrap();
            let q = g.slice_channels(p, &[2, 0]).unwrap();
            let c = g.constant(wz.clone());
            let m = g.mul(q, c).unwrap();
            g.sum_all(m)
        }))?;
        let inst = Instance::random(&mut r);
        for which in &OBJECTIVES[..7] {
            note(which, vec![objective_grad_err(&inst, which)])?;
        }
    }
    Ok(format!("max relative error {worst:.1e}, {}", within(Duration::from_secs(120), started)?))
}

fn miou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for i in 0..500 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let c = rng.random_range(1..=5u8);
        let classes: Vec<u8> = (0..c).collect();
        let truth: Vec<u8> = (0..h * w).map(|_| if rng.random_bool(0.15) { 255 } else { rng.random_range(0..c) }).collect();
        let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
        let mut cm = ConfusionMatrix::new(&classes);
        cm.accumulate(&LabelMap::new(h, w, truth.clone()).unwrap(), &LabelMap::new(h, w, pred.clone()).unwrap())
            .unwrap();
        let (got, want) = (cm.miou(&classes).unwrap(), oracle::brute_miou(&truth, &pred, &classes));
        check(got == want, || format!("map {i}: {got:?} vs {want:?}"))?;
    }
    let mut cm = ConfusionMatrix::new(&[0, 1]);
    cm.accumulate(&LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap(), &LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap())
        .unwrap();
    let m = cm.miou(&[0, 1]).unwrap().unwrap();
    check((m - 7.0 / 12.0).abs() <= f64::EPSILON, || format!("hand case {m}"))?;
    Ok(format!("hand case {m}"))
}

fn fe_preservation() -> Outcome {
    let scene = SceneSpec { height: 32, width: 32, shape_radius: (5, 9), ..SceneSpec::default() };
    let plan = StagePlan { sizes: vec![12, 12, 12, 6], ..StagePlan::default() };
    let splits = generate(&scene, &plan).map_err(|e| e.to_string())?;
    let cfg = ProtocolConfig {
        net: NetConfig { base_width: 8, depth: 2, ..NetConfig::default() },
        stage: StageConfig { epochs: 3, ..StageConfig::default() }.with_crop(32),
        seed: 9,
    };
    let stages = run_protocol::<f64>(&splits, &plan, &cfg, "fe".parse().unwrap(), None, |_| Ok(()))
        .map_err(|e| e.to_string())?;
    let refs: Vec<_> = splits.test.samples.iter().map(|s| &s.image).collect();
    let x = cilseg::data::images_to_tensor(&refs).unwrap();
    let before = stages[0].snapshot.infer(&x).unwrap().swap_remove(0);
    for s in &stages[1..] {
        let after = s.snapshot.infer(&x).unwrap().swap_remove(0);
        check(before.data() == after.data(), || format!("Task1 logits changed after {} stages", s.completed))?;
    }
    Ok(format!("{} logits bit-identical across T2 and T3", before.numel()))
}

trait WithCrop {
    fn with_crop(self, size: usize) -> Self;
}

impl WithCrop for StageConfig {
    fn with_crop(self, size: usize) -> Self {
        StageConfig { augment: Some(cilseg::data::AugmentConfig::flip_only(size, size)), ..self }
    }
}

/// Final results of one seed of the toy protocol.
struct SeedRun {
    rows: BTreeMap<String, Vec<IoUReport>>,
}

fn protocol_seed(seed: u64) -> SeedRun {
    let plan = StagePlan { seed, ..StagePlan::default() };
    let splits = generate(&SceneSpec::default(), &plan).unwrap();
    let cfg = ProtocolConfig { seed, ..ProtocolConfig::default() };
    let eval = |name: &str, m: &Model, k: usize| {
        let mut r = evaluate_snapshot(m, &splits.test, &plan.class_partition, &Metric::available_after(k)).unwrap();
        r.method = name.to_string();
        r
    };
    let mut rows = BTreeMap::new();
    std::thread::scope(|scope| {
        let ss = scope.spawn(|| {
            let out = run_protocol::<f64>(&splits, &plan, &cfg, "ss".parse().unwrap(), None, |_| Ok(())).unwrap();
            vec![eval("ss", &out[0].snapshot, 3)]
        });
        let first = train_first_stage::<f64>(&splits, &plan, &cfg).unwrap();
        let chains: Vec<(&str, Vec<IoUReport>)> = std::thread::scope(|inner| {
            let handles: Vec<_> = ["cil", "ft", "fe"]
                .into_iter()
                .map(|name| {
                    let (first, eval, splits, plan, cfg) = (&first, &eval, &splits, &plan, &cfg);
                    let h = inner.spawn(move || {
                        let spec: MethodSpec = name.parse().unwrap();
                        run_protocol(splits, plan, cfg, spec, Some(first), |_| Ok(()))
                            .unwrap()
                            .iter()
                            .map(|o| eval(name, &o.snapshot, o.completed))
                            .collect::<Vec<_>>()
                    });
                    (name, h)
                })
                .collect();
            handles.into_iter().map(|(n, h)| (n, h.join().unwrap())).collect()
        });
        rows.insert("ss".to_string(), ss.join().unwrap());
        for (name, r) in chains {
            rows.insert(name.to_string(), r);
        }
    });
    SeedRun { rows }
}

fn toy_protocol() -> Outcome {
    let started = Instant::now();
    let runs: Vec<(u64, SeedRun)> = std::thread::scope(|scope| {
        let hs: Vec<_> = (0..3u64).map(|s| (s, scope.spawn(move || protocol_seed(s)))).collect();
        hs.into_iter().map(|(s, h)| (s, h.join().unwrap())).collect()
    });
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (seed, run) in &runs {
        let last = |m: &str| run.rows[m].last().unwrap().metric(Metric::Task123).unwrap();
        let (cil, ss, ft, fe) = (last("cil"), last("ss"), last("ft"), last("fe"));
        let ft_t1 = run.rows["ft"][0].metric(Metric::Task1).unwrap();
        let ft_t3 = run.rows["ft"].last().unwrap().metric(Metric::Task1).unwrap();
        lines.push(format!(
            "seed {seed}: cil {:.1} ss {:.1} ft {:.1} fe {:.1} ft-task1 {:.1}->{:.1}",
            100.0 * cil, 100.0 * ss, 100.0 * ft, 100.0 * fe, 100.0 * ft_t1, 100.0 * ft_t3
        ));
        if cil < 0.8 * ss {
            failures.push(format!("seed {seed}: (a) cil {cil:.4} < 0.8 x ss {ss:.4}"));
        }
        if !(cil > ft && cil > fe) {
            failures.push(format!("seed {seed}: (b) cil {cil:.4} vs ft {ft:.4} fe {fe:.4}"));
        }
        if ft_t3 > 0.8 * ft_t1 {
            failures.push(format!("seed {seed}: (c) ft task1 {ft_t1:.4} -> {ft_t3:.4}"));
        }
    }
    let took = started.elapsed();
    let summary = format!("{}; {took:.0?} on {} threads", lines.join("; "), threads());
    if took > Duration::from_secs(15 * 60) {
        failures.push(format!("runtime {took:.0?} over 15 min"));
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != cilseg_cli::TIMINGS_JSON {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    // the default toy setup with fewer epochs per stage
    let mut cfg = cilseg_cli::RunConfig::default();
    cfg.protocol.stage.epochs = 2;
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_cilseg"))
            .args(["run", "--method", "cil", "--seed", "7", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        check(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        trees.push(artifacts(&out));
    }
    check(trees[0].len() > 5, || format!("only {} artifacts", trees[0].len()))?;
    for (path, bytes) in &trees[0] {
        check(trees[1].get(path) == Some(bytes), || format!("{} differs", path.display()))?;
    }
    check(trees[0].len() == trees[1].len(), || "artifact sets differ".into())?;
    Ok(format!("{} artifacts identical", trees[0].len()))
}

fn golden_values() -> Outcome {
    let total = 600;
    let first = poly_lr(5e-4, 0, total, 0.9).map_err(|e| e.to_string())?;
    let last = poly_lr(5e-4, total, total, 0.9).map_err(|e| e.to_string())?;
    check(first == 5e-4, || format!("poly_lr(0) = {first}"))?;
    check(last == 0.0, || format!("poly_lr(T) = {last}"))?;
    let cfg = AdamConfig::default();
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
    let lrs: Vec<f64> = (0..5).map(|t| poly_lr(5e-4, t, 5, 0.9).unwrap()).collect();
    let want = oracle::adam_trace(0.8, &grads, &lrs, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut state = AdamState::<f64>::new(cfg);
    let mut theta = [0.8];
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        state.update(lrs[t], std::iter::once(("w", &mut theta[..], &[*g][..]))).map_err(|e| e.to_string())?;
        worst = worst.max((theta[0] - want[t]).abs());
    }
    check(worst < 1e-12, || format!("Adam trace off by {worst:e}"))?;
    Ok(format!("Adam trace within {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("loss identities", loss_identities),
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("mIoU oracle", miou_oracle),
        ("FE preservation", fe_preservation),
        ("toy protocol", toy_protocol),
        ("determinism", determinism),
        ("schedule and optimizer", golden_values),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail})", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL {name} ({why})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("all criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

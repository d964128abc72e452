//! Stage training, freezing and protocol behaviour on a tiny setup.

mod common;

use cilseg::data::{generate, SceneSpec, Splits, StagePlan};
use cilseg::model::{Model, NetConfig};
use cilseg::training::{
    poly_lr, run_protocol, train_first_stage, train_stage, trainable_names, AdamConfig, AdamState, Method,
    MethodSpec, ProtocolConfig, StageConfig,
};
use cilseg::data::select_memory;
use std::sync::OnceLock;

fn scene() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        shape_radius: (5, 9),
        ..SceneSpec::default()
    }
}

fn plan() -> StagePlan {
    StagePlan {
        sizes: vec![8, 8, 8, 4],
        seed: 11,
        ..StagePlan::default()
    }
}

fn splits() -> &'static Splits {
    static S: OnceLock<Splits> = OnceLock::new();
    S.get_or_init(|| generate(&scene(), &plan()).unwrap())
}

fn protocol(epochs: usize) -> ProtocolConfig {
    ProtocolConfig {
        net: NetConfig {
            base_width: 4,
            depth: 2,
            ..NetConfig::default()
        },
        stage: StageConfig {
            epochs,
            batch_size: 4,
            augment: None,
            ..StageConfig::default()
        },
        seed: 5,
    }
}

fn first() -> &'static (Model<f64>, cilseg::training::TrainReport) {
    static T1: OnceLock<(Model<f64>, cilseg::training::TrainReport)> = OnceLock::new();
    T1.get_or_init(|| train_first_stage(splits(), &plan(), &protocol(2)).unwrap())
}

fn images(n: usize) -> cilseg::tensor::Tensor<f64> {
    let refs: Vec<_> = splits().test.samples[..n].iter().map(|s| &s.image).collect();
    cilseg::data::images_to_tensor(&refs).unwrap()
}

#[test]
fn fe_keeps_encoder_and_old_logits_bit_identical() {
    let (t1, _) = first();
    let before = t1.infer(&images(3)).unwrap().swap_remove(0);
    let model = Model::extend_for_model_based_stage(t1, &plan().class_partition[1], 3).unwrap();
    let cfg = StageConfig {
        method: Method::Fe,
        ..protocol(2).stage
    };
    let (fe, _) = train_stage(model, &[], &splits().train[1].samples, &[], &cfg).unwrap();
    let part = fe.partition();
    for name in &part.encoder {
        assert_eq!(fe.param(name).unwrap().data(), t1.param(name).unwrap().data(), "{name}");
    }
    let after = fe.infer(&images(3)).unwrap().swap_remove(0);
    assert_eq!(before.data(), after.data());
}

#[test]
fn frozen_parameters_never_move() {
    let (t1, _) = first();
    for method in [Method::Ft, Method::Fe] {
        let model = Model::extend_for_model_based_stage(t1, &plan().class_partition[1], 3).unwrap();
        let initial = model.clone();
        let trainable = trainable_names(&model, method);
        let cfg = StageConfig { method, ..protocol(1).stage };
        let (out, _) = train_stage(model, &[], &splits().train[1].samples, &[], &cfg).unwrap();
        let mut moved = 0;
        for (name, t) in initial.params() {
            if trainable.contains(name) {
                moved += usize::from(out.param(name).unwrap().data() != t.data());
            } else {
                assert_eq!(out.param(name).unwrap().data(), t.data(), "{method:?} moved {name}");
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn teachers_are_read_only() {
    let (t1, _) = first();
    let bytes = t1.param_bytes();
    let model = Model::extend_for_teacher_stage(t1, &plan().class_partition[1], 3).unwrap();
    let cfg = StageConfig { method: Method::Cil, ..protocol(1).stage };
    train_stage(model, &[t1], &splits().train[1].samples, &[], &cfg).unwrap();
    assert_eq!(t1.param_bytes(), bytes);
}

#[test]
fn one_tiny_step_lowers_the_batch_loss() {
    let (t1, _) = first();
    let data = &splits().train[1].samples;
    let new = &plan().class_partition[1];
    let probe = |lr0: f64| StageConfig {
        epochs: 1,
        batch_size: data.len() + 20,
        lr0,
        adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
        ..protocol(1).stage
    };
    // loss at the current parameters, via a zero learning rate
    let loss_at = |model: Model<f64>, teachers: &[&Model<f64>], data: &[_], mem: &[_], method| {
        let (_, r) = train_stage(model, teachers, data, mem, &StageConfig { method, ..probe(0.0) }).unwrap();
        r.step_loss[0]
    };
    let aux = Model::build(&NetConfig { class_count: 3, ..protocol(1).net }, vec![new.clone()], 9).unwrap();
    let candidates = &splits().train[0].samples;
    let memory = select_memory(candidates, t1, 4).unwrap().samples;
    let known: Vec<u8> = plan().class_partition[..2].concat();
    let mich: Vec<_> = data
        .iter()
        .map(|s| cilseg::data::Sample { labels: s.full_labels.restrict(&known), ..s.clone() })
        .collect();
    for method in [Method::Ss, Method::Ft, Method::Fe, Method::Lwof, Method::Lwm, Method::Michieli, Method::Cil] {
        let (model, teachers, d, mem): (Model<f64>, Vec<&Model<f64>>, &[_], &[_]) = match method {
            Method::Ss => (
                Model::build(&NetConfig { class_count: 3, ..protocol(1).net }, vec![new.clone()], 4).unwrap(),
                vec![],
                data,
                &[],
            ),
            Method::Ft | Method::Fe => (Model::extend_for_model_based_stage(t1, new, 4).unwrap(), vec![], data, &[]),
            Method::Lwm => (Model::extend_for_teacher_stage(t1, new, 4).unwrap(), vec![t1, &aux], data, &memory),
            Method::Michieli => (Model::extend_for_teacher_stage(t1, new, 4).unwrap(), vec![t1], &mich, &[]),
            _ => (Model::extend_for_teacher_stage(t1, new, 4).unwrap(), vec![t1], data, &[]),
        };
        let cfg = StageConfig { method, ..probe(1e-6) };
        let (stepped, r) = train_stage(model, &teachers, d, mem, &cfg).unwrap();
        let before = r.step_loss[0];
        let after = loss_at(stepped, &teachers, d, mem, method);
        assert!(after < before, "{method:?}: {before} -> {after}");
    }
}

#[test]
fn every_method_runs_the_protocol_with_finite_traces() {
    let cfg = protocol(1);
    let p = plan();
    for spec in MethodSpec::all() {
        let stages = run_protocol(splits(), &p, &cfg, spec, Some(first()), |_| Ok(())).unwrap();
        let expect = if spec.method == Method::Ss { 1 } else { 3 };
        assert_eq!(stages.len(), expect, "{spec}");
        for (k, s) in stages.iter().enumerate() {
            assert!(s.report.step_loss.iter().all(|v| v.is_finite()), "{spec} stage {k}");
            assert!(s.report.epoch_loss.iter().all(|v| v.is_finite()), "{spec} stage {k}");
        }
        let last = &stages.last().unwrap().snapshot;
        assert_eq!(last.class_list(), p.all_classes(), "{spec}");
        let heads = if spec.method.is_model_based() { 3 } else { 1 };
        assert_eq!(last.head_count(), heads, "{spec}");
        if spec.method != Method::Ss {
            let counts: Vec<usize> = stages.iter().map(|s| s.snapshot.class_list().len()).collect();
            assert_eq!(counts, [3, 6, 9], "{spec}");
        }
        if spec.method.is_model_based() {
            assert_eq!(stages[1].snapshot.head_count(), 2);
        }
        if spec.method == Method::Lwm {
            assert!(stages[1].auxiliary.is_some());
            assert_eq!(stages[1].memory.len(), 8);
        }
    }
}

#[test]
fn upper_bound_trains_on_fully_labeled_union() {
    let stages = run_protocol::<f64>(splits(), &plan(), &protocol(1), "ss".parse().unwrap(), None, |_| Ok(())).unwrap();
    let report = &stages[0].report;
    assert_eq!(report.steps, 24_u64.div_ceil(4));
    assert_eq!(stages[0].snapshot.stage_tag(), "T1+T2+T3");
}

#[test]
fn cil_protocol_is_deterministic() {
    let run = || {
        run_protocol::<f64>(splits(), &plan(), &protocol(1), "cil".parse().unwrap(), None, |_| Ok(()))
            .unwrap()
            .into_iter()
            .map(|s| (s.snapshot.param_bytes(), serde_json::to_string(&s.report).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_rejects_mismatched_setups() {
    let (t1, _) = first();
    let new = &plan().class_partition[1];
    let data = &splits().train[1].samples;
    let model = Model::extend_for_teacher_stage(t1, new, 1).unwrap();
    let cil = StageConfig { method: Method::Cil, ..protocol(1).stage };
    // no teacher
    assert!(train_stage(model.clone(), &[], data, &[], &cil).is_err());
    // old-class labels are not allowed
    assert!(train_stage(model.clone(), &[t1], &splits().train[0].samples, &[], &cil).is_err());
    // memory only for LWM
    assert!(train_stage(model, &[t1], data, &splits().train[0].samples, &cil).is_err());
}

#[test]
fn poly_schedule_golden_values() {
    assert_eq!(poly_lr(5e-4, 0, 600, 0.9).unwrap(), 5e-4);
    assert_eq!(poly_lr(5e-4, 600, 600, 0.9).unwrap(), 0.0);
    let mid = poly_lr(5e-4, 300, 600, 0.9).unwrap();
    assert!((mid - 5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
}

#[test]
fn adam_matches_hand_unrolled_recurrence() {
    let cfg = AdamConfig::default();
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
    let lrs: Vec<f64> = (0..5).map(|t| poly_lr(5e-4, t, 5, 0.9).unwrap()).collect();
    let want = common::oracle::adam_trace(0.8, &grads, &lrs, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut state = AdamState::<f64>::new(cfg);
    let mut theta = [0.8];
    for (t, g) in grads.iter().enumerate() {
        state.update(lrs[t], std::iter::once(("w", &mut theta[..], &[*g][..]))).unwrap();
        assert!((theta[0] - want[t]).abs() < 1e-12, "step {t}: {} vs {}", theta[0], want[t]);
    }
    assert_eq!(state.step_count(), 5);
}

use serde::{Deserialize, Serialize};

use super::stage::{train_stage, Method, MethodSpec, StageConfig, TrainReport};
use crate::data::{mix_seed, select_memory, Sample, Splits, StagePlan};
use crate::error::{Error, Result};
use crate::model::{ClassId, Model, NetConfig};
use crate::scalar::Scalar;

/// Everything a multi-stage run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ProtocolConfig {
    /// Architecture; class and head counts are filled in per stage.
    pub net: NetConfig,
    /// Hyper-parameters shared by every stage. The method field is ignored.
    pub stage: StageConfig,
    /// Seed from which every stage seed is derived.
    pub seed: u64,
}


impl ProtocolConfig {
    /// Configuration of stage `index` (0-based) trained with `method`.
    pub fn stage_config(&self, index: usize, method: Method, entropy_weights: bool) -> StageConfig {
        StageConfig {
            method,
            entropy_weights,
            seed: mix_seed(&[self.seed, index as u64]),
            ..self.stage.clone()
        }
    }

    fn init_seed(&self, index: usize, role: u64) -> u64 {
        mix_seed(&[self.seed, index as u64, 0x1417, role])
    }

    pub fn validate(&self) -> Result<()> {
        NetConfig {
            class_count: 1,
            extra_decoder_heads: 0,
            ..self.net.clone()
        }
        .validate()?;
        self.stage.validate()
    }
}

/// Result of one stage of a run.
#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    /// Number of stages trained so far, 1-based.
    pub completed: usize,
    pub snapshot: Model<T>,
    pub report: TrainReport,
    /// LWM's new-class teacher for this stage.
    pub auxiliary: Option<(Model<T>, TrainReport)>,
    /// LWM memory as (candidate index, score).
    pub memory: Vec<(usize, f64)>,
}

/// Stage tags as they appear in result tables.
pub fn stage_tag(completed: usize) -> String {
    (1..=completed).map(|k| format!("T{k}")).collect::<Vec<_>>().join(",")
}

/// Tag of the single-stage upper bound trained on all data at once.
pub const UPPER_BOUND_TAG: &str = "T1+T2+T3";

fn net_for(base: &NetConfig, classes: &[ClassId]) -> NetConfig {
    NetConfig {
        class_count: classes.len(),
        extra_decoder_heads: 0,
        ..base.clone()
    }
}

/// The supervised first stage, shared by every incremental method.
pub fn train_first_stage<T: Scalar>(
    splits: &Splits,
    plan: &StagePlan,
    cfg: &ProtocolConfig,
) -> Result<(Model<T>, TrainReport)> {
    let classes = &plan.class_partition[0];
    let model = Model::build(&net_for(&cfg.net, classes), vec![classes.clone()], cfg.init_seed(0, 0))?;
    let (mut model, mut report) = train_stage(
        model,
        &[],
        &splits.train[0].samples,
        &[],
        &cfg.stage_config(0, Method::Ss, false),
    )?;
    model.set_stage_tag(stage_tag(1));
    report.stage = stage_tag(1);
    Ok((model, report))
}

/// Runs `method` through all stages of `plan`.
///
/// SS trains once on the union of all subsets with complete labels. Every
/// other method starts from the supervised first stage (`first`, if given,
/// is reused instead of retraining it) and extends the previous snapshot
/// stage by stage. `on_stage` sees each outcome as soon as it exists, so a
/// failure in a later stage leaves the earlier ones persisted.
pub fn run_protocol<T: Scalar>(
    splits: &Splits,
    plan: &StagePlan,
    cfg: &ProtocolConfig,
    method: MethodSpec,
    first: Option<&(Model<T>, TrainReport)>,
    mut on_stage: impl FnMut(&StageOutcome<T>) -> Result<()>,
) -> Result<Vec<StageOutcome<T>>> {
    plan.validate()?;
    cfg.validate()?;
    if splits.train.len() != plan.stages() {
        return Err(Error::Data(format!(
            "{} training subsets for a {}-stage plan",
            splits.train.len(),
            plan.stages()
        )));
    }
    let mut out = Vec::with_capacity(plan.stages());

    if method.method == Method::Ss {
        let classes = plan.all_classes();
        let union = splits.fully_labeled_union(&classes);
        let model = Model::build(&net_for(&cfg.net, &classes), vec![classes.clone()], cfg.init_seed(0, 0))?;
        let (mut model, mut report) =
            train_stage(model, &[], &union.samples, &[], &cfg.stage_config(0, Method::Ss, false))?;
        model.set_stage_tag(UPPER_BOUND_TAG);
        report.stage = UPPER_BOUND_TAG.to_string();
        let outcome = StageOutcome {
            completed: plan.stages(),
            snapshot: model,
            report,
            auxiliary: None,
            memory: vec![],
        };
        on_stage(&outcome)?;
        out.push(outcome);
        return Ok(out);
    }

    let (t1, r1) = match first {
        Some((m, r)) => (m.clone(), r.clone()),
        None => train_first_stage(splits, plan, cfg)?,
    };
    if t1.class_list() != plan.class_partition[0] {
        return Err(Error::ClassMismatch(format!(
            "first-stage snapshot predicts {:?}, plan starts with {:?}",
            t1.class_list(),
            plan.class_partition[0]
        )));
    }
    let first = StageOutcome {
        completed: 1,
        snapshot: t1,
        report: r1,
        auxiliary: None,
        memory: vec![],
    };
    on_stage(&first)?;
    out.push(first);

    for k in 1..plan.stages() {
        let new = &plan.class_partition[k];
        let prev = &out[k - 1].snapshot;
        let config = cfg.stage_config(k, method.method, method.entropy_weights);
        let seed = cfg.init_seed(k, 0);
        let data = &splits.train[k].samples;
        let mut auxiliary = None;
        let mut memory_entries = vec![];
        let (model, report) = match method.method {
            Method::Ft | Method::Fe => {
                let model = Model::extend_for_model_based_stage(prev, new, seed)?;
                train_stage(model, &[], data, &[], &config)?
            }
            Method::Lwof | Method::Cil => {
                let model = Model::extend_for_teacher_stage(prev, new, seed)?;
                train_stage(model, &[prev], data, &[], &config)?
            }
            Method::Michieli => {
                let mut known = prev.class_list();
                known.extend_from_slice(new);
                let relabeled: Vec<Sample> = data
                    .iter()
                    .map(|s| Sample {
                        labels: s.full_labels.restrict(&known),
                        ..s.clone()
                    })
                    .collect();
                let model = Model::extend_for_teacher_stage(prev, new, seed)?;
                train_stage(model, &[prev], &relabeled, &[], &config)?
            }
            Method::Lwm => {
                let aux = Model::build(&net_for(&cfg.net, new), vec![new.clone()], cfg.init_seed(k, 1))?;
                let aux_cfg = StageConfig {
                    seed: mix_seed(&[config.seed, 1]),
                    ..cfg.stage_config(k, Method::Ss, false)
                };
                let (mut aux, mut aux_report) = train_stage(aux, &[], data, &[], &aux_cfg)?;
                aux.set_stage_tag(format!("aux-T{}", k + 1));
                aux_report.stage = aux.stage_tag().to_string();
                let candidates: Vec<Sample> = splits.train[..k]
                    .iter()
                    .flat_map(|d| d.samples.iter().cloned())
                    .collect();
                let budget = config.memory_budget.min(candidates.len());
                let store = select_memory(&candidates, prev, budget)?;
                memory_entries = store.entries.clone();
                let model = Model::extend_for_teacher_stage(prev, new, seed)?;
                let trained = train_stage(model, &[prev, &aux], data, &store.samples, &config)?;
                auxiliary = Some((aux, aux_report));
                trained
            }
            Method::Ss => unreachable!("handled above"),
        };
        let (mut model, mut report) = (model, report);
        model.set_stage_tag(stage_tag(k + 1));
        report.stage = stage_tag(k + 1);
        let outcome = StageOutcome {
            completed: k + 1,
            snapshot: model,
            report,
            auxiliary,
            memory: memory_entries,
        };
        on_stage(&outcome)?;
        out.push(outcome);
    }
    Ok(out)
}

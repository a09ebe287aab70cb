//! The training engine.
//!
//! Stage 1 fits both models on labeled data alone. Stage 2 alternates
//! roles every epoch: the teacher predicts soft pseudo-masks for every
//! unlabeled volume (no gradients), and the student trains on batches mixing
//! labeled patches and pseudo-labeled patches in the proportion given by the
//! batch plan. Only the student's optimizer steps during an epoch.

mod checkpoint;
mod run;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{latest_checkpoint, load_checkpoint, load_model_2d, save_checkpoint, save_model_2d, Checkpoint};
pub use run::{config_hash, evaluate_models, predict_models, run_full, EvalSummary, Predictions, RunOptions, RunSummary};

use crate::adapt::apply_strategy;
use crate::autograd::Grads;
use crate::batching::{assemble_batch, assemble_slice_batch, unlabeled_draws, BatchProvenance, InputNorm, Pools, TrainingBatch, TrainingItem};
use crate::config::{CotrainMode, RunConfig, Sampling, Teacher};
use crate::datagen::{LabeledItem, TargetDataset};
use crate::error::{Error, Result};
use crate::infer::{infer_2d_volume_chunked, infer_3d_volume};
use crate::losses::{cotrain_loss, cotrain_weights, labeled_loss, unlabeled_loss, LossConfig};
use crate::models::{ArchSpec, Model2D, Model3D, Network, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::RngStream;
use crate::schedule::{decay_fraction, lrg_plan, uniform_plan, BatchPlan, ScheduleState};
use crate::tensor::Tensor;
use crate::volume::{harden, one_hot, stack_depth, SoftMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Odd,
    Even,
}

/// One row of `log/epochs.csv`. Stage-2 losses belong to the student; in
/// stage 1 they belong to the 3D model and `l_l_2d` holds the 2D model's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within the phase.
    pub epoch: usize,
    pub phase: Phase,
    pub parity: Option<Parity>,
    pub teacher: Option<Teacher>,
    pub lr_2d: f64,
    pub lr_3d: f64,
    pub b_l: usize,
    pub b_u: usize,
    pub l_l: Option<f64>,
    pub l_u: Option<f64>,
    pub l_c: f64,
    pub l_l_2d: Option<f64>,
}

pub const EPOCHS_CSV_HEADER: &str = "epoch,phase,parity,lr_2d,lr_3d,b_l,b_u,L_l,L_u,L_c,teacher,L_l_2d";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let phase = match self.phase {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
        };
        let parity = match self.parity {
            Some(Parity::Odd) => "odd",
            Some(Parity::Even) => "even",
            None => "",
        };
        let teacher = match self.teacher {
            Some(Teacher::TwoD) => "2d",
            Some(Teacher::ThreeD) => "3d",
            None => "",
        };
        format!(
            "{},{phase},{parity},{},{},{},{},{},{},{},{teacher},{}",
            self.epoch,
            self.lr_2d,
            self.lr_3d,
            self.b_l,
            self.b_u,
            opt(self.l_l),
            opt(self.l_u),
            self.l_c,
            opt(self.l_l_2d)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoTrainState {
    pub model2d: Model2D<f32>,
    pub model3d: Model3D<f32>,
    pub opt2d: AdamW,
    pub opt3d: AdamW,
    pub sched2d: ScheduleState,
    pub sched3d: ScheduleState,
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    /// Detached teacher predictions for the unlabeled pool, by volume id.
    pub pseudo: BTreeMap<String, SoftMask>,
    pub history: Vec<EpochRecord>,
    /// Test metrics right after stage 1.
    pub stage1_eval: Option<EvalSummary>,
    pub pretrain_dice: Option<f64>,
}

/// Which model receives gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Student {
    TwoD,
    ThreeD,
}

/// Per-step loss values; a term is absent when its count is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_l: Option<f64>,
    pub l_u: Option<f64>,
    pub l_c: f64,
}

/// Receives each batch's provenance together with a stream tag
/// (`stage1-2d`, `stage1-3d`, `stage2`).
pub type ProvenanceSink<'a> = dyn FnMut(&str, &BatchProvenance) -> Result<()> + 'a;

/// Hex SHA-256 over parameter names, shapes and values.
pub fn param_hash(ps: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, p) in ps.iter() {
        h.update(name.as_bytes());
        for &s in p.value.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn schedules(cfg: &RunConfig, phase: Phase) -> Result<(ScheduleState, ScheduleState)> {
    let s = &cfg.sched;
    let (warmup, epochs) = match (phase, s.joint_span) {
        (_, true) => (s.warmup, s.epochs_stage1 + s.epochs_stage2),
        (Phase::Stage1, false) => (s.warmup, s.epochs_stage1),
        (Phase::Stage2, false) => (0, s.epochs_stage2),
    };
    Ok((
        ScheduleState::for_epochs(s.eta_initial_2d, s.eta_final, warmup, epochs)?,
        ScheduleState::for_epochs(s.eta_initial_3d, s.eta_final, warmup, epochs)?,
    ))
}

/// Schedule position of epoch `e` of `phase`.
fn position(cfg: &RunConfig, phase: Phase, e: usize) -> usize {
    if phase == Phase::Stage2 && cfg.sched.joint_span {
        cfg.sched.epochs_stage1 + e
    } else {
        e
    }
}

/// Builds both models and optimizers. `pretrained` replaces the freshly
/// initialized 2D network; the fine-tuning strategy is applied either way.
pub fn init_state(cfg: &RunConfig, in_channels: usize, classes: usize, pretrained: Option<Model2D<f32>>) -> Result<CoTrainState> {
    let m = &cfg.model;
    let base = match pretrained {
        Some(p) => {
            let a = &p.net.arch;
            if a.in_channels != in_channels || a.classes != classes {
                return Err(Error::Config(format!(
                    "pretrained 2D model has {} channels / {} classes, data has {in_channels} / {classes}",
                    a.in_channels, a.classes
                )));
            }
            p
        }
        None => Model2D::new(
            ArchSpec::by_id(&m.arch_2d, in_channels, classes, m.width_2d)?,
            &mut RngStream::new(cfg.seed, "init-2d"),
        )?,
    };
    let model2d = apply_strategy(base, &cfg.finetune, &mut RngStream::new(cfg.seed, "adapter"))?;
    let model3d = Model3D::new(
        ArchSpec::by_id(&m.arch_3d, in_channels, classes, m.width_3d)?,
        &mut RngStream::new(cfg.seed, "init-3d"),
    )?;
    let (sched2d, sched3d) = schedules(cfg, Phase::Stage1)?;
    Ok(CoTrainState {
        model2d,
        model3d,
        opt2d: AdamW::new(AdamWConfig::default()),
        opt3d: AdamW::new(AdamWConfig::default()),
        sched2d,
        sched3d,
        phase: Phase::Stage1,
        epoch: 0,
        pseudo: BTreeMap::new(),
        history: Vec::new(),
        stage1_eval: None,
        pretrain_dice: None,
    })
}

type LossFn = fn(&Tensor<f32>, &Tensor<f32>, &LossConfig) -> Result<(f32, Tensor<f32>)>;

/// Runs every item through its own graph and adds `weight / len` times its
/// parameter gradient into `acc`. Returns the mean item loss.
fn accumulate(net: &Network<f32>, items: &[TrainingItem], weight: f64, loss: LossFn, cfg: &LossConfig, acc: &mut Grads<f64>) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let scale = weight / items.len() as f64;
    let mut sum = 0.0;
    for it in items {
        let (l, g) = net.loss_and_grads(&it.patch, |z| loss(z, &it.target, cfg))?;
        sum += l as f64;
        for (name, t) in g {
            let t = t.cast::<f64>().scaled(scale);
            match acc.get_mut(&name) {
                Some(slot) => slot.add_assign(&t),
                None => {
                    acc.insert(name, t);
                }
            }
        }
    }
    Ok(Some(sum / items.len() as f64))
}

/// Gradient of the combined batch loss
/// `(b_l/B) * mean_l(L_l) + (b_u/B) * mean_u(L_u)`, accumulated in f64.
pub fn student_grads(net: &Network<f32>, batch: &TrainingBatch, loss: &LossConfig) -> Result<(StepLosses, Grads<f64>)> {
    let (b_l, b_u) = (batch.labeled.len(), batch.unlabeled.len());
    let (wl, wu) = cotrain_weights(b_l, b_u)?;
    let mut acc = Grads::new();
    let l_l = accumulate(net, &batch.labeled, wl, labeled_loss::<f32>, loss, &mut acc)?;
    let l_u = accumulate(net, &batch.unlabeled, wu, unlabeled_loss::<f32>, loss, &mut acc)?;
    let l_c = cotrain_loss(l_l, l_u, b_l, b_u)?;
    Ok((StepLosses { l_l, l_u, l_c }, acc))
}

fn to_f32(g: &Grads<f64>) -> Grads<f32> {
    g.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

fn check_finite(loss: f64, grads: &Grads<f32>, prov: &BatchProvenance, what: &str) -> Result<()> {
    if loss.is_finite() && grads.values().all(|g| g.all_finite()) {
        return Ok(());
    }
    let dump = serde_json::to_string(prov).unwrap_or_default();
    Err(Error::NonFiniteLoss {
        context: format!("{what}, epoch {} batch {} (loss {loss}); provenance {dump}", prov.epoch, prov.batch),
    })
}

/// One stage-1 epoch: the 2D model on slice batches (skipped in
/// labeled-only mode), then the 3D model on labeled volume patches. The
/// 3D part runs as many batches as a stage-2 epoch, so an epoch is the
/// same amount of 3D work in both stages.
pub fn stage1_epoch(state: &mut CoTrainState, cfg: &RunConfig, data: &TargetDataset, sink: &mut ProvenanceSink) -> Result<EpochRecord> {
    if state.phase != Phase::Stage1 || state.epoch >= cfg.sched.epochs_stage1 {
        return Err(Error::Invalid("stage 1 is already complete".into()));
    }
    let e = state.epoch;
    let pos = position(cfg, Phase::Stage1, e);
    let lr_2d = state.sched2d.seek(pos)?;
    let lr_3d = state.sched3d.seek(pos)?;
    let s = &cfg.sched;
    let labeled: &[LabeledItem] = &data.labeled;

    let mut l_l_2d = None;
    if cfg.cotrain.mode != CotrainMode::LabeledOnly {
        let depth: usize = labeled.iter().map(|it| it.image.dims()[2]).sum();
        let steps = depth.div_ceil(s.slice_batch);
        let rng = RngStream::new(cfg.seed, "stage1-2d");
        let mut sum = 0.0;
        for b in 0..steps {
            let batch = assemble_slice_batch(s.slice_batch, labeled, &cfg.augment, &rng, e, b)?;
            sink("stage1-2d", &batch.provenance)?;
            let x = stack_depth(&batch.labeled.iter().map(|i| i.patch.clone()).collect::<Vec<_>>())?;
            let t = stack_depth(&batch.labeled.iter().map(|i| i.target.clone()).collect::<Vec<_>>())?;
            let (loss, grads) = state.model2d.net.loss_and_grads(&x, |z| labeled_loss(z, &t, &cfg.loss))?;
            check_finite(loss as f64, &grads, &batch.provenance, "stage 1 (2D)")?;
            state.opt2d.step(&mut state.model2d.net.params, &grads, lr_2d);
            sum += loss as f64;
        }
        l_l_2d = Some(sum / steps as f64);
    }

    let steps = epoch_batches(cfg, data);
    let rng = RngStream::new(cfg.seed, "stage1-3d");
    let plan = BatchPlan { b_l: s.batch_size, b_u: 0 };
    let empty = BTreeMap::new();
    let pools = Pools {
        labeled,
        unlabeled: &[],
        pseudo: &empty,
        guides: &empty,
    };
    let mut sum = 0.0;
    for b in 0..steps {
        let batch = assemble_batch(plan, &pools, &cfg.augment, InputNorm::PerVolume, &rng, e, b)?;
        sink("stage1-3d", &batch.provenance)?;
        let (losses, grads) = student_grads(&state.model3d.net, &batch, &cfg.loss)?;
        let grads = to_f32(&grads);
        check_finite(losses.l_c, &grads, &batch.provenance, "stage 1 (3D)")?;
        state.opt3d.step(&mut state.model3d.net.params, &grads, lr_3d);
        sum += losses.l_c;
    }
    let l = sum / steps as f64;
    state.epoch += 1;
    let rec = EpochRecord {
        epoch: state.epoch,
        phase: Phase::Stage1,
        parity: None,
        teacher: None,
        lr_2d,
        lr_3d,
        b_l: s.batch_size,
        b_u: 0,
        l_l: Some(l),
        l_u: None,
        l_c: l,
        l_l_2d,
    };
    state.history.push(rec.clone());
    Ok(rec)
}

/// Runs the remaining stage-1 epochs.
pub fn run_stage1(state: &mut CoTrainState, cfg: &RunConfig, data: &TargetDataset, sink: &mut ProvenanceSink) -> Result<()> {
    while state.phase == Phase::Stage1 && state.epoch < cfg.sched.epochs_stage1 {
        stage1_epoch(state, cfg, data, sink)?;
    }
    Ok(())
}

/// Switches to stage 2 with fresh schedules (or the continuing joint span).
/// Optimizer moments carry over.
pub fn begin_stage2(state: &mut CoTrainState, cfg: &RunConfig) -> Result<()> {
    if state.phase == Phase::Stage2 {
        return Ok(());
    }
    let (s2, s3) = schedules(cfg, Phase::Stage2)?;
    state.sched2d = s2;
    state.sched3d = s3;
    state.phase = Phase::Stage2;
    state.epoch = 0;
    state.pseudo.clear();
    Ok(())
}

fn other(t: Teacher) -> Teacher {
    match t {
        Teacher::TwoD => Teacher::ThreeD,
        Teacher::ThreeD => Teacher::TwoD,
    }
}

/// Teacher for 1-based stage-2 epoch `n`, or `None` when no teacher is used.
pub fn teacher_for(cfg: &RunConfig, n: usize) -> Option<Teacher> {
    match cfg.cotrain.mode {
        CotrainMode::Full if n % 2 == 1 => Some(cfg.cotrain.first_teacher),
        CotrainMode::Full => Some(other(cfg.cotrain.first_teacher)),
        CotrainMode::NoCotrain => Some(Teacher::TwoD),
        CotrainMode::LabeledOnly => None,
    }
}

/// The batch plan of the current stage-2 epoch. LRG sampling reads the 3D
/// schedule; both schedules must agree on the decay fraction.
pub fn stage2_plan(state: &CoTrainState, cfg: &RunConfig) -> Result<BatchPlan> {
    let b = cfg.sched.batch_size;
    match (cfg.cotrain.mode, cfg.cotrain.sampling) {
        (CotrainMode::LabeledOnly, _) => Ok(BatchPlan { b_l: b, b_u: 0 }),
        (_, Sampling::Uniform) => uniform_plan(b),
        (_, Sampling::Lrg) => {
            let (f2, f3) = (decay_fraction(&state.sched2d)?, decay_fraction(&state.sched3d)?);
            if (f2 - f3).abs() > 1e-9 {
                return Err(Error::Invalid(format!("2D and 3D schedules disagree on decay progress ({f2} vs {f3})")));
            }
            lrg_plan(&state.sched3d, b)
        }
    }
}

fn epoch_batches(cfg: &RunConfig, data: &TargetDataset) -> usize {
    (data.labeled.len() + data.unlabeled.len()).div_ceil(cfg.sched.batch_size)
}

/// Predictions for the unlabeled volumes at `which` (pool indices).
fn predict_pool(
    data: &TargetDataset,
    which: &BTreeSet<usize>,
    f: impl Fn(&Volume) -> Result<SoftMask>,
) -> Result<BTreeMap<String, SoftMask>> {
    which.iter().map(|&i| Ok((data.unlabeled[i].id.clone(), f(&data.unlabeled[i].image)?))).collect()
}

fn chunk(cfg: &RunConfig) -> Option<usize> {
    (cfg.model.slice_chunk > 0).then_some(cfg.model.slice_chunk)
}

/// One stage-2 epoch; see the module docs.
pub fn run_stage2_epoch(state: &mut CoTrainState, cfg: &RunConfig, data: &TargetDataset, sink: &mut ProvenanceSink) -> Result<EpochRecord> {
    if state.phase != Phase::Stage2 {
        return Err(Error::Invalid("stage 2 has not begun".into()));
    }
    if state.epoch >= cfg.sched.epochs_stage2 {
        return Err(Error::Invalid("stage 2 is already complete".into()));
    }
    let k = state.epoch;
    let n = k + 1;
    let parity = if n % 2 == 1 { Parity::Odd } else { Parity::Even };
    let teacher = teacher_for(cfg, n);
    let pos = position(cfg, Phase::Stage2, k);
    let lr_2d = state.sched2d.seek(pos)?;
    let lr_3d = state.sched3d.seek(pos)?;
    let plan = stage2_plan(state, cfg)?;

    let finish = |m: SoftMask| -> Result<SoftMask> {
        if cfg.loss.harden_pseudo {
            one_hot(&harden(&m), m.classes())
        } else {
            Ok(m)
        }
    };
    let batches = epoch_batches(cfg, data);
    let rng = RngStream::new(cfg.seed, "stage2");
    // teachers are frozen for the epoch, so only volumes the batches will
    // draw need a prediction
    let drawn = unlabeled_draws(plan, data.unlabeled.len(), &rng, k, batches);
    let mut guides = BTreeMap::new();
    let m2 = &state.model2d;
    let m3 = &state.model3d;
    match teacher {
        _ if plan.b_u == 0 => {
            if cfg.cotrain.mode != CotrainMode::NoCotrain {
                state.pseudo.clear();
            }
        }
        Some(Teacher::TwoD) => {
            let predict = |v: &Volume| finish(infer_2d_volume_chunked(m2, v, chunk(cfg))?);
            if cfg.cotrain.mode == CotrainMode::NoCotrain {
                // the 2D model is fixed in this mode, so cached masks stay valid
                let missing = drawn.iter().copied().filter(|&i| !state.pseudo.contains_key(&data.unlabeled[i].id)).collect();
                let fresh = predict_pool(data, &missing, predict)?;
                state.pseudo.extend(fresh);
            } else {
                state.pseudo = predict_pool(data, &drawn, predict)?;
            }
            guides = predict_pool(data, &drawn, |v| infer_3d_volume(m3, v))?;
        }
        Some(Teacher::ThreeD) => {
            guides = predict_pool(data, &drawn, |v| infer_3d_volume(m3, v))?;
            state.pseudo = guides.iter().map(|(k, m)| Ok((k.clone(), finish(m.clone())?))).collect::<Result<_>>()?;
        }
        None => {}
    }

    let student = match teacher {
        Some(Teacher::ThreeD) => Student::TwoD,
        _ => Student::ThreeD,
    };
    let norm = match student {
        Student::TwoD => InputNorm::PerSlice,
        Student::ThreeD => InputNorm::PerVolume,
    };
    let pools = Pools {
        labeled: &data.labeled,
        unlabeled: &data.unlabeled,
        pseudo: &state.pseudo,
        guides: &guides,
    };
    let (mut sl, mut su, mut sc) = (0.0, 0.0, 0.0);
    let mut net = match student {
        Student::TwoD => state.model2d.net.clone(),
        Student::ThreeD => state.model3d.net.clone(),
    };
    let (opt, lr) = match student {
        Student::TwoD => (&mut state.opt2d, lr_2d),
        Student::ThreeD => (&mut state.opt3d, lr_3d),
    };
    for b in 0..batches {
        let batch = assemble_batch(plan, &pools, &cfg.augment, norm, &rng, k, b)?;
        sink("stage2", &batch.provenance)?;
        let (losses, grads) = student_grads(&net, &batch, &cfg.loss)?;
        let grads = to_f32(&grads);
        check_finite(losses.l_c, &grads, &batch.provenance, "stage 2")?;
        opt.step(&mut net.params, &grads, lr);
        sl += losses.l_l.unwrap_or(0.0);
        su += losses.l_u.unwrap_or(0.0);
        sc += losses.l_c;
    }
    match student {
        Student::TwoD => state.model2d.net = net,
        Student::ThreeD => state.model3d.net = net,
    }
    let nb = batches as f64;
    state.epoch += 1;
    let rec = EpochRecord {
        epoch: state.epoch,
        phase: Phase::Stage2,
        parity: Some(parity),
        teacher,
        lr_2d,
        lr_3d,
        b_l: plan.b_l,
        b_u: plan.b_u,
        l_l: (plan.b_l > 0).then_some(sl / nb),
        l_u: (plan.b_u > 0).then_some(su / nb),
        l_c: sc / nb,
        l_l_2d: None,
    };
    state.history.push(rec.clone());
    Ok(rec)
}

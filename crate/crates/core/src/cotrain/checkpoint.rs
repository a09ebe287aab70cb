//! Versioned JSON checkpoints; tensors and optimizer moments are stored as
//! base64 little-endian f32 so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{CoTrainState, EpochRecord, EvalSummary, Phase};
use crate::adapt::{FineTuneStrategy, LoraAdapter};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Group, Model2D, Model3D, Network, Param, ParamSet, Role};
use crate::optim::{AdamW, AdamWConfig};
use crate::rvol::write_atomic;
use crate::schedule::ScheduleState;
use crate::tensor::Tensor;

const FORMAT: &str = "mnseg-checkpoint";
const VERSION: u32 = 1;

fn enc(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn dec(s: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(s).map_err(|e| Error::Invalid(format!("bad base64 in checkpoint: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid("checkpoint tensor length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    data: String,
    group: Group,
    role: Role,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetRecord {
    arch: ArchSpec,
    params: BTreeMap<String, ParamRecord>,
    adapters: BTreeMap<String, LoraAdapter>,
}

impl NetRecord {
    fn of(net: &Network<f32>) -> Self {
        Self {
            arch: net.arch.clone(),
            params: net
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ParamRecord {
                            shape: p.value.shape().to_vec(),
                            data: enc(p.value.data()),
                            group: p.group,
                            role: p.role,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            adapters: net.params.adapters().clone(),
        }
    }

    fn restore(&self) -> Result<Network<f32>> {
        let mut ps = ParamSet::default();
        for (k, r) in &self.params {
            ps.insert(
                k.clone(),
                Param {
                    value: Tensor::from_vec(&r.shape, dec(&r.data)?)?,
                    group: r.group,
                    role: r.role,
                    trainable: r.trainable,
                },
            );
        }
        for (w, a) in &self.adapters {
            ps.set_adapter(w, *a);
        }
        Ok(Network {
            arch: self.arch.clone(),
            params: ps,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptRecord {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, String>,
    v: BTreeMap<String, String>,
}

impl OptRecord {
    fn of(o: &AdamW) -> Self {
        let e = |m: &BTreeMap<String, Vec<f32>>| m.iter().map(|(k, v)| (k.clone(), enc(v))).collect();
        Self {
            cfg: o.cfg,
            step: o.step,
            m: e(&o.m),
            v: e(&o.v),
        }
    }

    fn restore(&self) -> Result<AdamW> {
        let d = |m: &BTreeMap<String, String>| -> Result<BTreeMap<String, Vec<f32>>> {
            m.iter().map(|(k, v)| Ok((k.clone(), dec(v)?))).collect()
        };
        Ok(AdamW {
            cfg: self.cfg,
            step: self.step,
            m: d(&self.m)?,
            v: d(&self.v)?,
        })
    }
}

/// Everything needed to continue a run. Random streams are derived from
/// `(seed, stream, epoch, batch, slot)`, so no generator state is stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    /// Hash of the resolved configuration that produced the run.
    pub config_hash: String,
    pub phase: Phase,
    pub epoch: usize,
    model2d: NetRecord,
    strategy: FineTuneStrategy,
    model3d: NetRecord,
    opt2d: OptRecord,
    opt3d: OptRecord,
    sched2d: ScheduleState,
    sched3d: ScheduleState,
    history: Vec<EpochRecord>,
    stage1_eval: Option<EvalSummary>,
    pretrain_dice: Option<f64>,
}

impl Checkpoint {
    pub fn of(state: &CoTrainState, config_hash: &str) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: config_hash.into(),
            phase: state.phase,
            epoch: state.epoch,
            model2d: NetRecord::of(&state.model2d.net),
            strategy: state.model2d.strategy.clone(),
            model3d: NetRecord::of(&state.model3d.net),
            opt2d: OptRecord::of(&state.opt2d),
            opt3d: OptRecord::of(&state.opt3d),
            sched2d: state.sched2d,
            sched3d: state.sched3d,
            history: state.history.clone(),
            stage1_eval: state.stage1_eval.clone(),
            pretrain_dice: state.pretrain_dice,
        }
    }

    /// The training state; the pseudo-mask cache starts empty and is
    /// regenerated by the next epoch.
    pub fn restore(&self) -> Result<CoTrainState> {
        Ok(CoTrainState {
            model2d: Model2D {
                net: self.model2d.restore()?,
                strategy: self.strategy.clone(),
            },
            model3d: Model3D {
                net: self.model3d.restore()?,
            },
            opt2d: self.opt2d.restore()?,
            opt3d: self.opt3d.restore()?,
            sched2d: self.sched2d,
            sched3d: self.sched3d,
            phase: self.phase,
            epoch: self.epoch,
            pseudo: BTreeMap::new(),
            history: self.history.clone(),
            stage1_eval: self.stage1_eval.clone(),
            pretrain_dice: self.pretrain_dice,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &CoTrainState, config_hash: &str) -> Result<()> {
    let json = serde_json::to_vec(&Checkpoint::of(state, config_hash))?;
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ck.format != FORMAT || ck.version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
        });
    }
    Ok(ck)
}

/// The checkpoint with the highest epoch number in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let rd = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in rd.flatten() {
        let p = entry.path();
        let Some(n) = p
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("epoch-"))
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, p));
        }
    }
    Ok(best.map(|(_, p)| p))
}

const MODEL_FORMAT: &str = "mnseg-model-2d";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    holdout_dice: Option<f64>,
    net: NetRecord,
}

/// Stores a bare 2D network, e.g. the result of source pretraining.
pub fn save_model_2d(path: &Path, model: &Model2D<f32>, holdout_dice: Option<f64>) -> Result<()> {
    let f = ModelFile {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        holdout_dice,
        net: NetRecord::of(&model.net),
    };
    write_atomic(path, &serde_json::to_vec(&f)?)
}

/// The network and its recorded holdout Dice. The fine-tuning strategy is
/// applied later, when a run starts from it.
pub fn load_model_2d(path: &Path) -> Result<(Model2D<f32>, Option<f64>)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let f: ModelFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if f.format != MODEL_FORMAT || f.version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported model file {} v{}", f.format, f.version),
        });
    }
    Ok((
        Model2D {
            net: f.net.restore()?,
            strategy: FineTuneStrategy::default(),
        },
        f.holdout_dice,
    ))
}

//! End-to-end runs and their on-disk layout:
//!
//! ```text
//! config.resolved          resolved TOML configuration
//! manifest.ref             dataset reference and spec hash
//! checkpoints/epoch-N.ckpt
//! log/epochs.csv           one row per epoch
//! log/pretrain.csv         source pretraining curve, when enabled
//! log/provenance.jsonl     one record per batch
//! log/metrics.csv          final 3D test metrics
//! log/metrics_2d.csv       final 2D test metrics
//! summary.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    begin_stage2, init_state, latest_checkpoint, load_checkpoint, load_model_2d, run_stage2_epoch, save_checkpoint, stage1_epoch, CoTrainState,
    EpochRecord, Phase, EPOCHS_CSV_HEADER,
};
use crate::batching::BatchProvenance;
use crate::config::{CotrainMode, RunConfig};
use crate::datagen::{generate_source, LabeledItem, TargetDataset};
use crate::error::{Error, Result};
use crate::infer::{infer_2d_volume_chunked, sliding_window_3d, TilingPlan};
use crate::metrics::{evaluate, MetricReport};
use crate::models::{pretrain_source, ArchSpec, Model2D};
use crate::rng::RngStream;
use crate::rvol::write_atomic;
use crate::volume::{SoftMask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dice_2d: f64,
    pub dice_3d: f64,
    pub report_2d: MetricReport,
    pub report_3d: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub mode: CotrainMode,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub pretrain_holdout_dice: Option<f64>,
    pub stage1: EvalSummary,
    #[serde(rename = "final")]
    pub final_eval: EvalSummary,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Written to `manifest.ref`.
    pub manifest_ref: Option<PathBuf>,
    pub spec_hash: Option<String>,
    /// Stop after this many total epochs (stage 1 plus stage 2), leaving a
    /// checkpoint behind; `None` runs to completion.
    pub stop_after: Option<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    Sha256::digest(cfg.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Patch shape for sliding-window inference: the training crop, clipped to
/// the volume.
fn tiling_for(cfg: &RunConfig, dims: [usize; 3]) -> Result<TilingPlan> {
    TilingPlan::new(std::array::from_fn(|k| cfg.augment.crop[k].min(dims[k])), dims)
}

pub type Predictions = BTreeMap<String, SoftMask>;

/// Soft predictions of the 2D model (slice by slice) and the 3D model
/// (sliding windows), keyed by volume id.
pub fn predict_models<'a>(
    state: &CoTrainState,
    cfg: &RunConfig,
    volumes: impl IntoIterator<Item = (&'a str, &'a Volume)>,
) -> Result<(Predictions, Predictions)> {
    let chunk = (cfg.model.slice_chunk > 0).then_some(cfg.model.slice_chunk);
    let mut p2 = BTreeMap::new();
    let mut p3 = BTreeMap::new();
    for (id, v) in volumes {
        p2.insert(id.to_string(), infer_2d_volume_chunked(&state.model2d, v, chunk)?);
        let plan = tiling_for(cfg, v.dims())?;
        p3.insert(id.to_string(), sliding_window_3d(&state.model3d, v, &plan)?);
    }
    Ok((p2, p3))
}

/// Test metrics for both models: the 3D model through sliding windows, the
/// 2D model slice by slice.
pub fn evaluate_models(state: &CoTrainState, cfg: &RunConfig, test: &[LabeledItem]) -> Result<EvalSummary> {
    let (p2, p3) = predict_models(state, cfg, test.iter().map(|it| (it.id.as_str(), &it.image)))?;
    let truth: Vec<_> = test.iter().map(|it| (it.id.clone(), it.mask.clone(), it.image.spacing())).collect();
    let report_2d = evaluate(&p2, &truth, &cfg.metrics)?;
    let report_3d = evaluate(&p3, &truth, &cfg.metrics)?;
    Ok(EvalSummary {
        dice_2d: report_2d.mean_dice(),
        dice_3d: report_3d.mean_dice(),
        report_2d,
        report_3d,
    })
}

struct Logs {
    epochs: File,
    provenance: File,
}

impl Logs {
    fn append(path: &Path) -> Result<File> {
        OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))
    }

    fn epoch(&mut self, path: &Path, r: &EpochRecord) -> Result<()> {
        writeln!(self.epochs, "{}", r.csv_row()).map_err(io_err(path))
    }
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    stream: &'a str,
    #[serde(flatten)]
    batch: &'a BatchProvenance,
}

/// Keeps provenance lines for epochs before the resume point.
fn truncate_provenance(path: &Path, state: &CoTrainState) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let stream = v["stream"].as_str().unwrap_or_default();
        let epoch = v["epoch"].as_u64().unwrap_or(u64::MAX) as usize;
        let keep = match (state.phase, stream.starts_with("stage1")) {
            (Phase::Stage1, true) => epoch < state.epoch,
            (Phase::Stage1, false) => false,
            (Phase::Stage2, true) => true,
            (Phase::Stage2, false) => epoch < state.epoch,
        };
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn write_epochs_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from(EPOCHS_CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn pretrained_2d(cfg: &RunConfig, in_channels: usize, classes: usize, log_dir: &Path) -> Result<Option<(Model2D<f32>, Option<f64>)>> {
    if !cfg.pretrain.enabled || cfg.cotrain.mode == CotrainMode::LabeledOnly {
        return Ok(None);
    }
    if let Some(path) = &cfg.pretrain.model {
        let (m, dice) = load_model_2d(path)?;
        return Ok(Some((m, dice)));
    }
    let corpus = generate_source(&cfg.pretrain.source)?;
    let fresh = Model2D::new(
        ArchSpec::by_id(&cfg.model.arch_2d, in_channels, classes, cfg.model.width_2d)?,
        &mut RngStream::new(cfg.seed, "init-2d"),
    )?;
    let out = pretrain_source(fresh, &corpus, &cfg.pretrain.train)?;
    let mut csv = String::from("epoch,lr,loss,holdout_dice\n");
    for h in &out.history {
        csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.loss, h.holdout_dice));
    }
    let path = log_dir.join("pretrain.csv");
    write_atomic(&path, csv.as_bytes())?;
    let dice = out.history.last().map(|h| h.holdout_dice);
    Ok(Some((out.model, dice)))
}

fn data_shape(data: &TargetDataset) -> Result<(usize, usize)> {
    let first = data
        .labeled
        .first()
        .ok_or_else(|| Error::Invalid("dataset has no labeled volumes".into()))?;
    Ok((first.image.channels(), first.mask.classes()))
}

/// Pretraining (optional), stage 1, stage 2, evaluation. With
/// `opts.resume` the latest checkpoint in `run_dir` is continued and the
/// logs are cut back to match it.
pub fn run_full(cfg: &RunConfig, data: &TargetDataset, run_dir: &Path, opts: &RunOptions) -> Result<Option<RunSummary>> {
    cfg.validate()?;
    let log_dir = run_dir.join("log");
    let ck_dir = run_dir.join("checkpoints");
    for d in [&log_dir, &ck_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let hash = config_hash(cfg);
    let resolved = cfg.to_toml();
    let manifest_ref = format!(
        "manifest = {:?}\nspec_hash = {:?}\n",
        opts.manifest_ref.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        opts.spec_hash.clone().unwrap_or_default()
    );
    write_atomic(&run_dir.join("config.resolved"), resolved.as_bytes())?;
    write_atomic(&run_dir.join("manifest.ref"), manifest_ref.as_bytes())?;

    let (in_channels, classes) = data_shape(data)?;
    let epochs_path = log_dir.join("epochs.csv");
    let prov_path = log_dir.join("provenance.jsonl");

    let resumed = if opts.resume { latest_checkpoint(&ck_dir)? } else { None };
    let mut state = match resumed {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            if ck.config_hash != hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different configuration",
                    p.display()
                )));
            }
            log::info!("resuming from {}", p.display());
            let st = ck.restore()?;
            truncate_provenance(&prov_path, &st)?;
            st
        }
        None => {
            let _ = fs::remove_file(&prov_path);
            let pre = pretrained_2d(cfg, in_channels, classes, &log_dir)?;
            let (model, dice) = match pre {
                Some((m, d)) => (Some(m), d),
                None => (None, None),
            };
            let mut st = init_state(cfg, in_channels, classes, model)?;
            st.pretrain_dice = dice;
            st
        }
    };
    write_epochs_csv(&epochs_path, &state.history)?;
    let mut logs = Logs {
        epochs: Logs::append(&epochs_path)?,
        provenance: Logs::append(&prov_path)?,
    };

    let e1 = cfg.sched.epochs_stage1;
    let total_done = |st: &CoTrainState| match st.phase {
        Phase::Stage1 => st.epoch,
        Phase::Stage2 => e1 + st.epoch,
    };
    let ck_path = |n: usize| ck_dir.join(format!("epoch-{n:05}.ckpt"));
    let every = cfg.cotrain.checkpoint_every;
    let stop = opts.stop_after.unwrap_or(usize::MAX);

    while state.phase == Phase::Stage1 && state.epoch < e1 {
        if total_done(&state) >= stop {
            save_checkpoint(&ck_path(total_done(&state)), &state, &hash)?;
            return Ok(None);
        }
        let rec = {
            let prov = &mut logs.provenance;
            let mut sink = |stream: &str, b: &BatchProvenance| -> Result<()> {
                let line = serde_json::to_string(&ProvenanceLine { stream, batch: b })?;
                writeln!(prov, "{line}").map_err(io_err(&prov_path))
            };
            stage1_epoch(&mut state, cfg, data, &mut sink)?
        };
        logs.epoch(&epochs_path, &rec)?;
        log::info!("stage1 epoch {}/{e1} loss3d {:.4} loss2d {:?}", rec.epoch, rec.l_c, rec.l_l_2d);
        let n = total_done(&state);
        if every > 0 && n % every == 0 {
            save_checkpoint(&ck_path(n), &state, &hash)?;
        }
    }
    if state.phase == Phase::Stage1 {
        state.stage1_eval = Some(evaluate_models(&state, cfg, &data.test)?);
        begin_stage2(&mut state, cfg)?;
        save_checkpoint(&ck_path(total_done(&state)), &state, &hash)?;
    }
    let e2 = cfg.sched.epochs_stage2;
    while state.epoch < e2 {
        if total_done(&state) >= stop {
            save_checkpoint(&ck_path(total_done(&state)), &state, &hash)?;
            return Ok(None);
        }
        let rec = {
            let prov = &mut logs.provenance;
            let mut sink = |stream: &str, b: &BatchProvenance| -> Result<()> {
                let line = serde_json::to_string(&ProvenanceLine { stream, batch: b })?;
                writeln!(prov, "{line}").map_err(io_err(&prov_path))
            };
            run_stage2_epoch(&mut state, cfg, data, &mut sink)?
        };
        logs.epoch(&epochs_path, &rec)?;
        log::info!(
            "stage2 epoch {}/{e2} teacher {:?} plan ({},{}) L_c {:.4}",
            rec.epoch,
            rec.teacher,
            rec.b_l,
            rec.b_u,
            rec.l_c
        );
        let n = total_done(&state);
        if every > 0 && n % every == 0 {
            save_checkpoint(&ck_path(n), &state, &hash)?;
        }
    }
    save_checkpoint(&ck_path(total_done(&state)), &state, &hash)?;

    let final_eval = evaluate_models(&state, cfg, &data.test)?;
    final_eval.report_3d.write_csv(&log_dir.join("metrics.csv"))?;
    final_eval.report_2d.write_csv(&log_dir.join("metrics_2d.csv"))?;
    let summary = RunSummary {
        seed: cfg.seed,
        config_hash: hash,
        mode: cfg.cotrain.mode,
        epochs_stage1: e1,
        epochs_stage2: e2,
        pretrain_holdout_dice: state.pretrain_dice,
        stage1: state.stage1_eval.clone().expect("stage 1 evaluated"),
        final_eval,
    };
    write_atomic(&run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(Some(summary))
}

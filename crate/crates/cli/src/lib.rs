//! Command implementations behind the `mnseg` binary.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mnseg::config::RunConfig;
use mnseg::cotrain::{latest_checkpoint, load_checkpoint, predict_models, run_full, save_model_2d, Predictions, RunOptions};
use mnseg::datagen::{generate_source, generate_target, load_dataset, write_dataset, TargetDataset, TargetDatasetSpec};
use mnseg::infer::harden;
use mnseg::metrics::evaluate;
use mnseg::models::{pretrain_source, ArchSpec, Model2D};
use mnseg::rng::RngStream;
use mnseg::rvol::{write_labels, write_softmask};

/// Environment variable naming the root for relative output directories.
pub const OUT_ROOT_ENV: &str = "MNSEG_OUT_ROOT";

/// A mistake in how the tool was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use mnseg::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_)
                | E::InvalidSpec(_)
                | E::RankTooLarge { .. }
                | E::EmptySelector
                | E::CropTooLarge { .. }
                | E::DegenerateSchedule => 2,
                _ => 1,
            };
        }
    }
    1
}

#[derive(Parser, Debug)]
#[command(name = "mnseg", version, about = "Semi-supervised 3D segmentation by 2D/3D co-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic target dataset and its manifest.
    GenData(GenDataArgs),
    /// Pretrain a 2D model on the synthetic source corpus.
    PretrainSource(PretrainArgs),
    /// Run both training stages and evaluate on the test split.
    Train(TrainArgs),
    /// Score a trained run on a labeled split.
    Eval(EvalArgs),
    /// Write predictions of a trained run for any split.
    Predict(PredictArgs),
    /// Train every combination of the given override axes and seeds.
    Ablate(AblateArgs),
    /// Compare finished runs and plot their curves.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory for the RVOL files and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with a full dataset spec; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// `H,W,D`
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration (TOML); defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set sched.epochs_stage2=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(usage(format!("config file {} does not exist", p.display())));
                }
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        let all: Vec<&String> = self.overrides.iter().chain(extra).collect();
        let cfg = base.with_overrides(&all)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Model file to write; a CSV curve is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset manifest; overrides `manifest` in the config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory; defaults to `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep the 2D model fixed after stage 1 and reuse its pseudo-masks.
    #[arg(long)]
    pub no_cotrain: bool,
    /// Split every stage-2 batch evenly instead of following the schedule.
    #[arg(long)]
    pub uniform_sampling: bool,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs in total, leaving a checkpoint.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    #[value(name = "3d")]
    ThreeD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Checkpoint to score instead of the run's latest one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest, when the run does not record one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to `<run>/eval-<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the ground truth against itself (a sanity check of the pipeline).
    #[arg(long)]
    pub ground_truth: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value = "3d")]
    pub model: Which,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to `<run>/predict-<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Parent directory of the child runs and the report.
    #[arg(long)]
    pub out: PathBuf,
    /// `KEY=V1,V2,...`; repeat for more axes. Every combination is run.
    #[arg(long = "axis", value_name = "KEY=VALUES")]
    pub axes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Where to write comparison.csv, runs.csv and plots/.
    #[arg(long)]
    pub out: PathBuf,
    /// Finished run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// Relative paths are placed under `$MNSEG_OUT_ROOT` when it is set.
pub fn resolve_out(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::PretrainSource(a) => pretrain(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => {
            let rows = report::write_report(&a.runs, &a.out)?;
            print!("{}", report::comparison_csv(&rows));
            Ok(())
        }
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TargetDatasetSpec>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TargetDatasetSpec::default(),
    };
    if let Some(v) = a.m {
        spec.m = v;
    }
    if let Some(v) = a.n {
        spec.n = v;
    }
    if let Some(v) = a.test {
        spec.test = v;
    }
    if let Some(v) = &a.shape {
        let [h, w, d] = v[..] else {
            return Err(usage(format!("--shape needs three sizes, got {}", v.len())));
        };
        spec.shape = [h, w, d];
    }
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let ds = generate_target(&spec)?;
    let out = resolve_out(&a.out);
    let manifest = write_dataset(&out, &spec, &ds)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let src = &cfg.pretrain.source;
    let corpus = generate_source(src)?;
    let arch = ArchSpec::by_id(&cfg.model.arch_2d, 1, src.classes, cfg.model.width_2d)?;
    let fresh = Model2D::new(arch, &mut RngStream::new(cfg.seed, "init-2d"))?;
    let out = pretrain_source(fresh, &corpus, &cfg.pretrain.train)?;
    let mut curve = String::from("epoch,lr,loss,holdout_dice\n");
    for h in &out.history {
        curve.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.loss, h.holdout_dice));
    }
    let path = resolve_out(&a.out);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let dice = out.history.last().map(|h| h.holdout_dice);
    save_model_2d(&path, &out.model, dice)?;
    fs::write(path.with_extension("csv"), curve)?;
    println!("{} (holdout dice {:.4})", path.display(), dice.unwrap_or(f64::NAN));
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(PathBuf, String, TargetDataset)> {
    if !path.exists() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    let abs = fs::canonicalize(path)?;
    let (m, ds) = load_dataset(&abs)?;
    Ok((abs, m.spec_hash, ds))
}

/// Runs training and returns the run directory.
pub fn train(a: &TrainArgs) -> Result<PathBuf> {
    let mut extra = Vec::new();
    if a.no_cotrain {
        extra.push("cotrain.mode=no-cotrain".to_string());
    }
    if a.uniform_sampling {
        extra.push("cotrain.sampling=uniform".to_string());
    }
    let mut cfg = a.cfg.resolve(&extra)?;
    let manifest = a
        .manifest
        .clone()
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| usage("no dataset manifest given (use --manifest or `manifest` in the config)"))?;
    let (manifest, spec_hash, data) = load_manifest(&manifest)?;
    cfg.manifest = Some(manifest.clone());
    let dir = resolve_out(a.out.as_deref().unwrap_or(&cfg.out_dir));
    train_into(&cfg, &data, &dir, manifest, spec_hash, a.resume, a.stop_after)?;
    Ok(dir)
}

fn train_into(
    cfg: &RunConfig,
    data: &TargetDataset,
    dir: &Path,
    manifest: PathBuf,
    spec_hash: String,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    if !resume && dir.join("summary.json").exists() {
        return Err(usage(format!("{} already holds a finished run; pick another --out or pass --resume", dir.display())));
    }
    let opts = RunOptions {
        resume,
        manifest_ref: Some(manifest),
        spec_hash: Some(spec_hash),
        stop_after,
    };
    match run_full(cfg, data, dir, &opts)? {
        Some(s) => println!(
            "{}: 3D dice {:.4}, 2D dice {:.4}",
            dir.display(),
            s.final_eval.dice_3d,
            s.final_eval.dice_2d
        ),
        None => println!("{}: stopped early; continue with --resume", dir.display()),
    }
    Ok(())
}

struct Trained {
    cfg: RunConfig,
    data: TargetDataset,
    state: mnseg::cotrain::CoTrainState,
}

fn open_run(run: &Path, checkpoint: Option<&Path>, manifest: Option<&Path>) -> Result<Trained> {
    let cfg_path = run.join("config.resolved");
    if !cfg_path.exists() {
        return Err(usage(format!("{} is not a run directory", run.display())));
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| usage("the run records no manifest; pass --manifest"))?;
    let (_, _, data) = load_manifest(&manifest)?;
    let ck = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&run.join("checkpoints"))?.ok_or_else(|| usage(format!("no checkpoints in {}", run.display())))?,
    };
    let state = load_checkpoint(&ck)?.restore()?;
    Ok(Trained { cfg, data, state })
}

fn split_volumes(data: &TargetDataset, split: Split) -> Vec<(&str, &mnseg::volume::Volume)> {
    match split {
        Split::Labeled => data.labeled.iter().map(|i| (i.id.as_str(), &i.image)).collect(),
        Split::Unlabeled => data.unlabeled.iter().map(|i| (i.id.as_str(), &i.image)).collect(),
        Split::Test => data.test.iter().map(|i| (i.id.as_str(), &i.image)).collect(),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Labeled => "labeled",
        Split::Unlabeled => "unlabeled",
        Split::Test => "test",
    }
}

fn write_predictions(dir: &Path, preds: &Predictions, tag: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, m) in preds {
        write_softmask(&dir.join(format!("{id}.softmask.rvol")), m, Some(tag))?;
        write_labels(&dir.join(format!("{id}.labels.rvol")), &harden(m), Some(tag))?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.split == Split::Unlabeled {
        return Err(usage("the unlabeled split has no ground truth; use `predict` instead"));
    }
    let t = open_run(&a.run, a.checkpoint.as_deref(), a.manifest.as_deref())?;
    let items = match a.split {
        Split::Labeled => &t.data.labeled,
        _ => &t.data.test,
    };
    let truth: Vec<_> = items.iter().map(|it| (it.id.clone(), it.mask.clone(), it.image.spacing())).collect();
    let out = a.out.clone().unwrap_or_else(|| a.run.join(format!("eval-{}", split_name(a.split))));
    fs::create_dir_all(&out)?;
    if a.ground_truth {
        let gt: Predictions = items.iter().map(|it| (it.id.clone(), it.mask.clone())).collect();
        let r = evaluate(&gt, &truth, &t.cfg.metrics)?;
        r.write_csv(&out.join("metrics.csv"))?;
        println!("ground truth: dice {:.4}", r.mean_dice());
        return Ok(());
    }
    let (p2, p3) = predict_models(&t.state, &t.cfg, items.iter().map(|it| (it.id.as_str(), &it.image)))?;
    let r3 = evaluate(&p3, &truth, &t.cfg.metrics)?;
    let r2 = evaluate(&p2, &truth, &t.cfg.metrics)?;
    r3.write_csv(&out.join("metrics.csv"))?;
    r2.write_csv(&out.join("metrics_2d.csv"))?;
    write_predictions(&out.join("predictions"), &p3, "3d")?;
    println!("{}: 3D dice {:.4}, 2D dice {:.4}", split_name(a.split), r3.mean_dice(), r2.mean_dice());
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let t = open_run(&a.run, a.checkpoint.as_deref(), a.manifest.as_deref())?;
    let vols = split_volumes(&t.data, a.split);
    let (p2, p3) = predict_models(&t.state, &t.cfg, vols)?;
    let (preds, tag) = match a.model {
        Which::ThreeD => (p3, "3d"),
        Which::TwoD => (p2, "2d"),
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.join(format!("predict-{}", split_name(a.split))));
    write_predictions(&out, &preds, tag)?;
    println!("{} volumes written to {}", preds.len(), out.display());
    Ok(())
}

/// Splits `a,b,[1,2],c` on top-level commas only.
fn split_values(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for ch in s.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

/// The cartesian product of the axes, each entry a list of `key=value`.
pub fn expand_axes(axes: &[String]) -> Result<Vec<Vec<String>>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis.split_once('=').ok_or_else(|| usage(format!("axis `{axis}` is not KEY=V1,V2")))?;
        let values = split_values(values);
        if values.is_empty() {
            return Err(usage(format!("axis `{key}` has no values")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(format!("{}={v}", key.trim()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

fn combo_dir_name(combo: &[String]) -> String {
    if combo.is_empty() {
        return "base".into();
    }
    combo
        .iter()
        .map(|kv| kv.chars().map(|c| if c.is_ascii_alphanumeric() || "=.-_".contains(c) { c } else { '_' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.cfg.resolve(&[])?;
    let manifest = a
        .manifest
        .clone()
        .or_else(|| base.manifest.clone())
        .ok_or_else(|| usage("no dataset manifest given (use --manifest or `manifest` in the config)"))?;
    let (manifest, spec_hash, data) = load_manifest(&manifest)?;
    let combos = expand_axes(&a.axes)?;
    let root = resolve_out(&a.out);
    // check every child configuration before spending time on any of them
    let mut plan = BTreeMap::new();
    for combo in &combos {
        for &seed in &a.seeds {
            let mut kv = combo.clone();
            kv.push(format!("seed={seed}"));
            let mut cfg = base.with_overrides(&kv)?;
            cfg.validate()?;
            cfg.manifest = Some(manifest.clone());
            plan.insert(root.join(combo_dir_name(combo)).join(format!("seed-{seed}")), cfg);
        }
    }
    let mut dirs = Vec::new();
    for (dir, cfg) in &plan {
        log::info!("ablation run {}", dir.display());
        let resume = dir.join("checkpoints").exists() && !dir.join("summary.json").exists();
        if !dir.join("summary.json").exists() {
            train_into(cfg, &data, dir, manifest.clone(), spec_hash.clone(), resume, None)?;
        }
        dirs.push(dir.clone());
    }
    let rows = report::write_report(&dirs, &root.join("report"))?;
    print!("{}", report::comparison_csv(&rows));
    Ok(())
}

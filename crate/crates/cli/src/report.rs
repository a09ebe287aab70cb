//! Cross-run comparison tables and static learning-curve plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mnseg::config::RunConfig;
use mnseg::cotrain::RunSummary;
use mnseg::metrics::MetricReport;
use serde::Deserialize;

/// One row of `log/epochs.csv`.
#[derive(Clone, Debug, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: String,
    pub lr_2d: f64,
    pub lr_3d: f64,
    pub b_l: usize,
    pub b_u: usize,
    #[serde(rename = "L_l")]
    pub l_l: Option<f64>,
    #[serde(rename = "L_u")]
    pub l_u: Option<f64>,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_l_2d")]
    pub l_l_2d: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub name: String,
    pub config: RunConfig,
    pub summary: RunSummary,
    pub epochs: Vec<EpochRow>,
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochRow>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = rd.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>();
    rows.with_context(|| format!("parsing {}", path.display()))
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).with_context(|| format!("{} is not a finished run", dir.display()))?;
    let summary: RunSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", summary_path.display()))?;
    let config = RunConfig::load(&dir.join("config.resolved"))?;
    let epochs = read_epochs(&dir.join("log/epochs.csv"))?;
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        name,
        config,
        summary,
        epochs,
    })
}

/// Everything about a configuration except its seed and output location.
pub fn method_label(cfg: &RunConfig) -> String {
    let pre = if cfg.pretrain.enabled { "pretrained" } else { "scratch" };
    format!(
        "{}/{}/{}/{}/{}+{}",
        serde_plain(&cfg.cotrain.mode),
        serde_plain(&cfg.cotrain.sampling),
        serde_plain(&cfg.finetune.kind),
        pre,
        cfg.model.arch_2d,
        cfg.model.arch_3d
    )
}

fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Class-averaged mean of one metric, skipping undefined entries.
fn class_mean(r: &MetricReport, pick: fn(&mnseg::metrics::ClassAggregate) -> f64) -> f64 {
    let v: Vec<f64> = r.aggregate.values().map(pick).filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub runs: usize,
    pub dice: f64,
    pub dice_std: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub dice_2d: f64,
}

fn mean(v: &[f64]) -> f64 {
    let v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    let v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Groups runs by method, averages over seeds and sorts by mean 3D Dice,
/// best first.
pub fn comparison(runs: &[RunRecord]) -> Vec<MethodRow> {
    let mut groups: std::collections::BTreeMap<String, Vec<&RunRecord>> = Default::default();
    for r in runs {
        groups.entry(method_label(&r.config)).or_default().push(r);
    }
    let mut rows: Vec<MethodRow> = groups
        .into_iter()
        .map(|(method, rs)| {
            let col = |f: &dyn Fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let dice = col(&|r| r.summary.final_eval.dice_3d);
            MethodRow {
                method,
                runs: rs.len(),
                dice: mean(&dice),
                dice_std: std(&dice),
                jaccard: mean(&col(&|r| class_mean(&r.summary.final_eval.report_3d, |a| a.jaccard.mean))),
                hd95: mean(&col(&|r| class_mean(&r.summary.final_eval.report_3d, |a| a.hd95.mean))),
                asd: mean(&col(&|r| class_mean(&r.summary.final_eval.report_3d, |a| a.asd.mean))),
                dice_2d: mean(&col(&|r| r.summary.final_eval.dice_2d)),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.dice.total_cmp(&a.dice).then_with(|| a.method.cmp(&b.method)));
    rows
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn comparison_csv(rows: &[MethodRow]) -> String {
    let mut s = String::from("method,runs,dice,dice_std,jaccard,hd95,asd,dice_2d\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.runs,
            num(r.dice),
            num(r.dice_std),
            num(r.jaccard),
            num(r.hd95),
            num(r.asd),
            num(r.dice_2d)
        );
    }
    s
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("run,method,seed,dice,dice_2d,stage1_dice,stage1_dice_2d\n");
    for r in runs {
        let f = &r.summary;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name,
            method_label(&r.config),
            f.seed,
            num(f.final_eval.dice_3d),
            num(f.final_eval.dice_2d),
            num(f.stage1.dice_3d),
            num(f.stage1.dice_2d)
        );
    }
    s
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Drawn as a step function (held until the next x).
    pub step: bool,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A minimal self-contained SVG line chart.
pub fn svg_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, m - 4.0, short(v));
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, h - m + 14.0, short(v));
    }
    for (i, se) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in se.points.iter().filter(|p| p.1.is_finite()) {
            match prev {
                None => {
                    let _ = write!(d, "M{:.2} {:.2}", sx(x), sy(y));
                }
                Some((_, py)) if se.step => {
                    let _ = write!(d, " L{:.2} {:.2} L{:.2} {:.2}", sx(x), sy(py), sx(x), sy(y));
                }
                Some(_) => {
                    let _ = write!(d, " L{:.2} {:.2}", sx(x), sy(y));
                }
            }
            prev = Some((x, y));
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{c}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            w - m - 120.0,
            m + 14.0 * i as f64,
            escape(&se.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(epoch, b_u)` over stage 2, epochs numbered from 1.
pub fn unlabeled_counts(epochs: &[EpochRow]) -> Vec<(usize, usize)> {
    epochs.iter().filter(|r| r.phase == "stage2").map(|r| (r.epoch, r.b_u)).collect()
}

/// Epochs numbered consecutively across both stages.
fn global_x(epochs: &[EpochRow]) -> Vec<f64> {
    (1..=epochs.len()).map(|i| i as f64).collect()
}

pub fn schedule_plot(run: &RunRecord) -> String {
    let s2: Vec<&EpochRow> = run.epochs.iter().filter(|r| r.phase == "stage2").collect();
    let b = run.config.sched.batch_size.max(1) as f64;
    let eta = run.config.sched.eta_initial_3d;
    let series = [
        Series {
            name: "b_u / B".into(),
            points: s2.iter().map(|r| (r.epoch as f64, r.b_u as f64 / b)).collect(),
            step: true,
        },
        Series {
            name: "lr_3d / lr_3d(0)".into(),
            points: s2.iter().map(|r| (r.epoch as f64, if eta > 0.0 { r.lr_3d / eta } else { 0.0 })).collect(),
            step: false,
        },
    ];
    svg_plot(&format!("{}: unlabeled share and learning rate", run.name), "stage-2 epoch", &series)
}

pub fn loss_plot(run: &RunRecord) -> String {
    let x = global_x(&run.epochs);
    let col = |f: fn(&EpochRow) -> Option<f64>| -> Vec<(f64, f64)> {
        x.iter().zip(&run.epochs).filter_map(|(&x, r)| f(r).map(|y| (x, y))).collect()
    };
    let series = [
        Series {
            name: "L_c".into(),
            points: col(|r| Some(r.l_c)),
            step: false,
        },
        Series {
            name: "L_l".into(),
            points: col(|r| r.l_l),
            step: false,
        },
        Series {
            name: "L_u".into(),
            points: col(|r| r.l_u),
            step: false,
        },
        Series {
            name: "L_l (2D, stage 1)".into(),
            points: col(|r| r.l_l_2d),
            step: false,
        },
    ];
    svg_plot(&format!("{}: training losses", run.name), "epoch (both stages)", &series)
}

/// Writes `comparison.csv`, `runs.csv` and per-run plots under `out`.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<MethodRow>> {
    if run_dirs.is_empty() {
        bail!("no run directories given");
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let plots = out.join("plots");
    fs::create_dir_all(&plots).with_context(|| format!("creating {}", plots.display()))?;
    let rows = comparison(&runs);
    fs::write(out.join("comparison.csv"), comparison_csv(&rows))?;
    fs::write(out.join("runs.csv"), runs_csv(&runs))?;
    for (i, r) in runs.iter().enumerate() {
        // directory names may repeat across parents; keep files distinct
        let stem = format!("{:02}-{}", i, r.name);
        fs::write(plots.join(format!("{stem}-schedule.svg")), schedule_plot(r))?;
        fs::write(plots.join(format!("{stem}-loss.svg")), loss_plot(r))?;
    }
    Ok(rows)
}

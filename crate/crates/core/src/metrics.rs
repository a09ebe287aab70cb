//! Segmentation metrics: Dice, Jaccard, HD95 and average surface distance.
//!
//! Surface voxels are foreground voxels with at least one 6-connected
//! background neighbour; the outside of the volume counts as background.
//! Percentiles interpolate linearly between order statistics. Distances are
//! in voxel units unless a spacing is supplied.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{harden, LabelVolume, SoftMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsdVariant {
    /// Mean over the union of both directed distance sets.
    #[default]
    Pooled,
    /// Average of the two directed means.
    MeanOfMeans,
}

impl FromStr for AsdVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "mean-of-means" => Ok(Self::MeanOfMeans),
            _ => Err(Error::Config(format!("unknown asd variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceUnits {
    #[default]
    Voxel,
    /// Physical units from the volume spacing.
    Mm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub asd_variant: AsdVariant,
    pub units: DistanceUnits,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                expected: dims.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_labels(l: &LabelVolume, class: u16) -> Self {
        Self {
            dims: l.dims(),
            data: l.binary(class),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn idx(&self, y: usize, x: usize, z: usize) -> usize {
        (y * self.dims[1] + x) * self.dims[2] + z
    }

    /// Coordinates of surface voxels.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [h, w, d] = self.dims;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    if !self.data[self.idx(y, x, z)] {
                        continue;
                    }
                    let edge = y == 0 || x == 0 || z == 0 || y + 1 == h || x + 1 == w || z + 1 == d;
                    if edge
                        || !self.data[self.idx(y - 1, x, z)]
                        || !self.data[self.idx(y + 1, x, z)]
                        || !self.data[self.idx(y, x - 1, z)]
                        || !self.data[self.idx(y, x + 1, z)]
                        || !self.data[self.idx(y, x, z - 1)]
                        || !self.data[self.idx(y, x, z + 1)]
                    {
                        out.push([y, x, z]);
                    }
                }
            }
        }
        out
    }
}

fn same_dims(a: &BinaryVolume, b: &BinaryVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            expected: b.dims.to_vec(),
            got: a.dims.to_vec(),
        });
    }
    Ok(())
}

/// `(dice, jaccard)`; both are 1 when the masks are empty and 0 when exactly
/// one is.
pub fn overlap_metrics(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<(f64, f64)> {
    same_dims(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64))
}

/// One-dimensional lower envelope of parabolas (Felzenszwalb and
/// Huttenlocher), in place; `None` marks a position with no site.
fn edt_1d(f: &mut [Option<f64>], w2: f64, buf_v: &mut Vec<usize>, buf_z: &mut Vec<f64>) {
    let n = f.len();
    buf_v.clear();
    buf_z.clear();
    let inter = |f: &[Option<f64>], q: usize, p: usize| -> f64 {
        let (fq, fp) = (f[q].unwrap(), f[p].unwrap());
        let (qf, pf) = (q as f64, p as f64);
        ((fq + w2 * qf * qf) - (fp + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
    };
    for q in 0..n {
        if f[q].is_none() {
            continue;
        }
        loop {
            match buf_v.last() {
                None => {
                    buf_v.push(q);
                    buf_z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = inter(f, q, p);
                    if s <= *buf_z.last().unwrap() {
                        buf_v.pop();
                        buf_z.pop();
                    } else {
                        buf_v.push(q);
                        buf_z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if buf_v.is_empty() {
        return;
    }
    let sites: Vec<(usize, f64)> = buf_v.iter().map(|&v| (v, f[v].unwrap())).collect();
    let mut k = 0;
    for (q, slot) in f.iter_mut().enumerate() {
        while k + 1 < sites.len() && buf_z[k + 1] < q as f64 {
            k += 1;
        }
        let (v, fv) = sites[k];
        let dq = q as f64 - v as f64;
        *slot = Some(w2 * dq * dq + fv);
    }
}

/// Squared Euclidean distance from every voxel to the nearest site, with
/// per-axis spacing.
fn squared_edt(dims: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let idx = |y: usize, x: usize, z: usize| (y * w + x) * d + z;
    let mut g: Vec<Option<f64>> = vec![None; h * w * d];
    for s in sites {
        g[idx(s[0], s[1], s[2])] = Some(0.0);
    }
    let (mut bv, mut bz) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    // depth (contiguous)
    for y in 0..h {
        for x in 0..w {
            let base = idx(y, x, 0);
            edt_1d(&mut g[base..base + d], spacing[2] * spacing[2], &mut bv, &mut bz);
        }
    }
    for y in 0..h {
        for z in 0..d {
            line.clear();
            line.extend((0..w).map(|x| g[idx(y, x, z)]));
            edt_1d(&mut line, spacing[1] * spacing[1], &mut bv, &mut bz);
            for x in 0..w {
                g[idx(y, x, z)] = line[x];
            }
        }
    }
    for x in 0..w {
        for z in 0..d {
            line.clear();
            line.extend((0..h).map(|y| g[idx(y, x, z)]));
            edt_1d(&mut line, spacing[0] * spacing[0], &mut bv, &mut bz);
            for y in 0..h {
                g[idx(y, x, z)] = line[y];
            }
        }
    }
    g.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect()
}

/// Distances from each surface voxel of `from` to the surface of `to`.
fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let sq = squared_edt(dims, to, spacing);
    from.iter()
        .map(|p| sq[(p[0] * dims[1] + p[1]) * dims[2] + p[2]].sqrt())
        .collect()
}

/// Linear interpolation between order statistics at rank `q * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn summarize(ab: &[f64], ba: &[f64], variant: AsdVariant) -> (f64, f64) {
    let hd95 = percentile(ab, 0.95).max(percentile(ba, 0.95));
    let (sa, sb) = (ab.iter().sum::<f64>(), ba.iter().sum::<f64>());
    let asd = match variant {
        AsdVariant::Pooled => (sa + sb) / (ab.len() + ba.len()) as f64,
        AsdVariant::MeanOfMeans => 0.5 * (sa / ab.len() as f64 + sb / ba.len() as f64),
    };
    (hd95, asd)
}

/// `(hd95, asd)` between the surfaces of two non-empty masks.
pub fn surface_distances(pred: &BinaryVolume, gt: &BinaryVolume, variant: AsdVariant) -> Result<(f64, f64)> {
    surface_distances_spaced(pred, gt, variant, [1.0; 3])
}

pub fn surface_distances_spaced(
    pred: &BinaryVolume,
    gt: &BinaryVolume,
    variant: AsdVariant,
    spacing: [f64; 3],
) -> Result<(f64, f64)> {
    same_dims(pred, gt)?;
    let (sp, sg) = (pred.surface(), gt.surface());
    if sp.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if sg.is_empty() {
        return Err(Error::EmptyMask("ground-truth"));
    }
    let ab = directed_distances(&sp, &sg, pred.dims, spacing);
    let ba = directed_distances(&sg, &sp, pred.dims, spacing);
    Ok(summarize(&ab, &ba, variant))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub class: u16,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Non-finite values travel as `null` in JSON and come back as NaN.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Mean and population standard deviation; NaN when nothing was counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "nullable")]
    pub mean: f64,
    #[serde(with = "nullable")]
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Self { mean, std: var.sqrt(), count: v.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub dice: Aggregate,
    pub jaccard: Aggregate,
    pub hd95: Aggregate,
    pub asd: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volumes: Vec<VolumeMetrics>,
    /// Keyed by foreground class.
    pub aggregate: BTreeMap<u16, ClassAggregate>,
}

impl MetricReport {
    /// Mean Dice over volumes for foreground class 1.
    pub fn mean_dice(&self) -> f64 {
        self.aggregate.get(&1).map_or(f64::NAN, |a| a.dice.mean)
    }

    pub fn to_csv(&self) -> String {
        let multi = self.aggregate.len() > 1;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        let mut s = String::from("volume_id,dice,jaccard,hd95,asd\n");
        let label = |id: &str, c: u16| if multi { format!("{id}/class{c}") } else { id.to_string() };
        for r in &self.volumes {
            let _ = writeln!(s, "{},{},{},{},{}", label(&r.id, r.class), r.dice, r.jaccard, fmt(r.hd95), fmt(r.asd));
        }
        for (c, a) in &self.aggregate {
            let _ = writeln!(s, "{},{},{},{},{}", label("std", *c), a.dice.std, a.jaccard.std, a.hd95.std, a.asd.std);
        }
        for (c, a) in &self.aggregate {
            let _ = writeln!(s, "{},{},{},{},{}", label("mean", *c), a.dice.mean, a.jaccard.mean, a.hd95.mean, a.asd.mean);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::rvol::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Metrics for one predicted/true label pair, per foreground class.
pub fn evaluate_labels(id: &str, pred: &LabelVolume, gt: &LabelVolume, classes: usize, cfg: &MetricsConfig, spacing: [f32; 3]) -> Result<Vec<VolumeMetrics>> {
    let spacing = match cfg.units {
        DistanceUnits::Voxel => [1.0; 3],
        DistanceUnits::Mm => spacing.map(f64::from),
    };
    (1..classes as u16)
        .map(|c| {
            let (p, g) = (BinaryVolume::from_labels(pred, c), BinaryVolume::from_labels(gt, c));
            let (dice, jaccard) = overlap_metrics(&p, &g)?;
            let sd = match surface_distances_spaced(&p, &g, cfg.asd_variant, spacing) {
                Ok(v) => Some(v),
                Err(Error::EmptyMask(which)) => {
                    log::warn!("{id} class {c}: {which} mask empty, surface distances undefined");
                    None
                }
                Err(e) => return Err(e),
            };
            Ok(VolumeMetrics {
                id: id.to_string(),
                class: c,
                dice,
                jaccard,
                hd95: sd.map(|s| s.0),
                asd: sd.map(|s| s.1),
            })
        })
        .collect()
}

/// Hardens every prediction and scores it against its ground truth.
/// `truth` items are `(id, mask, spacing)`.
pub fn evaluate(predictions: &BTreeMap<String, SoftMask>, truth: &[(String, SoftMask, [f32; 3])], cfg: &MetricsConfig) -> Result<MetricReport> {
    let mut volumes = Vec::new();
    for (id, gt, spacing) in truth {
        let pred = predictions.get(id).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
        let classes = gt.classes();
        volumes.extend(evaluate_labels(id, &harden(pred), &harden(gt), classes, cfg, *spacing)?);
    }
    let mut aggregate = BTreeMap::new();
    let classes: std::collections::BTreeSet<u16> = volumes.iter().map(|v| v.class).collect();
    for c in classes {
        let rows: Vec<&VolumeMetrics> = volumes.iter().filter(|v| v.class == c).collect();
        aggregate.insert(
            c,
            ClassAggregate {
                dice: Aggregate::of(rows.iter().map(|r| r.dice)),
                jaccard: Aggregate::of(rows.iter().map(|r| r.jaccard)),
                hd95: Aggregate::of(rows.iter().filter_map(|r| r.hd95)),
                asd: Aggregate::of(rows.iter().filter_map(|r| r.asd)),
            },
        );
    }
    Ok(MetricReport { volumes, aggregate })
}

//! Deterministic synthetic data.
//!
//! The target domain is a set of 3D volumes containing ellipsoidal structures
//! over a smooth low-frequency texture; the source domain is a 2D corpus of
//! discs and convex polygons over a finer, stronger texture. Every item draws
//! from its own RNG stream keyed by `(split, index)`, so generation order does
//! not matter and the splits never share draws.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::rvol;
use crate::tensor::Tensor;
use crate::volume::{one_hot, LabelVolume, SoftMask, Volume};

const MIN_FG: f64 = 0.02;
const MAX_FG: f64 = 0.40;
const MAX_ATTEMPTS: u64 = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetFamily {
    Ellipsoid,
    TwoLobeBlob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFamily {
    Polygons,
    Discs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDatasetSpec {
    /// Training volumes (labeled + unlabeled).
    pub m: usize,
    /// Labeled volumes.
    pub n: usize,
    /// Held-out test volumes.
    #[serde(default = "default_test")]
    pub test: usize,
    pub shape: [usize; 3],
    pub classes: usize,
    pub family: TargetFamily,
    pub noise_sigma: f32,
    pub texture_frequency: f32,
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f32,
    /// Range of the per-volume foreground intensity offset.
    #[serde(default = "default_contrast")]
    pub contrast: [f32; 2],
    pub seed: u64,
}

fn default_test() -> usize {
    10
}
fn default_texture_amplitude() -> f32 {
    0.6
}
fn default_contrast() -> [f32; 2] {
    [0.35, 1.0]
}

impl Default for TargetDatasetSpec {
    fn default() -> Self {
        Self {
            m: 40,
            n: 4,
            test: default_test(),
            shape: [32, 32, 32],
            classes: 2,
            family: TargetFamily::Ellipsoid,
            noise_sigma: 0.25,
            texture_frequency: 1.5,
            texture_amplitude: default_texture_amplitude(),
            contrast: default_contrast(),
            seed: 7,
        }
    }
}

impl TargetDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n >= self.m {
            return Err(Error::InvalidSpec(format!(
                "need 1 <= n < m, got n={} m={}",
                self.n, self.m
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidSpec(format!(
                "every volume dim must be >= 8, got {:?}",
                self.shape
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_frequency >= 0.0 && self.texture_amplitude >= 0.0) {
            return Err(Error::InvalidSpec("noise, texture must be non-negative".into()));
        }
        if !(self.contrast[0] <= self.contrast[1]) {
            return Err(Error::InvalidSpec("contrast range must be ordered".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec json");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceDatasetSpec {
    pub count: usize,
    pub shape: [usize; 2],
    pub classes: usize,
    pub family: SourceFamily,
    pub noise_sigma: f32,
    pub texture_frequency: f32,
    pub texture_amplitude: f32,
    /// Range of the per-image foreground intensity offset.
    pub contrast: [f32; 2],
    pub seed: u64,
}

impl Default for SourceDatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            shape: [32, 32],
            classes: 2,
            family: SourceFamily::Polygons,
            noise_sigma: 0.15,
            texture_frequency: 3.0,
            texture_amplitude: 0.4,
            contrast: [0.8, 1.4],
            seed: 3,
        }
    }
}

impl SourceDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidSpec("source count must be >= 1".into()));
        }
        if self.classes < 2 || self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidSpec(format!(
                "source needs >= 2 classes and dims >= 8, got {} / {:?}",
                self.classes, self.shape
            )));
        }
        if !(self.contrast[0] <= self.contrast[1]) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "source contrast must be an ordered range and noise non-negative, got {:?} / {}",
                self.contrast, self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub image: Volume,
    pub mask: SoftMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledItem {
    pub id: String,
    pub image: Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDataset {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
    pub test: Vec<LabeledItem>,
}

/// A 2D source item: image `[1, H, W]` and one-hot mask `[C_c, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceItem {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Rotated ellipsoid in voxel coordinates (voxel centers at integer positions).
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Rows are the ellipsoid's principal directions.
    pub rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Self {
            center,
            semi_axes,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let mut s = 0.0;
        for (row, a) in self.rotation.iter().zip(self.semi_axes) {
            let t = (row[0] * q[0] + row[1] * q[1] + row[2] * q[2]) / a;
            s += t * t;
        }
        s <= 1.0
    }
}

/// Foreground shapes of one class; a voxel belongs to the class if any part contains it.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSet {
    pub class: u16,
    pub parts: Vec<Ellipsoid>,
}

/// Rasterizes shape sets into labels; later sets overwrite earlier ones.
pub fn rasterize(dims: [usize; 3], shapes: &[ShapeSet]) -> LabelVolume {
    let mut data = vec![0u16; dims.iter().product()];
    let mut i = 0;
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let p = [h as f64, w as f64, d as f64];
                for s in shapes {
                    if s.parts.iter().any(|e| e.contains(p)) {
                        data[i] = s.class;
                    }
                }
                i += 1;
            }
        }
    }
    LabelVolume::new(dims, data).expect("dims match")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape2D {
    Disc { center: [f64; 2], radius: f64 },
    /// Convex polygon, vertices in counter-clockwise order.
    Polygon { vertices: Vec<[f64; 2]> },
}

impl Shape2D {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape2D::Disc { center, radius } => {
                let dy = p[0] - center[0];
                let dx = p[1] - center[1];
                dy * dy + dx * dx <= radius * radius
            }
            Shape2D::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0.0
                })
            }
        }
    }
}

pub fn rasterize_2d(dims: [usize; 2], shapes: &[(u16, Shape2D)]) -> Vec<u16> {
    let mut out = vec![0u16; dims[0] * dims[1]];
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            let p = [h as f64, w as f64];
            for (class, s) in shapes {
                if s.contains(p) {
                    out[h * dims[1] + w] = *class;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    Test = 1,
}

pub fn generate_target(spec: &TargetDatasetSpec) -> Result<TargetDataset> {
    spec.validate()?;
    let base = RngStream::new(spec.seed, "datagen/target");
    let mut labeled = Vec::with_capacity(spec.n);
    let mut unlabeled = Vec::with_capacity(spec.m - spec.n);
    for i in 0..spec.m {
        let (image, mask) = target_item(spec, base.derive(&[Split::Train as u64, i as u64]))?;
        let id = format!("train-{i:04}");
        if i < spec.n {
            labeled.push(LabeledItem { id, image, mask });
        } else {
            unlabeled.push(UnlabeledItem { id, image });
        }
    }
    let test = (0..spec.test)
        .map(|i| {
            let (image, mask) = target_item(spec, base.derive(&[Split::Test as u64, i as u64]))?;
            Ok(LabeledItem {
                id: format!("test-{i:04}"),
                image,
                mask,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TargetDataset {
        labeled,
        unlabeled,
        test,
    })
}

fn random_rotation(rng: &mut RngStream) -> [[f64; 3]; 3] {
    // Uniform random rotation from a unit quaternion.
    let q: [f64; 4] = std::array::from_fn(|_| rng.normal());
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let [a, b, c, d] = q.map(|x| x / n);
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
}

fn random_ellipsoid(rng: &mut RngStream, dims: [usize; 3], scale: f64) -> Ellipsoid {
    let min_dim = *dims.iter().min().unwrap() as f64;
    let semi_axes: [f64; 3] =
        std::array::from_fn(|_| scale * min_dim * rng.random_range(0.14..0.30));
    let amax = semi_axes.iter().cloned().fold(0.0, f64::max);
    let center = std::array::from_fn(|k| {
        let l = dims[k] as f64 - 1.0;
        let margin = (0.6 * amax).min(l / 2.0);
        rng.random_range(margin..=l - margin)
    });
    Ellipsoid {
        center,
        semi_axes,
        rotation: random_rotation(rng),
    }
}

fn random_shapes(spec: &TargetDatasetSpec, rng: &mut RngStream) -> Vec<ShapeSet> {
    (1..spec.classes)
        .map(|class| {
            let parts = match spec.family {
                TargetFamily::Ellipsoid => vec![random_ellipsoid(rng, spec.shape, 1.0)],
                TargetFamily::TwoLobeBlob => {
                    let a = random_ellipsoid(rng, spec.shape, 0.8);
                    let mut b = random_ellipsoid(rng, spec.shape, 0.8);
                    // Place the second lobe so that it touches or overlaps the first.
                    let dir: [f64; 3] = std::array::from_fn(|_| rng.normal());
                    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let reach = 0.8 * (a.semi_axes[0].min(a.semi_axes[1]).min(a.semi_axes[2])
                        + b.semi_axes[0].min(b.semi_axes[1]).min(b.semi_axes[2]));
                    b.center = std::array::from_fn(|k| {
                        let l = spec.shape[k] as f64 - 1.0;
                        (a.center[k] + reach * dir[k] / n).clamp(0.0, l)
                    });
                    vec![a, b]
                }
            };
            ShapeSet {
                class: class as u16,
                parts,
            }
        })
        .collect()
}

/// Sum of three plane waves with random directions and phases, in [-1, 1].
fn texture<const N: usize>(rng: &mut RngStream, dims: [usize; N], cycles: f64) -> Vec<f64> {
    let waves: Vec<([f64; N], f64)> = (0..3)
        .map(|_| {
            let dir: [f64; N] = std::array::from_fn(|_| rng.normal());
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let l = *dims.iter().max().unwrap() as f64;
            (dir.map(|x| 2.0 * PI * cycles * x / (n * l)), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = [0usize; N];
    for _ in 0..total {
        let v: f64 = waves
            .iter()
            .map(|(k, phase)| {
                let arg: f64 = (0..N).map(|a| k[a] * idx[a] as f64).sum::<f64>() + phase;
                arg.sin()
            })
            .sum();
        out.push(v / 3.0);
        for a in (0..N).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

fn normalize_unit(raw: &[f64]) -> Vec<f32> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter().map(|&x| ((x - lo) / span) as f32).collect()
}

fn target_item(spec: &TargetDatasetSpec, rng: RngStream) -> Result<(Volume, SoftMask)> {
    let dims = spec.shape;
    let vox: usize = dims.iter().product();
    let mut labels = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng.derive(&[0, attempt]);
        let l = rasterize(dims, &random_shapes(spec, &mut r));
        let fg = l.data().iter().filter(|&&x| x != 0).count() as f64 / vox as f64;
        if (MIN_FG..=MAX_FG).contains(&fg) {
            labels = Some(l);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::InvalidSpec(format!(
            "could not place shapes with foreground in [{MIN_FG}, {MAX_FG}] for shape {dims:?}"
        ))
    })?;

    let mut r = rng.derive(&[1]);
    let tex = texture(&mut r, dims, spec.texture_frequency as f64);
    let contrast = r.random_range(spec.contrast[0] as f64..=spec.contrast[1] as f64);
    let mut noise = rng.derive(&[2]);
    let raw: Vec<f64> = labels
        .data()
        .iter()
        .zip(&tex)
        .map(|(&l, &t)| {
            let fg = if l != 0 { contrast * l as f64 / (spec.classes - 1) as f64 } else { 0.0 };
            spec.texture_amplitude as f64 * t + fg + spec.noise_sigma as f64 * noise.normal()
        })
        .collect();
    let image = Volume::new(Tensor::from_vec(
        &[1, dims[0], dims[1], dims[2]],
        normalize_unit(&raw),
    )?)?;
    let mask = one_hot(&labels, spec.classes)?;
    Ok((image, mask))
}

pub fn generate_source(spec: &SourceDatasetSpec) -> Result<Vec<SourceItem>> {
    spec.validate()?;
    let base = RngStream::new(spec.seed, "datagen/source");
    (0..spec.count)
        .map(|i| source_item(spec, base.derive(&[i as u64])))
        .collect()
}

fn random_shape_2d(family: SourceFamily, dims: [usize; 2], rng: &mut RngStream) -> Shape2D {
    let min_dim = dims[0].min(dims[1]) as f64;
    let radius = min_dim * rng.random_range(0.12..0.30);
    let center: [f64; 2] = std::array::from_fn(|k| {
        let l = dims[k] as f64 - 1.0;
        let margin = (0.6 * radius).min(l / 2.0);
        rng.random_range(margin..=l - margin)
    });
    match family {
        SourceFamily::Discs => Shape2D::Disc { center, radius },
        SourceFamily::Polygons => {
            // Vertices on a circle in angular order always form a convex polygon.
            let k = rng.random_range(3..=7usize);
            let step = 2.0 * PI / k as f64;
            let phase = rng.random_range(0.0..step);
            let vertices: Vec<[f64; 2]> = (0..k)
                .map(|i| {
                    let a = phase + step * (i as f64 + rng.random_range(-0.3..0.3));
                    [center[0] + radius * a.sin(), center[1] + radius * a.cos()]
                })
                .collect();
            Shape2D::Polygon { vertices }
        }
    }
}

fn source_item(spec: &SourceDatasetSpec, rng: RngStream) -> Result<SourceItem> {
    let dims = spec.shape;
    let px = dims[0] * dims[1];
    let mut labels = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng.derive(&[0, attempt]);
        let shapes: Vec<(u16, Shape2D)> = (1..spec.classes)
            .map(|c| (c as u16, random_shape_2d(spec.family, dims, &mut r)))
            .collect();
        let l = rasterize_2d(dims, &shapes);
        let fg = l.iter().filter(|&&x| x != 0).count() as f64 / px as f64;
        if (MIN_FG..=MAX_FG).contains(&fg) {
            labels = Some(l);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::InvalidSpec(format!("could not place source shapes in {dims:?}"))
    })?;
    let mut r = rng.derive(&[1]);
    let tex = texture(&mut r, dims, spec.texture_frequency as f64);
    let contrast = r.random_range(spec.contrast[0] as f64..=spec.contrast[1] as f64);
    let mut noise = rng.derive(&[2]);
    let raw: Vec<f64> = labels
        .iter()
        .zip(&tex)
        .map(|(&l, &t)| {
            let fg = if l != 0 { contrast * l as f64 / (spec.classes - 1) as f64 } else { 0.0 };
            spec.texture_amplitude as f64 * t + fg + spec.noise_sigma as f64 * noise.normal()
        })
        .collect();
    let image = Tensor::from_vec(&[1, dims[0], dims[1]], normalize_unit(&raw))?;
    let mut mask = vec![0.0f32; spec.classes * px];
    for (p, &l) in labels.iter().enumerate() {
        mask[l as usize * px + p] = 1.0;
    }
    Ok(SourceItem {
        image,
        mask: Tensor::from_vec(&[spec.classes, dims[0], dims[1]], mask)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(SplitName::Labeled),
            "unlabeled" => Ok(SplitName::Unlabeled),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected labeled, unlabeled or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitName,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: TargetDatasetSpec,
    pub spec_hash: String,
    pub items: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: SplitName) -> Vec<&str> {
        self.items
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Writes every item as RVOL plus `manifest.json`; returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &TargetDatasetSpec, ds: &TargetDataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = spec.hash();
    let prov = format!("seed={} spec={}", spec.seed, &hash[..16]);
    let mut items = Vec::new();
    let mut put_labeled = |it: &LabeledItem, split: SplitName| -> Result<()> {
        let image = format!("{}.image.rvol", it.id);
        let mask = format!("{}.mask.rvol", it.id);
        rvol::write_volume(&dir.join(&image), &it.image, Some(&prov))?;
        rvol::write_softmask(&dir.join(&mask), &it.mask, Some(&prov))?;
        items.push(ManifestEntry {
            id: it.id.clone(),
            split,
            image,
            mask: Some(mask),
        });
        Ok(())
    };
    for it in &ds.labeled {
        put_labeled(it, SplitName::Labeled)?;
    }
    for it in &ds.test {
        put_labeled(it, SplitName::Test)?;
    }
    for it in &ds.unlabeled {
        let image = format!("{}.image.rvol", it.id);
        rvol::write_volume(&dir.join(&image), &it.image, Some(&prov))?;
        items.push(ManifestEntry {
            id: it.id.clone(),
            split: SplitName::Unlabeled,
            image,
            mask: None,
        });
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = Manifest {
        format: "mnseg-manifest/1".into(),
        spec: spec.clone(),
        spec_hash: hash,
        items,
    };
    let path = dir.join("manifest.json");
    rvol::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads every split referenced by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, TargetDataset)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = TargetDataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.items {
        let image = rvol::read_volume(&dir.join(&e.image))?;
        let mask = match &e.mask {
            Some(m) => Some(rvol::read_softmask(&dir.join(m))?),
            None => None,
        };
        match (e.split, mask) {
            (SplitName::Unlabeled, _) => ds.unlabeled.push(UnlabeledItem {
                id: e.id.clone(),
                image,
            }),
            (split, Some(mask)) => {
                let it = LabeledItem {
                    id: e.id.clone(),
                    image,
                    mask,
                };
                if split == SplitName::Labeled {
                    ds.labeled.push(it)
                } else {
                    ds.test.push(it)
                }
            }
            (_, None) => {
                return Err(Error::format(
                    manifest_path,
                    format!("item `{}` needs a mask", e.id),
                ))
            }
        }
    }
    Ok((manifest, ds))
}

/// Foreground fraction of every labeled/test mask, keyed by id.
pub fn foreground_fractions(ds: &TargetDataset) -> BTreeMap<String, f64> {
    ds.labeled
        .iter()
        .chain(&ds.test)
        .map(|it| {
            let bg = it.mask.channel(0);
            let fg = bg.iter().filter(|&&p| p < 0.5).count();
            (it.id.clone(), fg as f64 / bg.len() as f64)
        })
        .collect()
}

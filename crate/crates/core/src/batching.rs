//! Augmentation, foreground-biased cropping and batch assembly.
//!
//! Every random decision for an item comes from a stream derived from
//! `(epoch, batch, slot)`, and every decision is recorded, so a batch can be
//! rebuilt bit-exactly from its provenance alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledItem, UnlabeledItem};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::BatchPlan;
use crate::tensor::{offset4, Tensor};
use crate::volume::{crop4, standardize_slices, SoftMask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_range: [f64; 2],
    pub gamma_range: [f64; 2],
    pub crop: [usize; 3],
    pub fg_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_range: [0.9, 1.1],
            gamma_range: [0.8, 1.2],
            crop: [24, 24, 16],
            fg_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.scale_range) || !ordered(self.gamma_range) {
            return Err(Error::Config("augment ranges must satisfy 0 < lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            return Err(Error::Config("augment.fg_prob must lie in [0, 1]".into()));
        }
        if self.crop.contains(&0) {
            return Err(Error::Config("augment.crop dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Recorded augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub scale: f64,
    pub gamma: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { scale: 1.0, gamma: 1.0 };
}

pub fn draw_augment(cfg: &AugmentConfig, rng: &mut RngStream) -> AugmentDraw {
    if !cfg.enabled {
        return AugmentDraw::IDENTITY;
    }
    let pick = |r: [f64; 2], rng: &mut RngStream| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    let scale = pick(cfg.scale_range, rng);
    let gamma = pick(cfg.gamma_range, rng);
    AugmentDraw { scale, gamma }
}

/// Output size of an axis of length `len` rescaled by `scale`, never below `min`.
fn scaled_len(len: usize, scale: f64, min: usize) -> usize {
    ((len as f64 * scale).round() as usize).max(min).max(1)
}

/// Trilinear resampling of every channel to `out` spatial dims
/// (half-voxel aligned; an unchanged axis is copied exactly).
pub fn resize_trilinear(t: &Tensor<f32>, out: [usize; 3]) -> Tensor<f32> {
    let dims = t.spatial();
    if dims == out {
        return t.clone();
    }
    let c = t.shape()[0];
    // Per axis: (lower index, upper index, upper weight) for each output coordinate.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|k| {
            let (n_in, n_out) = (dims[k], out[k]);
            (0..n_out)
                .map(|i| {
                    if n_in == n_out {
                        return (i, i, 0.0);
                    }
                    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        })
        .collect();
    let x = t.data();
    let mut data = Vec::with_capacity(c * out.iter().product::<usize>());
    for ch in 0..c {
        for &(y0, y1, fy) in &taps[0] {
            for &(x0, x1, fx) in &taps[1] {
                for &(z0, z1, fz) in &taps[2] {
                    let at = |y, xx, z| x[offset4(dims, ch, y, xx, z)] as f64;
                    let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
                    let c00 = lerp(at(y0, x0, z0), at(y0, x0, z1), fz);
                    let c01 = lerp(at(y0, x1, z0), at(y0, x1, z1), fz);
                    let c10 = lerp(at(y1, x0, z0), at(y1, x0, z1), fz);
                    let c11 = lerp(at(y1, x1, z0), at(y1, x1, z1), fz);
                    let c0 = lerp(c00, c01, fx);
                    let c1 = lerp(c10, c11, fx);
                    data.push(lerp(c0, c1, fy) as f32);
                }
            }
        }
    }
    Tensor::from_vec(&[c, out[0], out[1], out[2]], data).unwrap()
}

/// Rescales each voxel's class vector to sum to one.
fn renormalize(t: Tensor<f32>) -> Tensor<f32> {
    let c = t.shape()[0];
    let n = t.len() / c;
    let mut t = t;
    let d = t.data_mut();
    for v in 0..n {
        let s: f64 = (0..c).map(|k| d[k * n + v].max(0.0) as f64).sum();
        for k in 0..c {
            d[k * n + v] = if s > 0.0 { (d[k * n + v].max(0.0) as f64 / s) as f32 } else { 1.0 / c as f32 };
        }
    }
    t
}

/// Applies a recorded draw to an image and any number of aligned masks. The
/// resize never shrinks an axis below `min_dims`.
pub fn apply_augment(
    v: &Volume,
    masks: &[&SoftMask],
    draw: AugmentDraw,
    min_dims: [usize; 3],
) -> Result<(Volume, Vec<SoftMask>)> {
    for m in masks {
        if m.dims() != v.dims() {
            return Err(Error::ShapeMismatch {
                expected: v.dims().to_vec(),
                got: m.dims().to_vec(),
            });
        }
    }
    let dims = v.dims();
    let out: [usize; 3] = std::array::from_fn(|k| scaled_len(dims[k], draw.scale, min_dims[k].min(dims[k])));
    let mut img = resize_trilinear(v.data(), out);
    if draw.gamma != 1.0 {
        for x in img.data_mut() {
            *x = (x.clamp(0.0, 1.0) as f64).powf(draw.gamma) as f32;
        }
    }
    let masks = masks
        .iter()
        .map(|m| {
            if out == dims {
                (*m).clone()
            } else {
                SoftMask::from_probs(renormalize(resize_trilinear(m.data(), out)))
            }
        })
        .collect();
    Ok((Volume::with_spacing(img, v.spacing())?, masks))
}

/// Draws and applies a random scale and gamma.
pub fn augment(v: &Volume, m: &SoftMask, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<(Volume, SoftMask)> {
    let draw = draw_augment(cfg, rng);
    let (img, mut ms) = apply_augment(v, &[m], draw, cfg.crop)?;
    Ok((img, ms.remove(0)))
}

/// Probability that a voxel is foreground: `1 - p(background)`.
fn foreground(m: &SoftMask) -> Vec<usize> {
    let bg = m.channel(0);
    bg.iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Chooses a crop offset. With probability `p_fg` the window is centered on a
/// uniformly drawn foreground voxel of `guide` (clamped to the bounds);
/// otherwise, or when there is no foreground, it is uniform.
pub fn choose_crop(guide: &SoftMask, crop: [usize; 3], p_fg: f64, rng: &mut RngStream) -> Result<([usize; 3], bool)> {
    let dims = guide.dims();
    if (0..3).any(|k| crop[k] > dims[k]) {
        return Err(Error::CropTooLarge { crop, volume: dims });
    }
    let want_fg = p_fg > 0.0 && rng.random::<f64>() < p_fg;
    if want_fg {
        let fg = foreground(guide);
        if !fg.is_empty() {
            let v = fg[rng.random_range(0..fg.len())];
            let pos = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
            let off = std::array::from_fn(|k| pos[k].saturating_sub(crop[k] / 2).min(dims[k] - crop[k]));
            return Ok((off, true));
        }
    }
    let off = std::array::from_fn(|k| rng.random_range(0..=dims[k] - crop[k]));
    Ok((off, false))
}

/// Crops a window chosen by [`choose_crop`] from an image and its mask.
pub fn crop_foreground_biased(
    v: &Volume,
    m: &SoftMask,
    crop: [usize; 3],
    p_fg: f64,
    rng: &mut RngStream,
) -> Result<(Tensor<f32>, Tensor<f32>, [usize; 3])> {
    if m.dims() != v.dims() {
        return Err(Error::ShapeMismatch {
            expected: v.dims().to_vec(),
            got: m.dims().to_vec(),
        });
    }
    let (off, _) = choose_crop(m, crop, p_fg, rng)?;
    Ok((crop4(v.data(), off, crop)?, crop4(m.data(), off, crop)?, off))
}

/// Input normalization applied to the augmented item before cropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    /// Whole-volume statistics (3D model).
    PerVolume,
    /// Per-depth-slice statistics (2D model).
    PerSlice,
}

pub fn normalize_input(v: &Volume, norm: InputNorm) -> Tensor<f32> {
    match norm {
        InputNorm::PerVolume => v.standardized(),
        InputNorm::PerSlice => standardize_slices(v.data()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemProvenance {
    pub volume_id: String,
    pub labeled: bool,
    /// Source depth index for single-slice items.
    pub slice: Option<usize>,
    pub draw: AugmentDraw,
    pub offset: [usize; 3],
    pub fg_forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchProvenance {
    pub epoch: usize,
    pub batch: usize,
    pub items: Vec<ItemProvenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    /// Normalized image patch `[C_i, h, w, d]`.
    pub patch: Tensor<f32>,
    /// Ground truth or pseudo-mask patch `[C_c, h, w, d]`.
    pub target: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub plan: BatchPlan,
    pub labeled: Vec<TrainingItem>,
    pub unlabeled: Vec<TrainingItem>,
    pub provenance: BatchProvenance,
}

/// What the trainer needs to build items from pools.
pub struct Pools<'a> {
    pub labeled: &'a [LabeledItem],
    pub unlabeled: &'a [UnlabeledItem],
    /// Targets for unlabeled volumes, keyed by id.
    pub pseudo: &'a BTreeMap<String, SoftMask>,
    /// Foreground guides for unlabeled volumes; falls back to `pseudo`.
    pub guides: &'a BTreeMap<String, SoftMask>,
}

impl<'a> Pools<'a> {
    fn unlabeled_masks(&self, id: &str) -> Result<(&'a SoftMask, &'a SoftMask)> {
        let pseudo = self.pseudo.get(id).ok_or_else(|| Error::MissingPseudoMask(id.to_string()))?;
        Ok((pseudo, self.guides.get(id).unwrap_or(pseudo)))
    }
}

fn slice_volume(v: &Volume, k: usize) -> Result<Volume> {
    let d = v.dims();
    Volume::with_spacing(crop4(v.data(), [0, 0, k], [d[0], d[1], 1])?, v.spacing())
}

fn slice_mask(m: &SoftMask, k: usize) -> Result<SoftMask> {
    let d = m.dims();
    Ok(SoftMask::from_probs(crop4(m.data(), [0, 0, k], [d[0], d[1], 1])?))
}

fn build_item(
    image: &Volume,
    target: &SoftMask,
    guide: Option<&SoftMask>,
    crop: [usize; 3],
    draw: AugmentDraw,
    norm: InputNorm,
    choose: impl FnOnce(&SoftMask) -> Result<([usize; 3], bool)>,
) -> Result<(TrainingItem, [usize; 3], bool)> {
    let masks: Vec<&SoftMask> = match guide {
        Some(g) => vec![target, g],
        None => vec![target],
    };
    let (img, ms) = apply_augment(image, &masks, draw, crop)?;
    let guide = ms.last().unwrap();
    let (off, forced) = choose(guide)?;
    let x = normalize_input(&img, norm);
    Ok((
        TrainingItem {
            patch: crop4(&x, off, crop)?,
            target: crop4(ms[0].data(), off, crop)?,
        },
        off,
        forced,
    ))
}

/// Indices into the unlabeled pool that `assemble_batch` will draw for
/// batches `0..batches` of `epoch`, without building any item.
pub fn unlabeled_draws(plan: BatchPlan, pool: usize, rng: &RngStream, epoch: usize, batches: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if pool == 0 {
        return out;
    }
    for b in 0..batches {
        for slot in plan.b_l..plan.total() {
            let mut r = rng.derive(&[epoch as u64, b as u64, slot as u64]);
            out.insert(r.random_range(0..pool));
        }
    }
    out
}

/// Samples `plan.b_l` labeled and `plan.b_u` unlabeled volumes with
/// replacement and turns each into an augmented, cropped training item.
pub fn assemble_batch(
    plan: BatchPlan,
    pools: &Pools,
    cfg: &AugmentConfig,
    norm: InputNorm,
    rng: &RngStream,
    epoch: usize,
    batch: usize,
) -> Result<TrainingBatch> {
    if plan.b_l > 0 && pools.labeled.is_empty() {
        return Err(Error::Invalid("labeled pool is empty".into()));
    }
    if plan.b_u > 0 && pools.unlabeled.is_empty() {
        return Err(Error::Invalid("unlabeled pool is empty".into()));
    }
    let mut labeled = Vec::with_capacity(plan.b_l);
    let mut unlabeled = Vec::with_capacity(plan.b_u);
    let mut items = Vec::with_capacity(plan.total());
    for slot in 0..plan.total() {
        let mut r = rng.derive(&[epoch as u64, batch as u64, slot as u64]);
        let is_labeled = slot < plan.b_l;
        let draw;
        let (item, off, forced, id) = if is_labeled {
            let it = &pools.labeled[r.random_range(0..pools.labeled.len())];
            draw = draw_augment(cfg, &mut r);
            let (item, off, forced) = build_item(&it.image, &it.mask, None, cfg.crop, draw, norm, |g| {
                choose_crop(g, cfg.crop, cfg.fg_prob, &mut r)
            })?;
            (item, off, forced, it.id.clone())
        } else {
            let it = &pools.unlabeled[r.random_range(0..pools.unlabeled.len())];
            let (pseudo, guide) = pools.unlabeled_masks(&it.id)?;
            draw = draw_augment(cfg, &mut r);
            let (item, off, forced) = build_item(&it.image, pseudo, Some(guide), cfg.crop, draw, norm, |g| {
                choose_crop(g, cfg.crop, cfg.fg_prob, &mut r)
            })?;
            (item, off, forced, it.id.clone())
        };
        items.push(ItemProvenance {
            volume_id: id,
            labeled: is_labeled,
            slice: None,
            draw,
            offset: off,
            fg_forced: forced,
        });
        if is_labeled {
            labeled.push(item);
        } else {
            unlabeled.push(item);
        }
    }
    Ok(TrainingBatch {
        plan,
        labeled,
        unlabeled,
        provenance: BatchProvenance { epoch, batch, items },
    })
}

/// Labeled single-slice items for 2D training: a random labeled volume, a
/// random depth index, augmentation in-plane, then an `(h, w, 1)` crop.
pub fn assemble_slice_batch(
    count: usize,
    labeled: &[LabeledItem],
    cfg: &AugmentConfig,
    rng: &RngStream,
    epoch: usize,
    batch: usize,
) -> Result<TrainingBatch> {
    if labeled.is_empty() {
        return Err(Error::Invalid("labeled pool is empty".into()));
    }
    let crop = [cfg.crop[0], cfg.crop[1], 1];
    let mut out = Vec::with_capacity(count);
    let mut items = Vec::with_capacity(count);
    for slot in 0..count {
        let mut r = rng.derive(&[epoch as u64, batch as u64, slot as u64]);
        let it = &labeled[r.random_range(0..labeled.len())];
        let k = r.random_range(0..it.image.dims()[2]);
        let draw = draw_augment(cfg, &mut r);
        let img = slice_volume(&it.image, k)?;
        let mask = slice_mask(&it.mask, k)?;
        let (item, off, forced) = build_item(&img, &mask, None, crop, draw, InputNorm::PerSlice, |g| {
            choose_crop(g, crop, cfg.fg_prob, &mut r)
        })?;
        items.push(ItemProvenance {
            volume_id: it.id.clone(),
            labeled: true,
            slice: Some(k),
            draw,
            offset: off,
            fg_forced: forced,
        });
        out.push(item);
    }
    Ok(TrainingBatch {
        plan: BatchPlan { b_l: count, b_u: 0 },
        labeled: out,
        unlabeled: Vec::new(),
        provenance: BatchProvenance { epoch, batch, items },
    })
}

/// Rebuilds one item from its provenance record alone.
pub fn replay_item(p: &ItemProvenance, pools: &Pools, cfg: &AugmentConfig, norm: InputNorm) -> Result<TrainingItem> {
    let fixed = |_: &SoftMask| Ok((p.offset, p.fg_forced));
    if p.labeled {
        let it = pools
            .labeled
            .iter()
            .find(|x| x.id == p.volume_id)
            .ok_or_else(|| Error::Invalid(format!("unknown labeled volume `{}`", p.volume_id)))?;
        match p.slice {
            Some(k) => {
                let crop = [cfg.crop[0], cfg.crop[1], 1];
                let (item, _, _) = build_item(&slice_volume(&it.image, k)?, &slice_mask(&it.mask, k)?, None, crop, p.draw, InputNorm::PerSlice, fixed)?;
                Ok(item)
            }
            None => Ok(build_item(&it.image, &it.mask, None, cfg.crop, p.draw, norm, fixed)?.0),
        }
    } else {
        let it = pools
            .unlabeled
            .iter()
            .find(|x| x.id == p.volume_id)
            .ok_or_else(|| Error::Invalid(format!("unknown unlabeled volume `{}`", p.volume_id)))?;
        let (pseudo, guide) = pools.unlabeled_masks(&it.id)?;
        Ok(build_item(&it.image, pseudo, Some(guide), cfg.crop, p.draw, norm, fixed)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_target, TargetDatasetSpec};
    use crate::volume::{harden, one_hot, LabelVolume};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn dataset() -> crate::datagen::TargetDataset {
        generate_target(&TargetDatasetSpec {
            m: 6,
            n: 2,
            test: 1,
            shape: [20, 20, 12],
            ..TargetDatasetSpec::default()
        })
        .unwrap()
    }

    fn small_cfg() -> AugmentConfig {
        AugmentConfig {
            crop: [12, 12, 8],
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn identity_draw_is_identity() {
        let ds = dataset();
        let it = &ds.labeled[0];
        let (v, ms) = apply_augment(&it.image, &[&it.mask], AugmentDraw::IDENTITY, [1, 1, 1]).unwrap();
        assert!(v.data().max_abs_diff(it.image.data()) < 1e-6);
        assert!(ms[0].data().max_abs_diff(it.mask.data()) < 1e-6);
    }

    #[test]
    fn gamma_on_constant_image() {
        let v = Volume::new(Tensor::full(&[1, 4, 4, 4], 0.25)).unwrap();
        let m = one_hot(&LabelVolume::new([4, 4, 4], vec![0; 64]).unwrap(), 2).unwrap();
        let (out, _) = apply_augment(&v, &[&m], AugmentDraw { scale: 1.0, gamma: 0.8 }, [1, 1, 1]).unwrap();
        let want = 0.25f64.powf(0.8);
        assert!((want - 0.329876977693).abs() < 1e-9);
        assert!(out.data().data().iter().all(|&x| (x as f64 - want).abs() < 1e-6));
    }

    #[test]
    fn resized_masks_stay_on_the_simplex() {
        let ds = dataset();
        let it = &ds.labeled[1];
        for scale in [0.9, 0.95, 1.07, 1.1] {
            let (v, ms) = apply_augment(&it.image, &[&it.mask], AugmentDraw { scale, gamma: 1.0 }, [1, 1, 1]).unwrap();
            assert_eq!(v.dims(), ms[0].dims());
            let n = ms[0].data().len() / 2;
            let d = ms[0].data().data();
            for i in 0..n {
                assert!((d[i] + d[n + i] - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn interior_argmax_survives_resizing() {
        // A slab: class 1 for h >= 10 in a 20^3 grid.
        let dims = [20, 20, 20];
        let labels: Vec<u16> = (0..8000).map(|i| u16::from(i / 400 >= 10)).collect();
        let lv = LabelVolume::new(dims, labels).unwrap();
        let m = one_hot(&lv, 2).unwrap();
        let v = Volume::new(Tensor::full(&[1, 20, 20, 20], 0.5)).unwrap();
        for scale in [0.9, 1.1] {
            let (_, ms) = apply_augment(&v, &[&m], AugmentDraw { scale, gamma: 1.0 }, [1, 1, 1]).unwrap();
            let out = harden(&ms[0]);
            let od = out.dims();
            for h in 0..od[0] {
                // Source coordinate of this output row.
                let src = (h as f64 + 0.5) * 20.0 / od[0] as f64 - 0.5;
                if (src - 9.5).abs() < 2.0 {
                    continue;
                }
                let want = u16::from(src > 9.5);
                for w in 0..od[1] {
                    for d in 0..od[2] {
                        assert_eq!(out.get(h, w, d), want, "scale {scale} h {h}");
                    }
                }
            }
        }
    }

    fn single_voxel_mask(dims: [usize; 3], at: [usize; 3]) -> SoftMask {
        let n = dims.iter().product();
        let mut l = vec![0u16; n];
        l[(at[0] * dims[1] + at[1]) * dims[2] + at[2]] = 1;
        one_hot(&LabelVolume::new(dims, l).unwrap(), 2).unwrap()
    }

    #[test]
    fn forced_crop_contains_the_only_foreground_voxel() {
        let dims = [16, 14, 10];
        let crop = [6, 5, 4];
        let mut rng = RngStream::new(1, "crop");
        for at in [[0, 0, 0], [15, 13, 9], [7, 3, 8]] {
            let m = single_voxel_mask(dims, at);
            for _ in 0..1000 {
                let (off, forced) = choose_crop(&m, crop, 1.0, &mut rng).unwrap();
                assert!(forced);
                assert!((0..3).all(|k| off[k] <= at[k] && at[k] < off[k] + crop[k]));
            }
        }
    }

    #[test]
    fn empty_foreground_falls_back_to_uniform() {
        let m = one_hot(&LabelVolume::new([8, 8, 8], vec![0; 512]).unwrap(), 2).unwrap();
        let (_, forced) = choose_crop(&m, [4, 4, 4], 1.0, &mut RngStream::new(0, "c")).unwrap();
        assert!(!forced);
        assert!(matches!(
            choose_crop(&m, [9, 4, 4], 0.0, &mut RngStream::new(0, "c")),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn unbiased_offsets_are_uniform() {
        let dims = [16, 16, 8];
        let crop = [8, 8, 8];
        let m = single_voxel_mask(dims, [3, 3, 3]);
        let mut rng = RngStream::new(0, "chi");
        let mut counts = [[0usize; 9]; 2];
        for _ in 0..1000 {
            let (off, _) = choose_crop(&m, crop, 0.0, &mut rng).unwrap();
            counts[0][off[0]] += 1;
            counts[1][off[1]] += 1;
        }
        let critical = ChiSquared::new(8.0).unwrap().inverse_cdf(0.99);
        for c in counts {
            let e = 1000.0 / 9.0;
            let chi: f64 = c.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            assert!(chi < critical, "chi2 {chi} >= {critical}");
        }
    }

    fn pools_for(ds: &crate::datagen::TargetDataset) -> (BTreeMap<String, SoftMask>, BTreeMap<String, SoftMask>) {
        let pseudo: BTreeMap<String, SoftMask> = ds
            .unlabeled
            .iter()
            .zip(ds.labeled.iter().cycle())
            .map(|(u, l)| (u.id.clone(), l.mask.clone()))
            .collect();
        (pseudo, BTreeMap::new())
    }

    #[test]
    fn batch_counts_follow_the_plan() {
        let ds = dataset();
        let (pseudo, guides) = pools_for(&ds);
        let pools = Pools {
            labeled: &ds.labeled,
            unlabeled: &ds.unlabeled,
            pseudo: &pseudo,
            guides: &guides,
        };
        let rng = RngStream::new(0, "batch");
        let b = assemble_batch(BatchPlan { b_l: 5, b_u: 0 }, &pools, &small_cfg(), InputNorm::PerVolume, &rng, 0, 0).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (5, 0));
        assert!(b.provenance.items.iter().all(|p| p.labeled));
        let b = assemble_batch(BatchPlan { b_l: 3, b_u: 2 }, &pools, &small_cfg(), InputNorm::PerVolume, &rng, 0, 1).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (3, 2));
        for it in b.labeled.iter().chain(&b.unlabeled) {
            assert_eq!(it.patch.shape(), &[1, 12, 12, 8]);
            assert_eq!(it.target.shape(), &[2, 12, 12, 8]);
        }
    }

    #[test]
    fn missing_pseudo_mask_is_an_error() {
        let ds = dataset();
        let empty = BTreeMap::new();
        let pools = Pools {
            labeled: &ds.labeled,
            unlabeled: &ds.unlabeled,
            pseudo: &empty,
            guides: &empty,
        };
        let r = assemble_batch(BatchPlan { b_l: 0, b_u: 3 }, &pools, &small_cfg(), InputNorm::PerVolume, &RngStream::new(0, "b"), 0, 0);
        assert!(matches!(r, Err(Error::MissingPseudoMask(_))));
    }

    #[test]
    fn deterministic_and_replayable() {
        let ds = dataset();
        let (pseudo, guides) = pools_for(&ds);
        let pools = Pools {
            labeled: &ds.labeled,
            unlabeled: &ds.unlabeled,
            pseudo: &pseudo,
            guides: &guides,
        };
        let cfg = small_cfg();
        let rng = RngStream::new(4, "batch");
        let a = assemble_batch(BatchPlan { b_l: 2, b_u: 3 }, &pools, &cfg, InputNorm::PerSlice, &rng, 3, 7).unwrap();
        let b = assemble_batch(BatchPlan { b_l: 2, b_u: 3 }, &pools, &cfg, InputNorm::PerSlice, &rng, 3, 7).unwrap();
        assert_eq!(a, b);
        for (p, item) in a.provenance.items.iter().zip(a.labeled.iter().chain(&a.unlabeled)) {
            assert_eq!(&replay_item(p, &pools, &cfg, InputNorm::PerSlice).unwrap(), item);
        }
        let s = assemble_slice_batch(4, &ds.labeled, &cfg, &rng, 0, 0).unwrap();
        for (p, item) in s.provenance.items.iter().zip(&s.labeled) {
            assert_eq!(item.patch.shape(), &[1, 12, 12, 1]);
            assert_eq!(&replay_item(p, &pools, &cfg, InputNorm::PerSlice).unwrap(), item);
        }
    }

    #[test]
    fn predicted_draws_match_the_assembled_batches() {
        let ds = dataset();
        let (pseudo, guides) = pools_for(&ds);
        let pools = Pools {
            labeled: &ds.labeled,
            unlabeled: &ds.unlabeled,
            pseudo: &pseudo,
            guides: &guides,
        };
        let rng = RngStream::new(9, "stage2");
        let plan = BatchPlan { b_l: 1, b_u: 2 };
        let mut seen = BTreeSet::new();
        for b in 0..4 {
            let batch = assemble_batch(plan, &pools, &small_cfg(), InputNorm::PerVolume, &rng, 5, b).unwrap();
            for p in batch.provenance.items.iter().filter(|p| !p.labeled) {
                seen.insert(ds.unlabeled.iter().position(|u| u.id == p.volume_id).unwrap());
            }
        }
        assert_eq!(unlabeled_draws(plan, ds.unlabeled.len(), &rng, 5, 4), seen);
        assert!(unlabeled_draws(BatchPlan { b_l: 3, b_u: 0 }, ds.unlabeled.len(), &rng, 5, 4).is_empty());
    }
}

//! Full-volume inference: slice-wise 2D prediction and 3D sliding windows
//! with half-overlap averaging of probabilities.

use crate::batching::{normalize_input, InputNorm};
use crate::error::{Error, Result};
use crate::models::{predict_mask_2d_volume, Model2D, Model3D};
use crate::tensor::{offset4, softmax_channels, Tensor};
use crate::volume::{crop4, SoftMask, Volume};

pub use crate::volume::harden;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Window start offsets per axis; the last one sits flush with the boundary.
    pub offsets: [Vec<usize>; 3],
}

fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut off = 0;
    while off + patch < len {
        v.push(off);
        off += stride;
    }
    v.push(len - patch);
    v.dedup();
    v
}

impl TilingPlan {
    pub fn new(patch: [usize; 3], volume: [usize; 3]) -> Result<Self> {
        if (0..3).any(|k| patch[k] > volume[k] || patch[k] == 0) {
            return Err(Error::CropTooLarge { crop: patch, volume });
        }
        let stride: [usize; 3] = std::array::from_fn(|k| (patch[k] / 2).max(1));
        let offsets = std::array::from_fn(|k| axis_offsets(volume[k], patch[k], stride[k]));
        Ok(Self { patch, stride, offsets })
    }

    pub fn windows(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &a in &self.offsets[0] {
            for &b in &self.offsets[1] {
                for &c in &self.offsets[2] {
                    out.push([a, b, c]);
                }
            }
        }
        out
    }

    /// Number of windows covering each voxel of a `volume`-shaped grid; the
    /// divisor of the overlap average.
    pub fn coverage(&self, volume: [usize; 3]) -> Vec<u32> {
        let mut count = vec![0u32; volume.iter().product()];
        let p = self.patch;
        for off in self.windows() {
            for y in off[0]..off[0] + p[0] {
                for x in off[1]..off[1] + p[1] {
                    for z in off[2]..off[2] + p[2] {
                        count[(y * volume[1] + x) * volume[2] + z] += 1;
                    }
                }
            }
        }
        count
    }
}

/// Averages `softmax(forward_3d(patch))` over every window of the plan. The
/// volume is standardized once, as a whole, before tiling.
pub fn sliding_window_3d(model: &Model3D<f32>, v: &Volume, plan: &TilingPlan) -> Result<SoftMask> {
    let dims = v.dims();
    let x = normalize_input(v, InputNorm::PerVolume);
    let cc = model.classes();
    let mut acc = vec![0.0f64; cc * dims.iter().product::<usize>()];
    let p = plan.patch;
    for off in plan.windows() {
        let probs = softmax_channels(&model.forward_3d(&crop4(&x, off, p)?)?);
        let pd = probs.data();
        for y in 0..p[0] {
            for xx in 0..p[1] {
                for z in 0..p[2] {
                    let (gy, gx, gz) = (off[0] + y, off[1] + xx, off[2] + z);
                    for c in 0..cc {
                        acc[offset4(dims, c, gy, gx, gz)] += pd[offset4(p, c, y, xx, z)] as f64;
                    }
                }
            }
        }
    }
    let count = plan.coverage(dims);
    let n = count.len();
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| (a / count[i % n] as f64) as f32)
        .collect();
    Ok(SoftMask::from_probs(Tensor::from_vec(&[cc, dims[0], dims[1], dims[2]], data)?))
}

/// Slice-wise 2D prediction over a whole volume, with per-slice input
/// normalization, no tiling and no gradients.
pub fn infer_2d_volume(model: &Model2D<f32>, v: &Volume) -> Result<SoftMask> {
    infer_2d_volume_chunked(model, v, None)
}

/// As [`infer_2d_volume`], running at most `chunk` slices per forward pass.
pub fn infer_2d_volume_chunked(model: &Model2D<f32>, v: &Volume, chunk: Option<usize>) -> Result<SoftMask> {
    if v.channels() != model.net.arch.in_channels {
        return Err(Error::ChannelMismatch {
            expected: model.net.arch.in_channels,
            got: v.channels(),
        });
    }
    let x = normalize_input(v, InputNorm::PerSlice);
    if chunk.is_none() {
        return predict_mask_2d_volume(model, &Volume::with_spacing(x, v.spacing())?);
    }
    Ok(SoftMask::from_probs(softmax_channels(&model.slicewise_logits(&x, chunk)?)))
}

/// Full-volume 3D prediction in one pass (`softmax(forward_3d(v))`).
pub fn infer_3d_volume(model: &Model3D<f32>, v: &Volume) -> Result<SoftMask> {
    let x = normalize_input(v, InputNorm::PerVolume);
    Ok(SoftMask::from_probs(softmax_channels(&model.forward_3d(&x)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchSpec;
    use crate::rng::RngStream;
    use crate::volume::{concat_depth, extract_slices, standardize_slices};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut r = RngStream::new(seed, "v");
        let n = dims.iter().product();
        Volume::new(Tensor::from_vec(&[1, dims[0], dims[1], dims[2]], (0..n).map(|_| r.random::<f32>()).collect()).unwrap()).unwrap()
    }

    fn perturbed_3d(id: &str, seed: u64) -> Model3D<f32> {
        let mut m = Model3D::new(ArchSpec::by_id(id, 1, 2, 4).unwrap(), &mut RngStream::new(seed, "init")).unwrap();
        let mut r = RngStream::new(seed, "p");
        for (_, p) in m.net.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn single_window_is_bit_exact() {
        let m = perturbed_3d("unet3d", 1);
        let v = rand_volume(2, [10, 9, 6]);
        let plan = TilingPlan::new([10, 9, 6], v.dims()).unwrap();
        assert_eq!(plan.windows().len(), 1);
        let direct = softmax_channels(&m.forward_3d(&v.standardized()).unwrap());
        assert_eq!(sliding_window_3d(&m, &v, &plan).unwrap().data(), &direct);
        assert_eq!(infer_3d_volume(&m, &v).unwrap().data(), &direct);
    }

    #[test]
    fn pointwise_model_stitches_to_the_direct_output() {
        let m = perturbed_3d("pointwise3d", 3);
        let v = rand_volume(4, [13, 11, 9]);
        let plan = TilingPlan::new([6, 5, 4], v.dims()).unwrap();
        assert!(plan.windows().len() > 8);
        let direct = softmax_channels(&m.forward_3d(&v.standardized()).unwrap());
        let d = sliding_window_3d(&m, &v, &plan).unwrap().data().max_abs_diff(&direct);
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn patch_larger_than_volume_rejected() {
        assert!(matches!(TilingPlan::new([9, 4, 4], [8, 8, 8]), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn known_offsets() {
        let p = TilingPlan::new([24, 24, 16], [32, 32, 32]).unwrap();
        assert_eq!(p.stride, [12, 12, 8]);
        assert_eq!(p.offsets[0], vec![0, 8]);
        assert_eq!(p.offsets[2], vec![0, 8, 16]);
        let p = TilingPlan::new([1, 1, 1], [3, 1, 2]).unwrap();
        assert_eq!(p.offsets, [vec![0, 1, 2], vec![0], vec![0, 1]]);
    }

    proptest! {
        /// Every voxel is covered; voxels at least one stride from both ends
        /// are covered at least twice.
        #[test]
        fn coverage(len in 1usize..40, patch in 1usize..40) {
            prop_assume!(patch <= len);
            let plan = TilingPlan::new([patch, 1, 1], [len, 1, 1]).unwrap();
            let wins = plan.windows();
            let brute: Vec<usize> = (0..len).map(|i| wins.iter().filter(|w| w[0] <= i && i < w[0] + patch).count()).collect();
            prop_assert!(brute.iter().all(|&c| c >= 1));
            if len > patch && patch >= 2 {
                let s = plan.stride[0];
                for (i, &c) in brute.iter().enumerate().take(len - s).skip(s) {
                    prop_assert!(c >= 2, "voxel {} covered {} times", i, c);
                }
            }
        }
    }

    #[test]
    fn accumulated_weight_matches_brute_force() {
        // Zero-initialized head: every window predicts exactly 1/4, so the
        // overlap average must return exactly 1/4 everywhere.
        let m = Model3D::<f32>::new(ArchSpec::by_id("unet3d", 1, 4, 2).unwrap(), &mut RngStream::new(0, "i")).unwrap();
        let v = rand_volume(5, [17, 12, 9]);
        let plan = TilingPlan::new([8, 6, 4], v.dims()).unwrap();
        let out = sliding_window_3d(&m, &v, &plan).unwrap();
        assert!(out.data().data().iter().all(|&p| p == 0.25));
        let per_axis: Vec<Vec<u32>> = (0..3)
            .map(|k| {
                let l = v.dims()[k];
                (0..l).map(|i| plan.offsets[k].iter().filter(|&&o| o <= i && i < o + plan.patch[k]).count() as u32).collect()
            })
            .collect();
        let cov = plan.coverage(v.dims());
        for y in 0..17 {
            for x in 0..12 {
                for z in 0..9 {
                    assert_eq!(cov[(y * 12 + x) * 9 + z], per_axis[0][y] * per_axis[1][x] * per_axis[2][z]);
                }
            }
        }
    }

    #[test]
    fn two_d_inference_matches_the_composition_oracle() {
        let mut m = Model2D::<f32>::new(ArchSpec::by_id("unet2d", 1, 2, 4).unwrap(), &mut RngStream::new(1, "i")).unwrap();
        let mut r = RngStream::new(2, "p");
        for (_, p) in m.net.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let v = rand_volume(6, [9, 8, 5]);
        let got = infer_2d_volume(&m, &v).unwrap();
        let std = Volume::new(standardize_slices(v.data())).unwrap();
        let oracle = concat_depth(
            &extract_slices(&std)
                .iter()
                .map(|s| softmax_channels(&m.forward_slice(s).unwrap().reshape(&[2, 9, 8, 1]).unwrap()).reshape(&[2, 9, 8]).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(got.data(), &oracle);
        assert_eq!(infer_2d_volume_chunked(&m, &v, Some(2)).unwrap().data(), &oracle);
        let n = oracle.len() / 2;
        assert!((0..n).all(|i| (got.data().data()[i] + got.data().data()[n + i] - 1.0).abs() < 1e-5));
    }

    #[test]
    fn harden_ties_go_to_the_lowest_class() {
        let m = SoftMask::new(Tensor::from_vec(&[2, 1, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap()).unwrap();
        assert_eq!(harden(&m).data(), &[0, 1]);
    }
}

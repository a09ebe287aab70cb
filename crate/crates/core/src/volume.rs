//! Volumes, soft masks, slices and the slice/volume conversions shared by
//! the 2D and 3D paths.

use crate::error::{Error, Result};
use crate::tensor::{offset4, Tensor};

/// Simplex tolerance for [`SoftMask`] validation.
pub const SIMPLEX_TOL: f32 = 1e-5;

/// Image volume `[C_i, H, W, D]`.
///
/// Intensities are kept in their `[0, 1]`-normalized form; standardization to
/// zero mean / unit variance happens at model input (see [`Volume::standardized`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Tensor<f32>,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        Self::with_spacing(data, [1.0; 3])
    }

    pub fn with_spacing(data: Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        check_rank4(&data)?;
        if !data.all_finite() {
            return Err(Error::InvalidTensor("volume contains non-finite values".into()));
        }
        Ok(Self { data, spacing })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.spatial()
    }

    /// Per-channel zero-mean, unit-variance copy used as network input.
    pub fn standardized(&self) -> Tensor<f32> {
        let c = self.channels();
        let vox = self.data.len() / c;
        let mut out = self.data.clone();
        for ch in out.data_mut().chunks_mut(vox) {
            let n = vox as f64;
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-6);
            for x in ch.iter_mut() {
                *x = ((*x as f64 - mean) / std) as f32;
            }
        }
        out
    }
}

/// Per-voxel class-probability field `[C_c, H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    data: Tensor<f32>,
}

impl SoftMask {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        check_rank4(&data)?;
        let c = data.shape()[0];
        let vox = data.len() / c;
        let x = data.data();
        for v in 0..vox {
            let mut s = 0.0f32;
            for k in 0..c {
                let p = x[k * vox + v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidTensor(format!(
                        "probability {p} outside [0,1] at voxel {v}"
                    )));
                }
                s += p;
            }
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidTensor(format!(
                    "class probabilities sum to {s} at voxel {v}"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wraps probabilities produced by a softmax or a convex combination of
    /// valid masks, without re-validating.
    pub(crate) fn from_probs(data: Tensor<f32>) -> Self {
        debug_assert_eq!(data.rank(), 4);
        Self { data }
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.spatial()
    }

    /// Probability of class `c` at every voxel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let vox = self.data.len() / self.classes();
        &self.data.data()[c * vox..(c + 1) * vox]
    }
}

/// One depth slice `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    data: Tensor<f32>,
}

impl Slice {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "slice must be rank-3 with non-zero dims, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::InvalidTensor("slice contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    /// The slice as a depth-1 rank-4 tensor.
    pub fn as_volume_tensor(&self) -> Tensor<f32> {
        let s = self.data.shape();
        self.data
            .clone()
            .reshape(&[s[0], s[1], s[2], 1])
            .expect("same element count")
    }
}

/// Integer class labels `[H, W, D]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "label volume dims {dims:?} do not match {} labels",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u16 {
        self.data[(h * self.dims[1] + w) * self.dims[2] + d]
    }

    /// Binary mask of voxels labeled `class`.
    pub fn binary(&self, class: u16) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }
}

fn check_rank4<T: Copy>(t: &Tensor<T>) -> Result<()> {
    if t.rank() != 4 || t.shape().contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "expected rank-4 [C,H,W,D] with all dims >= 1, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Splits a volume into its `D` depth slices, in ascending depth order.
pub fn extract_slices(v: &Volume) -> Vec<Slice> {
    split_depth(v.data())
        .into_iter()
        .map(|data| Slice { data })
        .collect()
}

/// Generic form of [`extract_slices`] over any rank-4 tensor.
pub fn split_depth<T: Copy + Default>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    let [c, h, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let dims = [h, w, d];
    (0..d)
        .map(|k| {
            let mut out = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.push(t.data()[offset4(dims, ch, y, x, k)]);
                    }
                }
            }
            Tensor::from_vec(&[c, h, w], out).expect("slice size")
        })
        .collect()
}

/// Stacks rank-3 `[C, H, W]` slices along a new trailing depth axis.
pub fn concat_depth<T: Copy + Default>(slices: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidTensor("concat_depth of zero slices".into()))?;
    if first.rank() != 3 {
        return Err(Error::InvalidTensor(format!(
            "slices must be rank-3, got {:?}",
            first.shape()
        )));
    }
    let s = first.shape().to_vec();
    for sl in slices {
        if sl.shape() != s.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: s.clone(),
                got: sl.shape().to_vec(),
            });
        }
    }
    let d = slices.len();
    let dims = [s[1], s[2], d];
    let mut out = vec![T::default(); s[0] * s[1] * s[2] * d];
    for (k, sl) in slices.iter().enumerate() {
        let mut i = 0;
        for ch in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    out[offset4(dims, ch, y, x, k)] = sl.data()[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], s[2], d], out)
}

/// Concatenates rank-4 tensors along depth.
pub fn stack_depth<T: Copy + Default>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidTensor("stack_depth of zero tensors".into()))?;
    check_rank4(first)?;
    let [c, h, w] = [first.shape()[0], first.shape()[1], first.shape()[2]];
    for p in parts {
        if p.rank() != 4 || p.shape()[..3] != first.shape()[..3] {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
    }
    let d: usize = parts.iter().map(|p| p.shape()[3]).sum();
    let mut out = Vec::with_capacity(c * h * w * d);
    for row in 0..c * h * w {
        for p in parts {
            let pd = p.shape()[3];
            out.extend_from_slice(&p.data()[row * pd..(row + 1) * pd]);
        }
    }
    Tensor::from_vec(&[c, h, w, d], out)
}

/// Splits a rank-4 tensor along depth into consecutive blocks of the given sizes.
pub fn unstack_depth<T: Copy + Default>(t: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    let [c, h, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    debug_assert_eq!(sizes.iter().sum::<usize>(), d);
    let mut outs: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(c * h * w * s)).collect();
    for row in 0..c * h * w {
        let mut start = row * d;
        for (o, &s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&t.data()[start..start + s]);
            start += s;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(o, &s)| Tensor::from_vec(&[c, h, w, s], o).expect("block size"))
        .collect()
}

/// Window `[offset, offset + shape)` of a rank-4 tensor, all channels.
pub fn crop4<T: Copy + Default>(t: &Tensor<T>, offset: [usize; 3], shape: [usize; 3]) -> Result<Tensor<T>> {
    let dims = t.spatial();
    if (0..3).any(|k| offset[k] + shape[k] > dims[k]) {
        return Err(Error::CropTooLarge { crop: shape, volume: dims });
    }
    let c = t.shape()[0];
    let mut out = Vec::with_capacity(c * shape.iter().product::<usize>());
    for ch in 0..c {
        for y in 0..shape[0] {
            for x in 0..shape[1] {
                let base = offset4(dims, ch, offset[0] + y, offset[1] + x, offset[2]);
                out.extend_from_slice(&t.data()[base..base + shape[2]]);
            }
        }
    }
    Tensor::from_vec(&[c, shape[0], shape[1], shape[2]], out)
}

/// Per-channel, per-depth-slice standardization: each `[H, W]` plane gets
/// zero mean and unit variance. This is the 2D model's input normalization.
pub fn standardize_slices(t: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let dims = [h, w, d];
    let mut out = t.clone();
    let n = (h * w) as f64;
    for ch in 0..c {
        for k in 0..d {
            let idx = |y: usize, x: usize| offset4(dims, ch, y, x, k);
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sum += t.data()[idx(y, x)] as f64;
                }
            }
            let mean = sum / n;
            let mut var = 0.0;
            for y in 0..h {
                for x in 0..w {
                    var += (t.data()[idx(y, x)] as f64 - mean).powi(2);
                }
            }
            let std = (var / n).sqrt().max(1e-6);
            for y in 0..h {
                for x in 0..w {
                    let i = idx(y, x);
                    out.data_mut()[i] = ((t.data()[i] as f64 - mean) / std) as f32;
                }
            }
        }
    }
    out
}

/// One-hot encodes integer labels into a [`SoftMask`].
pub fn one_hot(labels: &LabelVolume, classes: usize) -> Result<SoftMask> {
    let vox = labels.data.len();
    let mut out = vec![0.0f32; classes * vox];
    for (v, &l) in labels.data.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        out[l * vox + v] = 1.0;
    }
    let [h, w, d] = labels.dims;
    Ok(SoftMask {
        data: Tensor::from_vec(&[classes, h, w, d], out)?,
    })
}

/// Per-voxel argmax; ties resolve to the lowest class index.
pub fn harden(mask: &SoftMask) -> LabelVolume {
    let c = mask.classes();
    let vox = mask.data.len() / c;
    let x = mask.data.data();
    let data = (0..vox)
        .map(|v| {
            let mut best = 0usize;
            for k in 1..c {
                if x[k * vox + v] > x[best * vox + v] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    LabelVolume {
        dims: mask.dims(),
        data,
    }
}

//! Segmentation model interfaces and the reference networks.
//!
//! The co-training engine only talks to [`Model2D`] and [`Model3D`]; which
//! network sits behind them is decided by an [`ArchSpec`] looked up by id.
//!
//! 2D networks use `(3, 3, 1)` kernels and `(2, 2, 1)` pooling, so a 2D model
//! applied to a `[C, H, W, D]` tensor processes its `D` slices independently
//! with shared weights: depth doubles as the slice batch axis.

mod arch;
mod params;
mod pretrain;

pub use arch::{ArchKind, ArchSpec, LayerDecl};
pub use params::{Group, Param, ParamSet, Role};
pub use pretrain::{pretrain_source, PretrainConfig, PretrainOutcome};

use num_traits::Float;

use crate::adapt::FineTuneStrategy;
use crate::autograd::{Grads, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{softmax_channels, Tensor};
use crate::volume::{Slice, SoftMask, Volume};

/// An architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: ArchSpec,
    pub params: ParamSet<T>,
}

impl<T: Float> Network<T> {
    pub fn init(arch: ArchSpec, rng: &mut RngStream) -> Self {
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Records the forward pass of `x` (`[C_i, H, W, D]`) and returns the logits node.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        self.arch.forward(&self.params, g, x)
    }

    /// Gradient-free forward pass.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::InvalidTensor(format!(
                "network input must be rank-4, got {:?}",
                x.shape()
            )));
        }
        if x.channels() != self.arch.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.arch.in_channels,
                got: x.channels(),
            });
        }
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.forward_graph(&mut g, xi);
        Ok(g.into_value(out))
    }

    /// Forward pass on the tape, loss via `loss` (value and gradient in the
    /// logits), then gradients of every trainable parameter.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<T>,
        loss: impl FnOnce(&Tensor<T>) -> Result<(T, Tensor<T>)>,
    ) -> Result<(T, Grads<T>)> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.arch.in_channels,
                got: x.channels(),
            });
        }
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.forward_graph(&mut g, xi);
        let (value, seed) = loss(g.value(out))?;
        Ok((value, g.backward(&[(out, &seed)])))
    }
}

/// The 2D slice model `f(.; theta_nat)` with its fine-tuning strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Model2D<T = f32> {
    pub net: Network<T>,
    pub strategy: FineTuneStrategy,
}

/// The 3D volume model `g(.; theta_med)`, always trained whole.
#[derive(Clone, Debug, PartialEq)]
pub struct Model3D<T = f32> {
    pub net: Network<T>,
}

impl<T: Float> Model2D<T> {
    pub fn new(arch: ArchSpec, rng: &mut RngStream) -> Result<Self> {
        if !arch.kind.is_planar() {
            return Err(Error::Config(format!("`{}` is not a 2D architecture", arch.kind.id())));
        }
        Ok(Self {
            net: Network::init(arch, rng),
            strategy: FineTuneStrategy::default(),
        })
    }

    pub fn classes(&self) -> usize {
        self.net.arch.classes
    }

    /// Logits `[C_c, H, W]` for one slice.
    pub fn forward_2d(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.rank() != 3 {
            return Err(Error::InvalidTensor(format!("slice must be rank-3, got {:?}", s.shape())));
        }
        let sh = s.shape();
        let x = s.clone().reshape(&[sh[0], sh[1], sh[2], 1])?;
        let out = self.net.logits(&x)?;
        out.reshape(&[self.classes(), sh[1], sh[2]])
    }

    /// Slice-wise logits for a `[C_i, H, W, D]` tensor, optionally in depth
    /// chunks of `chunk` slices to bound peak memory.
    pub fn slicewise_logits(&self, x: &Tensor<T>, chunk: Option<usize>) -> Result<Tensor<T>>
    where
        T: Default,
    {
        let d = x.shape()[3];
        match chunk {
            Some(c) if c > 0 && c < d => {
                let parts = crate::volume::split_depth(x);
                let mut logits = Vec::with_capacity(d);
                for group in parts.chunks(c) {
                    let block = stack_depth(group)?;
                    let out = self.net.logits(&block)?;
                    logits.extend(crate::volume::split_depth(&out));
                }
                crate::volume::concat_depth(&logits)
            }
            _ => self.net.logits(x),
        }
    }
}

impl Model2D<f32> {
    pub fn forward_slice(&self, s: &Slice) -> Result<Tensor<f32>> {
        self.forward_2d(s.data())
    }
}

impl<T: Float> Model3D<T> {
    pub fn new(arch: ArchSpec, rng: &mut RngStream) -> Result<Self> {
        if arch.kind.is_planar() {
            return Err(Error::Config(format!("`{}` is not a 3D architecture", arch.kind.id())));
        }
        Ok(Self {
            net: Network::init(arch, rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.net.arch.classes
    }

    /// Logits `[C_c, H, W, D]`.
    pub fn forward_3d(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.logits(v)
    }
}

impl Model3D<f32> {
    pub fn forward_volume(&self, v: &Volume) -> Result<Tensor<f32>> {
        self.forward_3d(v.data())
    }
}

fn stack_depth<T: Float + Default>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    crate::volume::concat_depth(parts)
}

/// Softmax of the slice-wise 2D prediction over a volume, detached from any
/// graph: `concat(softmax(f(S^1)), ..., softmax(f(S^D)))`. The input is used
/// as given; callers standardize.
pub fn predict_mask_2d_volume(model: &Model2D<f32>, v: &Volume) -> Result<SoftMask> {
    let logits = model.slicewise_logits(v.data(), None)?;
    Ok(SoftMask::from_probs(softmax_channels(&logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{concat_depth, extract_slices};
    use rand::Rng;

    fn rand_volume(seed: u64, shape: [usize; 4]) -> Volume {
        let mut r = RngStream::new(seed, "t");
        let n = shape.iter().product();
        Volume::new(Tensor::from_vec(&shape, (0..n).map(|_| r.random::<f32>()).collect()).unwrap()).unwrap()
    }

    #[test]
    fn zero_init_head_gives_uniform_softmax() {
        for id in ["unet2d", "resunet2d"] {
            let m = Model2D::<f32>::new(ArchSpec::by_id(id, 1, 2, 4).unwrap(), &mut RngStream::new(0, "init")).unwrap();
            let out = m.forward_2d(&Tensor::zeros(&[1, 8, 8])).unwrap();
            assert_eq!(out.shape(), &[2, 8, 8]);
            assert!(out.data().iter().all(|&x| x == 0.0));
        }
        for id in ["unet3d", "resunet3d"] {
            let m = Model3D::<f32>::new(ArchSpec::by_id(id, 1, 3, 4).unwrap(), &mut RngStream::new(0, "init")).unwrap();
            let out = m.forward_3d(&Tensor::zeros(&[1, 8, 6, 4])).unwrap();
            assert_eq!(out.shape(), &[3, 8, 6, 4]);
            let p = softmax_channels(&out);
            assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-7));
        }
    }

    #[test]
    fn shape_contract_on_odd_sizes() {
        let mut r = RngStream::new(5, "init");
        let m = Model3D::<f32>::new(ArchSpec::by_id("unet3d", 1, 2, 4).unwrap(), &mut r).unwrap();
        let v = rand_volume(1, [1, 7, 5, 3]);
        assert_eq!(m.forward_volume(&v).unwrap().shape(), &[2, 7, 5, 3]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let m = Model2D::<f32>::new(ArchSpec::by_id("unet2d", 1, 2, 4).unwrap(), &mut RngStream::new(0, "init")).unwrap();
        assert!(matches!(
            m.forward_2d(&Tensor::zeros(&[2, 8, 8])),
            Err(Error::ChannelMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn wrong_dimensionality_rejected() {
        let a2 = ArchSpec::by_id("unet2d", 1, 2, 4).unwrap();
        assert!(Model3D::<f32>::new(a2, &mut RngStream::new(0, "i")).is_err());
    }

    fn randomized(mut m: Model2D<f32>, seed: u64) -> Model2D<f32> {
        let mut r = RngStream::new(seed, "perturb");
        for (_, p) in m.net.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn volume_prediction_equals_slice_loop_bit_exact() {
        for id in ["unet2d", "resunet2d"] {
            let m = Model2D::<f32>::new(ArchSpec::by_id(id, 1, 2, 4).unwrap(), &mut RngStream::new(1, "init")).unwrap();
            let m = randomized(m, 2);
            let v = rand_volume(3, [1, 10, 8, 6]);
            let direct = predict_mask_2d_volume(&m, &v).unwrap();
            let per_slice: Vec<Tensor<f32>> = extract_slices(&v)
                .iter()
                .map(|s| softmax_channels(&m.forward_slice(s).unwrap().reshape(&[2, 10, 8, 1]).unwrap()).reshape(&[2, 10, 8]).unwrap())
                .collect();
            let oracle = concat_depth(&per_slice).unwrap();
            assert_eq!(direct.data(), &oracle, "{id}");
            let chunked = m.slicewise_logits(v.data(), Some(4)).unwrap();
            assert_eq!(softmax_channels(&chunked), oracle);
        }
    }

    #[test]
    fn single_slice_volume_equals_forward_2d() {
        let m = randomized(
            Model2D::<f32>::new(ArchSpec::by_id("unet2d", 1, 2, 4).unwrap(), &mut RngStream::new(1, "init")).unwrap(),
            9,
        );
        let v = rand_volume(4, [1, 8, 8, 1]);
        let s = &extract_slices(&v)[0];
        let want = softmax_channels(&m.forward_slice(s).unwrap().reshape(&[2, 8, 8, 1]).unwrap());
        assert_eq!(predict_mask_2d_volume(&m, &v).unwrap().data(), &want);
    }

    /// Gradient of the mean logit against central differences, every arch.
    #[test]
    fn network_gradients_match_finite_differences() {
        for kind in ArchKind::ALL {
            let width = if kind.is_planar() { 2 } else { 1 };
            let spec = ArchSpec::by_id(kind.id(), 1, 2, width).unwrap();
            let mut net: Network<f64> = Network::init(spec, &mut RngStream::new(7, "init"));
            let mut r = RngStream::new(8, "p");
            for (_, p) in net.params.iter_mut() {
                for v in p.value.data_mut() {
                    *v += r.random_range(-0.3..0.3);
                }
            }
            assert!(net.params.numel() <= 1000, "{} has {}", kind.id(), net.params.numel());
            let x = Tensor::from_vec(&[1, 5, 4, 3], (0..60).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let mean = |n: &Network<f64>| {
                let l = n.logits(&x).unwrap();
                l.sum() / l.len() as f64
            };
            let (_, grads) = net
                .loss_and_grads(&x, |z| {
                    let k = 1.0 / z.len() as f64;
                    Ok((z.sum() * k, Tensor::full(z.shape(), k)))
                })
                .unwrap();
            let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
            for name in names {
                let g = &grads[&name];
                let fd: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let h = 1e-6;
                        let mut a = net.clone();
                        a.params.get_mut(&name).unwrap().value.data_mut()[i] += h;
                        let mut b = net.clone();
                        b.params.get_mut(&name).unwrap().value.data_mut()[i] -= h;
                        (mean(&a) - mean(&b)) / (2.0 * h)
                    })
                    .collect();
                let num: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                assert!(num / den < 1e-4, "{} {name}: rel err {}", kind.id(), num / den);
            }
        }
    }
}

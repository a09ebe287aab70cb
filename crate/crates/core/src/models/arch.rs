use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Group, Param, ParamSet, Role};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Two-conv blocks per level, skip connections.
    Unet2d,
    /// Residual encoder blocks with an appended light decoder.
    Resunet2d,
    Unet3d,
    Resunet3d,
    /// Stack of 1x1 layers; receptive field of a single voxel.
    Pointwise2d,
    Pointwise3d,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::Unet2d,
        ArchKind::Resunet2d,
        ArchKind::Unet3d,
        ArchKind::Resunet3d,
        ArchKind::Pointwise2d,
        ArchKind::Pointwise3d,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ArchKind::Unet2d => "unet2d",
            ArchKind::Resunet2d => "resunet2d",
            ArchKind::Unet3d => "unet3d",
            ArchKind::Resunet3d => "resunet3d",
            ArchKind::Pointwise2d => "pointwise2d",
            ArchKind::Pointwise3d => "pointwise3d",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{id}`")))
    }

    pub fn is_planar(self) -> bool {
        matches!(self, ArchKind::Unet2d | ArchKind::Resunet2d | ArchKind::Pointwise2d)
    }

    fn kernel(self) -> [usize; 3] {
        match self {
            ArchKind::Pointwise2d | ArchKind::Pointwise3d => [1, 1, 1],
            k if k.is_planar() => [3, 3, 1],
            _ => [3, 3, 3],
        }
    }

    fn pool(self) -> [usize; 3] {
        if self.is_planar() {
            [2, 2, 1]
        } else {
            [2, 2, 2]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub classes: usize,
    /// Channels at the first level (hidden width for pointwise nets).
    pub width: usize,
    /// Resolution levels (hidden layers for pointwise nets).
    pub levels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDecl {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub group: Group,
    pub head: bool,
}

impl ArchSpec {
    pub fn by_id(id: &str, in_channels: usize, classes: usize, width: usize) -> Result<Self> {
        let kind = ArchKind::from_id(id)?;
        let levels = match kind {
            ArchKind::Pointwise2d | ArchKind::Pointwise3d => 1,
            _ => 2,
        };
        Ok(Self {
            kind,
            in_channels,
            classes,
            width,
            levels,
        })
    }

    fn level_width(&self, l: usize) -> usize {
        self.width << l
    }

    pub fn layers(&self) -> Vec<LayerDecl> {
        let k = self.kind.kernel();
        let mut v = Vec::new();
        let mut add = |name: String, cin, cout, kernel, group| {
            v.push(LayerDecl {
                name,
                cin,
                cout,
                kernel,
                group,
                head: false,
            })
        };
        match self.kind {
            ArchKind::Unet2d | ArchKind::Unet3d => {
                for l in 0..self.levels {
                    let cin = if l == 0 { self.in_channels } else { self.level_width(l - 1) };
                    let w = self.level_width(l);
                    add(format!("enc{l}.c1"), cin, w, k, Group::Encoder);
                    add(format!("enc{l}.c2"), w, w, k, Group::Encoder);
                }
                for l in (0..self.levels.saturating_sub(1)).rev() {
                    let w = self.level_width(l);
                    add(format!("dec{l}.c1"), self.level_width(l + 1) + w, w, k, Group::Decoder);
                    add(format!("dec{l}.c2"), w, w, k, Group::Decoder);
                }
            }
            ArchKind::Resunet2d | ArchKind::Resunet3d => {
                add("stem".into(), self.in_channels, self.width, k, Group::Encoder);
                for l in 0..self.levels {
                    let w = self.level_width(l);
                    if l > 0 {
                        add(format!("down{l}"), self.level_width(l - 1), w, k, Group::Encoder);
                    }
                    add(format!("enc{l}.c1"), w, w, k, Group::Encoder);
                    add(format!("enc{l}.c2"), w, w, k, Group::Encoder);
                }
                for l in (0..self.levels.saturating_sub(1)).rev() {
                    let w = self.level_width(l);
                    add(format!("dec{l}.c1"), self.level_width(l + 1) + w, w, k, Group::Decoder);
                }
            }
            ArchKind::Pointwise2d | ArchKind::Pointwise3d => {
                for l in 0..self.levels {
                    let cin = if l == 0 { self.in_channels } else { self.width };
                    add(format!("l{l}"), cin, self.width, k, Group::Encoder);
                }
            }
        }
        v.push(LayerDecl {
            name: "head".into(),
            cin: self.width,
            cout: self.classes,
            kernel: [1, 1, 1],
            group: Group::Decoder,
            head: true,
        });
        v
    }

    /// Fan-in scaled uniform weights, zero biases, zero head.
    pub fn init_params<T: Float>(&self, rng: &mut RngStream) -> ParamSet<T> {
        let mut ps = ParamSet::default();
        for layer in self.layers() {
            let kv: usize = layer.kernel.iter().product();
            let fan_in = layer.cin * kv;
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = layer.cout * fan_in;
            let w: Vec<T> = if layer.head {
                vec![T::zero(); n]
            } else {
                (0..n)
                    .map(|_| T::from(rng.random_range(-bound..bound)).unwrap())
                    .collect()
            };
            ps.insert(
                format!("{}.w", layer.name),
                Param {
                    value: Tensor::from_vec(&[layer.cout, fan_in], w).unwrap(),
                    group: layer.group,
                    role: Role::Weight {
                        kernel: layer.kernel,
                        head: layer.head,
                    },
                    trainable: true,
                },
            );
            ps.insert(
                format!("{}.b", layer.name),
                Param {
                    value: Tensor::zeros(&[layer.cout]),
                    group: layer.group,
                    role: Role::Bias,
                    trainable: true,
                },
            );
        }
        ps
    }

    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let k = self.kind.kernel();
        let pool = self.kind.pool();
        let conv = |g: &mut Graph<T>, h: NodeId, name: &str, kernel: [usize; 3]| {
            let w = ps.weight_node(g, &format!("{name}.w"));
            let b = ps.node(g, &format!("{name}.b"));
            let c = g.conv(h, w, kernel);
            g.bias(c, b)
        };
        let conv_relu = |g: &mut Graph<T>, h: NodeId, name: &str| {
            let c = conv(g, h, name, k);
            g.relu(c)
        };
        let h = match self.kind {
            ArchKind::Unet2d | ArchKind::Unet3d => {
                let mut skips = Vec::with_capacity(self.levels);
                let mut h = x;
                for l in 0..self.levels {
                    if l > 0 {
                        h = g.avg_pool(h, pool);
                    }
                    h = conv_relu(g, h, &format!("enc{l}.c1"));
                    h = conv_relu(g, h, &format!("enc{l}.c2"));
                    skips.push(h);
                }
                for l in (0..self.levels.saturating_sub(1)).rev() {
                    let up = g.upsample(h, g.value(skips[l]).spatial());
                    let cat = g.concat(up, skips[l]);
                    h = conv_relu(g, cat, &format!("dec{l}.c1"));
                    h = conv_relu(g, h, &format!("dec{l}.c2"));
                }
                h
            }
            ArchKind::Resunet2d | ArchKind::Resunet3d => {
                let mut skips = Vec::with_capacity(self.levels);
                let mut h = conv_relu(g, x, "stem");
                for l in 0..self.levels {
                    if l > 0 {
                        h = g.avg_pool(h, pool);
                        h = conv_relu(g, h, &format!("down{l}"));
                    }
                    let r = conv_relu(g, h, &format!("enc{l}.c1"));
                    let r = conv(g, r, &format!("enc{l}.c2"), k);
                    let s = g.add(h, r);
                    h = g.relu(s);
                    skips.push(h);
                }
                for l in (0..self.levels.saturating_sub(1)).rev() {
                    let up = g.upsample(h, g.value(skips[l]).spatial());
                    let cat = g.concat(up, skips[l]);
                    h = conv_relu(g, cat, &format!("dec{l}.c1"));
                }
                h
            }
            ArchKind::Pointwise2d | ArchKind::Pointwise3d => {
                let mut h = x;
                for l in 0..self.levels {
                    h = conv_relu(g, h, &format!("l{l}"));
                }
                h
            }
        };
        conv(g, h, "head", [1, 1, 1])
    }
}

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::adapt::LoraAdapter;
use crate::autograd::{Graph, NodeId};
use crate::tensor::Tensor;

/// Which half of an encoder–decoder a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Convolution weight `[C_out, C_in * kernel volume]`.
    Weight { kernel: [usize; 3], head: bool },
    Bias,
    LoraA,
    LoraB,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub group: Group,
    pub role: Role,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Param<T>>,
    /// LoRA adapters keyed by the name of the weight they wrap.
    adapters: BTreeMap<String, LoraAdapter>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            adapters: BTreeMap::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn insert(&mut self, name: impl Into<String>, p: Param<T>) {
        self.params.insert(name.into(), p);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub fn set_adapter(&mut self, weight: &str, adapter: LoraAdapter) {
        self.adapters.insert(weight.to_string(), adapter);
    }

    pub fn remove_adapter(&mut self, weight: &str) -> Option<LoraAdapter> {
        self.adapters.remove(weight)
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            group: p.group,
                            role: p.role,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            adapters: self.adapters.clone(),
        }
    }

    /// Records a parameter leaf on the graph.
    pub fn node(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        g.param(name, p.value.clone(), p.trainable)
    }

    /// The effective weight of a layer: `W + (alpha / r) * B * A` when
    /// adapted, `W` otherwise.
    pub fn weight_node(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        let w = self.node(g, name);
        match self.adapters.get(name) {
            None => w,
            Some(ad) => {
                let a = self.node(g, &LoraAdapter::a_name(name));
                let b = self.node(g, &LoraAdapter::b_name(name));
                let ba = g.matmul(b, a);
                let ba = g.scale(ba, ad.scale());
                g.add(w, ba)
            }
        }
    }
}

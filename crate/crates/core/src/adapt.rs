//! Fine-tuning strategies for the 2D model: whole network, decoder only, or
//! low-rank adaptation of the weight matrices.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::matmul;
use crate::error::{Error, Result};
use crate::models::{Group, Model2D, Param, Role};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTuneKind {
    Whole,
    DecoderOnly,
    Lora,
}

impl std::str::FromStr for FineTuneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(FineTuneKind::Whole),
            "decoder-only" => Ok(FineTuneKind::DecoderOnly),
            "lora" => Ok(FineTuneKind::Lora),
            o => Err(Error::Config(format!("unknown fine-tune kind `{o}`"))),
        }
    }
}

/// Which weight matrices receive LoRA adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelector {
    /// Every weight except the class head, which stays fully trainable like a
    /// replaced last layer.
    AllExceptHead,
    All,
    Group(Group),
    /// Layer names, e.g. `enc0.c1`.
    Names(Vec<String>),
}

impl LayerSelector {
    fn selects(&self, layer: &str, group: Group, head: bool) -> bool {
        match self {
            LayerSelector::AllExceptHead => !head,
            LayerSelector::All => true,
            LayerSelector::Group(g) => *g == group,
            LayerSelector::Names(v) => v.iter().any(|n| n == layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneStrategy {
    pub kind: FineTuneKind,
    pub rank: usize,
    pub alpha: f64,
    pub selector: LayerSelector,
    /// Biases stay trainable under LoRA.
    pub train_biases: bool,
}

impl Default for FineTuneStrategy {
    fn default() -> Self {
        Self {
            kind: FineTuneKind::Whole,
            rank: 4,
            alpha: 8.0,
            selector: LayerSelector::AllExceptHead,
            train_biases: true,
        }
    }
}

impl FineTuneStrategy {
    pub fn of_kind(kind: FineTuneKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Low-rank update `(alpha / r) * B * A` for one weight `W [d_out, d_in]`,
/// with `A [r, d_in]` and `B [d_out, r]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(weight: &str) -> String {
        format!("{weight}.lora_a")
    }

    pub fn b_name(weight: &str) -> String {
        format!("{weight}.lora_b")
    }
}

fn layer_of(weight_name: &str) -> &str {
    weight_name.strip_suffix(".w").unwrap_or(weight_name)
}

/// Applies a strategy to a freshly built or pretrained 2D model. Outputs are
/// unchanged at the moment of application.
pub fn apply_strategy<T: Float>(
    mut model: Model2D<T>,
    strategy: &FineTuneStrategy,
    rng: &mut RngStream,
) -> Result<Model2D<T>> {
    let ps = &mut model.net.params;
    match strategy.kind {
        FineTuneKind::Whole => {
            for (_, p) in ps.iter_mut() {
                p.trainable = true;
            }
        }
        FineTuneKind::DecoderOnly => {
            for (_, p) in ps.iter_mut() {
                p.trainable = p.group == Group::Decoder;
            }
        }
        FineTuneKind::Lora => {
            if strategy.rank == 0 {
                return Err(Error::Invalid("LoRA rank must be >= 1".into()));
            }
            let selected: Vec<(String, Group, usize, usize)> = ps
                .iter()
                .filter_map(|(name, p)| match p.role {
                    Role::Weight { head, .. }
                        if strategy.selector.selects(layer_of(name), p.group, head) =>
                    {
                        Some((name.clone(), p.group, p.value.shape()[0], p.value.shape()[1]))
                    }
                    _ => None,
                })
                .collect();
            if selected.is_empty() {
                return Err(Error::EmptySelector);
            }
            for (name, _, d_out, d_in) in &selected {
                let limit = (*d_in).min(*d_out);
                if strategy.rank > limit {
                    return Err(Error::RankTooLarge {
                        layer: name.clone(),
                        rank: strategy.rank,
                        limit,
                    });
                }
            }
            for (_, p) in ps.iter_mut() {
                p.trainable = match p.role {
                    Role::Bias => strategy.train_biases,
                    // A head that is not adapted is treated as a replaced last layer.
                    Role::Weight { head, .. } => head && !strategy.selector.selects("head", p.group, true),
                    Role::LoraA | Role::LoraB => true,
                };
            }
            let r = strategy.rank;
            for (name, group, d_out, d_in) in selected {
                let bound = 1.0 / (d_in as f64).sqrt();
                let a: Vec<T> = (0..r * d_in)
                    .map(|_| T::from(rng.random_range(-bound..bound)).unwrap())
                    .collect();
                ps.insert(
                    LoraAdapter::a_name(&name),
                    Param {
                        value: Tensor::from_vec(&[r, d_in], a)?,
                        group,
                        role: Role::LoraA,
                        trainable: true,
                    },
                );
                ps.insert(
                    LoraAdapter::b_name(&name),
                    Param {
                        value: Tensor::zeros(&[d_out, r]),
                        group,
                        role: Role::LoraB,
                        trainable: true,
                    },
                );
                ps.set_adapter(
                    &name,
                    LoraAdapter {
                        rank: r,
                        alpha: strategy.alpha,
                    },
                );
            }
        }
    }
    model.strategy = strategy.clone();
    Ok(model)
}

/// Names of the parameters an optimizer may update.
pub fn trainable_parameters<T: Float>(model: &Model2D<T>) -> Vec<String> {
    model.net.params.trainable_names()
}

/// Folds every adapter into its base weight, producing a plain model.
pub fn merge_lora<T: Float>(model: &Model2D<T>) -> Model2D<T> {
    let mut out = model.clone();
    let ps = &mut out.net.params;
    let adapted: Vec<String> = ps.adapters().keys().cloned().collect();
    for w in adapted {
        let ad = ps.remove_adapter(&w).unwrap();
        let a = ps.get(&LoraAdapter::a_name(&w)).unwrap().value.clone();
        let b = ps.get(&LoraAdapter::b_name(&w)).unwrap().value.clone();
        let delta = matmul(&b, &a).scaled(T::from(ad.scale()).unwrap());
        let p = ps.get_mut(&w).unwrap();
        p.value.add_assign(&delta);
        ps.remove(&LoraAdapter::a_name(&w));
        ps.remove(&LoraAdapter::b_name(&w));
    }
    for (_, p) in ps.iter_mut() {
        p.trainable = true;
    }
    out.strategy = FineTuneStrategy::default();
    out
}

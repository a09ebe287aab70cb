//! Training objectives. Every loss returns its value together with the
//! analytic gradient, so the trainer can seed the autograd tape directly.
//!
//! Tensors are channel-first; all trailing axes are treated as voxels.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_channels, softmax_channels, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const KL_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_dice: f64,
    pub w_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_dice: 1.0,
            w_kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("w_ce", self.w_ce), ("w_dice", self.w_dice), ("w_kl", self.w_kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{k} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(teacher || student)`: the pseudo-mask is the target distribution.
    TeacherStudent,
    /// `KL(student || teacher)`.
    StudentTeacher,
}

fn check(a: &Tensor<impl Copy>, b: &Tensor<impl Copy>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() < 1 {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn c<T: Float>(x: f64) -> T {
    T::from(x).unwrap()
}

fn voxels<T: Copy>(t: &Tensor<T>) -> usize {
    t.len() / t.shape()[0]
}

/// Backpropagates `g = dL/dp` through `p = softmax(z)`: `dz = p * (g - sum_c p g)`.
pub fn softmax_backward<T: Float>(p: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let cc = p.shape()[0];
    let n = voxels(p);
    let (pd, gd) = (p.data(), g.data());
    let mut out = vec![T::zero(); pd.len()];
    for v in 0..n {
        let mut dot = T::zero();
        for k in 0..cc {
            dot = dot + pd[k * n + v] * gd[k * n + v];
        }
        for k in 0..cc {
            out[k * n + v] = pd[k * n + v] * (gd[k * n + v] - dot);
        }
    }
    Tensor::from_vec(p.shape(), out).unwrap()
}

/// Mean over voxels of `-sum_c t_c log softmax(z)_c`, with its gradient in `z`.
pub fn ce_loss<T: Float>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check(logits, target)?;
    let cc = logits.shape()[0];
    let n = voxels(logits);
    let ls = log_softmax_channels(logits);
    let (l, t) = (ls.data(), target.data());
    let inv_n = c::<T>(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); l.len()];
    for v in 0..n {
        let mut tsum = T::zero();
        for k in 0..cc {
            loss = loss - t[k * n + v] * l[k * n + v];
            tsum = tsum + t[k * n + v];
        }
        for k in 0..cc {
            let i = k * n + v;
            grad[i] = (l[i].exp() * tsum - t[i]) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Soft Dice loss on probabilities, with its gradient in `p`. Binary tasks
/// average over the foreground class only.
pub fn dice_loss<T: Float>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(T, Tensor<T>)> {
    check(probs, target)?;
    let cc = probs.shape()[0];
    let n = voxels(probs);
    let classes: Vec<usize> = if cc == 2 { vec![1] } else { (0..cc).collect() };
    let k = c::<T>(classes.len() as f64);
    let e = c::<T>(eps);
    let two = c::<T>(2.0);
    let (p, t) = (probs.data(), target.data());
    let mut grad = vec![T::zero(); p.len()];
    let mut mean = T::zero();
    for &cl in &classes {
        let (pc, tc) = (&p[cl * n..(cl + 1) * n], &t[cl * n..(cl + 1) * n]);
        let mut inter = T::zero();
        let mut ps = T::zero();
        let mut ts = T::zero();
        for v in 0..n {
            inter = inter + pc[v] * tc[v];
            ps = ps + pc[v];
            ts = ts + tc[v];
        }
        let num = two * inter + e;
        let den = ps + ts + e;
        mean = mean + num / den;
        for v in 0..n {
            grad[cl * n + v] = -(two * tc[v] * den - num) / (den * den * k);
        }
    }
    Ok((T::one() - mean / k, Tensor::from_vec(probs.shape(), grad)?))
}

/// Dice on `softmax(logits)`, with the gradient taken through the softmax.
pub fn dice_loss_logits<T: Float>(logits: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(T, Tensor<T>)> {
    let p = softmax_channels(logits);
    let (l, g) = dice_loss(&p, target, eps)?;
    Ok((l, softmax_backward(&p, &g)))
}

/// Mean over voxels of the KL divergence between the (clamped) teacher and
/// `softmax(student_logits)`, with its gradient in the student logits.
pub fn kl_loss<T: Float>(
    student_logits: &Tensor<T>,
    teacher: &Tensor<T>,
    direction: KlDirection,
) -> Result<(T, Tensor<T>)> {
    check(student_logits, teacher)?;
    let cc = student_logits.shape()[0];
    let n = voxels(student_logits);
    let lo = c::<T>(KL_CLAMP);
    // The clamp keeps the logarithm finite; the teacher weight itself is
    // only clipped to [0, 1], so zero entries contribute nothing.
    let tw: Vec<T> = teacher.data().iter().map(|&x| x.max(T::zero()).min(T::one())).collect();
    let tc: Vec<T> = tw.iter().map(|&x| x.max(lo)).collect();
    let ls = log_softmax_channels(student_logits);
    let l = ls.data();
    let inv_n = c::<T>(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); l.len()];
    match direction {
        KlDirection::TeacherStudent => {
            for v in 0..n {
                let mut tsum = T::zero();
                for k in 0..cc {
                    let i = k * n + v;
                    loss = loss + tw[i] * (tc[i].ln() - l[i]);
                    tsum = tsum + tw[i];
                }
                for k in 0..cc {
                    let i = k * n + v;
                    grad[i] = (l[i].exp() * tsum - tw[i]) * inv_n;
                }
            }
        }
        KlDirection::StudentTeacher => {
            for v in 0..n {
                let mut dot = T::zero();
                for k in 0..cc {
                    let i = k * n + v;
                    let s = l[i].exp();
                    let r = l[i] - tc[i].ln();
                    loss = loss + s * r;
                    dot = dot + s * r;
                }
                for k in 0..cc {
                    let i = k * n + v;
                    grad[i] = l[i].exp() * (l[i] - tc[i].ln() - dot) * inv_n;
                }
            }
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(student_logits.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_ce: f64,
    pub w_dice: f64,
    pub w_kl: f64,
    pub eps: f64,
    pub kl_direction: KlDirection,
    /// Argmax-harden pseudo-masks before use. Off by default.
    pub harden_pseudo: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            w_ce: w.w_ce,
            w_dice: w.w_dice,
            w_kl: w.w_kl,
            eps: DICE_EPS,
            kl_direction: KlDirection::TeacherStudent,
            harden_pseudo: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_ce: self.w_ce,
            w_dice: self.w_dice,
            w_kl: self.w_kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.eps > 0.0) {
            return Err(Error::Config("loss.eps must be positive".into()));
        }
        Ok(())
    }
}

fn combine<T: Float>(a: (T, Tensor<T>), wa: f64, b: (T, Tensor<T>), wb: f64) -> (T, Tensor<T>) {
    let (wa, wb) = (c::<T>(wa), c::<T>(wb));
    let mut g = a.1.scaled(wa);
    g.add_assign(&b.1.scaled(wb));
    (wa * a.0 + wb * b.0, g)
}

/// `w_ce * CE + w_dice * Dice` against ground truth; gradient in the logits.
pub fn labeled_loss<T: Float>(logits: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<(T, Tensor<T>)> {
    let ce = ce_loss(logits, target)?;
    let dice = dice_loss_logits(logits, target, cfg.eps)?;
    Ok(combine(ce, cfg.w_ce, dice, cfg.w_dice))
}

/// `w_kl * KL + w_dice * Dice` against a pseudo-mask; gradient in the logits.
pub fn unlabeled_loss<T: Float>(logits: &Tensor<T>, pseudo: &Tensor<T>, cfg: &LossConfig) -> Result<(T, Tensor<T>)> {
    let kl = kl_loss(logits, pseudo, cfg.kl_direction)?;
    let dice = dice_loss_logits(logits, pseudo, cfg.eps)?;
    Ok(combine(kl, cfg.w_kl, dice, cfg.w_dice))
}

/// Batch-proportion weights `(b_l / B, b_u / B)`.
pub fn cotrain_weights(b_l: usize, b_u: usize) -> Result<(f64, f64)> {
    let b = b_l + b_u;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((b_l as f64 / b as f64, b_u as f64 / b as f64))
}

/// Combines the labeled and unlabeled terms. A term must be present exactly
/// when its count is non-zero; an absent term contributes nothing.
pub fn cotrain_loss(l_l: Option<f64>, l_u: Option<f64>, b_l: usize, b_u: usize) -> Result<f64> {
    let (wl, wu) = cotrain_weights(b_l, b_u)?;
    if l_l.is_some() != (b_l > 0) || l_u.is_some() != (b_u > 0) {
        return Err(Error::Invalid(format!(
            "loss terms do not match batch counts (b_l={b_l}, b_u={b_u})"
        )));
    }
    let mut total = 0.0;
    if let Some(l) = l_l {
        total += if b_u == 0 { l } else { wl * l };
    }
    if let Some(u) = l_u {
        total += if b_l == 0 { u } else { wu * u };
    }
    Ok(total)
}

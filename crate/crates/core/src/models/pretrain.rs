//! Supervised pretraining of a 2D model on the synthetic source corpus.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Model2D;
use crate::datagen::SourceItem;
use crate::error::{Error, Result};
use crate::losses::{labeled_loss, LossConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::RngStream;
use crate::schedule::ScheduleState;
use crate::tensor::Tensor;
use crate::volume::{concat_depth, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta_initial: f64,
    pub eta_final: f64,
    pub warmup: usize,
    /// Items at the end of the corpus kept out of training for evaluation.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            eta_initial: 3e-3,
            eta_final: 0.0,
            warmup: 0,
            holdout: 20,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub holdout_dice: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model2D<f32>,
    /// Entry 0 is the untrained model; entry `e` follows epoch `e`.
    pub history: Vec<PretrainEpoch>,
}

fn standardize_item(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = img.shape();
    let v = Volume::new(img.clone().reshape(&[s[0], s[1], s[2], 1])?)?;
    Ok(v.standardized())
}

/// Stacks items along depth: the 2D network treats depth as its batch axis.
fn stack(items: &[&SourceItem]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let xs = items
        .iter()
        .map(|it| standardize_item(&it.image).and_then(|t| t.reshape(&it.image.shape().to_vec())))
        .collect::<Result<Vec<_>>>()?;
    let ms: Vec<Tensor<f32>> = items.iter().map(|it| it.mask.clone()).collect();
    Ok((concat_depth(&xs)?, concat_depth(&ms)?))
}

/// Mean foreground Dice of argmax predictions.
pub(crate) fn hard_dice(model: &Model2D<f32>, items: &[&SourceItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for it in items {
        let x = standardize_item(&it.image)?;
        let logits = model.net.logits(&x)?;
        let cc = logits.shape()[0];
        let n = logits.len() / cc;
        let (l, m) = (logits.data(), it.mask.data());
        let mut score = 0.0;
        for cl in 1..cc {
            let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
            for v in 0..n {
                let pred = (0..cc).fold(0, |best, k| if l[k * n + v] > l[best * n + v] { k } else { best });
                let p = pred == cl;
                let t = m[cl * n + v] > 0.5;
                inter += usize::from(p && t);
                a += usize::from(p);
                b += usize::from(t);
            }
            score += if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
        }
        total += score / (cc - 1) as f64;
    }
    Ok(total / items.len() as f64)
}

/// Trains `model` on the source corpus with the labeled loss.
pub fn pretrain_source(model: Model2D<f32>, corpus: &[SourceItem], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("source corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
    }
    let holdout = cfg.holdout.min(corpus.len() - 1);
    let (train, held) = corpus.split_at(corpus.len() - holdout);
    let held: Vec<&SourceItem> = held.iter().collect();
    let mut model = model;
    let loss_cfg = LossConfig::default();
    let mut history = vec![PretrainEpoch {
        epoch: 0,
        lr: 0.0,
        loss: f64::NAN,
        holdout_dice: hard_dice(&model, &held)?,
    }];
    if cfg.epochs == 0 {
        return Ok(PretrainOutcome { model, history });
    }
    let mut sched = ScheduleState::for_epochs(cfg.eta_initial, cfg.eta_final, cfg.warmup, cfg.epochs)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let root = RngStream::new(cfg.seed, "pretrain");
    for epoch in 0..cfg.epochs {
        let lr = sched.seek(epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut root.derive(&[epoch as u64]));
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&SourceItem> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, m) = stack(&items)?;
            let (loss, grads) = model.net.loss_and_grads(&x, |z| labeled_loss(z, &m, &loss_cfg))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("pretraining epoch {epoch}"),
                });
            }
            opt.step(&mut model.net.params, &grads, lr);
            sum += loss as f64;
            steps += 1;
        }
        let rec = PretrainEpoch {
            epoch: epoch + 1,
            lr,
            loss: sum / steps as f64,
            holdout_dice: hard_dice(&model, &held)?,
        };
        log::debug!("pretrain epoch {} loss {:.4} dice {:.4}", rec.epoch, rec.loss, rec.holdout_dice);
        history.push(rec);
    }
    Ok(PretrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_source, SourceDatasetSpec};
    use crate::models::ArchSpec;

    fn corpus(count: usize) -> Vec<SourceItem> {
        generate_source(&SourceDatasetSpec {
            count,
            shape: [24, 24],
            ..SourceDatasetSpec::default()
        })
        .unwrap()
    }

    fn fresh() -> Model2D<f32> {
        Model2D::new(ArchSpec::by_id("unet2d", 1, 2, 4).unwrap(), &mut RngStream::new(1, "init")).unwrap()
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let m = fresh();
        let out = pretrain_source(m.clone(), &corpus(10), &PretrainConfig { epochs: 0, holdout: 2, ..Default::default() }).unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn holdout_dice_improves_and_is_deterministic() {
        let c = corpus(60);
        let cfg = PretrainConfig {
            epochs: 6,
            holdout: 10,
            ..Default::default()
        };
        let a = pretrain_source(fresh(), &c, &cfg).unwrap();
        let first = a.history.first().unwrap().holdout_dice;
        let last = a.history.last().unwrap().holdout_dice;
        assert!(last > first + 0.1, "{first} -> {last}");
        let b = pretrain_source(fresh(), &c, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }
}

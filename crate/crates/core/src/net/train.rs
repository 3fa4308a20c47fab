use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Grads, Network};
use crate::error::{param_err, Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// One training example: an input image and ±1 per-class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<f64>,
}

impl Sample {
    /// All labels −1 except `class`, or all −1 for background (`None`).
    pub fn one_hot(image: Tensor, class: Option<usize>, classes: usize) -> Self {
        let labels = (0..classes).map(|k| if Some(k) == class { 1.0 } else { -1.0 }).collect();
        Self { image, labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The rate is divided by this factor every `drop_step` iterations.
    pub drop_factor: f64,
    pub drop_step: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Initial rate 0.01, dropped by 10× at two thirds of the run.
    pub fn scaled(iterations: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            drop_factor: 10.0,
            drop_step: (iterations * 2 / 3).max(1),
            batch_size,
            iterations,
            seed,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err!("learning rate must be finite and >= 0"));
        }
        if self.drop_factor < 1.0 || self.drop_step == 0 || self.batch_size == 0 {
            return Err(param_err!("drop factor >= 1, drop step and batch size > 0 required"));
        }
        Ok(())
    }

    pub fn rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate / self.drop_factor.powi((iteration / self.drop_step) as i32)
    }
}

/// Averaged hinge loss and gradient over a batch. Per-sample work may run in
/// parallel; the reduction runs in batch order so results are bit-stable.
pub fn batch_gradient(net: &Network, batch: &[&Sample]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(param_err!("empty batch"));
    }
    let per_sample = par::try_map(batch, |s| net.loss_and_grads(&s.image, &s.labels))?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss * scale, grads))
}

/// One SGD update at `rate`; returns the batch's mean loss before the update.
pub fn sgd_step(net: &mut Network, batch: &[&Sample], rate: f64, weight_decay: f64) -> Result<f64> {
    let (loss, grads) = batch_gradient(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, loss });
    }
    net.apply_gradients(&grads, rate, weight_decay)?;
    Ok(loss)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    /// Mean step loss per pass over the data.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD over `samples`, reshuffled every epoch from `cfg.seed`.
pub fn train(net: &mut Network, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(param_err!("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut report = TrainReport::default();
    let mut epoch = (0.0, 0usize);
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                if epoch.1 > 0 {
                    report.epoch_losses.push(epoch.0 / epoch.1 as f64);
                    epoch = (0.0, 0);
                }
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let loss = sgd_step(net, &batch, cfg.rate_at(it), cfg.weight_decay).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { iteration: it, loss },
            e => e,
        })?;
        report.step_losses.push(loss);
        epoch.0 += loss;
        epoch.1 += 1;
    }
    if epoch.1 > 0 {
        report.epoch_losses.push(epoch.0 / epoch.1 as f64);
    }
    debug!(
        "trained {} iterations, final epoch loss {:?}",
        cfg.iterations,
        report.epoch_losses.last()
    );
    Ok(report)
}

/// Which annotation level the pretraining stage learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainScheme {
    /// Whole scenes labelled with the classes present in them.
    ImageLevel,
    /// Tight crops around annotated objects.
    ObjectLevel,
}

/// Both views of the pretraining data; the scheme picks one.
#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub classes: usize,
    pub scenes: Vec<Sample>,
    pub crops: Vec<Sample>,
}

impl PretrainData {
    pub fn samples(&self, scheme: PretrainScheme) -> &[Sample] {
        match scheme {
            PretrainScheme::ImageLevel => &self.scenes,
            PretrainScheme::ObjectLevel => &self.crops,
        }
    }
}

/// Trains the trunk with a throwaway linear head over its flattened output.
pub fn pretrain_trunk(
    arch: &Architecture,
    data: &PretrainData,
    scheme: PretrainScheme,
    cfg: &TrainConfig,
) -> Result<Network> {
    let samples = data.samples(scheme);
    if samples.is_empty() {
        return Err(param_err!("empty {scheme:?} pretraining set"));
    }
    let mut net = Network::new(&arch.trunk_only(data.classes), cfg.seed)?;
    train(&mut net, samples, cfg)?;
    Ok(net)
}

/// Fresh network for `arch` whose trunk starts from `pretrained`; branches
/// and head are newly initialised, then everything is fine-tuned.
pub fn finetune_from(
    arch: &Architecture,
    pretrained: Option<&Network>,
    finetune: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if finetune.is_empty() {
        return Err(param_err!("empty fine-tuning set"));
    }
    let mut net = Network::new(arch, cfg.seed)?;
    if let Some(p) = pretrained {
        net.load_trunk_from(p)?;
    }
    let report = train(&mut net, finetune, cfg)?;
    Ok((net, report))
}

pub fn pretrain_then_finetune(
    arch: &Architecture,
    pretrain: &PretrainData,
    finetune: &[Sample],
    scheme: PretrainScheme,
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
) -> Result<Network> {
    let base = pretrain_trunk(arch, pretrain, scheme, pretrain_cfg)?;
    Ok(finetune_from(arch, Some(&base), finetune, finetune_cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::Pooling;

    #[test]
    fn schedule_drops_by_factor() {
        let cfg = TrainConfig::scaled(300, 8, 0);
        assert_eq!(cfg.drop_step, 200);
        assert_eq!(cfg.rate_at(0), 0.01);
        assert_eq!(cfg.rate_at(199), 0.01);
        assert!((cfg.rate_at(200) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let arch = Architecture::toy(3, Pooling::Def);
        let mut net = Network::new(&arch, 1).unwrap();
        let before = net.clone();
        let img = Tensor::from_fn(&[1, 28, 28], |k| ((k * 13) % 7) as f64 / 7.0);
        let s = Sample::one_hot(img, Some(1), 3);
        sgd_step(&mut net, &[&s], 0.0, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn empty_batch_is_error() {
        let mut net = Network::new(&Architecture::toy(2, Pooling::Max), 1).unwrap();
        assert!(sgd_step(&mut net, &[], 0.1, 0.0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = Network::new(&Architecture::toy(2, Pooling::Max), 1).unwrap();
        net.head_mut().bias[0] = f64::NAN;
        let s = Sample::one_hot(Tensor::zeros(&[1, 28, 28]), Some(0), 2);
        assert!(matches!(sgd_step(&mut net, &[&s], 0.1, 0.0), Err(Error::Divergence { .. })));
    }
}

//! Training loop over a shape dataset.
//!
//! Every step draws its batch, dropout and noise from streams derived from
//! `(seed, step)`, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would.

use rand::Rng as _;

use crate::data::{build_joint_batch, Dataset};
use crate::diffusion::{train_step, AdamConfig, TrainState};
use crate::error::{config_err, Result};
use crate::rng::rng_for;
use crate::schedule::NoiseSchedule;
use crate::unet::UNet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    /// independent image frames appended to every clip
    pub independent_images: usize,
    /// probability of training a conditional example as unconditional
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            batch_size: 8,
            steps: 2000,
            ema_decay: 0.995,
            weight_decay: 0.0,
            independent_images: 0,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("train.lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("train.ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("train.weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(config_err!("train.cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Run steps `state.step .. until`, calling `log(step, loss)` after each.
/// Labels are used only when the network has classes.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &UNet,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    data: &Dataset,
    state: &mut TrainState<f32>,
    seed: u64,
    until: u64,
    mut log: impl FnMut(u64, f64),
) -> Result<()> {
    cfg.validate()?;
    let opt = cfg.adam();
    let labeled = net.config().num_classes > 0;
    while state.step < until {
        let step = state.step;
        let mut jb = build_joint_batch(data, cfg.batch_size, cfg.independent_images, &mut rng_for(seed, "train-batch", step))?;
        let mut drop = rng_for(seed, "train-dropout", step);
        for l in jb.batch.labels.iter_mut() {
            if !labeled || drop.random::<f64>() < cfg.cond_dropout {
                *l = None;
            }
        }
        let mut noise = rng_for(seed, "train-noise", step);
        let loss = train_step(net, state, schedule, &jb.batch, &opt, cfg.ema_decay, &mut noise)?;
        log(state.step, loss);
    }
    Ok(())
}

/// Trailing-window mean of a loss curve.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::diffusion::PredKind;
    use crate::unet::UNetConfig;

    fn tiny() -> (UNet, Dataset) {
        let cfg = UNetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
            head_dim: 4,
            cond_embedding_dim: 8,
            frames: 2,
            spatial_size: 8,
            norm_groups: 2,
            prediction: PredKind::Epsilon,
            ..UNetConfig::toy()
        };
        let data = DataConfig {
            frames: 2,
            height: 8,
            width: 8,
            size_range: (2.0, 4.0),
            ..DataConfig::default()
        };
        (UNet::new(cfg).unwrap(), Dataset::generate(&data, 8, 3).unwrap())
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (net, data) = tiny();
        let sc = NoiseSchedule::default();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut a = TrainState::new(net.init_params(0));
        train(&net, &sc, &cfg, &data, &mut a, 5, 4, |_, _| {}).unwrap();
        let mut b = TrainState::new(net.init_params(0));
        train(&net, &sc, &cfg, &data, &mut b, 5, 2, |_, _| {}).unwrap();
        let mut c = b.clone();
        train(&net, &sc, &cfg, &data, &mut c, 5, 4, |_, _| {}).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.step, 4);
    }

    #[test]
    fn joint_images_train() {
        let (net, data) = tiny();
        let cfg = TrainConfig {
            batch_size: 2,
            independent_images: 4,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(net.init_params(1));
        let mut losses = vec![];
        train(&net, &NoiseSchedule::default(), &cfg, &data, &mut s, 2, 3, |_, l| losses.push(l)).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn moving_average_window() {
        let m = moving_average(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(m, vec![1.0, 2.0, 4.0, 6.0]);
    }
}

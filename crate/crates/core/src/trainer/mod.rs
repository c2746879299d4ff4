//! Training loops, optimizers, schedules and hyperparameter search.

mod finetune;
mod pretrain;
pub mod probe;
pub mod search;

pub use finetune::{finetune, initial_model, predict, Example, FinetuneOutput};
pub use pretrain::{pretrain, pretrain_images, PretrainMode, PretrainOutput};

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{resize_bilinear, AugmentKind, AugmentPolicy};
use crate::error::{Error, Result};
use crate::losses::{TemperatureClamp, TemperatureState, TAU_FLOOR, TAU_INIT};
use crate::nn::Tensor;
use crate::records::ImageGrid;
use crate::rng::Stream;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First and second moments for each tensor, in the order they are passed
/// to [`optimizer_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam or AdamW update in place.
///
/// Plain Adam folds `weight_decay * theta` into the gradient; AdamW instead
/// scales the parameters by `1 - lr * weight_decay` before the moment step.
/// Non-finite gradients leave both parameters and state untouched.
pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape != g.shape {
            return Err(Error::shape(format!("optimizer[{i}]"), &p.shape, &g.shape));
        }
        if let Some(j) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("optimizer", format!("non-finite gradient in tensor {i} at {j}")));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::shape("optimizer.state", state.m.len(), params.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if kind == OptimizerKind::AdamW && weight_decay != 0.0 {
            let keep = 1.0 - lr * weight_decay;
            p.data.iter_mut().for_each(|x| *x *= keep);
        }
        for k in 0..p.data.len() {
            let mut gk = g.data[k];
            if kind == OptimizerKind::Adam {
                gk += weight_decay * p.data[k];
            }
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at `t = 0` to `eta_min` at `t = t_max`.
pub fn cosine_lr(t: usize, base_lr: f64, eta_min: f64, t_max: usize) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::config("cosine schedule needs T_max >= 1"));
    }
    if t > t_max {
        return Err(Error::config(format!("epoch {t} past T_max {t_max}")));
    }
    let phase = std::f64::consts::PI * t as f64 / t_max as f64;
    Ok(eta_min + 0.5 * (base_lr - eta_min) * (1.0 + phase.cos()))
}

/// True once the best validation loss has gone `patience` consecutive
/// epochs without a strict improvement of more than `min_delta`.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let Some((&first, rest)) = history.split_first() else {
        return false;
    };
    let mut best = first;
    let mut wait = 0;
    for &loss in rest {
        if loss < best - min_delta {
            best = loss;
            wait = 0;
        } else {
            wait += 1;
        }
    }
    wait >= patience
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub early_stopping: bool,
    pub augment: AugmentKind,
    pub augment_enabled: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eta_min: f64,
    /// Weight of the per-modality BCE terms added to the fused loss.
    pub aux_loss_weight: f64,
    /// Held-out share of the pretraining images.
    pub validation_fraction: f64,
    pub tau_init: f64,
    pub tau_floor: f64,
    pub tau_clamp: TemperatureClamp,
    pub learn_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::finetune()
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-6,
            early_stopping: true,
            augment: AugmentKind::Simple,
            augment_enabled: true,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eta_min: 0.0,
            aux_loss_weight: 0.0,
            validation_fraction: 0.1,
            tau_init: TAU_INIT,
            tau_floor: TAU_FLOOR,
            tau_clamp: TemperatureClamp::Freeze,
            learn_temperature: true,
        }
    }

    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            learning_rate: 5e-6,
            weight_decay: 1e-2,
            batch_size: 256,
            max_epochs: 200,
            augment: AugmentKind::Harsh,
            optimizer: OptimizerKind::AdamW,
            ..TrainConfig::finetune()
        }
    }

    /// Desk-scale budget: batch 32, at most 30 epochs.
    pub fn desk(mut self) -> Self {
        self.batch_size = self.batch_size.min(32);
        self.max_epochs = self.max_epochs.min(30);
        self
    }

    /// Learning rate 0 is accepted as a null optimizer.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config(format!("min_delta must be >= 0, got {}", self.min_delta)));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.learning_rate) {
            return Err(Error::config("eta_min must lie in [0, learning_rate]"));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::config("aux_loss_weight must be >= 0"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must be in (0,1)"));
        }
        if !(self.tau_floor > 0.0 && self.tau_init >= self.tau_floor) {
            return Err(Error::config("temperature needs 0 < tau_floor <= tau_init"));
        }
        Ok(())
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        if self.augment_enabled {
            AugmentPolicy::for_kind(self.augment)
        } else {
            AugmentPolicy::disabled(self.augment)
        }
    }

    pub fn temperature(&self) -> TemperatureState {
        let t = TemperatureState::new(self.tau_init, self.tau_floor, self.tau_clamp);
        if self.learn_temperature {
            t
        } else {
            TemperatureState { frozen: true, ..t }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    /// Temperature before the first step and after every step.
    pub tau_trace: Vec<f64>,
}

impl TrainHistory {
    fn new() -> Self {
        TrainHistory {
            epochs: Vec::new(),
            stop_epoch: 0,
            stop_reason: StopReason::MaxEpochs,
            best_epoch: 0,
            tau_trace: Vec::new(),
        }
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.val_loss).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tlearning_rate\ttau\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.17e}"));
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.17e}\t{}\t{:.17e}\t{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                e.learning_rate,
                opt(e.tau)
            );
        }
        s
    }
}

/// Stacks images into a `(B, H, W)` tensor, resizing any that differ from
/// the target size.
pub(crate) fn image_tensor(images: &[ImageGrid], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * height * width);
    for img in images {
        if img.height == height && img.width == width {
            data.extend_from_slice(&img.pixels);
        } else {
            data.extend(resize_bilinear(img, height, width)?.pixels);
        }
    }
    Tensor::from_vec(&[images.len(), height, width], data)
}

/// Shuffled mini-batches of indices. A trailing batch of one is dropped
/// because batch normalization needs at least two rows.
pub(crate) fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        let mut x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut state = AdamState::new();
        for _ in 0..200 {
            let g = Tensor::from_vec(&[1], vec![2.0 * x.data[0]]).unwrap();
            optimizer_step(OptimizerKind::Adam, &mut [&mut x], &[&g], &mut state, 0.1, 0.0).unwrap();
        }
        assert!(x.data[0].abs() < 1e-3, "x = {}", x.data[0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut x = Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let before = x.clone();
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new();
        for kind in [OptimizerKind::Adam, OptimizerKind::AdamW] {
            optimizer_step(kind, &mut [&mut x], &[&g], &mut state, 0.1, 0.0).unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn adamw_decays_geometrically() {
        let mut x = Tensor::from_vec(&[2], vec![1.5, -0.25]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new();
        let mut expect = x.data.clone();
        for _ in 0..25 {
            optimizer_step(OptimizerKind::AdamW, &mut [&mut x], &[&g], &mut state, 0.01, 0.5).unwrap();
            expect.iter_mut().for_each(|v| *v *= 1.0 - 0.01 * 0.5);
        }
        assert_eq!(x.data, expect);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.1, f64::NAN]).unwrap();
        let mut state = AdamState::new();
        let err = optimizer_step(OptimizerKind::Adam, &mut [&mut x], &[&g], &mut state, 0.1, 0.0);
        assert!(matches!(err, Err(Error::Numeric { .. })));
        assert_eq!(x.data, vec![1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 3e-4, 0.0, 10).unwrap(), 3e-4);
        assert_eq!(cosine_lr(10, 3e-4, 1e-6, 10).unwrap(), 1e-6);
        assert!((cosine_lr(5, 3e-4, 0.0, 10).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(matches!(cosine_lr(0, 1.0, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn early_stopping_fixtures() {
        let improving: Vec<f64> = (0..50).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(!early_stop_check(&improving, 10, 1e-6));
        let flat = vec![1.0; 11];
        assert!(!early_stop_check(&flat[..10], 10, 1e-6));
        assert!(early_stop_check(&flat, 10, 1e-6));
        assert!(early_stop_check(&[1.0, 0.5], 1, 0.5));
        assert!(!early_stop_check(&[], 1, 0.0));
    }
}

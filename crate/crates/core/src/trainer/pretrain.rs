use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    cosine_lr, early_stop_check, image_tensor, optimizer_step, shuffled_batches, AdamState, EpochRecord,
    StopReason, TrainConfig, TrainHistory,
};
use crate::augment::{make_views, AugmentPolicy};
use crate::error::{Error, Result};
use crate::losses::{apply_temperature_update, nt_xent_loss, TemperatureState};
use crate::nn::{Mode, ModelConfig, ModelParams, Tensor};
use crate::records::{ImageGrid, ImageRef, ScanStudy};
use crate::rng;

/// Which images feed contrastive pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Every slice of every OCT volume.
    AllSlices,
    #[default]
    MidSlice,
    Infrared,
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_slices" => Ok(PretrainMode::AllSlices),
            "mid_slice" => Ok(PretrainMode::MidSlice),
            "infrared" => Ok(PretrainMode::Infrared),
            other => Err(Error::config(format!("unknown pretraining mode {other:?}"))),
        }
    }
}

pub fn pretrain_images(studies: &[ScanStudy], mode: PretrainMode) -> Vec<ImageRef> {
    match mode {
        PretrainMode::AllSlices => studies
            .iter()
            .flat_map(|s| (0..s.oct_volume.len()).map(move |i| s.oct_volume.slice(i)))
            .collect(),
        PretrainMode::MidSlice => studies
            .iter()
            .filter(|s| !s.oct_volume.is_empty())
            .map(|s| s.oct_volume.mid_slice())
            .collect(),
        PretrainMode::Infrared => studies.iter().filter_map(|s| s.infrared.clone()).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Visual encoder and projection head; the other parts are untrained.
    pub model: ModelParams,
    pub temperature: TemperatureState,
    pub history: TrainHistory,
}

/// Views of `images[i]` for `i` in `indices`, interleaved so that rows
/// `2m` and `2m + 1` come from the same source.
fn view_batch(
    images: &[ImageRef],
    indices: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    label: &str,
    offset: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let mut views: Vec<ImageGrid> = Vec::with_capacity(2 * indices.len());
    for &i in indices {
        let mut r = rng::stream(seed, label, (offset + i) as u64);
        let (a, b) = make_views(policy, &images[i].load(), &mut r);
        views.push(a);
        views.push(b);
    }
    image_tensor(&views, height, width)
}

fn contrastive_loss(model: &ModelParams, x: &Tensor, temp: &TemperatureState, mode: Mode) -> Result<f64> {
    let (z, _) = model.encode_visual(x, mode)?;
    let (p, _) = model.project(&z)?;
    Ok(nt_xent_loss(&p, temp)?.loss)
}

/// Contrastive pretraining of the visual encoder, projection head and
/// temperature on a 90/10 split of `images` (the held-out share is
/// `validation_fraction`).
pub fn pretrain(images: &[ImageRef], config: &TrainConfig, model_config: &ModelConfig) -> Result<PretrainOutput> {
    config.validate()?;
    model_config.validate()?;
    let n = images.len();
    if n < 3 {
        return Err(Error::config(format!("pretraining needs at least 3 images, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(config.seed, "pretrain_split", 0));
    let n_val = ((config.validation_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (train_idx, val_idx) = (train_idx.to_vec(), val_idx.to_vec());
    if config.batch_size > train_idx.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} pretraining images",
            config.batch_size,
            train_idx.len()
        )));
    }

    let (h, w) = (model_config.visual.input_height, model_config.visual.input_width);
    let policy = config.augment_policy();
    let mut model = ModelParams::new(model_config.clone(), &mut rng::stream(config.seed, "pretrain_init", 0))?;
    let mut temp = config.temperature();
    let mut log_tau = Tensor::from_vec(&[1], vec![temp.tau.ln()])?;
    let mut state = AdamState::new();
    let mut tau_state = AdamState::new();
    let mut history = TrainHistory::new();
    history.tau_trace.push(temp.tau);
    let val_batches: Vec<Vec<usize>> = val_idx.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
    let mut best: Option<(f64, ModelParams, TemperatureState)> = None;

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config.learning_rate, config.eta_min, config.max_epochs)?;
        let mut shuffle = rng::stream(config.seed, "pretrain_shuffle", epoch as u64);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in shuffled_batches(train_idx.len(), config.batch_size, &mut shuffle) {
            let idx: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let x = view_batch(images, &idx, &policy, config.seed, "pretrain_views", epoch * n, h, w)?;
            let (z, vcache) = model.encode_visual(&x, Mode::Train)?;
            let (p, pcache) = model.project(&z)?;
            let out = nt_xent_loss(&p, &temp)?;
            let mut grads = model.zeros_like();
            let dz = model.backward_projection(&pcache, &out.d_z, &mut grads)?;
            model.backward_visual(&vcache, &dz, &mut grads)?;
            model.update_visual_running_stats(&vcache);
            let g: Vec<&Tensor> = grads.pretrain_params_mut().into_iter().map(|t| &*t).collect();
            optimizer_step(
                config.optimizer,
                &mut model.pretrain_params_mut(),
                &g,
                &mut state,
                lr,
                config.weight_decay,
            )?;
            if !temp.frozen {
                // Chain rule through tau = exp(log_tau).
                let g_log = Tensor::from_vec(&[1], vec![out.d_tau * temp.tau])?;
                optimizer_step(config.optimizer, &mut [&mut log_tau], &[&g_log], &mut tau_state, lr, 0.0)?;
                temp = apply_temperature_update(temp, log_tau.data[0].exp())?;
                log_tau.data[0] = temp.tau.ln();
            }
            history.tau_trace.push(temp.tau);
            loss_sum += out.loss * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::config("no pretraining batch of at least two images"));
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() {
            return Err(Error::numeric("pretrain", format!("epoch {} loss {train_loss}", epoch + 1)));
        }
        let mut val_sum = 0.0;
        for chunk in &val_batches {
            let x = view_batch(images, chunk, &policy, config.seed, "pretrain_val_views", 0, h, w)?;
            val_sum += contrastive_loss(&model, &x, &temp, Mode::Eval)? * chunk.len() as f64;
        }
        let val_loss = val_sum / val_idx.len() as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss: Some(val_loss),
            learning_rate: lr,
            tau: Some(temp.tau),
        });
        history.stop_epoch = epoch + 1;
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, model.clone(), temp));
            history.best_epoch = epoch + 1;
        }
        if config.early_stopping && early_stop_check(&history.val_losses(), config.patience, config.min_delta) {
            history.stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    let (_, model, temperature) = best.expect("at least one epoch ran");
    Ok(PretrainOutput { model, temperature, history })
}

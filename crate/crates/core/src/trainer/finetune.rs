use rayon::prelude::*;

use super::{
    cosine_lr, early_stop_check, image_tensor, optimizer_step, shuffled_batches, AdamState, EpochRecord,
    StopReason, TrainConfig, TrainHistory,
};
use crate::augment;
use crate::error::{Error, Result};
use crate::losses::bce_loss;
use crate::nn::{sigmoid, FusionMode, Mode, ModelConfig, ModelParams, Tensor};
use crate::records::{ImageGrid, ImageRef};
use crate::rng;

/// One supervised example: an image, its normalized clinical features and
/// the binary label.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: ImageRef,
    pub ehr: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub model: ModelParams,
    pub history: TrainHistory,
}

fn ehr_tensor(examples: &[&Example], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(examples.len() * dim);
    for e in examples {
        if e.ehr.len() != dim {
            return Err(Error::shape("ehr.input", dim, e.ehr.len()));
        }
        data.extend_from_slice(&e.ehr);
    }
    Tensor::from_vec(&[examples.len(), dim], data)
}

fn labels(examples: &[&Example]) -> Vec<f64> {
    examples.iter().map(|e| f64::from(e.label)).collect()
}

/// Eval-mode scores `y_hat` for every example, in input order.
pub fn predict(model: &ModelParams, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let (h, w) = (cfg.visual.input_height, cfg.visual.input_width);
    let chunks: Vec<Vec<f64>> = examples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            let images: Vec<ImageGrid> = chunk.iter().map(|e| e.image.load().as_ref().clone()).collect();
            let x = image_tensor(&images, h, w)?;
            let ehr = match cfg.fusion {
                FusionMode::Multimodal => Some(ehr_tensor(&refs, cfg.ehr_input_dim)?),
                FusionMode::ImageOnly => None,
            };
            Ok(model.forward_fused(&x, ehr.as_ref(), Mode::Eval)?.y_hat)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// The weights fine-tuning starts from: a fresh draw for `seed` with the visual
/// encoder replaced by `init` when given, and no projection head.
pub fn initial_model(init: Option<&ModelParams>, model_config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::new(model_config.clone(), &mut rng::stream(seed, "finetune_init", 0))?;
    if let Some(init) = init {
        if init.config.visual != model_config.visual {
            return Err(Error::config("pretrained visual encoder does not match the model configuration"));
        }
        model.visual = init.visual.clone();
    }
    model.projection = None;
    model.touch();
    Ok(model)
}

/// Supervised fine-tuning of the fused model with BCE.
///
/// With a validation set the weights of the epoch with the lowest
/// validation loss are returned and early stopping watches that loss;
/// without one the run lasts `max_epochs` and the final weights are kept.
pub fn finetune(
    init: Option<&ModelParams>,
    train: &[Example],
    validation: Option<&[Example]>,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<FinetuneOutput> {
    config.validate()?;
    model_config.validate()?;
    let positives = train.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::DegenerateFold(format!(
            "training fold of {} examples has {positives} positives",
            train.len()
        )));
    }
    let validation = validation.filter(|v| !v.is_empty());
    let mut model = initial_model(init, model_config, config.seed)?;
    let (h, w) = (model_config.visual.input_height, model_config.visual.input_width);
    let multimodal = model_config.fusion == FusionMode::Multimodal;
    let policy = config.augment_policy();
    let n = train.len();

    let mut state = AdamState::new();
    let mut history = TrainHistory::new();
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config.learning_rate, config.eta_min, config.max_epochs)?;
        let mut shuffle = rng::stream(config.seed, "finetune_shuffle", epoch as u64);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in shuffled_batches(n, config.batch_size, &mut shuffle) {
            let items: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let images: Vec<ImageGrid> = batch
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(config.seed, "finetune_augment", (epoch * n + i) as u64);
                    augment::apply(&policy, &train[i].image.load(), &mut r)
                })
                .collect();
            let x = image_tensor(&images, h, w)?;
            let ehr = if multimodal { Some(ehr_tensor(&items, model_config.ehr_input_dim)?) } else { None };
            let y = labels(&items);
            let out = model.forward_fused(&x, ehr.as_ref(), Mode::Train)?;
            let (mut loss, d_y_hat) = bce_loss(&out.y_hat, &y)?;
            let (mut d_oct, mut d_ehr) = (None, None);
            if config.aux_loss_weight > 0.0 {
                let a = config.aux_loss_weight;
                let b = y.len() as f64;
                let p_oct: Vec<f64> = out.p_oct.iter().map(|&v| sigmoid(v)).collect();
                loss += a * bce_loss(&p_oct, &y)?.0;
                d_oct = Some(p_oct.iter().zip(&y).map(|(p, t)| a * (p - t) / b).collect::<Vec<_>>());
                if multimodal {
                    let p_ehr: Vec<f64> = out.p_ehr.iter().map(|&v| sigmoid(v)).collect();
                    loss += a * bce_loss(&p_ehr, &y)?.0;
                    d_ehr = Some(p_ehr.iter().zip(&y).map(|(p, t)| a * (p - t) / b).collect::<Vec<_>>());
                }
            }
            model.update_running_stats(&out.cache);
            let mut grads = model.backward_with_aux(out.cache, &d_y_hat, d_oct.as_deref(), d_ehr.as_deref())?;
            let g: Vec<&Tensor> = grads.params_mut().into_iter().map(|t| &*t).collect();
            optimizer_step(
                config.optimizer,
                &mut model.params_mut(),
                &g,
                &mut state,
                lr,
                config.weight_decay,
            )?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::config("no training batch of at least two examples"));
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() {
            return Err(Error::numeric("finetune", format!("epoch {} train loss {train_loss}", epoch + 1)));
        }
        let val_loss = match validation {
            Some(v) => {
                let scores = predict(&model, v, config.batch_size)?;
                let y: Vec<f64> = v.iter().map(|e| f64::from(e.label)).collect();
                Some(bce_loss(&scores, &y)?.0)
            }
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            learning_rate: lr,
            tau: None,
        });
        history.stop_epoch = epoch + 1;
        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
                history.best_epoch = epoch + 1;
            }
            if config.early_stopping && early_stop_check(&history.val_losses(), config.patience, config.min_delta) {
                history.stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = history.stop_epoch;
            model
        }
    };
    Ok(FinetuneOutput { model, history })
}

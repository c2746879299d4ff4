//! Experiment protocol on top of the trainer: fold-wise normalization,
//! cross-validated search, retraining and test-set scoring.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentKind;
use crate::error::{Error, Result};
use crate::eval::{auroc, ScoredSample, COMORBIDITY_GROUPS};
use crate::features::{fit_normalizer, icd_group_index, FeatureExtractor, Normalizer, RawFeatureRow};
use crate::labeling::{kfold_patient_folds, LabeledSample, PatientKeyed};
use crate::nn::{ModelConfig, ModelParams};
use crate::records::{age_in_years, PatientId, PatientRecord};
use crate::rng;
use crate::trainer::search::{self, Direction, Evaluation, SearchResult, SearchSpace, TpeSettings, TrialConfig};
use crate::trainer::{finetune, predict, pretrain, Example, PretrainOutput, TrainConfig, TrainHistory};

/// A labelled sample with its raw (unnormalized) clinical features.
#[derive(Debug, Clone)]
pub struct Item {
    pub sample: LabeledSample,
    pub raw: RawFeatureRow,
    pub age_years: Option<i32>,
}

impl PatientKeyed for Item {
    fn patient_key(&self) -> &PatientId {
        &self.sample.patient_id
    }

    fn is_positive(&self) -> bool {
        self.sample.y == 1
    }
}

pub fn build_items(
    samples: &[LabeledSample],
    patients: &[PatientRecord],
    extractor: &FeatureExtractor,
) -> Result<Vec<Item>> {
    let births: std::collections::HashMap<&PatientId, _> =
        patients.iter().map(|p| (&p.patient_id, p.birth_date)).collect();
    samples
        .iter()
        .map(|s| {
            let raw = extractor.extract(&s.patient_id, s.t_oct)?;
            let age_years = births.get(&s.patient_id).copied().flatten().map(|b| age_in_years(b, s.t_oct));
            Ok(Item {
                sample: s.clone(),
                raw,
                age_years,
            })
        })
        .collect()
}

pub fn to_examples(items: &[Item], normalizer: &Normalizer) -> Vec<Example> {
    items
        .iter()
        .map(|it| Example {
            image: it.sample.image.clone(),
            ehr: normalizer.transform(&it.raw).values,
            label: it.sample.y,
        })
        .collect()
}

/// A fitted model with the normalizer of its training portion.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ModelParams,
    pub normalizer: Normalizer,
    pub history: TrainHistory,
}

impl TrainedModel {
    pub fn predict(&self, items: &[Item], batch_size: usize) -> Result<Vec<f64>> {
        predict(&self.model, &to_examples(items, &self.normalizer), batch_size)
    }

    pub fn score(&self, items: &[Item], batch_size: usize) -> Result<Vec<ScoredSample>> {
        let scores = self.predict(items, batch_size)?;
        Ok(items.iter().zip(scores).map(|(it, s)| scored_sample(it, s)).collect())
    }
}

pub fn scored_sample(item: &Item, score: f64) -> ScoredSample {
    let comorbidities = COMORBIDITY_GROUPS
        .iter()
        .filter(|g| icd_group_index(g).is_some_and(|i| item.raw.icd_group_flags[i]))
        .map(|g| (*g).to_string())
        .collect();
    ScoredSample {
        sample_id: item.sample.sample_id.clone(),
        patient_id: item.sample.patient_id.clone(),
        score,
        label: item.sample.y,
        age_years: item.age_years,
        subtype: item.sample.subtype,
        comorbidities,
        eye: item.sample.eye,
        delta_days: item.sample.delta_days,
    }
}

/// Fits the normalizer on `train` and fine-tunes.
pub fn train_model(
    init: Option<&ModelParams>,
    train: &[Item],
    validation: Option<&[Item]>,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainedModel> {
    let raws: Vec<RawFeatureRow> = train.iter().map(|it| it.raw.clone()).collect();
    let normalizer = fit_normalizer(&raws)?;
    let train_ex = to_examples(train, &normalizer);
    let val_ex = validation.map(|v| to_examples(v, &normalizer));
    let out = finetune(init, &train_ex, val_ex.as_deref(), config, model_config)?;
    Ok(TrainedModel {
        model: out.model,
        normalizer,
        history: out.history,
    })
}

/// Applies one search trial's values to a base fine-tuning config.
pub fn apply_trial(base: &TrainConfig, trial: &TrialConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    if trial.contains_key("learning_rate") {
        cfg.learning_rate = search::real(trial, "learning_rate")?;
    }
    if trial.contains_key("weight_decay") {
        cfg.weight_decay = search::real(trial, "weight_decay")?;
    }
    if trial.contains_key("batch_size") {
        let b = search::category(trial, "batch_size")?;
        cfg.batch_size = b.parse().map_err(|_| Error::config(format!("batch size {b:?} is not an integer")))?;
    }
    if trial.contains_key("augmentation") {
        cfg.augment = search::category(trial, "augmentation")?.parse::<AugmentKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub fold_aurocs: Vec<f64>,
    pub models: Vec<TrainedModel>,
}

impl CvOutcome {
    pub fn mean_auroc(&self) -> f64 {
        self.fold_aurocs.iter().sum::<f64>() / self.fold_aurocs.len() as f64
    }

    /// Rounded mean of the best epochs, used as the budget when retraining
    /// on all training data without a validation set.
    pub fn retrain_epochs(&self) -> usize {
        let total: usize = self.models.iter().map(|m| m.history.best_epoch.max(1)).sum();
        ((total as f64 / self.models.len() as f64).round() as usize).max(1)
    }
}

/// Patient-grouped k-fold training. Fold `f` trains with seed
/// `derive_seed(config.seed, "fold", f)`; folds run in parallel.
pub fn cross_validate(
    items: &[Item],
    k: usize,
    fold_seed: u64,
    config: &TrainConfig,
    model_config: &ModelConfig,
    init: Option<&ModelParams>,
) -> Result<CvOutcome> {
    let folds = kfold_patient_folds(items, k, fold_seed)?;
    let results: Vec<(f64, TrainedModel)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let cfg = TrainConfig {
                seed: rng::derive_seed(config.seed, "fold", f as u64),
                ..config.clone()
            };
            let trained = train_model(init, &fold.train, Some(&fold.validation), &cfg, model_config)?;
            let labels: Vec<u8> = fold.validation.iter().map(|it| it.sample.y).collect();
            let scores = trained.predict(&fold.validation, cfg.batch_size)?;
            let a = auroc(&scores, &labels).map_err(|e| match e {
                Error::UndefinedMetric(m) => Error::DegenerateFold(format!("validation fold {f}: {m}")),
                other => other,
            })?;
            Ok((a, trained))
        })
        .collect::<Result<_>>()?;
    let (fold_aurocs, models) = results.into_iter().unzip();
    Ok(CvOutcome { fold_aurocs, models })
}

pub struct FinetuneSearch<'a> {
    pub items: &'a [Item],
    pub space: &'a SearchSpace,
    pub n_trials: usize,
    pub tpe: TpeSettings,
    pub k_folds: usize,
    pub seed: u64,
    pub base: &'a TrainConfig,
    pub model_config: &'a ModelConfig,
    pub init: Option<&'a ModelParams>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub result: SearchResult,
    pub best_config: TrainConfig,
    /// Fold models of the winning trial.
    pub best_cv: CvOutcome,
}

/// Model-based search maximizing mean validation AUROC over patient-grouped
/// folds. The fold models of the best trial are kept.
pub fn search_finetune(s: &FinetuneSearch) -> Result<SearchOutcome> {
    let best: Mutex<Option<(f64, usize, CvOutcome)>> = Mutex::new(None);
    let fold_seed = rng::derive_seed(s.seed, "folds", 0);
    let objective = |trial: &TrialConfig, index: usize| -> Result<Evaluation> {
        let cfg = apply_trial(s.base, trial)?;
        let cv = cross_validate(s.items, s.k_folds, fold_seed, &cfg, s.model_config, s.init)?;
        let eval = Evaluation::from_folds(cv.fold_aurocs.clone())?;
        let mut guard = best.lock().expect("search state lock");
        let replace = match guard.as_ref() {
            None => true,
            Some((score, i, _)) => eval.score > *score || (eval.score == *score && index < *i),
        };
        if replace {
            *guard = Some((eval.score, index, cv));
        }
        Ok(eval)
    };
    let result = search::bayes_search(s.space, s.n_trials, &s.tpe, s.seed, Direction::Maximize, objective)?;
    let (_, index, best_cv) = best.into_inner().expect("search state lock").expect("at least one trial");
    debug_assert_eq!(index, result.best);
    let best_config = apply_trial(s.base, &result.best_trial().config)?;
    Ok(SearchOutcome {
        result,
        best_config,
        best_cv,
    })
}

/// Random search over pretraining settings, selecting the lowest best
/// validation loss.
pub fn search_pretrain(
    images: &[crate::records::ImageRef],
    space: &SearchSpace,
    n_runs: usize,
    seed: u64,
    base: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(SearchResult, PretrainOutput)> {
    let best: Mutex<Option<(f64, usize, PretrainOutput)>> = Mutex::new(None);
    let objective = |trial: &TrialConfig, index: usize| -> Result<Evaluation> {
        let cfg = apply_trial(base, trial)?;
        let out = pretrain(images, &cfg, model_config)?;
        let loss = out
            .history
            .val_losses()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let mut guard = best.lock().expect("search state lock");
        let replace = match guard.as_ref() {
            None => true,
            Some((l, i, _)) => loss < *l || (loss == *l && index < *i),
        };
        if replace {
            *guard = Some((loss, index, out));
        }
        Ok(Evaluation::single(loss))
    };
    let result = search::random_search(space, n_runs, seed, Direction::Minimize, objective)?;
    let (_, _, out) = best.into_inner().expect("search state lock").expect("at least one run");
    Ok((result, out))
}

/// Description of a finished evaluation, used by reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScores {
    pub model: String,
    pub modality: crate::records::Modality,
    pub runs: Vec<Vec<ScoredSample>>,
}

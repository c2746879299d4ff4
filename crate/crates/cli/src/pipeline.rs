//! Pipeline stages. Each reads the artifacts of earlier stages from the run
//! directory, writes its own, and records them in the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use oct_stroke::cohort::{filter_scan_studies, filter_stroke_encounters};
use oct_stroke::eval::{self, ScoredSample};
use oct_stroke::experiment::{scored_sample, search_finetune, search_pretrain, to_examples, train_model, FinetuneSearch, Item};
use oct_stroke::features::{feature_schema, fit_normalizer, FeatureExtractor, RawFeatureRow, ICD_GROUPS, NUMERIC_NAMES};
use oct_stroke::labeling::{assign_labels, patient_fold_groups, patient_split, task_filter};
use oct_stroke::nn::{Checkpoint, FusionMode, ModelConfig, ModelParams};
use oct_stroke::records::{age_in_years, Modality, PatientId, ScanStudy, StudyId};
use oct_stroke::rng::derive_seed;
use oct_stroke::synthgen::{generate_population, Population};
use oct_stroke::trainer::search::TrialConfig;
use oct_stroke::trainer::{predict, pretrain_images, PretrainMode, TrainConfig};
use oct_stroke::Error;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, LabelRow, Split};
use crate::manifest::{now, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Cohort,
    Label,
    Features,
    Pretrain,
    Search,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Cohort,
        Stage::Label,
        Stage::Features,
        Stage::Pretrain,
        Stage::Search,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cohort => "cohort",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Pretrain => "pretrain",
            Stage::Search => "search",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

pub const STROKE_EVENTS: &str = "stroke_events.tsv";
pub const COHORT_TRACE: &str = "cohort_trace.tsv";
pub const ELIGIBLE: &str = "eligible_studies.tsv";
pub const COHORT_SUMMARY: &str = "cohort_summary.json";
pub const FEATURES_JSON: &str = "features.json";
pub const FEATURES_TSV: &str = "features.tsv";
pub const FEATURE_SCHEMA: &str = "feature_schema.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const METRICS_JSON: &str = "metrics.json";
pub const REPORT_TXT: &str = "report.txt";

pub fn labels_file(m: Modality) -> String {
    format!("labels_{m}.tsv")
}

/// One trained model family: a fusion mode on one image modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub fusion: FusionMode,
    pub modality: Modality,
}

impl Variant {
    /// Model label used in report cells.
    pub fn model(self) -> &'static str {
        match self.fusion {
            FusionMode::ImageOnly => "unimodal",
            FusionMode::Multimodal => "multimodal",
        }
    }

    pub fn id(self) -> String {
        format!("{}_{}", self.model(), self.modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub variant: String,
    pub trial: usize,
    pub params: TrialConfig,
    pub config: TrainConfig,
    pub mean_val_auroc: f64,
    pub fold_val_aurocs: Vec<f64>,
    /// Epoch budget for retraining on the whole training split.
    pub retrain_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub model: String,
    pub modality: Modality,
    /// Test-set scores of each cross-validation fold model.
    pub folds: Vec<Vec<ScoredSample>>,
    /// Test-set scores of the model retrained on the full training split.
    pub final_model: Option<Vec<ScoredSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub encounters: usize,
    pub included_encounters: usize,
    pub events_by_subtype: BTreeMap<String, usize>,
    pub planted_strokes: usize,
    pub planted_recovered: usize,
    pub studies: usize,
    pub eligible_studies: usize,
}

/// Seeds of every stage, all derived from the root seed.
pub fn stage_seeds(root: u64) -> BTreeMap<String, u64> {
    let search = derive_seed(root, "search", 0);
    BTreeMap::from([
        ("root".to_string(), root),
        ("synth".to_string(), derive_seed(root, "synth", 0)),
        ("split".to_string(), derive_seed(root, "split", 0)),
        ("pretrain".to_string(), derive_seed(root, "pretrain", 0)),
        ("search".to_string(), search),
        // Fold assignment used by the search, also written into the labels.
        ("folds".to_string(), derive_seed(search, "folds", 0)),
        ("finetune".to_string(), derive_seed(root, "finetune", 0)),
        ("final".to_string(), derive_seed(root, "final", 0)),
    ])
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    pub fn open(cfg: RunConfig, dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seeds = stage_seeds(cfg.seed);
        let manifest = RunManifest::open(dir, &cfg.hash(), seeds.clone())?;
        io::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        Ok(Run {
            cfg,
            dir: dir.to_path_buf(),
            manifest,
            seeds,
        })
    }

    fn seed(&self, name: &str) -> u64 {
        self.seeds[name]
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, stage: Stage, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Dependency {
                stage: stage.name(),
                path: p,
            })
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v = Vec::new();
        for &modality in &self.cfg.evaluate.modalities {
            for &fusion in &self.cfg.evaluate.fusions {
                v.push(Variant { fusion, modality });
            }
        }
        v
    }

    fn model_config(&self, fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            fusion,
            ..self.cfg.model.clone()
        }
    }

    pub fn run(&mut self, stage: Stage) -> CliResult<()> {
        let started = now();
        log::info!("stage {}", stage.name());
        let outputs = match stage {
            Stage::Synth => self.synth()?,
            Stage::Cohort => self.cohort()?,
            Stage::Label => self.label()?,
            Stage::Features => self.features()?,
            Stage::Pretrain => self.pretrain()?,
            Stage::Search => self.search()?,
            Stage::Finetune => self.finetune()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
        };
        self.manifest.record(&self.dir, stage.name(), &outputs, started)?;
        self.manifest.save(&self.dir)?;
        Ok(())
    }

    pub fn full_run(&mut self) -> CliResult<()> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------ stages

    fn synth(&self) -> CliResult<Vec<PathBuf>> {
        let cfg = oct_stroke::synthgen::SynthConfig {
            seed: self.seed("synth"),
            ..self.cfg.synth.clone()
        };
        let pop = generate_population(&cfg)?;
        log::info!(
            "{} patients, {} encounters, {} studies, {} planted strokes",
            pop.patients.len(),
            pop.encounters.len(),
            pop.studies.len(),
            pop.planted.len()
        );
        Ok(io::write_population(&self.dir, &pop, self.cfg.output.export_images)?)
    }

    fn population(&self) -> CliResult<Population> {
        for f in [io::PATIENTS, io::ENCOUNTERS, io::STUDIES, io::IMAGES, io::PLANTED] {
            self.require(Stage::Synth, f)?;
        }
        Ok(io::read_population(&self.dir)?)
    }

    fn cohort(&self) -> CliResult<Vec<PathBuf>> {
        let pop = self.population()?;
        let (events, traces) = filter_stroke_encounters(&pop.patients, &pop.encounters);
        let eligible = filter_scan_studies(&pop.patients, &pop.studies);
        let mut by_subtype = BTreeMap::new();
        for e in &events {
            *by_subtype.entry(e.subtype.to_string()).or_insert(0) += 1;
        }
        let found: std::collections::HashSet<_> = events.iter().map(|e| &e.encounter_id).collect();
        let summary = CohortSummary {
            patients: pop.patients.len(),
            encounters: pop.encounters.len(),
            included_encounters: events.len(),
            events_by_subtype: by_subtype,
            planted_strokes: pop.planted.len(),
            planted_recovered: pop.planted.iter().filter(|p| found.contains(&p.encounter_id)).count(),
            studies: pop.studies.len(),
            eligible_studies: eligible.len(),
        };
        if summary.planted_recovered != summary.planted_strokes {
            log::warn!(
                "cohort rules recovered {} of {} planted strokes",
                summary.planted_recovered,
                summary.planted_strokes
            );
        }
        io::write_events(&self.path(STROKE_EVENTS), &events)?;
        io::write_traces(&self.path(COHORT_TRACE), &traces)?;
        let ids: Vec<StudyId> = eligible.iter().map(|s| s.study_id.clone()).collect();
        io::write_study_ids(&self.path(ELIGIBLE), &ids)?;
        io::write_json(&self.path(COHORT_SUMMARY), &summary)?;
        Ok([STROKE_EVENTS, COHORT_TRACE, ELIGIBLE, COHORT_SUMMARY].iter().map(|f| self.path(f)).collect())
    }

    fn eligible_studies(&self, pop: &Population) -> CliResult<Vec<ScanStudy>> {
        let ids: std::collections::HashSet<StudyId> =
            io::read_study_ids(&self.require(Stage::Cohort, ELIGIBLE)?)?.into_iter().collect();
        Ok(pop.studies.iter().filter(|s| ids.contains(&s.study_id)).cloned().collect())
    }

    fn label(&self) -> CliResult<Vec<PathBuf>> {
        let pop = self.population()?;
        let events = io::read_events(&self.require(Stage::Cohort, STROKE_EVENTS)?)?;
        let studies = self.eligible_studies(&pop)?;
        let spec = self.cfg.task_spec()?;
        let mut outputs = Vec::new();
        for &m in &self.cfg.evaluate.modalities {
            let samples = assign_labels(&pop.patients, &studies, &events, self.cfg.labels.window_days, m)?;
            let kept = task_filter(&samples, spec);
            let split = patient_split(&kept, self.cfg.labels.test_fraction, self.seed("split"))?;
            let groups = patient_fold_groups(&split.train, self.cfg.labels.k_folds, self.seed("folds"))?;
            let fold_of: HashMap<&PatientId, usize> =
                groups.iter().enumerate().flat_map(|(k, g)| g.iter().map(move |p| (p, k))).collect();
            let test: std::collections::HashSet<&PatientId> = split.test.iter().map(|s| &s.patient_id).collect();
            let rows: Vec<LabelRow> = kept
                .iter()
                .map(|s| {
                    if test.contains(&s.patient_id) {
                        LabelRow::new(s, Split::Test, None)
                    } else {
                        LabelRow::new(s, Split::Train, fold_of.get(&s.patient_id).copied())
                    }
                })
                .collect();
            log::info!(
                "{m}: {} samples ({} positive), {} train / {} test",
                rows.len(),
                rows.iter().filter(|r| r.y == 1).count(),
                split.train.len(),
                split.test.len()
            );
            let p = self.path(&labels_file(m));
            io::write_tsv(&p, &rows)?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    fn label_rows(&self, m: Modality) -> CliResult<Vec<LabelRow>> {
        Ok(io::read_tsv(&self.require(Stage::Label, &labels_file(m))?)?)
    }

    fn features(&self) -> CliResult<Vec<PathBuf>> {
        let pop = self.population()?;
        let extractor = FeatureExtractor::new(&pop.patients, &pop.encounters);
        let mut rows: BTreeMap<String, RawFeatureRow> = BTreeMap::new();
        let mut train_ids = Vec::new();
        for (i, &m) in self.cfg.evaluate.modalities.iter().enumerate() {
            for r in self.label_rows(m)? {
                if !rows.contains_key(&r.study_id) {
                    let t = oct_stroke::records::parse_timestamp(&r.t_oct)?;
                    rows.insert(r.study_id.clone(), extractor.extract(&r.patient_id.as_str().into(), t)?);
                }
                if i == 0 && r.split == Split::Train {
                    train_ids.push(r.study_id.clone());
                }
            }
        }
        let train_rows: Vec<RawFeatureRow> = train_ids.iter().map(|id| rows[id].clone()).collect();
        let normalizer = fit_normalizer(&train_rows)?;
        io::write_json(&self.path(FEATURES_JSON), &rows)?;
        io::write_json(&self.path(FEATURE_SCHEMA), &feature_schema(Some(&normalizer)))?;
        io::write_text(&self.path(FEATURES_TSV), &features_tsv(&rows))?;
        Ok([FEATURES_JSON, FEATURE_SCHEMA, FEATURES_TSV].iter().map(|f| self.path(f)).collect())
    }

    /// Train and test items of one modality, in label-file order.
    pub fn items(&self, m: Modality) -> CliResult<(Vec<Item>, Vec<Item>)> {
        let pop = self.population()?;
        let rows = self.label_rows(m)?;
        let features: HashMap<String, RawFeatureRow> = io::read_json(&self.require(Stage::Features, FEATURES_JSON)?)?;
        let studies: HashMap<&str, &ScanStudy> = pop.studies.iter().map(|s| (s.study_id.as_str(), s)).collect();
        let births: HashMap<&str, _> = pop.patients.iter().map(|p| (p.patient_id.as_str(), p.birth_date)).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in rows {
            let study = studies
                .get(r.study_id.as_str())
                .ok_or_else(|| Error::data(format!("labelled study {} not in population", r.study_id)))?;
            let sample = r.to_sample(study)?;
            let raw = features
                .get(&r.study_id)
                .cloned()
                .ok_or_else(|| Error::data(format!("no features for study {}", r.study_id)))?;
            let age_years = births.get(r.patient_id.as_str()).copied().flatten().map(|b| age_in_years(b, sample.t_oct));
            let item = Item { sample, raw, age_years };
            match r.split {
                Split::Train => train.push(item),
                Split::Test => test.push(item),
            }
        }
        Ok((train, test))
    }

    fn pretrain_dir(m: Modality) -> String {
        format!("pretrain_{m}")
    }

    fn pretrain(&self) -> CliResult<Vec<PathBuf>> {
        if !self.cfg.pretrain.enabled {
            log::info!("pretraining disabled");
            return Ok(Vec::new());
        }
        let pop = self.population()?;
        let mut outputs = Vec::new();
        for (i, &m) in self.cfg.evaluate.modalities.iter().enumerate() {
            // Only training-split studies: test images never shape the encoder.
            let train_ids: std::collections::HashSet<String> = self
                .label_rows(m)?
                .into_iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.study_id)
                .collect();
            let studies: Vec<ScanStudy> =
                pop.studies.iter().filter(|s| train_ids.contains(s.study_id.as_str())).cloned().collect();
            let mode = match m {
                Modality::Oct if self.cfg.pretrain.mode == PretrainMode::Infrared => {
                    return Err(Error::config("pretrain.mode = \"infrared\" cannot feed the OCT encoder").into())
                }
                Modality::Oct => self.cfg.pretrain.mode,
                Modality::Infrared => PretrainMode::Infrared,
            };
            let images = pretrain_images(&studies, mode);
            let seed = derive_seed(self.seed("pretrain"), m.as_str(), i as u64);
            let base = TrainConfig {
                seed,
                ..self.cfg.pretrain.train.clone()
            };
            let (ledger, out) = search_pretrain(
                &images,
                &self.cfg.search.pretrain_space(),
                self.cfg.pretrain.search_runs,
                seed,
                &base,
                &self.cfg.model,
            )?;
            let dir = Self::pretrain_dir(m);
            let ck = Checkpoint::new(out.model, None, Some(out.temperature));
            let files = [
                (format!("{dir}/checkpoint.json"), ck.to_json()?),
                (format!("{dir}/history.tsv"), out.history.to_tsv()),
                (format!("{dir}/ledger.tsv"), ledger.to_tsv()),
                (format!("{dir}/tau_trace.tsv"), tau_tsv(&out.history.tau_trace)),
            ];
            for (rel, text) in files {
                let p = self.path(&rel);
                io::write_text(&p, &text)?;
                outputs.push(p);
            }
        }
        Ok(outputs)
    }

    fn pretrained(&self, m: Modality) -> CliResult<Option<ModelParams>> {
        if !self.cfg.pretrain.enabled {
            return Ok(None);
        }
        let p = self.require(Stage::Pretrain, &format!("{}/checkpoint.json", Self::pretrain_dir(m)))?;
        Ok(Some(Checkpoint::load(&p)?.model))
    }

    fn search_dir(v: Variant) -> String {
        format!("search_{}", v.id())
    }

    fn search(&self) -> CliResult<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        let space = self.cfg.search.finetune_space();
        let base = TrainConfig {
            seed: self.seed("finetune"),
            ..self.cfg.finetune.clone()
        };
        for v in self.variants() {
            let (train, _) = self.items(v.modality)?;
            let init = self.pretrained(v.modality)?;
            let model_config = self.model_config(v.fusion);
            let outcome = search_finetune(&FinetuneSearch {
                items: &train,
                space: &space,
                n_trials: self.cfg.search.n_trials,
                tpe: self.cfg.search.tpe(),
                k_folds: self.cfg.labels.k_folds,
                seed: self.seed("search"),
                base: &base,
                model_config: &model_config,
                init: init.as_ref(),
            })?;
            let best = outcome.result.best_trial();
            log::info!("{}: best trial {} mean validation AUROC {:.4}", v.id(), best.index, best.score);
            let dir = Self::search_dir(v);
            let summary = BestConfig {
                variant: v.id(),
                trial: best.index,
                params: best.config.clone(),
                config: outcome.best_config.clone(),
                mean_val_auroc: outcome.best_cv.mean_auroc(),
                fold_val_aurocs: outcome.best_cv.fold_aurocs.clone(),
                retrain_epochs: outcome.best_cv.retrain_epochs(),
            };
            let mut files = vec![
                (format!("{dir}/ledger.tsv"), outcome.result.to_tsv()),
                (format!("{dir}/best_config.json"), to_json(&summary)?),
            ];
            for (k, m) in outcome.best_cv.models.iter().enumerate() {
                let ck = Checkpoint::new(m.model.clone(), Some(m.normalizer.clone()), None);
                files.push((format!("{dir}/fold_{k}.json"), ck.to_json()?));
                files.push((format!("{dir}/fold_{k}_history.tsv"), m.history.to_tsv()));
            }
            for (rel, text) in files {
                let p = self.path(&rel);
                io::write_text(&p, &text)?;
                outputs.push(p);
            }
        }
        Ok(outputs)
    }

    fn best_config(&self, v: Variant) -> CliResult<BestConfig> {
        Ok(io::read_json(&self.require(Stage::Search, &format!("{}/best_config.json", Self::search_dir(v)))?)?)
    }

    fn final_dir(v: Variant) -> String {
        format!("final_{}", v.id())
    }

    fn finetune(&self) -> CliResult<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        for v in self.variants() {
            let best = self.best_config(v)?;
            let (train, _) = self.items(v.modality)?;
            let init = self.pretrained(v.modality)?;
            let cfg = TrainConfig {
                max_epochs: best.retrain_epochs,
                seed: self.seed("final"),
                ..best.config
            };
            let trained = train_model(init.as_ref(), &train, None, &cfg, &self.model_config(v.fusion))?;
            let dir = Self::final_dir(v);
            let ck = Checkpoint::new(trained.model, Some(trained.normalizer), None);
            for (rel, text) in [
                (format!("{dir}/checkpoint.json"), ck.to_json()?),
                (format!("{dir}/history.tsv"), trained.history.to_tsv()),
            ] {
                let p = self.path(&rel);
                io::write_text(&p, &text)?;
                outputs.push(p);
            }
        }
        Ok(outputs)
    }

    fn score(&self, ck: &Checkpoint, items: &[Item]) -> CliResult<Vec<ScoredSample>> {
        let normalizer = ck
            .normalizer
            .as_ref()
            .ok_or_else(|| Error::data("fine-tuned checkpoint has no feature normalizer"))?;
        let scores = predict(&ck.model, &to_examples(items, normalizer), self.cfg.evaluate.batch_size)?;
        Ok(items.iter().zip(scores).map(|(it, s)| scored_sample(it, s)).collect())
    }

    fn scores_file(v: Variant) -> String {
        format!("scores_{}.json", v.id())
    }

    fn evaluate(&self) -> CliResult<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        for v in self.variants() {
            let (_, test) = self.items(v.modality)?;
            let dir = Self::search_dir(v);
            let mut folds = Vec::new();
            for k in 0..self.cfg.labels.k_folds {
                let p = self.require(Stage::Search, &format!("{dir}/fold_{k}.json"))?;
                folds.push(self.score(&Checkpoint::load(&p)?, &test)?);
            }
            let final_path = self.path(&format!("{}/checkpoint.json", Self::final_dir(v)));
            let final_model = if final_path.exists() {
                Some(self.score(&Checkpoint::load(&final_path)?, &test)?)
            } else {
                log::warn!("{}: no retrained model; evaluating fold models only", v.id());
                None
            };
            let scores = VariantScores {
                model: v.model().to_string(),
                modality: v.modality,
                folds,
                final_model,
            };
            let p = self.path(&Self::scores_file(v));
            io::write_json(&p, &scores)?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    fn report(&self) -> CliResult<Vec<PathBuf>> {
        let mut report = eval::MetricsReport::new();
        let mut files: Vec<(String, String)> = Vec::new();
        for v in self.variants() {
            let s: VariantScores = io::read_json(&self.require(Stage::Evaluate, &Self::scores_file(v))?)?;
            report.extend(eval::overall_report(&s.folds, &s.model, s.modality)?);
            report.extend(eval::horizon_report(&s.folds, &s.model, s.modality)?);
            for g in eval::Grouping::ALL {
                report.extend(eval::subgroup_report(&s.folds, g, &s.model, s.modality)?);
            }
            let run = s.final_model.as_ref().unwrap_or(&s.folds[0]);
            let (scores, labels): (Vec<f64>, Vec<u8>) = run.iter().map(|x| (x.score, x.label)).unzip();
            if labels.contains(&0) && labels.contains(&1) {
                files.push((format!("curves/roc_{}.tsv", v.id()), curve_tsv("fpr\ttpr", &eval::roc_curve(&scores, &labels)?)));
                files.push((
                    format!("curves/pr_{}.tsv", v.id()),
                    curve_tsv("recall\tprecision", &eval::pr_curve(&scores, &labels)?),
                ));
            }
        }
        let mut text = String::new();
        if let Ok(p) = self.require(Stage::Cohort, COHORT_SUMMARY) {
            let summary: CohortSummary = io::read_json(&p)?;
            let table = cohort_table(&summary, &self.sample_counts()?);
            let _ = writeln!(text, "{}", table.render_text());
            files.push(("tables/table_cohort.txt".into(), table.render_text()));
            files.push(("tables/table_cohort.tsv".into(), table.render_tsv()));
        }
        for (name, table) in eval::all_tables(&report) {
            let _ = writeln!(text, "{}", table.render_text());
            files.push((format!("tables/{name}.txt"), table.render_text()));
            files.push((format!("tables/{name}.tsv"), table.render_tsv()));
        }
        files.push((METRICS_TSV.into(), report.to_tsv()));
        files.push((METRICS_JSON.into(), to_json(&report)?));
        files.push((REPORT_TXT.into(), text));
        let mut outputs = Vec::new();
        for (rel, body) in files {
            let p = self.path(&rel);
            io::write_text(&p, &body)?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    /// (modality, samples, positives, patients, train samples, test samples).
    fn sample_counts(&self) -> CliResult<Vec<(Modality, [usize; 5])>> {
        let mut out = Vec::new();
        for &m in &self.cfg.evaluate.modalities {
            let rows = self.label_rows(m)?;
            let patients: std::collections::HashSet<&str> = rows.iter().map(|r| r.patient_id.as_str()).collect();
            out.push((
                m,
                [
                    rows.len(),
                    rows.iter().filter(|r| r.y == 1).count(),
                    patients.len(),
                    rows.iter().filter(|r| r.split == Split::Train).count(),
                    rows.iter().filter(|r| r.split == Split::Test).count(),
                ],
            ));
        }
        Ok(out)
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(Error::data(e.to_string())))
}

fn tau_tsv(trace: &[f64]) -> String {
    let mut s = String::from("step\ttau\n");
    for (i, t) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{t:.17e}");
    }
    s
}

fn curve_tsv(header: &str, pts: &[eval::CurvePoint]) -> String {
    let mut s = format!("threshold\t{header}\n");
    for p in pts {
        let _ = writeln!(s, "{}\t{:.17e}\t{:.17e}", p.threshold, p.x, p.y);
    }
    s
}

fn features_tsv(rows: &BTreeMap<String, RawFeatureRow>) -> String {
    let mut s = String::from("study_id");
    for n in NUMERIC_NAMES {
        let _ = write!(s, "\t{n}");
    }
    s.push_str("\tsex\tsmoking_status");
    for (label, _, _) in ICD_GROUPS {
        let _ = write!(s, "\t{label}");
    }
    s.push('\n');
    for (id, r) in rows {
        s.push_str(id);
        for v in r.numeric() {
            let _ = write!(s, "\t{v}");
        }
        let _ = write!(s, "\t{}\t{}", r.sex, r.smoking_status);
        for f in r.icd_group_flags {
            let _ = write!(s, "\t{}", u8::from(f));
        }
        s.push('\n');
    }
    s
}

fn cohort_table(summary: &CohortSummary, counts: &[(Modality, [usize; 5])]) -> eval::Table {
    let mut rows = vec![
        ("Patients".to_string(), vec![summary.patients.to_string()]),
        ("Encounters".to_string(), vec![summary.encounters.to_string()]),
        ("Confirmed stroke encounters".to_string(), vec![summary.included_encounters.to_string()]),
    ];
    for (subtype, n) in &summary.events_by_subtype {
        rows.push((format!("  {subtype}"), vec![n.to_string()]));
    }
    rows.push(("Eligible imaging studies".to_string(), vec![summary.eligible_studies.to_string()]));
    let mut sections = vec![eval::TableSection { name: None, rows }];
    for (m, [n, pos, patients, train, test]) in counts {
        sections.push(eval::TableSection {
            name: Some(match m {
                Modality::Oct => "OCT".into(),
                Modality::Infrared => "Infrared".into(),
            }),
            rows: vec![
                ("Samples".into(), vec![n.to_string()]),
                ("Positive samples".into(), vec![pos.to_string()]),
                ("Patients".into(), vec![patients.to_string()]),
                ("Train / test samples".into(), vec![format!("{train} / {test}")]),
            ],
        });
    }
    eval::Table {
        title: "Cohort summary".into(),
        columns: vec!["".into(), "Count".into()],
        sections,
        footer: None,
    }
}

//! Synthetic patient populations.
//!
//! The generator emits the same record types the cohort rules consume, so
//! the rule engine runs identically on synthetic and real extracts. Every
//! stroke it plants is built to pass all confirmation rules; every
//! stroke-like encounter it adds to other patients is built to fail at least
//! one of them. Per-patient streams are derived from `(seed, patient index)`.

pub mod render;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::*;
use crate::rng::{self, Stream};
use render::{SyntheticImage, SyntheticVolume, MIN_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub stroke_prevalence: f64,
    /// Inclusive range of imaging visits per patient. Each visit yields one
    /// study per imaged eye.
    pub scans_per_patient: [u32; 2],
    pub image_height: usize,
    pub image_width: usize,
    pub signal_strength_oct: f64,
    pub signal_strength_ir: f64,
    pub signal_strength_ehr: f64,
    pub time_span_days: i64,
    pub seed: u64,
    /// Scans within this many days of a planted stroke carry the lesion.
    pub label_window_days: f64,
    pub start_date: NaiveDate,
    pub minor_fraction: f64,
    pub near_miss_fraction: f64,
    pub non_macula_fraction: f64,
    pub non_art_fraction: f64,
    pub missing_infrared_fraction: f64,
    pub single_eye_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            stroke_prevalence: 0.024,
            scans_per_patient: [1, 3],
            image_height: 64,
            image_width: 64,
            signal_strength_oct: 0.3,
            signal_strength_ir: 0.3,
            signal_strength_ehr: 1.0,
            time_span_days: 3000,
            seed: 0,
            label_window_days: 365.0,
            start_date: NaiveDate::from_ymd_opt(2015, 3, 1).expect("valid date"),
            minor_fraction: 0.02,
            near_miss_fraction: 0.25,
            non_macula_fraction: 0.08,
            non_art_fraction: 0.04,
            missing_infrared_fraction: 0.04,
            single_eye_fraction: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be in [0,1], got {v}")))
            }
        };
        fraction("stroke_prevalence", self.stroke_prevalence)?;
        fraction("minor_fraction", self.minor_fraction)?;
        fraction("near_miss_fraction", self.near_miss_fraction)?;
        fraction("non_macula_fraction", self.non_macula_fraction)?;
        fraction("non_art_fraction", self.non_art_fraction)?;
        fraction("missing_infrared_fraction", self.missing_infrared_fraction)?;
        fraction("single_eye_fraction", self.single_eye_fraction)?;
        if self.image_height < MIN_SIDE || self.image_width < MIN_SIDE {
            return Err(Error::config(format!(
                "image size must be at least {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        for (name, v) in [
            ("signal_strength_oct", self.signal_strength_oct),
            ("signal_strength_ir", self.signal_strength_ir),
            ("signal_strength_ehr", self.signal_strength_ehr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        let [lo, hi] = self.scans_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "scans_per_patient range [{lo}, {hi}] must satisfy 1 <= min <= max"
            )));
        }
        if self.time_span_days < 60 {
            return Err(Error::config("time_span_days must be at least 60"));
        }
        if !(self.label_window_days > 0.0) {
            return Err(Error::config("label_window_days must be positive"));
        }
        Ok(())
    }
}

/// Ground truth for one stroke the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStroke {
    pub patient_id: PatientId,
    pub encounter_id: EncounterId,
    pub stroke_time: Timestamp,
    pub subtype: Subtype,
}

#[derive(Debug, Clone, Default)]
pub struct Population {
    pub patients: Vec<PatientRecord>,
    pub encounters: Vec<Encounter>,
    pub studies: Vec<ScanStudy>,
    pub planted: Vec<PlantedStroke>,
}

pub fn generate_population(config: &SynthConfig) -> Result<Population> {
    config.validate()?;
    let mut pop = Population::default();
    for index in 0..config.n_patients {
        let mut rng = rng::stream(config.seed, "patient", index as u64);
        PatientGen::new(config, index, &mut rng).generate(&mut pop);
    }
    Ok(pop)
}

/// Background diagnosis codes with their base rates. Stroke patients see the
/// cardiovascular-risk codes (flagged `true`) at elevated rates proportional
/// to the EHR signal strength.
const BACKGROUND_CODES: &[(&str, f64, bool)] = &[
    ("I10", 0.25, true),
    ("E11.9", 0.12, true),
    ("I48.91", 0.05, true),
    ("E78.5", 0.15, true),
    ("D64.9", 0.05, true),
    ("G47.33", 0.05, true),
    ("H35.30", 0.10, false),
    ("H40.10", 0.06, false),
    ("J45.909", 0.06, false),
    ("K21.9", 0.08, false),
    ("M54.5", 0.10, false),
    ("N18.3", 0.03, true),
    ("F32.9", 0.05, false),
    ("Z87.891", 0.08, false),
    ("R51.9", 0.05, false),
];

struct PatientGen<'a> {
    config: &'a SynthConfig,
    index: usize,
    rng: &'a mut Stream,
    patient_id: PatientId,
    start: Timestamp,
    encounter_count: usize,
}

struct Baseline {
    bmi: f64,
    systolic: f64,
    diastolic: f64,
    temperature: f64,
    pulse: f64,
    respiration: f64,
}

impl<'a> PatientGen<'a> {
    fn new(config: &'a SynthConfig, index: usize, rng: &'a mut Stream) -> Self {
        PatientGen {
            config,
            index,
            rng,
            patient_id: PatientId(format!("P{index:06}")),
            start: config.start_date.and_hms_opt(0, 0, 0).expect("midnight"),
            encounter_count: 0,
        }
    }

    fn next_encounter_id(&mut self) -> EncounterId {
        self.encounter_count += 1;
        EncounterId(format!("E{:06}-{:03}", self.index, self.encounter_count))
    }

    fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        Normal::new(mean, sd).expect("positive sd").sample(self.rng)
    }

    fn time_at(&self, days: f64) -> Timestamp {
        self.start + Duration::seconds((days * 86_400.0).round() as i64)
    }

    fn random_time(&mut self) -> Timestamp {
        let days = self.rng.random_range(0.0..self.config.time_span_days as f64);
        self.time_at(days)
    }

    fn generate(mut self, pop: &mut Population) {
        let cfg = self.config;
        let is_stroke = self.rng.random::<f64>() < cfg.stroke_prevalence;
        let is_minor = !is_stroke && self.rng.random::<f64>() < cfg.minor_fraction;
        let ehr = if is_stroke { cfg.signal_strength_ehr } else { 0.0 };

        let age_at_start = if is_minor {
            self.rng.random_range(8.0..15.0)
        } else {
            self.normal(55.0 + 8.0 * ehr, 13.0).clamp(22.0, 90.0)
        };
        let birth = self.start - Duration::seconds((age_at_start * 365.25 * 86_400.0) as i64);
        let sex = if self.rng.random_bool(0.45) { Sex::Male } else { Sex::Female };
        let p_current = (0.15 + 0.15 * ehr).min(0.6);
        let u = self.rng.random::<f64>();
        let smoking_status = if u < p_current {
            SmokingStatus::Current
        } else if u < p_current + 0.25 {
            SmokingStatus::Former
        } else {
            SmokingStatus::Never
        };
        pop.patients.push(PatientRecord {
            patient_id: self.patient_id.clone(),
            birth_date: Some(birth.date()),
            sex,
            smoking_status,
        });

        let baseline = Baseline {
            bmi: self.normal(27.0 + 3.0 * ehr, 3.5),
            systolic: self.normal(125.0 + 15.0 * ehr, 12.0),
            diastolic: self.normal(78.0 + 6.0 * ehr, 7.0),
            temperature: self.normal(36.8, 0.2),
            pulse: self.normal(74.0 + 5.0 * ehr, 8.0),
            respiration: self.normal(16.0, 1.5),
        };

        // Imaging visits, each with a same-day outpatient encounter.
        let [lo, hi] = cfg.scans_per_patient;
        let n_visits = self.rng.random_range(lo..=hi) as usize;
        let mut visit_times: Vec<Timestamp> = (0..n_visits)
            .map(|_| {
                let days = self.rng.random_range(30.0..cfg.time_span_days as f64);
                let hour = self.rng.random_range(8.0..17.0);
                self.time_at(days.floor() + hour / 24.0)
            })
            .collect();
        visit_times.sort();

        for &t in &visit_times {
            let admission = t - Duration::minutes(self.rng.random_range(10..60));
            let mut codes = Vec::new();
            if self.rng.random_bool(0.35) {
                codes.push("H35.30".to_owned());
            }
            let vitals = self.vitals(&baseline, 0.6);
            let encounter_id = self.next_encounter_id();
            pop.encounters.push(Encounter {
                encounter_id,
                patient_id: self.patient_id.clone(),
                encounter_type: EncounterType::Outpatient,
                admission_time: Some(admission),
                discharge_time: Some(admission + Duration::hours(2)),
                diagnosis_codes: codes,
                drug_orders: vec![],
                procedures: vec![],
                vitals,
            });
        }

        // Background history.
        let n_background = self.rng.random_range(0..=3);
        for _ in 0..n_background {
            let encounter = self.background_encounter(&baseline, ehr);
            pop.encounters.push(encounter);
        }

        // Planted strokes.
        let mut strokes: Vec<Timestamp> = Vec::new();
        if is_stroke {
            let n_events = if self.rng.random_bool(0.85) { 1 } else { 2 };
            while strokes.len() < n_events {
                let anchor = *visit_times.choose(self.rng).expect("at least one visit");
                let offset = self.rng.random_range(-450.0..450.0);
                let t = anchor + Duration::seconds((offset * 86_400.0) as i64);
                if strokes.iter().all(|s| days_between(*s, t).abs() >= 60.0) {
                    strokes.push(t);
                }
            }
            for &t in &strokes {
                let (encounter, subtype) = self.stroke_encounter(t);
                pop.planted.push(PlantedStroke {
                    patient_id: self.patient_id.clone(),
                    encounter_id: encounter.encounter_id.clone(),
                    stroke_time: t,
                    subtype,
                });
                pop.encounters.push(encounter);
            }
        } else if is_minor {
            if self.rng.random_bool(0.5) {
                let days = self.rng.random_range(0.0..365.0);
                let t = self.time_at(days);
                let (encounter, _) = self.stroke_encounter(t);
                pop.encounters.push(encounter);
            }
        } else if self.rng.random::<f64>() < cfg.near_miss_fraction {
            let encounter = self.near_miss_encounter();
            pop.encounters.push(encounter);
        }

        // Studies, one per imaged eye per visit.
        for (v, &t) in visit_times.iter().enumerate() {
            let eyes: Vec<Eye> = if self.rng.random::<f64>() < cfg.single_eye_fraction {
                vec![*[Eye::Left, Eye::Right].choose(self.rng).expect("non-empty")]
            } else {
                vec![Eye::Left, Eye::Right]
            };
            let positive = strokes
                .iter()
                .any(|s| days_between(t, *s).abs() <= cfg.label_window_days);
            for eye in eyes {
                let anatomy = if self.rng.random::<f64>() < cfg.non_macula_fraction {
                    *[Anatomy::Peripapillary, Anatomy::Anterior]
                        .choose(self.rng)
                        .expect("non-empty")
                } else {
                    Anatomy::Macula
                };
                let scan_mode = if self.rng.random::<f64>() < cfg.non_art_fraction {
                    ScanMode::Other
                } else {
                    ScanMode::Art
                };
                let has_ir = self.rng.random::<f64>() >= cfg.missing_infrared_fraction;
                let n_slices = self.rng.random_range(25..=49);
                let eye_tag = match eye {
                    Eye::Left => "L",
                    Eye::Right => "R",
                };
                let study_id = StudyId(format!("S{:06}-{:02}-{}", self.index, v, eye_tag));
                let image_seed = rng::derive_seed(cfg.seed, study_id.as_str(), 0);
                let oct_volume = OctVolume::Synthetic(SyntheticVolume {
                    positive,
                    signal_strength: cfg.signal_strength_oct,
                    height: cfg.image_height,
                    width: cfg.image_width,
                    n_slices,
                    seed: rng::derive_seed(image_seed, "oct", 0),
                });
                let infrared = has_ir.then(|| {
                    ImageRef::Synthetic(SyntheticImage {
                        positive,
                        modality: Modality::Infrared,
                        signal_strength: cfg.signal_strength_ir,
                        height: cfg.image_height,
                        width: cfg.image_width,
                        seed: rng::derive_seed(image_seed, "infrared", 0),
                    })
                });
                pop.studies.push(ScanStudy {
                    study_id,
                    patient_id: self.patient_id.clone(),
                    acquisition_time: t,
                    eye,
                    oct_volume,
                    infrared,
                    anatomy,
                    scan_mode,
                });
            }
        }
    }

    fn vitals(&mut self, b: &Baseline, p_present: f64) -> Option<VitalSigns> {
        if !self.rng.random_bool(p_present) {
            return None;
        }
        let draw = |rng: &mut Stream, mean: f64, sd: f64, lo: f64, hi: f64| {
            let v = Normal::new(mean, sd).expect("positive sd").sample(rng).clamp(lo, hi);
            rng.random_bool(0.9).then_some(v)
        };
        let vitals = VitalSigns {
            bmi: draw(self.rng, b.bmi, 1.0, 14.0, 60.0),
            systolic_bp: draw(self.rng, b.systolic, 6.0, 80.0, 230.0),
            diastolic_bp: draw(self.rng, b.diastolic, 4.0, 40.0, 140.0),
            temperature: draw(self.rng, b.temperature, 0.2, 35.0, 40.5),
            pulse_rate: draw(self.rng, b.pulse, 5.0, 35.0, 180.0),
            respiratory_rate: draw(self.rng, b.respiration, 1.0, 8.0, 40.0),
        };
        (!vitals.is_empty()).then_some(vitals)
    }

    fn background_encounter(&mut self, b: &Baseline, ehr: f64) -> Encounter {
        let admission = self.random_time();
        let u = self.rng.random::<f64>();
        let (encounter_type, stay_days) = if u < 0.6 {
            (EncounterType::Outpatient, 0.1)
        } else if u < 0.8 {
            (EncounterType::Other, 0.1)
        } else {
            (EncounterType::Inpatient, self.rng.random_range(1.0..8.0))
        };
        let mut diagnosis_codes = Vec::new();
        for &(code, rate, risk) in BACKGROUND_CODES {
            let p = if risk { (rate + 0.3 * ehr).min(0.95) } else { rate };
            if self.rng.random_bool(p) {
                diagnosis_codes.push(code.to_owned());
            }
        }
        let mut drug_orders = Vec::new();
        if self.rng.random_bool(0.1) {
            drug_orders.push(DrugOrder::Antiplatelet);
        }
        if self.rng.random_bool(0.3) {
            drug_orders.push(DrugOrder::Other);
        }
        let mut procedures = Vec::new();
        if self.rng.random_bool(0.05) {
            procedures.push(Procedure::Ct);
        }
        if self.rng.random_bool(0.2) {
            procedures.push(Procedure::Other);
        }
        let vitals = self.vitals(b, 0.7);
        Encounter {
            encounter_id: self.next_encounter_id(),
            patient_id: self.patient_id.clone(),
            encounter_type,
            admission_time: Some(admission),
            discharge_time: Some(admission + Duration::seconds((stay_days * 86_400.0) as i64)),
            diagnosis_codes,
            drug_orders,
            procedures,
            vitals,
        }
    }

    /// An inpatient stay satisfying every confirmation rule for its subtype.
    fn stroke_encounter(&mut self, admission: Timestamp) -> (Encounter, Subtype) {
        let u = self.rng.random::<f64>();
        let subtype = if u < 0.6 {
            Subtype::Is
        } else if u < 0.8 {
            Subtype::Tia
        } else {
            Subtype::Ich
        };
        let mut codes = Vec::new();
        let mut drugs = Vec::new();
        let stay_days;
        match subtype {
            Subtype::Is => {
                codes.push(format!("I63.{}", self.rng.random_range(0..10)));
                if self.rng.random_bool(0.2) {
                    codes.push("G459".to_owned());
                }
                match self.rng.random_range(0..3) {
                    0 => drugs.push(DrugOrder::Rtpa),
                    1 => drugs.push(DrugOrder::Antiplatelet),
                    _ => drugs.extend([DrugOrder::Rtpa, DrugOrder::Antiplatelet]),
                }
                stay_days = self.rng.random_range(1.0..10.0);
            }
            Subtype::Tia => {
                codes.push("G459".to_owned());
                drugs.push(DrugOrder::Antiplatelet);
                stay_days = self.rng.random_range(1.0..5.0);
            }
            Subtype::Ich => {
                let prefix = ["I60", "I61", "I62"].choose(self.rng).expect("non-empty");
                codes.push(format!("{prefix}.{}", self.rng.random_range(0..10)));
                if self.rng.random_bool(0.15) {
                    codes.push("I63.9".to_owned());
                }
                stay_days = self.rng.random_range(12.5..30.0);
            }
        }
        if self.rng.random_bool(0.3) {
            drugs.push(DrugOrder::Other);
        }
        let mut procedures = vec![if self.rng.random_bool(0.5) {
            Procedure::Ct
        } else {
            Procedure::CtAngiography
        }];
        if self.rng.random_bool(0.3) {
            procedures.push(Procedure::Other);
        }
        let encounter = Encounter {
            encounter_id: self.next_encounter_id(),
            patient_id: self.patient_id.clone(),
            encounter_type: EncounterType::Inpatient,
            admission_time: Some(admission),
            discharge_time: Some(admission + Duration::seconds((stay_days * 86_400.0) as i64)),
            diagnosis_codes: codes,
            drug_orders: drugs,
            procedures,
            vitals: None,
        };
        (encounter, subtype)
    }

    /// A stroke-like encounter that fails exactly one cohort rule.
    fn near_miss_encounter(&mut self) -> Encounter {
        let admission = self.random_time();
        let mut e = Encounter {
            encounter_id: self.next_encounter_id(),
            patient_id: self.patient_id.clone(),
            encounter_type: EncounterType::Inpatient,
            admission_time: Some(admission),
            discharge_time: Some(admission + Duration::days(3)),
            diagnosis_codes: vec!["I63.9".to_owned()],
            drug_orders: vec![DrugOrder::Rtpa],
            procedures: vec![Procedure::Ct],
            vitals: None,
        };
        match self.rng.random_range(0..7) {
            // ischaemic stroke without a confirming drug
            0 => e.drug_orders = vec![DrugOrder::Other],
            // TIA with r-TPA only (TIA needs an antiplatelet)
            1 => {
                e.diagnosis_codes = vec!["G459".to_owned()];
                e.procedures = vec![Procedure::CtAngiography];
            }
            // haemorrhage with a stay of at most 12 days
            2 => {
                e.diagnosis_codes = vec!["I61.9".to_owned()];
                e.drug_orders = vec![];
                let stay = if self.rng.random_bool(0.3) {
                    12.0
                } else {
                    self.rng.random_range(1.0..12.0)
                };
                e.discharge_time = Some(admission + Duration::seconds((stay * 86_400.0) as i64));
            }
            3 => e.encounter_type = EncounterType::Outpatient,
            4 => {
                e.procedures = vec![Procedure::Other];
                e.drug_orders = vec![DrugOrder::Antiplatelet];
            }
            5 => e.discharge_time = None,
            _ => {
                e.diagnosis_codes = vec!["I10".to_owned()];
                e.drug_orders = vec![DrugOrder::Antiplatelet, DrugOrder::Rtpa];
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_population() {
        let pop = generate_population(&SynthConfig {
            n_patients: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(pop.patients.is_empty());
        assert!(pop.encounters.is_empty());
        assert!(pop.studies.is_empty());
        assert!(pop.planted.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { stroke_prevalence: 1.5, ..Default::default() },
            SynthConfig { stroke_prevalence: -0.1, ..Default::default() },
            SynthConfig { image_height: 4, ..Default::default() },
            SynthConfig { signal_strength_ehr: -1.0, ..Default::default() },
            SynthConfig { scans_per_patient: [3, 1], ..Default::default() },
        ] {
            assert!(matches!(generate_population(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn records_are_well_formed() {
        let pop = generate_population(&SynthConfig {
            n_patients: 200,
            stroke_prevalence: 0.2,
            ..Default::default()
        })
        .unwrap();
        let mut ids: Vec<_> = pop.patients.iter().map(|p| &p.patient_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 200);
        for e in &pop.encounters {
            e.validate().unwrap();
        }
        for s in &pop.studies {
            assert!((25..=49).contains(&s.oct_volume.len()));
            assert_eq!(s.oct_volume.dims(), (64, 64));
        }
        assert!(!pop.planted.is_empty());
    }
}

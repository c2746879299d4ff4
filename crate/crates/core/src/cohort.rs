//! Stroke cohort rules: encounter inclusion, subtype classification,
//! subtype-specific confirmation, and imaging-study eligibility.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::*;

pub const ADULT_AGE_YEARS: i32 = 18;
/// A haemorrhage is confirmed by a stay strictly longer than this.
pub const ICH_MIN_STAY_DAYS: f64 = 12.0;

const ICH_PREFIXES: [&str; 3] = ["I60", "I61", "I62"];
const IS_PREFIX: &str = "I63";
const TIA_CODE: &str = "G459";

/// Upper-cases and drops the dot so `g45.9` and `G459` compare equal.
pub fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|c| *c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

fn code_subtype(code: &str) -> Option<Subtype> {
    let code = normalize_code(code);
    if ICH_PREFIXES.iter().any(|p| code.starts_with(p)) {
        Some(Subtype::Ich)
    } else if code.starts_with(IS_PREFIX) {
        Some(Subtype::Is)
    } else if code.starts_with(TIA_CODE) {
        Some(Subtype::Tia)
    } else {
        None
    }
}

/// True for I60-I63 and G459, the codes that define a stroke encounter.
pub fn is_stroke_code(code: &str) -> bool {
    code_subtype(code).is_some()
}

fn precedence(s: Subtype) -> u8 {
    match s {
        Subtype::Ich => 3,
        Subtype::Is => 2,
        Subtype::Tia => 1,
    }
}

/// Subtype from diagnosis codes. When several stroke classes co-occur the
/// haemorrhage wins, then ischaemic stroke, then TIA.
pub fn classify_subtype<S: AsRef<str>>(diagnosis_codes: &[S]) -> Result<Subtype> {
    diagnosis_codes
        .iter()
        .filter_map(|c| code_subtype(c.as_ref()))
        .max_by_key(|s| precedence(*s))
        .ok_or_else(|| {
            Error::Classification(format!(
                "no stroke code among {:?}",
                diagnosis_codes.iter().map(AsRef::as_ref).collect::<Vec<_>>()
            ))
        })
}

pub fn confirm_stroke(subtype: Subtype, drug_orders: &[DrugOrder], length_of_stay_days: f64) -> bool {
    let has = |d: DrugOrder| drug_orders.contains(&d);
    match subtype {
        Subtype::Tia => has(DrugOrder::Antiplatelet),
        Subtype::Is => has(DrugOrder::Rtpa) || has(DrugOrder::Antiplatelet),
        Subtype::Ich => length_of_stay_days > ICH_MIN_STAY_DAYS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeEvent {
    pub patient_id: PatientId,
    pub encounter_id: EncounterId,
    /// Admission time of the confirming encounter.
    pub stroke_time: Timestamp,
    pub subtype: Subtype,
}

/// Per-rule outcome for one encounter. Every rule is evaluated, even after
/// an earlier one fails, so the table can be audited column by column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRuleTrace {
    pub encounter_id: EncounterId,
    pub patient_id: PatientId,
    pub birth_date_known: bool,
    pub adult: bool,
    pub inpatient: bool,
    pub has_admission_discharge: bool,
    pub stroke_icd: bool,
    pub ct_or_cta: bool,
    pub subtype: Option<Subtype>,
    pub confirmation: bool,
}

impl CohortRuleTrace {
    pub fn all_pass(&self) -> bool {
        self.birth_date_known
            && self.adult
            && self.inpatient
            && self.has_admission_discharge
            && self.stroke_icd
            && self.ct_or_cta
            && self.subtype.is_some()
            && self.confirmation
    }
}

pub fn trace_encounter(patient: Option<&PatientRecord>, encounter: &Encounter) -> CohortRuleTrace {
    let birth = patient.and_then(|p| p.birth_date);
    let adult = match (birth, encounter.admission_time) {
        (Some(b), Some(a)) => age_in_years(b, a) >= ADULT_AGE_YEARS,
        _ => false,
    };
    let subtype = classify_subtype(&encounter.diagnosis_codes).ok();
    let confirmation = match (subtype, encounter.length_of_stay_days()) {
        (Some(s), Some(los)) => confirm_stroke(s, &encounter.drug_orders, los),
        // Drug-based confirmation does not need the stay length.
        (Some(s @ (Subtype::Tia | Subtype::Is)), None) => confirm_stroke(s, &encounter.drug_orders, 0.0),
        _ => false,
    };
    CohortRuleTrace {
        encounter_id: encounter.encounter_id.clone(),
        patient_id: encounter.patient_id.clone(),
        birth_date_known: birth.is_some(),
        adult,
        inpatient: encounter.encounter_type == EncounterType::Inpatient,
        has_admission_discharge: encounter.admission_time.is_some() && encounter.discharge_time.is_some(),
        stroke_icd: subtype.is_some(),
        ct_or_cta: encounter
            .procedures
            .iter()
            .any(|p| matches!(p, Procedure::Ct | Procedure::CtAngiography)),
        subtype,
        confirmation,
    }
}

/// Applies every inclusion rule to every encounter. Encounters whose
/// patient is unknown or lacks a birth date are traced as failing rather
/// than aborting the run.
pub fn filter_stroke_encounters(
    patients: &[PatientRecord],
    encounters: &[Encounter],
) -> (Vec<StrokeEvent>, Vec<CohortRuleTrace>) {
    let by_id: HashMap<&PatientId, &PatientRecord> =
        patients.iter().map(|p| (&p.patient_id, p)).collect();
    let mut events = Vec::new();
    let mut traces = Vec::with_capacity(encounters.len());
    for e in encounters {
        let trace = trace_encounter(by_id.get(&e.patient_id).copied(), e);
        if !trace.birth_date_known {
            log::debug!("encounter {} skipped: no birth date for {}", e.encounter_id, e.patient_id);
        }
        if trace.all_pass() {
            events.push(StrokeEvent {
                patient_id: e.patient_id.clone(),
                encounter_id: e.encounter_id.clone(),
                stroke_time: e.admission_time.expect("checked by has_admission_discharge"),
                subtype: trace.subtype.expect("checked by all_pass"),
            });
        }
        traces.push(trace);
    }
    (events, traces)
}

pub fn study_is_eligible(patient: Option<&PatientRecord>, study: &ScanStudy) -> bool {
    let adult = patient
        .and_then(|p| p.birth_date)
        .map(|b| age_in_years(b, study.acquisition_time) >= ADULT_AGE_YEARS)
        .unwrap_or(false);
    adult && study.anatomy == Anatomy::Macula && study.scan_mode == ScanMode::Art && study.infrared.is_some()
}

/// Keeps adult, macular, ART-mode studies that have an infrared image.
pub fn filter_scan_studies(patients: &[PatientRecord], studies: &[ScanStudy]) -> Vec<ScanStudy> {
    let by_id: HashMap<&PatientId, &PatientRecord> =
        patients.iter().map(|p| (&p.patient_id, p)).collect();
    studies
        .iter()
        .filter(|s| study_is_eligible(by_id.get(&s.patient_id).copied(), s))
        .cloned()
        .collect()
}

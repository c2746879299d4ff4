//! Static clinical features: demographics, vitals and diagnosis history.
//!
//! Layout (schema `ehr-v1`, 34 columns):
//!
//! | positions | content |
//! |-----------|---------|
//! | 0..7      | age, bmi, systolic, diastolic, temperature, pulse, respiratory rate (min-max scaled) |
//! | 7         | sex is male |
//! | 8..10     | smoking former / current (never is the all-zero reference) |
//! | 10..34    | history flags for the 24 ICD-10 groups in [`ICD_GROUPS`] |

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{is_stroke_code, normalize_code};
use crate::error::{Error, Result};
use crate::records::*;

pub const SCHEMA_VERSION: &str = "ehr-v1";
pub const FEATURE_DIM: usize = 34;
pub const NUMERIC_DIM: usize = 7;
pub const CATEGORICAL_DIM: usize = 3;
pub const ICD_GROUP_COUNT: usize = 24;

/// Values used when a vital sign was never measured.
pub const NORMAL_VITALS: [f64; 6] = [25.0, 120.0, 80.0, 37.0, 75.0, 16.0];

/// ICD-10 chapter-level groups as inclusive three-character ranges.
pub const ICD_GROUPS: [(&str, &str, &str); ICD_GROUP_COUNT] = [
    ("A00", "B99", "infectious and parasitic"),
    ("C00", "C96", "malignant neoplasms"),
    ("D00", "D49", "other neoplasms"),
    ("D50", "D89", "blood and immune"),
    ("E00", "E89", "endocrine and metabolic"),
    ("F01", "F99", "mental and behavioural"),
    ("G00", "G99", "nervous system"),
    ("H00", "H59", "eye and adnexa"),
    ("H60", "H95", "ear and mastoid"),
    ("I00", "I99", "circulatory system"),
    ("J00", "J99", "respiratory system"),
    ("K00", "K95", "digestive system"),
    ("L00", "L99", "skin"),
    ("M00", "M99", "musculoskeletal"),
    ("N00", "N99", "genitourinary"),
    ("O00", "O9A", "pregnancy"),
    ("P00", "P96", "perinatal"),
    ("Q00", "Q99", "congenital"),
    ("R00", "R99", "symptoms and signs"),
    ("S00", "S99", "injury by body region"),
    ("T00", "T88", "injury, poisoning, other"),
    ("V00", "Y99", "external causes"),
    ("Z00", "Z99", "health status and services"),
    ("U00", "U85", "special purposes"),
];

/// Index in [`ICD_GROUPS`] of a group given by its range label, e.g. `"I00-I99"`.
pub fn icd_group_index(label: &str) -> Option<usize> {
    ICD_GROUPS
        .iter()
        .position(|(lo, hi, _)| format!("{lo}-{hi}") == label)
}

/// Groups a code belongs to (at most one). Codes shorter than three
/// characters match nothing.
pub fn icd_group_of(code: &str) -> Option<usize> {
    let code = normalize_code(code);
    let head = code.get(..3)?;
    ICD_GROUPS
        .iter()
        .position(|(lo, hi, _)| *lo <= head && head <= *hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitalValue {
    pub value: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeatureRow {
    pub age_years: f64,
    pub sex: Sex,
    pub smoking_status: SmokingStatus,
    pub vitals: [VitalValue; 6],
    pub icd_group_flags: [bool; ICD_GROUP_COUNT],
}

impl RawFeatureRow {
    pub fn numeric(&self) -> [f64; NUMERIC_DIM] {
        let mut out = [0.0; NUMERIC_DIM];
        out[0] = self.age_years;
        for (o, v) in out[1..].iter_mut().zip(&self.vitals) {
            *o = v.value;
        }
        out
    }
}

/// Builds one row from a patient's history as of `scan_time`.
///
/// Each vital comes from the scan's own encounter (same calendar day, not
/// after the scan) when measured there, otherwise from the most recent
/// earlier encounter that measured it, otherwise from [`NORMAL_VITALS`]. History flags use codes
/// from encounters dated strictly before the scan. The stroke-defining codes
/// themselves are left out of the history so the outcome cannot leak into
/// the inputs.
pub fn extract_features(patient: &PatientRecord, encounters: &[&Encounter], scan_time: Timestamp) -> Result<RawFeatureRow> {
    let birth = patient
        .birth_date
        .ok_or_else(|| Error::data(format!("patient {} has no birth date", patient.patient_id)))?;

    let scan_day = scan_time.date();
    let mut own: Vec<&Encounter> = Vec::new();
    let mut prior: Vec<(Timestamp, &Encounter)> = Vec::new();
    let mut flags = [false; ICD_GROUP_COUNT];
    for e in encounters {
        let Some(t) = e.dated_at() else { continue };
        if t.date() == scan_day && t <= scan_time {
            own.push(e);
        }
        if t < scan_time {
            prior.push((t, e));
            for code in &e.diagnosis_codes {
                if is_stroke_code(code) {
                    continue;
                }
                if let Some(g) = icd_group_of(code) {
                    flags[g] = true;
                }
            }
        }
    }
    prior.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| b.1.encounter_id.cmp(&a.1.encounter_id)));

    let vitals = std::array::from_fn(|i| {
        let measured = |e: &&Encounter| e.vitals.and_then(|v| v.as_array()[i]);
        own.iter()
            .find_map(measured)
            .or_else(|| prior.iter().map(|(_, e)| e).find_map(measured))
            .map(|value| VitalValue { value, imputed: false })
            .unwrap_or(VitalValue {
                value: NORMAL_VITALS[i],
                imputed: true,
            })
    });

    Ok(RawFeatureRow {
        age_years: age_fractional(birth, scan_time),
        sex: patient.sex,
        smoking_status: patient.smoking_status,
        vitals,
        icd_group_flags: flags,
    })
}

/// Indexes patients and encounters so rows can be extracted per scan.
pub struct FeatureExtractor<'a> {
    patients: HashMap<&'a PatientId, &'a PatientRecord>,
    encounters: HashMap<&'a PatientId, Vec<&'a Encounter>>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(patients: &'a [PatientRecord], encounters: &'a [Encounter]) -> Self {
        let mut by_patient: HashMap<&PatientId, Vec<&Encounter>> = HashMap::new();
        for e in encounters {
            by_patient.entry(&e.patient_id).or_default().push(e);
        }
        FeatureExtractor {
            patients: patients.iter().map(|p| (&p.patient_id, p)).collect(),
            encounters: by_patient,
        }
    }

    pub fn extract(&self, patient_id: &PatientId, scan_time: Timestamp) -> Result<RawFeatureRow> {
        let patient = self
            .patients
            .get(patient_id)
            .ok_or_else(|| Error::data(format!("unknown patient {patient_id}")))?;
        let encounters = self.encounters.get(patient_id).map(Vec::as_slice).unwrap_or(&[]);
        extract_features(patient, encounters, scan_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; NUMERIC_DIM],
    pub max: [f64; NUMERIC_DIM],
}

pub const NUMERIC_NAMES: [&str; NUMERIC_DIM] = [
    "age",
    "bmi",
    "systolic_bp",
    "diastolic_bp",
    "temperature",
    "pulse_rate",
    "respiratory_rate",
];

pub fn fit_normalizer(rows: &[RawFeatureRow]) -> Result<Normalizer> {
    if rows.is_empty() {
        return Err(Error::config("normalizer needs at least one training row"));
    }
    let mut min = [f64::INFINITY; NUMERIC_DIM];
    let mut max = [f64::NEG_INFINITY; NUMERIC_DIM];
    for row in rows {
        for (i, v) in row.numeric().into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric("fit_normalizer", format!("{} is {v}", NUMERIC_NAMES[i])));
            }
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    Ok(Normalizer { min, max })
}

impl Normalizer {
    pub fn scale(&self, index: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[index], self.max[index]);
        if hi == lo {
            0.5
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }

    pub fn transform(&self, row: &RawFeatureRow) -> FeatureVector {
        let mut values = Vec::with_capacity(FEATURE_DIM);
        for (i, v) in row.numeric().into_iter().enumerate() {
            values.push(self.scale(i, v));
        }
        values.push(f64::from(row.sex == Sex::Male));
        values.push(f64::from(row.smoking_status == SmokingStatus::Former));
        values.push(f64::from(row.smoking_status == SmokingStatus::Current));
        values.extend(row.icd_group_flags.iter().map(|f| f64::from(*f)));
        debug_assert_eq!(values.len(), FEATURE_DIM);
        FeatureVector {
            values,
            schema_version: SCHEMA_VERSION.to_owned(),
        }
    }
}

/// A normaliser that may not have been fitted yet.
#[derive(Debug, Clone, Default)]
pub struct FeatureScaler {
    fitted: Option<Normalizer>,
}

impl FeatureScaler {
    pub fn fit(&mut self, rows: &[RawFeatureRow]) -> Result<&Normalizer> {
        self.fitted = Some(fit_normalizer(rows)?);
        Ok(self.fitted.as_ref().expect("just set"))
    }

    pub fn transform(&self, row: &RawFeatureRow) -> Result<FeatureVector> {
        self.fitted
            .as_ref()
            .map(|n| n.transform(row))
            .ok_or_else(|| Error::state("transform called before fit"))
    }
}

/// One entry of the published feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub position: usize,
    pub name: String,
    pub kind: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

pub fn feature_schema(normalizer: Option<&Normalizer>) -> Vec<SchemaEntry> {
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for (i, name) in NUMERIC_NAMES.iter().enumerate() {
        out.push(SchemaEntry {
            position: i,
            name: (*name).to_owned(),
            kind: "numeric_minmax".to_owned(),
            min: normalizer.map(|n| n.min[i]),
            max: normalizer.map(|n| n.max[i]),
        });
    }
    for name in ["sex_male", "smoking_former", "smoking_current"] {
        out.push(SchemaEntry {
            position: out.len(),
            name: name.to_owned(),
            kind: "one_hot".to_owned(),
            min: None,
            max: None,
        });
    }
    for (lo, hi, _) in ICD_GROUPS {
        out.push(SchemaEntry {
            position: out.len(),
            name: format!("icd_{lo}-{hi}"),
            kind: "binary_flag".to_owned(),
            min: None,
            max: None,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> Timestamp {
        parse_timestamp(s).unwrap()
    }

    fn patient() -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            birth_date: Some(parse_date("1960-01-01").unwrap()),
            sex: Sex::Female,
            smoking_status: SmokingStatus::Current,
        }
    }

    fn encounter(id: &str, at: &str, codes: &[&str], systolic: Option<f64>) -> Encounter {
        Encounter {
            encounter_id: id.into(),
            patient_id: "p".into(),
            encounter_type: EncounterType::Outpatient,
            admission_time: Some(ts(at)),
            discharge_time: Some(ts(at)),
            diagnosis_codes: codes.iter().map(|c| c.to_string()).collect(),
            drug_orders: vec![],
            procedures: vec![],
            vitals: systolic.map(|s| VitalSigns {
                systolic_bp: Some(s),
                ..Default::default()
            }),
        }
    }

    #[test]
    fn layout_is_34_wide() {
        assert_eq!(NUMERIC_DIM + CATEGORICAL_DIM + ICD_GROUP_COUNT, FEATURE_DIM);
        assert_eq!(feature_schema(None).len(), FEATURE_DIM);
        for label in ["H00-H59", "I00-I99", "G00-G99", "D50-D89"] {
            assert!(icd_group_index(label).is_some(), "{label}");
        }
    }

    #[test]
    fn group_lookup() {
        assert_eq!(icd_group_of("I10"), icd_group_index("I00-I99"));
        assert_eq!(icd_group_of("d64.9"), icd_group_index("D50-D89"));
        assert_eq!(icd_group_of("D48.1"), icd_group_index("D00-D49"));
        assert_eq!(icd_group_of("O9A.1"), icd_group_index("O00-O9A"));
        assert_eq!(icd_group_of("H61"), icd_group_index("H60-H95"));
        assert_eq!(icd_group_of("X"), None);
    }

    #[test]
    fn empty_history_imputes_everything() {
        let row = extract_features(&patient(), &[], ts("2020-01-01T10:00:00")).unwrap();
        for (v, normal) in row.vitals.iter().zip(NORMAL_VITALS) {
            assert!(v.imputed);
            assert_eq!(v.value, normal);
        }
        assert!(row.icd_group_flags.iter().all(|f| !f));
        assert!((row.age_years - 60.0).abs() < 0.01);
    }

    #[test]
    fn most_recent_prior_vitals_win() {
        let a = encounter("a", "2019-12-22T10:00:00", &[], Some(140.0));
        let b = encounter("b", "2019-12-29T10:00:00", &[], Some(130.0));
        let row = extract_features(&patient(), &[&a, &b], ts("2020-01-01T10:00:00")).unwrap();
        assert_eq!(row.vitals[1], VitalValue { value: 130.0, imputed: false });
        let own = encounter("c", "2020-01-01T09:30:00", &[], Some(111.0));
        let row = extract_features(&patient(), &[&a, &b, &own], ts("2020-01-01T10:00:00")).unwrap();
        assert_eq!(row.vitals[1].value, 111.0);
    }

    #[test]
    fn post_scan_history_is_ignored() {
        let later = encounter("a", "2020-02-01T10:00:00", &["I10"], Some(200.0));
        let row = extract_features(&patient(), &[&later], ts("2020-01-01T10:00:00")).unwrap();
        assert!(!row.icd_group_flags[icd_group_index("I00-I99").unwrap()]);
        assert!(row.vitals[1].imputed);
    }

    #[test]
    fn stroke_codes_do_not_set_history_flags() {
        let prior = encounter("a", "2019-02-01T10:00:00", &["I63.9", "G459"], None);
        let row = extract_features(&patient(), &[&prior], ts("2020-01-01T10:00:00")).unwrap();
        assert!(row.icd_group_flags.iter().all(|f| !f));
    }

    #[test]
    fn normalizer_scaling() {
        let mut rows = Vec::new();
        for s in [10.0, 20.0] {
            let mut r = extract_features(&patient(), &[], ts("2020-01-01T10:00:00")).unwrap();
            r.vitals[0].value = s;
            rows.push(r);
        }
        let norm = fit_normalizer(&rows).unwrap();
        assert_eq!(norm.scale(1, 15.0), 0.5);
        assert_eq!(norm.scale(1, 25.0), 1.0);
        assert_eq!(norm.scale(1, 0.0), 0.0);
        // constant column (age identical in both rows)
        assert_eq!(norm.scale(0, 60.0), 0.5);
        let fv = norm.transform(&rows[0]);
        assert_eq!(fv.values.len(), FEATURE_DIM);
        assert!(fv.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(&fv.values[7..10], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn transform_before_fit_is_state_error() {
        let row = extract_features(&patient(), &[], ts("2020-01-01T10:00:00")).unwrap();
        assert!(matches!(FeatureScaler::default().transform(&row), Err(Error::State(_))));
        assert!(fit_normalizer(&[]).is_err());
    }
}

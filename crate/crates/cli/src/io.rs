//! Tab-separated record files, JSON artifacts and 16-bit PGM images.
//!
//! Lists inside a cell are joined with `;`; an empty cell is a missing value.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use oct_stroke::cohort::{CohortRuleTrace, StrokeEvent};
use oct_stroke::labeling::LabeledSample;
use oct_stroke::records::*;
use oct_stroke::synthgen::render::{SyntheticImage, SyntheticVolume};
use oct_stroke::synthgen::{PlantedStroke, Population};
use oct_stroke::{Error, Result};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_tsv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tsv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, format!("line {}: {e}", i + 2))))
        .collect()
}

/// Reads rows and converts each one, reporting conversion failures with the
/// file line (the header is line 1).
fn read_rows<T: DeserializeOwned, U>(path: &Path, convert: impl Fn(T) -> Result<U>) -> Result<Vec<U>> {
    read_tsv::<T>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| convert(row).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 2))))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(';').filter(|p| !p.is_empty()).map(str::parse).collect()
}

fn opt_ts(s: &Option<String>) -> Result<Option<Timestamp>> {
    s.as_deref().map(parse_timestamp).transpose()
}

// ------------------------------------------------------------ population

pub const PATIENTS: &str = "patients.tsv";
pub const ENCOUNTERS: &str = "encounters.tsv";
pub const STUDIES: &str = "studies.tsv";
pub const IMAGES: &str = "images.tsv";
pub const PLANTED: &str = "planted.tsv";

#[derive(Serialize, Deserialize)]
struct PatientRow {
    patient_id: String,
    birth_date: Option<String>,
    sex: String,
    smoking_status: String,
}

#[derive(Serialize, Deserialize)]
struct EncounterRow {
    encounter_id: String,
    patient_id: String,
    encounter_type: String,
    admission_time: Option<String>,
    discharge_time: Option<String>,
    diagnosis_codes: String,
    drug_orders: String,
    procedures: String,
    bmi: Option<f64>,
    systolic_bp: Option<f64>,
    diastolic_bp: Option<f64>,
    temperature: Option<f64>,
    pulse_rate: Option<f64>,
    respiratory_rate: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StudyRow {
    study_id: String,
    patient_id: String,
    acquisition_time: String,
    eye: String,
    anatomy: String,
    scan_mode: String,
    n_slices: usize,
    has_infrared: bool,
}

/// Where a study's images live: a synthetic recipe (re-rendered bit-exactly)
/// and/or exported PGM files. The loader prefers the recipe.
#[derive(Serialize, Deserialize)]
struct ImageRow {
    study_id: String,
    oct_mid_path: Option<String>,
    infrared_path: Option<String>,
    positive: Option<bool>,
    height: Option<usize>,
    width: Option<usize>,
    oct_signal: Option<f64>,
    oct_seed: Option<u64>,
    infrared_signal: Option<f64>,
    infrared_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct PlantedRow {
    patient_id: String,
    encounter_id: String,
    stroke_time: String,
    subtype: String,
}

fn image_paths(study: &StudyId) -> (String, String) {
    (format!("images/{study}_oct_mid.pgm"), format!("images/{study}_ir.pgm"))
}

pub fn write_population(dir: &Path, pop: &Population, export_images: bool) -> Result<Vec<PathBuf>> {
    let patients: Vec<PatientRow> = pop
        .patients
        .iter()
        .map(|p| PatientRow {
            patient_id: p.patient_id.to_string(),
            birth_date: p.birth_date.map(|d| d.format(DATE_FORMAT).to_string()),
            sex: p.sex.to_string(),
            smoking_status: p.smoking_status.to_string(),
        })
        .collect();
    let encounters: Vec<EncounterRow> = pop
        .encounters
        .iter()
        .map(|e| {
            let v = e.vitals.unwrap_or_default();
            EncounterRow {
                encounter_id: e.encounter_id.to_string(),
                patient_id: e.patient_id.to_string(),
                encounter_type: e.encounter_type.to_string(),
                admission_time: e.admission_time.map(format_timestamp),
                discharge_time: e.discharge_time.map(format_timestamp),
                diagnosis_codes: e.diagnosis_codes.join(";"),
                drug_orders: join(&e.drug_orders),
                procedures: join(&e.procedures),
                bmi: v.bmi,
                systolic_bp: v.systolic_bp,
                diastolic_bp: v.diastolic_bp,
                temperature: v.temperature,
                pulse_rate: v.pulse_rate,
                respiratory_rate: v.respiratory_rate,
            }
        })
        .collect();
    let studies: Vec<StudyRow> = pop
        .studies
        .iter()
        .map(|s| StudyRow {
            study_id: s.study_id.to_string(),
            patient_id: s.patient_id.to_string(),
            acquisition_time: format_timestamp(s.acquisition_time),
            eye: s.eye.to_string(),
            anatomy: s.anatomy.to_string(),
            scan_mode: s.scan_mode.to_string(),
            n_slices: s.oct_volume.len(),
            has_infrared: s.infrared.is_some(),
        })
        .collect();
    let mut written = Vec::new();
    let mut images = Vec::with_capacity(pop.studies.len());
    for s in &pop.studies {
        let mut row = ImageRow {
            study_id: s.study_id.to_string(),
            oct_mid_path: None,
            infrared_path: None,
            positive: None,
            height: None,
            width: None,
            oct_signal: None,
            oct_seed: None,
            infrared_signal: None,
            infrared_seed: None,
        };
        if let OctVolume::Synthetic(v) = &s.oct_volume {
            row.positive = Some(v.positive);
            row.height = Some(v.height);
            row.width = Some(v.width);
            row.oct_signal = Some(v.signal_strength);
            row.oct_seed = Some(v.seed);
        }
        if let Some(ImageRef::Synthetic(ir)) = &s.infrared {
            row.infrared_signal = Some(ir.signal_strength);
            row.infrared_seed = Some(ir.seed);
        }
        if export_images {
            let (oct_path, ir_path) = image_paths(&s.study_id);
            if !s.oct_volume.is_empty() {
                let p = dir.join(&oct_path);
                write_pgm(&p, &s.oct_volume.mid_slice().load())?;
                written.push(p);
                row.oct_mid_path = Some(oct_path);
            }
            if let Some(ir) = &s.infrared {
                let p = dir.join(&ir_path);
                write_pgm(&p, &ir.load())?;
                written.push(p);
                row.infrared_path = Some(ir_path);
            }
        }
        images.push(row);
    }
    let planted: Vec<PlantedRow> = pop
        .planted
        .iter()
        .map(|p| PlantedRow {
            patient_id: p.patient_id.to_string(),
            encounter_id: p.encounter_id.to_string(),
            stroke_time: format_timestamp(p.stroke_time),
            subtype: p.subtype.to_string(),
        })
        .collect();
    write_tsv(&dir.join(PATIENTS), &patients)?;
    write_tsv(&dir.join(ENCOUNTERS), &encounters)?;
    write_tsv(&dir.join(STUDIES), &studies)?;
    write_tsv(&dir.join(IMAGES), &images)?;
    write_tsv(&dir.join(PLANTED), &planted)?;
    let mut out: Vec<PathBuf> = [PATIENTS, ENCOUNTERS, STUDIES, IMAGES, PLANTED]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    out.extend(written);
    Ok(out)
}

fn load_image(dir: &Path, path: &Option<String>, what: &str, study: &str) -> Result<ImageGrid> {
    let rel = path
        .as_ref()
        .ok_or_else(|| Error::data(format!("study {study} has neither a recipe nor a file for its {what} image")))?;
    read_pgm(&dir.join(rel))
}

pub fn read_population(dir: &Path) -> Result<Population> {
    let patients = read_rows(&dir.join(PATIENTS), |r: PatientRow| {
            Ok(PatientRecord {
                patient_id: r.patient_id.into(),
                birth_date: r.birth_date.as_deref().map(parse_date).transpose()?,
                sex: r.sex.parse()?,
                smoking_status: r.smoking_status.parse()?,
            })
        })?;
    let encounters = read_rows(&dir.join(ENCOUNTERS), |r: EncounterRow| {
            let vitals = VitalSigns {
                bmi: r.bmi,
                systolic_bp: r.systolic_bp,
                diastolic_bp: r.diastolic_bp,
                temperature: r.temperature,
                pulse_rate: r.pulse_rate,
                respiratory_rate: r.respiratory_rate,
            };
            let e = Encounter {
                encounter_id: r.encounter_id.into(),
                patient_id: r.patient_id.into(),
                encounter_type: r.encounter_type.parse()?,
                admission_time: opt_ts(&r.admission_time)?,
                discharge_time: opt_ts(&r.discharge_time)?,
                diagnosis_codes: r.diagnosis_codes.split(';').filter(|c| !c.is_empty()).map(String::from).collect(),
                drug_orders: split(&r.drug_orders)?,
                procedures: split(&r.procedures)?,
                vitals: (!vitals.is_empty()).then_some(vitals),
            };
            e.validate()?;
            Ok(e)
        })?;
    let images: std::collections::HashMap<String, ImageRow> = read_tsv::<ImageRow>(&dir.join(IMAGES))?
        .into_iter()
        .map(|r| (r.study_id.clone(), r))
        .collect();
    let studies = read_rows(&dir.join(STUDIES), |r: StudyRow| {
            let img = images
                .get(&r.study_id)
                .ok_or_else(|| Error::data(format!("study {} missing from {IMAGES}", r.study_id)))?;
            let recipe = match (img.positive, img.height, img.width) {
                (Some(p), Some(h), Some(w)) => Some((p, h, w)),
                _ => None,
            };
            let oct_volume = match (recipe, img.oct_signal, img.oct_seed) {
                (Some((positive, height, width)), Some(signal_strength), Some(seed)) => {
                    OctVolume::Synthetic(SyntheticVolume {
                        positive,
                        signal_strength,
                        height,
                        width,
                        n_slices: r.n_slices,
                        seed,
                    })
                }
                _ if r.n_slices == 0 => OctVolume::Stored(Arc::from(Vec::new())),
                _ => OctVolume::Stored(Arc::from(vec![load_image(dir, &img.oct_mid_path, "OCT", &r.study_id)?])),
            };
            let infrared = if !r.has_infrared {
                None
            } else {
                Some(match (recipe, img.infrared_signal, img.infrared_seed) {
                    (Some((positive, height, width)), Some(signal_strength), Some(seed)) => {
                        ImageRef::Synthetic(SyntheticImage {
                            positive,
                            modality: Modality::Infrared,
                            signal_strength,
                            height,
                            width,
                            seed,
                        })
                    }
                    _ => load_image(dir, &img.infrared_path, "infrared", &r.study_id)?.into(),
                })
            };
            Ok(ScanStudy {
                study_id: r.study_id.into(),
                patient_id: r.patient_id.into(),
                acquisition_time: parse_timestamp(&r.acquisition_time)?,
                eye: r.eye.parse()?,
                oct_volume,
                infrared,
                anatomy: r.anatomy.parse()?,
                scan_mode: r.scan_mode.parse()?,
            })
        })?;
    let planted = read_rows(&dir.join(PLANTED), |r: PlantedRow| {
            Ok(PlantedStroke {
                patient_id: r.patient_id.into(),
                encounter_id: r.encounter_id.into(),
                stroke_time: parse_timestamp(&r.stroke_time)?,
                subtype: r.subtype.parse()?,
            })
        })?;
    Ok(Population {
        patients,
        encounters,
        studies,
        planted,
    })
}

// ---------------------------------------------------------------- cohort

#[derive(Serialize, Deserialize)]
struct EventRow {
    patient_id: String,
    encounter_id: String,
    stroke_time: String,
    subtype: String,
}

pub fn write_events(path: &Path, events: &[StrokeEvent]) -> Result<()> {
    let rows: Vec<EventRow> = events
        .iter()
        .map(|e| EventRow {
            patient_id: e.patient_id.to_string(),
            encounter_id: e.encounter_id.to_string(),
            stroke_time: format_timestamp(e.stroke_time),
            subtype: e.subtype.to_string(),
        })
        .collect();
    write_tsv(path, &rows)
}

pub fn read_events(path: &Path) -> Result<Vec<StrokeEvent>> {
    read_rows(path, |r: EventRow| {
        Ok(StrokeEvent {
            patient_id: r.patient_id.into(),
            encounter_id: r.encounter_id.into(),
            stroke_time: parse_timestamp(&r.stroke_time)?,
            subtype: r.subtype.parse()?,
        })
    })
}

#[derive(Serialize)]
struct TraceRow<'a> {
    encounter_id: &'a str,
    patient_id: &'a str,
    birth_date_known: bool,
    adult: bool,
    inpatient: bool,
    has_admission_discharge: bool,
    stroke_icd: bool,
    ct_or_cta: bool,
    subtype: Option<&'static str>,
    confirmation: bool,
    included: bool,
}

pub fn write_traces(path: &Path, traces: &[CohortRuleTrace]) -> Result<()> {
    let rows: Vec<TraceRow> = traces
        .iter()
        .map(|t| TraceRow {
            encounter_id: t.encounter_id.as_str(),
            patient_id: t.patient_id.as_str(),
            birth_date_known: t.birth_date_known,
            adult: t.adult,
            inpatient: t.inpatient,
            has_admission_discharge: t.has_admission_discharge,
            stroke_icd: t.stroke_icd,
            ct_or_cta: t.ct_or_cta,
            subtype: t.subtype.map(Subtype::as_str),
            confirmation: t.confirmation,
            included: t.all_pass(),
        })
        .collect();
    write_tsv(path, &rows)
}

#[derive(Serialize, Deserialize)]
struct EligibleRow {
    study_id: String,
}

pub fn write_study_ids(path: &Path, ids: &[StudyId]) -> Result<()> {
    let rows: Vec<EligibleRow> = ids.iter().map(|s| EligibleRow { study_id: s.to_string() }).collect();
    write_tsv(path, &rows)
}

pub fn read_study_ids(path: &Path) -> Result<Vec<StudyId>> {
    Ok(read_tsv::<EligibleRow>(path)?.into_iter().map(|r| r.study_id.into()).collect())
}

// ---------------------------------------------------------------- labels

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub sample_id: String,
    pub patient_id: String,
    pub study_id: String,
    pub eye: String,
    pub modality: String,
    pub t_oct: String,
    pub y: u8,
    pub delta_days: Option<f64>,
    pub subtype: Option<String>,
    pub split: Split,
    /// Cross-validation fold of training samples.
    pub fold: Option<usize>,
}

impl LabelRow {
    pub fn new(s: &LabeledSample, split: Split, fold: Option<usize>) -> Self {
        LabelRow {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.to_string(),
            study_id: s.study_id.to_string(),
            eye: s.eye.to_string(),
            modality: s.modality.to_string(),
            t_oct: format_timestamp(s.t_oct),
            y: s.y,
            delta_days: s.delta_days,
            subtype: s.subtype.map(|t| t.to_string()),
            split,
            fold,
        }
    }

    /// Rebuilds the sample, taking the image from its study.
    pub fn to_sample(&self, study: &ScanStudy) -> Result<LabeledSample> {
        let modality: Modality = self.modality.parse()?;
        let image = study
            .image_for(modality)
            .ok_or_else(|| Error::data(format!("study {} has no {modality} image", self.study_id)))?;
        Ok(LabeledSample {
            sample_id: self.sample_id.clone(),
            patient_id: self.patient_id.as_str().into(),
            study_id: self.study_id.as_str().into(),
            eye: self.eye.parse()?,
            modality,
            image,
            t_oct: parse_timestamp(&self.t_oct)?,
            y: self.y,
            delta_days: self.delta_days,
            subtype: self.subtype.as_deref().map(str::parse).transpose()?,
        })
    }
}

// ------------------------------------------------------------------ PGM

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    // Header: magic, width, height, maxval, each separated by whitespace.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 65535 {
        return Err(bad("maxval out of range"));
    }
    let wide = max > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let pixels = if wide {
        data.chunks_exact(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / max as f64).collect()
    } else {
        data.iter().map(|&b| f64::from(b) / max as f64).collect()
    };
    let modality = if path.to_string_lossy().contains("_ir") { Modality::Infrared } else { Modality::Oct };
    ImageGrid::new(h, w, pixels, modality).map_err(|e| bad(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x_ir.pgm");
        let pixels: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = ImageGrid::new(3, 4, pixels, Modality::Infrared).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.height, back.width, back.modality), (3, 4, Modality::Infrared));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }
}

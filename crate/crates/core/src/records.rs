//! Clinical and imaging record types shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::render::{SyntheticImage, SyntheticVolume};

pub type Timestamp = NaiveDateTime;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Signed difference `later - earlier` in (fractional) days.
pub fn days_between(earlier: Timestamp, later: Timestamp) -> f64 {
    (later - earlier).num_seconds() as f64 / 86_400.0
}

/// Completed years of age on `at`.
pub fn age_in_years(birth: NaiveDate, at: Timestamp) -> i32 {
    let date = at.date();
    let mut years = date.year() - birth.year();
    if (date.month(), date.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    years
}

/// Fractional age, used as a numeric feature.
pub fn age_fractional(birth: NaiveDate, at: Timestamp) -> f64 {
    let birth = birth.and_hms_opt(0, 0, 0).expect("midnight is valid");
    days_between(birth, at) / 365.25
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(PatientId);
string_id!(EncounterId);
string_id!(StudyId);

/// Enum with a fixed lower-case text form used in every file format.
macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::data(format!(
                        concat!("unknown ", stringify!($name), " value {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(Sex { Male => "male", Female => "female" });
text_enum!(SmokingStatus { Never => "never", Former => "former", Current => "current" });
text_enum!(EncounterType { Inpatient => "inpatient", Outpatient => "outpatient", Other => "other" });
text_enum!(DrugOrder { Antiplatelet => "antiplatelet", Rtpa => "rtpa", Other => "other" });
text_enum!(Procedure { Ct => "ct", CtAngiography => "ct_angiography", Other => "other" });
text_enum!(Eye { Left => "left", Right => "right" });
text_enum!(Anatomy { Macula => "macula", Peripapillary => "peripapillary", Anterior => "anterior" });
text_enum!(ScanMode { Art => "art", Other => "other" });
text_enum!(Modality { Oct => "oct", Infrared => "infrared" });
text_enum!(
    /// Stroke subtype assigned by the cohort rules.
    Subtype { Tia => "TIA", Is => "IS", Ich => "ICH" }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    /// Absent birth dates are tolerated on load; rules that need an age
    /// treat the record as failing.
    pub birth_date: Option<NaiveDate>,
    pub sex: Sex,
    pub smoking_status: SmokingStatus,
}

/// Vital-sign measurements taken during one encounter. Each is optional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VitalSigns {
    pub bmi: Option<f64>,
    pub systolic_bp: Option<f64>,
    pub diastolic_bp: Option<f64>,
    pub temperature: Option<f64>,
    pub pulse_rate: Option<f64>,
    pub respiratory_rate: Option<f64>,
}

impl VitalSigns {
    pub const COUNT: usize = 6;
    pub const NAMES: [&'static str; 6] = [
        "bmi",
        "systolic_bp",
        "diastolic_bp",
        "temperature",
        "pulse_rate",
        "respiratory_rate",
    ];

    pub fn as_array(&self) -> [Option<f64>; 6] {
        [
            self.bmi,
            self.systolic_bp,
            self.diastolic_bp,
            self.temperature,
            self.pulse_rate,
            self.respiratory_rate,
        ]
    }

    pub fn from_array(v: [Option<f64>; 6]) -> Self {
        VitalSigns {
            bmi: v[0],
            systolic_bp: v[1],
            diastolic_bp: v[2],
            temperature: v[3],
            pulse_rate: v[4],
            respiratory_rate: v[5],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.as_array().iter().all(Option::is_none)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.as_array()) {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::data(format!("vital {name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub encounter_id: EncounterId,
    pub patient_id: PatientId,
    pub encounter_type: EncounterType,
    pub admission_time: Option<Timestamp>,
    pub discharge_time: Option<Timestamp>,
    pub diagnosis_codes: Vec<String>,
    pub drug_orders: Vec<DrugOrder>,
    pub procedures: Vec<Procedure>,
    pub vitals: Option<VitalSigns>,
}

impl Encounter {
    /// Length of stay in fractional days, when both endpoints are known.
    pub fn length_of_stay_days(&self) -> Option<f64> {
        match (self.admission_time, self.discharge_time) {
            (Some(a), Some(d)) => Some(days_between(a, d)),
            _ => None,
        }
    }

    /// The time an encounter is dated at: admission, falling back to discharge.
    pub fn dated_at(&self) -> Option<Timestamp> {
        self.admission_time.or(self.discharge_time)
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(a), Some(d)) = (self.admission_time, self.discharge_time) {
            if a > d {
                return Err(Error::data(format!(
                    "encounter {} discharged before admission",
                    self.encounter_id
                )));
            }
        }
        if let Some(v) = &self.vitals {
            v.validate()?;
        }
        Ok(())
    }
}

/// A dense single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub modality: Modality,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, modality: Modality) -> Result<Self> {
        let img = ImageGrid {
            height,
            width,
            pixels,
            modality,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, value: f64, modality: Modality) -> Self {
        ImageGrid {
            height,
            width,
            pixels: vec![value; height * width],
            modality,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width {
            return Err(Error::data(format!(
                "image has {} pixels, expected {}x{}",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(p) = self
            .pixels
            .iter()
            .find(|p| !(p.is_finite() && (0.0..=1.0).contains(*p)))
        {
            return Err(Error::data(format!("pixel value {p} outside [0,1]")));
        }
        Ok(())
    }
}

/// An image that is either held in memory or re-rendered on demand from
/// its synthetic recipe. Both produce the same pixels every time.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Stored(Arc<ImageGrid>),
    Synthetic(SyntheticImage),
}

impl ImageRef {
    pub fn load(&self) -> Arc<ImageGrid> {
        match self {
            ImageRef::Stored(img) => Arc::clone(img),
            ImageRef::Synthetic(s) => Arc::new(s.render()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            ImageRef::Stored(img) => (img.height, img.width),
            ImageRef::Synthetic(s) => (s.height, s.width),
        }
    }
}

impl From<ImageGrid> for ImageRef {
    fn from(img: ImageGrid) -> Self {
        ImageRef::Stored(Arc::new(img))
    }
}

/// An ordered stack of OCT slices sharing one `(height, width)`.
#[derive(Debug, Clone)]
pub enum OctVolume {
    Stored(Arc<[ImageGrid]>),
    Synthetic(SyntheticVolume),
}

impl OctVolume {
    pub fn len(&self) -> usize {
        match self {
            OctVolume::Stored(s) => s.len(),
            OctVolume::Synthetic(v) => v.n_slices,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mid_index(&self) -> usize {
        self.len() / 2
    }

    pub fn slice(&self, index: usize) -> ImageRef {
        match self {
            OctVolume::Stored(s) => ImageRef::Stored(Arc::new(s[index].clone())),
            OctVolume::Synthetic(v) => ImageRef::Synthetic(v.slice(index)),
        }
    }

    pub fn mid_slice(&self) -> ImageRef {
        self.slice(self.mid_index())
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            OctVolume::Stored(s) => s.first().map(|i| (i.height, i.width)).unwrap_or((0, 0)),
            OctVolume::Synthetic(v) => (v.height, v.width),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanStudy {
    pub study_id: StudyId,
    pub patient_id: PatientId,
    pub acquisition_time: Timestamp,
    pub eye: Eye,
    pub oct_volume: OctVolume,
    pub infrared: Option<ImageRef>,
    pub anatomy: Anatomy,
    pub scan_mode: ScanMode,
}

impl ScanStudy {
    /// The single fine-tuning image for a modality: OCT mid-slice or the
    /// infrared image.
    pub fn image_for(&self, modality: Modality) -> Option<ImageRef> {
        match modality {
            Modality::Oct => (!self.oct_volume.is_empty()).then(|| self.oct_volume.mid_slice()),
            Modality::Infrared => self.infrared.clone(),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Result<Timestamp> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .map_err(|e| Error::data(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_timestamp(t: Timestamp) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, DATE_FORMAT).map_err(|e| Error::data(format!("bad date {s:?}: {e}")))
}

//! Temporal labels, task variants, and patient-grouped splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::StrokeEvent;
use crate::error::{Error, Result};
use crate::records::*;
use crate::rng;

pub const DEFAULT_WINDOW_DAYS: f64 = 365.0;
pub const HORIZONS: [u32; 4] = [90, 180, 270, 365];

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub sample_id: String,
    pub patient_id: PatientId,
    pub study_id: StudyId,
    pub eye: Eye,
    pub modality: Modality,
    pub image: ImageRef,
    pub t_oct: Timestamp,
    pub y: u8,
    /// `t_stroke - t_oct` in days for the nearest confirmed stroke; positive
    /// when the stroke follows the scan.
    pub delta_days: Option<f64>,
    pub subtype: Option<Subtype>,
}

/// Anything that belongs to one patient and carries a binary label; the
/// split helpers work on any such collection.
pub trait PatientKeyed {
    fn patient_key(&self) -> &PatientId;
    fn is_positive(&self) -> bool;
}

impl PatientKeyed for LabeledSample {
    fn patient_key(&self) -> &PatientId {
        &self.patient_id
    }

    fn is_positive(&self) -> bool {
        self.y == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Overall,
    Risk,
    Lasting,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Overall => "overall",
            Task::Risk => "risk",
            Task::Lasting => "lasting",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(Task::Overall),
            "risk" => Ok(Task::Risk),
            "lasting" => Ok(Task::Lasting),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub horizon_days: u32,
}

impl TaskSpec {
    pub fn new(task: Task, horizon_days: u32) -> Result<Self> {
        if !HORIZONS.contains(&horizon_days) {
            return Err(Error::config(format!(
                "horizon must be one of {HORIZONS:?}, got {horizon_days}"
            )));
        }
        Ok(TaskSpec { task, horizon_days })
    }

    /// Whether a sample with this label and gap stays in the task's set.
    /// Negatives always stay.
    pub fn keeps(&self, y: u8, delta_days: Option<f64>) -> bool {
        if y == 0 {
            return true;
        }
        let Some(d) = delta_days else {
            return false;
        };
        let n = self.horizon_days as f64;
        match self.task {
            Task::Overall => d.abs() <= n,
            Task::Risk => d > 0.0 && d <= n,
            Task::Lasting => d < 0.0 && d >= -n,
        }
    }
}

/// Labels every eligible study for one modality.
///
/// The nearest stroke (by absolute gap) defines `delta_days`; on an exact
/// tie the later stroke wins. Studies without an image for `modality` are
/// skipped.
pub fn assign_labels(
    patients: &[PatientRecord],
    studies: &[ScanStudy],
    stroke_events: &[StrokeEvent],
    window_days: f64,
    modality: Modality,
) -> Result<Vec<LabeledSample>> {
    let known: HashSet<&PatientId> = patients.iter().map(|p| &p.patient_id).collect();
    let mut events_by_patient: HashMap<&PatientId, Vec<&StrokeEvent>> = HashMap::new();
    for e in stroke_events {
        events_by_patient.entry(&e.patient_id).or_default().push(e);
    }
    let mut samples = Vec::with_capacity(studies.len());
    for study in studies {
        if !known.contains(&study.patient_id) {
            return Err(Error::data(format!(
                "study {} references unknown patient {}",
                study.study_id, study.patient_id
            )));
        }
        let Some(image) = study.image_for(modality) else {
            continue;
        };
        let nearest = events_by_patient
            .get(&study.patient_id)
            .into_iter()
            .flatten()
            .map(|e| (days_between(study.acquisition_time, e.stroke_time), e.subtype))
            .min_by(|(a, _), (b, _)| a.abs().total_cmp(&b.abs()).then(b.total_cmp(a)));
        let (y, delta_days, subtype) = match nearest {
            Some((d, s)) if d.abs() <= window_days => (1, Some(d), Some(s)),
            Some((d, _)) => (0, Some(d), None),
            None => (0, None, None),
        };
        samples.push(LabeledSample {
            sample_id: format!("{}:{}", study.study_id, modality),
            patient_id: study.patient_id.clone(),
            study_id: study.study_id.clone(),
            eye: study.eye,
            modality,
            image,
            t_oct: study.acquisition_time,
            y,
            delta_days,
            subtype,
        });
    }
    Ok(samples)
}

pub fn task_filter(samples: &[LabeledSample], spec: TaskSpec) -> Vec<LabeledSample> {
    samples
        .iter()
        .filter(|s| spec.keeps(s.y, s.delta_days))
        .cloned()
        .collect()
}

#[derive(Debug, Clone)]
pub struct PatientSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    /// False when a stratum was too small and the split fell back to an
    /// unstratified shuffle.
    pub stratified: bool,
}

/// Positive and negative patient lists, each sorted by id.
fn patient_strata<T: PatientKeyed>(items: &[T]) -> (Vec<PatientId>, Vec<PatientId>) {
    let mut positive: BTreeMap<&PatientId, bool> = BTreeMap::new();
    for it in items {
        *positive.entry(it.patient_key()).or_default() |= it.is_positive();
    }
    let (pos, neg): (Vec<_>, Vec<_>) = positive.into_iter().partition(|(_, p)| *p);
    (
        pos.into_iter().map(|(id, _)| id.clone()).collect(),
        neg.into_iter().map(|(id, _)| id.clone()).collect(),
    )
}

fn partition_by<T: PatientKeyed + Clone>(items: &[T], chosen: &BTreeSet<PatientId>) -> (Vec<T>, Vec<T>) {
    items.iter().cloned().partition(|it| !chosen.contains(it.patient_key()))
}

/// Splits by patient so that no patient appears on both sides.
pub fn patient_split<T: PatientKeyed + Clone>(items: &[T], test_fraction: f64, seed: u64) -> Result<PatientSplit<T>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction must be in (0,1), got {test_fraction}")));
    }
    let (mut pos, mut neg) = patient_strata(items);
    let n = pos.len() + neg.len();
    if n < 2 {
        return Err(Error::config(format!("need at least 2 patients to split, got {n}")));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = rng::stream(seed, "patient_split", 0);
    let stratified = pos.len() >= 2 && neg.len() >= 2;
    let mut test_ids = BTreeSet::new();
    if stratified {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let pos_test = ((test_fraction * pos.len() as f64).round() as usize).min(n_test);
        let neg_test = (n_test - pos_test).min(neg.len());
        test_ids.extend(pos[..pos_test].iter().cloned());
        test_ids.extend(neg[..neg_test].iter().cloned());
    } else {
        log::warn!(
            "patient split: strata too small ({} positive, {} negative patients); splitting unstratified",
            pos.len(),
            neg.len()
        );
        let mut all: Vec<PatientId> = pos.into_iter().chain(neg).collect();
        all.sort();
        all.shuffle(&mut rng);
        test_ids.extend(all[..n_test].iter().cloned());
    }
    let (train, test) = partition_by(items, &test_ids);
    Ok(PatientSplit { train, test, stratified })
}

#[derive(Debug, Clone)]
pub struct Fold<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
}

/// Assigns each patient to one of `k` groups, dealing positives first and
/// then negatives round-robin so both classes spread evenly.
pub fn patient_fold_groups<T: PatientKeyed>(items: &[T], k: usize, seed: u64) -> Result<Vec<BTreeSet<PatientId>>> {
    if k < 2 {
        return Err(Error::config(format!("k must be at least 2, got {k}")));
    }
    let (mut pos, mut neg) = patient_strata(items);
    let n = pos.len() + neg.len();
    if n < k {
        return Err(Error::config(format!("{k} folds need at least {k} patients, got {n}")));
    }
    if pos.len() < k {
        log::warn!("k-fold: only {} positive patients for {k} folds", pos.len());
    }
    let mut rng = rng::stream(seed, "kfold", k as u64);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut groups = vec![BTreeSet::new(); k];
    for (i, id) in pos.into_iter().chain(neg).enumerate() {
        groups[i % k].insert(id);
    }
    Ok(groups)
}

pub fn kfold_patient_folds<T: PatientKeyed + Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Fold<T>>> {
    let groups = patient_fold_groups(items, k, seed)?;
    Ok(groups
        .iter()
        .map(|g| {
            let (train, validation) = partition_by(items, g);
            Fold { train, validation }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::StrokeEvent;

    fn ts_days(d: f64) -> Timestamp {
        parse_timestamp("2020-01-01T00:00:00").unwrap() + chrono::Duration::seconds((d * 86_400.0) as i64)
    }

    fn study(id: &str, patient: &str, day: f64) -> ScanStudy {
        ScanStudy {
            study_id: id.into(),
            patient_id: patient.into(),
            acquisition_time: ts_days(day),
            eye: Eye::Right,
            oct_volume: OctVolume::Stored(vec![ImageGrid::filled(8, 8, 0.5, Modality::Oct)].into()),
            infrared: Some(ImageGrid::filled(8, 8, 0.5, Modality::Infrared).into()),
            anatomy: Anatomy::Macula,
            scan_mode: ScanMode::Art,
        }
    }

    fn event(patient: &str, day: f64) -> StrokeEvent {
        StrokeEvent {
            patient_id: patient.into(),
            encounter_id: format!("{patient}-{day}").into(),
            stroke_time: ts_days(day),
            subtype: Subtype::Is,
        }
    }

    fn patient(id: &str) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            birth_date: None,
            sex: Sex::Male,
            smoking_status: SmokingStatus::Never,
        }
    }

    #[test]
    fn window_labels() {
        let pats = [patient("a"), patient("b"), patient("c")];
        let studies = [study("s1", "a", 100.0), study("s2", "b", 0.0), study("s3", "c", 5.0)];
        let events = [event("a", 300.0), event("b", 400.0)];
        let s = assign_labels(&pats, &studies, &events, 365.0, Modality::Oct).unwrap();
        assert_eq!((s[0].y, s[0].delta_days), (1, Some(200.0)));
        assert_eq!((s[1].y, s[1].delta_days), (0, Some(400.0)));
        assert_eq!((s[2].y, s[2].delta_days), (0, None));
        assert_eq!(s[0].subtype, Some(Subtype::Is));
        assert_eq!(s[1].subtype, None);
    }

    #[test]
    fn unknown_patient_is_fatal() {
        let err = assign_labels(&[patient("a")], &[study("s", "zz", 0.0)], &[], 365.0, Modality::Oct);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn nearest_event_tie_prefers_later_stroke() {
        let s = assign_labels(
            &[patient("a")],
            &[study("s", "a", 100.0)],
            &[event("a", 50.0), event("a", 150.0)],
            365.0,
            Modality::Oct,
        )
        .unwrap();
        assert_eq!(s[0].delta_days, Some(50.0));
    }

    #[test]
    fn task_predicates() {
        let risk90 = TaskSpec::new(Task::Risk, 90).unwrap();
        assert!(risk90.keeps(1, Some(60.0)));
        assert!(!risk90.keeps(1, Some(-60.0)));
        assert!(!risk90.keeps(1, Some(0.0)));
        assert!(risk90.keeps(0, None));
        let lasting = TaskSpec::new(Task::Lasting, 90).unwrap();
        assert!(lasting.keeps(1, Some(-90.0)));
        assert!(!lasting.keeps(1, Some(0.0)));
        assert!(TaskSpec::new(Task::Overall, 91).is_err());
    }

    #[derive(Clone)]
    struct Item(PatientId, bool);

    impl PatientKeyed for Item {
        fn patient_key(&self) -> &PatientId {
            &self.0
        }
        fn is_positive(&self) -> bool {
            self.1
        }
    }

    fn items(n: usize, positives: usize) -> Vec<Item> {
        (0..n)
            .flat_map(|i| {
                let id = PatientId(format!("p{i:03}"));
                vec![Item(id.clone(), i < positives), Item(id, false)]
            })
            .collect()
    }

    #[test]
    fn split_counts_and_leakage() {
        let data = items(10, 3);
        let s = patient_split(&data, 0.2, 11).unwrap();
        let test_ids: BTreeSet<_> = s.test.iter().map(|i| i.0.clone()).collect();
        let train_ids: BTreeSet<_> = s.train.iter().map(|i| i.0.clone()).collect();
        assert_eq!(test_ids.len(), 2);
        assert!(test_ids.is_disjoint(&train_ids));
        assert!(s.stratified);
        assert!(patient_split(&data, 1.0, 0).is_err());
    }

    #[test]
    fn split_falls_back_when_stratum_small() {
        let s = patient_split(&items(10, 1), 0.2, 1).unwrap();
        assert!(!s.stratified);
        assert_eq!(s.test.iter().map(|i| &i.0).collect::<BTreeSet<_>>().len(), 2);
    }

    #[test]
    fn folds_partition_patients() {
        let data = items(100, 13);
        let folds = kfold_patient_folds(&data, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = BTreeSet::new();
        for f in &folds {
            let v: BTreeSet<_> = f.validation.iter().map(|i| i.0.clone()).collect();
            let t: BTreeSet<_> = f.train.iter().map(|i| i.0.clone()).collect();
            assert_eq!(v.len(), 20);
            assert!(v.is_disjoint(&t));
            assert!(seen.is_disjoint(&v));
            seen.extend(v);
        }
        assert_eq!(seen.len(), 100);
        assert!(kfold_patient_folds(&data, 1, 0).is_err());
        assert!(kfold_patient_folds(&items(3, 1), 5, 0).is_err());
    }
}

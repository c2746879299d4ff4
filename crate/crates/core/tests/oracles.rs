//! Brute-force oracles and invariants for metrics, losses, cohort rules,
//! window labels and patient splits.

use std::collections::{BTreeSet, HashSet};

use chrono::{Datelike, Duration, NaiveDate};
use proptest::prelude::*;

use oct_stroke::cohort::{filter_stroke_encounters, StrokeEvent};
use oct_stroke::eval::{auprc, auroc, sensitivity_at_specificity};
use oct_stroke::labeling::{assign_labels, kfold_patient_folds, patient_split, PatientKeyed};
use oct_stroke::losses::{bce_loss, nt_xent_loss, TemperatureState};
use oct_stroke::nn::Tensor;
use oct_stroke::records::*;

// ---------------------------------------------------------------- metrics

fn auroc_oracle(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i] == 1) {
        for j in (0..s.len()).filter(|&j| y[j] == 0) {
            pairs += 1.0;
            if s[i] > s[j] {
                num += 1.0;
            } else if s[i] == s[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn auprc_oracle(s: &[f64], y: &[u8]) -> f64 {
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(s) {
        let called: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = called.iter().filter(|&&i| y[i] == 1).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / called.len() as f64;
        prev_recall = recall;
    }
    ap
}

fn sens_oracle(s: &[f64], y: &[u8], target: f64) -> f64 {
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let neg = s.len() as f64 - pos;
    let mut best: f64 = 0.0;
    for t in distinct_desc(s) {
        let spec = (0..s.len()).filter(|&i| y[i] == 0 && s[i] < t).count() as f64 / neg;
        let sens = (0..s.len()).filter(|&i| y[i] == 1 && s[i] >= t).count() as f64 / pos;
        if spec >= target {
            best = best.max(sens);
        }
    }
    best
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200, any::<bool>()).prop_flat_map(|(n, coarse)| {
        // Coarse scores produce many ties.
        let score = if coarse {
            (0u8..6).prop_map(|k| f64::from(k) / 5.0).boxed()
        } else {
            (0.0f64..1.0).boxed()
        };
        (proptest::collection::vec(score, n), proptest::collection::vec(0u8..=1, n))
            .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_quadratic_oracles((s, y) in scored()) {
        prop_assert!((auroc(&s, &y).unwrap() - auroc_oracle(&s, &y)).abs() <= 1e-12);
        prop_assert!((auprc(&s, &y).unwrap() - auprc_oracle(&s, &y)).abs() <= 1e-12);
        let sens = sensitivity_at_specificity(&s, &y, 0.5).unwrap();
        prop_assert!((sens - sens_oracle(&s, &y, 0.5)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps((s, y) in scored()) {
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 1.0).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&mapped, &y).unwrap()).abs() <= 1e-12);
        let flipped: Vec<u8> = y.iter().map(|l| 1 - l).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&s, &flipped).unwrap() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn metrics_on_hand_examples() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let y = [0, 0, 1, 1];
    assert_eq!(auroc(&s, &y).unwrap(), 0.75);
    assert!((auprc(&s, &y).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
}

// ----------------------------------------------------------------- losses

fn nt_xent_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let sim = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
    let rows = z.len();
    let mut total = 0.0;
    for i in 0..rows {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
        total += -((sim(i, partner) / tau).exp() / denom).ln();
    }
    total / rows as f64
}

fn embeddings() -> impl Strategy<Value = (Vec<Vec<f64>>, f64)> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(k, d)| {
        (
            proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), 2 * k)
                .prop_filter("nonzero rows", |z| z.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3))),
            0.1f64..2.0,
        )
    })
}

fn tensor(z: &[Vec<f64>]) -> Tensor {
    Tensor::from_vec(&[z.len(), z[0].len()], z.concat()).unwrap()
}

fn loss_of(z: &[Vec<f64>], tau: f64) -> f64 {
    nt_xent_loss(&tensor(z), &TemperatureState { tau, ..TemperatureState::default() })
        .unwrap()
        .loss
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nt_xent_matches_brute_force((z, tau) in embeddings()) {
        let got = loss_of(&z, tau);
        let want = if z.len() == 2 { 0.0 } else { nt_xent_oracle(&z, tau) };
        prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn nt_xent_ignores_row_scale_and_pair_order((z, tau) in embeddings(), scale in 0.01f64..100.0) {
        let base = loss_of(&z, tau);
        let scaled: Vec<Vec<f64>> = z.iter().enumerate()
            .map(|(i, r)| r.iter().map(|v| v * scale * (1 + i) as f64).collect())
            .collect();
        prop_assert!((loss_of(&scaled, tau) - base).abs() <= 1e-10);
        let mut reversed: Vec<Vec<f64>> = z.chunks(2).rev().flatten().cloned().collect();
        prop_assert!((loss_of(&reversed, tau) - base).abs() <= 1e-10);
        for pair in reversed.chunks_mut(2) {
            pair.swap(0, 1);
        }
        prop_assert!((loss_of(&reversed, tau) - base).abs() <= 1e-10);
    }

    #[test]
    fn bce_is_convex_in_the_prediction(y in 0u8..=1, a in 0.01f64..0.99, b in 0.01f64..0.99, w in 0.0f64..1.0) {
        let t = [f64::from(y)];
        let l = |p: f64| bce_loss(&[p], &t).unwrap().0;
        let mid = w * a + (1.0 - w) * b;
        prop_assert!(l(mid) <= w * l(a) + (1.0 - w) * l(b) + 1e-12);
    }
}

#[test]
fn single_pair_nt_xent_is_exactly_zero() {
    let z = vec![vec![0.3, -1.2, 0.7], vec![-2.0, 0.1, 0.4]];
    assert_eq!(loss_of(&z, 0.5), 0.0);
    assert_eq!(bce_loss(&[0.5], &[1.0]).unwrap().0, std::f64::consts::LN_2);
}

// ----------------------------------------------------------------- cohort

fn ts(days: i64, secs: i64) -> Timestamp {
    NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
        + Duration::days(days)
        + Duration::seconds(secs)
}

const CODES: [&str; 12] = [
    "I60.9", "i61.0", "I62", "I63.9", "I634", "G45.9", "G459", "G45.8", "I64", "I10", "E11.9", "H35.30",
];

#[derive(Debug, Clone)]
struct EncounterSpec {
    patient: usize,
    kind: u8,
    admit: Option<i64>,
    stay_secs: Option<i64>,
    codes: Vec<usize>,
    drugs: Vec<u8>,
    procs: Vec<u8>,
}

fn encounter_spec() -> impl Strategy<Value = EncounterSpec> {
    let stays = prop_oneof![
        Just(12 * 86_400),
        Just(12 * 86_400 + 1),
        Just(12 * 86_400 + 43_200),
        Just(12 * 86_400 - 1),
        0i64..30 * 86_400,
    ];
    (
        0usize..40,
        0u8..3,
        proptest::option::weighted(0.9, 0i64..2000),
        proptest::option::weighted(0.9, stays),
        proptest::collection::vec(0usize..CODES.len(), 0..4),
        proptest::collection::vec(0u8..3, 0..3),
        proptest::collection::vec(0u8..3, 0..3),
    )
        .prop_map(|(patient, kind, admit, stay_secs, codes, drugs, procs)| EncounterSpec {
            patient,
            kind,
            admit,
            stay_secs,
            codes,
            drugs,
            procs,
        })
}

fn build_encounter(i: usize, s: &EncounterSpec) -> Encounter {
    let admission_time = s.admit.map(|d| ts(d, 3600));
    let discharge_time = match (admission_time, s.stay_secs, s.admit) {
        (Some(a), Some(secs), _) => Some(a + Duration::seconds(secs)),
        (None, Some(secs), None) => Some(ts(100, secs)),
        _ => None,
    };
    Encounter {
        encounter_id: EncounterId(format!("E{i}")),
        patient_id: PatientId(format!("P{}", s.patient)),
        encounter_type: EncounterType::ALL[s.kind as usize],
        admission_time,
        discharge_time,
        diagnosis_codes: s.codes.iter().map(|&c| CODES[c].to_string()).collect(),
        drug_orders: s.drugs.iter().map(|&d| DrugOrder::ALL[d as usize]).collect(),
        procedures: s.procs.iter().map(|&p| Procedure::ALL[p as usize]).collect(),
        vitals: None,
    }
}

fn patients(n: usize) -> Vec<PatientRecord> {
    // Birth dates straddle the adult boundary for early admissions, and one
    // patient in ten has no recorded birth date. Patient 39 is unknown.
    (0..n - 1)
        .map(|i| PatientRecord {
            patient_id: PatientId(format!("P{i}")),
            birth_date: (i % 10 != 3).then(|| {
                NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + Duration::days(i as i64 * 37 % 1400)
            }),
            sex: Sex::ALL[i % 2],
            smoking_status: SmokingStatus::Never,
        })
        .collect()
}

/// Independent statement of the inclusion rules.
fn expected_subtype(p: Option<&PatientRecord>, e: &Encounter) -> Option<Subtype> {
    let birth = p?.birth_date?;
    let (a, d) = (e.admission_time?, e.discharge_time?);
    let adm = a.date();
    let years = adm.year() - birth.year() - i32::from((adm.month(), adm.day()) < (birth.month(), birth.day()));
    if years < 18 || e.encounter_type != EncounterType::Inpatient {
        return None;
    }
    if !e.procedures.iter().any(|p| *p == Procedure::Ct || *p == Procedure::CtAngiography) {
        return None;
    }
    let codes: Vec<String> = e.diagnosis_codes.iter().map(|c| c.to_uppercase().replace('.', "")).collect();
    let has = |f: &dyn Fn(&str) -> bool| codes.iter().any(|c| f(c));
    let subtype = if has(&|c| c.starts_with("I60") || c.starts_with("I61") || c.starts_with("I62")) {
        Subtype::Ich
    } else if has(&|c| c.starts_with("I63")) {
        Subtype::Is
    } else if has(&|c| c == "G459") {
        Subtype::Tia
    } else {
        return None;
    };
    let stay_secs = (d - a).num_seconds();
    let ok = match subtype {
        Subtype::Ich => stay_secs > 12 * 86_400,
        Subtype::Is => e.drug_orders.iter().any(|o| matches!(o, DrugOrder::Rtpa | DrugOrder::Antiplatelet)),
        Subtype::Tia => e.drug_orders.contains(&DrugOrder::Antiplatelet),
    };
    ok.then_some(subtype)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn rule_engine_matches_independent_predicate(specs in proptest::collection::vec(encounter_spec(), 50)) {
        let pats = patients(40);
        let encounters: Vec<Encounter> = specs.iter().enumerate().map(|(i, s)| build_encounter(i, s)).collect();
        let (events, traces) = filter_stroke_encounters(&pats, &encounters);
        prop_assert_eq!(traces.len(), encounters.len());
        let mut expected = Vec::new();
        for e in &encounters {
            let p = pats.iter().find(|p| p.patient_id == e.patient_id);
            if let Some(subtype) = expected_subtype(p, e) {
                expected.push((e.encounter_id.clone(), subtype, e.admission_time.unwrap()));
            }
        }
        let got: Vec<_> = events.iter().map(|ev| (ev.encounter_id.clone(), ev.subtype, ev.stroke_time)).collect();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn haemorrhage_needs_more_than_twelve_days() {
    let pats = patients(40);
    let base = EncounterSpec {
        patient: 0,
        kind: 0,
        admit: Some(7000),
        stay_secs: None,
        codes: vec![0],
        drugs: vec![],
        procs: vec![0],
    };
    let run = |secs: i64| {
        let e = build_encounter(0, &EncounterSpec { stay_secs: Some(secs), ..base.clone() });
        filter_stroke_encounters(&pats, &[e]).0.len()
    };
    assert_eq!(run(12 * 86_400), 0);
    assert_eq!(run(12 * 86_400 + 43_200), 1);
    assert_eq!(run(12 * 86_400 + 1), 1);
}

// ----------------------------------------------------------------- labels

fn study(i: usize, patient: usize, day: i64) -> ScanStudy {
    let img: ImageRef = ImageGrid::filled(8, 8, 0.5, Modality::Infrared).into();
    ScanStudy {
        study_id: StudyId(format!("S{i}")),
        patient_id: PatientId(format!("P{patient}")),
        acquisition_time: ts(day, 36_000),
        eye: Eye::ALL[i % 2],
        oct_volume: OctVolume::Stored(vec![ImageGrid::filled(8, 8, 0.5, Modality::Oct)].into()),
        infrared: Some(img),
        anatomy: Anatomy::Macula,
        scan_mode: ScanMode::Art,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn window_labels_match_scan_by_event_oracle(
        scans in proptest::collection::vec((0usize..12, 0i64..3000), 1..60),
        strokes in proptest::collection::vec((0usize..12, 0i64..3000, 0usize..3, 0i64..86_400), 0..20),
        window in prop_oneof![Just(365.0), Just(90.0), 1.0f64..800.0],
    ) {
        let pats = patients(13);
        let studies: Vec<ScanStudy> = scans.iter().enumerate().map(|(i, &(p, d))| study(i, p, d)).collect();
        let events: Vec<StrokeEvent> = strokes
            .iter()
            .enumerate()
            .map(|(i, &(p, d, s, secs))| StrokeEvent {
                patient_id: PatientId(format!("P{p}")),
                encounter_id: EncounterId(format!("E{i}")),
                stroke_time: ts(d, secs),
                subtype: Subtype::ALL[s],
            })
            .collect();
        let samples = assign_labels(&pats, &studies, &events, window, Modality::Oct).unwrap();
        prop_assert_eq!(samples.len(), studies.len());
        for (sample, st) in samples.iter().zip(&studies) {
            let mut nearest: Option<(f64, Subtype)> = None;
            let mut any_within = false;
            for e in &events {
                if e.patient_id != st.patient_id {
                    continue;
                }
                let d = (e.stroke_time - st.acquisition_time).num_seconds() as f64 / 86_400.0;
                any_within |= d.abs() <= window;
                let better = match nearest {
                    None => true,
                    Some((b, _)) => d.abs() < b.abs() || (d.abs() == b.abs() && d > b),
                };
                if better {
                    nearest = Some((d, e.subtype));
                }
            }
            prop_assert_eq!(sample.y, u8::from(any_within));
            prop_assert_eq!(sample.delta_days, nearest.map(|n| n.0));
            prop_assert_eq!(sample.subtype, nearest.filter(|_| any_within).map(|n| n.1));
        }
    }
}

// ----------------------------------------------------------------- splits

#[derive(Debug, Clone)]
struct Row {
    patient: PatientId,
    y: bool,
}

impl PatientKeyed for Row {
    fn patient_key(&self) -> &PatientId {
        &self.patient
    }

    fn is_positive(&self) -> bool {
        self.y
    }
}

fn ids(rows: &[Row]) -> HashSet<&PatientId> {
    rows.iter().map(|r| &r.patient).collect()
}

#[test]
fn splits_and_folds_never_share_patients() {
    for seed in 0..100u64 {
        let rows: Vec<Row> = (0..400)
            .map(|i| {
                let p = (i * 7 + seed as usize) % 150;
                Row {
                    patient: PatientId(format!("P{p}")),
                    y: p.is_multiple_of(9) && i % 2 == 0,
                }
            })
            .collect();
        let split = patient_split(&rows, 0.2, seed).unwrap();
        assert!(ids(&split.train).is_disjoint(&ids(&split.test)), "seed {seed}");
        assert_eq!(split.train.len() + split.test.len(), rows.len());
        let folds = kfold_patient_folds(&split.train, 5, seed).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: BTreeSet<&PatientId> = BTreeSet::new();
        for f in &folds {
            let val = ids(&f.validation);
            assert!(ids(&f.train).is_disjoint(&val), "seed {seed}");
            assert!(val.iter().all(|p| seen.insert(p)), "patient in two validation folds");
            assert!(ids(&split.test).is_disjoint(&val));
        }
        assert_eq!(seen.len(), ids(&split.train).len());
    }
}

// ------------------------------------------------------------- aggregates

proptest! {
    #[test]
    fn aggregate_matches_exact_rational_arithmetic(values in proptest::collection::vec(0.0f64..1.0, 10)) {
        use num_bigint::BigInt;
        use num_rational::BigRational;
        use num_traits::ToPrimitive;

        let exact: Vec<BigRational> = values.iter().map(|&v| BigRational::from_float(v).unwrap()).collect();
        let n = BigRational::from_integer(BigInt::from(values.len()));
        let mean = exact.iter().cloned().fold(BigRational::from_integer(BigInt::from(0)), |a, b| a + b) / &n;
        let ss = exact.iter().map(|v| (v - &mean) * (v - &mean)).fold(BigRational::from_integer(BigInt::from(0)), |a, b| a + b);
        let var = ss / (n - BigRational::from_integer(BigInt::from(1)));
        let agg = oct_stroke::eval::aggregate_runs(&values).unwrap();
        prop_assert!((agg.mean - mean.to_f64().unwrap()).abs() <= 1e-12);
        prop_assert!((agg.sd - var.to_f64().unwrap().sqrt()).abs() <= 1e-12);
    }
}

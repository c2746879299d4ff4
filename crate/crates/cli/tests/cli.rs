use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oct_stroke::cohort::{filter_scan_studies, filter_stroke_encounters};
use oct_stroke::labeling::{assign_labels, task_filter, Task, TaskSpec};
use oct_stroke::records::Modality;
use oct_stroke_cli::io::{read_json, read_population, read_tsv, LabelRow};
use oct_stroke_cli::manifest::{RunManifest, MANIFEST_FILE};

const BIN: &str = env!("CARGO_BIN_EXE_oct-stroke");

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn oct_stroke(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = oct_stroke(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn full_run(out: &Path, extra: &[&str]) -> RunManifest {
    let cfg = tiny();
    let mut args = vec!["full-run", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&args, out);
    read_json(&out.join(MANIFEST_FILE)).unwrap()
}

fn metric_values(dir: &Path) -> BTreeMap<String, f64> {
    let text = std::fs::read_to_string(dir.join("metrics.tsv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let mean = header.iter().position(|h| *h == "mean").expect("mean column");
    lines
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            let key = cols[..mean].join("|");
            (key, cols[mean].parse().unwrap_or(f64::NAN))
        })
        .collect()
}

#[test]
fn full_run_populates_tables_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let ma = full_run(&a, &[]);

    for rel in ma.all_outputs() {
        assert!(a.join(rel).exists(), "manifest lists missing {rel}");
    }
    for stage in ["synth", "cohort", "label", "features", "pretrain", "search", "finetune", "evaluate", "report"] {
        assert!(ma.stages.contains_key(stage), "no record for {stage}");
    }
    for table in [
        "table_overall",
        "table_horizons",
        "table_sensitivity",
        "figure_age_groups",
        "figure_subtypes",
        "figure_comorbidities",
    ] {
        let text = std::fs::read_to_string(a.join(format!("tables/{table}.txt"))).unwrap();
        assert!(text.contains(" ± "), "{table} has no mean ± SD cell:\n{text}");
    }
    let horizons = std::fs::read_to_string(a.join("tables/table_horizons.txt")).unwrap();
    assert!(horizons.contains("<90") && horizons.contains("<365"));

    let mb = full_run(&b, &[]);
    assert_eq!(ma.manifest_hash, mb.manifest_hash);
    assert_eq!(ma.run_id, mb.run_id);

    let mc = full_run(&c, &["--jobs", "2"]);
    let (va, vc) = (metric_values(&a), metric_values(&c));
    assert_eq!(va.keys().collect::<Vec<_>>(), vc.keys().collect::<Vec<_>>());
    for (k, x) in &va {
        let y = vc[k];
        assert!((x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-9, "{k}: {x} vs {y}");
    }
    assert_eq!(ma.config_hash, mc.config_hash);
}

#[test]
fn evaluate_twice_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    full_run(out, &[]);
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let snapshot = |out: &Path| -> Vec<Vec<u8>> {
        ["scores_multimodal_oct.json", "scores_unimodal_infrared.json", "metrics.tsv", "report.txt"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect()
    };
    let before = snapshot(out);
    ok(&["evaluate", "--config", cfg], out);
    ok(&["report", "--config", cfg], out);
    let after = snapshot(out);
    assert!(before == after, "re-evaluation changed the outputs");
}

#[test]
fn label_counts_match_in_process_task_filter() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    for stage in ["synth", "cohort"] {
        ok(&[stage, "--config", cfg], out);
    }
    ok(&["label", "--config", cfg, "--task", "risk", "--horizon", "90"], out);

    let pop = read_population(out).unwrap();
    let (events, _) = filter_stroke_encounters(&pop.patients, &pop.encounters);
    let studies = filter_scan_studies(&pop.patients, &pop.studies);
    let spec = TaskSpec::new(Task::Risk, 90).unwrap();
    for m in Modality::ALL.iter().copied() {
        let samples = assign_labels(&pop.patients, &studies, &events, 365.0, m).unwrap();
        let kept = task_filter(&samples, spec);
        let rows: Vec<LabelRow> = read_tsv(&out.join(format!("labels_{m}.tsv"))).unwrap();
        assert_eq!(rows.len(), kept.len(), "{m}");
        assert_eq!(
            rows.iter().filter(|r| r.y == 1).count(),
            kept.iter().filter(|s| s.y == 1).count(),
            "{m} positives"
        );
    }
}

#[test]
fn missing_upstream_is_a_dependency_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = oct_stroke(&["features", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage `synth`"), "{err}");
}

#[test]
fn bad_config_names_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "schema_version = 1\n[labels]\nk_fold = 5\n").unwrap();
    let o = oct_stroke(&["synth", "--config", path.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("k_fold") && err.contains("line 3"), "{err}");

    std::fs::write(&path, "[labels]\nk_folds = 1\n").unwrap();
    let o = oct_stroke(&["synth", "--config", path.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_table_is_a_data_error_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    ok(&["synth", "--config", cfg], out);
    let path = out.join("patients.tsv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[3] = lines[3].replacen("\tfemale\t", "\tX\t", 1).replacen("\tmale\t", "\tX\t", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = oct_stroke(&["cohort", "--config", cfg], out);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("patients.tsv") && err.contains("line 4"), "{err}");
}

#[test]
fn out_dir_defaults_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = Command::new(BIN)
        .args(["synth", "--config", cfg.to_str().unwrap()])
        .env("OCT_STROKE_OUT", tmp.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("patients.tsv").exists());
    assert!(tmp.path().join(MANIFEST_FILE).exists());
}

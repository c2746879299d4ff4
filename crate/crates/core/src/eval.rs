//! Ranking metrics with exact tie handling, and the report tables built
//! from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{Task, TaskSpec, HORIZONS};
use crate::records::{Eye, Modality, PatientId, Subtype};

/// One scored test sample with the tags used for subgroup analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub patient_id: PatientId,
    pub score: f64,
    pub label: u8,
    /// Age at scan acquisition, in completed years.
    pub age_years: Option<i32>,
    pub subtype: Option<Subtype>,
    /// ICD group labels (e.g. `"I00-I99"`) in the patient's history.
    pub comorbidities: Vec<String>,
    pub eye: Eye,
    pub delta_days: Option<f64>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric("metric", format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::data(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn both_classes(pos: usize, neg: usize, metric: &str) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve via the rank-sum statistic with mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    both_classes(pos, neg, "AUROC")?;
    let idx = ascending(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * block_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision over descending thresholds, tied scores as one block.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += block_pos;
        fp += j + 1 - i - block_pos;
        if block_pos > 0 {
            area += (block_pos as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j + 1;
    }
    Ok(area)
}

/// Highest sensitivity among thresholds whose specificity is at least
/// `target`. A sample is called positive when `score >= threshold`;
/// thresholds are the distinct scores plus both infinities.
pub fn sensitivity_at_specificity(scores: &[f64], labels: &[u8], target: f64) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    both_classes(pos, neg, "sensitivity at specificity")?;
    if target <= 0.0 {
        return Ok(1.0);
    }
    let idx = ascending(scores);
    // Walk thresholds upward; the first one meeting the target is the
    // smallest and hence the most sensitive.
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        if neg_below as f64 / neg as f64 >= target {
            return Ok((pos - pos_below) as f64 / pos as f64);
        }
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_below += block_pos;
        neg_below += j + 1 - i - block_pos;
        i = j + 1;
    }
    // Only +inf remains: specificity 1, sensitivity 0.
    Ok(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// ROC points `(fpr, tpr)` from threshold `+inf` downwards.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    both_classes(pos, neg, "ROC curve")?;
    let mut idx = ascending(scores);
    idx.reverse();
    let mut pts = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += block_pos;
        fp += j + 1 - i - block_pos;
        pts.push(CurvePoint {
            threshold: scores[idx[i]],
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
        });
        i = j + 1;
    }
    Ok(pts)
}

/// Precision-recall points `(recall, precision)` from the highest threshold down.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive".into()));
    }
    let roc_like = {
        let mut idx = ascending(scores);
        idx.reverse();
        idx
    };
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < roc_like.len() {
        let mut j = i;
        while j + 1 < roc_like.len() && scores[roc_like[j + 1]] == scores[roc_like[i]] {
            j += 1;
        }
        let block_pos = roc_like[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += block_pos;
        fp += j + 1 - i - block_pos;
        pts.push(CurvePoint {
            threshold: scores[roc_like[i]],
            x: tp as f64 / pos as f64,
            y: tp as f64 / (tp + fp) as f64,
        });
        i = j + 1;
    }
    Ok(pts)
}

/// Mean and sample standard deviation of per-run values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    /// True when only one run was available and `sd` is reported as 0.
    pub single_run: bool,
}

pub fn aggregate_runs(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::config("cannot aggregate zero runs"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate {
        mean,
        sd,
        n,
        single_run: n == 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
    /// Sensitivity at specificity 0.5.
    SensAtSpec50,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
            Metric::SensAtSpec50 => "sens@0.5spec",
        }
    }

    pub fn compute(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
            Metric::SensAtSpec50 => sensitivity_at_specificity(scores, labels, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "<40")]
    Under40,
    #[serde(rename = "40-60")]
    From40To60,
    #[serde(rename = ">60")]
    Over60,
}

impl AgeBand {
    pub const ALL: [AgeBand; 3] = [AgeBand::Under40, AgeBand::From40To60, AgeBand::Over60];

    /// `40 <= age <= 60` is the middle band.
    pub fn of(age_years: i32) -> AgeBand {
        if age_years < 40 {
            AgeBand::Under40
        } else if age_years <= 60 {
            AgeBand::From40To60
        } else {
            AgeBand::Over60
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeBand::Under40 => "<40",
            AgeBand::From40To60 => "40-60",
            AgeBand::Over60 => ">60",
        }
    }
}

pub const COMORBIDITY_GROUPS: [&str; 4] = ["H00-H59", "I00-I99", "G00-G99", "D50-D89"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    AgeBand,
    Subtype,
    ComorbidityGroup,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::AgeBand, Grouping::Subtype, Grouping::ComorbidityGroup];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::AgeBand => "age_band",
            Grouping::Subtype => "subtype",
            Grouping::ComorbidityGroup => "comorbidity_group",
        }
    }

    pub fn values(self) -> Vec<&'static str> {
        match self {
            Grouping::AgeBand => AgeBand::ALL.iter().map(|b| b.as_str()).collect(),
            Grouping::Subtype => Subtype::ALL.iter().map(|s| s.as_str()).collect(),
            Grouping::ComorbidityGroup => COMORBIDITY_GROUPS.to_vec(),
        }
    }

    /// Whether `s` belongs to the subgroup `value`. Subtype subgroups keep
    /// every negative and the positives of that subtype.
    pub fn contains(self, value: &str, s: &ScoredSample) -> bool {
        match self {
            Grouping::AgeBand => s.age_years.is_some_and(|a| AgeBand::of(a).as_str() == value),
            Grouping::Subtype => s.label == 0 || s.subtype.is_some_and(|t| t.as_str() == value),
            Grouping::ComorbidityGroup => s.comorbidities.iter().any(|c| c == value),
        }
    }
}

pub fn subgroup_members<'a>(samples: &'a [ScoredSample], grouping: Grouping, value: &str) -> Vec<&'a ScoredSample> {
    samples.iter().filter(|s| grouping.contains(value, s)).collect()
}

/// Identifies one report cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    /// `"unimodal"` or `"multimodal"`.
    pub model: String,
    pub modality: Modality,
    pub task: Task,
    pub horizon_days: u32,
    /// `"all"` or `"<grouping>=<value>"`.
    pub subgroup: String,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub key: CellKey,
    /// `None` when the cell is undefined (a class is missing).
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub runs: Vec<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub note: Option<String>,
}

impl MetricCell {
    pub fn display(&self) -> String {
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "undefined".to_string(),
        }
    }
}

/// Scores one cell across runs. Each run scores the same test set with a
/// different model; `keep` selects the samples belonging to the cell.
pub fn evaluate_cell(
    key: CellKey,
    runs: &[Vec<ScoredSample>],
    keep: impl Fn(&ScoredSample) -> bool,
) -> Result<MetricCell> {
    if runs.is_empty() {
        return Err(Error::config("no runs to evaluate"));
    }
    let mut values = Vec::with_capacity(runs.len());
    let (mut n_pos, mut n_neg) = (0, 0);
    for (r, run) in runs.iter().enumerate() {
        let (scores, labels): (Vec<f64>, Vec<u8>) = run.iter().filter(|s| keep(s)).map(|s| (s.score, s.label)).unzip();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if r == 0 {
            (n_pos, n_neg) = (pos, labels.len() - pos);
        }
        match key.metric.compute(&scores, &labels) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(msg)) => {
                return Ok(MetricCell {
                    key,
                    mean: None,
                    sd: None,
                    runs: Vec::new(),
                    n_pos,
                    n_neg,
                    note: Some(msg),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let agg = aggregate_runs(&values)?;
    Ok(MetricCell {
        key,
        mean: Some(agg.mean),
        sd: Some(agg.sd),
        runs: values,
        n_pos,
        n_neg,
        note: agg.single_run.then(|| "single run; SD reported as 0".to_string()),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricCell>,
    pub notes: Vec<String>,
}

pub const SD_FOOTER: &str = "± is the sample standard deviation across the cross-validation fold models, each evaluated on the held-out test set.";

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport {
            cells: Vec::new(),
            notes: vec![SD_FOOTER.to_string()],
        }
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.cells.extend(other.cells);
        for n in other.notes {
            if !self.notes.contains(&n) {
                self.notes.push(n);
            }
        }
    }

    pub fn get(&self, key: &CellKey) -> Option<&MetricCell> {
        self.cells.iter().find(|c| &c.key == key)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tmodality\ttask\thorizon_days\tsubgroup\tmetric\tmean\tsd\tn_runs\tn_pos\tn_neg\tnote\n");
        for c in &self.cells {
            let k = &c.key;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                k.model,
                k.modality,
                k.task.as_str(),
                k.horizon_days,
                k.subgroup,
                k.metric.as_str(),
                fmt(c.mean),
                fmt(c.sd),
                c.runs.len(),
                c.n_pos,
                c.n_neg,
                c.note.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// Overall-task cells for one model and modality.
pub fn overall_report(runs: &[Vec<ScoredSample>], model: &str, modality: Modality) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for metric in [Metric::Auroc, Metric::Auprc, Metric::SensAtSpec50] {
        let key = CellKey {
            model: model.to_string(),
            modality,
            task: Task::Overall,
            horizon_days: 365,
            subgroup: "all".into(),
            metric,
        };
        report.cells.push(evaluate_cell(key, runs, |_| true)?);
    }
    Ok(report)
}

/// Risk and lasting-effect cells at every horizon, evaluated on the
/// task-filtered test set.
pub fn horizon_report(runs: &[Vec<ScoredSample>], model: &str, modality: Modality) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for task in [Task::Lasting, Task::Risk] {
        for h in HORIZONS {
            let spec = TaskSpec::new(task, h)?;
            for metric in [Metric::Auroc, Metric::SensAtSpec50] {
                let key = CellKey {
                    model: model.to_string(),
                    modality,
                    task,
                    horizon_days: h,
                    subgroup: "all".into(),
                    metric,
                };
                report.cells.push(evaluate_cell(key, runs, |s| spec.keeps(s.label, s.delta_days))?);
            }
        }
    }
    Ok(report)
}

pub fn subgroup_report(
    runs: &[Vec<ScoredSample>],
    grouping: Grouping,
    model: &str,
    modality: Modality,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for value in grouping.values() {
        let key = CellKey {
            model: model.to_string(),
            modality,
            task: Task::Overall,
            horizon_days: 365,
            subgroup: format!("{}={value}", grouping.as_str()),
            metric: Metric::Auroc,
        };
        report.cells.push(evaluate_cell(key, runs, |s| grouping.contains(value, s))?);
    }
    Ok(report)
}

/// A rendered table: optional section banners, each with labelled rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub sections: Vec<TableSection>,
    pub footer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSection {
    pub name: Option<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn render_text(&self) -> String {
        let ncol = self.columns.len();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for s in &self.sections {
            if let Some(name) = &s.name {
                widths[0] = widths[0].max(name.chars().count() + 4);
            }
            for (label, cells) in &s.rows {
                widths[0] = widths[0].max(label.chars().count());
                for (i, c) in cells.iter().enumerate() {
                    widths[i + 1] = widths[i + 1].max(c.chars().count());
                }
            }
        }
        let line = |cells: &[String]| {
            let mut l = String::from("|");
            for (c, w) in cells.iter().zip(&widths) {
                let pad = w - c.chars().count();
                let _ = write!(l, " {c}{} |", " ".repeat(pad));
            }
            l
        };
        let mut out = format!("{}\n\n", self.title);
        out.push_str(&line(&self.columns));
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&line(&rule).replace(' ', "-"));
        out.push('\n');
        for s in &self.sections {
            if let Some(name) = &s.name {
                let mut banner = vec![format!("**{name}**")];
                banner.extend(std::iter::repeat_n(String::new(), ncol - 1));
                out.push_str(&line(&banner));
                out.push('\n');
            }
            for (label, cells) in &s.rows {
                let mut row = vec![label.clone()];
                row.extend(cells.iter().cloned());
                out.push_str(&line(&row));
                out.push('\n');
            }
        }
        if let Some(f) = &self.footer {
            let _ = write!(out, "\n{f}\n");
        }
        out
    }

    pub fn render_tsv(&self) -> String {
        let mut out = String::from("section\t");
        out.push_str(&self.columns.join("\t"));
        out.push('\n');
        for s in &self.sections {
            for (label, cells) in &s.rows {
                let _ = writeln!(out, "{}\t{label}\t{}", s.name.as_deref().unwrap_or(""), cells.join("\t"));
            }
        }
        out
    }
}

pub const HORIZON_HEADERS: [&str; 4] = ["<90", "<180", "<270", "<365"];
pub const MODALITY_ROWS: [(Modality, &str); 2] = [(Modality::Infrared, "Infrared"), (Modality::Oct, "OCT")];
pub const MODEL_NAME: &str = "Late-fusion CNN";

fn cell_text(report: &MetricsReport, key: CellKey) -> String {
    report.get(&key).map(MetricCell::display).unwrap_or_else(|| "missing".into())
}

fn key(model: &str, modality: Modality, task: Task, horizon: u32, subgroup: &str, metric: Metric) -> CellKey {
    CellKey {
        model: model.into(),
        modality,
        task,
        horizon_days: horizon,
        subgroup: subgroup.into(),
        metric,
    }
}

/// Overall AUROC, unimodal against multimodal, per modality.
pub fn overall_table(report: &MetricsReport) -> Table {
    let sections = MODALITY_ROWS
        .iter()
        .map(|&(m, name)| TableSection {
            name: Some(name.to_string()),
            rows: vec![(
                MODEL_NAME.to_string(),
                ["unimodal", "multimodal"]
                    .iter()
                    .map(|model| cell_text(report, key(model, m, Task::Overall, 365, "all", Metric::Auroc)))
                    .collect(),
            )],
        })
        .collect();
    Table {
        title: "Overall AUROC (± SD) across unimodal and multimodal models".into(),
        columns: vec!["Models".into(), "Unimodal".into(), "Multimodal".into()],
        sections,
        footer: Some(SD_FOOTER.into()),
    }
}

fn horizon_rows(report: &MetricsReport, task: Task, metric: Metric) -> Vec<(String, Vec<String>)> {
    MODALITY_ROWS
        .iter()
        .map(|&(m, name)| {
            (
                name.to_string(),
                HORIZONS
                    .iter()
                    .map(|&h| cell_text(report, key("multimodal", m, task, h, "all", metric)))
                    .collect(),
            )
        })
        .collect()
}

fn horizon_columns() -> Vec<String> {
    std::iter::once("Modality".to_string())
        .chain(HORIZON_HEADERS.iter().map(|h| h.to_string()))
        .collect()
}

/// AUROC for lasting-effect detection and risk prediction by horizon.
pub fn horizon_table(report: &MetricsReport) -> Table {
    Table {
        title: "AUROC (± SD) for risk prediction and detection of lasting effects across time horizons (days)".into(),
        columns: horizon_columns(),
        sections: vec![
            TableSection {
                name: Some("Detection of lasting effects".into()),
                rows: horizon_rows(report, Task::Lasting, Metric::Auroc),
            },
            TableSection {
                name: Some("Risk prediction".into()),
                rows: horizon_rows(report, Task::Risk, Metric::Auroc),
            },
        ],
        footer: Some(SD_FOOTER.into()),
    }
}

/// Sensitivity at 0.5 specificity for risk prediction by horizon.
pub fn sensitivity_table(report: &MetricsReport) -> Table {
    Table {
        title: "Sensitivity@0.5 specificity (± SD) for risk prediction across time horizons (days)".into(),
        columns: horizon_columns(),
        sections: vec![TableSection {
            name: None,
            rows: horizon_rows(report, Task::Risk, Metric::SensAtSpec50),
        }],
        footer: Some(SD_FOOTER.into()),
    }
}

/// Subgroup AUROC by modality, one row per subgroup value.
pub fn subgroup_table(report: &MetricsReport, grouping: Grouping) -> Table {
    let title = match grouping {
        Grouping::AgeBand => "AUROC (± SD) by age group (years)",
        Grouping::Subtype => "AUROC (± SD) by stroke subtype",
        Grouping::ComorbidityGroup => "AUROC (± SD) by comorbidity group",
    };
    let rows = grouping
        .values()
        .into_iter()
        .map(|v| {
            let sub = format!("{}={v}", grouping.as_str());
            (
                v.to_string(),
                [Modality::Oct, Modality::Infrared]
                    .iter()
                    .map(|&m| cell_text(report, key("multimodal", m, Task::Overall, 365, &sub, Metric::Auroc)))
                    .collect(),
            )
        })
        .collect();
    Table {
        title: title.into(),
        columns: vec!["Subgroup".into(), "OCT".into(), "Infrared".into()],
        sections: vec![TableSection { name: None, rows }],
        footer: Some(SD_FOOTER.into()),
    }
}

/// All report tables in presentation order.
pub fn all_tables(report: &MetricsReport) -> BTreeMap<&'static str, Table> {
    let mut t = BTreeMap::new();
    t.insert("table_overall", overall_table(report));
    t.insert("table_horizons", horizon_table(report));
    t.insert("table_sensitivity", sensitivity_table(report));
    t.insert("figure_age_groups", subgroup_table(report, Grouping::AgeBand));
    t.insert("figure_subtypes", subgroup_table(report, Grouping::Subtype));
    t.insert("figure_comorbidities", subgroup_table(report, Grouping::ComorbidityGroup));
    t
}

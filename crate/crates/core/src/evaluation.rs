//! Prediction quality: graph and node-score MAE, score-distribution KL
//! divergence, paired t-tests against a baseline, and report files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{vectorize_upper, ConnectivityMatrix, PopulationDataset};
use crate::special::student_t_two_tailed;
use crate::topology::{CentralityMetric, CentralityVector, DistanceInterpretation, TopologyError};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("cannot parse report: {0}")]
    Parse(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, EvaluationError>;

/// Report columns: graph MAE, then the MAE of each node score.
pub const MAE_COLUMNS: [&str; 7] = ["mae", "mae_cc", "mae_bc", "mae_ec", "mae_pc", "mae_eff", "mae_clst"];
const MAE_TITLES: [&str; 7] = ["MAE", "MAE(CC)", "MAE(BC)", "MAE(EC)", "MAE(PC)", "MAE(EFF)", "MAE(Clst)"];

fn check_pairs(real: &[ConnectivityMatrix], pred: &[ConnectivityMatrix]) -> Result<()> {
    if real.len() != pred.len() {
        return Err(EvaluationError::Dimension(format!(
            "{} real vs {} predicted graphs",
            real.len(),
            pred.len()
        )));
    }
    if let Some((a, b)) = real.iter().zip(pred).find(|(a, b)| a.r() != b.r()) {
        return Err(EvaluationError::Dimension(format!("{} vs {} ROIs", a.r(), b.r())));
    }
    Ok(())
}

fn graph_mae(a: &ConnectivityMatrix, b: &ConnectivityMatrix) -> f64 {
    let (x, y) = (vectorize_upper(a), vectorize_upper(b));
    if x.is_empty() {
        return 0.0;
    }
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
}

/// Mean over subjects of the upper-triangle mean absolute error.
pub fn mae_graphs(real: &[ConnectivityMatrix], pred: &[ConnectivityMatrix]) -> Result<f64> {
    check_pairs(real, pred)?;
    if real.is_empty() {
        return Err(EvaluationError::Precondition("no graphs to compare".into()));
    }
    Ok(real.iter().zip(pred).map(|(a, b)| graph_mae(a, b)).sum::<f64>() / real.len() as f64)
}

/// Node scores of one graph. An all-zero graph has no principal
/// eigenvector; it is scored with the uniform unit vector.
pub fn node_scores(
    g: &ConnectivityMatrix,
    metric: CentralityMetric,
    interp: DistanceInterpretation,
) -> Result<Vec<f64>> {
    match metric.compute(g, interp) {
        Ok(CentralityVector { values, .. }) => Ok(values),
        Err(TopologyError::Degenerate(_)) => Ok(vec![1.0 / (g.r() as f64).sqrt(); g.r()]),
        Err(e) => Err(e.into()),
    }
}

fn score_mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute difference between the stacked node-score matrices.
pub fn mae_topology(
    real: &[ConnectivityMatrix],
    pred: &[ConnectivityMatrix],
    metric: CentralityMetric,
    interp: DistanceInterpretation,
) -> Result<f64> {
    check_pairs(real, pred)?;
    if real.is_empty() {
        return Err(EvaluationError::Precondition("no graphs to compare".into()));
    }
    let mut total = 0.0;
    for (a, b) in real.iter().zip(pred) {
        total += score_mae(&node_scores(a, metric, interp)?, &node_scores(b, metric, interp)?);
    }
    Ok(total / real.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 32, epsilon: 1e-9 }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.epsilon > 0.0) {
            return Err(EvaluationError::Precondition(format!(
                "histograms need >= 2 bins and positive smoothing, got {self:?}"
            )));
        }
        Ok(())
    }

    fn histogram(&self, values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let mut counts = vec![0.0; self.bins];
        let width = hi - lo;
        for &x in values {
            let bin = if width > 0.0 {
                (((x - lo) / width * self.bins as f64) as usize).min(self.bins - 1)
            } else {
                0
            };
            counts[bin] += 1.0;
        }
        let total: f64 = counts.iter().map(|c| c + self.epsilon).sum();
        counts.iter().map(|c| (c + self.epsilon) / total).collect()
    }
}

/// `KL(P_real ‖ P_pred)` between smoothed histograms over the joint range.
pub fn kl_divergence(real: &[f64], pred: &[f64], spec: &HistogramSpec) -> Result<f64> {
    spec.validate()?;
    if real.is_empty() || pred.is_empty() {
        return Err(EvaluationError::Precondition("KL divergence of an empty sample".into()));
    }
    if real.iter().chain(pred).any(|x| !x.is_finite()) {
        return Err(EvaluationError::Precondition("non-finite score".into()));
    }
    let lo = real.iter().chain(pred).copied().fold(f64::INFINITY, f64::min);
    let hi = real.iter().chain(pred).copied().fold(f64::NEG_INFINITY, f64::max);
    let p = spec.histogram(real, lo, hi);
    let q = spec.histogram(pred, lo, hi);
    // Clamp away rounding below zero; the divergence is nonnegative.
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
}

/// Two-tailed paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(EvaluationError::Dimension(format!("{} vs {} samples", a.len(), b.len())));
    }
    let m = a.len();
    if m < 2 {
        return Err(EvaluationError::Precondition(format!("paired t-test needs >= 2 pairs, got {m}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / m as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let t = mean / (var.sqrt() / (m as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, (m - 1) as f64),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub view: usize,
    pub values: [f64; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRow {
    pub view: usize,
    /// One divergence per node score, in [`CentralityMetric::ALL`] order.
    pub values: [f64; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// Source view id, used only for headings.
    pub source_view: Option<usize>,
    pub rows: Vec<ReportRow>,
    pub average: [f64; 7],
    pub kl: Vec<KlRow>,
    pub kl_average: [f64; 6],
    /// Paired t-test p-values against a baseline, one row per view.
    pub p_values: Option<Vec<ReportRow>>,
}

/// Per-subject errors of one target view.
struct ViewErrors {
    per_subject: Vec<[f64; 7]>,
    kl: [f64; 6],
}

fn mean_columns<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> [f64; N] {
    let mut sum = [0.0; N];
    let mut n = 0usize;
    for row in rows {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
        n += 1;
    }
    sum.map(|s| if n == 0 { f64::NAN } else { s / n as f64 })
}

/// Pairs each predicted graph with the truth of the same subject and view.
fn aligned_graphs(
    pred: &PopulationDataset,
    truth: &PopulationDataset,
    view_id: usize,
) -> Result<(Vec<ConnectivityMatrix>, Vec<ConnectivityMatrix>)> {
    if pred.rois() != truth.rois() {
        return Err(EvaluationError::Dimension(format!(
            "predictions have {} ROIs, truth has {}",
            pred.rois(),
            truth.rois()
        )));
    }
    let pv = pred.view_position(view_id).expect("view of pred");
    let tv = truth
        .view_position(view_id)
        .ok_or_else(|| EvaluationError::Dimension(format!("ground truth lacks view {view_id}")))?;
    let truth_index: HashMap<&str, usize> =
        truth.subject_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut order: Vec<usize> = (0..pred.num_subjects()).collect();
    order.sort_by(|&a, &b| pred.subject_ids()[a].cmp(&pred.subject_ids()[b]));
    let mut real = Vec::with_capacity(order.len());
    let mut predicted = Vec::with_capacity(order.len());
    for i in order {
        let id = &pred.subject_ids()[i];
        let t = *truth_index
            .get(id.as_str())
            .ok_or_else(|| EvaluationError::Dimension(format!("ground truth lacks subject {id}")))?;
        real.push(truth.matrix(t, tv).clone());
        predicted.push(pred.matrix(i, pv).clone());
    }
    Ok((real, predicted))
}

fn view_errors(
    pred: &PopulationDataset,
    truth: &PopulationDataset,
    view_id: usize,
    interp: DistanceInterpretation,
    hist: &HistogramSpec,
) -> Result<ViewErrors> {
    let (real, predicted) = aligned_graphs(pred, truth, view_id)?;
    let mut per_subject: Vec<[f64; 7]> = real
        .iter()
        .zip(&predicted)
        .map(|(a, b)| {
            let mut row = [0.0; 7];
            row[0] = graph_mae(a, b);
            row
        })
        .collect();
    let mut kl = [0.0; 6];
    for (m, metric) in CentralityMetric::ALL.into_iter().enumerate() {
        let mut real_scores = Vec::new();
        let mut pred_scores = Vec::new();
        for (s, (a, b)) in real.iter().zip(&predicted).enumerate() {
            let x = node_scores(a, metric, interp)?;
            let y = node_scores(b, metric, interp)?;
            per_subject[s][m + 1] = score_mae(&x, &y);
            real_scores.extend(x);
            pred_scores.extend(y);
        }
        kl[m] = kl_divergence(&real_scores, &pred_scores, hist)?;
    }
    Ok(ViewErrors { per_subject, kl })
}

/// Scores every predicted view against the ground truth, matching subjects
/// and views by id.
pub fn evaluate(
    pred: &PopulationDataset,
    truth: &PopulationDataset,
    interp: DistanceInterpretation,
) -> Result<EvaluationReport> {
    evaluate_with(pred, None, truth, interp, &HistogramSpec::default())
}

/// As [`evaluate`], adding paired t-test p-values of per-subject errors
/// against a baseline prediction of the same subjects and views.
pub fn evaluate_against_baseline(
    pred: &PopulationDataset,
    baseline: &PopulationDataset,
    truth: &PopulationDataset,
    interp: DistanceInterpretation,
) -> Result<EvaluationReport> {
    evaluate_with(pred, Some(baseline), truth, interp, &HistogramSpec::default())
}

pub fn evaluate_with(
    pred: &PopulationDataset,
    baseline: Option<&PopulationDataset>,
    truth: &PopulationDataset,
    interp: DistanceInterpretation,
    hist: &HistogramSpec,
) -> Result<EvaluationReport> {
    let mut rows = Vec::new();
    let mut kl = Vec::new();
    let mut p_rows = Vec::new();
    for &view in pred.view_ids() {
        let ours = view_errors(pred, truth, view, interp, hist)?;
        rows.push(ReportRow {
            view,
            values: mean_columns(ours.per_subject.iter().copied()),
        });
        kl.push(KlRow { view, values: ours.kl });
        if let Some(base) = baseline {
            if base.view_position(view).is_none() {
                return Err(EvaluationError::Dimension(format!("baseline lacks view {view}")));
            }
            let theirs = view_errors(base, truth, view, interp, hist)?;
            if theirs.per_subject.len() != ours.per_subject.len() {
                return Err(EvaluationError::Dimension("baseline covers different subjects".into()));
            }
            let mut values = [0.0; 7];
            for (c, v) in values.iter_mut().enumerate() {
                let a: Vec<f64> = ours.per_subject.iter().map(|r| r[c]).collect();
                let b: Vec<f64> = theirs.per_subject.iter().map(|r| r[c]).collect();
                *v = paired_ttest(&a, &b)?.p;
            }
            p_rows.push(ReportRow { view, values });
        }
    }
    Ok(EvaluationReport {
        source_view: None,
        average: mean_columns(rows.iter().map(|r| r.values)),
        kl_average: mean_columns(kl.iter().map(|r| r.values)),
        rows,
        kl,
        p_values: baseline.map(|_| p_rows),
    })
}

/// Cell-wise mean of reports over the same views, e.g. across folds.
pub fn average_reports(reports: &[EvaluationReport]) -> Result<EvaluationReport> {
    let first = reports
        .first()
        .ok_or_else(|| EvaluationError::Precondition("no reports to average".into()))?;
    let views: Vec<usize> = first.rows.iter().map(|r| r.view).collect();
    for r in reports {
        if r.rows.iter().map(|r| r.view).collect::<Vec<_>>() != views {
            return Err(EvaluationError::Dimension("reports cover different views".into()));
        }
    }
    let rows = views
        .iter()
        .enumerate()
        .map(|(i, &view)| ReportRow {
            view,
            values: mean_columns(reports.iter().map(|r| r.rows[i].values)),
        })
        .collect::<Vec<_>>();
    let kl = views
        .iter()
        .enumerate()
        .map(|(i, &view)| KlRow {
            view,
            values: mean_columns(reports.iter().map(|r| r.kl[i].values)),
        })
        .collect::<Vec<_>>();
    Ok(EvaluationReport {
        source_view: first.source_view,
        average: mean_columns(rows.iter().map(|r| r.values)),
        kl_average: mean_columns(kl.iter().map(|r| r.values)),
        rows,
        kl,
        p_values: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn csv_table<const N: usize>(header: &str, rows: impl Iterator<Item = (String, [f64; N])>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for (label, values) in rows {
        out.push_str(&label);
        for v in values {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

impl EvaluationReport {
    pub fn csv_header() -> String {
        format!("view,{}", MAE_COLUMNS.join(","))
    }

    pub fn kl_csv_header() -> String {
        let cols: Vec<String> = CentralityMetric::ALL.iter().map(|m| format!("kl_{}", m.short_name())).collect();
        format!("view,{}", cols.join(","))
    }

    pub fn pvalue_csv_header() -> String {
        let cols: Vec<String> = MAE_COLUMNS.iter().map(|c| format!("p_{c}")).collect();
        format!("view,{}", cols.join(","))
    }

    /// MAE table, one row per view and a final `avg` row.
    pub fn to_csv(&self) -> String {
        let rows = self
            .rows
            .iter()
            .map(|r| (r.view.to_string(), r.values))
            .chain(std::iter::once(("avg".to_string(), self.average)));
        csv_table(&Self::csv_header(), rows)
    }

    pub fn kl_to_csv(&self) -> String {
        let rows = self
            .kl
            .iter()
            .map(|r| (r.view.to_string(), r.values))
            .chain(std::iter::once(("avg".to_string(), self.kl_average)));
        csv_table(&Self::kl_csv_header(), rows)
    }

    pub fn p_values_to_csv(&self) -> Option<String> {
        let p = self.p_values.as_ref()?;
        Some(csv_table(
            &Self::pvalue_csv_header(),
            p.iter().map(|r| (r.view.to_string(), r.values)),
        ))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        match self.source_view {
            Some(s) => writeln!(out, "## Source view {s}\n"),
            None => writeln!(out, "## Predicted views\n"),
        }
        .expect("write to string");
        let table = |out: &mut String, titles: &[&str], rows: Vec<(String, Vec<f64>)>| {
            writeln!(out, "| Target view | {} |", titles.join(" | ")).expect("write to string");
            writeln!(out, "|---|{}", "---|".repeat(titles.len())).expect("write to string");
            for (label, values) in rows {
                let cells: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "| {label} | {} |", cells.join(" | ")).expect("write to string");
            }
        };
        let mae_rows = self
            .rows
            .iter()
            .map(|r| (r.view.to_string(), r.values.to_vec()))
            .chain(std::iter::once(("average".to_string(), self.average.to_vec())))
            .collect();
        table(&mut out, &MAE_TITLES, mae_rows);
        let kl_titles: Vec<String> = CentralityMetric::ALL.iter().map(|m| format!("KL({})", m.label())).collect();
        let kl_titles: Vec<&str> = kl_titles.iter().map(String::as_str).collect();
        out.push_str("\n### Score distribution KL divergence\n\n");
        let kl_rows = self
            .kl
            .iter()
            .map(|r| (r.view.to_string(), r.values.to_vec()))
            .chain(std::iter::once(("average".to_string(), self.kl_average.to_vec())))
            .collect();
        table(&mut out, &kl_titles, kl_rows);
        if let Some(p) = &self.p_values {
            out.push_str("\n### Paired t-test p-values against the baseline\n\n");
            let p_rows = p.iter().map(|r| (r.view.to_string(), r.values.to_vec())).collect();
            table(&mut out, &MAE_TITLES, p_rows);
        }
        out
    }
}

/// Parses the MAE table emitted by [`EvaluationReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<(Vec<ReportRow>, [f64; 7])> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EvaluationError::Parse("empty file".into()))?;
    if header != EvaluationReport::csv_header() {
        return Err(EvaluationError::Parse(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    let mut average = None;
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        let values: Vec<f64> = cells
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| EvaluationError::Parse(format!("line {line_no}: bad number {c:?}")))
            })
            .collect::<Result<_>>()?;
        let values: [f64; 7] = values
            .try_into()
            .map_err(|_| EvaluationError::Parse(format!("line {line_no}: expected 7 values")))?;
        if label == "avg" {
            average = Some(values);
        } else {
            let view = label
                .parse()
                .map_err(|_| EvaluationError::Parse(format!("line {line_no}: bad view {label:?}")))?;
            rows.push(ReportRow { view, values });
        }
    }
    let average = average.ok_or_else(|| EvaluationError::Parse("missing avg row".into()))?;
    Ok((rows, average))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| EvaluationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

/// Writes the report. CSV output also writes `<stem>_kl.csv` and, with a
/// baseline, `<stem>_pvalues.csv` next to `path`. Returns every file written.
pub fn write_report(report: &EvaluationReport, path: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Markdown => {
            write_file(path, &report.to_markdown())?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            write_file(path, &report.to_csv())?;
            let kl_path = sibling(path, "_kl");
            write_file(&kl_path, &report.kl_to_csv())?;
            let mut written = vec![path.to_path_buf(), kl_path];
            if let Some(p) = report.p_values_to_csv() {
                let p_path = sibling(path, "_pvalues");
                write_file(&p_path, &p)?;
                written.push(p_path);
            }
            Ok(written)
        }
    }
}

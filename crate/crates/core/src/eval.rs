//! Treatment-effect scoring: per-patient accuracies, the treatment effect
//! score (pre-treatment accuracy minus post-treatment accuracy), a cohort
//! threshold calibrated as the mean score over patients with meaningful
//! self-reported (NRS) improvement, significance flags, the NRS/measured
//! consistency rate, and summary statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::WindowSet;
use crate::error::{DataError, EvalError};
use crate::model::ClassifierBundle;

/// Self-reported pain pair on the 0-10 numeric rating scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NrsPair {
    pub pre: u8,
    pub post: u8,
}

/// Which reading of "meaningful NRS improvement" to apply.
///
/// `And` requires a drop of at least 2 points that is also at least 33% of
/// the starting score; `Or` accepts either condition alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NrsPredicate {
    #[default]
    And,
    Or,
}

impl NrsPredicate {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "and" => Some(Self::And),
            "or" => Some(Self::Or),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::And => "and",
            Self::Or => "or",
        }
    }
}

/// Meaningful improvement on the numeric rating scale. A worsened score
/// (post above pre) is simply "not improved", never an error.
pub fn nrs_improved(pair: NrsPair, predicate: NrsPredicate) -> bool {
    let drop = pair.pre as f64 - pair.post as f64;
    let two_points = drop >= 2.0;
    let third = pair.pre >= 1 && drop / pair.pre as f64 >= 0.33;
    match predicate {
        NrsPredicate::And => two_points && third,
        NrsPredicate::Or => two_points || third,
    }
}

/// Treatment effect score in percentage points: plain difference, possibly
/// negative when the post-treatment accuracy is higher.
pub fn compute_tes(acc_pre: f64, acc_post: f64) -> f64 {
    acc_pre - acc_post
}

/// Window-level accuracy (percent) of the bundle over a window set that has
/// already been normalized with the bundle's training statistics.
pub fn patient_accuracy(bundle: &ClassifierBundle, windows: &WindowSet) -> Result<f64, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::EmptyWindowSet);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..windows.len()).collect();
    let k = bundle.config.num_classes;
    for chunk in indices.chunks(64) {
        let (batch, labels) = crate::train::batch_tensor(windows, chunk);
        let pass = crate::model::forward_inference(bundle, &batch)?;
        let logits = pass.graph.value(pass.logits);
        for (row, label) in logits.data().chunks(k).zip(labels) {
            if crate::model::argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / windows.len() as f64)
}

/// Measured inputs for one patient, before the scoring chain runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredPatient {
    pub patient_id: String,
    pub acc_pre: f64,
    pub acc_post: f64,
    /// `None` when the patient is missing from the NRS file; such patients
    /// are listed but excluded from threshold calibration and consistency.
    pub nrs: Option<NrsPair>,
}

/// One scored patient row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub acc_pre: f64,
    pub acc_post: f64,
    pub tes: f64,
    pub nrs: Option<NrsPair>,
    pub sig_nrs: Option<bool>,
    pub sig_detect: bool,
}

/// Mean of the treatment effect scores over the NRS-improved subset.
/// Full precision; rounding happens only at presentation.
pub fn compute_threshold(outcomes: &[PatientOutcome]) -> Result<f64, EvalError> {
    let improved: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.sig_nrs == Some(true))
        .map(|o| o.tes)
        .collect();
    if improved.is_empty() {
        return Err(EvalError::NoImprovedPatients);
    }
    Ok(improved.iter().sum::<f64>() / improved.len() as f64)
}

/// Set `sig_detect = (tes >= threshold)` on every outcome, using unrounded
/// values. The comparison is inclusive at the boundary.
pub fn flag_significance(outcomes: &mut [PatientOutcome], threshold: f64) {
    for o in outcomes.iter_mut() {
        o.sig_detect = o.tes >= threshold;
    }
}

/// Mean, sample standard deviation (n-1), and normal-approximation 95%
/// confidence interval (mean +/- 1.96 * SD / sqrt(n)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnSummary {
    pub mean: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn summarize_column(values: &[f64]) -> ColumnSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let half = 1.96 * sd / n.sqrt();
    ColumnSummary {
        mean,
        sd,
        ci_lo: mean - half,
        ci_hi: mean + half,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub n: usize,
    pub n_nrs: usize,
    pub acc_pre: ColumnSummary,
    pub acc_post: ColumnSummary,
    pub tes: ColumnSummary,
    pub nrs_pre: Option<ColumnSummary>,
    pub nrs_post: Option<ColumnSummary>,
}

/// The full cohort result: scored rows (sorted by patient id), the
/// calibrated threshold, the NRS/measured consistency rate, summary
/// statistics, and any warnings (for example patients missing NRS data).
#[derive(Debug, Clone, PartialEq)]
pub struct CohortReport {
    pub outcomes: Vec<PatientOutcome>,
    pub tes_threshold: f64,
    pub consistency_rate: f64,
    pub summary: Option<ReportSummary>,
    pub warnings: Vec<String>,
}

/// Run the whole scoring chain over measured rows.
pub fn build_report(
    rows: &[MeasuredPatient],
    predicate: NrsPredicate,
) -> Result<CohortReport, EvalError> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    for pair in rows.windows(2) {
        if pair[0].patient_id == pair[1].patient_id {
            return Err(EvalError::DuplicatePatient(pair[0].patient_id.clone()));
        }
    }

    let mut warnings = Vec::new();
    let mut outcomes: Vec<PatientOutcome> = rows
        .iter()
        .map(|r| {
            if r.nrs.is_none() {
                warnings.push(format!(
                    "patient {} missing from the NRS file; excluded from threshold calibration and consistency",
                    r.patient_id
                ));
            }
            PatientOutcome {
                patient_id: r.patient_id.clone(),
                acc_pre: r.acc_pre,
                acc_post: r.acc_post,
                tes: compute_tes(r.acc_pre, r.acc_post),
                nrs: r.nrs,
                sig_nrs: r.nrs.map(|p| nrs_improved(p, predicate)),
                sig_detect: false,
            }
        })
        .collect();

    let threshold = compute_threshold(&outcomes)?;
    flag_significance(&mut outcomes, threshold);

    let with_nrs: Vec<&PatientOutcome> = outcomes.iter().filter(|o| o.nrs.is_some()).collect();
    let agree = with_nrs
        .iter()
        .filter(|o| o.sig_nrs == Some(o.sig_detect))
        .count();
    let consistency_rate = 100.0 * agree as f64 / with_nrs.len() as f64;

    let summary = if outcomes.len() >= 2 {
        let col = |f: &dyn Fn(&PatientOutcome) -> f64| {
            summarize_column(&outcomes.iter().map(f).collect::<Vec<f64>>())
        };
        let nrs_cols = if with_nrs.len() >= 2 {
            let pre: Vec<f64> = with_nrs.iter().map(|o| o.nrs.unwrap().pre as f64).collect();
            let post: Vec<f64> = with_nrs.iter().map(|o| o.nrs.unwrap().post as f64).collect();
            (Some(summarize_column(&pre)), Some(summarize_column(&post)))
        } else {
            (None, None)
        };
        Some(ReportSummary {
            n: outcomes.len(),
            n_nrs: with_nrs.len(),
            acc_pre: col(&|o| o.acc_pre),
            acc_post: col(&|o| o.acc_post),
            tes: col(&|o| o.tes),
            nrs_pre: nrs_cols.0,
            nrs_post: nrs_cols.1,
        })
    } else {
        warnings.push("fewer than 2 patients; summary statistics omitted".into());
        None
    };

    Ok(CohortReport {
        outcomes,
        tes_threshold: threshold,
        consistency_rate,
        summary,
        warnings,
    })
}

// ── emission ─────────────────────────────────────────────────────────

/// Fixed column order of the per-patient CSV.
pub const REPORT_CSV_HEADER: &str =
    "patient_id,acc_pre,acc_post,tes,tes_threshold,nrs_pre,nrs_post,sig_nrs,sig_detect";

/// Per-patient rows, two-decimal percentages, booleans as true/false.
/// Missing NRS data leaves those fields empty.
pub fn render_report_csv(report: &CohortReport) -> String {
    let mut out = String::new();
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    for o in &report.outcomes {
        let (nrs_pre, nrs_post, sig_nrs) = match (o.nrs, o.sig_nrs) {
            (Some(p), Some(s)) => (p.pre.to_string(), p.post.to_string(), s.to_string()),
            _ => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{},{},{},{}",
            o.patient_id,
            o.acc_pre,
            o.acc_post,
            o.tes,
            report.tes_threshold,
            nrs_pre,
            nrs_post,
            sig_nrs,
            o.sig_detect
        );
    }
    out
}

/// Human-readable Markdown summary: threshold, consistency, per-patient
/// table, and the mean/SD/CI panel.
pub fn render_summary_markdown(report: &CohortReport) -> String {
    let mut out = String::new();
    out.push_str("# Cohort treatment-effect report\n\n");
    let _ = writeln!(out, "- patients: {}", report.outcomes.len());
    let _ = writeln!(out, "- TES threshold: {:.2}", report.tes_threshold);
    let _ = writeln!(out, "- NRS consistency rate: {:.2}%", report.consistency_rate);
    out.push('\n');

    out.push_str("| patient | pre acc (%) | post acc (%) | TES | sig NRS | sig TES |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for o in &report.outcomes {
        let sig_nrs = match o.sig_nrs {
            Some(true) => "yes",
            Some(false) => "no",
            None => "-",
        };
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {} | {} |",
            o.patient_id,
            o.acc_pre,
            o.acc_post,
            o.tes,
            sig_nrs,
            if o.sig_detect { "yes" } else { "no" }
        );
    }
    out.push('\n');

    if let Some(s) = &report.summary {
        let _ = writeln!(out, "## Summary across patients (n = {})\n", s.n);
        out.push_str("| metric | mean | SD | 95% CI |\n|---|---|---|---|\n");
        let mut row = |name: &str, c: &ColumnSummary| {
            let _ = writeln!(
                out,
                "| {name} | {:.2} | {:.2} | [{:.2}, {:.2}] |",
                c.mean, c.sd, c.ci_lo, c.ci_hi
            );
        };
        row("pre-treatment accuracy (%)", &s.acc_pre);
        row("post-treatment accuracy (%)", &s.acc_post);
        row("TES", &s.tes);
        if let Some(c) = &s.nrs_pre {
            row("pre-treatment NRS", c);
        }
        if let Some(c) = &s.nrs_post {
            row("post-treatment NRS", c);
        }
        out.push('\n');
    }

    if !report.warnings.is_empty() {
        out.push_str("## Warnings\n\n");
        for w in &report.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

/// Write `report.csv` and `summary.md` into a directory.
pub fn write_report_files(report: &CohortReport, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, render_report_csv(report)).map_err(|e| DataError::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    let md_path = dir.join("summary.md");
    fs::write(&md_path, render_summary_markdown(report)).map_err(|e| DataError::Io {
        path: md_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Parse `nrs.csv` (`patient_id,nrs_pre,nrs_post`).
pub fn load_nrs_csv(path: &Path) -> Result<Vec<(String, NrsPair)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let err = |line: usize, msg: String| DataError::Parse {
        file: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == "patient_id,nrs_pre,nrs_post" => {}
        Some((n, _)) => return Err(err(n + 1, "expected header \"patient_id,nrs_pre,nrs_post\"".into())),
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(n + 1, "expected 3 fields".into()));
        }
        let parse_score = |s: &str| -> Result<u8, DataError> {
            let v: u8 = s
                .trim()
                .parse()
                .map_err(|_| err(n + 1, format!("bad NRS value \"{s}\"")))?;
            if v > 10 {
                return Err(err(n + 1, format!("NRS value {v} outside 0-10")));
            }
            Ok(v)
        };
        rows.push((
            fields[0].trim().to_string(),
            NrsPair {
                pre: parse_score(fields[1])?,
                post: parse_score(fields[2])?,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The eight published fixture rows: (id, acc_pre, acc_post, nrs_pre,
    /// nrs_post, expected sig_nrs, expected sig_detect).
    pub const FIXTURE: [(&str, f64, f64, u8, u8, bool, bool); 8] = [
        ("12345", 98.61, 87.33, 5, 1, true, true),
        ("21000", 98.61, 82.81, 6, 2, true, true),
        ("31000", 97.05, 92.88, 5, 5, false, false),
        ("41000", 98.98, 86.22, 7, 4, true, true),
        ("51000", 97.80, 89.12, 3, 2, false, false),
        ("61000", 96.94, 82.31, 5, 3, true, true),
        ("71000", 97.96, 96.94, 2, 0, true, false),
        ("91000", 98.26, 93.75, 4, 3, false, false),
    ];

    fn fixture_rows() -> Vec<MeasuredPatient> {
        FIXTURE
            .iter()
            .map(|(id, pre, post, npre, npost, _, _)| MeasuredPatient {
                patient_id: id.to_string(),
                acc_pre: *pre,
                acc_post: *post,
                nrs: Some(NrsPair {
                    pre: *npre,
                    post: *npost,
                }),
            })
            .collect()
    }

    #[test]
    fn tes_matches_published_rows() {
        assert!((compute_tes(98.61, 87.33) - 11.28).abs() < 0.01);
        assert!((compute_tes(97.96, 96.94) - 1.02).abs() < 0.01);
        assert_eq!(compute_tes(88.8, 88.8), 0.0);
    }

    #[test]
    fn tes_is_antisymmetric() {
        for (a, b) in [(98.61, 87.33), (50.0, 75.0), (0.0, 100.0)] {
            assert_eq!(compute_tes(a, b), -compute_tes(b, a));
        }
    }

    #[test]
    fn nrs_predicate_default_and_form() {
        assert!(nrs_improved(NrsPair { pre: 5, post: 1 }, NrsPredicate::And));
        // A one-point drop is 33.3% of 3 but fails the two-point clause.
        assert!(!nrs_improved(NrsPair { pre: 3, post: 2 }, NrsPredicate::And));
        assert!(nrs_improved(NrsPair { pre: 3, post: 2 }, NrsPredicate::Or));
        assert!(!nrs_improved(NrsPair { pre: 4, post: 3 }, NrsPredicate::And));
        // Worsening is "not improved", not an error.
        assert!(!nrs_improved(NrsPair { pre: 2, post: 6 }, NrsPredicate::And));
        assert!(!nrs_improved(NrsPair { pre: 0, post: 0 }, NrsPredicate::Or));
    }

    #[test]
    fn threshold_is_mean_over_improved_subset() {
        let report = build_report(&fixture_rows(), NrsPredicate::And).unwrap();
        // Mean of {11.28, 15.80, 12.76, 14.63, 1.02}.
        assert!((report.tes_threshold - 11.098).abs() < 0.005);
    }

    #[test]
    fn threshold_requires_an_improved_patient() {
        let rows = vec![MeasuredPatient {
            patient_id: "a".into(),
            acc_pre: 90.0,
            acc_post: 80.0,
            nrs: Some(NrsPair { pre: 5, post: 5 }),
        }];
        assert!(matches!(
            build_report(&rows, NrsPredicate::And),
            Err(EvalError::NoImprovedPatients)
        ));
    }

    #[test]
    fn single_improved_patient_sets_threshold_to_its_tes() {
        let rows = vec![
            MeasuredPatient {
                patient_id: "a".into(),
                acc_pre: 95.0,
                acc_post: 80.0,
                nrs: Some(NrsPair { pre: 6, post: 1 }),
            },
            MeasuredPatient {
                patient_id: "b".into(),
                acc_pre: 92.0,
                acc_post: 91.0,
                nrs: Some(NrsPair { pre: 5, post: 5 }),
            },
        ];
        let report = build_report(&rows, NrsPredicate::And).unwrap();
        assert!((report.tes_threshold - 15.0).abs() < 1e-12);
        // Inclusive boundary: the improved patient's own TES flags true.
        assert!(report.outcomes[0].sig_detect);
    }

    #[test]
    fn fixture_reproduces_all_flags_and_consistency() {
        let report = build_report(&fixture_rows(), NrsPredicate::And).unwrap();
        for ((id, _, _, _, _, want_nrs, want_detect), outcome) in
            FIXTURE.iter().zip(&report.outcomes)
        {
            assert_eq!(outcome.patient_id, *id);
            assert_eq!(outcome.sig_nrs, Some(*want_nrs), "{id} NRS flag");
            assert_eq!(outcome.sig_detect, *want_detect, "{id} detect flag");
        }
        assert!((report.consistency_rate - 87.50).abs() < 1e-9);
    }

    #[test]
    fn fixture_summary_matches_published_cells() {
        let report = build_report(&fixture_rows(), NrsPredicate::And).unwrap();
        let s = report.summary.unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 0.01;
        assert!(close(s.acc_pre.mean, 98.03), "{}", s.acc_pre.mean);
        assert!(close(s.acc_pre.sd, 0.74));
        assert!(close(s.acc_pre.ci_lo, 97.52));
        assert!(close(s.acc_pre.ci_hi, 98.54));
        assert!(close(s.acc_post.mean, 88.92));
        assert!(close(s.acc_post.sd, 5.27));
        assert!(close(s.acc_post.ci_lo, 85.27));
        assert!(close(s.acc_post.ci_hi, 92.57));
        assert!(close(s.tes.mean, 9.11));
        assert!(close(s.tes.sd, 5.40));
        assert!(close(s.tes.ci_lo, 5.37));
        assert!(close(s.tes.ci_hi, 12.85));
        let npre = s.nrs_pre.unwrap();
        assert!(close(npre.mean, 4.63));
        assert!(close(npre.sd, 1.60));
        assert!(close(npre.ci_lo, 3.52));
        assert!(close(npre.ci_hi, 5.74));
        let npost = s.nrs_post.unwrap();
        assert!(close(npost.mean, 2.50));
        assert!(close(npost.sd, 1.60));
        assert!(close(npost.ci_lo, 1.39));
        assert!(close(npost.ci_hi, 3.61));
    }

    #[test]
    fn threshold_translation_covariance() {
        let base = fixture_rows();
        let report = build_report(&base, NrsPredicate::And).unwrap();
        let shifted: Vec<MeasuredPatient> = base
            .iter()
            .map(|r| MeasuredPatient {
                acc_pre: r.acc_pre + 3.0,
                ..r.clone()
            })
            .collect();
        let shifted_report = build_report(&shifted, NrsPredicate::And).unwrap();
        assert!((shifted_report.tes_threshold - (report.tes_threshold + 3.0)).abs() < 1e-9);
    }

    #[test]
    fn flags_are_order_independent() {
        let mut rows = fixture_rows();
        rows.reverse();
        let report = build_report(&rows, NrsPredicate::And).unwrap();
        for ((id, _, _, _, _, _, want_detect), outcome) in FIXTURE.iter().zip(&report.outcomes) {
            assert_eq!(outcome.patient_id, *id);
            assert_eq!(outcome.sig_detect, *want_detect);
        }
    }

    #[test]
    fn missing_nrs_is_listed_excluded_and_warned() {
        let mut rows = fixture_rows();
        rows[1].nrs = None; // 21000: TES 15.80 leaves the calibration set
        let report = build_report(&rows, NrsPredicate::And).unwrap();
        // Threshold now averages {11.28, 12.76, 14.63, 1.02}.
        assert!((report.tes_threshold - 9.9225).abs() < 1e-9);
        assert_eq!(report.outcomes.len(), 8);
        assert!(report.outcomes[1].sig_nrs.is_none());
        assert!(report.warnings.iter().any(|w| w.contains("21000")));
        // Consistency over the 7 rows with NRS: 71000 still disagrees.
        assert!((report.consistency_rate - 100.0 * 6.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_patient_rejected() {
        let mut rows = fixture_rows();
        rows[1].patient_id = "12345".into();
        assert!(matches!(
            build_report(&rows, NrsPredicate::And),
            Err(EvalError::DuplicatePatient(_))
        ));
    }

    #[test]
    fn report_rendering_is_stable() {
        let report = build_report(&fixture_rows(), NrsPredicate::And).unwrap();
        let csv1 = render_report_csv(&report);
        let csv2 = render_report_csv(&report);
        assert_eq!(csv1, csv2);
        assert!(csv1.starts_with(REPORT_CSV_HEADER));
        assert!(csv1.contains("12345,98.61,87.33,11.28,11.10,5,1,true,true"));
        let md = render_summary_markdown(&report);
        assert!(md.contains("TES threshold: 11.10"));
        assert!(md.contains("87.50%"));
    }
}

//! Metrics, operating-point selection, study-level aggregation, and
//! per-anatomy reporting.
//!
//! AUROC is the Mann-Whitney rank statistic with average ranks for ties,
//! i.e. P(score_pos > score_neg) + 0.5·P(equal). The operating threshold
//! maximizes Youden's J = sensitivity + specificity − 1 on the validation
//! set. Verdicts use `prob >= threshold`.

use crate::dataset::{Anatomy, ALL_ANATOMIES};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Identity of one study in a prediction set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct StudyKey {
    pub patient_id: String,
    pub study_id: String,
    pub anatomy: Anatomy,
}

/// Per-view probabilities and their study-level aggregate.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub key: StudyKey,
    pub view_probs: Vec<f64>,
    pub prob: f64,
}

impl Prediction {
    pub fn from_views(key: StudyKey, view_probs: Vec<f64>) -> Result<Self> {
        let prob = aggregate_study(&view_probs)?;
        Ok(Self {
            key,
            view_probs,
            prob,
        })
    }

    /// 1 iff the aggregated probability reaches the threshold.
    pub fn verdict(&self, threshold: f64) -> u8 {
        u8::from(self.prob >= threshold)
    }
}

/// Mean probability across available views.
pub fn aggregate_study(view_probs: &[f64]) -> Result<f64> {
    if view_probs.is_empty() {
        return Err(Error::Input("cannot aggregate zero views".into()));
    }
    for &p in view_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Input(format!("view probability {p} outside [0, 1]")));
        }
    }
    Ok(view_probs.iter().sum::<f64>() / view_probs.len() as f64)
}

/// Confusion counts plus the four point metrics at a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Verdict = prob ≥ threshold. Precision and recall are 0 when their
/// denominator is 0; F1 is 0 when precision + recall is 0.
pub fn confusion_and_point_metrics(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<PointMetrics> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Input(format!(
            "probs/labels lengths {} vs {}",
            probs.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Label(format!("label must be 0 or 1, got {y}")));
        }
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PointMetrics {
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / total,
        precision,
        recall,
        f1,
    })
}

/// Mann-Whitney AUROC with average ranks for ties.
pub fn auroc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Input("probs/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite scores"));

    // average ranks over tie groups, ranks are 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Candidate thresholds: 0, 1, and the midpoints between adjacent sorted
/// unique scores. Returns the candidate maximizing Youden's J; ties break
/// toward the lower threshold.
pub fn select_threshold(probs: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Input("probs/labels length mismatch".into()));
    }
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::UndefinedMetric(
            "threshold selection needs both classes".into(),
        ));
    }
    let mut unique: Vec<f64> = probs.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    unique.dedup();
    let mut candidates = vec![0.0];
    for w in unique.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));

    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &candidates {
        let j = youden_j(probs, labels, t)?;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

/// J = sensitivity + specificity − 1 at a threshold.
pub fn youden_j(probs: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let m = confusion_and_point_metrics(probs, labels, threshold)?;
    let sens = if m.tp + m.fn_ == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fn_) as f64
    };
    let spec = if m.tn + m.fp == 0 {
        0.0
    } else {
        m.tn as f64 / (m.tn + m.fp) as f64
    };
    Ok(sens + spec - 1.0)
}

/// One row of the report; AUROC is None for a single-class bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub bucket: String,
    pub n_studies: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: Option<f64>,
}

/// Per-anatomy rows plus the pooled overall row, the macro summary, and the
/// threshold they were computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub overall: MetricsRow,
    /// Unweighted mean over the anatomy rows; AUROC is None if any bucket
    /// had it undefined (never silently imputed).
    pub macro_summary: MetricsRow,
    /// Macro-F1 over the two classes of the pooled set (the alternative
    /// reading of class macro-averaging).
    pub class_macro_f1: f64,
    pub threshold: f64,
}

fn bucket_row(name: &str, probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsRow> {
    let m = confusion_and_point_metrics(probs, labels, threshold)?;
    let auc = match auroc(probs, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsRow {
        bucket: name.to_string(),
        n_studies: probs.len(),
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auroc: auc,
    })
}

/// Builds the per-anatomy/overall report at a fixed threshold. Rows follow
/// the fixed anatomy order (elbow through wrist), listing only anatomies
/// present in the predictions, then the overall row.
pub fn build_report(
    predictions: &[Prediction],
    labels: &[u8],
    threshold: f64,
) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "predictions/labels lengths {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::new();
    for anatomy in ALL_ANATOMIES {
        let mut probs = Vec::new();
        let mut ys = Vec::new();
        for (p, &y) in predictions.iter().zip(labels) {
            if p.key.anatomy == anatomy {
                probs.push(p.prob);
                ys.push(y);
            }
        }
        if !probs.is_empty() {
            rows.push(bucket_row(&anatomy.to_string(), &probs, &ys, threshold)?);
        }
    }
    let all_probs: Vec<f64> = predictions.iter().map(|p| p.prob).collect();
    let overall = bucket_row("overall", &all_probs, labels, threshold)?;

    let k = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let macro_auroc = if rows.iter().all(|r| r.auroc.is_some()) {
        Some(rows.iter().map(|r| r.auroc.unwrap()).sum::<f64>() / k)
    } else {
        None
    };
    let macro_summary = MetricsRow {
        bucket: "macro".to_string(),
        n_studies: predictions.len(),
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        auroc: macro_auroc,
    };

    // binary-class macro-F1: average the F1 of the positive class and the
    // F1 of the negative class (roles swapped) on the pooled set
    let pos_f1 = overall.f1;
    let flipped_probs: Vec<f64> = all_probs.iter().map(|p| 1.0 - p).collect();
    let flipped_labels: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
    let neg_f1 = confusion_and_point_metrics(
        &flipped_probs,
        &flipped_labels,
        // complemented verdict boundary: 1-p >= 1-t matches p <= t; nudge so
        // the verdict set is the exact complement of prob >= threshold
        next_up(1.0 - threshold),
    )?
    .f1;
    let class_macro_f1 = (pos_f1 + neg_f1) / 2.0;

    Ok(MetricsReport {
        rows,
        overall,
        macro_summary,
        class_macro_f1,
        threshold,
    })
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn fmt_cell(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(v) => format!("{v:.precision$}"),
        None => "NA".to_string(),
    }
}

impl MetricsReport {
    /// Machine-readable table: `anatomy,accuracy,precision,recall,f1,auroc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("anatomy,accuracy,precision,recall,f1,auroc\n");
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                row.bucket,
                row.accuracy,
                row.precision,
                row.recall,
                row.f1,
                fmt_cell(row.auroc, 6)
            );
        }
        out
    }

    /// Aligned plain-text table in the report row order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>10} {:>7} {:>9} {:>6}",
            "Anatomy", "Accuracy", "Precision", "Recall", "F1-Score", "AUROC"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "{:<10} {:>9.2} {:>10.2} {:>7.2} {:>9.2} {:>6}",
                capitalized(&row.bucket),
                row.accuracy,
                row.precision,
                row.recall,
                row.f1,
                fmt_cell(row.auroc, 2)
            );
        }
        let _ = writeln!(
            out,
            "threshold={:.6} macro_f1={:.4} macro_auroc={} class_macro_f1={:.4}",
            self.threshold,
            self.macro_summary.f1,
            fmt_cell(self.macro_summary.auroc, 4),
            self.class_macro_f1
        );
        out
    }
}

fn capitalized(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Writes `patient_id,study_id,anatomy,prob,label` lines with a header.
pub fn write_predictions(
    predictions: &[Prediction],
    labels: &[u8],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("patient_id,study_id,anatomy,prob,label\n");
    for (p, &y) in predictions.iter().zip(labels) {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{}",
            p.key.patient_id, p.key.study_id, p.key.anatomy, p.prob, y
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

//! Exact-match scoring: confusion matrix, per-class P/R/F1 and
//! support-weighted averages.
//!
//! Weighted F1 is the support-weighted mean of per-class F1 values, not the
//! harmonic mean of weighted precision and weighted recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GoldRelation;
use crate::labelset::LabelCatalog;
use crate::normalization::{HallucinationKind, NormalizedPrediction};

/// Name of the predicted-side sink column for unresolved output.
pub const UNRESOLVED: &str = "UNRESOLVED";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{gold} gold relations but {preds} predictions")]
    LengthMismatch { gold: usize, preds: usize },
    #[error("label {0:?} is not on the matrix axis")]
    UnknownLabel(String),
    #[error("total support is zero")]
    ZeroSupport,
    #[error("matrix shape invalid: {0}")]
    Shape(String),
}

/// Gold rows × predicted columns; the last column is [`UNRESOLVED`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn empty(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            cells: vec![vec![0; n + 1]; n],
        }
    }

    pub fn from_cells(labels: Vec<String>, cells: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let n = labels.len();
        if cells.len() != n || cells.iter().any(|row| row.len() != n + 1) {
            return Err(MetricsError::Shape(format!(
                "expected {n} rows of {} columns",
                n + 1
            )));
        }
        Ok(ConfusionMatrix { labels, cells })
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn unresolved_column(&self) -> usize {
        self.labels.len()
    }

    /// Gold support of row `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.cells[i].iter().sum()
    }

    /// Number of predictions of class `j` (never the sink column).
    pub fn column_sum(&self, j: usize) -> u64 {
        self.cells.iter().map(|row| row[j]).sum()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn unresolved_count(&self) -> u64 {
        self.column_sum(self.unresolved_column())
    }

    fn record(&mut self, gold: &str, predicted: Option<&str>) -> Result<(), MetricsError> {
        let row = self
            .index_of(gold)
            .ok_or_else(|| MetricsError::UnknownLabel(gold.to_string()))?;
        let col = match predicted {
            Some(p) => self
                .index_of(p)
                .ok_or_else(|| MetricsError::UnknownLabel(p.to_string()))?,
            None => self.unresolved_column(),
        };
        self.cells[row][col] += 1;
        Ok(())
    }
}

/// Index-aligned gold relations and predictions.
pub fn build_confusion(
    gold: &[GoldRelation],
    preds: &[NormalizedPrediction],
    catalog: &LabelCatalog,
) -> Result<ConfusionMatrix, MetricsError> {
    let golds: Vec<&str> = gold.iter().map(|g| g.label.as_str()).collect();
    let predicted: Vec<Option<&str>> = preds.iter().map(NormalizedPrediction::label).collect();
    build_confusion_from_labels(&golds, &predicted, catalog)
}

/// As [`build_confusion`] over plain labels; `None` is an unresolved prediction.
pub fn build_confusion_from_labels(
    gold: &[&str],
    preds: &[Option<&str>],
    catalog: &LabelCatalog,
) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            preds: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::empty(catalog.names().map(str::to_string).collect());
    for (g, p) in gold.iter().zip(preds) {
        cm.record(g, *p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision and recall use 0 for an empty denominator.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.labels.len())
        .map(|i| {
            let tp = cm.cells[i][i];
            let precision = ratio(tp, cm.column_sum(i));
            let recall = ratio(tp, cm.row_sum(i));
            ClassMetrics {
                label: cm.labels[i].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(i),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub total_support: u64,
    /// Label left out of the weighting, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

pub fn weighted_report(per_class: &[ClassMetrics]) -> Result<WeightedReport, MetricsError> {
    weighted_report_excluding(per_class, None)
}

/// Support-weighted P, R and F1, each averaged independently. `exclude`
/// drops one class (typically None) from the weighting.
pub fn weighted_report_excluding(
    per_class: &[ClassMetrics],
    exclude: Option<&str>,
) -> Result<WeightedReport, MetricsError> {
    let included: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|c| Some(c.label.as_str()) != exclude)
        .collect();
    let total: u64 = included.iter().map(|c| c.support).sum();
    if total == 0 {
        return Err(MetricsError::ZeroSupport);
    }
    let weigh = |metric: fn(&ClassMetrics) -> f64| -> f64 {
        included
            .iter()
            .map(|c| c.support as f64 / total as f64 * metric(c))
            .sum()
    };
    Ok(WeightedReport {
        per_class: per_class.to_vec(),
        weighted_precision: weigh(|c| c.precision),
        weighted_recall: weigh(|c| c.recall),
        weighted_f1: weigh(|c| c.f1),
        total_support: total,
        excluded: exclude.map(str::to_string),
    })
}

impl WeightedReport {
    /// One row of the results table, in percent.
    pub fn results_row(&self, approach: &str, model: &str) -> ResultsRow {
        ResultsRow {
            approach: approach.to_string(),
            model: model.to_string(),
            precision: self.weighted_precision * 100.0,
            recall: self.weighted_recall * 100.0,
            f1: self.weighted_f1 * 100.0,
        }
    }

    pub fn per_class_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>6}  {:>6}  {:>7}\n",
            "Class", "Precision", "Recall", "F1", "Support"
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}\n",
                c.label, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}\n",
            "weighted", self.weighted_precision, self.weighted_recall, self.weighted_f1, self.total_support
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub approach: String,
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Aligned `RE Approach | Models | P | R | F1` table (values in percent).
pub fn results_table(rows: &[ResultsRow]) -> String {
    let aw = rows.iter().map(|r| r.approach.len()).max().unwrap_or(0).max("RE Approach".len());
    let mw = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max("Models".len());
    let rule = "-".repeat(aw + mw + 3 * 8 + 4);
    let mut out = format!(
        "{rule}\n{:<aw$}  {:<mw$}  {:>6}  {:>6}  {:>6}\n{rule}\n",
        "RE Approach", "Models", "P", "R", "F1"
    );
    let mut last_approach = "";
    for r in rows {
        let approach = if r.approach == last_approach { "" } else { r.approach.as_str() };
        last_approach = &r.approach;
        out.push_str(&format!(
            "{:<aw$}  {:<mw$}  {:>6.2}  {:>6.2}  {:>6.2}\n",
            approach, r.model, r.precision, r.recall, r.f1
        ));
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub distinct_labels_used: usize,
    pub top_label: Option<(String, u64)>,
    pub unresolved_rate: f64,
    /// Resolved prediction counts in catalog order, zero entries omitted.
    pub label_counts: Vec<(String, u64)>,
}

/// How concentrated resolved predictions are. Ties for the top label go to
/// the earlier catalog entry.
pub fn bias_diagnostics(preds: &[NormalizedPrediction], catalog: &LabelCatalog) -> BiasReport {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut unresolved = 0u64;
    for p in preds {
        match p.label() {
            Some(l) => *counts.entry(l).or_insert(0) += 1,
            None => unresolved += 1,
        }
    }
    let label_counts: Vec<(String, u64)> = catalog
        .names()
        .filter_map(|n| counts.get(n).map(|&c| (n.to_string(), c)))
        .collect();
    let top_label = label_counts
        .iter()
        .fold(None::<&(String, u64)>, |best, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .cloned();
    BiasReport {
        distinct_labels_used: label_counts.len(),
        top_label,
        unresolved_rate: ratio(unresolved, preds.len() as u64),
        label_counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationBreakdown {
    pub near_miss: u64,
    pub morph_variant: u64,
    pub context_phrase: u64,
    /// Resolved through a spelling-variant alias (counted as correct).
    pub resolved_variants: u64,
    /// Most frequent unresolved evidence strings, with counts.
    pub top_evidence: Vec<(String, u64)>,
}

pub fn hallucination_breakdown(preds: &[NormalizedPrediction], top: usize) -> HallucinationBreakdown {
    let mut out = HallucinationBreakdown {
        near_miss: 0,
        morph_variant: 0,
        context_phrase: 0,
        resolved_variants: 0,
        top_evidence: Vec::new(),
    };
    let mut evidence: BTreeMap<&str, u64> = BTreeMap::new();
    for p in preds {
        let Some(h) = &p.hallucination else { continue };
        if p.is_resolved() {
            out.resolved_variants += 1;
            continue;
        }
        match h.kind {
            HallucinationKind::NearMiss => out.near_miss += 1,
            HallucinationKind::MorphVariant => out.morph_variant += 1,
            HallucinationKind::ContextPhrase => out.context_phrase += 1,
        }
        *evidence.entry(h.evidence.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(String, u64)> = evidence.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top);
    out.top_evidence = ranked;
    out
}

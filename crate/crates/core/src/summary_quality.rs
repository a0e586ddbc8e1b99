//! Summary-vs-source similarity: pooled cosine, greedy BERTScore, and the
//! Pearson correlations between them and text length.
//!
//! BERTScore here is the plain greedy form: no idf weighting, no baseline
//! rescaling. Absolute values depend entirely on the embedder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TextEmbedder, TokenEmbeddings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("vector dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("empty token list")]
    EmptyTokens,
    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("{0} series is constant")]
    ConstantSeries(&'static str),
    #[error("summary for {0} is empty")]
    EmptySummary(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub passage_id: String,
    pub entity1_id: String,
    pub entity2_id: String,
    pub summary_text: String,
    pub source_text: String,
}

impl SummaryRecord {
    pub fn source_tokens(&self) -> usize {
        self.source_text.split_whitespace().count()
    }

    pub fn summary_tokens(&self) -> usize {
        self.summary_text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub cosine: f64,
    pub bert_p: f64,
    pub bert_r: f64,
    pub bert_f1: f64,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, QualityError> {
    if u.len() != v.len() {
        return Err(QualityError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(QualityError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean over `from` of the best cosine against any token of `to`.
///
/// Maxima are summed in sorted order so the result does not depend on token
/// order at all, not even in the last bit.
fn greedy_mean(from: &TokenEmbeddings, to: &TokenEmbeddings) -> Result<f64, QualityError> {
    let mut best = Vec::with_capacity(from.len());
    for u in &from.vectors {
        let mut m = f64::NEG_INFINITY;
        for v in &to.vectors {
            m = m.max(cosine_similarity(u, v)?);
        }
        best.push(m);
    }
    best.sort_by(f64::total_cmp);
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Returns `(precision, recall, f1)`.
pub fn bertscore(candidate: &TokenEmbeddings, reference: &TokenEmbeddings) -> Result<(f64, f64, f64), QualityError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(QualityError::EmptyTokens);
    }
    let p = greedy_mean(candidate, reference)?;
    let r = greedy_mean(reference, candidate)?;
    Ok((p, r, harmonic(p, r)))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, QualityError> {
    if xs.len() != ys.len() {
        return Err(QualityError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(QualityError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(QualityError::ConstantSeries("x"));
    }
    if syy == 0.0 {
        return Err(QualityError::ConstantSeries("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine of pooled vectors plus BERTScore with the summary as candidate and
/// the source passage as reference.
pub fn score_summary(record: &SummaryRecord, embedder: &dyn TextEmbedder) -> Result<SimilarityScores, QualityError> {
    if record.summary_text.trim().is_empty() {
        return Err(QualityError::EmptySummary(format!(
            "{}:{}:{}",
            record.passage_id, record.entity1_id, record.entity2_id
        )));
    }
    let cosine = cosine_similarity(
        &embedder.embed_text(&record.summary_text)?,
        &embedder.embed_text(&record.source_text)?,
    )?;
    let cand = embedder.embed_tokens(&record.summary_text)?;
    let refs = embedder.embed_tokens(&record.source_text)?;
    let (bert_p, bert_r, bert_f1) = bertscore(&cand, &refs)?;
    Ok(SimilarityScores {
        cosine,
        bert_p,
        bert_r,
        bert_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub x: String,
    pub y: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type Series = (&'static str, fn(&SummaryRecord, &SimilarityScores) -> f64);

const SERIES_PAIRS: [(Series, Series); 5] = [
    (("cosine", |_, s| s.cosine), ("bert_f1", |_, s| s.bert_f1)),
    (("source_tokens", |r, _| r.source_tokens() as f64), ("cosine", |_, s| s.cosine)),
    (("source_tokens", |r, _| r.source_tokens() as f64), ("bert_f1", |_, s| s.bert_f1)),
    (("summary_tokens", |r, _| r.summary_tokens() as f64), ("cosine", |_, s| s.cosine)),
    (("summary_tokens", |r, _| r.summary_tokens() as f64), ("bert_f1", |_, s| s.bert_f1)),
];

/// Pearson r for the five standard pairs. A degenerate pair carries its error
/// in the report; the others are still computed.
pub fn correlation_suite(records: &[(SummaryRecord, SimilarityScores)]) -> Result<Vec<CorrelationReport>, QualityError> {
    if records.len() < 3 {
        return Err(QualityError::TooFewPoints(records.len()));
    }
    Ok(SERIES_PAIRS
        .iter()
        .map(|((xn, xf), (yn, yf))| {
            let xs: Vec<f64> = records.iter().map(|(r, s)| xf(r, s)).collect();
            let ys: Vec<f64> = records.iter().map(|(r, s)| yf(r, s)).collect();
            let (pearson_r, error) = match pearson(&xs, &ys) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CorrelationReport {
                x: xn.to_string(),
                y: yn.to_string(),
                n: records.len(),
                pearson_r,
                error,
            }
        })
        .collect())
}

/// One row per summary: identifiers, scores, and token lengths.
pub fn similarity_csv(records: &[(SummaryRecord, SimilarityScores)]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "passage_id",
        "entity1_id",
        "entity2_id",
        "cosine",
        "bert_p",
        "bert_r",
        "bert_f1",
        "source_tokens",
        "summary_tokens",
    ])?;
    for (r, s) in records {
        w.write_record([
            r.passage_id.clone(),
            r.entity1_id.clone(),
            r.entity2_id.clone(),
            s.cosine.to_string(),
            s.bert_p.to_string(),
            s.bert_r.to_string(),
            s.bert_f1.to_string(),
            r.source_tokens().to_string(),
            r.summary_tokens().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `x,y` scatter data (cosine against F1-BERTScore) for external plotting.
pub fn scatter_csv(records: &[(SummaryRecord, SimilarityScores)]) -> String {
    let mut out = String::from("cosine,bert_f1\n");
    for (_, s) in records {
        out.push_str(&format!("{},{}\n", s.cosine, s.bert_f1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::HashedNgramEmbedder;
    use proptest::prelude::*;

    fn emb(vectors: Vec<Vec<f64>>) -> TokenEmbeddings {
        let tokens = (0..vectors.len()).map(|i| format!("t{i}")).collect();
        TokenEmbeddings::new(tokens, vectors).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let want = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.9746).abs() < 1e-4);
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(QualityError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(QualityError::ZeroVector));
    }

    #[test]
    fn bertscore_examples() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let (p, r, f) = bertscore(&emb(vec![a.clone()]), &emb(vec![a.clone(), b.clone()])).unwrap();
        assert_eq!((p, r), (1.0, 0.5));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);

        let (p, r, f) = bertscore(&emb(vec![a.clone()]), &emb(vec![b])).unwrap();
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));

        let empty = TokenEmbeddings::new(vec![], vec![]).unwrap();
        assert_eq!(bertscore(&empty, &emb(vec![a])), Err(QualityError::EmptyTokens));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-9);

        // computational-formula oracle: (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))
        let (x, y) = ([1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 5.0]);
        let n = 4.0;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let oracle = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((pearson(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.8315).abs() < 1e-4);

        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(QualityError::TooFewPoints(2)));
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(QualityError::ConstantSeries("x"))
        );
        assert!(matches!(pearson(&[1.0], &[1.0, 2.0]), Err(QualityError::LengthMismatch { .. })));
    }

    fn record(i: usize, summary: &str, source: &str) -> SummaryRecord {
        SummaryRecord {
            passage_id: format!("p{i}"),
            entity1_id: "E1".into(),
            entity2_id: "E2".into(),
            summary_text: summary.into(),
            source_text: source.into(),
        }
    }

    #[test]
    fn suite_with_degenerate_pair() {
        let recs: Vec<_> = (0..4)
            .map(|i| {
                let words = vec!["w"; i + 2].join(" ");
                (
                    record(i, "s", &words),
                    SimilarityScores {
                        cosine: 0.5,
                        bert_p: 0.1,
                        bert_r: 0.2,
                        bert_f1: 0.1 * i as f64,
                    },
                )
            })
            .collect();
        let suite = correlation_suite(&recs).unwrap();
        assert_eq!(suite.len(), 5);
        assert!(suite[0].error.is_some());
        assert!(suite[1].error.is_some());
        assert!((suite[2].pearson_r.unwrap() - 1.0).abs() < 1e-9);
        assert!(suite[3].error.is_some()); // summary length constant
        assert_eq!(correlation_suite(&recs[..2]), Err(QualityError::TooFewPoints(2)));
    }

    #[test]
    fn suite_identical_scores() {
        let recs: Vec<_> = (0..5)
            .map(|i| {
                let v = i as f64 / 10.0;
                (
                    record(i, "s t", "a b c"),
                    SimilarityScores {
                        cosine: v,
                        bert_p: v,
                        bert_r: v,
                        bert_f1: v,
                    },
                )
            })
            .collect();
        assert!((correlation_suite(&recs).unwrap()[0].pearson_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scoring_with_offline_embedder() {
        let e = HashedNgramEmbedder::default();
        let r = record(0, "Glucose decreases insulin.", "Glucose decreases insulin.");
        let s = score_summary(&r, &e).unwrap();
        assert!((s.cosine - 1.0).abs() < 1e-9);
        assert!((s.bert_f1 - 1.0).abs() < 1e-6);
        assert!(matches!(score_summary(&record(0, "  ", "x"), &e), Err(QualityError::EmptySummary(_))));

        let csv = similarity_csv(&[(r, s)]).unwrap();
        assert!(csv.starts_with("passage_id,entity1_id,entity2_id,cosine,bert_p,bert_r,bert_f1,source_tokens,summary_tokens\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    fn vecs(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(
            proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn swap_exchanges_p_and_r(a in vecs(4), b in vecs(4)) {
            let (p, r, f) = bertscore(&emb(a.clone()), &emb(b.clone())).unwrap();
            let (p2, r2, f2) = bertscore(&emb(b), &emb(a)).unwrap();
            prop_assert_eq!((p, r, f), (r2, p2, f2));
        }

        #[test]
        fn duplicate_reference_token(a in vecs(3), b in vecs(3), k in 0usize..8) {
            let (p, r, _) = bertscore(&emb(a.clone()), &emb(b.clone())).unwrap();
            let mut b2 = b.clone();
            b2.push(b[k % b.len()].clone());
            let (p2, r2, _) = bertscore(&emb(a.clone()), &emb(b2)).unwrap();
            prop_assert_eq!(p, p2);
            // recall moves toward the duplicated token's best match; it only
            // rises when that match is at least the old recall
            let best = a.iter().map(|u| cosine_similarity(&b[k % b.len()], u).unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let n = b.len() as f64;
            prop_assert!((r2 - (n * r + best) / (n + 1.0)).abs() < 1e-12);
            if best >= r {
                prop_assert!(r2 >= r - 1e-12);
            }
        }

        #[test]
        fn pearson_affine(xs in proptest::collection::vec(-100.0f64..100.0, 3..30), a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                prop_assert!((pearson(&xt, &ys).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}

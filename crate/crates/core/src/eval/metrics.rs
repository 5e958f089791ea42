use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::KeyValue;
use crate::error::{Error, Result};
use crate::sequence::validate_spans;
use crate::vocab::TokenId;

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, reference: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
    /// tau-b, tie corrected
    pub kendall: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).expect("finite input");
            let dy = y[i].partial_cmp(&y[j]).expect("finite input");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tied_x += 1;
                    tied_y += 1;
                }
                (Equal, _) => tied_x += 1,
                (_, Equal) => tied_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - tied_x) as f64 * (pairs - tied_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("Kendall tau of a constant series".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Pearson on raw values, Spearman as Pearson on average ranks, Kendall tau-b.
pub fn rank_correlations(x: &[f64], y: &[f64]) -> Result<Correlations> {
    if x.len() != y.len() {
        return Err(Error::Precondition(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite value in correlation input".into()));
    }
    Ok(Correlations {
        pearson: pearson(x, y)?,
        spearman: pearson(&average_ranks(x), &average_ranks(y))?,
        kendall: kendall_tau_b(x, y)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub exact_match: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub samples: usize,
}

impl MetricReport {
    /// EM over the pairs; correlations over the parsed numeric answers when
    /// every prediction and reference parses and neither side is constant.
    pub fn from_answers(predictions: &[String], references: &[String]) -> Result<Self> {
        if predictions.len() != references.len() {
            return Err(Error::Precondition("prediction and reference counts differ".into()));
        }
        if predictions.is_empty() {
            return Err(Error::UndefinedMetric("no samples".into()));
        }
        let hits: u32 = predictions
            .iter()
            .zip(references)
            .map(|(p, r)| u32::from(exact_match(p, r)))
            .sum();
        let numeric = |v: &[String]| -> Option<Vec<f64>> {
            v.iter()
                .map(|s| normalize_answer(s).replace(' ', "").parse::<f64>().ok())
                .collect()
        };
        let corr = match (numeric(predictions), numeric(references)) {
            (Some(x), Some(y)) => rank_correlations(&x, &y).ok(),
            _ => None,
        };
        Ok(Self {
            exact_match: f64::from(hits) / predictions.len() as f64,
            pearson: corr.map(|c| c.pearson),
            spearman: corr.map(|c| c.spearman),
            kendall: corr.map(|c| c.kendall),
            samples: predictions.len(),
        })
    }
}

impl KeyValue for MetricReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"));
        vec![
            ("exact_match", format!("{}", self.exact_match)),
            ("pearson", opt(self.pearson)),
            ("spearman", opt(self.spearman)),
            ("kendall", opt(self.kendall)),
            ("samples", self.samples.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfillDiagnostics {
    /// fraction of masked-span positions equal to the reference
    pub accuracy: f64,
    /// fraction of masked-span positions holding EOS or PAD
    pub fill_fraction: f64,
    pub positions: usize,
}

pub fn infill_diagnostics(
    candidate: &[TokenId],
    reference: &[TokenId],
    spans: &[Range<usize>],
    eos: TokenId,
    pad: TokenId,
) -> Result<InfillDiagnostics> {
    if candidate.len() != reference.len() {
        return Err(Error::Precondition(format!(
            "candidate length {} differs from reference length {}",
            candidate.len(),
            reference.len()
        )));
    }
    validate_spans(spans, reference.len())?;
    let positions: Vec<usize> = spans.iter().flat_map(Clone::clone).collect();
    if positions.is_empty() {
        return Err(Error::UndefinedMetric("no masked positions".into()));
    }
    let correct = positions.iter().filter(|&&i| candidate[i] == reference[i]).count();
    let filled = positions
        .iter()
        .filter(|&&i| candidate[i] == eos || candidate[i] == pad)
        .count();
    let n = positions.len() as f64;
    Ok(InfillDiagnostics {
        accuracy: correct as f64 / n,
        fill_fraction: filled as f64 / n,
        positions: positions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_normalizes_whitespace() {
        assert_eq!(exact_match("42", "42"), 1);
        assert_eq!(exact_match(" 42 ", "42"), 1);
        assert_eq!(exact_match("4  2", "4 2"), 1);
        assert_eq!(exact_match("42", "43"), 0);
    }

    #[test]
    fn worked_correlation_case() {
        let c = rank_correlations(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((c.spearman - 0.8).abs() < 1e-12);
        assert!((c.kendall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_reversal() {
        let x = [3.0, 1.0, 4.0, 1.5, 9.0];
        let c = rank_correlations(&x, &x).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12 && c.kendall == 1.0);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let c = rank_correlations(&x, &y).unwrap();
        assert!((c.spearman + 1.0).abs() < 1e-12 && c.kendall == -1.0);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn constant_series_is_undefined() {
        assert!(matches!(
            rank_correlations(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(rank_correlations(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_scale_shift() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let y = [2.0, 3.0, 1.0, 7.0, 6.0];
        let r = rank_correlations(&x, &y).unwrap().pearson;
        let xs: Vec<f64> = x.iter().map(|v| -2.5 * v + 7.0).collect();
        let rs = rank_correlations(&xs, &y).unwrap().pearson;
        assert!((rs + r).abs() < 1e-12);
    }

    #[test]
    fn diagnostics_count_spans() {
        let reference = [5, 6, 7, 8, 9, 10, 11, 12, 3];
        let mut cand = reference;
        cand[0] = 4;
        cand[1] = 4;
        let d = infill_diagnostics(&cand, &reference, &[0..8], 1, 2).unwrap();
        assert_eq!(d.accuracy, 0.75);
        let eos = [1; 9];
        assert_eq!(infill_diagnostics(&eos, &reference, &[0..8], 1, 2).unwrap().fill_fraction, 1.0);
        assert!(infill_diagnostics(&cand, &reference, &[0..10], 1, 2).is_err());
        assert!(infill_diagnostics(&cand[..3], &reference, &[0..2], 1, 2).is_err());
    }

    #[test]
    fn report_from_answers() {
        let p = vec!["1".to_string(), "2".into(), "3".into(), "5".into()];
        let r = vec!["1".to_string(), "2".into(), "4".into(), "5".into()];
        let rep = MetricReport::from_answers(&p, &r).unwrap();
        assert_eq!(rep.exact_match, 0.75);
        assert!(rep.spearman.unwrap() > 0.99);
        let words = vec!["a".to_string(), "b".into()];
        let rep = MetricReport::from_answers(&words, &words).unwrap();
        assert!(rep.pearson.is_none());
        assert!(rep.to_kv().contains("pearson=undefined\n"));
    }
}

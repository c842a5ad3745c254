//! BLEU-4, precision/recall/F1 and threshold sweeps.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Floor for zero n-gram matches: `p_n = eps / total`.
pub const BLEU_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    /// Mean of per-example scores.
    Sentence,
    /// Pooled n-gram counts and lengths.
    Corpus,
}

/// Splits on whitespace and isolates punctuation; optionally lowercases.
pub fn bleu_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase { text.to_lowercase() } else { text.to_string() };
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Counts {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

fn ngrams<S: AsRef<str>>(t: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m: HashMap<Vec<&str>, usize> = HashMap::new();
    for w in t.windows(n) {
        *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_default() += 1;
    }
    m
}

fn counts<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Counts {
    let mut c = Counts { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
    for n in 1..=4 {
        let (h, r) = (ngrams(hyp, n), ngrams(reference, n));
        c.matches[n - 1] = h.iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
        c.totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    c
}

fn score(c: &Counts) -> f64 {
    if c.hyp_len == 0 || c.ref_len == 0 || c.matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let total = c.totals[n].max(1) as f64;
        let p = if c.matches[n] == 0 {
            BLEU_EPS / total
        } else {
            c.matches[n] as f64 / total
        };
        log_sum += p.ln();
    }
    let bp = if c.hyp_len >= c.ref_len {
        1.0
    } else {
        (1.0 - c.ref_len as f64 / c.hyp_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times
/// `min(1, exp(1 - |ref|/|hyp|))`. Zero counts are floored at `1e-9/total`;
/// an empty hypothesis or no unigram overlap scores 0.
pub fn bleu4<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    score(&counts(hyp, reference))
}

/// Corpus BLEU-4 over pooled counts.
pub fn corpus_bleu4<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> f64 {
    let mut total = Counts::default();
    for (h, r) in pairs {
        let c = counts(h, r);
        for n in 0..4 {
            total.matches[n] += c.matches[n];
            total.totals[n] += c.totals[n];
        }
        total.hyp_len += c.hyp_len;
        total.ref_len += c.ref_len;
    }
    score(&total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the denominator was zero and the value was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Positive class = needs review.
pub fn prf1(predictions: &[bool], labels: &[bool]) -> Result<Prf1> {
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Usage("prf1 needs at least one prediction".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { (0.0, true) } else { (a as f64 / b as f64, false) };
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(Prf1 { precision, recall, f1, precision_undefined, recall_undefined, f1_undefined, tp, fp, fn_, tn })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub predicted_positive: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `0.00, 0.01, …, 1.00` plus `extra` when it is not already on the grid.
pub fn threshold_grid(extra: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    if !grid.contains(&extra) {
        grid.push(extra);
        grid.sort_by(f64::total_cmp);
    }
    grid
}

pub fn threshold_curve(scores: &[f64], labels: &[bool], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    thresholds
        .iter()
        .map(|&t| {
            let preds: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
            let m = prf1(&preds, labels)?;
            Ok(CurvePoint {
                threshold: t,
                predicted_positive: preds.iter().filter(|&&p| p).count(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect()
}

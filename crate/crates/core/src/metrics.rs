//! ROC AUC via the Mann–Whitney statistic.

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counting ½. Midranks keep every intermediate exact in `f64`, so the result
/// equals pair counting bit for bit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied midranks stay integral.
    let mut twice_ranks: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let hits = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_ranks += twice_mid * hits;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // 2U = 2·R₊ − P(P+1): exact integer count of half-pairs.
    let twice_u = twice_ranks - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC over `probs` (`n × classes`, row-major); for two
/// classes the class-1 column alone. Returns the aggregate and per-class
/// values.
pub fn macro_auc(probs: &[f32], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes < 2 || probs.len() != labels.len() * classes {
        return Err(Error::dims("macro_auc", &[probs.len()], &[labels.len(), classes]));
    }
    let column = |c: usize| -> Vec<f64> {
        probs.chunks_exact(classes).map(|row| row[c] as f64).collect()
    };
    if classes == 2 {
        let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let a = auc(&column(1), &truth)?;
        return Ok((a, vec![a, a]));
    }
    let per: Vec<f64> = (0..classes)
        .map(|c| {
            let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(&column(c), &truth)
        })
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / classes as f64, per))
}

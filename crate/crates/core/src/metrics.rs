//! AUC and LogLoss.

use crate::error::{HienError, Result};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn class_counts(scores: &[f64], labels: &[f64]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(HienError::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(HienError::Numeric(format!("score {s} cannot be ranked")));
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(HienError::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Rank-based AUC. Tied positive/negative pairs earn half credit.
///
/// Credits are accumulated in half-pair units, so the result is exactly
/// the pairwise double sum.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_credit: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0.5 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_credit += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(half_credit as f64 / (2 * pos * neg) as f64)
}

/// Literal `O(N⁺N⁻)` pairwise AUC.
pub fn auc_bruteforce(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut half_credit: u64 = 0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &y)| y > 0.5) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &y)| y <= 0.5) {
            if sp > sn {
                half_credit += 2;
            } else if sp == sn {
                half_credit += 1;
            }
        }
    }
    Ok(half_credit as f64 / (2 * pos * neg) as f64)
}

/// Mean negative log-likelihood with predictions clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HienError::dim("logloss", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(HienError::EmptyInput("logloss"));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

pub fn evaluate(scores: &[f64], labels: &[f64]) -> Result<EvalResult> {
    let auc = auc(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    Ok(EvalResult {
        auc,
        logloss: logloss(scores, labels)?,
        positives,
        negatives: labels.len() - positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.4, 0.5, 0.1];
        let y = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(auc(&s, &y).unwrap(), 0.75);
        assert_eq!(auc_bruteforce(&s, &y).unwrap(), 0.75);
        assert_eq!(auc(&[0.8, 0.9, 0.1], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc_bruteforce(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc_bruteforce(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(HienError::UndefinedMetric(_))));
        assert!(matches!(auc_bruteforce(&[0.1], &[0.0]), Err(HienError::UndefinedMetric(_))));
        assert!(auc(&[f64::NAN, 0.2], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn logloss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(&[0.5; 4], &[1.0, 0.0, 1.0, 1.0]).unwrap() - ln2).abs() < 1e-15);
        assert!(logloss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        assert!(logloss(&[0.3, 0.8], &[1.0, 0.0]).unwrap() > ln2);
        let r = evaluate(&[0.9, 0.4, 0.5, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((r.positives, r.negatives), (2, 2));
    }
}

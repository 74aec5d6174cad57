//! Ranking and calibration metrics.

use crate::autograd::{sigmoid, PROB_CLAMP};
use crate::error::{Error, Result};

pub const ECE_BINS: usize = 10;

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|l| **l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Indices ordered by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from exact integer pair counts.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    // Twice the Mann-Whitney U statistic, accumulated from the lowest score up.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for g in tie_groups(scores).iter().rev() {
        let gp = g.iter().filter(|&&i| labels[i]).count() as u128;
        let gn = g.len() as u128 - gp;
        twice_u += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "PR-AUC needs at least one positive".into(),
        ));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i]).count() as u64;
        tp += gp;
        fp += g.len() as u64 - gp;
        if gp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (gp as f64 / pos as f64);
        }
    }
    Ok(ap)
}

/// Σ_b (n_b / N)·|accuracy_b − confidence_b| over `bins` equal-width bins.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    check_lengths(probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (p, y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += usize::from(*y);
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (hits[b] as f64 / c - conf[b] / c).abs()
        })
        .sum())
}

fn mean_bce(probs: &[f64], labels: &[bool]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if *y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len().max(1) as f64
}

/// Model cross entropy divided by that of always predicting the dataset
/// base rate.
pub fn nce(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("NCE needs both classes".into()));
    }
    let rate = pos as f64 / (pos + neg) as f64;
    let base = -(rate * rate.ln() + (1.0 - rate) * (1.0 - rate).ln());
    Ok(mean_bce(probs, labels) / base)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub ece: f64,
    pub nce: f64,
    pub bce: f64,
    pub n_pos: u64,
    pub n_neg: u64,
}

impl MetricReport {
    pub fn compute(probs: &[f64], labels: &[bool]) -> Result<Self> {
        let (n_pos, n_neg) = class_counts(labels);
        Ok(Self {
            roc_auc: roc_auc(probs, labels)?,
            pr_auc: pr_auc(probs, labels)?,
            ece: ece(probs, labels, ECE_BINS)?,
            nce: nce(probs, labels)?,
            bce: mean_bce(probs, labels),
            n_pos,
            n_neg,
        })
    }

    /// `key=value` lines, full precision.
    pub fn to_text(&self) -> String {
        format!(
            "roc_auc={}\npr_auc={}\nece={}\nnce={}\nbce={}\nn_pos={}\nn_neg={}\npr_auc_definition=average_precision\n",
            self.roc_auc, self.pr_auc, self.ece, self.nce, self.bce, self.n_pos, self.n_neg
        )
    }
}

/// Logistic recalibration `sigmoid(a·f + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub a: f64,
    pub b: f64,
}

impl CalibrationParams {
    pub fn identity() -> Self {
        Self { a: 1.0, b: 0.0 }
    }

    pub fn apply(&self, logit: f64) -> f64 {
        sigmoid(self.a * logit + self.b)
    }

    /// Recalibrated probabilities; monotone increasing in the logit when
    /// `a > 0`.
    pub fn apply_all(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|z| self.apply(*z)).collect()
    }

    pub fn apply_logit(&self, logit: f64) -> f64 {
        self.a * logit + self.b
    }
}

pub const PLATT_TOL: f64 = 1e-8;
pub const PLATT_MAX_ITERS: usize = 100;

/// Maximum-likelihood Platt parameters by damped Newton iterations on the
/// mean negative log-likelihood, stopping when the gradient norm drops below
/// `1e-8`.
pub fn fit_platt(logits: &[f64], labels: &[bool]) -> Result<CalibrationParams> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(
            "Platt fit needs equal, non-empty inputs".into(),
        ));
    }
    let n = logits.len() as f64;
    let nll = |a: f64, b: f64| -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(f, y)| {
                let z = a * f + b;
                // log(1 + e^z) - y·z, stable
                let softplus = if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                };
                softplus - if *y { z } else { 0.0 }
            })
            .sum::<f64>()
            / n
    };
    let (mut a, mut b) = (1.0, 0.0);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..PLATT_MAX_ITERS {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (f, y) in logits.iter().zip(labels) {
            let p = sigmoid(a * f + b);
            let r = p - f64::from(u8::from(*y));
            let w = p * (1.0 - p);
            ga += r * f;
            gb += r;
            haa += w * f * f;
            hab += w * f;
            hbb += w;
        }
        let (ga, gb, haa, hab, hbb) = (ga / n, gb / n, haa / n, hab / n, hbb / n);
        grad_norm = (ga * ga + gb * gb).sqrt();
        if grad_norm < PLATT_TOL {
            return Ok(CalibrationParams { a, b });
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det.abs() > 1e-300 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga, gb)
        };
        let f0 = nll(a, b);
        let mut step = 1.0;
        loop {
            let (na, nb) = (a - step * da, b - step * db);
            if nll(na, nb) <= f0 || step < 1e-10 {
                a = na;
                b = nb;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NonConvergence {
        iterations: PLATT_MAX_ITERS,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(
            roc_auc(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap(),
            0.5
        );
        assert_eq!(
            roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        // Ranked: +, -, + → precision 1 at recall 0.5, 2/3 at recall 1.
        let ap = pr_auc(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        let labels = [true, false, true, false];
        assert_eq!(ece(&[0.5; 4], &labels, 10).unwrap(), 0.0);
        assert!((ece(&[0.9; 4], &labels, 10).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(ece(&[1.0, 1.0], &[true, true], 10).unwrap(), 0.0);
    }

    #[test]
    fn nce_of_base_rate_is_one() {
        let labels = [true, false, false, false];
        assert!((nce(&[0.25; 4], &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn platt_recovers_generating_parameters() {
        let mut rng = crate::rng::Stream::new(5);
        let logits: Vec<f64> = (0..20_000).map(|_| 2.0 * rng.normal()).collect();
        let labels: Vec<bool> = logits
            .iter()
            .map(|f| rng.bernoulli(sigmoid(2.0 * f + 1.0)))
            .collect();
        let c = fit_platt(&logits, &labels).unwrap();
        assert!(
            (c.a - 2.0).abs() < 0.15 && (c.b - 1.0).abs() < 0.15,
            "{c:?}"
        );
    }

    #[test]
    fn platt_rejects_empty_input() {
        assert!(fit_platt(&[], &[]).is_err());
    }
}

//! Classification metrics: balanced accuracy, Cohen's kappa, weighted F1,
//! AUROC (Mann-Whitney with half-credit ties), and AUC-PR as average
//! precision with exact threshold handling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("class {0} has no true instances")]
    MissingClass(usize),
    #[error("record {index}: {detail}")]
    BadRecord { index: usize, detail: String },
    #[error("binary metric on a {0}-class task")]
    NotBinary(usize),
    #[error("need both classes present, found only one")]
    SingleClass,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One evaluated example: true class, predicted class, and a per-class
/// score vector summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub true_class: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

pub fn validate(records: &[EvalRecord], n_classes: usize) -> Result<()> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, r) in records.iter().enumerate() {
        if r.true_class >= n_classes || r.predicted >= n_classes {
            return Err(MetricsError::BadRecord {
                index,
                detail: format!(
                    "classes ({}, {}) out of range for {n_classes}",
                    r.true_class, r.predicted
                ),
            });
        }
        if r.scores.len() != n_classes {
            return Err(MetricsError::BadRecord {
                index,
                detail: format!("{} scores for {n_classes} classes", r.scores.len()),
            });
        }
        let sum: f64 = r.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::BadRecord {
                index,
                detail: format!("scores sum to {sum}"),
            });
        }
    }
    Ok(())
}

fn confusion(records: &[EvalRecord], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for r in records {
        m[r.true_class][r.predicted] += 1;
    }
    m
}

/// Mean per-class recall. Every class must have at least one true
/// instance.
pub fn balanced_accuracy(records: &[EvalRecord], n_classes: usize) -> Result<f64> {
    validate(records, n_classes)?;
    let m = confusion(records, n_classes);
    let mut sum = 0.0;
    for (c, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            return Err(MetricsError::MissingClass(c));
        }
        sum += row[c] as f64 / support as f64;
    }
    Ok(sum / n_classes as f64)
}

/// (p_o - p_e) / (1 - p_e) with marginal-product expected agreement;
/// defined as 0 when p_e = 1.
pub fn cohens_kappa(records: &[EvalRecord], n_classes: usize) -> Result<f64> {
    validate(records, n_classes)?;
    let distinct = records
        .iter()
        .map(|r| r.true_class)
        .collect::<std::collections::BTreeSet<_>>();
    if distinct.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    let m = confusion(records, n_classes);
    let n = records.len() as f64;
    let mut po = 0.0;
    let mut pe = 0.0;
    for c in 0..n_classes {
        po += m[c][c] as f64 / n;
        let row: usize = m[c].iter().sum();
        let col: usize = (0..n_classes).map(|r| m[r][c]).sum();
        pe += (row as f64 / n) * (col as f64 / n);
    }
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Support-weighted mean F1; a class's F1 is 0 when precision + recall = 0.
pub fn weighted_f1(records: &[EvalRecord], n_classes: usize) -> Result<f64> {
    validate(records, n_classes)?;
    let m = confusion(records, n_classes);
    let n = records.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let fp: f64 = (0..n_classes).filter(|&r| r != c).map(|r| m[r][c] as f64).sum();
        let fn_: f64 = m[c].iter().enumerate().filter(|&(p, _)| p != c).map(|(_, &v)| v as f64).sum();
        let f1 = if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += (support as f64 / n) * f1;
    }
    Ok(total)
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (the rank-sum formulation). Binary tasks only; class 1 is
/// positive and its score is the ranking key.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    validate(records, 2).map_err(|e| match e {
        MetricsError::BadRecord { index, detail } => MetricsError::BadRecord { index, detail },
        other => other,
    })?;
    let n_pos = records.iter().filter(|r| r.true_class == 1).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    // midranks over scores sorted ascending
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].scores[1].partial_cmp(&records[b].scores[1]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && records[order[j + 1]].scores[1] == records[order[i]].scores[1]
        {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if records[idx].true_class == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: step-wise integration of the precision-recall curve
/// over descending score thresholds, with tied scores handled as one
/// threshold. Binary tasks only.
pub fn auc_pr(records: &[EvalRecord]) -> Result<f64> {
    validate(records, 2)?;
    let n_pos = records.iter().filter(|r| r.true_class == 1).count();
    if n_pos == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].scores[1].partial_cmp(&records[a].scores[1]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && records[order[j + 1]].scores[1] == records[order[i]].scores[1]
        {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if records[idx].true_class == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// The per-task metric bundle. AUROC and AUC-PR are only defined for
/// binary tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_classes: usize,
    pub balanced_accuracy: f64,
    pub cohens_kappa: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
}

impl MetricsReport {
    pub fn compute(records: &[EvalRecord], n_classes: usize) -> Result<Self> {
        let (auroc_v, auc_pr_v) = if n_classes == 2 {
            (Some(auroc(records)?), Some(auc_pr(records)?))
        } else {
            (None, None)
        };
        Ok(MetricsReport {
            n: records.len(),
            n_classes,
            balanced_accuracy: balanced_accuracy(records, n_classes)?,
            cohens_kappa: cohens_kappa(records, n_classes)?,
            weighted_f1: weighted_f1(records, n_classes)?,
            auroc: auroc_v,
            auc_pr: auc_pr_v,
        })
    }

    /// Checkpoint-selection score: AUROC for binary tasks, kappa otherwise.
    pub fn monitor_score(&self) -> f64 {
        match self.auroc {
            Some(a) if self.n_classes == 2 => a,
            _ => self.cohens_kappa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(true_class: usize, predicted: usize, p1: f64) -> EvalRecord {
        EvalRecord { true_class, predicted, scores: vec![1.0 - p1, p1] }
    }

    fn from_confusion(m: &[[usize; 2]; 2]) -> Vec<EvalRecord> {
        let mut out = Vec::new();
        for t in 0..2 {
            for p in 0..2 {
                for _ in 0..m[t][p] {
                    out.push(rec(t, p, if p == 1 { 0.9 } else { 0.1 }));
                }
            }
        }
        out
    }

    #[test]
    fn balanced_accuracy_worked_cases() {
        // confusion [[9,1],[4,6]] -> (0.9 + 0.6) / 2 = 0.75
        let records = from_confusion(&[[9, 1], [4, 6]]);
        assert_eq!(balanced_accuracy(&records, 2).unwrap(), 0.75);

        // perfect predictions
        let records = from_confusion(&[[5, 0], [0, 5]]);
        assert_eq!(balanced_accuracy(&records, 2).unwrap(), 1.0);

        // constant predictor on balanced classes
        let records = from_confusion(&[[5, 0], [5, 0]]);
        assert_eq!(balanced_accuracy(&records, 2).unwrap(), 0.5);

        // missing class
        let records = from_confusion(&[[5, 0], [0, 0]]);
        assert!(matches!(
            balanced_accuracy(&records, 2),
            Err(MetricsError::MissingClass(1))
        ));
    }

    #[test]
    fn kappa_worked_cases() {
        // perfect agreement
        let records = from_confusion(&[[5, 0], [0, 5]]);
        assert_eq!(cohens_kappa(&records, 2).unwrap(), 1.0);
        // constant prediction on balanced truth: p_o = p_e = 0.5 -> 0
        let records = from_confusion(&[[5, 0], [5, 0]]);
        assert_eq!(cohens_kappa(&records, 2).unwrap(), 0.0);
    }

    #[test]
    fn weighted_f1_worked_cases() {
        let records = from_confusion(&[[5, 0], [0, 5]]);
        assert_eq!(weighted_f1(&records, 2).unwrap(), 1.0);
        // single class present, always predicted: F1 = 1 for that class
        let records = vec![rec(0, 0, 0.1), rec(0, 0, 0.2)];
        assert_eq!(weighted_f1(&records, 2).unwrap(), 1.0);
    }

    #[test]
    fn auroc_worked_cases() {
        // perfect ranking
        let records = vec![rec(1, 1, 0.9), rec(1, 1, 0.8), rec(0, 0, 0.3), rec(0, 0, 0.2)];
        assert_eq!(auroc(&records).unwrap(), 1.0);
        // labels (1,0,1,0) with scores (0.9, 0.8, 0.3, 0.2): 3 of 4 pairs
        let records = vec![rec(1, 1, 0.9), rec(0, 1, 0.8), rec(1, 0, 0.3), rec(0, 0, 0.2)];
        assert_eq!(auroc(&records).unwrap(), 0.75);
        // all-equal scores: every pair ties at half credit
        let records = vec![rec(1, 0, 0.5), rec(0, 0, 0.5), rec(1, 0, 0.5), rec(0, 0, 0.5)];
        assert_eq!(auroc(&records).unwrap(), 0.5);
        // single-class truth
        let records = vec![rec(1, 1, 0.9), rec(1, 1, 0.8)];
        assert!(matches!(auroc(&records), Err(MetricsError::SingleClass)));
    }

    #[test]
    fn auc_pr_worked_cases() {
        // perfect ranking
        let records = vec![rec(1, 1, 0.9), rec(1, 1, 0.8), rec(0, 0, 0.3), rec(0, 0, 0.2)];
        assert_eq!(auc_pr(&records).unwrap(), 1.0);
        // all-equal scores: single threshold, precision = positive rate
        let records = vec![rec(1, 0, 0.5), rec(0, 0, 0.5), rec(0, 0, 0.5), rec(0, 0, 0.5)];
        assert_eq!(auc_pr(&records).unwrap(), 0.25);
    }

    // ── brute-force oracles ──────────────────────────────────────────────

    fn oracle_balanced_accuracy(records: &[EvalRecord], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let of_c: Vec<_> = records.iter().filter(|r| r.true_class == c).collect();
                of_c.iter().filter(|r| r.predicted == c).count() as f64 / of_c.len() as f64
            })
            .sum::<f64>()
            / k as f64
    }

    fn oracle_kappa(records: &[EvalRecord], k: usize) -> f64 {
        let n = records.len() as f64;
        let po = records.iter().filter(|r| r.true_class == r.predicted).count() as f64 / n;
        let pe: f64 = (0..k)
            .map(|c| {
                let row = records.iter().filter(|r| r.true_class == c).count() as f64 / n;
                let col = records.iter().filter(|r| r.predicted == c).count() as f64 / n;
                row * col
            })
            .sum();
        if (1.0 - pe).abs() < 1e-15 {
            0.0
        } else {
            (po - pe) / (1.0 - pe)
        }
    }

    fn oracle_weighted_f1(records: &[EvalRecord], k: usize) -> f64 {
        let n = records.len() as f64;
        (0..k)
            .map(|c| {
                let support = records.iter().filter(|r| r.true_class == c).count();
                if support == 0 {
                    return 0.0;
                }
                let tp = records
                    .iter()
                    .filter(|r| r.true_class == c && r.predicted == c)
                    .count() as f64;
                let pred = records.iter().filter(|r| r.predicted == c).count() as f64;
                let prec = if pred == 0.0 { 0.0 } else { tp / pred };
                let rec = tp / support as f64;
                let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
                (support as f64 / n) * f1
            })
            .sum()
    }

    fn oracle_auroc(records: &[EvalRecord]) -> f64 {
        let pos: Vec<f64> =
            records.iter().filter(|r| r.true_class == 1).map(|r| r.scores[1]).collect();
        let neg: Vec<f64> =
            records.iter().filter(|r| r.true_class == 0).map(|r| r.scores[1]).collect();
        let mut acc = 0.0;
        for &p in &pos {
            for &q in &neg {
                acc += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    fn oracle_auc_pr(records: &[EvalRecord]) -> f64 {
        // exhaustive threshold enumeration with full rescans
        let mut thresholds: Vec<f64> = records.iter().map(|r| r.scores[1]).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = records.iter().filter(|r| r.true_class == 1).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for &th in &thresholds {
            let tp = records
                .iter()
                .filter(|r| r.scores[1] >= th && r.true_class == 1)
                .count() as f64;
            let fp = records
                .iter()
                .filter(|r| r.scores[1] >= th && r.true_class == 0)
                .count() as f64;
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    fn random_records(rng: &mut ChaCha8Rng, n: usize, k: usize, tie_prone: bool) -> Vec<EvalRecord> {
        (0..n)
            .map(|_| {
                let true_class = rng.gen_range(0..k);
                let predicted = rng.gen_range(0..k);
                let mut scores: Vec<f64> = (0..k)
                    .map(|_| {
                        if tie_prone {
                            // quantized scores force ties
                            (rng.gen_range(0..5) as f64) + 0.5
                        } else {
                            rng.gen_range(0.01..1.0)
                        }
                    })
                    .collect();
                let sum: f64 = scores.iter().sum();
                for s in &mut scores {
                    *s /= sum;
                }
                EvalRecord { true_class, predicted, scores }
            })
            .collect()
    }

    #[test]
    fn metrics_match_oracles_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..200 {
            let k = if trial % 2 == 0 { 2 } else { 3 };
            let tie_prone = trial % 3 == 0;
            let records = random_records(&mut rng, 40, k, tie_prone);
            // skip degenerate draws the metrics legitimately reject
            if (0..k).any(|c| !records.iter().any(|r| r.true_class == c)) {
                continue;
            }
            assert!(
                (balanced_accuracy(&records, k).unwrap() - oracle_balanced_accuracy(&records, k))
                    .abs()
                    < 1e-9
            );
            assert!((cohens_kappa(&records, k).unwrap() - oracle_kappa(&records, k)).abs() < 1e-9);
            assert!(
                (weighted_f1(&records, k).unwrap() - oracle_weighted_f1(&records, k)).abs() < 1e-9
            );
            if k == 2 {
                assert!((auroc(&records).unwrap() - oracle_auroc(&records)).abs() < 1e-9);
                assert!((auc_pr(&records).unwrap() - oracle_auc_pr(&records)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_invariance_and_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut records = random_records(&mut rng, 30, 2, false);
        while !(records.iter().any(|r| r.true_class == 0)
            && records.iter().any(|r| r.true_class == 1))
        {
            records = random_records(&mut rng, 30, 2, false);
        }
        let a = auroc(&records).unwrap();
        let ba = balanced_accuracy(&records, 2).unwrap();

        let mut shuffled = records.clone();
        shuffled.reverse();
        assert_eq!(auroc(&shuffled).unwrap(), a);
        assert_eq!(balanced_accuracy(&shuffled, 2).unwrap(), ba);

        // strictly monotone transform of the ranking scores
        let mut transformed = records.clone();
        for r in &mut transformed {
            let s1 = (5.0 * r.scores[1]).exp() / 200.0;
            // keep the vector a distribution by rescaling both entries
            let s0 = r.scores[0] * (1.0 - s1) / r.scores[0].max(1e-12);
            let sum = s0 + s1;
            r.scores = vec![s0 / sum, s1 / sum];
        }
        // note: the transform above preserves the order of scores[1]
        let order_a: Vec<usize> = {
            let mut idx: Vec<usize> = (0..records.len()).collect();
            idx.sort_by(|&x, &y| records[x].scores[1].partial_cmp(&records[y].scores[1]).unwrap());
            idx
        };
        let order_b: Vec<usize> = {
            let mut idx: Vec<usize> = (0..transformed.len()).collect();
            idx.sort_by(|&x, &y| {
                transformed[x].scores[1].partial_cmp(&transformed[y].scores[1]).unwrap()
            });
            idx
        };
        assert_eq!(order_a, order_b);
        assert!((auroc(&transformed).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn kappa_one_iff_perfect_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let records = random_records(&mut rng, 24, 3, false);
            if (0..3).any(|c| !records.iter().any(|r| r.true_class == c)) {
                continue;
            }
            let k = cohens_kappa(&records, 3).unwrap();
            let perfect = records.iter().all(|r| r.true_class == r.predicted);
            assert_eq!(k == 1.0, perfect);
            assert!((-1.0..=1.0).contains(&k));
        }
    }

    #[test]
    fn monitor_score_convention() {
        let binary = from_confusion(&[[4, 1], [1, 4]]);
        let rep = MetricsReport::compute(&binary, 2).unwrap();
        assert_eq!(rep.monitor_score(), rep.auroc.unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut multi = random_records(&mut rng, 30, 3, false);
        while (0..3).any(|c| !multi.iter().any(|r| r.true_class == c)) {
            multi = random_records(&mut rng, 30, 3, false);
        }
        let rep = MetricsReport::compute(&multi, 3).unwrap();
        assert!(rep.auroc.is_none());
        assert_eq!(rep.monitor_score(), rep.cohens_kappa);
    }

    #[test]
    fn score_validation() {
        let bad = vec![EvalRecord { true_class: 0, predicted: 0, scores: vec![0.7, 0.7] }];
        assert!(matches!(validate(&bad, 2), Err(MetricsError::BadRecord { .. })));
    }
}

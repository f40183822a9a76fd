//! Task and uncertainty metrics.
//!
//! All kernels are pure functions over slices; dataset-level values are plain
//! means over examples (and over pixels for segmentation).

pub mod export;
pub mod flops;

pub use flops::{ensemble_flops, flops, forward_flops, FlopsCount};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::layers::Head;
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;
const PROB_SUM_TOL: f64 = 1e-6;

/// `(1/c)·Σ_c (δ_c − p_c)²` against the one-hot target for `label`.
pub fn brier(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::contract(format!("label {label} out of range for {} classes", probs.len())));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::contract(format!("probabilities sum to {total}, not 1")));
    }
    let c = probs.len() as f64;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = if i == label { 1.0 } else { 0.0 };
            (d - p).powi(2)
        })
        .sum::<f64>()
        / c)
}

/// Brier score of a binary prediction `p = P(y = 1)`, i.e. [`brier`] over `(1 − p, p)`.
pub fn brier_binary(p: f64, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    (t - p).powi(2)
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn binary_entropy(p: f64) -> f64 {
    entropy(&[p, 1.0 - p])
}

/// Mean per-example entropy of mean predictive distributions given as rows.
pub fn entropy_of_expectation(mean_probs: &[Vec<f64>]) -> f64 {
    if mean_probs.is_empty() {
        return 0.0;
    }
    mean_probs.iter().map(|p| entropy(p)).sum::<f64>() / mean_probs.len() as f64
}

/// Zero-based bin of `c` among `(j/n, (j+1)/n]`, with 0 in the first bin.
/// The ceiling guess is corrected against the edges so values landing
/// exactly on an edge stay in the lower bin.
fn ece_bin(c: f64, n_bins: usize) -> usize {
    let edge = |j: usize| j as f64 / n_bins as f64;
    let mut b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins);
    while b > 1 && c <= edge(b - 1) {
        b -= 1;
    }
    while b < n_bins && c > edge(b) {
        b += 1;
    }
    b - 1
}

/// Expected calibration error with `n_bins` equal-width, right-inclusive bins
/// over `[0, 1]` (a confidence of exactly 0 falls into the first bin).
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::contract("ECE of an empty set"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::dim("confidences and correctness differ in length"));
    }
    if n_bins == 0 {
        return Err(Error::contract("ECE needs at least one bin"));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::contract(format!("confidence {c} outside [0, 1]")));
        }
        let b = ece_bin(c, n_bins);
        conf_sum[b] += c;
        acc_sum[b] += ok as u8 as f64;
        count[b] += 1;
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (acc_sum[b] / k - conf_sum[b] / k).abs()
        })
        .sum())
}

fn overlap(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let inter = pred.iter().zip(gt).filter(|(&a, &b)| a && b).count();
    let a = pred.iter().filter(|&&v| v).count();
    let b = gt.iter().filter(|&&v| v).count();
    Ok((inter, a, b))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, a, b) = overlap(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, a, b) = overlap(pred, gt)?;
    let union = a + b - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mann–Whitney AUC with ties counted ½. `None` if only one class is present.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub macro_auc: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels skipped because only one class was present.
    pub skipped: Vec<usize>,
}

/// Macro average of per-label binary AUCs; `scores[l]` and `labels[l]` are the columns of label `l`.
pub fn multilabel_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<AucReport> {
    if scores.len() != labels.len() || scores.iter().zip(labels).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::dim("score and label columns differ in shape"));
    }
    let per_label: Vec<Option<f64>> = scores.iter().zip(labels).map(|(s, l)| binary_auc(s, l)).collect();
    let skipped: Vec<usize> = (0..per_label.len()).filter(|&i| per_label[i].is_none()).collect();
    let valid: Vec<f64> = per_label.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::contract("every label is degenerate; AUC undefined"));
    }
    Ok(AucReport {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_label,
        skipped,
    })
}

/// Evaluation summary for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub brier: f64,
    pub eoe: f64,
    pub ece: f64,
    pub flops: u64,
    pub flops_ratio: f64,
    pub per_class_auc: Vec<Option<f64>>,
}

impl MetricsReport {
    /// `(key, value)` pairs in report order; absent task metrics are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut opt = |k, v: Option<f64>| {
            if let Some(v) = v {
                out.push((k, format!("{v}")));
            }
        };
        opt("accuracy", self.accuracy);
        opt("auc", self.auc);
        opt("dice", self.dice);
        opt("iou", self.iou);
        out.push(("brier", format!("{}", self.brier)));
        out.push(("eoe", format!("{}", self.eoe)));
        out.push(("ece", format!("{}", self.ece)));
        out.push(("flops", format!("{}", self.flops)));
        out.push(("flops_ratio", format!("{}", self.flops_ratio)));
        out
    }

    pub fn to_key_value(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header(&self) -> String {
        self.entries().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.entries().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}

/// Scores mean predictive probabilities against a dataset's targets.
///
/// `mean_probs` is `[N, C]` (softmax rows) for multi-class, `[N, L]` for
/// multi-label and `[N, 1, H, W]` for segmentation. Segmentation is scored
/// against the raters' majority vote; entropy is averaged per pixel, then per example.
pub fn evaluate(mean_probs: &Tensor, dataset: &Dataset, head: Head, count: FlopsCount, ece_bins: usize) -> Result<MetricsReport> {
    let n = dataset.len();
    if mean_probs.shape().first() != Some(&n) {
        return Err(Error::dim(format!(
            "predictions {:?} for {n} examples",
            mean_probs.shape()
        )));
    }
    let mut report = MetricsReport {
        accuracy: None,
        auc: None,
        dice: None,
        iou: None,
        brier: 0.0,
        eoe: 0.0,
        ece: 0.0,
        flops: count.total,
        flops_ratio: count.ratio,
        per_class_auc: vec![],
    };
    let mut confidences = Vec::new();
    let mut correct = Vec::new();
    match (head, &dataset.targets) {
        (Head::Multiclass { classes }, Targets::Classes { labels, .. }) => {
            let mut hits = 0usize;
            let mut columns = vec![Vec::with_capacity(n); classes];
            let mut onehot = vec![Vec::with_capacity(n); classes];
            for (i, &y) in labels.iter().enumerate() {
                let p = mean_probs.row(i);
                report.brier += brier(p, y)?;
                report.eoe += entropy(p);
                let (arg, &conf) = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("at least one class");
                hits += (arg == y) as usize;
                confidences.push(conf);
                correct.push(arg == y);
                for c in 0..classes {
                    columns[c].push(p[c]);
                    onehot[c].push(c == y);
                }
            }
            report.accuracy = Some(hits as f64 / n as f64);
            report.brier /= n as f64;
            report.eoe /= n as f64;
            if let Ok(auc) = multilabel_auc(&columns, &onehot) {
                report.auc = Some(auc.macro_auc);
                report.per_class_auc = auc.per_label;
            }
        }
        (Head::Multilabel { labels: l }, Targets::MultiLabel { bits, .. }) => {
            let mut hits = 0usize;
            let mut columns = vec![Vec::with_capacity(n); l];
            let mut cols_y = vec![Vec::with_capacity(n); l];
            for (i, y) in bits.iter().enumerate() {
                let p = mean_probs.row(i);
                for j in 0..l {
                    report.brier += brier_binary(p[j], y[j]);
                    report.eoe += binary_entropy(p[j]);
                    let pred = p[j] >= 0.5;
                    hits += (pred == y[j]) as usize;
                    confidences.push(p[j].max(1.0 - p[j]));
                    correct.push(pred == y[j]);
                    columns[j].push(p[j]);
                    cols_y[j].push(y[j]);
                }
            }
            let total = (n * l) as f64;
            report.accuracy = Some(hits as f64 / total);
            report.brier /= total;
            report.eoe /= total;
            if let Ok(auc) = multilabel_auc(&columns, &cols_y) {
                report.auc = Some(auc.macro_auc);
                report.per_class_auc = auc.per_label;
            }
        }
        (Head::Segmentation, Targets::RaterMasks { .. }) => {
            let (mut d, mut j) = (0.0, 0.0);
            for i in 0..n {
                let p = mean_probs.row(i);
                let gt = dataset.majority_mask(i).expect("rater targets");
                let pred: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
                d += dice(&pred, &gt)?;
                j += iou(&pred, &gt)?;
                let px = p.len() as f64;
                report.brier += p.iter().zip(&gt).map(|(&v, &t)| brier_binary(v, t)).sum::<f64>() / px;
                report.eoe += p.iter().map(|&v| binary_entropy(v)).sum::<f64>() / px;
                for ((&v, &t), &pr) in p.iter().zip(&gt).zip(&pred) {
                    confidences.push(v.max(1.0 - v));
                    correct.push(pr == t);
                }
            }
            report.dice = Some(d / n as f64);
            report.iou = Some(j / n as f64);
            report.brier /= n as f64;
            report.eoe /= n as f64;
        }
        _ => return Err(Error::contract(format!("head {head} does not fit the dataset's targets"))),
    }
    report.ece = ece(&confidences, &correct, ece_bins)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brier_fixed_cases() {
        assert_eq!(brier(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((brier(&[0.8, 0.2], 0).unwrap() - 0.04).abs() < 1e-12);
        assert!((brier(&[0.5, 0.5], 0).unwrap() - 0.25).abs() < 1e-12);
        assert!((brier(&[0.5, 0.5], 1).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(brier(&[0.5, 0.5], 2), Err(Error::Contract(_))));
        assert!((brier_binary(0.8, false) - brier(&[0.2, 0.8], 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn entropy_fixed_cases() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((entropy(&[0.8, 0.2]) - 0.5004).abs() < 1e-4);
    }

    #[test]
    fn ece_edges_fall_in_lower_bin() {
        for j in 0..=15 {
            let c = j as f64 / 15.0;
            assert_eq!(ece_bin(c, 15), j.max(1) - 1, "edge {j}");
        }
        assert_eq!(ece_bin(0.2, 15), 2);
        assert_eq!(ece_bin(0.2 + 1e-12, 15), 3);
    }

    #[test]
    fn ece_fixed_cases() {
        assert_eq!(ece(&[1.0, 0.0], &[true, false], 15).unwrap(), 0.0);
        assert!((ece(&[0.9, 0.9], &[true, false], 15).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
        assert!(matches!(ece(&[], &[], 15), Err(Error::Contract(_))));
    }

    #[test]
    fn overlap_fixed_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = [false, false, true, true];
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let p = [true, true, true, true, false, false];
        let g = [false, false, true, true, true, true];
        assert!((dice(&p, &g).unwrap() - 0.5).abs() < 1e-12);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn auc_fixed_cases() {
        assert_eq!(binary_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(binary_auc(&[0.8, 0.6, 0.4], &[true, false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.3; 4], &[true, false, true, false]), Some(0.5));
        let r = multilabel_auc(
            &[vec![0.1, 0.9], vec![0.5, 0.5]],
            &[vec![false, true], vec![true, true]],
        )
        .unwrap();
        assert_eq!(r.macro_auc, 1.0);
        assert_eq!(r.skipped, vec![1]);
        assert!(multilabel_auc(&[vec![0.5]], &[vec![true]]).is_err());
    }
}

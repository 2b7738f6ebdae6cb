//! Classification metrics, frozen-feature probes, low-shot curves and
//! intensity histograms.

mod histogram;
mod probe;

pub use histogram::{histogram_mean, histogram_report, HistogramReport, ImageHistogram, HIST_BINS, HISTOGRAM_CSV_HEADER};
pub use probe::{
    default_trials, logistic_regression, lowshot_eval, mlp_probe, LogisticModel, LowShotConfig, LowShotCurve,
    LowShotPoint, ProbeConfig, ProbeReport, LOWSHOT_CSV_HEADER,
};

use log::warn;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::ClassifierNet;
use crate::tensor::Tensor;

pub const METRICS_CSV_HEADER: &str = "scope,class,precision,recall,f1,support,auroc,balanced_accuracy,accuracy";

/// Per-class scores. Recall and F1 are `None` for a class absent from the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Macro one-vs-rest; `None` when no class has both positives and negatives.
    pub auroc_macro_ovr: Option<f64>,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Area under the ROC curve of `scores` for the `positive` mask, by midranks.
/// `None` when either class is empty.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (midranks(x), midranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Two-sided Student-t quantile `t_{p}(dof)`.
pub fn t_quantile(p: f64, dof: usize) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Domain(format!("t distribution: {e}")))?;
    Ok(t.inverse_cdf(p))
}

/// Mean and 95% t-interval half-width; the half-width is `None` below two values.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = t_quantile(0.975, n - 1).expect("dof >= 1");
    (mean, Some(t * (var / n as f64).sqrt()))
}

/// Argmax predictions scored against `labels`; AUROC uses the raw scores.
pub fn compute_metrics(scores: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, c) = match scores.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::Shape(format!("scores must be [N, C], got {s:?}"))),
    };
    if n == 0 || n != labels.len() {
        return Err(Error::Shape(format!("{n} score rows for {} labels", labels.len())));
    }
    if !scores.all_finite() {
        return Err(Error::Domain("scores must be finite".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {l} out of range for {c} score columns")));
    }
    let data = scores.data();
    let preds: Vec<usize> = (0..n).map(|i| argmax(&data[i * c..(i + 1) * c])).collect();
    let mut tp = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let precision = if predicted[k] > 0 { tp[k] as f64 / predicted[k] as f64 } else { 0.0 };
        let (recall, f1) = if support[k] > 0 {
            let r = tp[k] as f64 / support[k] as f64;
            let f = if precision + r > 0.0 { 2.0 * precision * r / (precision + r) } else { 0.0 };
            (Some(r), Some(f))
        } else {
            (None, None)
        };
        let column: Vec<f64> = (0..n).map(|i| data[i * c + k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: support[k],
            auroc: auroc_binary(&column, &positive),
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    if present.len() < c {
        warn!("{} classes have no support and are excluded from macro averages", c - present.len());
    }
    let avg = |f: &dyn Fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    let macro_recall = avg(&|m| m.recall.unwrap_or(0.0));
    let aurocs: Vec<f64> = per_class.iter().filter_map(|m| m.auroc).collect();
    Ok(MetricsReport {
        macro_precision: avg(&|m| m.precision),
        macro_recall,
        macro_f1: avg(&|m| m.f1.unwrap_or(0.0)),
        auroc_macro_ovr: if aurocs.is_empty() {
            None
        } else {
            Some(aurocs.iter().sum::<f64>() / aurocs.len() as f64)
        },
        balanced_accuracy: macro_recall,
        accuracy: tp.iter().sum::<usize>() as f64 / n as f64,
        per_class,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

impl MetricsReport {
    /// One `macro` row followed by one row per class.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        s.push_str(&format!(
            "macro,all,{},{},{},{},{},{},{}\n",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.per_class.iter().map(|m| m.support).sum::<usize>(),
            opt(self.auroc_macro_ovr),
            self.balanced_accuracy,
            self.accuracy
        ));
        for (k, m) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "class,{k},{},{},{},{},{},,\n",
                m.precision,
                opt(m.recall),
                opt(m.f1),
                m.support,
                opt(m.auroc)
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "macro_precision={:.4} macro_recall={:.4} macro_f1={:.4} auroc={} balanced_accuracy={:.4} accuracy={:.4}",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.auroc_macro_ovr.map_or("undefined".into(), |v| format!("{v:.4}")),
            self.balanced_accuracy,
            self.accuracy
        )
    }
}

pub const FEATURE_BATCH: usize = 128;

/// Post-pool, pre-head activations `[N, D]` under evaluation preprocessing.
pub fn extract_features(net: &ClassifierNet, dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let aug = dataset.eval_augment();
    let mut rng = crate::rng::Rng::new(0);
    let d = net.feature_dim();
    let mut out = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(FEATURE_BATCH) {
        let batch = dataset.batch(chunk, &aug, &mut rng);
        out.extend_from_slice(net.extract(&batch)?.data());
    }
    Tensor::new(vec![indices.len(), d], out)
}

/// Logits of `net` on `indices` under evaluation preprocessing.
pub fn predict(net: &ClassifierNet, dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let aug = dataset.eval_augment();
    let mut rng = crate::rng::Rng::new(0);
    let k = net.num_classes();
    let mut out = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(FEATURE_BATCH) {
        let batch = dataset.batch(chunk, &aug, &mut rng);
        out.extend_from_slice(net.logits(&batch)?.data());
    }
    Tensor::new(vec![indices.len(), k], out)
}

/// Metrics of `net` on `indices`.
pub fn evaluate_split(net: &ClassifierNet, dataset: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let scores = predict(net, dataset, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.label(i)).collect();
    compute_metrics(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(preds: &[usize], c: usize) -> Tensor {
        let mut d = vec![0.0; preds.len() * c];
        for (i, &p) in preds.iter().enumerate() {
            d[i * c + p] = 1.0;
        }
        Tensor::new(vec![preds.len(), c], d).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 0, 1, 2];
        let r = compute_metrics(&one_hot(&labels, 3), &labels).unwrap();
        assert_eq!(
            (r.macro_precision, r.macro_recall, r.macro_f1, r.balanced_accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(r.auroc_macro_ovr, Some(1.0));
    }

    #[test]
    fn binary_auroc_perfect_ranking() {
        let scores = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.9, 0.1]).unwrap();
        let r = compute_metrics(&scores, &[1, 0]).unwrap();
        assert_eq!(r.per_class[1].auroc, Some(1.0));
        assert_eq!(r.auroc_macro_ovr, Some(1.0));
    }

    #[test]
    fn two_by_two_confusion() {
        // [[2,1],[1,2]]: rows true class, columns predicted.
        let labels = [0, 0, 0, 1, 1, 1];
        let preds = [0, 0, 1, 1, 1, 0];
        let r = compute_metrics(&one_hot(&preds, 2), &labels).unwrap();
        for m in &r.per_class {
            assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
            assert!((m.recall.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.balanced_accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_labels_leave_auroc_undefined() {
        let scores = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let r = compute_metrics(&scores, &[0, 0]).unwrap();
        assert_eq!(r.auroc_macro_ovr, None);
        assert_eq!(r.per_class[1].recall, None);
        assert!(r.to_csv().contains("undefined"));
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(auroc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn t_quantiles_match_tables() {
        for (dof, table) in [(2, 4.303), (6, 2.447), (9, 2.262)] {
            assert!((t_quantile(0.975, dof).unwrap() - table).abs() < 1e-3);
        }
        assert_eq!(mean_ci95(&[0.4, 0.4]), (0.4, Some(0.0)));
        assert_eq!(mean_ci95(&[0.4]).1, None);
    }

    #[test]
    fn spearman_of_monotone_sequences() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), 0.0);
    }
}

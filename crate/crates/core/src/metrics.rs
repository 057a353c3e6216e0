//! Ranking metrics and multi-seed summaries.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(invalid(format!("score {s} is not comparable")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with ties assigned their average rank, in doubled
    // units so the tie midpoint stays an integer.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Mean and sample standard deviation (n−1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("mean of no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Which graph, if any, a model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    None,
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub graph: GraphKind,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub seconds: Vec<f64>,
    /// Failure message of the first failing run, if any.
    pub error: Option<String>,
}

impl ExperimentReport {
    pub fn from_runs(model: &str, graph: GraphKind, seeds: Vec<u64>, aucs: Vec<f64>, seconds: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&aucs).unwrap_or((f64::NAN, f64::NAN));
        Self { model: model.to_string(), graph, seeds, aucs, mean, std, seconds, error: None }
    }
}

/// Fixed-width table with one row per report, grouped by graph kind.
pub fn render_table(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<14} {:<14} {:>8} {:>8} {:>6} {:>9}\n", "graph", "model", "mean", "std", "runs", "sec/run"));
    out.push_str(&format!("{}\n", "-".repeat(64)));
    let label = |g: GraphKind| match g {
        GraphKind::None => "none",
        GraphKind::Homogeneous => "homogeneous",
        GraphKind::Heterogeneous => "heterogeneous",
    };
    for g in [GraphKind::None, GraphKind::Homogeneous, GraphKind::Heterogeneous] {
        for r in reports.iter().filter(|r| r.graph == g) {
            let secs = if r.seconds.is_empty() { 0.0 } else { r.seconds.iter().sum::<f64>() / r.seconds.len() as f64 };
            if let Some(e) = &r.error {
                out.push_str(&format!("{:<14} {:<14} failed: {e}\n", label(g), r.model));
            } else {
                out.push_str(&format!(
                    "{:<14} {:<14} {:>8.4} {:>8.4} {:>6} {:>9.1}\n",
                    label(g),
                    r.model,
                    r.mean,
                    r.std,
                    r.aucs.len(),
                    secs
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]).unwrap(), (0.7, 0.0));
    }

    #[test]
    fn table_lists_failures() {
        let mut r = ExperimentReport::from_runs("gcn", GraphKind::Homogeneous, vec![0], vec![0.7], vec![1.0]);
        r.error = Some("diverged".into());
        let t = render_table(&[r, ExperimentReport::from_runs("dnn", GraphKind::None, vec![0], vec![0.6], vec![2.0])]);
        assert!(t.contains("failed: diverged"));
        assert!(t.find("dnn").unwrap() < t.find("gcn").unwrap());
    }
}

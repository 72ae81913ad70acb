//! Heatmap metrics: AUC, aIOU, SIM and MAE, plus test-set aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Ground truth at or above this value counts as positive for AUC and aIOU.
    pub gt_threshold: f64,
    /// Prediction thresholds averaged over by aIOU.
    pub iou_thresholds: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            gt_threshold: 0.5,
            iou_thresholds: (1..=19).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

fn same_len(phi: &[f64], label: &[f64]) -> Result<()> {
    if phi.len() != label.len() {
        return Err(Error::Shape(format!("phi has {} values, label {}", phi.len(), label.len())));
    }
    if phi.is_empty() {
        return Err(Error::Shape("empty heatmap".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// ROC area in percent via the Mann-Whitney statistic.
pub fn auc(phi: &[f64], label: &[f64], gt_threshold: f64) -> Result<f64> {
    same_len(phi, label)?;
    let positive: Vec<bool> = label.iter().map(|&y| y >= gt_threshold).collect();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative points".into()));
    }
    let ranks = average_ranks(phi);
    let rank_sum: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(100.0 * u / (np * nn))
}

/// Mean IoU over prediction thresholds, in percent. IoU of two empty sets is 0.
pub fn aiou(phi: &[f64], label: &[f64], cfg: &MetricConfig) -> Result<f64> {
    same_len(phi, label)?;
    if cfg.iou_thresholds.is_empty() {
        return Err(Error::Config("aIOU threshold list is empty".into()));
    }
    let total: f64 = cfg
        .iou_thresholds
        .iter()
        .map(|&t| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &y) in phi.iter().zip(label) {
                let a = p >= t;
                let b = y >= cfg.gt_threshold;
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(100.0 * total / cfg.iou_thresholds.len() as f64)
}

/// Histogram intersection of the two sum-normalised maps.
pub fn sim(phi: &[f64], label: &[f64]) -> Result<f64> {
    same_len(phi, label)?;
    if phi.iter().chain(label).any(|&v| v < 0.0) {
        return Err(Error::Domain("SIM needs nonnegative maps".into()));
    }
    let (sp, sl): (f64, f64) = (phi.iter().sum(), label.iter().sum());
    if !(sp > 0.0 && sl > 0.0) {
        return Err(Error::UndefinedMetric("SIM needs maps with positive sums".into()));
    }
    Ok(phi.iter().zip(label).map(|(p, y)| (p / sp).min(y / sl)).sum())
}

pub fn mae(phi: &[f64], label: &[f64]) -> Result<f64> {
    same_len(phi, label)?;
    Ok(phi.iter().zip(label).map(|(p, y)| (p - y).abs()).sum::<f64>() / phi.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub auc: f64,
    pub aiou: f64,
    pub sim: f64,
    pub mae: f64,
}

pub fn evaluate_sample(phi: &[f64], label: &[f64], cfg: &MetricConfig) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        auc: auc(phi, label, cfg.gt_threshold)?,
        aiou: aiou(phi, label, cfg)?,
        sim: sim(phi, label)?,
        mae: mae(phi, label)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub partition: String,
    pub evaluated: usize,
    pub skipped: Vec<SkippedSample>,
    pub auc: f64,
    pub aiou: f64,
    pub sim: f64,
    pub mae: f64,
}

/// Averages per-sample metrics. A sample on which any metric is undefined
/// is excluded from every mean and listed in `skipped`.
pub fn evaluate_all(
    partition: &str,
    predictions: &[Vec<f64>],
    labels: &[Vec<f64>],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut sums = [0.0; 4];
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    for (index, (phi, label)) in predictions.iter().zip(labels).enumerate() {
        match evaluate_sample(phi, label, cfg) {
            Ok(m) => {
                sums[0] += m.auc;
                sums[1] += m.aiou;
                sums[2] += m.sim;
                sums[3] += m.mae;
                evaluated += 1;
            }
            Err(Error::UndefinedMetric(reason)) => skipped.push(SkippedSample { index, reason }),
            Err(e) => return Err(e),
        }
    }
    let mean = |s: f64| if evaluated == 0 { f64::NAN } else { s / evaluated as f64 };
    Ok(MetricReport {
        partition: partition.to_string(),
        evaluated,
        skipped,
        auc: mean(sums[0]),
        aiou: mean(sums[1]),
        sim: mean(sums[2]),
        mae: mean(sums[3]),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Aligned text table, one row per report.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6}\n",
        "partition", "AUC↑", "aIOU↑", "SIM↑", "MAE↓", "n", "skip"
    );
    for r in reports {
        out += &format!(
            "{:<18} {:>8.2} {:>8.2} {:>8.3} {:>8.3} {:>6} {:>6}\n",
            r.partition,
            r.auc,
            r.aiou,
            r.sim,
            r.mae,
            r.evaluated,
            r.skipped.len()
        );
    }
    out
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_table(std::slice::from_ref(self)))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_limits() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &y, 0.5).unwrap(), 100.0);
        assert_eq!(auc(&[0.3; 4], &y, 0.5).unwrap(), 50.0);
        assert!(matches!(auc(&[0.3; 4], &[1.0; 4], 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            // Coarse values force ties.
            let phi: Vec<f64> = (0..50).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut y: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            y[0] = 0.9;
            y[1] = 0.1;
            let got = auc(&phi, &y, 0.5).unwrap();
            assert!((got - oracle::auc_pairs(&phi, &y, 0.5)).abs() <= 1e-9);
        }
    }

    #[test]
    fn aiou_cases() {
        let cfg = MetricConfig::default();
        let y = [1.0, 0.0, 1.0, 0.0];
        assert!((aiou(&y, &y, &cfg).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(aiou(&[0.0, 1.0, 0.0, 1.0], &y, &cfg).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let lab: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let expect = oracle::aiou_loop(&phi, &lab, 0.5, &cfg.iou_thresholds);
        assert!((aiou(&phi, &lab, &cfg).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn sim_and_mae_cases() {
        let y = [0.2, 0.0, 0.8, 0.4];
        let scaled: Vec<f64> = y.iter().map(|v| v * 3.0).collect();
        assert!((sim(&scaled, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(sim(&[0.0, 0.0], &[0.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
        assert!((mae(&shifted, &y).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            assert!((sim(&a, &b).unwrap() - oracle::sim_loop(&a, &b)).abs() <= 1e-12);
            assert!((mae(&a, &b).unwrap() - oracle::mae_loop(&a, &b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregation_excludes_and_counts_undefined() {
        let cfg = MetricConfig::default();
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let perfect = y.clone();
        let constant = vec![0.5; 4];
        let report = evaluate_all("seen", std::slice::from_ref(&perfect), std::slice::from_ref(&y), &cfg).unwrap();
        assert_eq!((report.auc, report.aiou, report.sim, report.mae), (100.0, 100.0, 1.0, 0.0));

        let report = evaluate_all("seen", &[perfect.clone(), constant.clone()], &[y.clone(), y.clone()], &cfg).unwrap();
        let b = evaluate_sample(&constant, &y, &cfg).unwrap();
        assert!((report.auc - (100.0 + b.auc) / 2.0).abs() < 1e-12);
        assert!((report.aiou - (100.0 + b.aiou) / 2.0).abs() < 1e-12);
        assert!((report.sim - (1.0 + b.sim) / 2.0).abs() < 1e-12);
        assert!((report.mae - b.mae / 2.0).abs() < 1e-12);

        let report = evaluate_all("seen", &[perfect, constant], &[y, vec![0.0; 4]], &cfg).unwrap();
        assert_eq!(report.evaluated, 1);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].index, 1);
    }

    #[test]
    fn table_is_aligned() {
        let r = MetricReport {
            partition: "seen".into(),
            evaluated: 3,
            skipped: vec![],
            auc: 91.5,
            aiou: 40.0,
            sim: 0.6,
            mae: 0.1,
        };
        let t = format_table(&[r.clone(), MetricReport { partition: "unseen_object".into(), ..r }]);
        let widths: Vec<usize> = t.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            case in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 2..80)
        ) {
            let (phi, pos): (Vec<f64>, Vec<bool>) = case.into_iter().unzip();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let y: Vec<f64> = pos.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
            let warped: Vec<f64> = phi.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            prop_assert_eq!(auc(&phi, &y, 0.5).unwrap(), auc(&warped, &y, 0.5).unwrap());
        }

        #[test]
        fn sim_is_symmetric(
            case in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..80)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = case.into_iter().unzip();
            prop_assume!(a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0);
            prop_assert!((sim(&a, &b).unwrap() - sim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}

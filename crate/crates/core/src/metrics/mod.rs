//! Evaluation metrics: leave-one-out correlation, linear datamodeling score
//! (LDS) and noisy-label AUC, plus the correlation primitives behind them.
//!
//! Sign convention: a positive score means the training point supports the
//! test prediction, so removing it should lower the recorded output. The
//! predicted leave-one-out change is therefore `−score`, and that sign flip
//! happens here rather than in the attributors.
//!
//! Degenerate correlations (fewer than two points, or zero variance on
//! either side) are defined as 0 and logged, so one dead test point does not
//! abort a benchmark.

use serde::{Deserialize, Serialize};

use crate::attrib::ScoreMatrix;
use crate::error::{Error, Result};
use crate::truth::{LooTruth, NoisyTruth, SubsetTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Loo,
    Lds,
    Auc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Loo => "loo",
            MetricKind::Lds => "lds",
            MetricKind::Auc => "auc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    /// Unweighted mean of `per_test`.
    pub aggregate: f64,
    /// Sample standard deviation of `per_test` over `√len`; 0 for one value.
    pub stderr: f64,
    /// One value per test point (LOO, LDS) or the single AUC.
    pub per_test: Vec<f64>,
    /// LDS only: one Spearman correlation over all (subset, test) pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<f64>,
    pub config: serde_json::Value,
}

impl MetricReport {
    fn from_values(metric: MetricKind, per_test: Vec<f64>, config: serde_json::Value) -> Self {
        let (aggregate, stderr) = mean_stderr(&per_test);
        MetricReport { metric, aggregate, stderr, per_test, pooled: None, config }
    }
}

/// Mean and standard error of the mean (sample std / √n; 0 when n < 2).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("correlating vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Sample Pearson correlation, clamped to `[−1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let n = a.len();
    if n < 2 {
        log::warn!("correlation over {n} points is degenerate; using 0");
        return Ok(0.0);
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        log::warn!("correlation input has zero variance; using 0");
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their ranks.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut lo = 0;
    while lo < idx.len() {
        let mut hi = lo + 1;
        while hi < idx.len() && a[idx[hi]] == a[idx[lo]] {
            hi += 1;
        }
        let r = (lo + hi + 1) as f64 / 2.0;
        for &i in &idx[lo..hi] {
            ranks[i] = r;
        }
        lo = hi;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Per test point `t`: Pearson over training points of `−scores[·, t]`
/// against the retrained change `loo[·, t] − base[t]`.
pub fn loo_correlation(scores: &ScoreMatrix, truth: &LooTruth) -> Result<MetricReport> {
    if (scores.n_train(), scores.n_test()) != (truth.n_train, truth.n_test) {
        return Err(Error::Shape(format!(
            "scores are {} × {}, leave-one-out table is {} × {}",
            scores.n_train(),
            scores.n_test(),
            truth.n_train,
            truth.n_test
        )));
    }
    let per_test = (0..truth.n_test)
        .map(|t| {
            let predicted: Vec<f64> = scores.column(t).iter().map(|s| -s).collect();
            pearson(&predicted, &truth.deltas(t))
        })
        .collect::<Result<_>>()?;
    let config = serde_json::json!({
        "method": scores.meta.method,
        "predicted_delta": "-score",
        "truth_head": truth.head,
        "truth_seed": truth.seed,
    });
    Ok(MetricReport::from_values(MetricKind::Loo, per_test, config))
}

/// Per test point: Spearman between the retrained subset outputs and the
/// summed scores of each subset's members. Also reports the pooled Spearman
/// over every (subset, test) pair.
pub fn lds(scores: &ScoreMatrix, truth: &SubsetTruth) -> Result<MetricReport> {
    if truth.m() < 2 {
        return Err(Error::Config(format!("LDS needs at least 2 subsets, got {}", truth.m())));
    }
    if (scores.n_train(), scores.n_test()) != (truth.n_train, truth.n_test) {
        return Err(Error::Shape(format!(
            "scores are {} × {}, subset table covers {} × {}",
            scores.n_train(),
            scores.n_test(),
            truth.n_train,
            truth.n_test
        )));
    }
    let m = truth.m();
    let mut predicted = vec![0.0; m * truth.n_test];
    for (j, subset) in truth.subsets.iter().enumerate() {
        for &i in subset {
            if i >= truth.n_train {
                return Err(Error::Shape(format!("subset {j} names training point {i}")));
            }
            for t in 0..truth.n_test {
                predicted[j * truth.n_test + t] += scores.get(i, t);
            }
        }
    }
    let per_test = (0..truth.n_test)
        .map(|t| {
            let actual: Vec<f64> = (0..m).map(|j| truth.output(j, t)).collect();
            let pred: Vec<f64> = (0..m).map(|j| predicted[j * truth.n_test + t]).collect();
            spearman(&actual, &pred)
        })
        .collect::<Result<_>>()?;
    let config = serde_json::json!({
        "method": scores.meta.method,
        "m": m,
        "alpha": truth.alpha,
        "truth_head": truth.head,
        "truth_seed": truth.seed,
        "aggregation": "mean over test points",
    });
    let mut report = MetricReport::from_values(MetricKind::Lds, per_test, config);
    report.pooled = Some(spearman(&truth.outputs, &predicted)?);
    Ok(report)
}

/// Mann–Whitney AUC of `|self_inf|` separating flipped from clean points;
/// ties count one half.
pub fn noisy_label_auc(self_inf: &[f64], truth: &NoisyTruth) -> Result<MetricReport> {
    if self_inf.len() != truth.flipped.len() {
        return Err(Error::Shape(format!(
            "{} self-influence values for {} training points",
            self_inf.len(),
            truth.flipped.len()
        )));
    }
    if let Some(i) = self_inf.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { sample: i, what: "self-influence".into() });
    }
    let n_pos = truth.flipped_count();
    let n_neg = truth.flipped.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!("AUC needs flipped and clean points ({n_pos} flipped, {n_neg} clean)")));
    }
    let mag: Vec<f64> = self_inf.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mag);
    let rank_sum: f64 = ranks.iter().zip(&truth.flipped).filter(|(_, &f)| f).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
    let config = serde_json::json!({
        "fraction": truth.fraction,
        "flipped": n_pos,
        "truth_seed": truth.seed,
        "ranking": "|self-influence|",
    });
    Ok(MetricReport::from_values(MetricKind::Auc, vec![auc], config))
}

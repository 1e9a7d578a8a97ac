use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank, which counts each tied pair as one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.iter().filter(|&&y| y == 0.0).count();
    if pos + neg != labels.len() {
        return Err(Error::contract("labels must be binary"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep every tie average an integer
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        rank2_sum += avg2 * order[i..=j].iter().filter(|&&o| labels[o] == 1.0).count() as u64;
        i = j + 1;
    }
    let p = pos as u64;
    // concordant pairs, doubled
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (pos * neg) as f64)
}

/// Brute-force pairwise concordance, the definition `auc` must agree with.
pub fn auc_pairwise(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1;
            twice += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    Ok(twice as f64 / 2.0 / pairs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` where the class has a single label value in the split.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl EvalReport {
    pub fn from_scores(scores: &[Vec<f64>], labels: &[Vec<f64>], k: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::contract("evaluation split is empty"));
        }
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<f64> = labels.iter().map(|r| r[c]).collect();
            per_class.push(match auc(&s, &y) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            });
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric("no class has both positive and negative samples".into()));
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(Self { per_class, mean })
    }
}

pub fn predict_all(model: &Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples.iter().map(|s| model.scores(s)).collect()
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.k() != model.k {
        return Err(Error::contract(format!("split has {} classes, model has {}", data.k(), model.k)));
    }
    let scores = predict_all(model, data)?;
    let labels: Vec<Vec<f64>> = data.samples.iter().map(|s| s.labels.clone()).collect();
    EvalReport::from_scores(&scores, &labels, model.k)
}

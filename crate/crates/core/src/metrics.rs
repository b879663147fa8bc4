//! Segmentation and regression metrics: Dice, R², Pearson correlation, RMSE,
//! and the Dice-band cohort labels used in the embedding analysis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dice similarity 2|A∩B|/(|A|+|B|) between two binary masks. Two empty
/// masks agree perfectly and score 1.0.
pub fn dice(mask_a: &Tensor, mask_b: &Tensor) -> Result<f64> {
    if mask_a.shape() != mask_b.shape() {
        return Err(Error::ShapeMismatch {
            context: "dice masks",
            expected: mask_a.shape().to_vec(),
            got: mask_b.shape().to_vec(),
        });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in mask_a.data().iter().zip(mask_b.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

fn check_pairs(y_true: &[f64], y_pred: &[f64], what: &str) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch {
            context: "metric input lengths",
            expected: vec![y_true.len()],
            got: vec![y_pred.len()],
        });
    }
    if y_true.len() < 2 {
        return Err(Error::InsufficientData(format!("{what} needs n >= 2")));
    }
    Ok(())
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&v| v == xs[0])
}

/// Coefficient of determination 1 − SSres/SStot.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pairs(y_true, y_pred, "r2")?;
    if is_constant(y_true) {
        return Err(Error::UndefinedMetric(
            "r2 is undefined for constant y_true".into(),
        ));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    let ss_tot: f64 = y_true.iter().map(|t| (t - mean) * (t - mean)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Sample Pearson correlation coefficient.
pub fn pcc(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pairs(y_true, y_pred, "pcc")?;
    if is_constant(y_true) || is_constant(y_pred) {
        return Err(Error::UndefinedMetric(
            "pcc is undefined for a constant sequence".into(),
        ));
    }
    let n = y_true.len() as f64;
    let mt = y_true.iter().sum::<f64>() / n;
    let mp = y_pred.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vt = 0.0;
    let mut vp = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        cov += (t - mt) * (p - mp);
        vt += (t - mt) * (t - mt);
        vp += (p - mp) * (p - mp);
    }
    Ok(cov / (vt * vp).sqrt())
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pairs(y_true, y_pred, "rmse")?;
    let n = y_true.len() as f64;
    let ss: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok((ss / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cohort {
    Poor,
    Good,
    Best,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Poor => "poor",
            Cohort::Good => "good",
            Cohort::Best => "best",
        }
    }
}

/// Dice-band label on the fraction scale. The integer percent thresholds
/// (<=50 poor, 51-80 good, >=81 best) map to half-open fraction intervals
/// [0, 0.505), [0.505, 0.805), [0.805, 1].
pub fn cohort_label(dice: f64) -> Cohort {
    if dice < 0.505 {
        Cohort::Poor
    } else if dice < 0.805 {
        Cohort::Good
    } else {
        Cohort::Best
    }
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub r2: f64,
    pub pcc: f64,
    pub rmse: f64,
    pub n: usize,
    pub poor: usize,
    pub good: usize,
    pub best: usize,
}

/// Full regression report for true-vs-predicted Dice pairs. Cohort counts are
/// taken over the true Dice values.
pub fn metric_report(y_true: &[f64], y_pred: &[f64]) -> Result<MetricReport> {
    let mut counts = [0usize; 3];
    for &t in y_true {
        counts[match cohort_label(t) {
            Cohort::Poor => 0,
            Cohort::Good => 1,
            Cohort::Best => 2,
        }] += 1;
    }
    Ok(MetricReport {
        r2: r2(y_true, y_pred)?,
        pcc: pcc(y_true, y_pred)?,
        rmse: rmse(y_true, y_pred)?,
        n: y_true.len(),
        poor: counts[0],
        good: counts[1],
        best: counts[2],
    })
}

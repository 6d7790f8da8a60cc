//! Circular statistics, correlation tables and ROC analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wave::{decode, wrap_angle, CoefficientVector, WaveName, N_WAVES};

const MIN_RESULTANT: f64 = 1e-12;

/// Mean direction `atan2(Σ sin, Σ cos)` in `[0, 2π)`.
pub fn circular_mean(angles: &[f64]) -> Result<f64> {
    if angles.is_empty() {
        return Err(Error::validation("circular mean of an empty sample"));
    }
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let resultant = s.hypot(c) / angles.len() as f64;
    if resultant < MIN_RESULTANT {
        return Err(Error::UndefinedMean(resultant));
    }
    Ok(wrap_angle(s.atan2(c)))
}

/// Circular correlation coefficient of Jammalamadaka and SenGupta.
pub fn circular_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::validation(format!(
            "circular correlation needs equal non-empty samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (circular_mean(a)?, circular_mean(b)?);
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (sx, sy) = ((x - ma).sin(), (y - mb).sin());
        num += sx * sy;
        da += sx * sx;
        db += sy * sy;
    }
    let den = (da * db).sqrt();
    if den == 0.0 {
        return Err(Error::validation("circular correlation undefined: zero spread"));
    }
    Ok(num / den)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation(format!(
            "pearson needs equal samples of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::validation("pearson undefined: zero variance"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// ROC points from the highest threshold down; starts at (0,0), ends at (1,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auroc: f64,
}

/// ROC curve of `scores` against `labels` (true = positive/abnormal).
/// Equal scores form a single step, so ties count one half.
pub fn roc_auroc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc2 = 0.0; // twice the area, in units of n_pos * n_neg
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        auc2 += ((fp - fp0) * (tp + tp0)) as f64;
        thresholds.push(s);
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auroc: auc2 / (2.0 * n_pos as f64 * n_neg as f64),
    })
}

impl RocCurve {
    /// Trapezoidal area under the stored points.
    pub fn trapezoid_area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
            .sum()
    }
}

/// Kind of correlation used for a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Linear,
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    /// `None` for the offset M.
    pub wave: Option<WaveName>,
    pub parameter: String,
    pub kind: CorrelationKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationTable {
    pub fn get(&self, wave: Option<WaveName>, parameter: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.wave == wave && e.parameter == parameter)
            .map(|e| e.value)
    }
}

/// Per-parameter agreement between predicted and reference coefficients:
/// circular correlation for alpha and beta, Pearson for A, omega and M.
pub fn coefficient_correlations(
    predicted: &[CoefficientVector],
    oracle: &[CoefficientVector],
) -> Result<CorrelationTable> {
    if predicted.len() != oracle.len() || predicted.len() < 3 {
        return Err(Error::validation(format!(
            "correlation needs aligned lists of length >= 3, got {} and {}",
            predicted.len(),
            oracle.len()
        )));
    }
    let pred: Vec<_> = predicted.iter().map(decode).collect::<Result<_>>()?;
    let orc: Vec<_> = oracle.iter().map(decode).collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(4 * N_WAVES + 1);
    for name in WaveName::ALL {
        let j = name.index();
        let col = |v: &[crate::wave::FmmBeatParams], f: fn(&crate::wave::FmmWave) -> f64| -> Vec<f64> {
            v.iter().map(|p| f(&p.waves[j])).collect()
        };
        let fields: [(&str, CorrelationKind, fn(&crate::wave::FmmWave) -> f64); 4] = [
            ("A", CorrelationKind::Linear, |w| w.amplitude),
            ("alpha", CorrelationKind::Circular, |w| w.alpha),
            ("beta", CorrelationKind::Circular, |w| w.beta),
            ("omega", CorrelationKind::Linear, |w| w.omega),
        ];
        for (parameter, kind, f) in fields {
            let (x, y) = (col(&pred, f), col(&orc, f));
            let value = match kind {
                CorrelationKind::Linear => pearson(&x, &y)?,
                CorrelationKind::Circular => circular_correlation(&x, &y)?,
            };
            entries.push(CorrelationEntry {
                wave: Some(name),
                parameter: parameter.to_string(),
                kind,
                value,
            });
        }
    }
    let mx: Vec<f64> = pred.iter().map(|p| p.offset).collect();
    let my: Vec<f64> = orc.iter().map(|p| p.offset).collect();
    entries.push(CorrelationEntry {
        wave: None,
        parameter: "M".to_string(),
        kind: CorrelationKind::Linear,
        value: pearson(&mx, &my)?,
    });
    Ok(CorrelationTable { entries })
}

//! Accuracy and fairness metrics on hard predictions.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Aligned true labels, predicted labels and sensitive group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPredictions {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub groups: Vec<usize>,
}

impl GroupedPredictions {
    pub fn new(y_true: Vec<usize>, y_pred: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        if y_true.len() != y_pred.len() || y_true.len() != groups.len() {
            return Err(Error::invalid(format!(
                "length mismatch: y_true {}, y_pred {}, groups {}",
                y_true.len(),
                y_pred.len(),
                groups.len()
            )));
        }
        Ok(Self { y_true, y_pred, groups })
    }

    fn group_count(&self) -> usize {
        self.groups.iter().copied().max().map_or(0, |g| g + 1)
    }

    fn require_binary(&self) -> Result<()> {
        if self.groups.iter().any(|&g| g > 1) {
            return Err(Error::invalid("TPR gap needs a binary sensitive attribute"));
        }
        Ok(())
    }
}

/// `max over labels y and group pairs i != j of |P(Yhat = y | A = i) - P(Yhat = y | A = j)|`.
///
/// Groups are the ids `0..=max(groups)`; every one of them must be non-empty.
pub fn demographic_parity_gap(gp: &GroupedPredictions) -> Result<f64> {
    let k = gp.group_count();
    if k < 2 {
        return Err(Error::invalid("demographic parity needs at least two groups"));
    }
    let mut sizes = vec![0usize; k];
    gp.groups.iter().for_each(|&g| sizes[g] += 1);
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyGroup { group: g });
    }
    let labels: BTreeSet<usize> = gp.y_true.iter().chain(&gp.y_pred).copied().collect();
    let mut gap: f64 = 0.0;
    for &y in &labels {
        let mut hits = vec![0usize; k];
        for (&p, &g) in gp.y_pred.iter().zip(&gp.groups) {
            if p == y {
                hits[g] += 1;
            }
        }
        let rates: Vec<f64> = hits.iter().zip(&sizes).map(|(&h, &s)| h as f64 / s as f64).collect();
        for i in 0..k {
            for j in i + 1..k {
                gap = gap.max((rates[i] - rates[j]).abs());
            }
        }
    }
    Ok(gap)
}

fn tpr(gp: &GroupedPredictions, class: usize, group: usize) -> Result<f64> {
    let mut pos = 0usize;
    let mut hit = 0usize;
    for ((&t, &p), &g) in gp.y_true.iter().zip(&gp.y_pred).zip(&gp.groups) {
        if g == group && t == class {
            pos += 1;
            if p == class {
                hit += 1;
            }
        }
    }
    if pos == 0 {
        return Err(Error::ClassAbsent { class, group });
    }
    Ok(hit as f64 / pos as f64)
}

/// Signed `TPR(group 0, class) - TPR(group 1, class)`.
pub fn tpr_gap(gp: &GroupedPredictions, class: usize) -> Result<f64> {
    gp.require_binary()?;
    Ok(tpr(gp, class, 0)? - tpr(gp, class, 1)?)
}

/// Root mean square of per-class TPR gaps over the classes present in `y_true`,
/// as a fraction.
pub fn gap_rms(gp: &GroupedPredictions) -> Result<f64> {
    gp.require_binary()?;
    let classes: BTreeSet<usize> = gp.y_true.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::invalid("GAP of an empty sample"));
    }
    let mut sq = 0.0;
    for &c in &classes {
        let g = tpr_gap(gp, c)?;
        sq += g * g;
    }
    Ok((sq / classes.len() as f64).sqrt())
}

pub fn error_rate(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("error rate of an empty sample"));
    }
    let wrong = y_true.iter().zip(y_pred).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / y_true.len() as f64)
}

//! Quadratic weighted kappa, confusion accounting and model evaluation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hvit::{predict_isup, HierarchicalVit, Masking, SlideSample};

pub const NUM_ISUP_CLASSES: usize = 6;

/// Kappa value plus whether the expected-disagreement denominator vanished
/// (both marginals on one identical class), in which case the value is 1.0
/// by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    pub degenerate: bool,
}

fn check_labels(y_true: &[u8], y_pred: &[u8], num_classes: usize) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "label lists differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Empty("label list"));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("kappa needs at least two classes".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&v| v as usize >= num_classes) {
        return Err(Error::InvalidArgument(alloc::format!(
            "label {bad} outside 0..{num_classes}"
        )));
    }
    Ok(())
}

/// Kappa from an observed count matrix (rows true, columns predicted).
fn kappa_from_counts(observed: &[u64], k: usize) -> Kappa {
    let total: u64 = observed.iter().sum();
    let mut row = vec![0u64; k];
    let mut col = vec![0u64; k];
    for i in 0..k {
        for j in 0..k {
            row[i] += observed[i * k + j];
            col[j] += observed[i * k + j];
        }
    }
    let norm = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / norm;
            num += w * observed[i * k + j] as f64;
            den += w * (row[i] as f64 * col[j] as f64 / total as f64);
        }
    }
    if den == 0.0 {
        Kappa {
            value: 1.0,
            degenerate: true,
        }
    } else {
        Kappa {
            value: 1.0 - num / den,
            degenerate: false,
        }
    }
}

/// Quadratic weighted kappa with the degenerate-case flag.
pub fn weighted_kappa(y_true: &[u8], y_pred: &[u8], num_classes: usize) -> Result<Kappa> {
    check_labels(y_true, y_pred, num_classes)?;
    let mut observed = vec![0u64; num_classes * num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        observed[t as usize * num_classes + p as usize] += 1;
    }
    Ok(kappa_from_counts(&observed, num_classes))
}

/// `1 - sum(w O) / sum(w E)` with `w_ij = (i-j)^2 / (K-1)^2` and `E` the
/// outer product of the marginals scaled to the total of `O`.
pub fn quadratic_weighted_kappa(y_true: &[u8], y_pred: &[u8], num_classes: usize) -> Result<f64> {
    weighted_kappa(y_true, y_pred, num_classes).map(|k| k.value)
}

/// 6x6 ISUP confusion counts, rows true grade, columns predicted grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_ISUP_CLASSES]; NUM_ISUP_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_labels(y_true: &[u8], y_pred: &[u8]) -> Result<Self> {
        check_labels(y_true, y_pred, NUM_ISUP_CLASSES)?;
        let mut cm = Self::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            cm.counts[t as usize][p as usize] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn kappa(&self) -> Kappa {
        let flat: Vec<u64> = self.counts.iter().flatten().copied().collect();
        kappa_from_counts(&flat, NUM_ISUP_CLASSES)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: u8,
    pub logit: f64,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub kappa: Kappa,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<SlidePrediction>,
}

/// Predicts every slide and scores the decoded grades against labels.
pub fn evaluate(model: &HierarchicalVit, dataset: &[SlideSample], masking: Masking) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let predictions = dataset
        .iter()
        .map(|s| {
            let logit = model.logit(s, masking)?;
            Ok(SlidePrediction {
                slide_id: s.slide_id.clone(),
                label: s.label,
                logit,
                score: predict_isup(logit),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let y_true: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let y_pred: Vec<u8> = predictions.iter().map(|p| p.score).collect();
    let confusion = ConfusionMatrix::from_labels(&y_true, &y_pred)?;
    Ok(Evaluation {
        kappa: confusion.kappa(),
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let y = [0, 1, 2, 3, 4, 5, 2];
        assert_eq!(quadratic_weighted_kappa(&y, &y, 6).unwrap(), 1.0);
    }

    #[test]
    fn reversed_labels_are_fully_negative() {
        // sum(wO) = 70/25, sum(wE) = 210/(6*25) = 35/25, so kappa = 1 - 2
        let t = [0, 1, 2, 3, 4, 5];
        let p = [5, 4, 3, 2, 1, 0];
        let k = quadratic_weighted_kappa(&t, &p, 6).unwrap();
        assert!((k + 1.0).abs() < 1e-12, "{k}");
    }

    #[test]
    fn degenerate_single_class() {
        let k = weighted_kappa(&[2, 2, 2], &[2, 2, 2], 6).unwrap();
        assert_eq!(k, Kappa { value: 1.0, degenerate: true });
    }

    #[test]
    fn errors() {
        assert!(quadratic_weighted_kappa(&[0, 1], &[0], 6).is_err());
        assert!(quadratic_weighted_kappa(&[], &[], 6).is_err());
        assert!(quadratic_weighted_kappa(&[0, 6], &[0, 1], 6).is_err());
    }

    #[test]
    fn confusion_totals() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 1, 5], &[0, 2, 1, 5]).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.counts[1][2], 1);
        assert_eq!(
            cm.kappa().value,
            quadratic_weighted_kappa(&[0, 1, 1, 5], &[0, 2, 1, 5], 6).unwrap()
        );
    }
}

//! Top-1 and class-mean accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CalibrationSet, Network};
use crate::quant::QuantizedModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps a batch to class logits.
pub trait Classifier<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Classifier<T> for Network<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x)
    }
}

impl<T: Scalar> Classifier<T> for QuantizedModel<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// Accuracy within each class; `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-class accuracies over present classes.
    pub mean_class_accuracy: f64,
    pub samples: usize,
}

/// Accuracy of argmax predictions against `labels`.
pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<AccuracyReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    let mut correct = 0;
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= class_count {
            return Err(Error::InvalidArgument(format!("label {l} outside {class_count} classes")));
        }
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
            correct += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(AccuracyReport {
        accuracy: correct as f64 / labels.len() as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        samples: labels.len(),
    })
}

pub fn evaluate_model<T: Scalar>(model: &dyn Classifier<T>, test: &CalibrationSet<T>) -> Result<AccuracyReport> {
    let logits = model.classify(&test.inputs)?;
    accuracy_from_predictions(&logits.argmax_rows(), &test.labels, test.class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_prediction_is_chance_on_balanced_data() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let r = accuracy_from_predictions(&[2; 100], &labels, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0), Some(1.0), Some(0.0)]);
        assert_eq!(r.mean_class_accuracy, 0.25);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let r = accuracy_from_predictions(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean_class_accuracy, 0.75);
        assert!(accuracy_from_predictions(&[0], &[5], 3).is_err());
    }
}

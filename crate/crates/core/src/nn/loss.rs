use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `labels` under row-wise probabilities
/// `outputs` (shape `[B, classes]`).
///
/// A true-class probability of zero (or below [`PROBABILITY_FLOOR`]) is
/// clamped to the floor instead of producing an infinite loss.
pub fn cross_entropy_loss(outputs: &Tensor, labels: &[usize]) -> f64 {
    let classes = outputs.row_len();
    let batch = outputs.shape()[0];
    assert_eq!(batch, labels.len(), "label count must match batch size");
    let mut total = 0.0;
    for (row, &label) in outputs.data().chunks_exact(classes).zip(labels) {
        debug_assert!(
            (row.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "cross-entropy expects probability rows"
        );
        total -= row[label].max(PROBABILITY_FLOOR).ln();
    }
    total / batch as f64
}

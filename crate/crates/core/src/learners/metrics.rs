use super::LearnError;

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(y: &[f64], predicted: &[f64]) -> Result<f64, LearnError> {
    if y.is_empty() || y.len() != predicted.len() {
        return Err(LearnError::EmptyData);
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(LearnError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(predicted).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// F1 score of the positive class (label 1).
pub fn f1_score(truth: &[f64], predicted: &[f64]) -> Result<f64, LearnError> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(LearnError::EmptyData);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (t, p) in truth.iter().zip(predicted) {
        match (*t == 1.0, *p == 1.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Err(LearnError::UndefinedF1);
    }
    // 2PR / (P + R) written in counts
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Labels from probabilities with a 0.5 cut-off.
pub fn classify(probabilities: &[f64]) -> Vec<f64> {
    probabilities.iter().map(|p| f64::from(u8::from(*p > 0.5))).collect()
}

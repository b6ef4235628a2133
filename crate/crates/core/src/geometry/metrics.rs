use crate::error::{invalid, Result};

/// Normalized area under the recall-vs-error curve up to `threshold`.
///
/// Errors are sorted ascending and the curve starts at `(0, 0)`; recall
/// steps to `(i+1)/n` at the i-th error and is held constant up to the
/// threshold. The curve is integrated with the trapezoid rule. Failures
/// are encoded as `+∞` and never count as recalled.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(invalid!("AUC of an empty error list"));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(invalid!("AUC threshold must be positive, got {threshold}"));
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(invalid!("errors must be non-negative numbers or +inf"));
    }
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, &v) in e.iter().enumerate() {
        if v >= threshold {
            break;
        }
        xs.push(v);
        ys.push((i + 1) as f64 / n);
    }
    xs.push(threshold);
    ys.push(*ys.last().unwrap());
    let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    Ok((area / threshold).clamp(0.0, 1.0))
}

/// AUC at each threshold.
pub fn auc_table(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    thresholds.iter().map(|&t| auc(errors, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases() {
        assert_eq!(auc(&[0.0; 4], 5.0).unwrap(), 1.0);
        assert_eq!(auc(&[6.0, f64::INFINITY], 5.0).unwrap(), 0.0);
        assert!(auc(&[], 5.0).is_err());
    }

    #[test]
    fn regression_value() {
        // recall 1/3 at 1, 2/3 at 3, held to 5:
        // (1·1/3)/2 + 2·(1/3+2/3)/2 + 2·2/3 = 2.5, over 5
        assert!((auc(&[1.0, 3.0, 7.0], 5.0).unwrap() - 0.5).abs() < 1e-12);
    }
}

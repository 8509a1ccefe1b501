use super::MetricsError;

/// Shannon entropy in nats of `row` renormalized to sum 1.
pub fn attention_entropy(row: &[f64]) -> Result<f64, MetricsError> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricsError::NegativeEntry);
    }
    let total: f64 = row.iter().sum();
    if !(total > 0.0) {
        return Err(MetricsError::ZeroMass);
    }
    Ok(row
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum())
}

//! Forecast scoring: relative RMS error and Pearson correlation.

/// `‖pred − reference‖₂ / ‖reference‖₂`; `None` when the reference is zero.
pub fn relative_rms(pred: &[f64], reference: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), reference.len(), "score inputs differ in length");
    let num: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    let den: f64 = reference.iter().map(|r| r * r).sum();
    (den > 0.0).then(|| (num / den).sqrt())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "score inputs differ in length");
    let n = a.len();
    if n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

use super::tape::{DTensor, Tape};
use super::{DiffError, Result};

/// Compare the AD gradient of a scalar-valued function against central
/// finite differences at `point`. Returns the max relative error over
/// coordinates: |ad - fd| / (|fd| + 1e-12).
pub fn check_gradient<F>(f: F, point: &DTensor, eps: f64) -> Result<f64>
where
    F: Fn(&DTensor) -> Result<DTensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    let tape = Tape::new();
    let x = tape.leaf(point.shape().to_vec(), point.values().to_vec());
    let loss = f(&x)?;
    if !loss.is_scalar() {
        return Err(DiffError::NonScalarLoss(loss.shape().to_vec()));
    }
    // A loss that never touched the tape has zero gradient everywhere.
    let grad = if loss.is_on_tape() {
        tape.backward(&loss)?.wrt(&x)?
    } else {
        DTensor::constant(point.shape().to_vec(), vec![0.0; point.len()])
    };

    let mut max_rel = 0.0_f64;
    for i in 0..point.len() {
        let mut lo = point.values().to_vec();
        let mut hi = lo.clone();
        lo[i] -= eps;
        hi[i] += eps;
        let f_lo = f(&DTensor::constant(point.shape().to_vec(), lo))?.item();
        let f_hi = f(&DTensor::constant(point.shape().to_vec(), hi))?.item();
        if !f_lo.is_finite() || !f_hi.is_finite() {
            return Err(DiffError::NonFinite(i));
        }
        let fd = (f_hi - f_lo) / (2.0 * eps);
        let ad = grad.values()[i];
        if !ad.is_finite() {
            return Err(DiffError::NonFinite(i));
        }
        let rel = (ad - fd).abs() / (fd.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

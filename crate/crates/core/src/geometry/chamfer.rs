use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

/// Symmetric Chamfer distance between two flat [x y z ...] point buffers:
/// the mean squared nearest-neighbor distance in each direction, summed.
/// Means (not sums) keep the value comparable across resolutions.
pub fn chamfer_value<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Geometry("chamfer: empty point set".into()));
    }
    let n = a.len() / 3;
    let m = b.len() / 3;
    let a2b: f64 = kernels::min_sqdist(a, b)
        .iter()
        .map(|&(d, _)| d.as_f64())
        .sum::<f64>()
        / n as f64;
    let b2a: f64 = kernels::min_sqdist(b, a)
        .iter()
        .map(|&(d, _)| d.as_f64())
        .sum::<f64>()
        / m as f64;
    Ok(a2b + b2a)
}

/// Differentiable Chamfer distance between two n x 3 tensors already on
/// the tape, built from the squared-distance matrix with hard min
/// selection in each direction.
pub fn chamfer_graph<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sqdist_matrix(a, b)?;
    let a2b = tape.min_rows(d)?;
    let a2b = tape.reduce_mean(a2b);
    let b2a = tape.min_cols(d)?;
    let b2a = tape.reduce_mean(b2a);
    tape.add(a2b, b2a)
}

//! Discrete error norms over spatiotemporal grids.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

fn check_shapes(truth: ArrayView2<'_, f64>, estimate: ArrayView2<'_, f64>) -> Result<()> {
    if truth.dim() != estimate.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", truth.dim()),
            found: format!("{:?}", estimate.dim()),
        });
    }
    Ok(())
}

/// `||truth - estimate||_2 / ||truth||_2` over all grid cells.
pub fn relative_l2_error(truth: ArrayView2<'_, f64>, estimate: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(truth, estimate)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in truth.iter().zip(estimate.iter()) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    if den == 0.0 {
        return Err(Error::DegenerateField);
    }
    Ok((num / den).sqrt())
}

/// Mean squared cell difference, i.e. the squared L2 distance on the unit
/// square by midpoint quadrature.
pub fn squared_l2_error(truth: ArrayView2<'_, f64>, estimate: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(truth, estimate)?;
    let n = truth.len().max(1) as f64;
    Ok(truth
        .iter()
        .zip(estimate.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean absolute cell difference (discrete L1 on the unit square).
pub fn l1_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n)
}

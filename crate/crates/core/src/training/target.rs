use crate::annotation::Point;
use crate::convnet::GridMeta;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unnormalized Gaussian bumps (peak 1) at each joint, sampled at the cell
/// centres of `grid`. `sigma` is in input pixels. Missing joints give
/// all-zero maps.
pub fn make_target<T: Scalar>(
    joints: &[Option<Point>],
    grid: &GridMeta,
    rows: usize,
    cols: usize,
    sigma: f64,
) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "target sigma must be positive, got {sigma}"
        )));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = Tensor::zeros(&[joints.len(), rows, cols]);
    for (j, joint) in joints.iter().enumerate() {
        let Some([px, py]) = *joint else { continue };
        for y in 0..rows {
            for x in 0..cols {
                let (cy, cx) = grid.cell_center(y, x);
                let d2 = (cx - px).powi(2) + (cy - py).powi(2);
                *out.at3_mut(j, y, x) = T::of((-d2 * inv).exp());
            }
        }
    }
    Ok(out)
}

/// Mean squared error over every cell of every map and its gradient
/// `2 (pred - target) / N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.check_same_shape(target, "mse_loss")?;
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        sum += d * d;
        grad.push(T::of(2.0 * d / n));
    }
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

use crate::convnet::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Nesterov momentum state: learning rate, momentum and one velocity per
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: ModelParams<T>,
    pub steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.zeros_like(),
            steps: 0,
        }
    }
}

/// `theta + mu v`, where the next gradient must be evaluated.
pub fn lookahead<T: Scalar>(
    params: &ModelParams<T>,
    state: &OptimizerState<T>,
) -> Result<ModelParams<T>> {
    let mut out = state.velocity.clone();
    out.scale(T::of(state.momentum));
    out.add_assign(params)?;
    Ok(out)
}

/// `v <- mu v - lr g; theta <- theta + v`, with `g` taken at [`lookahead`].
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let mu = T::of(state.momentum);
    let lr = T::of(state.lr);
    let p = params.tensors();
    let g = grads.tensors();
    let v = state.velocity.tensors();
    if p.len() != g.len() || p.len() != v.len() {
        return Err(Error::invalid("optimizer: parameter count mismatch"));
    }
    for ((a, b), c) in p.iter().zip(&g).zip(&v) {
        a.check_same_shape(b, "gradient")?;
        a.check_same_shape(c, "velocity")?;
    }
    for (vt, gt) in state.velocity.tensors_mut().into_iter().zip(g) {
        for (x, &d) in vt.data_mut().iter_mut().zip(gt.data()) {
            *x = mu * *x - lr * d;
        }
    }
    for (pt, vt) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors())
    {
        for (x, &d) in pt.data_mut().iter_mut().zip(vt.data()) {
            *x += d;
        }
    }
    state.steps += 1;
    Ok(())
}

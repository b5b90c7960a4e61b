//! Central finite-difference audit of every differentiable primitive and a
//! tiny end-to-end network.
//!
//! Each check contracts the output with a fixed random cotangent `r`, so the
//! scalar `L = sum r * f(x)` has analytic gradient `J^T r`. The reported
//! error is `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convnet::{backward, forward_oneshot, forward_with_tape, ModelParams, NetworkConfig};
use crate::error::Result;
use crate::image_ops::Pyramid;
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad, upsample_nearest,
    upsample_nearest_grad, Tensor,
};
use crate::training::mse_loss;

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Names of the primitives that can be faulted in [`run_gradcheck`].
pub const FAULT_TARGETS: [&str; 6] = [
    "conv2d",
    "maxpool2",
    "relu",
    "upsample_nearest",
    "mse_loss",
    "network",
];

fn contract<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> f64 {
    r.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-30);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    GradCheck {
        name,
        max_rel_error: worst / scale,
        tolerance: DEFAULT_TOLERANCE,
        entries: analytic.len(),
    }
}

/// Numeric gradient of `f` with respect to every entry of `x`.
fn numeric<T: Scalar>(x: &Tensor<T>, eps: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::of(orig.as_f64() + eps);
            let up = f(&probe);
            probe.data_mut()[i] = T::of(orig.as_f64() - eps);
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            // Divide by the perturbation actually representable in T.
            let step = T::of(orig.as_f64() + eps).as_f64() - T::of(orig.as_f64() - eps).as_f64();
            (up - down) / step
        })
        .collect()
}

fn faulted(mut g: Vec<f64>, on: bool) -> Vec<f64> {
    if on {
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(first) = g.first_mut() {
            *first += 0.1 * scale + 1.0;
        }
    }
    g
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn primitive_checks<T: Scalar>(
    rng: &mut ChaCha8Rng,
    eps: f64,
    fault: Option<&str>,
    out: &mut Vec<GradCheck>,
) {
    let tag = T::NAME;
    let hit = |p: &str| fault == Some(p);

    for stride in [1usize, 2] {
        let x: Tensor<T> = random(rng, &[2, 7, 8]);
        let k: Tensor<T> = random(rng, &[3, 2, 3, 3]);
        let b: Tensor<T> = random(rng, &[3]);
        let y = conv2d(&x, &k, &b, stride).expect("valid conv");
        let r: Tensor<T> = random(rng, y.shape());
        let g = conv2d_grad(&x, &k, &r, stride).expect("valid conv grad");
        let name = |what: &str| format!("conv2d.{what}[stride {stride}, {tag}]");
        let nx = numeric(&x, eps, |p| {
            contract(&r, &conv2d(p, &k, &b, stride).unwrap())
        });
        out.push(compare(
            name("input"),
            &faulted(to_f64(&g.input), hit("conv2d")),
            &nx,
        ));
        let nk = numeric(&k, eps, |p| {
            contract(&r, &conv2d(&x, p, &b, stride).unwrap())
        });
        out.push(compare(name("kernel"), &to_f64(&g.kernel), &nk));
        let nb = numeric(&b, eps, |p| {
            contract(&r, &conv2d(&x, &k, p, stride).unwrap())
        });
        out.push(compare(name("bias"), &to_f64(&g.bias), &nb));
    }

    // Distinct values spaced well beyond 2*eps, so no perturbation reorders a pool block.
    let mut vals: Vec<f64> = (0..2 * 6 * 8).map(|i| (i as f64 - 48.0) * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(vec![2, 6, 8], vals.iter().map(|&v| T::of(v)).collect()).unwrap();
    let (y, idx) = maxpool2(&x).unwrap();
    let r: Tensor<T> = random(rng, y.shape());
    let a = maxpool2_grad(&idx, &r).unwrap();
    let n = numeric(&x, eps, |p| contract(&r, &maxpool2(p).unwrap().0));
    out.push(compare(
        format!("maxpool2[{tag}]"),
        &faulted(to_f64(&a), hit("maxpool2")),
        &n,
    ));

    // Keep inputs away from the kink at zero.
    let x = Tensor::from_fn(&[2, 5, 5], |_| {
        let m = rng.gen_range(0.1..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    });
    let r: Tensor<T> = random(rng, x.shape());
    let a = relu_grad(&x, &r).unwrap();
    let n = numeric(&x, eps, |p| contract(&r, &relu(p)));
    out.push(compare(
        format!("relu[{tag}]"),
        &faulted(to_f64(&a), hit("relu")),
        &n,
    ));

    let x: Tensor<T> = random(rng, &[2, 3, 4]);
    let r: Tensor<T> = random(rng, &[2, 6, 8]);
    let a = upsample_nearest_grad(&r, 2).unwrap();
    let n = numeric(&x, eps, |p| contract(&r, &upsample_nearest(p, 2).unwrap()));
    out.push(compare(
        format!("upsample_nearest[{tag}]"),
        &faulted(to_f64(&a), hit("upsample_nearest")),
        &n,
    ));

    let p0: Tensor<T> = random(rng, &[2, 4, 4]);
    let t: Tensor<T> = random(rng, &[2, 4, 4]);
    let (_, a) = mse_loss(&p0, &t).unwrap();
    let n = numeric(&p0, eps, |p| mse_loss(p, &t).unwrap().0);
    out.push(compare(
        format!("mse_loss[{tag}]"),
        &faulted(to_f64(&a), hit("mse_loss")),
        &n,
    ));
}

/// Window-16, one-pool, two-feature network.
pub fn tiny_config(banks: usize) -> NetworkConfig {
    NetworkConfig {
        conv_features: 2,
        banks,
        joints: 2,
        fc_widths: [3, 3],
        input_channels: 2,
        stage_kernels: vec![3, 3],
        pools: 1,
        trunk_kernel: 5,
    }
}

fn network_check(banks: usize, rng: &mut ChaCha8Rng, fault: bool) -> Result<GradCheck> {
    let cfg = tiny_config(banks);
    let mut params: ModelParams<f64> = ModelParams::build(&cfg, rng)?;
    // Nonzero biases keep pre-activations off the ReLU kink, where the
    // central difference sees half a slope.
    for layer in params
        .banks
        .iter_mut()
        .flatten()
        .chain(params.trunk.iter_mut())
    {
        layer.bias = random(rng, layer.bias.shape());
        layer.bias.scale(0.3);
    }
    let side = cfg.context() + 2 * cfg.stride_out();
    let pyr = Pyramid::from_banks(
        (0..banks)
            .map(|k| random::<f64>(rng, &[cfg.input_channels, side >> k, side >> k]))
            .collect(),
    )?;
    let (out, tape) = forward_with_tape(&params, &pyr)?;
    let r: Tensor<f64> = random(rng, out.maps.shape());
    let grads = backward(&params, &tape, &r)?;
    let mut analytic = Vec::new();
    let mut num = Vec::new();
    let count = params.tensors().len();
    for t in 0..count {
        let base = params.tensors()[t].clone();
        let n = numeric(&base, 1e-6, |p| {
            let mut q = params.clone();
            *q.tensors_mut()[t] = p.clone();
            contract(&r, &forward_oneshot(&q, &pyr).unwrap().maps)
        });
        let a = to_f64(grads.tensors()[t]);
        analytic.extend(a);
        num.extend(n);
    }
    Ok(compare(
        format!("network[banks {banks}, f64]"),
        &faulted(analytic, fault),
        &num,
    ))
}

/// Runs every check. `fault` names one entry of [`FAULT_TARGETS`] whose
/// analytic gradient is deliberately corrupted.
pub fn run_gradcheck(seed: u64, fault: Option<&str>) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    primitive_checks::<f64>(&mut rng, 1e-6, fault, &mut out);
    primitive_checks::<f32>(&mut rng, 1e-3, fault, &mut out);
    for banks in [1, 2] {
        out.push(network_check(banks, &mut rng, fault == Some("network"))?);
    }
    Ok(out)
}

//! Forward and backward passes.
//!
//! The one-shot path evaluates every output cell of an image at once. Coarse
//! banks are handled by splitting the output grid into `2^k x 2^k` phases:
//! each phase runs the bank stack once on its own crop, and the upsample +
//! trunk convolution collapses into a convolution with a folded kernel
//! whose taps sum the trunk taps that read the same coarse unit. The
//! patchwise path does the literal per-window computation and exists as a
//! reference.

use crate::error::{Error, Result};
use crate::image_ops::Pyramid;
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_grad, conv2d_grad_params, maxpool2, maxpool2_grad, relu, relu_grad,
    upsample_nearest, upsample_nearest_grad, PoolIndices, Tensor,
};

use super::config::{Layer, ModelParams, NetworkConfig};

/// Placement of response cells in input coordinates.
///
/// Cell `(y, x)` is centered at continuous position
/// `(origin_y + stride * y, origin_x + stride * x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMeta {
    pub stride: usize,
    pub origin_y: f64,
    pub origin_x: f64,
}

impl GridMeta {
    pub fn cell_center(&self, y: usize, x: usize) -> (f64, f64) {
        (
            self.origin_y + (self.stride * y) as f64,
            self.origin_x + (self.stride * x) as f64,
        )
    }

    /// Shifts the origin, e.g. to undo input padding.
    pub fn offset(&self, dy: f64, dx: f64) -> Self {
        Self {
            origin_y: self.origin_y + dy,
            origin_x: self.origin_x + dx,
            ..*self
        }
    }
}

/// Per-joint response maps `[J, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMaps<T> {
    pub maps: Tensor<T>,
    pub grid: GridMeta,
}

impl<T: Scalar> ResponseMaps<T> {
    pub fn joints(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn cast<U: Scalar>(&self) -> ResponseMaps<U> {
        ResponseMaps {
            maps: self.maps.cast(),
            grid: self.grid,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BankGeom {
    /// Decimation `2^k`.
    factor: usize,
    /// Input-pixel offset that centers this bank's units on the finest ones.
    margin: usize,
    /// Coarse units read by one window.
    taps: usize,
}

impl NetworkConfig {
    fn bank_geom(&self, k: usize) -> BankGeom {
        let factor = 1 << k;
        BankGeom {
            factor,
            margin: (factor - 1) * self.stage_receptive_field() / 2,
            taps: (self.trunk_kernel - 1) / factor + 1,
        }
    }

    /// Input pixels before the finest-bank window that coarser banks read.
    pub fn margin(&self) -> usize {
        self.bank_geom(self.banks - 1).margin
    }

    /// Input extent consumed by one output cell across all banks.
    pub fn context(&self) -> usize {
        let rs = self.stage_receptive_field();
        let s = self.stride_out();
        let m = self.margin();
        (0..self.banks)
            .map(|k| {
                let g = self.bank_geom(k);
                m - g.margin + g.factor * (rs + s * (g.taps - 1))
            })
            .max()
            .expect("banks >= 1")
    }

    /// Output cells along an input axis of `len` pixels.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let c = self.context();
        (len >= c).then(|| (len - c) / self.stride_out() + 1)
    }

    /// Grid placement for outputs computed on an unpadded input.
    pub fn grid(&self) -> GridMeta {
        let c = (self.margin() + self.window() / 2) as f64;
        GridMeta {
            stride: self.stride_out(),
            origin_y: c,
            origin_x: c,
        }
    }

    /// Border to pad on each side so cell `(y, x)` centers on input point
    /// `(stride*y + stride/2, stride*x + stride/2)`.
    pub fn centering_pad(&self) -> usize {
        self.margin() + self.window() / 2 - self.stride_out() / 2
    }

    /// Bank-`k` crop origin (bank pixels) for output cell `o` along one axis.
    fn bank_origin(&self, k: usize, o: usize) -> usize {
        let g = self.bank_geom(k);
        (self.stride_out() * o + self.margin() - g.margin) / g.factor
    }

    /// Bank-`k` crop length (bank pixels) yielding `units` stack outputs.
    fn bank_span(&self, units: usize) -> usize {
        self.stage_receptive_field() + self.stride_out() * (units - 1)
    }
}

struct StageTape<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    pool: Option<PoolIndices>,
}

fn stack_forward<T: Scalar>(
    layers: &[Layer<T>],
    pools: usize,
    input: Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Vec<StageTape<T>>)> {
    let mut x = input;
    let mut tape = Vec::new();
    for (s, layer) in layers.iter().enumerate() {
        let pre = conv2d(&x, &layer.kernel, &layer.bias, 1)?;
        let act = relu(&pre);
        let (out, pool) = if s < pools {
            let (p, idx) = maxpool2(&act)?;
            (p, Some(idx))
        } else {
            (act, None)
        };
        if keep {
            tape.push(StageTape {
                input: std::mem::replace(&mut x, out),
                pre,
                pool,
            });
        } else {
            x = out;
        }
    }
    Ok((x, tape))
}

fn stack_backward<T: Scalar>(
    layers: &[Layer<T>],
    tape: &[StageTape<T>],
    grad_out: Tensor<T>,
    grads: &mut [Layer<T>],
) -> Result<()> {
    let mut g = grad_out;
    for s in (0..layers.len()).rev() {
        let st = &tape[s];
        if let Some(idx) = &st.pool {
            g = maxpool2_grad(idx, &g)?;
        }
        g = relu_grad(&st.pre, &g)?;
        if s > 0 {
            let cg = conv2d_grad(&st.input, &layers[s].kernel, &g, 1)?;
            grads[s].kernel.add_assign(&cg.kernel)?;
            grads[s].bias.add_assign(&cg.bias)?;
            g = cg.input;
        } else {
            let (kg, bg) = conv2d_grad_params(&st.input, &layers[s].kernel, &g, 1)?;
            grads[s].kernel.add_assign(&kg)?;
            grads[s].bias.add_assign(&bg)?;
        }
    }
    Ok(())
}

/// Trunk taps of bank `k` summed over the taps that read the same coarse
/// unit: `V[j] = sum_{m : m / factor == j} W[m]`.
fn fold_kernel<T: Scalar>(cfg: &NetworkConfig, w: &Tensor<T>, k: usize) -> Tensor<T> {
    let g = cfg.bank_geom(k);
    let (f, t) = (cfg.conv_features, cfg.trunk_kernel);
    let fc1 = w.shape()[0];
    let cin = w.shape()[1];
    let mut v = Tensor::zeros(&[fc1, f, g.taps, g.taps]);
    let vd = v.data_mut();
    let wd = w.data();
    for o in 0..fc1 {
        for c in 0..f {
            let wbase = (o * cin + k * f + c) * t * t;
            let vbase = (o * f + c) * g.taps * g.taps;
            for my in 0..t {
                for mx in 0..t {
                    vd[vbase + (my / g.factor) * g.taps + mx / g.factor] += wd[wbase + my * t + mx];
                }
            }
        }
    }
    v
}

/// Adjoint of [`fold_kernel`], accumulated into the full trunk gradient.
fn unfold_grad<T: Scalar>(cfg: &NetworkConfig, gv: &Tensor<T>, k: usize, gw: &mut Tensor<T>) {
    let g = cfg.bank_geom(k);
    let (f, t) = (cfg.conv_features, cfg.trunk_kernel);
    let fc1 = gw.shape()[0];
    let cin = gw.shape()[1];
    let gvd = gv.data();
    let gwd = gw.data_mut();
    for o in 0..fc1 {
        for c in 0..f {
            let wbase = (o * cin + k * f + c) * t * t;
            let vbase = (o * f + c) * g.taps * g.taps;
            for my in 0..t {
                for mx in 0..t {
                    gwd[wbase + my * t + mx] +=
                        gvd[vbase + (my / g.factor) * g.taps + mx / g.factor];
                }
            }
        }
    }
}

/// `dst[:, py + f*i, px + f*j] += src[:, i, j]`
fn scatter_add<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, py: usize, px: usize, f: usize) {
    let (c, h, w) = dst.dims3().expect("3-d");
    let (_, sh, sw) = src.dims3().expect("3-d");
    let dd = dst.data_mut();
    let sd = src.data();
    for ch in 0..c {
        for i in 0..sh {
            let drow = (ch * h + py + f * i) * w + px;
            let srow = (ch * sh + i) * sw;
            for j in 0..sw {
                dd[drow + f * j] += sd[srow + j];
            }
        }
    }
}

/// `out[:, i, j] = src[:, py + f*i, px + f*j]`
fn gather<T: Scalar>(
    src: &Tensor<T>,
    py: usize,
    px: usize,
    f: usize,
    rows: usize,
    cols: usize,
) -> Tensor<T> {
    let (c, h, w) = src.dims3().expect("3-d");
    let sd = src.data();
    let mut out = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        for i in 0..rows {
            let row = (ch * h + py + f * i) * w + px;
            out.extend((0..cols).map(|j| sd[row + f * j]));
        }
    }
    Tensor::new(vec![c, rows, cols], out).expect("sized")
}

struct PhaseTape<T> {
    k: usize,
    py: usize,
    px: usize,
    stages: Vec<StageTape<T>>,
    features: Tensor<T>,
}

/// Intermediate values needed by [`backward`].
pub struct Tape<T> {
    rows: usize,
    cols: usize,
    phases: Vec<PhaseTape<T>>,
    folded: Vec<Tensor<T>>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    pre2: Tensor<T>,
    act2: Tensor<T>,
}

fn check_input<T: Scalar>(cfg: &NetworkConfig, input: &Pyramid<T>) -> Result<(usize, usize)> {
    if input.num_banks() != cfg.banks {
        return Err(Error::invalid(format!(
            "pyramid has {} banks, network expects {}",
            input.num_banks(),
            cfg.banks
        )));
    }
    let (c, h, w) = input.extents();
    if c != cfg.input_channels {
        return Err(Error::invalid(format!(
            "input has {c} channels, network expects {}",
            cfg.input_channels
        )));
    }
    match (cfg.output_len(h), cfg.output_len(w)) {
        (Some(r), Some(q)) => Ok((r, q)),
        _ => Err(Error::invalid(format!(
            "input {h}x{w} smaller than the {0}x{0} context",
            cfg.context()
        ))),
    }
}

fn forward_impl<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
    keep: bool,
) -> Result<(ResponseMaps<T>, Option<Tape<T>>)> {
    let cfg = params.config();
    let (rows, cols) = check_input(cfg, input)?;
    let fc1 = cfg.fc_widths[0];
    let mut pre1 = Tensor::zeros(&[fc1, rows, cols]);
    let mut phases = Vec::new();
    let mut folded = Vec::with_capacity(cfg.banks);
    let zero_bias = Tensor::zeros(&[fc1]);
    for k in 0..cfg.banks {
        let g = cfg.bank_geom(k);
        let v = fold_kernel(cfg, &params.trunk[0].kernel, k);
        for py in 0..g.factor.min(rows) {
            let qy = (rows - 1 - py) / g.factor + 1;
            for px in 0..g.factor.min(cols) {
                let qx = (cols - 1 - px) / g.factor + 1;
                let crop = input.bank(k).crop3(
                    cfg.bank_origin(k, py),
                    cfg.bank_origin(k, px),
                    cfg.bank_span(qy + g.taps - 1),
                    cfg.bank_span(qx + g.taps - 1),
                )?;
                let (features, stages) = stack_forward(&params.banks[k], cfg.pools, crop, keep)?;
                let contrib = conv2d(&features, &v, &zero_bias, 1)?;
                scatter_add(&mut pre1, &contrib, py, px, g.factor);
                if keep {
                    phases.push(PhaseTape {
                        k,
                        py,
                        px,
                        stages,
                        features,
                    });
                }
            }
        }
        folded.push(v);
    }
    add_bias(&mut pre1, &params.trunk[0].bias);
    pre1.ensure_finite("trunk")?;
    let act1 = relu(&pre1);
    let pre2 = conv2d(&act1, &params.trunk[1].kernel, &params.trunk[1].bias, 1)?;
    let act2 = relu(&pre2);
    let maps = conv2d(&act2, &params.trunk[2].kernel, &params.trunk[2].bias, 1)?;
    let out = ResponseMaps {
        maps,
        grid: cfg.grid(),
    };
    let tape = keep.then(|| Tape {
        rows,
        cols,
        phases,
        folded,
        pre1,
        act1,
        pre2,
        act2,
    });
    Ok((out, tape))
}

fn add_bias<T: Scalar>(t: &mut Tensor<T>, bias: &Tensor<T>) {
    let (c, h, w) = t.dims3().expect("3-d");
    let plane = h * w;
    let d = t.data_mut();
    for ch in 0..c {
        let b = bias.data()[ch];
        d[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

/// Dense response maps for every window position of the input.
pub fn forward_oneshot<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
) -> Result<ResponseMaps<T>> {
    Ok(forward_impl(params, input, false)?.0)
}

/// [`forward_oneshot`] that also records what [`backward`] needs.
pub fn forward_with_tape<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
) -> Result<(ResponseMaps<T>, Tape<T>)> {
    let (out, tape) = forward_impl(params, input, true)?;
    Ok((out, tape.expect("kept")))
}

/// Parameter gradients for cotangent `grad_maps` on the outputs.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    grad_maps: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let cfg = params.config();
    let expected = [cfg.joints, tape.rows, tape.cols];
    if grad_maps.shape() != expected {
        return Err(Error::invalid(format!(
            "gradient shape {:?}, expected {expected:?}",
            grad_maps.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let c3 = conv2d_grad(&tape.act2, &params.trunk[2].kernel, grad_maps, 1)?;
    grads.trunk[2].kernel = c3.kernel;
    grads.trunk[2].bias = c3.bias;
    let g2 = relu_grad(&tape.pre2, &c3.input)?;
    let c2 = conv2d_grad(&tape.act1, &params.trunk[1].kernel, &g2, 1)?;
    grads.trunk[1].kernel = c2.kernel;
    grads.trunk[1].bias = c2.bias;
    let g1 = relu_grad(&tape.pre1, &c2.input)?;
    grads.trunk[0].bias = channel_sums(&g1);

    let mut gfold: Vec<Tensor<T>> = tape
        .folded
        .iter()
        .map(|v| Tensor::zeros(v.shape()))
        .collect();
    for ph in &tape.phases {
        let g = cfg.bank_geom(ph.k);
        let qy = (tape.rows - 1 - ph.py) / g.factor + 1;
        let qx = (tape.cols - 1 - ph.px) / g.factor + 1;
        let gsub = gather(&g1, ph.py, ph.px, g.factor, qy, qx);
        let cg = conv2d_grad(&ph.features, &tape.folded[ph.k], &gsub, 1)?;
        gfold[ph.k].add_assign(&cg.kernel)?;
        stack_backward(
            &params.banks[ph.k],
            &ph.stages,
            cg.input,
            &mut grads.banks[ph.k],
        )?;
    }
    for (k, gv) in gfold.iter().enumerate() {
        unfold_grad(cfg, gv, k, &mut grads.trunk[0].kernel);
    }
    Ok(grads)
}

fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.dims3().expect("3-d");
    let plane = h * w;
    Tensor::from_fn(&[c], |ch| {
        T::of(
            t.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum(),
        )
    })
}

struct WindowTape<T> {
    banks: Vec<(Vec<StageTape<T>>, [usize; 3])>,
    concat: Tensor<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    pre2: Tensor<T>,
    act2: Tensor<T>,
}

fn window_forward<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
    oy: usize,
    ox: usize,
    keep: bool,
) -> Result<(Tensor<T>, Option<WindowTape<T>>)> {
    let cfg = params.config();
    let t = cfg.trunk_kernel;
    let mut parts = Vec::with_capacity(cfg.banks);
    let mut bank_tapes = Vec::new();
    for k in 0..cfg.banks {
        let g = cfg.bank_geom(k);
        let span = cfg.bank_span(g.taps);
        let crop =
            input
                .bank(k)
                .crop3(cfg.bank_origin(k, oy), cfg.bank_origin(k, ox), span, span)?;
        let (feat, stages) = stack_forward(&params.banks[k], cfg.pools, crop, keep)?;
        let up = upsample_nearest(&feat, g.factor)?;
        let up_shape = [up.shape()[0], up.shape()[1], up.shape()[2]];
        parts.push(up.crop3(0, 0, t, t)?);
        if keep {
            bank_tapes.push((stages, up_shape));
        }
    }
    let concat = Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())?;
    let pre1 = conv2d(&concat, &params.trunk[0].kernel, &params.trunk[0].bias, 1)?;
    let act1 = relu(&pre1);
    let pre2 = conv2d(&act1, &params.trunk[1].kernel, &params.trunk[1].bias, 1)?;
    let act2 = relu(&pre2);
    let out = conv2d(&act2, &params.trunk[2].kernel, &params.trunk[2].bias, 1)?;
    let tape = keep.then(|| WindowTape {
        banks: bank_tapes,
        concat,
        pre1,
        act1,
        pre2,
        act2,
    });
    Ok((out, tape))
}

/// Reference evaluation: crops each window, upsamples the coarse bank
/// features to the finest grid, concatenates and applies the trunk.
pub fn forward_patchwise<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
) -> Result<ResponseMaps<T>> {
    let cfg = params.config();
    let (rows, cols) = check_input(cfg, input)?;
    let j = cfg.joints;
    let mut maps = Tensor::zeros(&[j, rows, cols]);
    for oy in 0..rows {
        for ox in 0..cols {
            let (out, _) = window_forward(params, input, oy, ox, false)?;
            for c in 0..j {
                *maps.at3_mut(c, oy, ox) = out.data()[c];
            }
        }
    }
    Ok(ResponseMaps {
        maps,
        grid: cfg.grid(),
    })
}

/// Gradients of the patchwise evaluation; a reference for [`backward`].
pub fn backward_patchwise<T: Scalar>(
    params: &ModelParams<T>,
    input: &Pyramid<T>,
    grad_maps: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let cfg = params.config();
    let (rows, cols) = check_input(cfg, input)?;
    let expected = [cfg.joints, rows, cols];
    if grad_maps.shape() != expected {
        return Err(Error::invalid(format!(
            "gradient shape {:?}, expected {expected:?}",
            grad_maps.shape()
        )));
    }
    let t = cfg.trunk_kernel;
    let f = cfg.conv_features;
    let mut grads = params.zeros_like();
    for oy in 0..rows {
        for ox in 0..cols {
            let (_, tape) = window_forward(params, input, oy, ox, true)?;
            let tape = tape.expect("kept");
            let gout = Tensor::from_fn(&[cfg.joints, 1, 1], |c| grad_maps.at3(c, oy, ox));
            let c3 = conv2d_grad(&tape.act2, &params.trunk[2].kernel, &gout, 1)?;
            let g2 = relu_grad(&tape.pre2, &c3.input)?;
            let c2 = conv2d_grad(&tape.act1, &params.trunk[1].kernel, &g2, 1)?;
            let g1 = relu_grad(&tape.pre1, &c2.input)?;
            let c1 = conv2d_grad(&tape.concat, &params.trunk[0].kernel, &g1, 1)?;
            for (layer, cg) in grads.trunk.iter_mut().zip([&c1, &c2, &c3]) {
                layer.kernel.add_assign(&cg.kernel)?;
                layer.bias.add_assign(&cg.bias)?;
            }
            for (k, (stages, up_shape)) in tape.banks.iter().enumerate() {
                let g = cfg.bank_geom(k);
                let gpart = c1.input.channels(k * f, (k + 1) * f)?;
                let mut gup = Tensor::zeros(up_shape);
                for c in 0..f {
                    for y in 0..t {
                        for x in 0..t {
                            *gup.at3_mut(c, y, x) = gpart.at3(c, y, x);
                        }
                    }
                }
                let gfeat = upsample_nearest_grad(&gup, g.factor)?;
                stack_backward(&params.banks[k], stages, gfeat, &mut grads.banks[k])?;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(banks: usize) -> NetworkConfig {
        NetworkConfig {
            conv_features: 3,
            banks,
            joints: 2,
            fc_widths: [5, 4],
            input_channels: 2,
            ..NetworkConfig::default()
        }
    }

    fn random_pyramid(cfg: &NetworkConfig, h: usize, w: usize, seed: u64) -> Pyramid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = (0..cfg.banks)
            .map(|k| {
                Tensor::from_fn(&[cfg.input_channels, h >> k, w >> k], |_| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        Pyramid::from_banks(banks).unwrap()
    }

    #[test]
    fn context_per_bank_count() {
        assert_eq!(small_cfg(1).context(), 64);
        assert_eq!(small_cfg(2).context(), 96);
        assert_eq!(small_cfg(3).context(), 160);
        assert_eq!(small_cfg(1).output_len(128), Some(17));
        assert_eq!(small_cfg(3).output_len(224), Some(17));
        assert_eq!(small_cfg(3).output_len(159), None);
    }

    #[test]
    fn centering_pad_puts_cells_on_block_centers() {
        for banks in 1..=3 {
            let cfg = small_cfg(banks);
            let g = cfg
                .grid()
                .offset(-(cfg.centering_pad() as f64), -(cfg.centering_pad() as f64));
            assert_eq!(g.cell_center(0, 0), (2.0, 2.0));
            assert_eq!(g.cell_center(3, 1), (14.0, 6.0));
        }
    }

    #[test]
    fn fold_then_unfold_is_adjoint() {
        let cfg = small_cfg(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: ModelParams<f64> = ModelParams::build(&cfg, &mut rng).unwrap();
        let w = &p.trunk[0].kernel;
        for k in 0..3 {
            let v = fold_kernel(&cfg, w, k);
            let u = Tensor::from_fn(v.shape(), |_| rng.gen_range(-1.0..1.0));
            let mut uw = Tensor::zeros(w.shape());
            unfold_grad(&cfg, &u, k, &mut uw);
            let lhs: f64 = v.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.data().iter().zip(uw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn oneshot_matches_patchwise_all_bank_counts() {
        for banks in 1..=3 {
            let cfg = small_cfg(banks);
            let p: ModelParams<f64> =
                ModelParams::build(&cfg, &mut ChaCha8Rng::seed_from_u64(banks as u64)).unwrap();
            let side = cfg.context() + 4 * 3;
            let input = random_pyramid(&cfg, side, side + 8, 10 + banks as u64);
            let a = forward_oneshot(&p, &input).unwrap();
            let b = forward_patchwise(&p, &input).unwrap();
            assert_eq!(a.maps.shape(), &[2, 4, 6]);
            assert!(a.maps.max_abs_diff(&b.maps).unwrap() < 1e-10);
            assert_eq!(a.grid, b.grid);
        }
    }

    #[test]
    fn backward_matches_patchwise_backward() {
        for banks in 1..=3 {
            let cfg = small_cfg(banks);
            let p: ModelParams<f64> =
                ModelParams::build(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            let side = cfg.context() + 4 * 2;
            let input = random_pyramid(&cfg, side + 4, side, 8);
            let (out, tape) = forward_with_tape(&p, &input).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let gm = Tensor::from_fn(out.maps.shape(), |_| rng.gen_range(-1.0..1.0));
            let a = backward(&p, &tape, &gm).unwrap();
            let b = backward_patchwise(&p, &input, &gm).unwrap();
            let scale = b.max_abs().max(1e-12);
            assert!(a.max_abs_diff(&b).unwrap() / scale < 1e-10, "banks {banks}");
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small_cfg(2);
        let p: ModelParams<f64> =
            ModelParams::build(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let small = random_pyramid(&cfg, 64, 64, 1);
        assert!(forward_oneshot(&p, &small).is_err());
        let one_bank = random_pyramid(&small_cfg(1), 96, 96, 1);
        assert!(forward_oneshot(&p, &one_bank).is_err());
        let input = random_pyramid(&cfg, 96, 96, 1);
        let (_, tape) = forward_with_tape(&p, &input).unwrap();
        assert!(backward(&p, &tape, &Tensor::zeros(&[2, 2, 1])).is_err());
    }
}

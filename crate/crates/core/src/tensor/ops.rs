use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Argmax bookkeeping of a [`maxpool2`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    input_shape: [usize; 3],
    /// Flat input index of the winner for every output cell.
    argmax: Vec<u32>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        [c, h / 2, w / 2]
    }

    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, kc, kh, kw) = match kernel.shape()[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::invalid(format!(
                    "kernel must be [C_out,C_in,kH,kW], got {:?}",
                    kernel.shape()
                )))
            }
        };
        if kc != c_in {
            return Err(Error::invalid(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if kh > h || kw > w {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds the input into a `patch x positions` matrix.
    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let p = self.positions();
        let mut cols = vec![T::zero(); self.patch() * p];
        let mut row = 0;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let src_row = (c * self.h + oy * self.stride + i) * self.w + j;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            out.copy_from_slice(&input[src_row..src_row + self.ow]);
                        } else {
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = input[src_row + ox * self.stride];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let p = self.positions();
        let mut out = vec![T::zero(); self.c_in * self.h * self.w];
        let mut row = 0;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let dst_row = (c * self.h + oy * self.stride + i) * self.w + j;
                        for ox in 0..self.ow {
                            out[dst_row + ox * self.stride] += src[oy * self.ow + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }
}

/// Valid-padding 2-D cross-correlation.
///
/// `out[o,y,x] = bias[o] + sum_{c,i,j} input[c, y*stride+i, x*stride+j] * kernel[o,c,i,j]`
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::invalid(format!(
            "bias shape {:?}, expected [{}]",
            bias.shape(),
            g.c_out
        )));
    }
    let p = g.positions();
    let k = g.patch();
    let mut out = Vec::with_capacity(g.c_out * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(p));
    }
    if kernel_is_pointwise(&g) {
        T::gemm(
            g.c_out,
            k,
            p,
            T::one(),
            kernel.data(),
            k as isize,
            1,
            input.data(),
            p as isize,
            1,
            T::one(),
            &mut out,
            p as isize,
            1,
        );
    } else {
        let cols = g.im2col(input.data());
        T::gemm(
            g.c_out,
            k,
            p,
            T::one(),
            kernel.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            &mut out,
            p as isize,
            1,
        );
    }
    let out = Tensor::new(vec![g.c_out, g.oh, g.ow], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

fn kernel_is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1
}

/// Analytic gradients of [`conv2d`] for cotangent `grad_out`.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let (kernel_grad, bias_grad, input_grad) =
        conv_backward(input, kernel, grad_out, stride, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("requested"),
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

/// Kernel and bias gradients only; skips the input gradient.
pub fn conv2d_grad_params<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k, b, _) = conv_backward(input, kernel, grad_out, stride, false)?;
    Ok((k, b))
}

type ConvBackward<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    want_input: bool,
) -> Result<ConvBackward<T>> {
    let g = ConvGeom::new(input, kernel, stride)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::invalid(format!(
            "grad_out shape {:?}, conv output is [{}, {}, {}]",
            grad_out.shape(),
            g.c_out,
            g.oh,
            g.ow
        )));
    }
    let p = g.positions();
    let k = g.patch();
    let go = grad_out.data();

    let bias: Vec<T> = go
        .chunks_exact(p)
        .map(|plane| T::of(plane.iter().map(|v| v.as_f64()).sum::<f64>()))
        .collect();

    let pointwise = kernel_is_pointwise(&g);
    let cols_owned;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        cols_owned = g.im2col(input.data());
        &cols_owned
    };

    // grad_kernel = grad_out (O x P) * cols^T (P x K)
    let mut gk = vec![T::zero(); g.c_out * k];
    T::gemm(
        g.c_out,
        p,
        k,
        T::one(),
        go,
        p as isize,
        1,
        cols,
        1,
        p as isize,
        T::zero(),
        &mut gk,
        k as isize,
        1,
    );

    let gi = if want_input {
        // grad_cols = kernel^T (K x O) * grad_out (O x P)
        let mut gcols = vec![T::zero(); k * p];
        T::gemm(
            k,
            g.c_out,
            p,
            T::one(),
            kernel.data(),
            1,
            k as isize,
            go,
            p as isize,
            1,
            T::zero(),
            &mut gcols,
            p as isize,
            1,
        );
        let gi = if pointwise { gcols } else { g.col2im(&gcols) };
        Some(Tensor::new(vec![g.c_in, g.h, g.w], gi)?)
    } else {
        None
    };

    Ok((
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.c_out], bias)?,
        gi,
    ))
}

/// Non-overlapping 2x2 max pooling. Ties resolve to the first element in
/// row-major order within the block.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2 needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let r0 = (ch * h + 2 * oy) * w;
            let r1 = r0 + w;
            for ox in 0..ow {
                let cands = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        PoolIndices {
            input_shape: [c, h, w],
            argmax,
        },
    ))
}

/// Routes each pooled gradient back to the position that won the forward max.
pub fn maxpool2_grad<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != indices.output_shape() {
        return Err(Error::invalid(format!(
            "grad_out shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            indices.output_shape()
        )));
    }
    let mut gi = Tensor::zeros(&indices.input_shape);
    let dst = gi.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        dst[i as usize] += g;
    }
    Ok(gi)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where `input > 0`; the subgradient at zero is zero.
pub fn relu_grad<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.check_same_shape(grad_out, "relu_grad")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Replicates every value of a `[C,h,w]` tensor into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h * factor, w * factor);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = (ch * h + y / factor) * w;
            out.extend((0..ow).map(|x| src[row + x / factor]));
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: block sums.
pub fn upsample_nearest_grad<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (c, oh, ow) = grad_out.dims3()?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::invalid(format!(
            "gradient extents {oh}x{ow} not divisible by {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut gi = Tensor::zeros(&[c, h, w]);
    let src = grad_out.data();
    let dst = gi.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                dst[(ch * h + y / factor) * w + x / factor] += src[(ch * oh + y) * ow + x];
            }
        }
    }
    Ok(gi)
}

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_ops::{gaussian_blur, reflect_index, Image};

/// Dense displacement field in pixels per frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::invalid(format!(
                "flow components of length {}/{} for {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite flow".into()));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    /// Two-channel image `(u, v)`.
    pub fn to_image(&self) -> Image {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        Image::new(self.height, self.width, 2, data).expect("finite by construction")
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 2 {
            return Err(Error::invalid(format!(
                "flow image needs 2 channels, got {}",
                img.channels()
            )));
        }
        Self::new(
            img.height(),
            img.width(),
            img.plane(0).to_vec(),
            img.plane(1).to_vec(),
        )
    }

    pub fn write_f32p(&self, path: &Path) -> Result<()> {
        self.to_image().write_f32p(path)
    }

    pub fn read_f32p(path: &Path) -> Result<Self> {
        Self::from_image(&Image::read_f32p(path)?)
    }
}

/// Horn-Schunck settings. Intensities are grayscale scaled to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    pub alpha: f64,
    pub iters: usize,
    /// Gaussian presmoothing of both frames before differentiation; 0 disables.
    pub presmooth_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: 15.0,
            iters: 200,
            presmooth_sigma: 1.0,
        }
    }
}

struct Derivatives {
    h: usize,
    w: usize,
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
}

impl Derivatives {
    fn new(fi: &Image, fj: &Image, presmooth: f64) -> Result<Self> {
        fi.ensure_same_shape(fj, "flow frames")?;
        let prep = |f: &Image| -> Result<Vec<f64>> {
            let g = f.to_gray();
            let g = if presmooth > 0.0 {
                gaussian_blur(&g, presmooth)?
            } else {
                g
            };
            Ok(g.data().iter().map(|&v| v as f64 * 255.0).collect())
        };
        let a = prep(fi)?;
        let b = prep(fj)?;
        let (h, w) = (fi.height(), fi.width());
        let mean: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
        let at = |y: isize, x: isize| mean[reflect_index(y, h) * w + reflect_index(x, w)];
        let mut ix = vec![0.0; h * w];
        let mut iy = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                ix[i] = 0.5 * (at(y, x + 1) - at(y, x - 1));
                iy[i] = 0.5 * (at(y + 1, x) - at(y - 1, x));
            }
        }
        let it = a.iter().zip(&b).map(|(p, q)| q - p).collect();
        Ok(Self { h, w, ix, iy, it })
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        let (y, x) = (i / self.w, i % self.w);
        let (h, w) = (self.h, self.w);
        [
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    }

    fn objective(&self, u: &[f64], v: &[f64], alpha: f64) -> f64 {
        let mut data = 0.0;
        let mut smooth = 0.0;
        for i in 0..u.len() {
            let r = self.ix[i] * u[i] + self.iy[i] * v[i] + self.it[i];
            data += r * r;
            let (y, x) = (i / self.w, i % self.w);
            if x + 1 < self.w {
                smooth += (u[i + 1] - u[i]).powi(2) + (v[i + 1] - v[i]).powi(2);
            }
            if y + 1 < self.h {
                smooth += (u[i + self.w] - u[i]).powi(2) + (v[i + self.w] - v[i]).powi(2);
            }
        }
        data + alpha * alpha * smooth
    }
}

/// Horn-Schunck energy
/// `sum (Ix u + Iy v + It)^2 + alpha^2 sum_edges (|du|^2 + |dv|^2)`
/// over 4-neighbour edges.
pub fn flow_objective(
    fi: &Image,
    fj: &Image,
    flow: &FlowField,
    params: &FlowParams,
) -> Result<f64> {
    let d = Derivatives::new(fi, fj, params.presmooth_sigma)?;
    if (flow.height, flow.width) != (d.h, d.w) {
        return Err(Error::invalid("flow extents differ from frames"));
    }
    let u: Vec<f64> = flow.u.iter().map(|&x| x as f64).collect();
    let v: Vec<f64> = flow.v.iter().map(|&x| x as f64).collect();
    Ok(d.objective(&u, &v, params.alpha))
}

/// Jacobi iteration on the Horn-Schunck normal equations. Each sweep solves
/// every pixel's 2x2 block exactly given its neighbours' previous values,
/// which never increases the energy. Returns the field and the energy after
/// each sweep.
pub fn estimate_flow_traced(
    fi: &Image,
    fj: &Image,
    params: &FlowParams,
) -> Result<(FlowField, Vec<f64>)> {
    if !(params.alpha > 0.0) || params.iters == 0 {
        return Err(Error::invalid(format!(
            "flow needs alpha > 0 and iters >= 1 (got {}, {})",
            params.alpha, params.iters
        )));
    }
    let d = Derivatives::new(fi, fj, params.presmooth_sigma)?;
    let n = d.h * d.w;
    let a2 = params.alpha * params.alpha;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut nu = vec![0.0f64; n];
    let mut nv = vec![0.0f64; n];
    let mut trace = Vec::with_capacity(params.iters);
    for _ in 0..params.iters {
        for i in 0..n {
            let (mut su, mut sv, mut cnt) = (0.0, 0.0, 0.0);
            for j in d.neighbors(i) {
                su += u[j];
                sv += v[j];
                cnt += 1.0;
            }
            let (ub, vb) = (su / cnt, sv / cnt);
            let (ix, iy) = (d.ix[i], d.iy[i]);
            let k = (ix * ub + iy * vb + d.it[i]) / (a2 * cnt + ix * ix + iy * iy);
            nu[i] = ub - ix * k;
            nv[i] = vb - iy * k;
        }
        std::mem::swap(&mut u, &mut nu);
        std::mem::swap(&mut v, &mut nv);
        trace.push(d.objective(&u, &v, params.alpha));
    }
    let flow = FlowField::new(
        d.h,
        d.w,
        u.iter().map(|&x| x as f32).collect(),
        v.iter().map(|&x| x as f32).collect(),
    )?;
    Ok((flow, trace))
}

pub fn estimate_flow_with(fi: &Image, fj: &Image, params: &FlowParams) -> Result<FlowField> {
    estimate_flow_traced(fi, fj, params).map(|(f, _)| f)
}

/// Horn-Schunck flow from `fi` to `fj` with the default presmoothing.
pub fn estimate_flow(fi: &Image, fj: &Image, alpha: f64, iters: usize) -> Result<FlowField> {
    estimate_flow_with(
        fi,
        fj,
        &FlowParams {
            alpha,
            iters,
            ..FlowParams::default()
        },
    )
}

/// Per-pixel `sqrt(u^2 + v^2)` as a one-channel image.
pub fn flow_magnitude(flow: &FlowField) -> Image {
    let data = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(a, b)| a.hypot(*b))
        .collect();
    Image::new(flow.height, flow.width, 1, data).expect("finite")
}

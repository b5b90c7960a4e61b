//! Torso-anchored joint masks: where each joint may lie relative to the torso.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::annotation::{Annotation, Point};
use crate::convnet::ResponseMaps;
use crate::error::{Error, Result};
use crate::image_ops::{gaussian_blur, gaussian_kernel, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BIN: usize = 4;
pub const DEFAULT_BLUR_SIGMA: f64 = 12.0;

/// One mask plane per joint over torso offsets.
///
/// Cell `(r, c)` of every plane holds the weight for a joint found at
/// `(origin_y + bin * r, origin_x + bin * c)` pixels from the torso center.
#[derive(Clone, Debug, PartialEq)]
pub struct JointMasks {
    pub bin: usize,
    pub blur_sigma: f64,
    pub origin_y: f64,
    pub origin_x: f64,
    values: Image,
}

impl JointMasks {
    pub fn new(
        bin: usize,
        blur_sigma: f64,
        origin_y: f64,
        origin_x: f64,
        values: Image,
    ) -> Result<Self> {
        if bin == 0 {
            return Err(Error::invalid("mask bin must be positive"));
        }
        if !origin_y.is_finite() || !origin_x.is_finite() {
            return Err(Error::invalid("mask origin must be finite"));
        }
        for c in 0..values.channels() {
            let plane = values.plane(c);
            if plane.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "mask {c} has values outside [0, 1]"
                )));
            }
            if !plane.iter().any(|&v| v > 0.0) {
                return Err(Error::invalid(format!("mask {c} is empty")));
            }
        }
        Ok(Self {
            bin,
            blur_sigma,
            origin_y,
            origin_x,
            values,
        })
    }

    /// A mask that keeps everything.
    pub fn neutral(joints: usize) -> Self {
        Self {
            bin: DEFAULT_BIN,
            blur_sigma: 0.0,
            origin_y: 0.0,
            origin_x: 0.0,
            values: Image::constant(1, 1, joints, 1.0),
        }
    }

    pub fn joints(&self) -> usize {
        self.values.channels()
    }

    pub fn values(&self) -> &Image {
        &self.values
    }

    fn is_neutral(&self) -> bool {
        self.values.height() == 1
            && self.values.width() == 1
            && self.values.data().iter().all(|&v| v == 1.0)
    }

    /// Mask weight for `joint` at offset `(dy, dx)` from the torso.
    pub fn weight(&self, joint: usize, dy: f64, dx: f64) -> f32 {
        if self.is_neutral() {
            return 1.0;
        }
        let b = self.bin as f64;
        let r = ((dy - self.origin_y) / b).round();
        let c = ((dx - self.origin_x) / b).round();
        if r < 0.0 || c < 0.0 || r >= self.values.height() as f64 || c >= self.values.width() as f64
        {
            return 0.0;
        }
        self.values.get(joint, r as usize, c as usize)
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("txt")
    }

    /// Writes the planes to `path` (`.f32p`) and the geometry to a `.txt`
    /// sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.values.write_f32p(path)?;
        let mut s = String::new();
        let _ = writeln!(s, "bin {}", self.bin);
        let _ = writeln!(s, "blur_sigma {}", self.blur_sigma);
        let _ = writeln!(s, "origin_y {}", self.origin_y);
        let _ = writeln!(s, "origin_x {}", self.origin_x);
        let side = Self::sidecar(path);
        fs::write(&side, s).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let values = Image::read_f32p(path)?;
        let side = Self::sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let bad = |what: &str| Error::Format(format!("{}: {what}", side.display()));
        let field = |key: &str| -> Result<f64> {
            let line = text
                .lines()
                .find(|l| l.split_whitespace().next() == Some(key))
                .ok_or_else(|| bad(&format!("missing {key}")))?;
            line.split_whitespace()
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("bad {key}")))
        };
        let bin = field("bin")?;
        if bin.fract() != 0.0 || bin < 1.0 {
            return Err(bad("bin must be a positive integer"));
        }
        Self::new(
            bin as usize,
            field("blur_sigma")?,
            field("origin_y")?,
            field("origin_x")?,
            values,
        )
    }
}

/// Histogram of joint offsets from the torso center on a `bin`-pixel grid,
/// binarized, blurred by `blur_sigma` pixels and scaled to peak 1.
///
/// A joint never visible in `annotations` gets a mask of ones.
pub fn build_masks(annotations: &[Annotation], bin: usize, blur_sigma: f64) -> Result<JointMasks> {
    if annotations.is_empty() {
        return Err(Error::invalid(
            "cannot build masks from an empty training set",
        ));
    }
    if bin == 0 || !blur_sigma.is_finite() || blur_sigma < 0.0 {
        return Err(Error::invalid(
            "mask bin must be positive and blur sigma non-negative",
        ));
    }
    let joints = annotations[0].joints.len();
    let b = bin as f64;
    let mut cells: Vec<Vec<(i64, i64)>> = vec![Vec::new(); joints];
    for a in annotations {
        let [tx, ty] = a.torso_center();
        for (j, p) in a.joints.iter().enumerate() {
            if let Some([x, y]) = p {
                cells[j].push((((y - ty) / b).round() as i64, ((x - tx) / b).round() as i64));
            }
        }
    }
    let all = cells.iter().flatten();
    let (mut r0, mut r1, mut c0, mut c1) = (0i64, 0i64, 0i64, 0i64);
    for &(r, c) in all {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let sigma_cells = blur_sigma / b;
    // Twice the kernel radius of zeros makes the mirrored blur border exact.
    let pad = if sigma_cells > 0.0 {
        2 * (gaussian_kernel(sigma_cells)?.len() / 2) as i64 + 1
    } else {
        1
    };
    let rows = (r1 - r0 + 1 + 2 * pad) as usize;
    let cols = (c1 - c0 + 1 + 2 * pad) as usize;
    let mut hist = Image::zeros(rows, cols, joints);
    for (j, list) in cells.iter().enumerate() {
        if list.is_empty() {
            log::warn!(
                "joint {j} never visible in training annotations; its mask keeps everything"
            );
            hist.plane_mut(j).fill(1.0);
            continue;
        }
        for &(r, c) in list {
            hist.set(j, (r - r0 + pad) as usize, (c - c0 + pad) as usize, 1.0);
        }
    }
    let mut values = if sigma_cells > 0.0 {
        gaussian_blur(&hist, sigma_cells)?
    } else {
        hist
    };
    for j in 0..joints {
        let plane = values.plane_mut(j);
        let peak = plane.iter().fold(0.0f32, |m, &v| m.max(v));
        plane
            .iter_mut()
            .for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
    }
    JointMasks::new(
        bin,
        blur_sigma,
        ((r0 - pad) * bin as i64) as f64,
        ((c0 - pad) * bin as i64) as f64,
        values,
    )
}

/// Rectifies each energy map and multiplies it by its joint mask centered on
/// `torso` (image `[x, y]`). Cells outside the mask become zero.
pub fn apply_masks<T: Scalar>(
    maps: &ResponseMaps<T>,
    torso: Point,
    masks: &JointMasks,
) -> Result<ResponseMaps<T>> {
    if maps.joints() != masks.joints() {
        return Err(Error::invalid(format!(
            "{} response maps but {} masks",
            maps.joints(),
            masks.joints()
        )));
    }
    if !torso[0].is_finite() || !torso[1].is_finite() {
        return Err(Error::invalid("torso position must be finite"));
    }
    let (rows, cols) = (maps.rows(), maps.cols());
    let src = maps.maps.data();
    let mut out = Vec::with_capacity(src.len());
    for j in 0..maps.joints() {
        for y in 0..rows {
            for x in 0..cols {
                let (cy, cx) = maps.grid.cell_center(y, x);
                let m = masks.weight(j, cy - torso[1], cx - torso[0]);
                let e = src[(j * rows + y) * cols + x];
                let e = if e > T::zero() { e } else { T::zero() };
                out.push(e * T::of(m as f64));
            }
        }
    }
    Ok(ResponseMaps {
        maps: Tensor::new(maps.maps.shape().to_vec(), out)?,
        grid: maps.grid,
    })
}

/// Argmax readout of response maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[x, y]` per joint.
    pub joints: Vec<Point>,
    /// Set where the map had no unique peak (constant map).
    pub low_confidence: Vec<bool>,
}

/// Per joint, the center of the highest cell (first in row-major order on
/// ties). A constant map is flagged low-confidence; an all-zero map is
/// placed at the grid center.
pub fn predict_joints<T: Scalar>(maps: &ResponseMaps<T>) -> Prediction {
    let (rows, cols) = (maps.rows(), maps.cols());
    let mut joints = Vec::with_capacity(maps.joints());
    let mut low = Vec::with_capacity(maps.joints());
    for j in 0..maps.joints() {
        let plane = &maps.maps.data()[j * rows * cols..(j + 1) * rows * cols];
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = i;
            }
        }
        let constant = plane.iter().all(|v| *v == plane[0]);
        let (cy, cx) = if constant && plane.first().is_none_or(|v| *v == T::zero()) {
            let (y0, x0) = maps.grid.cell_center(0, 0);
            let (y1, x1) = maps.grid.cell_center(rows.max(1) - 1, cols.max(1) - 1);
            (0.5 * (y0 + y1), 0.5 * (x0 + x1))
        } else {
            maps.grid.cell_center(best / cols, best % cols)
        };
        joints.push([cx, cy]);
        low.push(constant);
    }
    Prediction {
        joints,
        low_confidence: low,
    }
}

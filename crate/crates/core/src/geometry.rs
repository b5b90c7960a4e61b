//! 4-DOF similarity transforms on continuous pixel coordinates.
//!
//! Pixel `(x, y)` covers `[x, x+1) x [y, y+1)`; its center is `(x + 0.5, y + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians, counter-clockwise in the image frame (y down).
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn new(scale: f64, rotation: f64, tx: f64, ty: f64) -> Self {
        Self {
            scale,
            rotation,
            tx,
            ty,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, ty)
    }

    /// The same transform expressed about `center` instead of the origin.
    pub fn about(scale: f64, rotation: f64, center: (f64, f64), shift: (f64, f64)) -> Self {
        let (a, b) = Self::new(scale, rotation, 0.0, 0.0).apply(center.0, center.1);
        Self::new(
            scale,
            rotation,
            center.0 - a + shift.0,
            center.1 - b + shift.1,
        )
    }

    /// `(a, b)` with `x' = a x - b y + tx`, `y' = b x + a y + ty`.
    pub fn linear(&self) -> (f64, f64) {
        (
            self.scale * self.rotation.cos(),
            self.scale * self.rotation.sin(),
        )
    }

    pub fn from_linear(a: f64, b: f64, tx: f64, ty: f64) -> Self {
        Self::new(a.hypot(b), b.atan2(a), tx, ty)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (a, b) = self.linear();
        (a * x - b * y + self.tx, b * x + a * y + self.ty)
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(Error::invalid(format!(
                "transform with scale {} is not invertible",
                self.scale
            )));
        }
        let inv = Self::new(1.0 / self.scale, -self.rotation, 0.0, 0.0);
        let (tx, ty) = inv.apply(self.tx, self.ty);
        Ok(Self::new(inv.scale, inv.rotation, -tx, -ty))
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &Self) -> Self {
        let (tx, ty) = self.apply(first.tx, first.ty);
        Self::new(
            self.scale * first.scale,
            self.rotation + first.rotation,
            tx,
            ty,
        )
    }

    /// Mean displacement between `self` and `other` over the given points.
    pub fn mean_reprojection_error(&self, other: &Self, points: &[(f64, f64)]) -> f64 {
        let total: f64 = points
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.apply(x, y);
                let (c, d) = other.apply(x, y);
                (a - c).hypot(b - d)
            })
            .sum();
        total / points.len().max(1) as f64
    }

    /// `scale rot tx ty` on one line.
    pub fn to_record(&self) -> String {
        format!("{} {} {} {}", self.scale, self.rotation, self.tx, self.ty)
    }

    pub fn from_record(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad transform record {s:?}: {e}")))?;
        match vals[..] {
            [s, r, x, y] => Ok(Self::new(s, r, x, y)),
            _ => Err(Error::invalid(format!(
                "transform record needs 4 values, got {}",
                vals.len()
            ))),
        }
    }
}

/// Corners of a `width x height` image in continuous coordinates.
pub fn image_corners(width: usize, height: usize) -> [(f64, f64); 4] {
    let (w, h) = (width as f64, height as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

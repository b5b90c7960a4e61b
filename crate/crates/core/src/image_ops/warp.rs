use super::image::Image;
use crate::error::Result;
use crate::geometry::SimilarityTransform;

/// Bilinear sample at continuous coordinates; `None` outside the pixel-center hull.
#[inline]
pub fn sample_bilinear(img: &Image, c: usize, x: f64, y: f64) -> Option<f32> {
    let (w, h) = (img.width(), img.height());
    let u = x - 0.5;
    let v = y - 0.5;
    const TOL: f64 = 1e-9;
    if u < -TOL || v < -TOL || u > (w - 1) as f64 + TOL || v > (h - 1) as f64 + TOL {
        return None;
    }
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (u - x0 as f64) as f32;
    let fy = (v - y0 as f64) as f32;
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// `out(p) = img(t^-1(p))` with bilinear sampling; also returns which output
/// pixels had a source inside the image.
pub fn warp_with_mask(img: &Image, t: &SimilarityTransform) -> Result<(Image, Vec<bool>)> {
    let inv = t.inverse()?;
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(h, w, img.channels());
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            if sample_bilinear(img, 0, sx, sy).is_none() {
                continue;
            }
            valid[y * w + x] = true;
            for c in 0..img.channels() {
                out.set(c, y, x, sample_bilinear(img, c, sx, sy).unwrap_or(0.0));
            }
        }
    }
    Ok((out, valid))
}

/// Inverse-mapped bilinear warp; unknown content is zero.
pub fn warp(img: &Image, t: &SimilarityTransform) -> Result<Image> {
    warp_with_mask(img, t).map(|(out, _)| out)
}

/// Bilinear resize with pixel-center alignment and clamped borders.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(crate::error::Error::invalid("resize to an empty image"));
    }
    let sy = img.height() as f64 / height as f64;
    let sx = img.width() as f64 / width as f64;
    let (mh, mw) = ((img.height() - 1) as f64, (img.width() - 1) as f64);
    Ok(Image::from_fn(height, width, img.channels(), |c, y, x| {
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, mh);
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, mw);
        sample_bilinear(img, c, u + 0.5, v + 0.5).expect("clamped inside")
    }))
}

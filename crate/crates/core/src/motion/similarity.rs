use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::image_ops::{gaussian_blur, warp_with_mask, Image};

/// Corner detection, matching and RANSAC settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationParams {
    pub max_corners: usize,
    pub patch_radius: usize,
    pub min_ncc: f64,
    pub ransac_proposals: usize,
    pub inlier_threshold: f64,
    pub min_matches: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_corners: 300,
            patch_radius: 5,
            min_ncc: 0.8,
            ransac_proposals: 1000,
            inlier_threshold: 2.0,
            min_matches: 8,
            min_inliers: 4,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
struct Corner {
    /// Continuous coordinates.
    x: f64,
    y: f64,
    /// Zero-mean, unit-norm patch around the corner.
    descriptor: Vec<f32>,
}

const HARRIS_K: f64 = 0.04;

fn harris_corners(img: &Image, p: &RegistrationParams) -> Result<Vec<Corner>> {
    let gray = gaussian_blur(&img.to_gray(), 0.7)?;
    let (h, w) = (gray.height(), gray.width());
    let g = gray.data();
    let mut ixx = Image::zeros(h, w, 1);
    let mut iyy = Image::zeros(h, w, 1);
    let mut ixy = Image::zeros(h, w, 1);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = 0.5 * (g[y * w + x + 1] - g[y * w + x - 1]);
            let gy = 0.5 * (g[(y + 1) * w + x] - g[(y - 1) * w + x]);
            ixx.set(0, y, x, gx * gx);
            iyy.set(0, y, x, gy * gy);
            ixy.set(0, y, x, gx * gy);
        }
    }
    let sxx = gaussian_blur(&ixx, 1.5)?;
    let syy = gaussian_blur(&iyy, 1.5)?;
    let sxy = gaussian_blur(&ixy, 1.5)?;
    let resp: Vec<f64> = (0..h * w)
        .map(|i| {
            let (a, b, c) = (
                sxx.data()[i] as f64,
                syy.data()[i] as f64,
                sxy.data()[i] as f64,
            );
            a * b - c * c - HARRIS_K * (a + b) * (a + b)
        })
        .collect();
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let border = p.patch_radius + 2;
    let nms = 3isize;
    let mut cands = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let r = resp[y * w + x];
            if r < 0.01 * peak {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -nms..=nms {
                for dx in -nms..=nms {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let q = resp[yy as usize * w + xx as usize];
                    // Strict on one side so plateaus keep exactly one point.
                    if q > r || (q == r && (dy, dx) < (0, 0)) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                cands.push((r, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    cands.truncate(p.max_corners);
    let rad = p.patch_radius as isize;
    Ok(cands
        .into_iter()
        .filter_map(|(_, y, x)| {
            let at = |yy: usize, xx: usize| resp[yy * w + xx];
            let sub = |l: f64, c: f64, r: f64| {
                let den = l - 2.0 * c + r;
                if den.abs() < 1e-300 {
                    0.0
                } else {
                    (0.5 * (l - r) / den).clamp(-0.5, 0.5)
                }
            };
            let ox = sub(at(y, x - 1), at(y, x), at(y, x + 1));
            let oy = sub(at(y - 1, x), at(y, x), at(y + 1, x));
            let mut patch = Vec::with_capacity(((2 * rad + 1) * (2 * rad + 1)) as usize);
            for dy in -rad..=rad {
                for dx in -rad..=rad {
                    patch.push(g[(y as isize + dy) as usize * w + (x as isize + dx) as usize]);
                }
            }
            let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / patch.len() as f64;
            let norm = patch
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm < 1e-6 {
                return None;
            }
            let descriptor = patch
                .iter()
                .map(|&v| ((v as f64 - mean) / norm) as f32)
                .collect();
            Some(Corner {
                x: x as f64 + 0.5 + ox,
                y: y as f64 + 0.5 + oy,
                descriptor,
            })
        })
        .collect())
}

type Match = ((f64, f64), (f64, f64));

/// Mutual best normalized cross-correlation matches.
fn match_corners(a: &[Corner], b: &[Corner], min_ncc: f64) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let ncc = |p: &Corner, q: &Corner| -> f64 {
        p.descriptor
            .iter()
            .zip(&q.descriptor)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum()
    };
    let scores: Vec<Vec<f64>> = a
        .iter()
        .map(|p| b.iter().map(|q| ncc(p, q)).collect())
        .collect();
    let best_b: Vec<usize> = scores
        .iter()
        .map(|row| argmax(row.iter().copied()))
        .collect();
    let best_a: Vec<usize> = (0..b.len())
        .map(|j| argmax(scores.iter().map(|row| row[j])))
        .collect();
    (0..a.len())
        .filter(|&i| best_a[best_b[i]] == i && scores[i][best_b[i]] >= min_ncc)
        .map(|i| ((a[i].x, a[i].y), (b[best_b[i]].x, b[best_b[i]].y)))
        .collect()
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Least-squares `(a, b, tx, ty)` for `q = [a -b; b a] p + t`.
fn fit_similarity(matches: &[Match]) -> Option<SimilarityTransform> {
    let n = matches.len() as f64;
    if matches.len() < 2 {
        return None;
    }
    let (mut mpx, mut mpy, mut mqx, mut mqy) = (0.0, 0.0, 0.0, 0.0);
    for &((px, py), (qx, qy)) in matches {
        mpx += px;
        mpy += py;
        mqx += qx;
        mqy += qy;
    }
    mpx /= n;
    mpy /= n;
    mqx /= n;
    mqy /= n;
    let (mut sa, mut sb, mut ss) = (0.0, 0.0, 0.0);
    for &((px, py), (qx, qy)) in matches {
        let (x, y, u, v) = (px - mpx, py - mpy, qx - mqx, qy - mqy);
        sa += x * u + y * v;
        sb += x * v - y * u;
        ss += x * x + y * y;
    }
    if ss < 1e-12 {
        return None;
    }
    let (a, b) = (sa / ss, sb / ss);
    let tx = mqx - (a * mpx - b * mpy);
    let ty = mqy - (b * mpx + a * mpy);
    let t = SimilarityTransform::from_linear(a, b, tx, ty);
    (t.scale > 0.0 && t.scale.is_finite()).then_some(t)
}

fn inliers(t: &SimilarityTransform, matches: &[Match], thr: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, &(p, q))| {
            let (x, y) = t.apply(p.0, p.1);
            (x - q.0).hypot(y - q.1) < thr
        })
        .map(|(i, _)| i)
        .collect()
}

/// Transform `S` with `f_j(S(p)) ~ f_i(p)`: a point at `p` in `f_i` is seen
/// at `S(p)` in `f_j`.
pub fn estimate_similarity_with(
    fi: &Image,
    fj: &Image,
    p: &RegistrationParams,
) -> Result<SimilarityTransform> {
    let ca = harris_corners(fi, p)?;
    let cb = harris_corners(fj, p)?;
    let matches = match_corners(&ca, &cb, p.min_ncc);
    if matches.len() < p.min_matches {
        return Err(Error::EstimationFailed(format!(
            "{} corner matches ({} and {} corners), need {}",
            matches.len(),
            ca.len(),
            cb.len(),
            p.min_matches
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..p.ransac_proposals {
        let i = rng.gen_range(0..matches.len());
        let j = rng.gen_range(0..matches.len());
        if i == j {
            continue;
        }
        let Some(t) = fit_similarity(&[matches[i], matches[j]]) else {
            continue;
        };
        let inl = inliers(&t, &matches, p.inlier_threshold);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < p.min_inliers {
        return Err(Error::EstimationFailed(format!(
            "{} RANSAC inliers of {} matches, need {}",
            best.len(),
            matches.len(),
            p.min_inliers
        )));
    }
    let mut t = fit_similarity(&best.iter().map(|&i| matches[i]).collect::<Vec<_>>())
        .ok_or_else(|| Error::EstimationFailed("degenerate inlier set".into()))?;
    // One re-selection pass with the refined model.
    let refined = inliers(&t, &matches, p.inlier_threshold);
    if refined.len() >= p.min_inliers {
        if let Some(r) = fit_similarity(&refined.iter().map(|&i| matches[i]).collect::<Vec<_>>()) {
            t = r;
        }
    }
    Ok(t)
}

pub fn estimate_similarity(fi: &Image, fj: &Image) -> Result<SimilarityTransform> {
    estimate_similarity_with(fi, fj, &RegistrationParams::default())
}

/// `f_j` warped into `f_i`'s camera by the inverse of the estimated
/// similarity. Pixels with no source in `f_j` are filled from `f_i`, so they
/// carry no apparent motion.
pub fn compensate_camera(fi: &Image, fj: &Image) -> Result<Image> {
    fi.ensure_same_shape(fj, "compensate_camera")?;
    let s = estimate_similarity(fi, fj)?;
    Ok(apply_compensation(fi, fj, &s)?.0)
}

/// Warps `f_j` by `s^-1`; returns the filled image and the validity mask.
pub fn apply_compensation(
    fi: &Image,
    fj: &Image,
    s: &SimilarityTransform,
) -> Result<(Image, Vec<bool>)> {
    let (mut out, valid) = warp_with_mask(fj, &s.inverse()?)?;
    let plane = fi.height() * fi.width();
    for c in 0..fi.channels() {
        let src = fi.plane(c);
        let dst = out.plane_mut(c);
        for i in 0..plane {
            if !valid[i] {
                dst[i] = src[i];
            }
        }
    }
    Ok((out, valid))
}

/// Smallest fraction of the target that must overlap a warped candidate.
pub const MIN_MATCH_OVERLAP: f64 = 0.25;

/// Mean absolute intensity difference between `target` and the registered
/// candidate over their overlap, on the 0-255 scale. `None` when
/// registration fails or the overlap is too small.
pub fn frame_distance(target: &Image, candidate: &Image) -> Option<f64> {
    if target.channels() != candidate.channels() {
        return None;
    }
    let resized;
    let cand = if target.same_extents(candidate) {
        candidate
    } else {
        resized =
            crate::image_ops::resize_bilinear(candidate, target.height(), target.width()).ok()?;
        &resized
    };
    let s = estimate_similarity(target, cand).ok()?;
    let (warped, valid) = warp_with_mask(cand, &s.inverse().ok()?).ok()?;
    let count = valid.iter().filter(|&&v| v).count();
    if (count as f64) < MIN_MATCH_OVERLAP * valid.len() as f64 {
        return None;
    }
    let plane = valid.len();
    let mut total = 0.0;
    for c in 0..target.channels() {
        let (a, b) = (target.plane(c), warped.plane(c));
        for i in 0..plane {
            if valid[i] {
                total += (a[i] - b[i]).abs() as f64;
            }
        }
    }
    Some(255.0 * total / (count * target.channels()) as f64)
}

/// Index of the first candidate whose [`frame_distance`] is below
/// `threshold * scale`.
pub fn match_frame(
    target: &Image,
    candidates: &[Image],
    threshold: f64,
    scale: f64,
) -> Option<usize> {
    assert!(threshold > 0.0, "threshold must be positive");
    candidates
        .iter()
        .position(|c| frame_distance(target, c).is_some_and(|d| d < threshold * scale))
}

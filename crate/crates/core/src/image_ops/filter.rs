use super::image::{reflect_index, Image};
use crate::error::{Error, Result};

/// Divisive-normalization floor shared by LCN and LMN.
pub const NORM_EPSILON: f32 = 0.01;

/// Normalized, truncated Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

fn convolve_rows(src: &[f32], h: usize, w: usize, taps: &[f64], out: &mut [f32]) {
    let r = (taps.len() / 2) as isize;
    let mut padded = vec![0.0f64; w + 2 * r as usize];
    let mut acc = vec![0.0f64; w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            *p = row[reflect_index(i as isize - r, w)] as f64;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &t) in taps.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(&padded[k..k + w]) {
                *a += t * v;
            }
        }
        for (o, &a) in out[y * w..(y + 1) * w].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
}

fn convolve_cols(src: &[f32], h: usize, w: usize, taps: &[f64], out: &mut [f32]) {
    let r = (taps.len() / 2) as isize;
    let mut acc = vec![0.0f64; w];
    for y in 0..h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &t) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - r, h);
            let row = &src[sy * w..(sy + 1) * w];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += t * v as f64;
            }
        }
        for (o, &a) in out[y * w..(y + 1) * w].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
}

fn blur_plane(src: &[f32], h: usize, w: usize, taps: &[f64]) -> Vec<f32> {
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    convolve_rows(src, h, w, taps, &mut tmp);
    convolve_cols(&tmp, h, w, taps, &mut out);
    out
}

/// Separable Gaussian blur with mirror borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        data.extend(blur_plane(img.plane(c), h, w, &taps));
    }
    Image::new(h, w, img.channels(), data)
}

/// Anti-aliased 2x decimation: Gaussian pre-blur (sigma 1) then every other pixel.
pub fn downsample2(img: &Image) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "downsample2 needs even extents, got {h}x{w}"
        )));
    }
    let blurred = gaussian_blur(img, 1.0)?;
    Ok(Image::from_fn(h / 2, w / 2, img.channels(), |c, y, x| {
        blurred.get(c, 2 * y, 2 * x)
    }))
}

/// Per-channel subtractive then divisive normalization with one Gaussian.
///
/// `c = x - G*x`, `s = sqrt(G*c^2)`, `out = c / max(s, eps)`.
fn local_normalize(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mean = blur_plane(plane, h, w, &taps);
        let centered: Vec<f32> = plane.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        let sq: Vec<f32> = centered.iter().map(|&v| v * v).collect();
        let var = blur_plane(&sq, h, w, &taps);
        data.extend(
            centered
                .iter()
                .zip(&var)
                .map(|(&v, &s2)| v / s2.max(0.0).sqrt().max(NORM_EPSILON)),
        );
    }
    Image::new(h, w, img.channels(), data)
}

/// Local contrast normalization for appearance channels.
pub fn lcn(img: &Image, sigma: f64) -> Result<Image> {
    local_normalize(img, sigma)
}

/// Local motion normalization: wide-kernel mean removal (cancels locally
/// constant background motion) followed by divisive normalization with the
/// same kernel. Applied per channel.
pub fn lmn(motion: &Image, sigma_large: f64) -> Result<Image> {
    local_normalize(motion, sigma_large)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f32>())
    }

    fn smooth_texture(h: usize, w: usize, seed: u64) -> Image {
        gaussian_blur(&noise(h, w, 1, seed), 2.0).unwrap()
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::constant(20, 17, 2, 0.3);
        let out = gaussian_blur(&img, 2.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let img = Image::zeros(4, 4, 1);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn impulse_center_weight_matches_2d_gaussian() {
        let mut img = Image::zeros(21, 21, 1);
        img.set(0, 10, 10, 1.0);
        let out = gaussian_blur(&img, 1.0).unwrap();
        // Direct evaluation: the truncated 1-D normalizer squared.
        let z: f64 = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum();
        let expected = 1.0 / (z * z);
        assert!((out.get(0, 10, 10) as f64 - expected).abs() < 1e-4);
        // Close to the continuous 1 / (2 pi sigma^2) as well.
        assert!((expected - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 2e-3);
    }

    #[test]
    fn separable_blur_matches_dense_2d_oracle() {
        let img = noise(24, 19, 1, 1);
        let sigma = 2.0f64;
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for i in -r..=r {
            for j in -r..=r {
                weights.push((
                    (i, j),
                    (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp(),
                ));
            }
        }
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let got = gaussian_blur(&img, sigma).unwrap();
        for y in 0..24 {
            for x in 0..19 {
                let mut acc = 0.0;
                for &((i, j), wt) in &weights {
                    let sy = reflect_index(y as isize + i, 24);
                    let sx = reflect_index(x as isize + j, 19);
                    acc += wt / total * img.get(0, sy, sx) as f64;
                }
                assert!((got.get(0, y, x) as f64 - acc).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn blur_preserves_mean() {
        // Mirror borders with a symmetric kernel conserve mass up to edge effects
        // that vanish on a periodic-looking fixture; measure on a smooth one.
        let img = smooth_texture(64, 64, 2);
        let out = gaussian_blur(&img, 1.5).unwrap();
        assert!((img.mean() - out.mean()).abs() < 1e-3);
        let flat = Image::constant(9, 9, 1, 0.25);
        assert!((gaussian_blur(&flat, 3.0).unwrap().mean() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn downsample_constant_and_odd() {
        let img = Image::constant(8, 6, 3, 0.7);
        let d = downsample2(&img).unwrap();
        assert_eq!((d.height(), d.width()), (4, 3));
        assert!(d.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(downsample2(&Image::zeros(5, 4, 1)).is_err());
        let q = downsample2(&downsample2(&Image::zeros(16, 12, 1)).unwrap()).unwrap();
        assert_eq!((q.height(), q.width()), (4, 3));
    }

    #[test]
    fn downsample_suppresses_checkerboard() {
        let img = Image::from_fn(32, 32, 1, |_, y, x| ((x + y) % 2) as f32);
        let d = downsample2(&img).unwrap();
        let worst = d
            .data()
            .iter()
            .map(|&v| (v - 0.5).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.1, "residual aliasing {worst}");
    }

    #[test]
    fn lcn_of_constant_is_zero() {
        let out = lcn(&Image::constant(30, 30, 3, 0.4), 4.0).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn lcn_zeroes_affine_ramps() {
        let ramp = Image::from_fn(80, 80, 1, |_, y, x| {
            0.2 + 0.004 * x as f32 + 0.002 * y as f32
        });
        let out = lcn(&ramp, 4.0).unwrap();
        for y in 12..68 {
            for x in 12..68 {
                assert!(out.get(0, y, x).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn lcn_contrast_invariance() {
        let img = smooth_texture(64, 64, 3);
        let a = lcn(&img, 4.0).unwrap();
        let doubled = Image::from_fn(64, 64, 1, |c, y, x| 2.0 * img.get(c, y, x));
        let b = lcn(&doubled, 4.0).unwrap();
        let taps = gaussian_kernel(4.0).unwrap();
        let centered: Vec<f32> = {
            let m = blur_plane(img.plane(0), 64, 64, &taps);
            img.plane(0).iter().zip(&m).map(|(v, m)| v - m).collect()
        };
        let sq: Vec<f32> = centered.iter().map(|v| v * v).collect();
        let var = blur_plane(&sq, 64, 64, &taps);
        for i in 0..64 * 64 {
            if var[i].sqrt() > 10.0 * NORM_EPSILON {
                assert!((a.data()[i] - b.data()[i]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn lcn_output_is_centered_on_texture() {
        // The Gaussian-weighted local mean of the divisive stage is not zero
        // for general textures (pointwise division breaks linearity); what
        // holds is a near-zero local mean after subtraction and a
        // zero-centered, unit-scale output over the interior.
        let img = smooth_texture(96, 96, 4);
        let taps = gaussian_kernel(4.0).unwrap();
        let m = blur_plane(img.plane(0), 96, 96, &taps);
        let sub: Vec<f32> = img.plane(0).iter().zip(&m).map(|(v, m)| v - m).collect();
        let sub_local = blur_plane(&sub, 96, 96, &taps);
        let out = lcn(&img, 4.0).unwrap();
        let interior: Vec<(usize, usize)> = (20..76)
            .flat_map(|y| (20..76).map(move |x| (y, x)))
            .collect();
        let worst_sub = interior
            .iter()
            .map(|&(y, x)| sub_local[y * 96 + x].abs())
            .fold(0.0f32, f32::max);
        assert!(worst_sub < 0.05, "subtractive local mean {worst_sub}");
        let vals: Vec<f32> = interior.iter().map(|&(y, x)| out.get(0, y, x)).collect();
        let mean = vals.iter().sum::<f32>() / vals.len() as f32;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32).sqrt();
        assert!(mean.abs() < 0.05, "interior mean {mean}");
        assert!((0.7..1.3).contains(&std), "interior std {std}");
    }

    #[test]
    fn lmn_removes_constant_motion() {
        let pan = Image::constant(60, 60, 1, 2.5);
        let out = lmn(&pan, 12.0).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() <= 1e-3));
    }

    #[test]
    fn lmn_additive_and_velocity_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = gaussian_blur(
            &Image::from_fn(96, 96, 2, |_, _, _| rng.gen_range(0.0..3.0)),
            3.0,
        )
        .unwrap();
        let a = lmn(&base, 12.0).unwrap();
        let shifted = Image::from_fn(96, 96, 2, |c, y, x| base.get(c, y, x) + 1.75);
        let doubled = Image::from_fn(96, 96, 2, |c, y, x| 2.0 * base.get(c, y, x));
        let b = lmn(&shifted, 12.0).unwrap();
        let d = lmn(&doubled, 12.0).unwrap();
        for c in 0..2 {
            for y in 36..60 {
                for x in 36..60 {
                    assert!((a.get(c, y, x) - b.get(c, y, x)).abs() <= 1e-3);
                    assert!((a.get(c, y, x) - d.get(c, y, x)).abs() <= 1e-3);
                }
            }
        }
    }

    #[test]
    fn lmn_keeps_moving_blob_peak() {
        let blob = Image::from_fn(96, 96, 1, |_, y, x| {
            let d2 = (y as f32 - 48.0).powi(2) + (x as f32 - 48.0).powi(2);
            3.0 * (-d2 / 50.0).exp()
        });
        let out = lmn(&blob, 12.0).unwrap();
        assert!(out.get(0, 48, 48) > 0.5);
        let max = out.data().iter().cloned().fold(f32::MIN, f32::max);
        assert!((out.get(0, 48, 48) - max).abs() < 1e-3);
    }
}

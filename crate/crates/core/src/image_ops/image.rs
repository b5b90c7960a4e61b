use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar float image: `data[(c * height + y) * width + x]`.
///
/// RGB frames hold values in `[0, 1]`; motion planes hold signed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("image value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::constant(height, width, channels, 0.0)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_extents(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_extents(other) && self.channels == other.channels {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other, "mean_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64)
    }

    /// Channels `[start, end)` as a new image.
    pub fn select_channels(&self, start: usize, end: usize) -> Result<Image> {
        if start >= end || end > self.channels {
            return Err(Error::invalid(format!(
                "channel range {start}..{end} outside {} channels",
                self.channels
            )));
        }
        let n = self.height * self.width;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: end - start,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    pub fn stack(parts: &[&Image]) -> Result<Image> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero images"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if !p.same_extents(first) {
                return Err(Error::invalid("stack: extents differ"));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            height: first.height,
            width: first.width,
            channels,
            data,
        })
    }

    /// ITU-R 601 luma of an RGB image; single-channel images pass through.
    pub fn to_gray(&self) -> Image {
        if self.channels != 3 {
            return self.select_channels(0, 1).expect("at least one channel");
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop ({y0},{x0}) {h}x{w} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, self.channels, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Mirror padding (edge pixel not repeated).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Image {
        let (h, w) = (self.height, self.width);
        Image::from_fn(
            h + top + bottom,
            w + left + right,
            self.channels,
            |c, y, x| {
                let sy = reflect_index(y as isize - top as isize, h);
                let sx = reflect_index(x as isize - left as isize, w);
                self.get(c, sy, sx)
            },
        )
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        Image::from_fn(self.height, w, self.channels, |c, y, x| {
            self.get(c, y, w - 1 - x)
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image extents are positive")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let (c, h, w) = t.dims3()?;
        Image::new(
            h,
            w,
            c,
            t.data().iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Reads an 8-bit PNG as RGB in `[0, 1]`.
    pub fn read_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image::from_fn(h, w, 3, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }

    /// Writes a 1- or 3-channel image as an 8-bit PNG, clamping to `[0, 1]`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            3 => {
                let buf = image::RgbImage::from_fn(w, h, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([
                        q(self.get(0, y, x)),
                        q(self.get(1, y, x)),
                        q(self.get(2, y, x)),
                    ])
                });
                buf.save(path)?;
            }
            1 => {
                let buf = image::GrayImage::from_fn(w, h, |x, y| {
                    image::Luma([q(self.get(0, y as usize, x as usize))])
                });
                buf.save(path)?;
            }
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Raw float plane file: u32 LE height, width, channels, then f32 LE
    /// values row-major per channel.
    pub fn write_f32p(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(12);
        for d in [self.height, self.width, self.channels] {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&body).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_f32p(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::decode_f32p(&bytes).map_err(|e| match e {
            Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn decode_f32p(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 12 {
            return Err(Error::invalid("f32p header truncated"));
        }
        let dim =
            |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::invalid("f32p extents overflow"))?;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::invalid(format!(
                "f32p body has {} bytes, header implies {}",
                bytes.len() - 12,
                4 * n
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::new(h, w, c, data)
    }
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn new_rejects_non_finite_and_bad_len() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(matches!(
            Image::new(1, 1, 1, vec![f32::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn f32p_round_trip_and_truncation() {
        let img = Image::from_fn(3, 5, 2, |c, y, x| (c * 100 + y * 10 + x) as f32 - 7.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32p");
        img.write_f32p(&p).unwrap();
        assert_eq!(Image::read_f32p(&p).unwrap(), img);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert!(Image::decode_f32p(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let img = Image::from_fn(4, 6, 3, |c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.write_png(&p).unwrap();
        let back = Image::read_png(&p).unwrap();
        assert!(back.mean_abs_diff(&img).unwrap() < 1e-7);
    }
}

use serde::{Deserialize, Serialize};

use super::filter::{downsample2, lcn, lmn};
use super::image::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which normalization a channel receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    /// RGB of the reference frame: LCN.
    Appearance,
    /// Motion-derived channel: LMN.
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub lcn_sigma: f64,
    pub lmn_sigma: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            lcn_sigma: 4.0,
            lmn_sigma: 12.0,
        }
    }
}

/// Normalized multi-resolution input: bank `k` has extents `H / 2^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    banks: Vec<Tensor<T>>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn from_banks(banks: Vec<Tensor<T>>) -> Result<Self> {
        if banks.is_empty() {
            return Err(Error::invalid("pyramid needs at least one bank"));
        }
        let (c, h, w) = banks[0].dims3()?;
        for (k, b) in banks.iter().enumerate() {
            let (bc, bh, bw) = b.dims3()?;
            if bc != c || bh << k != h || bw << k != w {
                return Err(Error::invalid(format!(
                    "bank {k} is {bc}x{bh}x{bw}; expected {c}x{}x{}",
                    h >> k,
                    w >> k
                )));
            }
        }
        Ok(Self { banks })
    }

    pub fn banks(&self) -> &[Tensor<T>] {
        &self.banks
    }

    pub fn bank(&self, k: usize) -> &Tensor<T> {
        &self.banks[k]
    }

    pub fn num_banks(&self) -> usize {
        self.banks.len()
    }

    /// `(channels, height, width)` of the finest bank.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.banks[0].dims3().expect("validated")
    }

    /// Crops every bank at the matching location. Origin and size are in
    /// finest-bank pixels and must be divisible by `2^(banks-1)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let unit = 1usize << (self.banks.len() - 1);
        if y0 % unit != 0 || x0 % unit != 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::invalid(format!(
                "pyramid crop ({y0},{x0}) {h}x{w} not aligned to {unit}"
            )));
        }
        let banks = self
            .banks
            .iter()
            .enumerate()
            .map(|(k, b)| b.crop3(y0 >> k, x0 >> k, h >> k, w >> k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { banks })
    }

    pub fn cast<U: Scalar>(&self) -> Pyramid<U> {
        Pyramid {
            banks: self.banks.iter().map(|b| b.cast()).collect(),
        }
    }
}

/// Normalizes each channel with LCN or LMN according to `kinds`.
pub fn normalize_stack(
    stack: &Image,
    kinds: &[ChannelKind],
    norm: &NormalizationParams,
) -> Result<Image> {
    if kinds.len() != stack.channels() {
        return Err(Error::invalid(format!(
            "{} channel kinds for a {}-channel stack",
            kinds.len(),
            stack.channels()
        )));
    }
    let mut planes = Vec::with_capacity(kinds.len());
    for (c, kind) in kinds.iter().enumerate() {
        let plane = stack.select_channels(c, c + 1)?;
        planes.push(match kind {
            ChannelKind::Appearance => lcn(&plane, norm.lcn_sigma)?,
            ChannelKind::Motion => lmn(&plane, norm.lmn_sigma)?,
        });
    }
    Image::stack(&planes.iter().collect::<Vec<_>>())
}

/// Bank `k` is the stack downsampled `k` times, then normalized with the
/// same kernels as every other bank.
pub fn build_pyramid<T: Scalar>(
    stack: &Image,
    kinds: &[ChannelKind],
    banks: usize,
    norm: &NormalizationParams,
) -> Result<Pyramid<T>> {
    if banks == 0 {
        return Err(Error::invalid("banks must be at least 1"));
    }
    let unit = 1usize << (banks - 1);
    if stack.height() % unit != 0 || stack.width() % unit != 0 {
        return Err(Error::invalid(format!(
            "{}x{} not divisible by {unit} for {banks} banks",
            stack.height(),
            stack.width()
        )));
    }
    let mut level = stack.clone();
    let mut out = Vec::with_capacity(banks);
    for k in 0..banks {
        if k > 0 {
            level = downsample2(&level)?;
        }
        out.push(normalize_stack(&level, kinds, norm)?.to_tensor());
    }
    Pyramid::from_banks(out)
}

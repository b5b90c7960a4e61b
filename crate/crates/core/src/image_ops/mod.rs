//! Image containers, Gaussian filtering, warps, normalization and pyramids.

mod filter;
mod image;
mod pyramid;
mod warp;

pub use filter::{downsample2, gaussian_blur, gaussian_kernel, lcn, lmn, NORM_EPSILON};
pub use image::{reflect_index, Image};
pub use pyramid::{build_pyramid, normalize_stack, ChannelKind, NormalizationParams, Pyramid};
pub use warp::{resize_bilinear, sample_bilinear, warp, warp_with_mask};

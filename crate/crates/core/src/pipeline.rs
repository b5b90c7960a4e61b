//! From a raw feature stack to response maps in image coordinates.

use crate::convnet::{forward_oneshot, GridMeta, ModelParams, NetworkConfig, ResponseMaps};
use crate::error::{Error, Result};
use crate::image_ops::{build_pyramid, ChannelKind, Image, NormalizationParams, Pyramid};
use crate::scalar::Scalar;

/// Reflection padding that centres cell `(y, x)` on image point
/// `(stride*y + stride/2, stride*x + stride/2)` and covers every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Padding {
    pub fn for_image(cfg: &NetworkConfig, height: usize, width: usize) -> Self {
        let s = cfg.stride_out();
        let unit = 1 << (cfg.banks - 1);
        let lead = cfg.centering_pad();
        let axis = |len: usize| {
            let cells = len.div_ceil(s).max(1);
            let total = (cfg.context() + s * (cells - 1)).next_multiple_of(unit);
            (cells, total - len - lead)
        };
        let (rows, bottom) = axis(height);
        let (cols, right) = axis(width);
        Self {
            top: lead,
            bottom,
            left: lead,
            right,
            rows,
            cols,
        }
    }
}

/// Normalized pyramid of a padded stack.
#[derive(Clone, Debug)]
pub struct PreparedInput<T> {
    pub pyramid: Pyramid<T>,
    pub padding: Padding,
    stride: usize,
    context: usize,
}

impl<T: Scalar> PreparedInput<T> {
    /// Grid of the full output in unpadded image coordinates.
    pub fn grid(&self, cfg: &NetworkConfig) -> GridMeta {
        cfg.grid()
            .offset(-(self.padding.top as f64), -(self.padding.left as f64))
    }

    /// Sub-pyramid whose one-shot output is cells `[y0, y0+rows) x [x0, x0+cols)`
    /// of the full output, with the matching grid.
    pub fn crop_cells(
        &self,
        cfg: &NetworkConfig,
        y0: usize,
        x0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<(Pyramid<T>, GridMeta)> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("empty cell crop"));
        }
        let s = self.stride;
        let pyr = self.pyramid.crop(
            s * y0,
            s * x0,
            self.context + s * (rows - 1),
            self.context + s * (cols - 1),
        )?;
        let grid = self.grid(cfg).offset((s * y0) as f64, (s * x0) as f64);
        Ok((pyr, grid))
    }
}

/// Pads, normalizes and decimates a feature stack for `cfg`.
pub fn prepare_input<T: Scalar>(
    stack: &Image,
    kinds: &[ChannelKind],
    cfg: &NetworkConfig,
    norm: &NormalizationParams,
) -> Result<PreparedInput<T>> {
    if stack.channels() != cfg.input_channels {
        return Err(Error::invalid(format!(
            "stack has {} channels, network expects {}",
            stack.channels(),
            cfg.input_channels
        )));
    }
    let padding = Padding::for_image(cfg, stack.height(), stack.width());
    let padded = stack.pad_reflect(padding.top, padding.bottom, padding.left, padding.right);
    let pyramid = build_pyramid(&padded, kinds, cfg.banks, norm)?;
    Ok(PreparedInput {
        pyramid,
        padding,
        stride: cfg.stride_out(),
        context: cfg.context(),
    })
}

/// Response maps covering the image, one cell per `stride x stride` block.
pub fn infer<T: Scalar>(
    params: &ModelParams<T>,
    stack: &Image,
    kinds: &[ChannelKind],
    norm: &NormalizationParams,
) -> Result<ResponseMaps<T>> {
    let cfg = params.config();
    let input = prepare_input(stack, kinds, cfg, norm)?;
    let out = forward_oneshot(params, &input.pyramid)?;
    let maps = out
        .maps
        .crop3(0, 0, input.padding.rows, input.padding.cols)?;
    Ok(ResponseMaps {
        maps,
        grid: input.grid(cfg),
    })
}

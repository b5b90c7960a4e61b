use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::image_ops::{resize_bilinear, ChannelKind, Image};

/// One training example: unnormalized feature stack and its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub stack: Image,
    pub kinds: Vec<ChannelKind>,
    /// Horizontal-flow channel, negated when the sample is mirrored.
    pub flow_u: Option<usize>,
    pub annotation: Annotation,
    pub clip_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.85,
            scale_max: 1.15,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

/// Random flip and rescale drawn from `rng`.
pub fn augment(sample: &TrainSample, rng: &mut impl Rng, p: &AugmentParams) -> TrainSample {
    let flip = rng.gen::<f64>() < p.flip_prob;
    let scale = if p.scale_max > p.scale_min {
        rng.gen_range(p.scale_min..p.scale_max)
    } else {
        p.scale_min
    };
    apply_augmentation(sample, flip, scale)
}

/// Mirrors (negating horizontal flow and swapping left/right labels) and
/// resamples every channel by `scale`; joints follow the exact resampled
/// extents.
pub fn apply_augmentation(sample: &TrainSample, flip: bool, scale: f64) -> TrainSample {
    let mut out = sample.clone();
    if flip {
        out.stack = out.stack.flip_horizontal();
        if let Some(c) = out.flow_u {
            out.stack.plane_mut(c).iter_mut().for_each(|v| *v = -*v);
        }
        out.annotation = out.annotation.flip_horizontal(out.stack.width());
    }
    if scale != 1.0 {
        let (h, w) = (out.stack.height(), out.stack.width());
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        out.stack = resize_bilinear(&out.stack, nh, nw).expect("nonempty");
        out.annotation = out
            .annotation
            .scale(nw as f64 / w as f64, nh as f64 / h as f64);
    }
    out
}

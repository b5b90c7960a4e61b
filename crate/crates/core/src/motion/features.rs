use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::flow::{estimate_flow_with, flow_magnitude, FlowParams};
use super::similarity::{apply_compensation, estimate_similarity};
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::image_ops::{ChannelKind, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Appearance only; no second frame.
    Rgb,
    FramePair,
    FrameDiff,
    Flow2d,
    FlowMag,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Rgb,
        FeatureKind::FramePair,
        FeatureKind::FrameDiff,
        FeatureKind::Flow2d,
        FeatureKind::FlowMag,
    ];

    pub fn channels(self) -> usize {
        self.channel_kinds().len()
    }

    pub fn channel_kinds(self) -> Vec<ChannelKind> {
        use ChannelKind::*;
        let mut kinds = vec![Appearance; 3];
        match self {
            FeatureKind::Rgb => {}
            FeatureKind::FramePair => kinds.extend([Appearance; 3]),
            FeatureKind::FrameDiff => kinds.extend([Motion; 3]),
            FeatureKind::Flow2d => kinds.extend([Motion; 2]),
            FeatureKind::FlowMag => kinds.push(Motion),
        }
        kinds
    }

    /// Channel holding horizontal flow, negated under a horizontal flip.
    pub fn flow_u_channel(self) -> Option<usize> {
        (self == FeatureKind::Flow2d).then_some(3)
    }

    pub fn uses_motion(self) -> bool {
        self != FeatureKind::Rgb
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Rgb => "rgb",
            FeatureKind::FramePair => "pair",
            FeatureKind::FrameDiff => "diff",
            FeatureKind::Flow2d => "flow",
            FeatureKind::FlowMag => "flowmag",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFeatureConfig {
    pub kind: FeatureKind,
    pub delta: i32,
    pub compensate_camera: bool,
}

impl MotionFeatureConfig {
    pub fn new(kind: FeatureKind, delta: i32, compensate_camera: bool) -> Result<Self> {
        if delta == 0 {
            return Err(Error::invalid("frame offset delta must be nonzero"));
        }
        Ok(Self {
            kind,
            delta,
            compensate_camera,
        })
    }
}

impl Default for MotionFeatureConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::FlowMag,
            delta: 3,
            compensate_camera: false,
        }
    }
}

/// Feature stack plus how each channel is normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub image: Image,
    pub kinds: Vec<ChannelKind>,
    /// Estimated camera motion when compensation ran; `None` if disabled or
    /// estimation failed.
    pub camera: Option<SimilarityTransform>,
}

/// `f_j - f_i` per channel.
pub fn frame_difference(fi: &Image, fj: &Image) -> Result<Image> {
    fi.ensure_same_shape(fj, "frame_difference")?;
    let data = fi
        .data()
        .iter()
        .zip(fj.data())
        .map(|(a, b)| b - a)
        .collect();
    Image::new(fi.height(), fi.width(), fi.channels(), data)
}

/// Builds the channel stack for `cfg.kind` from the reference frame `f_i`
/// and the frame `f_j` at offset `cfg.delta`. With compensation enabled a
/// failed registration falls back to the uncompensated frame.
pub fn make_feature(
    cfg: &MotionFeatureConfig,
    fi: &Image,
    fj: &Image,
    flow: &FlowParams,
) -> Result<FeatureStack> {
    if fi.channels() != 3 {
        return Err(Error::invalid(format!(
            "reference frame needs 3 channels, got {}",
            fi.channels()
        )));
    }
    fi.ensure_same_shape(fj, "make_feature")?;
    let kinds = cfg.kind.channel_kinds();
    if cfg.kind == FeatureKind::Rgb {
        return Ok(FeatureStack {
            image: fi.clone(),
            kinds,
            camera: None,
        });
    }
    let mut camera = None;
    let compensated;
    let fj = if cfg.compensate_camera {
        match estimate_similarity(fi, fj) {
            Ok(s) => {
                camera = Some(s);
                compensated = apply_compensation(fi, fj, &s)?.0;
                &compensated
            }
            Err(Error::EstimationFailed(msg)) => {
                log::warn!("camera compensation skipped: {msg}");
                fj
            }
            Err(e) => return Err(e),
        }
    } else {
        fj
    };
    let motion = match cfg.kind {
        FeatureKind::FramePair => fj.clone(),
        FeatureKind::FrameDiff => frame_difference(fi, fj)?,
        FeatureKind::Flow2d => estimate_flow_with(fi, fj, flow)?.to_image(),
        FeatureKind::FlowMag => flow_magnitude(&estimate_flow_with(fi, fj, flow)?),
        FeatureKind::Rgb => unreachable!(),
    };
    Ok(FeatureStack {
        image: Image::stack(&[fi, &motion])?,
        kinds,
        camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::{gaussian_blur, warp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f32>());
        let b = gaussian_blur(&noise, 2.0).unwrap();
        Image::from_fn(h, w, 3, |c, y, x| {
            (0.5 + 4.0 * (b.get(c, y, x) - 0.5)).clamp(0.0, 1.0)
        })
    }

    fn blob(h: usize, w: usize, cy: f32, cx: f32) -> Image {
        Image::from_fn(h, w, 3, |_, y, x| {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            if d2 <= 9.0 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn difference_examples() {
        let a = textured(20, 24, 1);
        assert!(frame_difference(&a, &a)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let b = textured(20, 24, 2);
        let d = frame_difference(&a, &b).unwrap();
        assert!(d.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(frame_difference(&a, &textured(20, 25, 1)).is_err());
    }

    #[test]
    fn moved_blob_difference_is_local() {
        let a = blob(30, 40, 15.0, 10.0);
        let b = blob(30, 40, 15.0, 15.0);
        let d = frame_difference(&a, &b).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                if d.get(0, y, x) != 0.0 {
                    let near_old = (y as f32 - 15.0).powi(2) + (x as f32 - 10.0).powi(2) <= 9.0;
                    let near_new = (y as f32 - 15.0).powi(2) + (x as f32 - 15.0).powi(2) <= 9.0;
                    assert!(near_old || near_new);
                }
            }
        }
        assert!(d.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn channel_counts() {
        let counts: Vec<usize> = [
            FeatureKind::FramePair,
            FeatureKind::FrameDiff,
            FeatureKind::Flow2d,
            FeatureKind::FlowMag,
        ]
        .iter()
        .map(|k| k.channels())
        .collect();
        assert_eq!(counts, vec![6, 6, 5, 4]);
        let a = textured(24, 24, 3);
        let b = textured(24, 24, 4);
        let flow = FlowParams {
            iters: 5,
            ..FlowParams::default()
        };
        for k in FeatureKind::ALL {
            let cfg = MotionFeatureConfig::new(k, 2, false).unwrap();
            let s = make_feature(&cfg, &a, &b, &flow).unwrap();
            assert_eq!(s.image.channels(), k.channels());
            assert_eq!(s.kinds.len(), k.channels());
        }
    }

    #[test]
    fn flowmag_on_identical_frames_is_zero() {
        let a = textured(32, 32, 5);
        let cfg = MotionFeatureConfig::new(FeatureKind::FlowMag, 3, false).unwrap();
        let s = make_feature(&cfg, &a, &a, &FlowParams::default()).unwrap();
        assert_eq!(s.image.select_channels(0, 3).unwrap(), a);
        assert!(s.image.plane(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compensation_on_static_camera_matches_off() {
        let a = textured(96, 128, 6);
        let b = warp(
            &a,
            &crate::geometry::SimilarityTransform::translation(0.0, 0.0),
        )
        .unwrap();
        let b = Image::from_fn(96, 128, 3, |c, y, x| {
            if (40..56).contains(&y) && (60..76).contains(&x) {
                1.0 - b.get(c, y, x)
            } else {
                a.get(c, y, x)
            }
        });
        let off = MotionFeatureConfig::new(FeatureKind::FrameDiff, 1, false).unwrap();
        let on = MotionFeatureConfig {
            compensate_camera: true,
            ..off
        };
        let flow = FlowParams::default();
        let x = make_feature(&off, &a, &b, &flow).unwrap();
        let y = make_feature(&on, &a, &b, &flow).unwrap();
        assert!(y.camera.is_some());
        assert!(x.image.mean_abs_diff(&y.image).unwrap() <= 0.02);
    }

    #[test]
    fn zero_delta_rejected_and_kind_parsing() {
        assert!(MotionFeatureConfig::new(FeatureKind::FlowMag, 0, false).is_err());
        for k in FeatureKind::ALL {
            assert_eq!(k.as_str().parse::<FeatureKind>().unwrap(), k);
        }
        assert!("optical".parse::<FeatureKind>().is_err());
    }
}

//! Synthetic articulated figures: a torso with head and two 2-link arms,
//! rendered as anti-aliased capsules over a flat, cluttered or camouflage
//! background.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, Point, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::image_ops::{gaussian_blur, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    Plain,
    Cluttered,
    /// Limbs carry the same random texture statistics as the background.
    Camouflage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    None,
    Pan,
    Full,
}

macro_rules! str_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::invalid(format!(concat!("unknown ", stringify!($t), " {:?}"), s))),
                }
            }
        }
    };
}

str_enum!(TextureMode, Plain => "plain", Cluttered => "cluttered", Camouflage => "camouflage");
str_enum!(CameraMode, None => "none", Pan => "pan", Full => "full");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// 1, or 2 with an unannotated distractor.
    pub people: usize,
    pub texture: TextureMode,
    pub camera: CameraMode,
    /// Frames rendered per clip; frame 0 is the annotated reference.
    pub frames: usize,
    /// Neck to hip.
    pub torso_length: f64,
    pub torso_radius: f64,
    pub head_radius: f64,
    /// Shoulder distance from the torso axis.
    pub shoulder_offset: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub limb_radius: f64,
    /// Joint angular speed range, rad/frame.
    pub angular_speed: [f64; 2],
    /// Whole-figure drift speed range, px/frame.
    pub drift_speed: [f64; 2],
    /// Camera translation speed range, px/frame.
    pub pan_speed: [f64; 2],
    /// Largest per-frame camera zoom (`|s - 1|`) and roll (rad) in full mode.
    pub zoom_rate: f64,
    pub roll_rate: f64,
    /// Smallest distance between any figure pixel and the frame border.
    pub margin: f64,
    /// Smallest distance between each joint (and torso anchor) of the
    /// annotated figure and the same joint of the distractor.
    pub distractor_distance: f64,
    /// Body size factor applied to both figures in two-person scenes.
    pub pair_scale: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 240,
            height: 180,
            people: 1,
            texture: TextureMode::Plain,
            camera: CameraMode::None,
            frames: 11,
            torso_length: 76.0,
            torso_radius: 13.0,
            head_radius: 11.0,
            shoulder_offset: 19.0,
            upper_arm: 34.0,
            forearm: 32.0,
            limb_radius: 4.5,
            angular_speed: [0.03, 0.08],
            drift_speed: [0.5, 1.5],
            pan_speed: [1.5, 3.0],
            zoom_rate: 0.01,
            roll_rate: 0.01,
            margin: 12.0,
            distractor_distance: 80.0,
            pair_scale: 0.7,
            max_retries: 5000,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Body dimensions actually drawn: scaled by `pair_scale` with two people.
    pub fn body(&self) -> SceneConfig {
        if self.people < 2 {
            return self.clone();
        }
        let s = self.pair_scale;
        SceneConfig {
            torso_length: self.torso_length * s,
            torso_radius: self.torso_radius * s,
            head_radius: self.head_radius * s,
            shoulder_offset: self.shoulder_offset * s,
            upper_arm: self.upper_arm * s,
            forearm: self.forearm * s,
            limb_radius: self.limb_radius * s,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("scene config: {m}")));
        if self.width < 32 || self.height < 32 {
            return bad("frames must be at least 32x32");
        }
        if !(1..=2).contains(&self.people) {
            return bad("people must be 1 or 2");
        }
        if self.frames < 2 {
            return bad("a clip needs at least 2 frames");
        }
        let lengths = [
            self.torso_length,
            self.torso_radius,
            self.head_radius,
            self.shoulder_offset,
            self.upper_arm,
            self.forearm,
            self.limb_radius,
        ];
        if lengths.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("body dimensions must be positive");
        }
        for r in [self.angular_speed, self.drift_speed, self.pan_speed] {
            if !(r[0] >= 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return bad("speed ranges must satisfy 0 <= lo <= hi");
            }
        }
        if !(self.zoom_rate >= 0.0
            && self.zoom_rate < 0.5
            && self.roll_rate >= 0.0
            && self.margin >= 0.0)
        {
            return bad("camera rates and margin out of range");
        }
        if !(self.pair_scale > 0.0 && self.pair_scale <= 1.0) {
            return bad("pair_scale must lie in (0, 1]");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

/// Random texture value field with the given contrast gain.
fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize, gain: f32) -> Result<Image> {
    let raw = Image::from_fn(h, w, 1, |_, _, _| rng.gen::<f32>());
    let mut b = gaussian_blur(&raw, 1.0)?;
    b.data_mut()
        .iter_mut()
        .for_each(|v| *v = (0.5 + gain * (*v - 0.5)).clamp(0.0, 1.0));
    Ok(b)
}

const TEXTURE_GAIN: f32 = 3.0;

/// Field sampled in its own coordinates shifted by `offset`, clamped at the edges.
#[derive(Clone, Debug)]
struct Field {
    image: Image,
    offset: f64,
}

impl Field {
    fn sample(&self, x: f64, y: f64) -> f32 {
        let (h, w) = (self.image.height(), self.image.width());
        let fx = (x + self.offset - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = (y + self.offset - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let p = self.image.plane(0);
        let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
        let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Maps a texture value to a color.
#[derive(Clone, Copy, Debug)]
struct Tint {
    base: [f32; 3],
    amp: [f32; 3],
}

impl Tint {
    fn color(&self, t: f32) -> [f32; 3] {
        std::array::from_fn(|c| (self.base[c] + self.amp[c] * (t - 0.5)).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug)]
enum Background {
    Flat([f32; 3]),
    Textured(Field, Tint),
}

#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: Point,
    b: Point,
    r: f64,
}

impl Capsule {
    /// Distance from `p` to the segment and the `(u, v)` coordinates of `p`
    /// in the segment frame.
    fn locate(&self, p: Point) -> (f64, f64, f64) {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len = dx.hypot(dy);
        let (px, py) = (p[0] - self.a[0], p[1] - self.a[1]);
        if len == 0.0 {
            return (px.hypot(py), px, py);
        }
        let (tx, ty) = (dx / len, dy / len);
        let u = px * tx + py * ty;
        let v = -px * ty + py * tx;
        let t = u.clamp(0.0, len);
        let d = (px - t * tx).hypot(py - t * ty);
        (d, u, v)
    }

    fn coverage(&self, d: f64) -> f32 {
        (self.r + 0.5 - d).clamp(0.0, 1.0) as f32
    }

    fn bbox(&self) -> [f64; 4] {
        let pad = self.r + 1.0;
        [
            self.a[0].min(self.b[0]) - pad,
            self.a[1].min(self.b[1]) - pad,
            self.a[0].max(self.b[0]) + pad,
            self.a[1].max(self.b[1]) + pad,
        ]
    }
}

/// Joint angles are indexed `[side][upper, elbow]`, side 0 being the
/// figure's left (image right when facing the camera).
#[derive(Clone, Debug)]
struct Figure {
    neck: Point,
    tilt: f64,
    angles: [[f64; 2]; 2],
    omega: [[f64; 2]; 2],
    drift: Point,
    torso_color: [f32; 3],
    limb_color: [f32; 3],
    /// Camouflage textures per limb, `[side * 2 + segment]`.
    limb_fields: Vec<Field>,
}

/// World-space body at one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    neck: Point,
    hip: Point,
    head: Point,
    shoulder: [Point; 2],
    elbow: [Point; 2],
    wrist: [Point; 2],
}

impl Pose {
    fn joints(&self) -> [Point; NUM_JOINTS] {
        [
            self.shoulder[0],
            self.elbow[0],
            self.wrist[0],
            self.shoulder[1],
            self.elbow[1],
            self.wrist[1],
        ]
    }

    fn points(&self) -> impl Iterator<Item = Point> {
        let j = self.joints();
        j.into_iter().chain([self.neck, self.hip])
    }
}

fn add(a: Point, b: Point, s: f64) -> Point {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

impl Figure {
    fn pose(&self, cfg: &SceneConfig, k: usize) -> Pose {
        let t = k as f64;
        let neck = add(self.neck, self.drift, t);
        let down = [self.tilt.sin(), self.tilt.cos()];
        let right = [self.tilt.cos(), -self.tilt.sin()];
        let hip = add(neck, down, cfg.torso_length);
        let head = add(neck, down, -(cfg.head_radius + 1.0));
        let mut shoulder = [[0.0; 2]; 2];
        let mut elbow = [[0.0; 2]; 2];
        let mut wrist = [[0.0; 2]; 2];
        for side in 0..2 {
            let out = if side == 0 { 1.0 } else { -1.0 };
            let dir = |phi: f64| {
                [
                    phi.cos() * down[0] + out * phi.sin() * right[0],
                    phi.cos() * down[1] + out * phi.sin() * right[1],
                ]
            };
            let a1 = self.angles[side][0] + t * self.omega[side][0];
            let a2 = a1 + self.angles[side][1] + t * self.omega[side][1];
            shoulder[side] = add(
                add(neck, right, out * cfg.shoulder_offset),
                down,
                0.4 * cfg.limb_radius + 3.0,
            );
            elbow[side] = add(shoulder[side], dir(a1), cfg.upper_arm);
            wrist[side] = add(elbow[side], dir(a2), cfg.forearm);
        }
        Pose {
            neck,
            hip,
            head,
            shoulder,
            elbow,
            wrist,
        }
    }

    fn limbs(cfg: &SceneConfig, p: &Pose) -> [Capsule; 4] {
        let r = cfg.limb_radius;
        [
            Capsule {
                a: p.shoulder[0],
                b: p.elbow[0],
                r,
            },
            Capsule {
                a: p.elbow[0],
                b: p.wrist[0],
                r,
            },
            Capsule {
                a: p.shoulder[1],
                b: p.elbow[1],
                r,
            },
            Capsule {
                a: p.elbow[1],
                b: p.wrist[1],
                r,
            },
        ]
    }

    fn body(cfg: &SceneConfig, p: &Pose) -> [Capsule; 2] {
        [
            Capsule {
                a: p.neck,
                b: p.hip,
                r: cfg.torso_radius,
            },
            Capsule {
                a: p.head,
                b: p.head,
                r: cfg.head_radius,
            },
        ]
    }
}

fn contrasting(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let dark = rng.gen_bool(0.5);
    std::array::from_fn(|_| {
        if dark {
            rng.gen_range(0.02..0.18)
        } else {
            rng.gen_range(0.82..0.98)
        }
    })
}

fn speed(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    let m = if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    };
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// `slot` is the horizontal band `[lo, hi)` (fractions of the width) for the neck.
fn sample_figure(
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    texture: Option<&Tint>,
    slot: (f64, f64),
) -> Result<Figure> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let neck = [
        rng.gen_range(slot.0 * w..slot.1 * w),
        rng.gen_range(
            cfg.margin + 2.0 * cfg.head_radius
                ..(h - cfg.margin - cfg.torso_length).max(cfg.margin + 2.0 * cfg.head_radius + 1.0),
        ),
    ];
    let mut angles = [[0.0; 2]; 2];
    let mut omega = [[0.0; 2]; 2];
    for side in 0..2 {
        angles[side] = [rng.gen_range(-0.2..2.0), rng.gen_range(0.0..2.2)];
        omega[side] = [speed(rng, cfg.angular_speed), speed(rng, cfg.angular_speed)];
    }
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift_mag = speed(rng, cfg.drift_speed).abs();
    let torso_color = contrasting(rng);
    let mut limb_color = contrasting(rng);
    if texture.is_none() {
        // Keep arms distinguishable from the torso in flat modes.
        let diff: f32 = limb_color
            .iter()
            .zip(&torso_color)
            .map(|(a, b)| (a - b).abs())
            .sum();
        if diff < 0.6 {
            limb_color = limb_color.map(|v| 1.0 - v);
        }
    }
    let limb_fields = match texture {
        Some(_) => {
            let side = (2.0 * cfg.limb_radius) as usize + 8;
            let lens = [cfg.upper_arm, cfg.forearm, cfg.upper_arm, cfg.forearm];
            lens.iter()
                .map(|len| {
                    let image = noise_field(
                        rng,
                        side,
                        (len + 2.0 * cfg.limb_radius) as usize + 8,
                        TEXTURE_GAIN,
                    )?;
                    Ok(Field {
                        image,
                        offset: cfg.limb_radius + 4.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    Ok(Figure {
        neck,
        tilt: rng.gen_range(-0.12..0.12),
        angles,
        omega,
        drift: [drift_mag * heading.cos(), drift_mag * heading.sin()],
        torso_color,
        limb_color,
        limb_fields,
    })
}

fn sample_camera(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> SimilarityTransform {
    let center = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let pan = |rng: &mut ChaCha8Rng| {
        let m = speed(rng, cfg.pan_speed).abs();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        (m * a.cos(), m * a.sin())
    };
    match cfg.camera {
        CameraMode::None => SimilarityTransform::identity(),
        CameraMode::Pan => {
            let t = pan(rng);
            SimilarityTransform::translation(t.0, t.1)
        }
        CameraMode::Full => {
            let t = pan(rng);
            let s = 1.0 + rng.gen_range(-cfg.zoom_rate..=cfg.zoom_rate);
            let r = rng.gen_range(-cfg.roll_rate..=cfg.roll_rate);
            SimilarityTransform::about(s, r, center, t)
        }
    }
}

/// Rendered frames of one clip with per-frame annotations. Every per-frame
/// vector is parallel to `offsets`.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    /// Frame numbers rendered, starting with the reference frame 0.
    pub offsets: Vec<usize>,
    pub frames: Vec<Image>,
    /// Annotated figure, in each frame's image coordinates.
    pub annotations: Vec<Annotation>,
    /// Unannotated figures per frame.
    pub distractors: Vec<Vec<Annotation>>,
    /// World-to-image camera transform (identity at frame 0).
    pub camera: Vec<SimilarityTransform>,
    /// Fraction of each pixel covered by an arm, per frame.
    pub limb_coverage: Vec<Image>,
    /// Fraction of each pixel covered by any figure part, per frame.
    pub figure_coverage: Vec<Image>,
}

impl Clip {
    fn position(&self, offset: usize) -> Option<usize> {
        self.offsets.iter().position(|&o| o == offset)
    }

    pub fn frame(&self, offset: usize) -> Option<&Image> {
        self.position(offset).map(|i| &self.frames[i])
    }

    pub fn annotation(&self, offset: usize) -> Option<&Annotation> {
        self.position(offset).map(|i| &self.annotations[i])
    }
}

pub fn clip_id(index: usize) -> String {
    format!("c{index:05}")
}

struct Scene {
    background: Background,
    clutter: Vec<(Capsule, [f32; 3])>,
    figures: Vec<Figure>,
    camera: Vec<SimilarityTransform>,
    limb_tint: Option<Tint>,
}

fn fits(cfg: &SceneConfig, scene: &Scene) -> bool {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let inside = |c: &Capsule, t: &SimilarityTransform| {
        let r = c.r * t.scale;
        [c.a, c.b].iter().all(|p| {
            let (x, y) = t.apply(p[0], p[1]);
            x - r >= cfg.margin
                && y - r >= cfg.margin
                && x + r <= w - cfg.margin
                && y + r <= h - cfg.margin
        })
    };
    for (k, cam) in scene.camera.iter().enumerate() {
        let poses: Vec<Pose> = scene.figures.iter().map(|f| f.pose(cfg, k)).collect();
        for p in &poses {
            if !Figure::limbs(cfg, p)
                .iter()
                .chain(&Figure::body(cfg, p))
                .all(|c| inside(c, cam))
            {
                return false;
            }
        }
        if poses.len() > 1 {
            for (a, b) in poses[0].points().zip(poses[1].points()) {
                if (a[0] - b[0]).hypot(a[1] - b[1]) < cfg.distractor_distance {
                    return false;
                }
            }
        }
    }
    true
}

fn sample_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let margin = 64usize;
    let field = |rng: &mut ChaCha8Rng, gain| {
        noise_field(rng, cfg.height + 2 * margin, cfg.width + 2 * margin, gain).map(|image| Field {
            image,
            offset: margin as f64,
        })
    };
    let (background, limb_tint, clutter) = match cfg.texture {
        TextureMode::Plain => {
            let g = if rng.gen_bool(0.5) {
                rng.gen_range(0.3..0.45)
            } else {
                rng.gen_range(0.55..0.7)
            };
            (Background::Flat([g; 3]), None, Vec::new())
        }
        TextureMode::Cluttered => {
            let tint = Tint {
                base: std::array::from_fn(|_| rng.gen_range(0.35..0.65)),
                amp: [0.5; 3],
            };
            let f = field(rng, TEXTURE_GAIN)?;
            let (w, h) = (cfg.width as f64, cfg.height as f64);
            let clutter = (0..14)
                .map(|_| {
                    let a = [rng.gen_range(0.0..w), rng.gen_range(0.0..h)];
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let len = rng.gen_range(8.0..50.0);
                    let c = Capsule {
                        a,
                        b: [a[0] + len * ang.cos(), a[1] + len * ang.sin()],
                        r: rng.gen_range(2.0..7.0),
                    };
                    (c, std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
                })
                .collect();
            (Background::Textured(f, tint), None, clutter)
        }
        TextureMode::Camouflage => {
            let tint = Tint {
                base: std::array::from_fn(|_| rng.gen_range(0.4..0.6)),
                amp: std::array::from_fn(|_| rng.gen_range(0.7..1.0)),
            };
            let f = field(rng, TEXTURE_GAIN)?;
            (Background::Textured(f, tint), Some(tint), Vec::new())
        }
    };
    for _ in 0..cfg.max_retries {
        // Two people take opposite halves, the annotated one on a random side.
        let slots = if cfg.people == 1 {
            vec![(0.15, 0.85)]
        } else if rng.gen_bool(0.5) {
            vec![(0.1, 0.45), (0.55, 0.9)]
        } else {
            vec![(0.55, 0.9), (0.1, 0.45)]
        };
        let figures = slots
            .into_iter()
            .map(|slot| sample_figure(cfg, rng, limb_tint.as_ref(), slot))
            .collect::<Result<Vec<_>>>()?;
        let step = sample_camera(cfg, rng);
        let mut camera = vec![SimilarityTransform::identity()];
        for k in 1..cfg.frames {
            camera.push(step.compose(&camera[k - 1]));
        }
        let scene = Scene {
            background: background.clone(),
            clutter: clutter.clone(),
            figures,
            camera,
            limb_tint,
        };
        if fits(cfg, &scene) {
            return Ok(scene);
        }
    }
    Err(Error::invalid(format!(
        "no figure placement fits the frame after {} attempts",
        cfg.max_retries
    )))
}

fn render(cfg: &SceneConfig, scene: &Scene, k: usize) -> Result<(Image, Image, Image)> {
    let (w, h) = (cfg.width, cfg.height);
    let inv = scene.camera[k].inverse()?;
    let poses: Vec<Pose> = scene.figures.iter().map(|f| f.pose(cfg, k)).collect();
    struct Part<'a> {
        cap: Capsule,
        bbox: [f64; 4],
        color: [f32; 3],
        field: Option<&'a Field>,
        limb: bool,
    }
    let mut parts: Vec<Part> = scene
        .clutter
        .iter()
        .map(|(c, color)| Part {
            cap: *c,
            bbox: c.bbox(),
            color: *color,
            field: None,
            limb: false,
        })
        .collect();
    let clutter_parts = parts.len();
    for (f, p) in scene.figures.iter().zip(&poses) {
        for c in Figure::body(cfg, p) {
            parts.push(Part {
                cap: c,
                bbox: c.bbox(),
                color: f.torso_color,
                field: None,
                limb: false,
            });
        }
        for (i, c) in Figure::limbs(cfg, p).into_iter().enumerate() {
            parts.push(Part {
                cap: c,
                bbox: c.bbox(),
                color: f.limb_color,
                field: f.limb_fields.get(i),
                limb: true,
            });
        }
    }
    let mut img = Image::zeros(h, w, 3);
    let mut limb = Image::zeros(h, w, 1);
    let mut figure = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let (wx, wy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            let mut c = match &scene.background {
                Background::Flat(c) => *c,
                Background::Textured(f, tint) => tint.color(f.sample(wx, wy)),
            };
            let (mut lc, mut fc) = (0.0f32, 0.0f32);
            for (i, part) in parts.iter().enumerate() {
                let b = part.bbox;
                if wx < b[0] || wy < b[1] || wx > b[2] || wy > b[3] {
                    continue;
                }
                let (d, u, v) = part.cap.locate([wx, wy]);
                let a = part.cap.coverage(d);
                if a == 0.0 {
                    continue;
                }
                let color = match (part.field, &scene.limb_tint) {
                    (Some(f), Some(tint)) => tint.color(f.sample(u, v)),
                    _ => part.color,
                };
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - a) + color[ch] * a;
                }
                if i >= clutter_parts {
                    fc = fc * (1.0 - a) + a;
                    lc = if part.limb {
                        lc * (1.0 - a) + a
                    } else {
                        lc * (1.0 - a)
                    };
                }
            }
            for (ch, v) in c.iter().enumerate() {
                img.set(ch, y, x, *v);
            }
            limb.set(0, y, x, lc);
            figure.set(0, y, x, fc);
        }
    }
    Ok((img, limb, figure))
}

fn annotate(p: &Pose, cam: &SimilarityTransform) -> Annotation {
    let map = |q: Point| {
        let (x, y) = cam.apply(q[0], q[1]);
        [x, y]
    };
    Annotation {
        joints: p.joints().map(|j| Some(map(j))),
        neck: map(p.neck),
        hip: map(p.hip),
    }
}

/// Renders every frame of clip `index`.
pub fn generate_clip(cfg: &SceneConfig, index: usize) -> Result<Clip> {
    let all: Vec<usize> = (0..cfg.frames).collect();
    render_clip(cfg, index, &all)
}

/// Renders the frames `offsets` (which must include 0) of clip `index` of
/// the dataset seeded by `cfg.seed`. Each clip draws from its own stream of
/// the seed, so clips do not depend on generation order.
pub fn render_clip(cfg: &SceneConfig, index: usize, offsets: &[usize]) -> Result<Clip> {
    cfg.validate()?;
    let cfg = &cfg.body();
    if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("frame offsets must start at 0 and increase"));
    }
    if offsets.iter().any(|&o| o >= cfg.frames) {
        return Err(Error::invalid(format!(
            "frame offsets must be below {}",
            cfg.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let scene = sample_scene(cfg, &mut rng)?;
    let n = offsets.len();
    let mut clip = Clip {
        id: clip_id(index),
        offsets: offsets.to_vec(),
        frames: Vec::with_capacity(n),
        annotations: Vec::with_capacity(n),
        distractors: Vec::with_capacity(n),
        camera: Vec::with_capacity(n),
        limb_coverage: Vec::with_capacity(n),
        figure_coverage: Vec::with_capacity(n),
    };
    for &k in offsets {
        let (img, limb, figure) = render(cfg, &scene, k)?;
        let cam = &scene.camera[k];
        let mut anns = scene.figures.iter().map(|f| annotate(&f.pose(cfg, k), cam));
        clip.annotations
            .push(anns.next().expect("at least one figure"));
        clip.distractors.push(anns.collect());
        clip.camera.push(*cam);
        clip.frames.push(img);
        clip.limb_coverage.push(limb);
        clip.figure_coverage.push(figure);
    }
    Ok(clip)
}

/// How visible the arms are to a single-frame edge detector versus a
/// frame difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamouflageReport {
    /// Fraction of arm pixels whose gradient magnitude exceeds the
    /// background median.
    pub edge_limb: f64,
    /// Same fraction over background pixels (chance level).
    pub edge_background: f64,
    /// Fraction of arm pixels whose frame difference exceeds the threshold.
    pub diff_limb: f64,
}

impl CamouflageReport {
    pub const EDGE_SLACK: f64 = 0.10;
    pub const DIFF_RECALL: f64 = 0.80;
    /// Gray-level change counted as motion.
    pub const DIFF_THRESHOLD: f32 = 0.05;

    pub fn passes(&self) -> bool {
        self.edge_limb <= self.edge_background + Self::EDGE_SLACK
            && self.diff_limb >= Self::DIFF_RECALL
    }

    /// Pixel-weighted pooling of several reports is not meaningful here, so
    /// this averages the rates.
    pub fn mean(reports: &[CamouflageReport]) -> Option<CamouflageReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(CamouflageReport {
            edge_limb: reports.iter().map(|r| r.edge_limb).sum::<f64>() / n,
            edge_background: reports.iter().map(|r| r.edge_background).sum::<f64>() / n,
            diff_limb: reports.iter().map(|r| r.diff_limb).sum::<f64>() / n,
        })
    }
}

/// Measures arm visibility in frame 0 and in `|f_delta - f_0|`.
pub fn camouflage_report(clip: &Clip, delta: usize) -> Result<CamouflageReport> {
    let (Some(f0), Some(f1)) = (clip.frame(0), clip.frame(delta)) else {
        return Err(Error::invalid(format!(
            "clip lacks frame 0 or frame {delta}"
        )));
    };
    if delta == 0 {
        return Err(Error::invalid("delta must be positive"));
    }
    let g0 = f0.to_gray();
    let g1 = f1.to_gray();
    let (h, w) = (g0.height(), g0.width());
    let p = g0.plane(0);
    let limb = clip.limb_coverage[0].plane(0);
    let fig = clip.figure_coverage[0].plane(0);
    let mut grad = vec![0.0f32; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = p[y * w + x + 1] - p[y * w + x - 1];
            let gy = p[(y + 1) * w + x] - p[(y - 1) * w + x];
            grad[y * w + x] = 0.5 * gx.hypot(gy);
        }
    }
    let interior = |i: usize| {
        let (y, x) = (i / w, i % w);
        y >= 1 && x >= 1 && y + 1 < h && x + 1 < w
    };
    let limb_px: Vec<usize> = (0..h * w)
        .filter(|&i| interior(i) && limb[i] >= 0.99)
        .collect();
    let bg_px: Vec<usize> = (0..h * w)
        .filter(|&i| interior(i) && fig[i] <= 0.01)
        .collect();
    if limb_px.is_empty() || bg_px.is_empty() {
        return Err(Error::invalid("clip has no arm or background pixels"));
    }
    let mut bg_grad: Vec<f32> = bg_px.iter().map(|&i| grad[i]).collect();
    bg_grad.sort_by(f32::total_cmp);
    let thr = bg_grad[bg_grad.len() / 2];
    let frac = |set: &[usize], f: &dyn Fn(usize) -> bool| {
        set.iter().filter(|&&i| f(i)).count() as f64 / set.len() as f64
    };
    let d = g1.plane(0);
    Ok(CamouflageReport {
        edge_limb: frac(&limb_px, &|i| grad[i] > thr),
        edge_background: frac(&bg_px, &|i| grad[i] > thr),
        diff_limb: frac(&limb_px, &|i| {
            (d[i] - p[i]).abs() > CamouflageReport::DIFF_THRESHOLD
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scene_frames_identical() {
        for texture in [
            TextureMode::Plain,
            TextureMode::Cluttered,
            TextureMode::Camouflage,
        ] {
            let cfg = SceneConfig {
                texture,
                angular_speed: [0.0, 0.0],
                drift_speed: [0.0, 0.0],
                frames: 3,
                seed: 4,
                ..SceneConfig::default()
            };
            let clip = generate_clip(&cfg, 0).unwrap();
            assert_eq!(clip.frames[0], clip.frames[2]);
            assert_eq!(clip.annotations[0], clip.annotations[2]);
        }
    }

    #[test]
    fn same_seed_same_clip_and_streams_differ() {
        let cfg = SceneConfig {
            texture: TextureMode::Camouflage,
            frames: 3,
            seed: 9,
            ..SceneConfig::default()
        };
        let a = generate_clip(&cfg, 3).unwrap();
        let b = generate_clip(&cfg, 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.annotations, b.annotations);
        assert_ne!(generate_clip(&cfg, 4).unwrap().annotations, a.annotations);
    }

    #[test]
    fn annotations_follow_rendered_geometry() {
        let cfg = SceneConfig {
            frames: 4,
            seed: 2,
            ..SceneConfig::default()
        };
        for i in 0..5 {
            let clip = generate_clip(&cfg, i).unwrap();
            for k in 0..cfg.frames {
                let a = &clip.annotations[k];
                let j = a.joints.map(|p| p.unwrap());
                for side in 0..2 {
                    let (s, e, w) = (j[3 * side], j[3 * side + 1], j[3 * side + 2]);
                    assert!(((s[0] - e[0]).hypot(s[1] - e[1]) - cfg.upper_arm).abs() < 1e-9);
                    assert!(((e[0] - w[0]).hypot(e[1] - w[1]) - cfg.forearm).abs() < 1e-9);
                    // Arm pixels are fully covered at every joint.
                    for p in [s, e, w] {
                        let (x, y) = (p[0].floor() as usize, p[1].floor() as usize);
                        assert!(
                            clip.limb_coverage[k].get(0, y, x) > 0.99,
                            "clip {i} frame {k}"
                        );
                    }
                }
                assert!((a.torso_length() - cfg.torso_length).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn figures_stay_inside_margin() {
        let cfg = SceneConfig {
            camera: CameraMode::Full,
            seed: 5,
            ..SceneConfig::default()
        };
        for i in 0..4 {
            let clip = generate_clip(&cfg, i).unwrap();
            for fc in &clip.figure_coverage {
                let m = cfg.margin as usize - 1;
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if y < m || x < m || y >= cfg.height - m || x >= cfg.width - m {
                            assert_eq!(fc.get(0, y, x), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distractor_joints_are_far_from_their_counterparts() {
        let cfg = SceneConfig {
            people: 2,
            frames: 4,
            seed: 1,
            ..SceneConfig::default()
        };
        for i in 0..4 {
            let clip = generate_clip(&cfg, i).unwrap();
            for k in 0..cfg.frames {
                let a = clip.annotations[k].to_map();
                let d = clip.distractors[k][0].to_map();
                assert_eq!(a.len(), 8);
                for (name, p) in &a {
                    let q = d[name];
                    assert!((p[0] - q[0]).hypot(p[1] - q[1]) >= 80.0);
                }
            }
        }
    }

    #[test]
    fn pan_camera_moves_annotations() {
        let cfg = SceneConfig {
            camera: CameraMode::Pan,
            angular_speed: [0.0, 0.0],
            drift_speed: [0.0, 0.0],
            frames: 3,
            seed: 3,
            ..SceneConfig::default()
        };
        let clip = generate_clip(&cfg, 0).unwrap();
        let t = clip.camera[1];
        assert_eq!(clip.frame(2).unwrap(), &clip.frames[2]);
        assert!(render_clip(&cfg, 0, &[1, 2]).is_err());
        assert_eq!(
            render_clip(&cfg, 0, &[0, 2]).unwrap().frames[1],
            clip.frames[2]
        );
        let step = (
            t.tx.hypot(t.ty),
            clip.annotations[1].neck[0] - clip.annotations[0].neck[0],
        );
        assert!(step.0 >= 1.5 && (step.1 - t.tx).abs() < 1e-9);
    }

    #[test]
    fn camouflage_hides_arms_from_edges_not_from_motion() {
        let cfg = SceneConfig {
            texture: TextureMode::Camouflage,
            frames: 4,
            seed: 11,
            ..SceneConfig::default()
        };
        let reports: Vec<_> = (0..6)
            .map(|i| camouflage_report(&generate_clip(&cfg, i).unwrap(), 3).unwrap())
            .collect();
        let m = CamouflageReport::mean(&reports).unwrap();
        assert!(m.passes(), "{m:?}");
        // A flat-colored figure is found by edges as well.
        let plain = SceneConfig {
            texture: TextureMode::Plain,
            ..cfg
        };
        let r = camouflage_report(&generate_clip(&plain, 0).unwrap(), 3).unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig {
            people: 3,
            ..SceneConfig::default()
        }
        .validate()
        .is_err());
        assert!(SceneConfig {
            frames: 1,
            ..SceneConfig::default()
        }
        .validate()
        .is_err());
        assert!(SceneConfig {
            angular_speed: [0.2, 0.1],
            ..SceneConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            "camouflage".parse::<TextureMode>().unwrap(),
            TextureMode::Camouflage
        );
        assert!("fancy".parse::<CameraMode>().is_err());
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let cfg = SceneConfig {
            torso_length: 400.0,
            max_retries: 20,
            ..SceneConfig::default()
        };
        assert!(generate_clip(&cfg, 0).is_err());
    }
}

//! Deterministic stick-figure dataset and keypoint-aware augmentation.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TOTAL_DOWNSAMPLING;
use crate::error::{CfaError, Result};
use crate::schema::{PersonAnnotation, PoseSample, SkeletonSpec, INVISIBLE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    #[default]
    Noise,
    Clutter,
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Plain => "plain",
            Background::Noise => "noise",
            Background::Clutter => "clutter",
        })
    }
}

impl FromStr for Background {
    type Err = CfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Background::Plain),
            "noise" => Ok(Background::Noise),
            "clutter" => Ok(Background::Clutter),
            other => Err(CfaError::Config(format!(
                "unknown background `{other}` (expected plain, noise or clutter)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub occlusion_prob: f64,
    /// Stroke width in pixels.
    pub limb_width: f64,
    /// Standard deviation of per-limb angle noise, radians.
    pub pose_jitter: f64,
    pub background: Background,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 64,
            image_size: 96,
            occlusion_prob: 0.1,
            limb_width: 3.0,
            pose_jitter: 0.3,
            background: Background::Noise,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CfaError::Config("synth.count must be at least 1".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(TOTAL_DOWNSAMPLING) {
            return Err(CfaError::Config(format!(
                "synth.image_size {} must be a positive multiple of {TOTAL_DOWNSAMPLING}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(CfaError::Config("synth.occlusion_prob must lie in [0, 1]".into()));
        }
        if !(self.limb_width > 0.0) || !(self.pose_jitter >= 0.0) {
            return Err(CfaError::Config(
                "synth.limb_width must be positive and synth.pose_jitter nonnegative".into(),
            ));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

const PALETTE: [Rgb; 12] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.45, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.30, 0.90],
    [0.15, 0.85, 0.90],
    [1.00, 0.60, 0.10],
    [0.60, 1.00, 0.55],
    [0.55, 0.35, 0.15],
    [1.00, 0.70, 0.80],
    [0.55, 0.60, 1.00],
    [0.95, 0.95, 0.95],
];

/// Bone from parent to child: template offset in figure units and an angle
/// noise multiplier.
struct Bone {
    parent: usize,
    child: usize,
    offset: [f64; 2],
    jitter: f64,
}

/// Standing figure facing the viewer (its right side on the image left),
/// rooted at the pelvis, listed parents-first.
fn template() -> Vec<Bone> {
    let b = |parent, child, dx: f64, dy: f64, jitter| Bone {
        parent,
        child,
        offset: [dx, dy],
        jitter,
    };
    vec![
        b(6, 7, 0.0, -0.30, 0.3),
        b(7, 8, 0.0, -0.08, 0.3),
        b(8, 9, 0.0, -0.13, 0.3),
        b(6, 2, -0.08, 0.02, 0.2),
        b(6, 3, 0.08, 0.02, 0.2),
        b(2, 1, -0.01, 0.22, 1.0),
        b(3, 4, 0.01, 0.22, 1.0),
        b(1, 0, 0.0, 0.22, 1.0),
        b(4, 5, 0.0, 0.22, 1.0),
        b(7, 12, -0.11, 0.01, 0.3),
        b(7, 13, 0.11, 0.01, 0.3),
        b(12, 11, -0.03, 0.15, 2.0),
        b(13, 14, 0.03, 0.15, 2.0),
        b(11, 10, -0.01, 0.14, 2.0),
        b(14, 15, 0.01, 0.14, 2.0),
    ]
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// An RGB image with `[3, H, W]` planar storage and simple anti-aliased
/// primitives. Pixel `(col, row)` covers `[col, col + 1) × [row, row + 1)`.
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in fill.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Canvas { width, height, data }
    }

    pub fn from_tensor(image: &Tensor) -> Result<Self> {
        match image.shape() {
            [3, h, w] => Ok(Canvas {
                width: *w,
                height: *h,
                data: image.data().to_vec(),
            }),
            other => Err(CfaError::shape(format!("expected a [3, H, W] image, got {other:?}"))),
        }
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.data).expect("canvas size is consistent")
    }

    fn blend(&mut self, row: usize, col: usize, color: Rgb, alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        let plane = self.width * self.height;
        let at = row * self.width + col;
        for (c, v) in color.iter().enumerate() {
            let px = &mut self.data[c * plane + at];
            *px = *px * (1.0 - alpha) + v * alpha;
        }
    }

    /// Pixels whose centres fall within `pad` of the box `[x0, x1] × [y0, y1]`.
    fn region(&self, x0: f64, y0: f64, x1: f64, y1: f64, pad: f64) -> (usize, usize, usize, usize) {
        let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clampi((x0.min(x1) - pad).floor(), self.width),
            clampi((y0.min(y1) - pad).floor(), self.height),
            clampi((x0.max(x1) + pad).ceil() + 1.0, self.width),
            clampi((y0.max(y1) + pad).ceil() + 1.0, self.height),
        )
    }

    /// Round-capped stroke of the given width.
    pub fn line(&mut self, a: [f64; 2], b: [f64; 2], width: f64, color: Rgb, opacity: f64) {
        let half = width / 2.0;
        let (c0, r0, c1, r1) = self.region(a[0], a[1], b[0], b[1], half + 1.0);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        for row in r0..r1 {
            for col in c0..c1 {
                let p = [col as f64 + 0.5, row as f64 + 0.5];
                let t = if len2 > 0.0 {
                    (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dist = (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1]);
                let cover = (half + 0.5 - dist).clamp(0.0, 1.0);
                self.blend(row, col, color, cover * opacity);
            }
        }
    }

    pub fn disc(&mut self, center: [f64; 2], radius: f64, color: Rgb, opacity: f64) {
        self.line(center, center, 2.0 * radius, color, opacity);
    }

    pub fn ring(&mut self, center: [f64; 2], radius: f64, width: f64, color: Rgb) {
        let (c0, r0, c1, r1) = self.region(center[0], center[1], center[0], center[1], radius + width + 1.0);
        for row in r0..r1 {
            for col in c0..c1 {
                let dist = (col as f64 + 0.5 - center[0]).hypot(row as f64 + 0.5 - center[1]);
                let cover = (width / 2.0 + 0.5 - (dist - radius).abs()).clamp(0.0, 1.0);
                self.blend(row, col, color, cover);
            }
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: Rgb, opacity: f64) {
        let (c0, r0, c1, r1) = self.region(x, y, x + w, y + h, 0.0);
        for row in r0..r1 {
            for col in c0..c1 {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                if px >= x && px < x + w && py >= y && py < y + h {
                    self.blend(row, col, color, opacity);
                }
            }
        }
    }
}

/// Colour shared by a joint and its mirror partner.
fn joint_color(perm: &[usize], j: usize) -> Rgb {
    PALETTE[j.min(perm[j]) % PALETTE.len()]
}

fn limb_color(perm: &[usize], limb: (usize, usize)) -> Rgb {
    let key = limb.1.min(perm[limb.1]);
    PALETTE[(key * 5 + 3) % PALETTE.len()]
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_background(canvas: &mut Canvas, kind: Background, rng: &mut ChaCha8Rng) {
    let size = canvas.width.max(canvas.height) as f64;
    match kind {
        Background::Plain => {}
        Background::Noise => {
            for v in canvas.data.iter_mut() {
                *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
            }
        }
        Background::Clutter => {
            for _ in 0..rng.random_range(3..7) {
                let color = [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.2..0.5)];
                if rng.random_bool(0.5) {
                    let (w, h) = (rng.random_range(0.1..0.4) * size, rng.random_range(0.1..0.4) * size);
                    let (x, y) = (rng.random_range(0.0..size - w), rng.random_range(0.0..size - h));
                    canvas.rect(x, y, w, h, color, 0.6);
                } else {
                    let a = [rng.random_range(0.0..size), rng.random_range(0.0..size)];
                    let b = [rng.random_range(0.0..size), rng.random_range(0.0..size)];
                    canvas.line(a, b, rng.random_range(1.0..3.0), color, 0.6);
                }
            }
        }
    }
}

/// Joint positions in pixels for a random pose fitted inside the frame.
fn sample_pose(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let bones = template();
    let mut pts = vec![[0.0, 0.0]; 16];
    for bone in &bones {
        let angle = cfg.pose_jitter * bone.jitter * normal(rng);
        let off = rotate(bone.offset, angle);
        let p = pts[bone.parent];
        pts[bone.child] = [p[0] + off[0], p[1] + off[1]];
    }
    let tilt = rng.random_range(-0.25..0.25);
    for p in pts.iter_mut() {
        *p = rotate(*p, tilt);
    }
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let size = cfg.image_size as f64;
    let margin = 0.08 * size + cfg.limb_width;
    let room = size - 2.0 * margin;
    let extent = [(hi[0] - lo[0]).max(1e-6), (hi[1] - lo[1]).max(1e-6)];
    let target = rng.random_range(0.65..1.0) * room;
    let scale = (target / extent[1]).min(room / extent[0]);
    let slack = [room - scale * extent[0], room - scale * extent[1]];
    let origin = [
        margin + rng.random_range(0.0..=slack[0].max(0.0)),
        margin + rng.random_range(0.0..=slack[1].max(0.0)),
    ];
    pts.iter()
        .map(|p| [origin[0] + scale * (p[0] - lo[0]), origin[1] + scale * (p[1] - lo[1])])
        .collect()
}

/// Renders sample `index` of the dataset described by `cfg`. The result is a
/// pure function of `(cfg, index)`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<PoseSample> {
    cfg.validate()?;
    if index >= cfg.count {
        return Err(CfaError::domain(format!(
            "sample index {index} out of range for a dataset of {}",
            cfg.count
        )));
    }
    let skel = SkeletonSpec::mpii();
    let perm = skel.flip_permutation();
    let mut rng = sample_rng(cfg.seed, index);
    let size = cfg.image_size;
    let base = rng.random_range(0.05..0.35);
    let tint = [base, base + rng.random_range(-0.04..0.04), base + rng.random_range(-0.04..0.04)];
    let mut canvas = Canvas::new(size, size, tint);
    draw_background(&mut canvas, cfg.background, &mut rng);

    let keypoints = sample_pose(cfg, &mut rng);
    let (neck, top) = (keypoints[8], keypoints[9]);
    let head_length = (top[0] - neck[0]).hypot(top[1] - neck[1]);
    for &limb in skel.limbs() {
        if limb == (8, 9) {
            continue;
        }
        canvas.line(keypoints[limb.0], keypoints[limb.1], cfg.limb_width, limb_color(&perm, limb), 1.0);
    }
    let head_center = [(neck[0] + top[0]) / 2.0, (neck[1] + top[1]) / 2.0];
    canvas.ring(head_center, head_length / 2.0, cfg.limb_width, PALETTE[11]);
    for (j, kp) in keypoints.iter().enumerate() {
        canvas.disc(*kp, 0.75 * cfg.limb_width, joint_color(&perm, j), 1.0);
    }

    let mut visibility = vec![true; keypoints.len()];
    if rng.random_bool(cfg.occlusion_prob) {
        let s = size as f64;
        let (w, h) = (rng.random_range(0.15..0.3) * s, rng.random_range(0.15..0.3) * s);
        let (x, y) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
        let shade = rng.random_range(0.3..0.6);
        canvas.rect(x, y, w, h, [shade, shade, shade], 1.0);
        for (kp, vis) in keypoints.iter().zip(visibility.iter_mut()) {
            if kp[0] >= x && kp[0] < x + w && kp[1] >= y && kp[1] < y + h {
                *vis = false;
            }
        }
    }
    let bbox = bounding_box(&keypoints);
    let keypoints = keypoints
        .iter()
        .zip(&visibility)
        .map(|(kp, v)| if *v { *kp } else { INVISIBLE })
        .collect();
    Ok(PoseSample {
        image: canvas.into_tensor(),
        annotation: PersonAnnotation {
            image_id: format!("synth_{:06}", index),
            image_path: None,
            keypoints,
            visibility,
            head_length,
            bbox: Some(bbox),
        },
    })
}

fn bounding_box(points: &[[f64; 2]]) -> [f64; 4] {
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    [lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]]
}

/// Worker count for data generation: `CFA_NUM_WORKERS` if set, otherwise the
/// available parallelism.
pub fn num_workers() -> usize {
    std::env::var("CFA_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Generates the whole dataset, in index order, across [`num_workers`] threads.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<PoseSample>> {
    generate_dataset_with(cfg, num_workers())
}

/// Same as [`generate_dataset`] with an explicit thread count; the output does
/// not depend on it.
pub fn generate_dataset_with(cfg: &SynthConfig, workers: usize) -> Result<Vec<PoseSample>> {
    cfg.validate()?;
    let workers = workers.min(cfg.count).max(1);
    let mut slots: Vec<Option<Result<PoseSample>>> = (0..cfg.count).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(cfg.count.div_ceil(workers)).enumerate() {
            let start = w * cfg.count.div_ceil(workers);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(generate_sample(cfg, start + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Counter-clockwise in image coordinates (y down), radians.
    pub rotation: f64,
    pub flip: bool,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of a full turn of hue.
    pub hue: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams::identity()
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation: 0.0,
            flip: false,
            scale: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    fn is_identity_geometry(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && !self.flip
    }

    fn is_identity_color(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.saturation == 0.0 && self.hue == 0.0
    }

    /// Maps a source point to its augmented position in an image of the given size.
    pub fn apply_to_point(&self, p: [f64; 2], width: usize, height: usize) -> [f64; 2] {
        let c = [width as f64 / 2.0, height as f64 / 2.0];
        let r = rotate([p[0] - c[0], p[1] - c[1]], self.rotation);
        let x = c[0] + self.scale * r[0];
        let y = c[1] + self.scale * r[1];
        if self.flip {
            [width as f64 - x, y]
        } else {
            [x, y]
        }
    }

    fn invert_point(&self, q: [f64; 2], width: usize, height: usize) -> [f64; 2] {
        let c = [width as f64 / 2.0, height as f64 / 2.0];
        let qx = if self.flip { width as f64 - q[0] } else { q[0] };
        let r = rotate([(qx - c[0]) / self.scale, (q[1] - c[1]) / self.scale], -self.rotation);
        [c[0] + r[0], c[1] + r[1]]
    }
}

/// Ranges from which training-time augmentation parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub color_jitter: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation_deg: 30.0,
            scale_min: 0.75,
            scale_max: 1.25,
            flip_prob: 0.5,
            color_jitter: 0.2,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            color_jitter: 0.0,
        }
    }

    pub fn flip_only() -> Self {
        AugmentRanges {
            flip_prob: 0.5,
            ..AugmentRanges::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.color_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CfaError::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugmentParams {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation = sym(self.max_rotation_deg).to_radians();
        let brightness = sym(self.color_jitter);
        let contrast = sym(self.color_jitter);
        let saturation = sym(self.color_jitter);
        let hue = sym(self.color_jitter) / 2.0;
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let flip = self.flip_prob > 0.0 && rng.random_bool(self.flip_prob);
        AugmentParams {
            rotation,
            flip,
            scale,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn bilinear(src: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let (sx, sy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |c: f64, r: f64| -> f64 {
        if c < 0.0 || r < 0.0 || c >= width as f64 || r >= height as f64 {
            0.0
        } else {
            src[r as usize * width + c as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

fn warp(image: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let (width, height) = match image.shape() {
        [3, h, w] => (*w, *h),
        other => return Err(CfaError::shape(format!("expected a [3, H, W] image, got {other:?}"))),
    };
    let plane = width * height;
    let mut out = vec![0.0; 3 * plane];
    for row in 0..height {
        for col in 0..width {
            let p = params.invert_point([col as f64 + 0.5, row as f64 + 0.5], width, height);
            for c in 0..3 {
                out[c * plane + row * width + col] =
                    bilinear(&image.data()[c * plane..(c + 1) * plane], width, height, p[0], p[1]);
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

fn luma(rgb: Rgb) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn color_jitter(image: &mut Tensor, params: &AugmentParams) {
    let plane = image.len() / 3;
    let data = image.data_mut();
    let mean_luma = (0..plane)
        .map(|k| luma([data[k], data[plane + k], data[2 * plane + k]]))
        .sum::<f64>()
        / plane.max(1) as f64;
    let (hs, hc) = (2.0 * PI * params.hue).sin_cos();
    for k in 0..plane {
        let mut px = [data[k], data[plane + k], data[2 * plane + k]];
        for v in px.iter_mut() {
            *v *= 1.0 + params.brightness;
        }
        for v in px.iter_mut() {
            *v = mean_luma + (1.0 + params.contrast) * (*v - mean_luma);
        }
        let gray = luma(px);
        for v in px.iter_mut() {
            *v = gray + (1.0 + params.saturation) * (*v - gray);
        }
        if params.hue != 0.0 {
            let y = luma(px);
            let i = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
            let q = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
            let (i, q) = (hc * i - hs * q, hs * i + hc * q);
            px = [
                y + 0.956 * i + 0.621 * q,
                y - 0.272 * i - 0.647 * q,
                y - 1.106 * i + 1.703 * q,
            ];
        }
        for (c, v) in px.iter().enumerate() {
            data[c * plane + k] = v.clamp(0.0, 1.0);
        }
    }
}

/// Applies a similarity warp (rotation and scale about the image centre, then
/// an optional horizontal mirror) and colour jitter. Keypoints follow the warp;
/// a mirror also swaps left/right joint identities.
pub fn augment(sample: &PoseSample, params: &AugmentParams, skel: &SkeletonSpec) -> Result<PoseSample> {
    if !(params.scale > 0.0) || !params.rotation.is_finite() {
        return Err(CfaError::domain(format!("invalid augmentation {params:?}")));
    }
    let ann = &sample.annotation;
    if ann.keypoints.len() != skel.num_joints() {
        return Err(CfaError::domain(format!(
            "annotation has {} joints, skeleton has {}",
            ann.keypoints.len(),
            skel.num_joints()
        )));
    }
    let (height, width) = sample.size();
    let mut image = if params.is_identity_geometry() {
        sample.image.clone()
    } else {
        warp(&sample.image, params)?
    };
    if !params.is_identity_color() {
        color_jitter(&mut image, params);
    }
    if params.is_identity_geometry() {
        return Ok(PoseSample {
            image,
            annotation: ann.clone(),
        });
    }

    let moved: Vec<([f64; 2], bool)> = ann
        .keypoints
        .iter()
        .zip(&ann.visibility)
        .map(|(kp, vis)| {
            if !vis {
                return (INVISIBLE, false);
            }
            let q = params.apply_to_point(*kp, width, height);
            if q[0] >= 0.0 && q[1] >= 0.0 && q[0] < width as f64 && q[1] < height as f64 {
                (q, true)
            } else {
                (INVISIBLE, false)
            }
        })
        .collect();
    let perm = if params.flip {
        skel.flip_permutation()
    } else {
        (0..skel.num_joints()).collect()
    };
    let (keypoints, visibility) = perm.iter().map(|&src| moved[src]).unzip();
    let bbox = ann.bbox.map(|[x, y, w, h]| {
        let corners: Vec<[f64; 2]> = [[x, y], [x + w, y], [x, y + h], [x + w, y + h]]
            .iter()
            .map(|p| params.apply_to_point(*p, width, height))
            .collect();
        bounding_box(&corners)
    });
    Ok(PoseSample {
        image,
        annotation: PersonAnnotation {
            keypoints,
            visibility,
            head_length: ann.head_length * params.scale,
            bbox,
            ..ann.clone()
        },
    })
}

/// Writes a `[3, H, W]` image in `[0, 1]` as binary PPM (P6, 8-bit).
pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (width, height) = match image.shape() {
        [3, h, w] => (*w, *h),
        other => return Err(CfaError::shape(format!("expected a [3, H, W] image, got {other:?}"))),
    };
    let plane = width * height;
    let mut bytes = Vec::with_capacity(20 + 3 * plane);
    let _ = write!(bytes, "P6\n{width} {height}\n255\n");
    let d = image.data();
    for k in 0..plane {
        for c in 0..3 {
            bytes.push((d[c * plane + k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| CfaError::io(path, e))
}

/// Reads a binary PPM (P6, maxval ≤ 255) into a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfaError::io(path, e))?;
    let bad = |message: &str| CfaError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let plane = width * height;
    let pixels = bytes.get(pos..pos + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; 3 * plane];
    for k in 0..plane {
        for c in 0..3 {
            data[c * plane + k] = pixels[3 * k + c] as f64 / maxval as f64;
        }
    }
    Tensor::from_vec(&[3, height, width], data)
}

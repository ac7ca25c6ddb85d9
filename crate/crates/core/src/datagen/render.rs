use image::{Rgb, RgbImage};

use super::{joint, CharacterSpec, PoseFrame, BONES, NUM_BONES, TORSO_BONE};
use crate::error::{Error, Result};

/// Limb/joint palette used by OpenPose body renders.
pub const OPENPOSE_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

const BACKGROUND: [u8; 3] = [18, 18, 26];
/// Half-widths of each bone's capsule in normalized units.
const BONE_HALF_WIDTH: [f64; NUM_BONES] = [
    0.075, 0.03, 0.035, 0.035, 0.03, 0.035, 0.035, 0.03, 0.045, 0.045, 0.045, 0.045,
];
/// Painter order: legs, torso, arms, neck.
const DRAW_ORDER: [usize; NUM_BONES] = [8, 9, 10, 11, TORSO_BONE, 2, 3, 4, 5, 6, 7, 1];

const SKELETON_LIMB_HALF_WIDTH: f64 = 0.02;
const SKELETON_JOINT_RADIUS: f64 = 0.025;
const SKELETON_LIMB_ALPHA: f64 = 0.6;

/// Subsamples per pixel axis.
const SS: usize = 3;

fn check_resolution(resolution: u32) -> Result<()> {
    if resolution < 16 {
        return Err(Error::invalid(format!("resolution must be >= 16, got {resolution}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Shape {
    Capsule { a: [f64; 2], b: [f64; 2], r: f64 },
    Disc { c: [f64; 2], r: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Capsule { a, b, r } => segment_dist2(p, a, b) <= r * r,
            Shape::Disc { c, r } => (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Capsule { a, b, r } => (
                a[0].min(b[0]) - r,
                a[1].min(b[1]) - r,
                a[0].max(b[0]) + r,
                a[1].max(b[1]) + r,
            ),
            Shape::Disc { c, r } => (c[0] - r, c[1] - r, c[0] + r, c[1] + r),
        }
    }
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - qx).powi(2) + (p[1] - qy).powi(2)
}

/// A supersampled canvas in linear [0,1] float RGB.
struct Canvas {
    res: usize,
    samples: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(res: usize, bg: [u8; 3]) -> Self {
        let c = [bg[0] as f64 / 255.0, bg[1] as f64 / 255.0, bg[2] as f64 / 255.0];
        Self {
            res,
            samples: vec![c; res * res * SS * SS],
        }
    }

    /// Paints `shape` (coordinates normalized to [0,1]) blending with `alpha`.
    fn paint(&mut self, shape: Shape, color: [u8; 3], alpha: f64) {
        let n = (self.res * SS) as f64;
        let (x0, y0, x1, y1) = shape.bounds();
        let span = self.res * SS;
        let lo = |v: f64| ((v * n).floor().max(0.0) as usize).min(span);
        let hi = |v: f64| ((v * n).ceil().max(0.0) as usize + 1).min(span);
        let col = [
            color[0] as f64 / 255.0,
            color[1] as f64 / 255.0,
            color[2] as f64 / 255.0,
        ];
        for sy in lo(y0)..hi(y1) {
            for sx in lo(x0)..hi(x1) {
                let p = [(sx as f64 + 0.5) / n, (sy as f64 + 0.5) / n];
                if shape.contains(p) {
                    let s = &mut self.samples[sy * span + sx];
                    for k in 0..3 {
                        s[k] = (1.0 - alpha) * s[k] + alpha * col[k];
                    }
                }
            }
        }
    }

    fn resolve(&self) -> RgbImage {
        let span = self.res * SS;
        RgbImage::from_fn(self.res as u32, self.res as u32, |x, y| {
            let mut acc = [0.0; 3];
            for dy in 0..SS {
                for dx in 0..SS {
                    let s = self.samples[(y as usize * SS + dy) * span + x as usize * SS + dx];
                    for k in 0..3 {
                        acc[k] += s[k];
                    }
                }
            }
            let q = |v: f64| ((v / (SS * SS) as f64) * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([q(acc[0]), q(acc[1]), q(acc[2])])
        })
    }
}

fn bone_shape(pose: &PoseFrame, bone: usize, half_width: f64) -> Shape {
    let (a, b) = BONES[bone];
    Shape::Capsule {
        a: pose.joints[a],
        b: pose.joints[b],
        r: half_width,
    }
}

/// Renders the character at `pose` as a `resolution`-square RGB sprite.
pub fn render_frame(character: &CharacterSpec, pose: &PoseFrame, resolution: u32) -> Result<RgbImage> {
    check_resolution(resolution)?;
    let mut canvas = Canvas::new(resolution as usize, BACKGROUND);
    for &bone in DRAW_ORDER.iter() {
        canvas.paint(
            bone_shape(pose, bone, BONE_HALF_WIDTH[bone]),
            character.limb_colors[bone],
            1.0,
        );
    }
    canvas.paint(
        Shape::Disc {
            c: pose.joints[joint::HEAD],
            r: character.head_radius,
        },
        character.limb_colors[1],
        1.0,
    );
    Ok(canvas.resolve())
}

/// Pixel-space bounding box `(x0, y0, x1, y1)` (inclusive) of the torso capsule,
/// padded by one pixel.
pub fn torso_pixel_bounds(pose: &PoseFrame, resolution: u32) -> (u32, u32, u32, u32) {
    let (x0, y0, x1, y1) = bone_shape(pose, TORSO_BONE, BONE_HALF_WIDTH[TORSO_BONE]).bounds();
    let r = resolution as f64;
    let px = |v: f64, up: bool| {
        let p = if up {
            (v * r).ceil() + 1.0
        } else {
            (v * r).floor() - 1.0
        };
        p.clamp(0.0, r - 1.0) as u32
    };
    (px(x0, false), px(y0, false), px(x1, true), px(y1, true))
}

/// OpenPose-style skeleton: translucent colored limbs and solid joint dots on black.
pub fn render_skeleton(pose: &PoseFrame, resolution: u32) -> Result<RgbImage> {
    check_resolution(resolution)?;
    let mut canvas = Canvas::new(resolution as usize, [0, 0, 0]);
    for (bone, &color) in OPENPOSE_COLORS.iter().take(NUM_BONES).enumerate() {
        canvas.paint(
            bone_shape(pose, bone, SKELETON_LIMB_HALF_WIDTH),
            color,
            SKELETON_LIMB_ALPHA,
        );
    }
    for (&c, &color) in pose.joints.iter().zip(&OPENPOSE_COLORS) {
        canvas.paint(
            Shape::Disc {
                c,
                r: SKELETON_JOINT_RADIUS,
            },
            color,
            1.0,
        );
    }
    Ok(canvas.resolve())
}

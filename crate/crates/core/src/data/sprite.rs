//! Procedural sprite "portraits": a head with hair, eyes, mouth and a torso,
//! drawn over one of a few backgrounds. All geometry is in normalized frame
//! coordinates so any resolution renders the same picture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

/// Sub-pixel samples per axis used for coverage anti-aliasing.
const SUPERSAMPLE: usize = 4;

pub const NUM_BACKGROUNDS: usize = 4;
/// Index of the high-texture (checkerboard) background.
pub const TEXTURED_BACKGROUND: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub shirt: [f64; 3],
    pub eyes: [f64; 3],
}

/// Appearance of one identity. Deterministic in `identity_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteIdentity {
    pub identity_id: usize,
    pub head_rx: f64,
    pub head_ry: f64,
    /// Fraction of the head height covered by hair, from the top.
    pub hair_depth: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_radius: f64,
    pub mouth_width: f64,
    pub shoulder_width: f64,
    pub palette: Palette,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SpriteIdentity {
    /// Identity `id` out of `count`. Hair and shirt hues are spread around
    /// the colour wheel; geometry is drawn from a per-id stream.
    pub fn new(id: usize, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5b17_e000 + id as u64);
        let hue = id as f64 / count.max(1) as f64;
        // golden-ratio offset keeps shirt hues away from the hair hue
        let shirt_hue = hue + 0.381_966;
        let skin_tone = [0.55, 0.7, 0.85, 0.95][id % 4];
        Self {
            identity_id: id,
            head_rx: rng.random_range(0.2..0.27),
            head_ry: rng.random_range(0.22..0.29),
            hair_depth: rng.random_range(0.2..0.4),
            eye_spacing: rng.random_range(0.08..0.12),
            eye_height: rng.random_range(0.0..0.05),
            eye_radius: rng.random_range(0.04..0.06),
            mouth_width: rng.random_range(0.12..0.2),
            shoulder_width: rng.random_range(0.3..0.42),
            palette: Palette {
                skin: [skin_tone, skin_tone * 0.78, skin_tone * 0.62],
                hair: hsv(hue, 0.85, 0.75),
                shirt: hsv(shirt_hue, 0.7, 0.9),
                eyes: [0.05, 0.05, 0.1],
            },
        }
    }

    /// The full roster, checked for pairwise distinctness.
    pub fn roster(count: usize) -> Vec<Self> {
        (0..count).map(|i| Self::new(i, count)).collect()
    }
}

/// Per-frame sprite state. Offsets are in normalized units; openness in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub eye_open: f64,
    pub mouth_open: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            eye_open: 1.0,
            mouth_open: 0.0,
        }
    }
}

pub const MAX_OFFSET: f64 = 0.25;

impl Pose {
    /// Clamp into the documented ranges, warning when anything moved.
    pub fn clamped(self) -> Self {
        let c = Self {
            dx: self.dx.clamp(-MAX_OFFSET, MAX_OFFSET),
            dy: self.dy.clamp(-MAX_OFFSET, MAX_OFFSET),
            eye_open: self.eye_open.clamp(0.0, 1.0),
            mouth_open: self.mouth_open.clamp(0.0, 1.0),
        };
        if c != self {
            log::warn!("pose {self:?} clamped to {c:?}");
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Translate,
    Nod,
    Blink,
    Mouth,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Translate, Motion::Nod, Motion::Blink, Motion::Mouth];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Motion::Translate => "translate",
            Motion::Nod => "nod",
            Motion::Blink => "blink",
            Motion::Mouth => "mouth",
        }
    }

    /// Pose sequence for one clip: a single sinusoidal cycle over the clip
    /// starting at `phase` (radians).
    pub fn trace(self, frames: usize, phase: f64) -> Vec<Pose> {
        (0..frames)
            .map(|f| {
                let a = phase + std::f64::consts::TAU * f as f64 / frames as f64;
                let mut p = Pose::default();
                match self {
                    Motion::Translate => p.dx = 0.15 * a.sin(),
                    Motion::Nod => p.dy = 0.12 * a.sin(),
                    Motion::Blink => p.eye_open = 0.5 + 0.5 * a.cos(),
                    Motion::Mouth => p.mouth_open = 0.5 - 0.5 * a.cos(),
                }
                p
            })
            .collect()
    }

    /// Largest change of any pose field between consecutive frames.
    pub fn max_step(self, frames: usize) -> f64 {
        let amp = match self {
            Motion::Translate => 0.15,
            Motion::Nod => 0.12,
            Motion::Blink | Motion::Mouth => 0.5,
        };
        amp * std::f64::consts::TAU / frames as f64
    }
}

pub fn background_color(background_id: usize, u: f64, v: f64) -> [f64; 3] {
    match background_id {
        0 => [0.86, 0.88, 0.92],
        1 => [0.93, 0.85, 0.7],
        2 => {
            let s = v.clamp(0.0, 1.0);
            [0.55 + 0.35 * s, 0.75 + 0.15 * s, 0.92 - 0.1 * s]
        }
        _ => {
            // eight squares per side
            let cell = ((u * 8.0).floor() as i64 + (v * 8.0).floor() as i64).rem_euclid(2);
            if cell == 0 {
                [0.95, 0.95, 0.95]
            } else {
                [0.25, 0.3, 0.25]
            }
        }
    }
}

/// Per-pixel content at normalized point `(u, v)`: a colour if the sprite
/// covers it, `None` for background.
fn sprite_sample(id: &SpriteIdentity, pose: &Pose, u: f64, v: f64) -> Option<[f64; 3]> {
    let (cx, cy) = (0.5 + pose.dx, 0.46 + pose.dy);
    let pal = &id.palette;
    let (hx, hy) = ((u - cx) / id.head_rx, (v - cy) / id.head_ry);
    let in_head = hx * hx + hy * hy <= 1.0;
    if in_head {
        let ey = cy - id.eye_height;
        let er = id.eye_radius;
        let eye_ry = er * pose.eye_open.max(0.2);
        for side in [-1.0, 1.0] {
            let ex = cx + side * id.eye_spacing;
            let (du, dv) = ((u - ex) / er, (v - ey) / eye_ry);
            if du * du + dv * dv <= 1.0 {
                return Some(pal.eyes);
            }
        }
        let my = cy + 0.45 * id.head_ry;
        let mh = 0.02 + 0.08 * pose.mouth_open;
        if (u - cx).abs() <= id.mouth_width / 2.0 && (v - my).abs() <= mh / 2.0 {
            return Some([0.55, 0.1, 0.12]);
        }
        if hy < -1.0 + 2.0 * id.hair_depth {
            return Some(pal.hair);
        }
        return Some(pal.skin);
    }
    // torso: a box below the head, narrowing towards the neck
    let top = cy + id.head_ry * 0.85;
    if v >= top {
        let frac = ((v - top) / 0.2).min(1.0);
        let half = id.shoulder_width / 2.0 * (0.45 + 0.55 * frac);
        if (u - cx).abs() <= half {
            return Some(pal.shirt);
        }
    }
    None
}

/// Identity-free control drawing: canonical head outline, eye dots and a
/// mouth bar positioned by the pose.
fn control_sample(pose: &Pose, u: f64, v: f64) -> f64 {
    let (cx, cy) = (0.5 + pose.dx, 0.46 + pose.dy);
    let (rx, ry) = (0.24, 0.26);
    let r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    if (r - 1.0).abs() <= 0.12 {
        return 1.0;
    }
    for side in [-1.0, 1.0] {
        let ex = cx + side * 0.1;
        let eye_ry = 0.05 * pose.eye_open.max(0.2);
        if ((u - ex) / 0.05).powi(2) + ((v - (cy - 0.02)) / eye_ry).powi(2) <= 1.0 {
            return 1.0;
        }
    }
    let my = cy + 0.45 * ry;
    let mh = 0.02 + 0.08 * pose.mouth_open;
    if (u - cx).abs() <= 0.08 && (v - my).abs() <= mh / 2.0 {
        return 0.6;
    }
    0.0
}

/// One rendered frame: RGB image, control slice, and the sprite's coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// `[3, H, W]`, values on the 8-bit grid in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `[1, H, W]`, values on the 8-bit grid in `[0, 1]`.
    pub control: Tensor<f64>,
    /// `[H, W]` sprite coverage fraction in `[0, 1]`.
    pub coverage: Tensor<f64>,
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterize one frame at `resolution`. Pixel `(x, y)` averages
/// `SUPERSAMPLE^2` point samples inside its cell.
pub fn render_sprite(identity: &SpriteIdentity, pose: &Pose, background_id: usize, resolution: usize) -> RenderedFrame {
    let pose = pose.clamped();
    let r = resolution;
    let mut image = vec![0.0; 3 * r * r];
    let mut control = vec![0.0; r * r];
    let mut coverage = vec![0.0; r * r];
    let ss = SUPERSAMPLE as f64;
    let inv = 1.0 / (ss * ss);
    for y in 0..r {
        for x in 0..r {
            let mut rgb = [0.0; 3];
            let mut ctl = 0.0;
            let mut cov = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss) / r as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss) / r as f64;
                    let c = match sprite_sample(identity, &pose, u, v) {
                        Some(c) => {
                            cov += inv;
                            c
                        }
                        None => background_color(background_id, u, v),
                    };
                    for ch in 0..3 {
                        rgb[ch] += c[ch] * inv;
                    }
                    ctl += control_sample(&pose, u, v) * inv;
                }
            }
            let p = y * r + x;
            for ch in 0..3 {
                image[ch * r * r + p] = quantize(rgb[ch]);
            }
            control[p] = quantize(ctl);
            coverage[p] = cov;
        }
    }
    RenderedFrame {
        image: Tensor::from_vec(&[3, r, r], image),
        control: Tensor::from_vec(&[1, r, r], control),
        coverage: Tensor::from_vec(&[r, r], coverage),
    }
}

/// Plain background image `[3, H, W]` for a background id.
pub fn render_background(background_id: usize, resolution: usize) -> Tensor<f64> {
    let r = resolution;
    let ss = SUPERSAMPLE as f64;
    let mut image = vec![0.0; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let mut rgb = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss) / r as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss) / r as f64;
                    let c = background_color(background_id, u, v);
                    for ch in 0..3 {
                        rgb[ch] += c[ch] / (ss * ss);
                    }
                }
            }
            for ch in 0..3 {
                image[ch * r * r + y * r + x] = quantize(rgb[ch]);
            }
        }
    }
    Tensor::from_vec(&[3, r, r], image)
}

/// Coverage-weighted centroid `(x, y)` in pixels.
pub fn centroid(weights: &Tensor<f64>) -> Option<(f64, f64)> {
    let (h, w) = (weights.dim(weights.shape().len() - 2), weights.dim(weights.shape().len() - 1));
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = weights.data()[y * w + x];
            sx += v * x as f64;
            sy += v * y as f64;
            m += v;
        }
    }
    (m > 0.0).then(|| (sx / m, sy / m))
}

/// Smallest mean absolute pixel difference between any two identities
/// rendered in the neutral pose on background 0.
pub fn min_pairwise_distance(roster: &[SpriteIdentity], resolution: usize) -> f64 {
    let imgs: Vec<_> = roster
        .iter()
        .map(|id| render_sprite(id, &Pose::default(), 0, resolution).image)
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..imgs.len() {
        for j in i + 1..imgs.len() {
            let d = imgs[i]
                .data()
                .iter()
                .zip(imgs[j].data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / imgs[i].numel() as f64;
            best = best.min(d);
        }
    }
    best
}

/// Random clip phase in `[0, 2pi)`.
pub fn random_phase(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let id = SpriteIdentity::new(3, 16);
        let p = Pose {
            dx: 0.05,
            ..Pose::default()
        };
        assert_eq!(render_sprite(&id, &p, 2, 16), render_sprite(&id, &p, 2, 16));
    }

    #[test]
    fn control_ignores_identity() {
        let p = Pose {
            dx: -0.1,
            dy: 0.04,
            eye_open: 0.3,
            mouth_open: 0.7,
        };
        let a = render_sprite(&SpriteIdentity::new(0, 16), &p, 0, 32);
        let b = render_sprite(&SpriteIdentity::new(11, 16), &p, 3, 32);
        assert_eq!(a.control, b.control);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn integer_shift_moves_centroid() {
        let id = SpriteIdentity::new(5, 16);
        let r = 32;
        for d in [1i32, 2, 3] {
            let a = render_sprite(&id, &Pose::default(), 0, r);
            let p = Pose {
                dx: d as f64 / r as f64,
                ..Pose::default()
            };
            let b = render_sprite(&id, &p, 0, r);
            let (ca, cb) = (centroid(&a.coverage).unwrap(), centroid(&b.coverage).unwrap());
            assert!((cb.0 - ca.0 - d as f64).abs() < 1e-9, "shift {d}: {ca:?} -> {cb:?}");
            assert!((cb.1 - ca.1).abs() < 1e-9);
        }
    }

    #[test]
    fn identities_are_distinct() {
        for r in [16, 32] {
            let d = min_pairwise_distance(&SpriteIdentity::roster(16), r);
            assert!(d > 0.02, "resolution {r}: min distance {d}");
        }
    }

    #[test]
    fn out_of_range_pose_is_clamped() {
        let id = SpriteIdentity::new(0, 16);
        let wild = Pose {
            dx: 5.0,
            dy: -3.0,
            eye_open: 2.0,
            mouth_open: -1.0,
        };
        let clamped = Pose {
            dx: MAX_OFFSET,
            dy: -MAX_OFFSET,
            eye_open: 1.0,
            mouth_open: 0.0,
        };
        assert_eq!(render_sprite(&id, &wild, 0, 16), render_sprite(&id, &clamped, 0, 16));
    }

    #[test]
    fn traces_are_smooth() {
        for m in Motion::ALL {
            let tr = m.trace(8, 0.7);
            let bound = m.max_step(8) + 1e-12;
            for w in tr.windows(2) {
                let d = (w[1].dx - w[0].dx)
                    .abs()
                    .max((w[1].dy - w[0].dy).abs())
                    .max((w[1].eye_open - w[0].eye_open).abs())
                    .max((w[1].mouth_open - w[0].mouth_open).abs());
                assert!(d <= bound, "{m:?} step {d} > {bound}");
            }
        }
    }
}

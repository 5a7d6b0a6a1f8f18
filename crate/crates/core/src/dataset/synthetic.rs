//! Procedural pedestrian corpus.
//!
//! Each identity is a fixed appearance signature (clothing colors, a
//! fine-grained torso pattern, accessories, body proportions). Each camera
//! applies a global color cast and its own background; each image adds
//! placement jitter, leg pose and sensor noise. The torso carries a
//! one- or two-pixel luminance pattern around the shirt color, so the
//! mean color survives down-sampling and the pattern mostly does not.

use image::{Rgb, Rgb32FImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageRecord, ResolutionTag};
use crate::error::{FtwaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: u32,
    pub n_cameras: u32,
    pub images_per_id_per_cam: u32,
    pub seed: u64,
    pub height: u32,
    pub width: u32,
}

impl SyntheticSpec {
    pub fn new(n_identities: u32, n_cameras: u32, images_per_id_per_cam: u32, seed: u64) -> Self {
        Self {
            n_identities,
            n_cameras,
            images_per_id_per_cam,
            seed,
            height: 64,
            width: 32,
        }
    }

    pub fn generate(&self) -> Result<Vec<ImageRecord>> {
        if self.n_identities == 0 || self.n_cameras == 0 || self.images_per_id_per_cam == 0 {
            return Err(FtwaError::Config(format!(
                "synthetic corpus counts must be at least 1, got {:?}",
                (self.n_identities, self.n_cameras, self.images_per_id_per_cam)
            )));
        }
        if self.height < 16 || self.width < 8 {
            return Err(FtwaError::Config(format!(
                "synthetic canvas {}x{} too small",
                self.height, self.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let people: Vec<Appearance> = (0..self.n_identities)
            .map(|_| Appearance::sample(&mut rng))
            .collect();
        let cameras: Vec<Camera> = (0..self.n_cameras)
            .map(|_| Camera::sample(&mut rng))
            .collect();
        let mut records = Vec::with_capacity(
            (self.n_identities * self.n_cameras * self.images_per_id_per_cam) as usize,
        );
        for (pid, person) in people.iter().enumerate() {
            for (cid, camera) in cameras.iter().enumerate() {
                for _ in 0..self.images_per_id_per_cam {
                    let pose = Pose::sample(&mut rng);
                    let img = render(person, camera, &pose, self.height, self.width, &mut rng);
                    records.push(ImageRecord::new(
                        img,
                        pid as u32,
                        cid as u32,
                        ResolutionTag::RealHr,
                    )?);
                }
            }
        }
        Ok(records)
    }
}

/// `n_identities × n_cameras × images_per_id_per_cam` records at 64×32,
/// all tagged high resolution. Deterministic in `seed`.
pub fn generate_synthetic_corpus(
    n_identities: u32,
    n_cameras: u32,
    images_per_id_per_cam: u32,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    SyntheticSpec::new(n_identities, n_cameras, images_per_id_per_cam, seed).generate()
}

type Color = [f32; 3];

fn hsv(h: f32, s: f32, v: f32) -> Color {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    hsv(
        rng.random::<f32>(),
        rng.random_range(0.35..1.0),
        rng.random_range(0.25..0.95),
    )
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Plain,
    HorizontalStripes { period: u32 },
    VerticalStripes { period: u32 },
    Checker { period: u32 },
}

#[derive(Debug, Clone)]
struct Appearance {
    upper: Color,
    upper_alt: Color,
    pattern: Pattern,
    lower: Color,
    shoes: Color,
    skin: Color,
    hair: Color,
    short_sleeves: bool,
    bag: Option<(Color, bool)>,
    build: f32,
    height: f32,
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let period = rng.random_range(1..=2);
        let pattern = match rng.random_range(0..3) {
            0 => Pattern::HorizontalStripes { period },
            1 => Pattern::VerticalStripes { period },
            _ => Pattern::Checker { period },
        };
        let upper = random_color(rng);
        let contrast = rng.random_range(0.35..0.6f32);
        let skin_tone = rng.random_range(0.35..0.9f32);
        Self {
            upper: upper.map(|c| c * (1.0 - contrast)),
            upper_alt: upper.map(|c| (c * (1.0 + contrast)).min(1.0)),
            pattern,
            lower: random_color(rng),
            shoes: hsv(rng.random(), 0.3, rng.random_range(0.1..0.5)),
            skin: [skin_tone, skin_tone * 0.78, skin_tone * 0.62],
            hair: hsv(rng.random_range(0.0..0.15), 0.6, rng.random_range(0.05..0.6)),
            short_sleeves: rng.random_bool(0.4),
            bag: rng
                .random_bool(0.4)
                .then(|| (random_color(rng), rng.random_bool(0.5))),
            build: rng.random_range(0.85..1.15),
            height: rng.random_range(0.92..1.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Camera {
    gain: Color,
    offset: f32,
    background: Color,
    background_alt: Color,
}

impl Camera {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut gain = [0f32; 3];
        for g in &mut gain {
            *g = rng.random_range(0.8..1.2);
        }
        Self {
            gain,
            offset: rng.random_range(-0.06..0.06),
            background: hsv(rng.random(), rng.random_range(0.0..0.3), rng.random_range(0.3..0.8)),
            background_alt: hsv(rng.random(), rng.random_range(0.0..0.3), rng.random_range(0.3..0.8)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    dx: f32,
    dy: f32,
    scale: f32,
    stride: f32,
    mirrored: bool,
    noise: f32,
}

impl Pose {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.random_range(-0.06..0.06),
            dy: rng.random_range(-0.03..0.03),
            scale: rng.random_range(0.92..1.05),
            stride: rng.random_range(0.0..0.08),
            mirrored: rng.random_bool(0.5),
            noise: 0.02,
        }
    }
}

fn in_ellipse(u: f32, v: f32, cu: f32, cv: f32, ru: f32, rv: f32) -> bool {
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b <= 1.0
}

fn in_rect(u: f32, v: f32, u0: f32, u1: f32, v0: f32, v1: f32) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

/// Body-part color at person coordinates `(u, v)` (both in `[0, 1]`, `v`
/// top-down), or `None` for background.
fn person_color(p: &Appearance, pose: &Pose, u: f32, v: f32, x: u32, y: u32) -> Option<Color> {
    let bw = 0.2 * p.build;
    let top = 1.0 - p.height;
    let head_v = top + 0.09;
    if in_ellipse(u, v, 0.5, head_v, 0.11, 0.07) {
        return Some(if v < head_v - 0.025 { p.hair } else { p.skin });
    }
    let (torso_top, torso_bottom) = (top + 0.17, top + 0.52);
    if in_rect(u, v, 0.5 - bw, 0.5 + bw, torso_top, torso_bottom) {
        let alt = match p.pattern {
            Pattern::Plain => false,
            Pattern::HorizontalStripes { period } => (y / period) % 2 == 1,
            Pattern::VerticalStripes { period } => (x / period) % 2 == 1,
            Pattern::Checker { period } => (x / period + y / period) % 2 == 1,
        };
        return Some(if alt { p.upper_alt } else { p.upper });
    }
    if let Some((color, left)) = p.bag {
        let (u0, u1) = if left {
            (0.5 - bw - 0.14, 0.5 - bw)
        } else {
            (0.5 + bw, 0.5 + bw + 0.14)
        };
        if in_rect(u, v, u0, u1, top + 0.33, top + 0.55) {
            return Some(color);
        }
    }
    let arm_w = 0.08;
    let in_arm = in_rect(u, v, 0.5 - bw - arm_w, 0.5 - bw, torso_top, top + 0.5)
        || in_rect(u, v, 0.5 + bw, 0.5 + bw + arm_w, torso_top, top + 0.5);
    if in_arm {
        let sleeve_end = if p.short_sleeves { top + 0.3 } else { top + 0.46 };
        return Some(if v < sleeve_end { p.upper } else { p.skin });
    }
    let (leg_top, leg_bottom) = (torso_bottom, top + 0.92);
    let spread = pose.stride * ((v - leg_top) / (leg_bottom - leg_top)).clamp(0.0, 1.0);
    let left_leg = in_rect(u, v, 0.5 - 0.17 - spread, 0.5 - 0.01 - spread, leg_top, leg_bottom);
    let right_leg = in_rect(u, v, 0.5 + 0.01 + spread, 0.5 + 0.17 + spread, leg_top, leg_bottom);
    if left_leg || right_leg {
        return Some(p.lower);
    }
    let shoe_l = in_rect(u, v, 0.5 - 0.19 - spread, 0.5 - 0.01 - spread, leg_bottom, leg_bottom + 0.05);
    let shoe_r = in_rect(u, v, 0.5 + 0.01 + spread, 0.5 + 0.19 + spread, leg_bottom, leg_bottom + 0.05);
    if shoe_l || shoe_r {
        return Some(p.shoes);
    }
    None
}

fn render(
    person: &Appearance,
    camera: &Camera,
    pose: &Pose,
    height: u32,
    width: u32,
    rng: &mut ChaCha8Rng,
) -> Rgb32FImage {
    let noise = Normal::new(0.0f32, pose.noise).expect("valid noise std");
    let mut img = Rgb32FImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut u = (x as f32 + 0.5) / width as f32;
            if pose.mirrored {
                u = 1.0 - u;
            }
            let v = (y as f32 + 0.5) / height as f32;
            let pu = (u - 0.5 - pose.dx) / pose.scale + 0.5;
            let pv = (v - pose.dy) / pose.scale;
            let base = person_color(person, pose, pu, pv, x, y).unwrap_or_else(|| {
                let t = v;
                let mut c = [0f32; 3];
                for (i, ch) in c.iter_mut().enumerate() {
                    *ch = camera.background[i] * (1.0 - t) + camera.background_alt[i] * t;
                }
                c
            });
            let mut px = [0f32; 3];
            for c in 0..3 {
                let value = base[c] * camera.gain[c] + camera.offset + noise.sample(rng);
                px[c] = value.clamp(0.0, 1.0);
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn counts_and_identities() {
        let records = generate_synthetic_corpus(20, 2, 4, 7).unwrap();
        assert_eq!(records.len(), 160);
        let ids: BTreeSet<u32> = records.iter().map(|r| r.person_id).collect();
        assert_eq!(ids.len(), 20);
        assert!(records.iter().all(|r| r.size() == (64, 32)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(5, 2, 2, 99).unwrap();
        let b = generate_synthetic_corpus(5, 2, 2, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels().as_raw(), y.pixels().as_raw());
            assert_eq!((x.person_id, x.camera_id), (y.person_id, y.camera_id));
        }
        let c = generate_synthetic_corpus(5, 2, 2, 100).unwrap();
        assert_ne!(a[0].pixels().as_raw(), c[0].pixels().as_raw());
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(generate_synthetic_corpus(0, 2, 4, 1).is_err());
        assert!(generate_synthetic_corpus(2, 0, 4, 1).is_err());
        assert!(generate_synthetic_corpus(2, 2, 0, 1).is_err());
    }
}

//! Procedurally drawn 32x32 fixture images: a coloured shape on a flat
//! background, captioned from the fixture vocabulary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::RgbImage;

pub const SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let dist = libm::sqrt(dx * dx + dy * dy);
        match self {
            Shape::Circle => dist <= r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Ring => dist <= r && dist >= 0.55 * r,
        }
    }
}

pub const FOREGROUNDS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
];

pub const BACKGROUNDS: [(&str, [f64; 3]); 4] = [
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.5, 0.5, 0.5]),
    ("purple", [0.5, 0.2, 0.6]),
];

/// Scene description for one fixture image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: [f64; 3],
    pub background: [f64; 3],
    pub center: (f64, f64),
    pub radius: f64,
}

/// Renders with 4x4 supersampling per pixel.
pub fn render(scene: &Scene) -> RgbImage {
    let mut data = Vec::with_capacity(SIZE * SIZE * 3);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let mut cover = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                    if scene.shape.contains(px - scene.center.0, py - scene.center.1, scene.radius) {
                        cover += 1.0 / 16.0;
                    }
                }
            }
            for c in 0..3 {
                data.push(cover * scene.color[c] + (1.0 - cover) * scene.background[c]);
            }
        }
    }
    RgbImage::new(SIZE, SIZE, data).expect("fixture size")
}

pub fn caption(shape: Shape, fg: &str, bg: &str) -> String {
    format!("a {fg} {} on a {bg} background", shape.name())
}

/// The 64-image training corpus: every shape, foreground and background
/// combination with a seeded position and size jitter.
pub fn corpus(seed: u64) -> Vec<(RgbImage, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(64);
    for shape in Shape::ALL {
        for (fg, color) in FOREGROUNDS {
            for (bg, background) in BACKGROUNDS {
                let center = (16.0 + rng.random_range(-3.0..3.0), 16.0 + rng.random_range(-3.0..3.0));
                let radius = rng.random_range(8.5..11.0);
                let scene = Scene { shape, color, background, center, radius };
                out.push((render(&scene), caption(shape, fg, bg)));
            }
        }
    }
    out
}

/// Held-out image used by the editing examples, and its caption.
pub fn edit_fixture() -> (RgbImage, String) {
    let scene = Scene {
        shape: Shape::Circle,
        color: FOREGROUNDS[0].1,
        background: BACKGROUNDS[0].1,
        center: (14.5, 17.0),
        radius: 9.5,
    };
    (render(&scene), caption(Shape::Circle, "red", "white"))
}

/// Corpus jitter seed and text-table seed of the bundled base model.
pub const CORPUS_SEED: u64 = 3;
pub const TEXT_SEED: u64 = 7;

/// The corpus as latents paired with their encoded captions.
pub fn encoded_corpus(encoder: &crate::ToyTextEncoder) -> Vec<(crate::LatentImage, crate::PromptEmbedding)> {
    corpus(CORPUS_SEED)
        .into_iter()
        .map(|(img, cap)| (crate::image::encode_latent(&img).expect("fixture size"), encoder.encode_prompt(&cap)))
        .collect()
}

/// Target prompt paired with [`edit_fixture`].
pub const EDIT_TARGET: &str = "a blue circle on a white background";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_complete() {
        let a = corpus(1);
        let b = corpus(1);
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        let mut caps: Vec<&str> = a.iter().map(|(_, c)| c.as_str()).collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 64);
    }

    #[test]
    fn shapes_cover_center() {
        let (img, cap) = edit_fixture();
        assert_eq!(cap, "a red circle on a white background");
        let p = img.pixel(14, 17);
        assert!(p[0] > 0.8 && p[2] < 0.2);
        let corner = img.pixel(0, 0);
        assert!((corner[0] - 0.95).abs() < 1e-12);
    }
}

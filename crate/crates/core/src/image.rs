//! RGB images and the fixed patch transform between 32x32 RGB pixels and the
//! 4x8x8 latent the denoiser works on.
//!
//! Each 4x4 pixel block becomes one latent position with four channels: the
//! block means of R, G and B, and the left-minus-right difference of the
//! block's gray level. All values are mapped from `[0, 1]` to `[-1, 1]`.
//! [`decode_latent`] is an exact right inverse: encoding a decoded latent
//! returns it unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Array, Error, LatentImage, Result};

/// Pixel edge length of one latent position.
pub const PATCH: usize = 4;
pub const LATENT_CHANNELS: usize = 4;

/// Interleaved `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch { expected: vec![height, width, 3], got: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Quantizes to 8-bit with round-to-nearest after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamped(&self) -> RgbImage {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Mean squared difference over all pixels and channels.
    pub fn mse(&self, other: &RgbImage) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width, 3],
                got: vec![other.height, other.width, 3],
            });
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }
}

pub fn encode_latent(img: &RgbImage) -> Result<LatentImage> {
    if !img.width.is_multiple_of(PATCH) || !img.height.is_multiple_of(PATCH) || img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "image size {}x{} is not a multiple of {PATCH}",
            img.width,
            img.height
        )));
    }
    let (lw, lh) = (img.width / PATCH, img.height / PATCH);
    let plane = lw * lh;
    let mut out = vec![0.0; LATENT_CHANNELS * plane];
    let half = PATCH / 2;
    let norm = (PATCH * PATCH) as f64;
    let half_norm = (PATCH * half) as f64;
    for by in 0..lh {
        for bx in 0..lw {
            let mut mean = [0.0; 3];
            let (mut left, mut right) = (0.0, 0.0);
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let p = img.pixel(bx * PATCH + dx, by * PATCH + dy);
                    for c in 0..3 {
                        mean[c] += p[c];
                    }
                    let gray = (p[0] + p[1] + p[2]) / 3.0;
                    if dx < half {
                        left += gray;
                    } else {
                        right += gray;
                    }
                }
            }
            let pos = by * lw + bx;
            for c in 0..3 {
                out[c * plane + pos] = 2.0 * mean[c] / norm - 1.0;
            }
            out[3 * plane + pos] = 2.0 * (left - right) / half_norm;
        }
    }
    LatentImage::new(Array::from_vec(&[LATENT_CHANNELS, lh, lw], out)?)
}

/// Inverse patch transform; values are not clamped.
pub fn decode_latent(latent: &LatentImage) -> Result<RgbImage> {
    let shape = latent.shape();
    if shape.len() != 3 || shape[0] != LATENT_CHANNELS {
        return Err(Error::ShapeMismatch { expected: vec![LATENT_CHANNELS, 0, 0], got: shape.to_vec() });
    }
    let (lh, lw) = (shape[1], shape[2]);
    let plane = lh * lw;
    let z = latent.array().data();
    let (w, h) = (lw * PATCH, lh * PATCH);
    let mut data = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let pos = (y / PATCH) * lw + x / PATCH;
            let detail = z[3 * plane + pos] / 4.0;
            let d = if x % PATCH < PATCH / 2 { detail } else { -detail };
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = (z[c * plane + pos] + 1.0) / 2.0 + d;
            }
        }
    }
    RgbImage::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_of_decode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lat = LatentImage::new(Array::from_vec(&[4, 8, 8], z).unwrap()).unwrap();
        let back = encode_latent(&decode_latent(&lat).unwrap()).unwrap();
        assert!(back.array().max_abs_diff(lat.array()).unwrap() < 1e-12);
    }

    #[test]
    fn flat_image_has_zero_detail() {
        let img = RgbImage::new(32, 32, vec![0.25; 32 * 32 * 3]).unwrap();
        let lat = encode_latent(&img).unwrap();
        assert_eq!(lat.shape(), &[4, 8, 8]);
        let d = lat.array().data();
        assert!(d[..192].iter().all(|&v| (v + 0.5).abs() < 1e-12));
        assert!(d[192..].iter().all(|&v| v.abs() < 1e-12));
        assert!(decode_latent(&lat).unwrap().mse(&img).unwrap() < 1e-24);
    }

    #[test]
    fn rejects_bad_sizes() {
        let img = RgbImage::new(6, 6, vec![0.0; 108]).unwrap();
        assert!(encode_latent(&img).is_err());
        assert!(RgbImage::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn u8_round_trip() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(4 * 4 * 3).collect();
        let img = RgbImage::from_u8(4, 4, &bytes).unwrap();
        assert_eq!(img.to_u8(), bytes);
    }
}

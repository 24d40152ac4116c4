//! PNG decoding and encoding for 32x32 RGB images.

use std::io::Cursor;
use std::path::Path;

use forgedit_core::fixtures::SIZE;
use forgedit_core::RgbImage;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage as Buffer};

use crate::error::IoContext;
use crate::store::write_atomic;
use crate::{Error, Result};

/// Decodes an image and resizes it to 32x32 when it has another size.
pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
    let img = if img.dimensions() == (SIZE as u32, SIZE as u32) {
        img
    } else {
        image::imageops::resize(&img, SIZE as u32, SIZE as u32, FilterType::Triangle)
    };
    Ok(RgbImage::from_u8(SIZE, SIZE, img.as_raw())?)
}

/// Clamps and quantizes to 8 bits.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = Buffer::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read(path: &Path) -> Result<RgbImage> {
    decode(&std::fs::read(path).at(path)?)
}

pub fn write(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

//! Lossless image files. Candidates are always written as 8-bit PNG.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Decodes any supported format. Gray sources stay single-channel, alpha is
/// dropped, and deeper samples are reduced to 8 bits.
pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes)?;
    from_dynamic(img)
}

pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    from_dynamic(img)
}

fn from_dynamic(img: DynamicImage) -> Result<ImageTensor> {
    let gray = !img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = if gray {
        ImageTensor::from_u8(h, w, 1, img.to_luma8().as_raw())?
    } else {
        ImageTensor::from_u8(h, w, 3, img.to_rgb8().as_raw())?
    };
    Ok(t)
}

/// PNG bytes of the quantized image.
pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_u8();
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("gray buffer")),
        _ => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("rgb buffer")),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(Error::from)
}

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat};

use super::Image;
use crate::error::{Error, Result};

/// Loads any PNG or JPEG as grayscale in `[0, 1]`; color inputs are reduced
/// to luminance.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_luma8(&dynimg.to_luma8()))
}

/// Writes an 8-bit grayscale file; the format follows the extension
/// (`.png`, `.jpg`/`.jpeg` at quality 95).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match ImageFormat::from_path(path) {
        Ok(ImageFormat::Jpeg) => save_jpeg(img, path, 95),
        Ok(ImageFormat::Png) => {
            let gray = to_luma8(img)?;
            gray.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Codec {
                path: path.to_path_buf(),
                source,
            })
        }
        _ => Err(Error::param(format!(
            "unsupported output format: {}",
            path.display()
        ))),
    }
}

pub fn save_jpeg(img: &Image, path: impl AsRef<Path>, quality: u8) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_jpeg(img, quality)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>> {
    let gray = to_luma8(img)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100))
        .write_image(gray.as_raw(), gray.width(), gray.height(), ExtendedColorType::L8)
        .map_err(|source| Error::Codec {
            path: "<memory>".into(),
            source,
        })?;
    Ok(buf)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load(Cursor::new(bytes), ImageFormat::Jpeg).map_err(|source| Error::Codec {
        path: "<memory>".into(),
        source,
    })?;
    Ok(from_luma8(&dynimg.to_luma8()))
}

fn from_luma8(gray: &GrayImage) -> Image {
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Image::from_vec(h as usize, w as usize, 1, data).expect("decoder returned consistent dims")
}

fn to_luma8(img: &Image) -> Result<GrayImage> {
    img.ensure_single_channel()?;
    let raw = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer sized from dims"))
}

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// `[0, 1]` to 8 bits, rounding halves to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// RGB image as row-major `[0, 1]` values. Format follows the file contents.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<f64>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .into_rgb8();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Ok((img.width(), img.height(), data))
}

/// Single-channel 8-bit values.
pub fn read_gray(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u8>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .into_luma8();
    Ok((img.width(), img.height(), img.into_raw()))
}

/// Writes PNG or binary PPM depending on the extension.
pub fn write_rgb(path: impl AsRef<Path>, width: u32, height: u32, rgb: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let n = width as usize * height as usize * 3;
    if rgb.len() != n {
        return Err(Error::shape(format!("image {}", path.display()), n, rgb.len()));
    }
    let img = RgbImage::from_raw(width, height, rgb.iter().map(|&v| quantize(v)).collect()).expect("length checked");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_gray(path: impl AsRef<Path>, width: u32, height: u32, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let n = width as usize * height as usize;
    if values.len() != n {
        return Err(Error::shape(format!("image {}", path.display()), n, values.len()));
    }
    let img = GrayImage::from_raw(width, height, values.iter().map(|&v| quantize(v)).collect()).expect("length checked");
    img.save(path).map_err(|e| image_err(path, e))
}

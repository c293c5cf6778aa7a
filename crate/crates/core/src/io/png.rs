//! 8-bit RGB PNG interchange. Values are treated as linear; no sRGB transfer
//! function is applied in either direction.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Image;

pub fn to_rgb8<R: Real>(img: &Image<R>) -> RgbImage {
    let quantize = |v: R| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(x as usize, y as usize);
        Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
    })
}

pub fn from_rgb8<R: Real>(buf: &RgbImage) -> Image<R> {
    Image::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
        buf.get_pixel(x as u32, y as u32).0.map(|v| R::c(v as f64 / 255.0))
    })
}

pub fn write_png<R: Real>(path: impl AsRef<Path>, img: &Image<R>) -> Result<()> {
    to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Any PNG, converted to 8-bit RGB; alpha channels are dropped.
pub fn read_png<R: Real>(path: impl AsRef<Path>) -> Result<Image<R>> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&img))
}

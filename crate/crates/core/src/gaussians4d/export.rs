use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::Tensor;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbImage, RgbaImage};

use crate::nn::layers::to_f64_vec;
use crate::Result;

/// `[H, W, 3]` image in `[0, 1]` to 8-bit RGB: `round(255 * clamp(v, 0, 1))`.
pub fn to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let (h, w, _) = img.dims3()?;
    let data: Vec<u8> = to_f64_vec(img)?
        .into_iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions"))
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes an infinitely looping GIF, one frame per image.
pub fn save_gif(frames: &[Tensor], fps: u32, path: &Path) -> Result<()> {
    let mut enc = GifEncoder::new(BufWriter::new(File::create(path)?));
    enc.set_repeat(Repeat::Infinite)?;
    let delay = Delay::from_numer_denom_ms(1000, fps.max(1));
    for f in frames {
        let rgb = to_rgb8(f)?;
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(rgb).to_rgba8();
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, delay))?;
    }
    Ok(())
}

/// Reads a PNG back as `[H, W, 3]` f32 in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (h as usize, w as usize, 3), &candle_core::Device::Cpu)?)
}

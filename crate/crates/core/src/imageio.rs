//! 8-bit RGB PNG persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor3};

fn png_err(e: impl ToString) -> Error {
    Error::Png(e.to_string())
}

/// Encode to 8-bit RGB bytes (row-major, interleaved).
pub fn to_rgb8(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.height * image.width * 3);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                let v = if image.channels == 1 { image.get(0, y, x) } else { image.get(c, y, x) };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut buf, image.width as u32, image.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&to_rgb8(image)).map_err(png_err)?;
    }
    Ok(buf)
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&to_rgb8(image)).map_err(png_err)?;
    Ok(())
}

/// Gray, gray-alpha, RGB and RGBA 8-bit PNGs are accepted; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    let mut img = Tensor3::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = &buf[(y * w + x) * stride..];
            for c in 0..3 {
                let byte = if stride < 3 { p[0] } else { p[c] };
                img.set(c, y, x, byte as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

//! PNG reading and writing. Only 8/16-bit grayscale and RGB are accepted;
//! pixel values map to `v / (2^bits - 1)`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cast, Dims, Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage<T> {
    /// `(1, c, h, w)`, `c` in `{1, 3}`.
    pub tensor: Tensor<T>,
    pub bits: u8,
}

fn max_value(bits: u8) -> Result<f64> {
    match bits {
        8 => Ok(255.0),
        16 => Ok(65535.0),
        other => Err(Error::Image(format!("bit depth {other} not supported (8 or 16)"))),
    }
}

/// Round-half-up quantization of a `[0, 1]` value (clamped first).
pub fn quantize(v: f64, bits: u8) -> Result<u16> {
    let m = max_value(bits)?;
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    Ok((v * m + 0.5).floor() as u16)
}

/// Snaps every value to the nearest representable level.
pub fn quantize_tensor<T: Element>(t: &Tensor<T>, bits: u8) -> Result<Tensor<T>> {
    let m = max_value(bits)?;
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = cast(quantize(v.to_f64().unwrap_or(f64::NAN), bits)? as f64 / m);
    }
    Ok(out)
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

pub fn load_png<T: Element>(path: impl AsRef<Path>) -> Result<LoadedImage<T>> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = reader.output_color_type();
    let channels = match color {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => return Err(Error::Image(format!("color type {other:?} not supported (grayscale or RGB)"))),
    };
    let bits = match depth {
        BitDepth::Eight => 8u8,
        BitDepth::Sixteen => 16,
        other => return Err(Error::Image(format!("bit depth {other:?} not supported (8 or 16)"))),
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let m = max_value(bits)?;
    let bytes_per = usize::from(bits / 8);
    let stride = info.line_size;
    let tensor = Tensor::from_fn(Dims::new(1, channels, h, w), |_, c, y, x| {
        let at = y * stride + (x * channels + c) * bytes_per;
        let raw = if bytes_per == 1 { u16::from(buf[at]) } else { u16::from_be_bytes([buf[at], buf[at + 1]]) };
        cast(raw as f64 / m)
    });
    Ok(LoadedImage { tensor, bits })
}

/// Writes a `(1, c, h, w)` tensor, `c` in `{1, 3}`, quantizing with [`quantize`].
pub fn save_png<T: Element>(path: impl AsRef<Path>, image: &Tensor<T>, bits: u8) -> Result<()> {
    let d = image.dims();
    if d.n != 1 || (d.c != 1 && d.c != 3) {
        return shape_err(format!("PNG output must be 1x1xHxW or 1x3xHxW, got {d}"));
    }
    let depth = match bits {
        8 => BitDepth::Eight,
        16 => BitDepth::Sixteen,
        other => return Err(Error::Image(format!("bit depth {other} not supported (8 or 16)"))),
    };
    let mut data = Vec::with_capacity(d.numel() * usize::from(bits / 8));
    for y in 0..d.h {
        for x in 0..d.w {
            for c in 0..d.c {
                let q = quantize(image.at(0, c, y, x).to_f64().unwrap_or(f64::NAN), bits)?;
                if bits == 8 {
                    data.push(q as u8);
                } else {
                    data.extend_from_slice(&q.to_be_bytes());
                }
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, d.w as u32, d.h as u32);
    encoder.set_color(if d.c == 1 { ColorType::Grayscale } else { ColorType::Rgb });
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn quantization_levels() {
        assert_eq!(quantize(1.0, 8).unwrap(), 255);
        assert_eq!(quantize(0.0, 8).unwrap(), 0);
        assert_eq!(quantize(0.5, 8).unwrap(), 128);
        assert_eq!(quantize(1.5 / 255.0, 8).unwrap(), 2);
        assert_eq!(quantize(-3.0, 16).unwrap(), 0);
        assert!(quantize(0.5, 12).is_err());
    }

    #[test]
    fn roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (bits, c) in [(8u8, 3usize), (16, 1), (8, 1), (16, 3)] {
            let x = Tensor::<f64>::random_uniform(Dims::new(1, c, 5, 7), 0.0, 1.0, &mut rng);
            let q = quantize_tensor(&x, bits).unwrap();
            let path = dir.path().join(format!("img{bits}_{c}.png"));
            save_png(&path, &x, bits).unwrap();
            let back = load_png::<f64>(&path).unwrap();
            assert_eq!(back.bits, bits);
            assert_eq!(back.tensor, q);
        }
    }

    #[test]
    fn level_128_maps_to_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let x = Tensor::<f64>::from_vec(Dims::new(1, 1, 1, 3), vec![0.0, 128.0 / 255.0, 1.0]).unwrap();
        save_png(&path, &x, 8).unwrap();
        let back = load_png::<f64>(&path).unwrap().tensor;
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert!(save_png(&path, &Tensor::<f64>::zeros(Dims::new(1, 2, 2, 2)), 8).is_err());
    }
}

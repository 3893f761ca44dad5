//! Grayscale image decoding: binary PGM/PPM natively, PNG through `png`.
//! Color is reduced with BT.601 luma weights.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

use super::atomic_write;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn load_image(path: &Path) -> Result<GrayImage> {
    decode_image(&std::fs::read(path)?).map_err(|e| match e {
        Error::UnsupportedImage(m) => Error::UnsupportedImage(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Decodes by content, not by file extension.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    match bytes {
        [b'P', b'5', ..] => decode_pnm(bytes, 1),
        [b'P', b'6', ..] => decode_pnm(bytes, 3),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(Error::UnsupportedImage("expected binary PGM (P5), PPM (P6) or PNG".into())),
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<GrayImage> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Truncated("PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedImage("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedImage("malformed PNM header".into()));
    }
    pos += 1;
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedImage(format!("PNM {w}x{h} maxval {maxval}")));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels * sample_bytes))
        .ok_or_else(|| Error::UnsupportedImage("PNM dimensions overflow".into()))?;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Truncated(format!("PNM payload: need {need} bytes, have {}", bytes.len() - pos)))?;
    let samples: Vec<f64> = if sample_bytes == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    };
    Ok(to_gray(w, h, &samples, channels, maxval as f64))
}

fn to_gray(w: usize, h: usize, samples: &[f64], channels: usize, maxval: f64) -> GrayImage {
    let pixels = samples
        .chunks_exact(channels)
        .map(|p| match channels {
            1 | 2 => (p[0] / maxval) as f32,
            _ => ((LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]) / maxval) as f32,
        })
        .collect();
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |e: png::DecodingError| Error::UnsupportedImage(format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedImage("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let buf = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let (samples, maxval): (Vec<f64>, f64) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect(),
            65535.0,
        ),
        _ => (buf.iter().map(|&b| b as f64).collect(), 255.0),
    };
    Ok(to_gray(info.width as usize, info.height as usize, &samples, channels, maxval))
}

/// 8-bit binary PGM; values are clamped to `[0,1]` and rounded.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    atomic_write(path, &encode_pgm(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pgm_white_is_one() {
        let img = decode_image(b"P5\n# comment\n2 1\n255\n\xff\x00").unwrap();
        assert_eq!(img.pixels, vec![1.0, 0.0]);
    }

    #[test]
    fn ppm_red_is_bt601_weight() {
        let img = decode_image(b"P6 1 1 255 \xff\x00\x00").unwrap();
        assert!((img.pixels[0] - 0.299).abs() < 1e-7);
    }

    #[test]
    fn pgm_reencode_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bytes = b"P5\n37 21\n255\n".to_vec();
        bytes.extend((0..37 * 21).map(|_| rng.random::<u8>()));
        assert_eq!(encode_pgm(&decode_image(&bytes).unwrap()), bytes);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let img = decode_image(b"P5 1 1 65535\n\xff\xff").unwrap();
        assert_eq!(img.pixels, vec![1.0]);
    }

    #[test]
    fn png_gray_and_rgb() {
        let encode = |color: png::ColorType, data: &[u8]| {
            let mut out = Vec::new();
            let mut e = png::Encoder::new(&mut out, 2, 1);
            e.set_color(color);
            e.set_depth(png::BitDepth::Eight);
            let mut w = e.write_header().unwrap();
            w.write_image_data(data).unwrap();
            w.finish().unwrap();
            out
        };
        let g = decode_image(&encode(png::ColorType::Grayscale, &[255, 51])).unwrap();
        assert_eq!(g.pixels, vec![1.0, 0.2]);
        let c = decode_image(&encode(png::ColorType::Rgb, &[255, 0, 0, 0, 0, 255])).unwrap();
        assert!((c.pixels[0] - 0.299).abs() < 1e-7 && (c.pixels[1] - 0.114).abs() < 1e-7);
    }

    #[test]
    fn truncated_and_unknown_rejected() {
        assert!(matches!(decode_image(b"P5 4 4 255\n\x00"), Err(Error::Truncated(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedImage(_))));
        assert!(decode_image(b"P5 4").is_err());
    }
}

//! PNG, PFM and Middlebury FLO codecs.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageReader};

use super::{checked_len, FlowField, Image};
use crate::error::{Error, Result};

/// "PIEH" read as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;

fn is_pfm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// Reads PNG (8 or 16 bit) or PFM, chosen by extension. PNG samples are
/// scaled to [0,1]; PFM samples are taken verbatim. Alpha is dropped.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if is_pfm(path) {
        return read_pfm(path);
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, samples): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, scale8(b.as_raw())),
        DynamicImage::ImageLumaA8(_) => (1, scale8(img.to_luma8().as_raw())),
        DynamicImage::ImageRgb8(b) => (3, scale8(b.as_raw())),
        DynamicImage::ImageRgba8(_) => (3, scale8(img.to_rgb8().as_raw())),
        DynamicImage::ImageLuma16(b) => (1, scale16(b.as_raw())),
        DynamicImage::ImageLumaA16(_) => (1, scale16(img.to_luma16().as_raw())),
        DynamicImage::ImageRgb16(b) => (3, scale16(b.as_raw())),
        DynamicImage::ImageRgba16(_) => (3, scale16(img.to_rgb16().as_raw())),
        other => return Err(Error::Unsupported(format!("pixel layout {:?}", other.color()))),
    };
    deinterleave(w, h, channels, &samples)
}

fn scale8(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&b| b as f64 / 255.0).collect()
}

fn scale16(raw: &[u16]) -> Vec<f64> {
    raw.iter().map(|&b| b as f64 / 65535.0).collect()
}

fn deinterleave(w: usize, h: usize, channels: usize, samples: &[f64]) -> Result<Image> {
    let n = checked_len(w, h, 1)?;
    let mut data = vec![0.0; n * channels];
    for (i, px) in samples.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = v;
        }
    }
    Image::from_vec(w, h, channels, data)
}

fn interleaved(img: &Image) -> impl Iterator<Item = f64> + '_ {
    let n = img.pixel_count();
    let c = img.channels();
    (0..n * c).map(move |k| img.data()[(k % c) * n + k / c])
}

/// Writes PFM or 8-bit PNG depending on the extension. PNG samples are
/// clamped to [0,1] and rounded to the nearest level.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_pfm(path) {
        return write_pfm(img, path);
    }
    let bytes: Vec<u8> = interleaved(img)
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// 16-bit PNG writer.
pub fn write_png16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let words: Vec<u16> = interleaved(img)
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma16(image::ImageBuffer::from_raw(w, h, words).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb16(image::ImageBuffer::from_raw(w, h, words).expect("buffer size"))
    };
    dynamic.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Little-endian PFM (negative scale), rows stored bottom to top.
pub fn write_pfm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tag = if img.channels() == 1 { "Pf" } else { "PF" };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let (w, h, c) = (img.width(), img.height(), img.channels());
    buf.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                buf.extend_from_slice(&(img.get(x, y, ch) as f32).to_le_bytes());
            }
        }
    }
    write_all(path, &buf)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes)
}

fn parse_pfm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("PFM header ended early".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Malformed(format!("PFM tag {other:?}"))),
    };
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("PFM dimension {s:?}")))
    };
    let width = parse_dim(token()?)?;
    let height = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Malformed(format!("PFM scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Malformed("PFM scale must be nonzero".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let n = checked_len(width, height, channels)?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < n * 4 {
        return Err(Error::Truncated {
            expected: n * 4,
            found: payload.len(),
        });
    }
    let little = scale < 0.0;
    let mut img = Image::new(width, height, channels);
    for (k, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let ch = k % channels;
        let px = k / channels;
        let (x, y_up) = (px % width, px / width);
        img.set(x, height - 1 - y_up, ch, v as f64);
    }
    Ok(img)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = flow.dims();
    let mut buf = Vec::with_capacity(12 + w * h * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&(*u as f32).to_le_bytes());
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_all(path.as_ref(), &buf)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flo(&bytes)
}

fn parse_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w < 0 || h < 0 {
        return Err(Error::Malformed(format!("negative FLO size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = checked_len(w, h, 2)?;
    let expected = 12 + n * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in bytes[12..expected].chunks_exact(8) {
        u.push(f32::from_le_bytes([pair[0], pair[1], pair[2], pair[3]]) as f64);
        v.push(f32::from_le_bytes([pair[4], pair[5], pair[6], pair[7]]) as f64);
    }
    FlowField::from_vecs(w, h, u, v)
}

fn write_all(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf).map_err(|e| Error::io(path, e))
}

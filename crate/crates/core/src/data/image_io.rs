//! 8-bit grayscale image files. Pixel value `v` maps to `2v/255 − 1`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Spatial size of a `[1, H, W]`, `[1, 1, H, W]` or `[H, W]` image.
pub fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("image", format!("not a single grayscale image: {:?}", image.shape()))),
    }
}

pub fn write_pgm<W: Write>(image: &Tensor, mut out: W) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| to_byte(*v)));
    out.write_all(&bytes).map_err(|e| Error::io("<pgm>", e))
}

pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_pgm(image, &mut buf)?;
    Ok(buf)
}

/// Decodes a binary (P5) PGM with maxval ≤ 255 into a `[1, H, W]` tensor.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::data("pgm", m.to_string());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    pos += 1;
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let data = pixels
        .iter()
        .map(|&b| from_byte(((b as usize * 255 + maxval / 2) / maxval) as u8))
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Box-filter downsampling by an integer factor.
pub fn downsample(image: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if h != w || target == 0 || h % target != 0 {
        return Err(Error::data(
            "resize",
            format!("cannot box-downsample {h}x{w} to {target}x{target}"),
        ));
    }
    let f = h / target;
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        for x in 0..target {
            let mut s = 0.0f64;
            for dy in 0..f {
                for dx in 0..f {
                    s += image.data()[(y * f + dy) * w + x * f + dx] as f64;
                }
            }
            out[y * target + x] = (s / (f * f) as f64) as f32;
        }
    }
    Tensor::new(vec![1, target, target], out)
}

#[cfg(feature = "png")]
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(image)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::data("png", e.to_string()))?;
        let bytes: Vec<u8> = image.data().iter().map(|v| to_byte(*v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::data("png", e.to_string()))?;
    }
    Ok(buf)
}

#[cfg(feature = "png")]
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data("png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data("png", e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data("png", "only 8-bit images supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::data("png", "indexed colour unsupported")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .chunks_exact(channels)
        .map(|px| from_byte(px[0]))
        .collect();
    Tensor::new(vec![1, h, w], data)
}

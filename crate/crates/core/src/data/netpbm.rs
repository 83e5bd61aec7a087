//! Binary Netpbm: P6 for 3-channel images, P5 for masks. Only 8-bit
//! (`maxval = 255`) files are accepted.

use std::path::Path;

use super::image::{Image, PixelMask};
use crate::error::{Error, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(buf: &[u8], pos: usize) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(buf, pos);
    let mut end = start;
    while end < buf.len() && buf[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, "expected a decimal number"));
    }
    let text = std::str::from_utf8(&buf[start..end]).unwrap();
    let v = text
        .parse::<usize>()
        .map_err(|_| parse_err(start, format!("number {text} out of range")))?;
    Ok((v, end))
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(parse_err(0, "missing Netpbm magic"));
    }
    let magic = [buf[0], buf[1]];
    let (width, pos) = read_number(buf, 2)?;
    let (height, pos) = read_number(buf, pos)?;
    let (maxval, pos) = read_number(buf, pos)?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval} (only 255 is supported)")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image extent"));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "expected a single whitespace byte after maxval"));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos + 1,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(parse_err(
            buf.len(),
            format!("truncated pixel data: expected {need} bytes, found {have}"),
        ));
    }
    Ok(&buf[h.data_start..h.data_start + need])
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Unsupported(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Image> {
    let h = parse_header(buf)?;
    if &h.magic != b"P6" {
        return Err(Error::Unsupported(format!(
            "expected P6, found {}",
            String::from_utf8_lossy(&h.magic)
        )));
    }
    let px = payload(buf, &h, 3)?;
    let mut img = Image::filled(3, h.height, h.width, 0.0);
    for y in 0..h.height {
        for x in 0..h.width {
            for c in 0..3 {
                img.set(c, y, x, px[(y * h.width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Writes a single-channel 8-bit image from values in `[0, 1]`.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::dim("pgm payload size"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Returns `(height, width, bytes)`.
pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(buf)?;
    if &h.magic != b"P5" {
        return Err(Error::Unsupported(format!(
            "expected P5, found {}",
            String::from_utf8_lossy(&h.magic)
        )));
    }
    Ok((h.height, h.width, payload(buf, &h, 1)?.to_vec()))
}

pub fn encode_mask(mask: &PixelMask) -> Result<Vec<u8>> {
    let v: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    encode_pgm(mask.height(), mask.width(), &v)
}

/// Nonzero pixels are foreground.
pub fn decode_mask(buf: &[u8]) -> Result<PixelMask> {
    let (h, w, px) = decode_pgm(buf)?;
    PixelMask::new(h, w, px.iter().map(|&b| b != 0).collect())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read(path)?)
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

pub fn load_mask(path: &Path) -> Result<PixelMask> {
    decode_mask(&read(path)?)
}

pub fn save_mask(path: &Path, mask: &PixelMask) -> Result<()> {
    write(path, &encode_mask(mask)?)
}

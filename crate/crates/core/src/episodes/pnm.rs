//! Binary portable pixmaps (P6) for images and graymaps (P5) for masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, Tensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[h, w, 3]` image with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("P6 needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes a mask as P5 with values {0, 255}.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }));
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(&bytes[start..pos]);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let magic: [u8; 2] = fields[0].try_into().map_err(|_| "bad magic")?;
    let num = |f: &[u8]| -> std::result::Result<usize, String> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad header number {:?}", String::from_utf8_lossy(f)))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok(Header {
        magic,
        width,
        height,
        body: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let hdr = parse_header(bytes)?;
    if &hdr.magic != b"P6" {
        return Err("not a P6 file".into());
    }
    let n = hdr.width * hdr.height * 3;
    let raster = bytes.get(hdr.body..hdr.body + n).ok_or("truncated raster")?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![hdr.height, hdr.width, 3], data).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let hdr = parse_header(bytes)?;
    if &hdr.magic != b"P5" {
        return Err("not a P5 file".into());
    }
    let n = hdr.width * hdr.height;
    let raster = bytes.get(hdr.body..hdr.body + n).ok_or("truncated raster")?;
    let data = raster.iter().map(|&b| b >= 128).collect();
    BinaryMask::new(hdr.height, hdr.width, data).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|message| Error::Dataset {
        path: path.to_path_buf(),
        message,
    })
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|message| Error::Dataset {
        path: path.to_path_buf(),
        message,
    })
}

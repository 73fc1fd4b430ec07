//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        bail!(Dimension, "{} pixels for a {width}×{height} PGM", pixels.len());
    }
    let mut out = header("P5", width, height);
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        bail!(Dimension, "{} bytes for a {width}×{height} PPM", rgb.len());
    }
    let mut out = header("P6", width, height);
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Encodes an `H×W×C` tensor (C = 1 or 3) as PGM or PPM, rounding pixels.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = image.shape()[..] else { bail!(Dimension, "image must be H×W×C, got {:?}", image.shape()) };
    let bytes: Vec<u8> = image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    match c {
        1 => encode_pgm(w, h, &bytes),
        3 => encode_ppm(w, h, &bytes),
        _ => bail!(Dimension, "unsupported channel count {c}"),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {what} in image header")))
    }
}

/// Decodes a P5/P6 image into an `H×W×C` tensor of pixel values.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        bail!(Format, "image too short");
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => bail!(Format, "unsupported image magic {:?} (need P5 or P6)", String::from_utf8_lossy(other)),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        bail!(Format, "only maxval 255 is supported, got {maxval}");
    }
    if width == 0 || height == 0 {
        bail!(Format, "empty image");
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        bail!(Format, "missing raster separator");
    }
    let raster = &bytes[cur.pos + 1..];
    let need = width * height * channels;
    if raster.len() != need {
        bail!(Format, "raster holds {} bytes, expected {need}", raster.len());
    }
    Tensor::new(vec![height, width, channels], raster.iter().map(|&b| f64::from(b)).collect())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

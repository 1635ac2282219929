//! Binary 8-bit PNM images: P6 (RGB) and P5 (grey).
//!
//! Pixels load as `byte / 255` in row-major, channel-interleaved order.
//! Saving clamps to [0, 1], scales by 255 and rounds half away from zero.

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::input(format!(
                "{channels} channels; expected 1 or 3"
            )));
        }
        Ok(ImageDims {
            width,
            height,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimensions for a vector of length `f`: RGB when `f` is a multiple of
    /// 3, grey otherwise, with the most nearly square factorization.
    pub fn for_length(f: usize) -> Result<Self> {
        if f == 0 {
            return Err(Error::input("cannot shape an empty vector as an image"));
        }
        let channels = if f.is_multiple_of(3) { 3 } else { 1 };
        let pixels = f / channels;
        let mut height = (pixels as f64).sqrt() as usize;
        while height > 1 && !pixels.is_multiple_of(height) {
            height -= 1;
        }
        let height = height.max(1);
        ImageDims::new(pixels / height, height, channels)
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: DVector<f64>,
    pub dims: ImageDims,
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
                c if c.is_ascii_whitespace() => self.pos += 1,
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
        if start == self.pos {
            return Err(Error::format(format!("PNM header: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("PNM header: {what} out of range")))
    }
}

/// Parses a binary P6 or P5 file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::format("unsupported magic; expected P6 or P5")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!(
            "unsupported maxval {maxval}; only 8-bit (255) images are read"
        )));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("PNM header: missing separator after maxval")),
    }
    let dims = ImageDims::new(width, height, channels)
        .map_err(|e| Error::format(format!("PNM header: {e}")))?;
    let body = &bytes[cur.pos..];
    if body.len() < dims.len() {
        return Err(Error::format(format!(
            "truncated payload: {} of {} bytes",
            body.len(),
            dims.len()
        )));
    }
    if body.len() > dims.len() {
        return Err(Error::format(format!(
            "{} bytes after the pixel data",
            body.len() - dims.len()
        )));
    }
    let pixels = DVector::from_iterator(dims.len(), body.iter().map(|&b| f64::from(b) / 255.0));
    Ok(Image { pixels, dims })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(x: &DVector<f64>, dims: ImageDims) -> Result<Vec<u8>> {
    if x.len() != dims.len() {
        return Err(Error::dim(format!(
            "vector of length {} does not fit a {}x{}x{} image",
            x.len(),
            dims.width,
            dims.height,
            dims.channels
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::input("cannot encode NaN pixels"));
    }
    let header = format!("{}\n{} {}\n255\n", dims.magic(), dims.width, dims.height);
    let mut out = Vec::with_capacity(header.len() + dims.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(x.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn save_image(x: &DVector<f64>, dims: ImageDims, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pnm(x, dims)?)?;
    Ok(())
}

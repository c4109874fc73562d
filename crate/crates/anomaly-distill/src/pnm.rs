//! Binary PNM codec: P5 (8-bit grayscale PGM) and P6 (8-bit RGB PPM).

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}: not a binary PGM/PPM (bad magic)")]
    BadMagic(String),
    #[error("{0}: malformed header: {1}")]
    Malformed(String, String),
    #[error("{0}: maxval {1} unsupported (only 8-bit)")]
    UnsupportedMaxval(String, u32),
    #[error("{path}: truncated pixel data (expected {expected} bytes, got {got})")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
}

/// Decoded 8-bit image; `channels` is 1 (PGM) or 3 (PPM, interleaved RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self) -> Result<u32, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Malformed(
                self.name.to_string(),
                "expected a decimal number".into(),
            ));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Malformed(self.name.to_string(), "number overflow".into()))
    }
}

/// Decode a binary PGM/PPM byte buffer. `name` labels error messages.
pub fn decode_pnm(bytes: &[u8], name: &str) -> Result<PnmImage, PnmError> {
    if bytes.len() < 2 {
        return Err(PnmError::BadMagic(name.to_string()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(PnmError::BadMagic(name.to_string())),
    };
    let mut cur = HeaderCursor {
        bytes,
        pos: 2,
        name,
    };
    let width = cur.read_number()? as usize;
    let height = cur.read_number()? as usize;
    let maxval = cur.read_number()?;
    if width == 0 || height == 0 {
        return Err(PnmError::Malformed(
            name.to_string(),
            "zero image extent".into(),
        ));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::UnsupportedMaxval(name.to_string(), maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(PnmError::Malformed(
            name.to_string(),
            "missing separator before pixel data".into(),
        ));
    }
    cur.pos += 1;
    let expected = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(PnmError::Truncated {
            path: name.to_string(),
            expected,
            got: raster.len(),
        });
    }
    let mut data = raster[..expected].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as u32 * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height).expect("vec write");
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<PnmImage, PnmError> {
    let bytes = std::fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pnm(&bytes, &path.display().to_string())
}

pub fn write_pnm(path: &Path, img: &PnmImage) -> Result<(), PnmError> {
    std::fs::write(path, encode_pnm(img)).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decode into a [c, h, w] tensor of intensities in [0, 1].
pub fn to_tensor(img: &PnmImage) -> Tensor<f32> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                data[ci * h * w + y * w + x] = img.data[(y * w + x) * c + ci] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("pnm extents")
}

/// Quantize a [c, h, w] tensor (values clamped to [0, 1]) to 8-bit.
pub fn from_tensor(t: &Tensor<f32>) -> PnmImage {
    assert_eq!(t.shape().len(), 3, "from_tensor expects [c, h, w]");
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(c == 1 || c == 3, "PNM supports 1 or 3 channels, got {c}");
    let mut data = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let v = t.data()[ci * h * w + y * w + x].clamp(0.0, 1.0);
                data[(y * w + x) * c + ci] = (v * 255.0).round() as u8;
            }
        }
    }
    PnmImage {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

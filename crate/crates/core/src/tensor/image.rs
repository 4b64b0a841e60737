//! 8-bit images and binary PPM/PGM (`P6`/`P5`, maxval 255) round-tripping.
//!
//! Images convert to `[c,h,w]` tensors in `[0,1]` by dividing by 255;
//! converting back clamps to `[0,1]` and rounds half away from zero, so
//! u8 → tensor → u8 is lossless.

use std::fs;
use std::path::Path;

use crate::{Error, Result, Tensor};

/// Interleaved 8-bit image, `channels` of 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, pixel-interleaved: `data[(y*width + x)*channels + c]`.
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "image {width}x{height}x{channels} wants {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Planar `[c,h,w]` tensor with values in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] =
                        self.data[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("shape consistent by construction")
    }

    /// Quantizes a `[c,h,w]` tensor: clamp to `[0,1]`, scale by 255, round.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape(format!(
                "image tensor must be [C,H,W], got {:?}",
                t.shape()
            )));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("unsupported channel count {c}")));
        }
        let mut data = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0);
                    data[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        ImageU8::new(w, h, c, data)
    }
}

/// BT.601 luminance of a `[3,h,w]` tensor (or a `[1,h,w]` copy):
/// `y = 0.299 r + 0.587 g + 0.114 b`, returned as `[1,h,w]`.
pub fn luminance(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "luminance: want [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    match c {
        1 => Ok(t.clone()),
        3 => {
            let hw = h * w;
            let mut out = vec![0.0; hw];
            for p in 0..hw {
                out[p] = 0.299 * t.data()[p]
                    + 0.587 * t.data()[hw + p]
                    + 0.114 * t.data()[2 * hw + p];
            }
            Tensor::new(vec![1, h, w], out)
        }
        _ => Err(Error::shape(format!("luminance: {c} channels"))),
    }
}

pub fn write_ppm_bytes(img: &ImageU8) -> Vec<u8> {
    let tag = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{tag}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses binary PPM (`P6`) or PGM (`P5`) with maxval 255. Accepts
/// whitespace and `#` comments between the header tokens; exactly one
/// whitespace byte separates the maxval from the pixel payload.
pub fn read_ppm_bytes(bytes: &[u8]) -> Result<ImageU8> {
    let skip_space = |pos: &mut usize| {
        while *pos < bytes.len() {
            match bytes[*pos] {
                b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
    };
    let read_uint = |pos: &mut usize, what: &str| -> Result<usize> {
        let start = *pos;
        let mut val: usize = 0;
        let mut digits = 0;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            val = val
                .checked_mul(10)
                .and_then(|v| v.checked_add((bytes[*pos] - b'0') as usize))
                .ok_or(Error::Decode {
                    offset: start,
                    msg: format!("{what} overflows"),
                })?;
            digits += 1;
            *pos += 1;
        }
        if digits == 0 {
            return Err(Error::Decode {
                offset: start,
                msg: format!("expected {what}"),
            });
        }
        Ok(val)
    };

    if bytes.len() < 2 {
        return Err(Error::Decode {
            offset: 0,
            msg: "truncated header".into(),
        });
    }
    let channels = match &bytes[0..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Decode {
                offset: 0,
                msg: format!("unsupported format {:?}", String::from_utf8_lossy(other)),
            })
        }
    };
    let mut pos = 2usize;
    skip_space(&mut pos);
    let width = read_uint(&mut pos, "width")?;
    skip_space(&mut pos);
    let height = read_uint(&mut pos, "height")?;
    skip_space(&mut pos);
    let maxval_pos = pos;
    let maxval = read_uint(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: maxval_pos,
            msg: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Decode {
            offset: pos.min(bytes.len()),
            msg: "expected single whitespace after maxval".into(),
        });
    }
    pos += 1;
    let want = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or(Error::Decode {
            offset: pos,
            msg: "pixel count overflows".into(),
        })?;
    let got = bytes.len() - pos;
    if got != want {
        return Err(Error::Decode {
            offset: bytes.len().min(pos + want),
            msg: format!("pixel payload is {got} bytes, expected {want}"),
        });
    }
    ImageU8::new(width, height, channels, bytes[pos..].to_vec())
}

pub fn write_ppm(path: &Path, img: &ImageU8) -> Result<()> {
    fs::write(path, write_ppm_bytes(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageU8> {
    read_ppm_bytes(&fs::read(path)?)
}

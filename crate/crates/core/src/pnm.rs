//! Binary portable graymap (P5) and pixmap (P6) images with 8-bit samples.

use crate::error::{GcqError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// Quantizes values in `[0, 1]` to 8-bit gray, clamping outside that range.
    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(GcqError::DimensionMismatch {
                context: "image pixels",
                expected: width * height,
                found: values.len(),
            });
        }
        Ok(Image {
            width,
            height,
            channels: 1,
            data: values.iter().map(|&v| to_byte(v)).collect(),
        })
    }

    /// Scales values linearly so the maximum maps to 255.
    pub fn from_gray_autoscale(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let max = values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        Self::from_gray(width, height, &scaled)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |reason: &str| GcqError::decode("PNM", reason);
        let mut pos = 0;
        let mut token = || -> Result<&[u8]> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            Ok(&bytes[start..pos])
        };
        let channels = match token()? {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(err("unsupported magic")),
        };
        let mut number = |name: &str| -> Result<usize> {
            let t = token()?;
            std::str::from_utf8(t)
                .ok()
                .filter(|s| s.len() <= 9)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(&format!("bad {name}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(err("only 8-bit samples are supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(err("missing raster separator"));
        }
        pos += 1;
        let len = width
            .checked_mul(height)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| err("dimensions overflow"))?;
        if bytes.len() - pos != len {
            return Err(err("raster length does not match header"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data: bytes[pos..].to_vec(),
        })
    }

    /// Gray levels in `[0, 1]`; pixmaps are averaged over channels.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|c| c.iter().map(|&b| b as f64).sum::<f64>() / (255.0 * self.channels as f64))
            .collect()
    }

    /// Lays `tiles` (same size) out in one row with a one-pixel separator.
    pub fn strip(tiles: &[Image]) -> Result<Image> {
        let Some(first) = tiles.first() else {
            return Err(GcqError::InvalidParameter {
                name: "tiles",
                reason: "empty strip".into(),
            });
        };
        let (w, h, ch) = (first.width, first.height, first.channels);
        if tiles.iter().any(|t| (t.width, t.height, t.channels) != (w, h, ch)) {
            return Err(GcqError::InvalidParameter {
                name: "tiles",
                reason: "tiles differ in size".into(),
            });
        }
        let total = tiles.len() * (w + 1) - 1;
        let mut data = vec![0u8; total * h * ch];
        for (i, t) in tiles.iter().enumerate() {
            for y in 0..h {
                let dst = (y * total + i * (w + 1)) * ch;
                data[dst..dst + w * ch].copy_from_slice(&t.data[y * w * ch..(y + 1) * w * ch]);
            }
        }
        Ok(Image {
            width: total,
            height: h,
            channels: ch,
            data,
        })
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

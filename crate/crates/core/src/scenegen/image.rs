//! RGB float images and binary PPM (P6) IO.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Height × width × 3 image with channel values in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes).map_err(|reason| Error::BadImage {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header fields
            while pos < bytes.len() {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("expected magic P6, found {:?}", fields[0]));
        }
        let parse = |s: &str, what: &str| -> std::result::Result<usize, String> {
            s.parse::<usize>()
                .map_err(|_| format!("invalid {what} {s:?}"))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(format!("only 8-bit PPM supported, maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(format!(
                "raster truncated: need {n} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ));
        }
        let data = bytes[pos..pos + n]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let mut img = ImageTensor::filled(4, 6, [0.0, 1.0, 128.0 / 255.0]);
        img.set_pixel(2, 3, [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
        let back = ImageTensor::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bad_headers_rejected() {
        assert!(ImageTensor::from_ppm_bytes(b"P3\n1 1\n255\n").is_err());
        assert!(ImageTensor::from_ppm_bytes(b"P6\n2 2\n255\n\x00").is_err());
        assert!(ImageTensor::from_ppm_bytes(b"P6\n").is_err());
    }
}

//! 8-bit binary grayscale PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::PgmFormat(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `1 x 1 x H x W` tensor with values `pixel / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 1, self.height, self.width), |[_, _, y, x]| {
            T::lit(f64::from(self.get(x, y)) / 255.0)
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(Error::PgmMagic(shown));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(Error::PgmFormat(format!(
                    "header field {} is missing",
                    i + 1
                )));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::PgmFormat("header value out of range".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::PgmFormat(format!(
                "maxval {maxval}, only 255 is supported"
            )));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::PgmFormat("no separator after header".into()));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .ok_or_else(|| Error::PgmFormat("image extent overflows".into()))?;
        let data = &bytes[pos..];
        if data.len() < need {
            return Err(Error::PgmFormat(format!(
                "expected {need} pixel bytes, found {}",
                data.len()
            )));
        }
        Self::new(width, height, data[..need].to_vec())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = img.encode();
        let back = GrayImage::decode(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5 # made by hand\n2 1\n# depth\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = GrayImage::decode(&bytes).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            GrayImage::decode(b"P2\n1 1\n255\n0"),
            Err(Error::PgmMagic(_))
        ));
        assert!(matches!(
            GrayImage::decode(b"P5\n2 2\n255\n\x01"),
            Err(Error::PgmFormat(_))
        ));
        assert!(matches!(
            GrayImage::decode(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::PgmFormat(_))
        ));
    }

    #[test]
    fn tensor_scaling() {
        let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }
}

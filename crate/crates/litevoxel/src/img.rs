//! In-memory RGB images and binary PPM (P6, maxval 255) I/O.

use std::path::Path;

use crate::{Error, Result};

/// Row-major H*W RGB image with channel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::Argument("image data length mismatch".into()));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn at_mut(&mut self, x: u32, y: u32) -> &mut [f64; 3] {
        &mut self.data[(y * self.width + x) as usize]
    }

    pub fn luminance(&self) -> Vec<f64> {
        self.data.iter().map(|p| luminance(*p)).collect()
    }
}

#[inline]
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            msg: msg.into(),
            offset: self.pos,
        }
    }

    fn skip_ws_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn read_uint(&mut self) -> Result<u32> {
        self.skip_ws_and_comments()?;
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse::<u32>()
            .map_err(|_| self.err("integer out of range"))
    }
}

/// Read a binary PPM (P6, maxval 255). Each byte maps to byte/255.0.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    read_ppm_bytes(&bytes)
}

pub fn read_ppm_bytes(bytes: &[u8]) -> Result<Image> {
    let mut p = HeaderParser { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(p.err("expected magic \"P6\""));
    }
    p.pos = 2;
    let width = p.read_uint()?;
    let height = p.read_uint()?;
    let maxval = p.read_uint()?;
    if maxval != 255 {
        return Err(p.err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from pixel data
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("expected whitespace before pixel data"));
    }
    p.pos += 1;
    let need = width as usize * height as usize * 3;
    if bytes.len() - p.pos != need {
        return Err(p.err("pixel payload size mismatch"));
    }
    let data = bytes[p.pos..]
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect();
    Image::from_data(width, height, data)
}

/// Write a binary PPM (P6, maxval 255); values clamp to [0,1] and round to
/// the nearest byte.
pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, ppm_bytes(image))?;
    Ok(())
}

pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for px in &image.data {
        for c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn one_by_one_white() {
        let img = read_ppm_bytes(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.at(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn round_trip_is_identity_on_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut img = Image::new(9, 5);
        for p in img.data.iter_mut() {
            for c in p.iter_mut() {
                *c = rng.gen_range(0u8..=255) as f64 / 255.0;
            }
        }
        let bytes = ppm_bytes(&img);
        let back = read_ppm_bytes(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(bytes, ppm_bytes(&back));
    }

    #[test]
    fn p3_rejected_with_offset() {
        match read_ppm_bytes(b"P3\n1 1\n255\n1 2 3") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        assert!(matches!(
            read_ppm_bytes(b"P6\n2 1\n255\n\xff\xff\xff"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn comments_in_header_ok() {
        let img = read_ppm_bytes(b"P6\n# hi\n1 1\n# max\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.width, 1);
        assert!((img.at(0, 0)[1] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn non_255_maxval_rejected() {
        assert!(read_ppm_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }
}

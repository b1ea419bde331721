//! Binary PGM (`P5`) images, 8- or 16-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::SegMask;
use crate::tensor::Tensor;

/// Raw samples of a PGM file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.at) {
            if c == b'#' {
                while self.bytes.get(self.at).is_some_and(|&c| c != b'\n') {
                    self.at += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(u8::is_ascii_digit) {
            self.at += 1;
        }
        if start == self.at {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<RawPgm> {
    if bytes.get(..2) != Some(b"P5") {
        return Err(parse_err(0, "unsupported magic (expected P5)"));
    }
    let mut h = Header { bytes, at: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.at;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image extent"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(parse_err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(h.at).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(h.at, "expected a single whitespace byte after maxval"));
    }
    let start = h.at + 1;
    let per = if maxval < 256 { 1 } else { 2 };
    let need = width * height * per;
    let payload = bytes
        .get(start..start + need)
        .ok_or_else(|| parse_err(bytes.len(), format!("truncated payload: needed {need} bytes from offset {start}")))?;
    let samples: Vec<u16> = if per == 1 {
        payload.iter().map(|&b| b as u16).collect()
    } else {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
        return Err(parse_err(start + i * per, format!("sample exceeds maxval {maxval}")));
    }
    Ok(RawPgm { width, height, maxval: maxval as u16, samples })
}

pub fn encode_pgm(raw: &RawPgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", raw.width, raw.height, raw.maxval).into_bytes();
    if raw.maxval < 256 {
        out.extend(raw.samples.iter().map(|&s| s as u8));
    } else {
        for s in &raw.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn load_raw_pgm(path: impl AsRef<Path>) -> Result<RawPgm> {
    decode_pgm(&std::fs::read(path)?)
}

/// Loads an image as an `H x W` tensor with values `sample / maxval`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    raw_to_tensor(&load_raw_pgm(path)?)
}

pub fn raw_to_tensor(raw: &RawPgm) -> Result<Tensor> {
    let m = raw.maxval as f64;
    Tensor::from_vec(&[raw.height, raw.width], raw.samples.iter().map(|&s| s as f64 / m).collect())
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(Error::invalid(format!("PGM output needs H x W or 1 x H x W, got {s:?}"))),
    }
}

/// Quantizes `[0, 1]` values (clamped) to 8 bits.
pub fn tensor_to_raw(t: &Tensor) -> Result<RawPgm> {
    let (height, width) = image_dims(t)?;
    let samples = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
    Ok(RawPgm { width, height, maxval: 255, samples })
}

pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(&tensor_to_raw(t)?))?;
    Ok(())
}

/// Masks store raw labels with `maxval = max(classes - 1, 1)`.
pub fn mask_to_raw(mask: &SegMask) -> RawPgm {
    RawPgm {
        width: mask.width(),
        height: mask.height(),
        maxval: (mask.classes().saturating_sub(1)).max(1) as u16,
        samples: mask.labels().iter().map(|&l| l as u16).collect(),
    }
}

pub fn save_mask_pgm(path: impl AsRef<Path>, mask: &SegMask) -> Result<()> {
    std::fs::write(path, encode_pgm(&mask_to_raw(mask)))?;
    Ok(())
}

/// Reads a label mask; the class count defaults to `maxval + 1`.
pub fn raw_to_mask(raw: &RawPgm, classes: Option<usize>) -> Result<SegMask> {
    let c = classes.unwrap_or(raw.maxval as usize + 1);
    SegMask::new(raw.height, raw.width, c, raw.samples.iter().map(|&s| s as u32).collect())
}

pub fn load_mask_pgm(path: impl AsRef<Path>, classes: Option<usize>) -> Result<SegMask> {
    raw_to_mask(&load_raw_pgm(path)?, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let t = Tensor::random_normal(&[5, 7], 2, 0.3).unwrap().map(|v| (v + 0.5).clamp(0.0, 1.0));
        let back = raw_to_tensor(&decode_pgm(&encode_pgm(&tensor_to_raw(&t).unwrap())).unwrap()).unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        assert!(t.sub(&back).unwrap().max_abs() <= 1.0 / 255.0);
    }

    #[test]
    fn sixteen_bit_and_comments() {
        let mut bytes = b"P5 # a comment\n2 1\n# another\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x80, 0x00]);
        let raw = decode_pgm(&bytes).unwrap();
        assert_eq!(raw.samples, vec![65535, 32768]);
        let t = raw_to_tensor(&raw).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(decode_pgm(&encode_pgm(&raw)).unwrap(), raw);
    }

    #[test]
    fn header_and_payload_errors() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01\x02"), Err(Error::Parse { offset: 13, .. })));
        assert!(matches!(decode_pgm(b"P5\nx 2\n255\n"), Err(Error::Parse { offset: 3, .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n0\n\x00"), Err(Error::Parse { .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n3\n\x07"), Err(Error::Parse { offset: 9, .. })));
    }

    #[test]
    fn masks_keep_raw_labels() {
        let m = SegMask::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let raw = mask_to_raw(&m);
        assert_eq!(raw.maxval, 2);
        assert_eq!(raw_to_mask(&decode_pgm(&encode_pgm(&raw)).unwrap(), None).unwrap(), m);
        let b = SegMask::new(1, 2, 2, vec![0, 1]).unwrap();
        assert_eq!(mask_to_raw(&b).maxval, 1);
    }
}

//! Binary PGM ("P5") decoding and encoding on byte slices.
//!
//! The codec is deliberately strict: headers may carry `#` comments, sample
//! depth follows the maxval (one byte up to 255, two big-endian bytes up to
//! 65535), payload length must match the header exactly, and decoded values
//! land in `[0, 1]` by division by maxval. File IO lives in the companion
//! crate; this module never touches the filesystem.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// Largest sample value the format supports.
pub const PGM_MAX_MAXVAL: u32 = 65535;

fn format_err(msg: impl core::fmt::Display) -> Error {
    Error::Format(format!("{msg}"))
}

fn is_pgm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Header tokenizer: whitespace-separated tokens with `#` comments running
/// to end-of-line.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if is_pgm_space(b) {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(format_err(format!("missing {what} in header")));
        }
        let text = core::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| format_err(format!("malformed {what}")))?;
        text.parse::<u32>()
            .map_err(|_| format_err(format!("{what} {text:?} out of range")))
    }
}

/// Decodes a binary PGM buffer into a `[1, 1, H, W]` tensor with values in
/// `[0, 1]` (sample ÷ maxval).
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let got: Vec<u8> = bytes.iter().take(2).copied().collect();
        return Err(format_err(format!(
            "not a binary PGM: magic {:?}, expected \"P5\"",
            core::str::from_utf8(&got).unwrap_or("<binary>")
        )));
    }
    let mut reader = HeaderReader { bytes, pos: 2 };
    let width = reader.number("width")? as usize;
    let height = reader.number("height")? as usize;
    let maxval = reader.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(format!("degenerate size {width}x{height}")));
    }
    if maxval == 0 {
        return Err(format_err("maxval 0 leaves no representable values"));
    }
    if maxval > PGM_MAX_MAXVAL {
        return Err(format_err(format!(
            "maxval {maxval} exceeds the format limit {PGM_MAX_MAXVAL}"
        )));
    }

    // Exactly one whitespace byte separates the header from the payload.
    if reader.pos >= bytes.len() || !is_pgm_space(bytes[reader.pos]) {
        return Err(format_err("header not terminated by whitespace"));
    }
    let payload = &bytes[reader.pos + 1..];
    let wide = maxval > 255;
    let expected = width * height * if wide { 2 } else { 1 };
    if payload.len() < expected {
        return Err(format_err(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(format_err(format!(
            "{} trailing bytes after the payload",
            payload.len() - expected
        )));
    }

    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(width * height);
    if wide {
        for px in payload.chunks_exact(2) {
            let raw = u16::from_be_bytes([px[0], px[1]]) as u32;
            data.push(T::from_f64((raw.min(maxval)) as f64 * scale));
        }
    } else {
        for &px in payload {
            data.push(T::from_f64((px as u32).min(maxval) as f64 * scale));
        }
    }
    Tensor::new(&[1, 1, height, width], data)
}

/// An encoded image plus how many samples had to be clamped into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EncodedPgm {
    pub bytes: Vec<u8>,
    pub clamped: usize,
}

/// Encodes a `[1, 1, H, W]` tensor as binary PGM, rounding half away from
/// zero onto the maxval grid. Out-of-range values are clamped and counted.
pub fn encode<T: Scalar>(img: &Tensor<T>, maxval: u16) -> Result<EncodedPgm> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 1 {
        return Err(shape_err!(
            "PGM holds one grayscale image [1,1,H,W], got {:?}",
            img.shape()
        ));
    }
    if maxval == 0 {
        return Err(Error::Format("maxval 0 leaves no representable values".into()));
    }
    let mut bytes = Vec::with_capacity(32 + img.numel() * 2);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n{maxval}\n").as_bytes());
    let mut clamped = 0usize;
    let wide = maxval > 255;
    for &v in img.as_slice() {
        let mut x = v.as_f64();
        if !(0.0..=1.0).contains(&x) {
            clamped += 1;
            x = x.clamp(0.0, 1.0);
        }
        let sample = (x * maxval as f64).round() as u16;
        if wide {
            bytes.extend_from_slice(&sample.to_be_bytes());
        } else {
            bytes.push(sample as u8);
        }
    }
    Ok(EncodedPgm { bytes, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_decodes_to_scaled_bytes() {
        let bytes = b"P5\n2 2\n255\n\x00\x80\xff\x40";
        let img: Tensor<f64> = decode(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2, 2]);
        let s = img.as_slice();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 128.0 / 255.0).abs() < 1e-15);
        assert_eq!(s[2], 1.0);
        assert!((s[3] - 64.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn ascii_magic_is_rejected() {
        let err = decode::<f64>(b"P2\n2 2\n255\n0 1 2 3").unwrap_err();
        assert!(format!("{err}").contains("P5"), "{err}");
    }

    #[test]
    fn header_comments_and_16_bit_samples_parse() {
        let mut bytes = Vec::from(&b"P5\n# synthetic\n2 1\n# deep\n65535\n"[..]);
        bytes.extend_from_slice(&[0x00, 0x00, 0xff, 0xff]);
        let img: Tensor<f64> = decode(&bytes).unwrap();
        assert_eq!(img.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_and_oversized_payloads_are_descriptive_errors() {
        let short = decode::<f64>(b"P5\n2 2\n255\n\x00\x01").unwrap_err();
        assert!(format!("{short}").contains("truncated"), "{short}");
        let long = decode::<f64>(b"P5\n1 1\n255\n\x00\x01\x02").unwrap_err();
        assert!(format!("{long}").contains("trailing"), "{long}");
        let zero = decode::<f64>(b"P5\n1 1\n0\n\x00").unwrap_err();
        assert!(format!("{zero}").contains("maxval"), "{zero}");
    }

    #[test]
    fn half_values_round_away_from_zero() {
        let img = Tensor::new(&[1, 1, 1, 2], vec![0.5f64, 0.0]).unwrap();
        let out = encode(&img, 255).unwrap();
        assert_eq!(out.clamped, 0);
        // 0.5 · 255 = 127.5 rounds up to 128.
        assert_eq!(&out.bytes[out.bytes.len() - 2..], &[128, 0]);
    }

    #[test]
    fn header_layout_is_byte_exact() {
        let img = Tensor::zeros(&[1, 1, 3, 4]);
        let out = encode::<f64>(&img, 255).unwrap();
        assert!(out.bytes.starts_with(b"P5\n4 3\n255\n"));
        assert!(out.bytes[11..].iter().all(|&b| b == 0));
        assert_eq!(out.bytes.len(), 11 + 12);
    }

    #[test]
    fn out_of_range_values_are_clamped_and_counted() {
        let img = Tensor::new(&[1, 1, 1, 3], vec![-0.25f64, 0.5, 1.5]).unwrap();
        let out = encode(&img, 255).unwrap();
        assert_eq!(out.clamped, 2);
        assert_eq!(&out.bytes[out.bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn quantized_images_roundtrip_bitwise() {
        for maxval in [255u16, 4095] {
            let src: Vec<f64> = (0..24)
                .map(|k| ((k * 37) % (maxval as usize + 1)) as f64 / maxval as f64)
                .collect();
            let img = Tensor::new(&[1, 1, 4, 6], src).unwrap();
            let encoded = encode(&img, maxval).unwrap();
            assert_eq!(encoded.clamped, 0);
            let back: Tensor<f64> = decode(&encoded.bytes).unwrap();
            let again = encode(&back, maxval).unwrap();
            assert_eq!(encoded.bytes, again.bytes, "maxval {maxval}");
        }
    }
}

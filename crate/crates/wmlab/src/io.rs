//! Image file formats.
//!
//! Three formats are supported, detected by magic bytes on load and chosen by
//! extension on save:
//!
//! - `P5` binary PGM, 8-bit, maxval 255 (grayscale, `.pgm`)
//! - `P6` binary PPM, 8-bit, maxval 255 (RGB, `.ppm`)
//! - `WMF1`, a float container: magic `WMF1`, then width, height, channels as
//!   little-endian u32, then `width*height*channels` f64 samples, little-endian,
//!   row-major, channel-interleaved (`.wmf`)
//!
//! 8-bit formats map samples as v/255 on load and clamp to [0, 1] before
//! quantizing on save. WMF1 stores samples exactly and is the format used to
//! hand unclamped intermediates between pipeline stages. Parse errors report
//! the byte offset where the parser gave up.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Writers emit this exact header shape, so canonical files round-trip
/// byte-for-byte through load + save.
fn pnm_header(magic: &str, w: usize, h: usize) -> String {
    format!("{magic}\n{w} {h}\n255\n")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("unexpected end of file reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Skips PNM whitespace and `#` comments (which run to end of line).
    fn skip_pnm_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
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

    fn pnm_number(&mut self, what: &str) -> Result<usize> {
        self.skip_pnm_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are utf8");
        text.parse::<usize>().map_err(|_| Error::format(start, format!("{what} out of range")))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn parse_pnm(bytes: &[u8], channels: usize) -> Result<Image> {
    let mut cur = Cursor::new(bytes);
    cur.take(2, "magic")?;
    let width = cur.pnm_number("width")?;
    let height = cur.pnm_number("height")?;
    let maxval = cur.pnm_number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let sep = cur.take(1, "header/raster separator")?;
    if !sep[0].is_ascii_whitespace() {
        return Err(Error::format(cur.pos - 1, "expected whitespace before raster"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let raster = cur.take(n, "raster")?;
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after raster"));
    }
    Image::from_bytes(width, height, channels, raster)
}

fn parse_wmf1(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor::new(bytes);
    cur.take(4, "magic")?;
    let width = cur.u32_le("width")? as usize;
    let height = cur.u32_le("height")? as usize;
    let channels = cur.u32_le("channels")? as usize;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = cur.f64_le("sample")?;
        if !v.is_finite() {
            return Err(Error::format(cur.pos - 8, format!("non-finite sample at index {i}")));
        }
        data.push(v);
    }
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after samples"));
    }
    Image::from_vec(width, height, channels, data)
}

/// Decodes an image from raw file bytes, detecting the format by magic.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P5") {
        parse_pnm(bytes, 1)
    } else if bytes.starts_with(b"P6") {
        parse_pnm(bytes, 3)
    } else if bytes.starts_with(b"WMF1") {
        parse_wmf1(bytes)
    } else {
        Err(Error::format(0, "unknown magic, expected P5, P6, or WMF1"))
    }
}

/// Encodes in the named format: "pgm", "ppm", or "wmf".
pub fn encode_image(img: &Image, format: &str) -> Result<Vec<u8>> {
    match format {
        "pgm" => {
            if img.channels() != 1 {
                return Err(Error::Shape(format!(
                    "pgm requires 1 channel, image has {}",
                    img.channels()
                )));
            }
            let mut out = pnm_header("P5", img.width(), img.height()).into_bytes();
            out.extend_from_slice(&img.to_bytes_clamped());
            Ok(out)
        }
        "ppm" => {
            if img.channels() != 3 {
                return Err(Error::Shape(format!(
                    "ppm requires 3 channels, image has {}",
                    img.channels()
                )));
            }
            let mut out = pnm_header("P6", img.width(), img.height()).into_bytes();
            out.extend_from_slice(&img.to_bytes_clamped());
            Ok(out)
        }
        "wmf" => {
            let mut out = Vec::with_capacity(16 + img.num_samples() * 8);
            out.extend_from_slice(b"WMF1");
            out.extend_from_slice(&(img.width() as u32).to_le_bytes());
            out.extend_from_slice(&(img.height() as u32).to_le_bytes());
            out.extend_from_slice(&(img.channels() as u32).to_le_bytes());
            for &v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        other => Err(Error::InvalidParam(format!("unknown image format {other:?}"))),
    }
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::InvalidParam(format!("{}: no usable file extension", path.display())))
}

/// Loads an image file, detecting the format from its content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Saves an image, choosing the format from the extension
/// (`.pgm`, `.ppm`, `.wmf`).
pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, &extension(path)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize, c: usize) -> Image {
        let n = w * h * c;
        Image::from_vec(w, h, c, (0..n).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip_is_byte_exact() {
        let img = gradient(13, 7, 1);
        let bytes = encode_image(&img, "pgm").unwrap();
        let back = decode_image(&bytes).unwrap();
        assert_eq!(encode_image(&back, "pgm").unwrap(), bytes);
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let img = gradient(5, 4, 3);
        let bytes = encode_image(&img, "ppm").unwrap();
        let back = decode_image(&bytes).unwrap();
        assert_eq!(encode_image(&back, "ppm").unwrap(), bytes);
    }

    #[test]
    fn wmf1_preserves_floats_exactly() {
        let img =
            Image::from_vec(3, 2, 1, vec![-0.25, 1.75, 0.5, 1e-17, 123.456, 0.0]).unwrap();
        let bytes = encode_image(&img, "wmf").unwrap();
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.data(), img.data());
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
    }

    #[test]
    fn pnm_comments_and_whitespace_are_tolerated() {
        let mut bytes = b"P5 # a comment\n# another\n 3\t2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 192, 255, 10]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 2);
        assert!((img.at(1, 0, 0) - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_byte_offsets() {
        // Truncated raster: 6 pixels promised, 3 given.
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        match decode_image(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("expected format error, got {other:?}"),
        }

        match decode_image(b"P5\n3 2\n65535\n") {
            Err(Error::Format { offset, msg }) => {
                assert!(msg.contains("maxval"), "{msg}");
                assert!(offset >= 7, "offset {offset}");
            }
            other => panic!("expected format error, got {other:?}"),
        }

        match decode_image(b"JPEG") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at 0, got {other:?}"),
        }
    }

    #[test]
    fn wmf1_rejects_nan_and_truncation() {
        let img = Image::constant(2, 2, 1, 0.5).unwrap();
        let mut bytes = encode_image(&img, "wmf").unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_image(&bytes), Err(Error::Format { .. })));

        let mut bytes = encode_image(&img, "wmf").unwrap();
        let nan = f64::NAN.to_le_bytes();
        bytes[16..24].copy_from_slice(&nan);
        assert!(matches!(decode_image(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(8, 8, 1);
        let path = dir.path().join("g.pgm");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);

        // Wrong channel count for the extension is an error.
        assert!(save_image(dir.path().join("g.ppm"), &img).is_err());
        assert!(save_image(dir.path().join("g.xyz"), &img).is_err());
    }
}

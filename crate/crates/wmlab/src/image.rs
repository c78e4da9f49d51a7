//! Float image type shared by every pipeline stage.
//!
//! Pixels live on a nominal [0, 1] scale but are never clamped while flowing
//! through embedding, attacks, or sampling; values only get clamped at 8-bit
//! export time. Keeping the intermediate values unclamped preserves
//! correlation linearity for the watermark decoder and keeps the diffusion
//! algebra exact.

use crate::error::{Error, Result};

/// Row-major, channel-interleaved float image. `channels` is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from raw samples. Length must equal
    /// `width * height * channels` and every sample must be finite.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        let expect = width * height * channels;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{} = {}",
                data.len(),
                width,
                height,
                channels,
                expect
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite sample at index {bad}")));
        }
        Ok(Image { width, height, channels, data })
    }

    /// Image with every sample equal to `value`.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Image::from_vec(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Total sample count `width * height * channels`.
    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True when `other` has identical width, height, and channels.
    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn shape_mismatch(&self, other: &Image) -> Error {
        Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            self.width, self.height, self.channels, other.width, other.height, other.channels
        ))
    }

    /// Sample at (x, y, c) without bounds checking beyond debug builds.
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// New image with the same shape and samples produced by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Image { width: self.width, height: self.height, channels: self.channels, data }
    }

    /// Clamps to [0, 1] and quantizes to 8-bit, the export-time convention.
    pub fn to_bytes_clamped(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Builds a float image from 8-bit samples (v / 255).
    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Image::from_vec(width, height, channels, data)
    }

    /// Asserts every sample is finite; used at the end of operations that do
    /// nontrivial arithmetic.
    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "{context}: produced a non-finite sample at index {bad}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::from_vec(0, 4, 1, vec![]).is_err());
        assert!(Image::from_vec(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::from_vec(2, 1, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn byte_round_trip_is_exact_on_quantized_data() {
        let bytes: Vec<u8> = (0u16..=255).map(|v| v as u8).collect();
        let img = Image::from_bytes(16, 16, 1, &bytes).unwrap();
        assert_eq!(img.to_bytes_clamped(), bytes);
    }

    #[test]
    fn export_clamps_out_of_range() {
        let img = Image::from_vec(2, 1, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.to_bytes_clamped(), vec![0, 255]);
    }

    #[test]
    fn at_indexes_interleaved() {
        let img = Image::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(img.at(1, 0, 2), 5.0);
        assert_eq!(img.at(0, 1, 0), 6.0);
    }
}

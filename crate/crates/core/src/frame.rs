//! In-memory image type shared by the denoising, fusion and archive code.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("frame dimensions must be positive (got {width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("channel count must be 1 or 3 (got {0})")]
    BadChannels(usize),
    #[error("pixel buffer has {actual} values, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("pixel {index} is {value}; intensities must be finite and non-negative")]
    BadIntensity { index: usize, value: f64 },
}

/// Row-major intensity grid with interleaved channels.
///
/// Value at `(x, y, c)` lives at `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    /// UNIX seconds of the capture.
    pub timestamp: f64,
    /// Quantization of the source sensor (8 or 16).
    pub bit_depth: u8,
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        timestamp: f64,
        bit_depth: u8,
    ) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::ZeroDimension { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(FrameError::BadChannels(channels));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(FrameError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(FrameError::BadIntensity { index, value });
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
            timestamp,
            bit_depth,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: f64,
        timestamp: f64,
        bit_depth: u8,
    ) -> Result<Self, FrameError> {
        Frame::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
            timestamp,
            bit_depth,
        )
    }

    /// Single-channel frame from a generator over pixel coordinates.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp: f64,
        bit_depth: u8,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, FrameError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Frame::new(width, height, 1, data, timestamp, bit_depth)
    }

    /// Build without validating intensities. Callers guarantee the invariant.
    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        timestamp: f64,
        bit_depth: u8,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Frame {
            width,
            height,
            channels,
            data,
            timestamp,
            bit_depth,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Apply `f` to every value, keeping shape and metadata.
    ///
    /// Panics if `f` produces a negative or non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(
            data.iter().all(|v| v.is_finite() && *v >= 0.0),
            "Frame::map produced an invalid intensity"
        );
        Frame { data, ..self.clone_meta() }
    }

    /// Round to the nearest integer and clamp to the range of `bits`.
    pub fn quantized(&self, bits: u8) -> Frame {
        let max = ((1u32 << bits) - 1) as f64;
        let mut out = self.map(|v| v.round().min(max));
        out.bit_depth = bits;
        out
    }

    fn clone_meta(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Vec::new(),
            timestamp: self.timestamp,
            bit_depth: self.bit_depth,
        }
    }
}

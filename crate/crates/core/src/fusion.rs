//! Multi-exposure fusion of sun-centered sky images.
//!
//! The shortest exposure covers a small disk around the Sun, each longer
//! exposure covers the next concentric ring, and the longest one also covers
//! everything beyond the last radius. Region boundaries are blurred with a
//! Gaussian so the seams do not show, and each exposure is scaled by a gain
//! `α` that matches mean intensities on both sides of every boundary.

use thiserror::Error;

use crate::denoise::{denoise, FilterConfig, StackError};
use crate::frame::Frame;

pub const EXPOSURES: usize = 4;
pub const EXPOSURE_TIMES_MS: [f64; EXPOSURES] = [1.0, 4.0, 12.0, 28.0];
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// Brightest fused value; it maps to the top of the 16-bit range.
pub const MAX_FUSED_AMPLITUDE: f64 = 225.0;
/// Repeats of each exposure per capture instant.
pub const REPEATS_PER_EXPOSURE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
    #[error("expected a 3-channel frame, got {0} channel(s)")]
    ChannelMismatch(usize),
    #[error("exposure set frame {index}: {reason}")]
    BadExposureSet { index: usize, reason: String },
    #[error("ring at radius {radius} px (width {epsilon} px) contains no pixels")]
    EmptyRing { radius: f64, epsilon: f64 },
    #[error("ring radius {radius} must exceed the ring width {epsilon}")]
    RingTooNarrow { radius: f64, epsilon: f64 },
    #[error("ring mean {mean} at radius {radius} px is below half the regularizer")]
    DivisionDegenerate { radius: f64, mean: f64 },
    #[error("frame is {width}x{height}, plan expects {size}x{size}")]
    SizeMismatch { width: usize, height: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Outer radius of each exposure's region, shortest exposure first.
    pub radii_px: [f64; EXPOSURES],
    pub gaussian_sigma: f64,
    /// Side of the square smoothing kernel; odd.
    pub kernel_size: usize,
    /// Width of the boundary rings used to estimate the gains.
    pub ring_epsilon: f64,
    /// Constant added before fusion so dim regions never divide by zero.
    pub regularizer: f64,
    pub luma_weights: [f64; 3],
    pub max_amplitude: f64,
    pub output_bit_depth: u8,
    pub exposure_times_ms: [f64; EXPOSURES],
    /// Sun position in pixel coordinates; image center when `None`.
    pub sun_center: Option<(f64, f64)>,
    /// Radius of the useful fisheye disk; half the image side when `None`.
    pub fisheye_radius: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            radii_px: [5.0, 6.25, 12.5, 25.0],
            gaussian_sigma: 7.5,
            kernel_size: 15,
            ring_epsilon: std::f64::consts::SQRT_2,
            regularizer: 1.0,
            luma_weights: LUMA_WEIGHTS,
            max_amplitude: MAX_FUSED_AMPLITUDE,
            output_bit_depth: 16,
            exposure_times_ms: EXPOSURE_TIMES_MS,
            sun_center: None,
            fisheye_radius: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        if self.radii_px.iter().any(|r| !(r.is_finite() && *r > 0.0))
            || self.radii_px.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!("radii {:?} must be positive and strictly increasing", self.radii_px));
        }
        if self.exposure_times_ms.windows(2).any(|w| w[1] <= w[0])
            || self.exposure_times_ms[0] <= 0.0
        {
            return bad("exposure times must be positive and strictly increasing".into());
        }
        if !(self.gaussian_sigma > 0.0) {
            return bad(format!("sigma {} must be positive", self.gaussian_sigma));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if !(self.regularizer > 0.0) {
            return bad(format!("regularizer {} must be positive", self.regularizer));
        }
        if !(self.ring_epsilon > 0.0) {
            return bad("ring width must be positive".into());
        }
        if !(self.max_amplitude > 0.0) {
            return bad("max amplitude must be positive".into());
        }
        if !(1..=16).contains(&self.output_bit_depth) {
            return bad(format!("output bit depth {} unsupported", self.output_bit_depth));
        }
        Ok(())
    }

    pub fn center_for(&self, size: usize) -> (f64, f64) {
        self.sun_center
            .unwrap_or(((size / 2) as f64, (size / 2) as f64))
    }

    pub fn fisheye_radius_for(&self, size: usize) -> f64 {
        self.fisheye_radius.unwrap_or(size as f64 / 2.0)
    }

    fn output_max(&self) -> f64 {
        ((1u32 << self.output_bit_depth) - 1) as f64
    }
}

/// Four regularized grayscale frames of one capture instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSet {
    frames: [Frame; EXPOSURES],
    exposure_times_ms: [f64; EXPOSURES],
    capture_instant: f64,
}

impl ExposureSet {
    pub fn new(
        frames: [Frame; EXPOSURES],
        exposure_times_ms: [f64; EXPOSURES],
        capture_instant: f64,
    ) -> Result<Self> {
        if exposure_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FusionError::BadExposureSet {
                index: 0,
                reason: "exposure times must be strictly increasing".into(),
            });
        }
        let size = frames[0].width();
        for (index, f) in frames.iter().enumerate() {
            if f.channels() != 1 {
                return Err(FusionError::BadExposureSet {
                    index,
                    reason: format!("{} channels, expected grayscale", f.channels()),
                });
            }
            if f.width() != size || f.height() != size {
                return Err(FusionError::BadExposureSet {
                    index,
                    reason: format!("{}x{}, expected {size}x{size}", f.width(), f.height()),
                });
            }
        }
        Ok(ExposureSet {
            frames,
            exposure_times_ms,
            capture_instant,
        })
    }

    pub fn frames(&self) -> &[Frame; EXPOSURES] {
        &self.frames
    }

    pub fn exposure_times_ms(&self) -> &[f64; EXPOSURES] {
        &self.exposure_times_ms
    }

    pub fn capture_instant(&self) -> f64 {
        self.capture_instant
    }

    pub fn size(&self) -> usize {
        self.frames[0].width()
    }
}

/// Square binary grid; `true` marks members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.size + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixels in exactly one of the two masks.
    pub fn symmetric_difference(&self, other: &Mask) -> Mask {
        assert_eq!(self.size, other.size);
        Mask {
            size: self.size,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a ^ b).collect(),
        }
    }

    /// Pixels in `self` but not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        assert_eq!(self.size, other.size);
        Mask {
            size: self.size,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !b).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            size: self.size,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn iter_members(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

/// Square real grid in `[0, 1]`, a blurred [`Mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothMask {
    size: usize,
    data: Vec<f64>,
}

impl SmoothMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Normalized Gaussian on a centered odd lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    data: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Weight at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let h = (self.size / 2) as isize;
        self.data[((dy + h) as usize) * self.size + (dx + h) as usize]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// [`regularize`] followed by [`to_grayscale`] in one pass, with the same
/// arithmetic.
pub fn regularized_grayscale(frame: &Frame, lambda: f64, weights: [f64; 3]) -> Result<Frame> {
    if !(lambda > 0.0) {
        return Err(FusionError::InvalidConfig(format!(
            "regularizer {lambda} must be positive"
        )));
    }
    if frame.channels() != 3 {
        return Err(FusionError::ChannelMismatch(frame.channels()));
    }
    let data = frame
        .data()
        .chunks_exact(3)
        .map(|p| {
            weights[0] * (p[0] + lambda) + weights[1] * (p[1] + lambda) + weights[2] * (p[2] + lambda)
        })
        .collect();
    Frame::new(frame.width(), frame.height(), 1, data, frame.timestamp, frame.bit_depth)
        .map_err(|e| FusionError::InvalidConfig(e.to_string()))
}

/// Add `lambda` to every value of every channel.
pub fn regularize(frame: &Frame, lambda: f64) -> Result<Frame> {
    if !(lambda > 0.0) {
        return Err(FusionError::InvalidConfig(format!(
            "regularizer {lambda} must be positive"
        )));
    }
    Ok(frame.map(|v| v + lambda))
}

/// Weighted sum of the three color channels.
pub fn to_grayscale(frame: &Frame, weights: [f64; 3]) -> Result<Frame> {
    if frame.channels() != 3 {
        return Err(FusionError::ChannelMismatch(frame.channels()));
    }
    let data = frame
        .data()
        .chunks_exact(3)
        .map(|p| weights[0] * p[0] + weights[1] * p[1] + weights[2] * p[2])
        .collect();
    Frame::new(frame.width(), frame.height(), 1, data, frame.timestamp, frame.bit_depth)
        .map_err(|e| FusionError::InvalidConfig(e.to_string()))
}

/// Pixels whose grid coordinates lie within `r` of `center`.
pub fn radial_mask(r: f64, center: (f64, f64), size: usize) -> Mask {
    let r2 = r * r;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let dy = y as f64 - center.1;
        for x in 0..size {
            let dx = x as f64 - center.0;
            data.push(dx * dx + dy * dy <= r2);
        }
    }
    Mask { size, data }
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    if !(sigma > 0.0) || size % 2 == 0 {
        return Err(FusionError::InvalidConfig(format!(
            "kernel needs sigma > 0 and odd size (got {sigma}, {size})"
        )));
    }
    let h = (size / 2) as isize;
    let two_sigma2 = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(size * size);
    for dy in -h..=h {
        for dx in -h..=h {
            let d2 = (dx * dx + dy * dy) as f64;
            data.push((-d2 / two_sigma2).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Ok(GaussianKernel { size, data })
}

/// 2-D convolution of a binary mask with edge replication at the borders.
pub fn smooth_mask(mask: &Mask, kernel: &GaussianKernel) -> SmoothMask {
    let values: Vec<f64> = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    SmoothMask {
        size: mask.size,
        data: convolve_replicate(&values, mask.size, kernel),
    }
}

fn convolve_replicate(values: &[f64], size: usize, kernel: &GaussianKernel) -> Vec<f64> {
    let h = (kernel.size / 2) as isize;
    let last = size as isize - 1;
    let mut out = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for ky in -h..=h {
                let sy = (y + ky).clamp(0, last) as usize;
                let row = &values[sy * size..(sy + 1) * size];
                for kx in -h..=h {
                    let sx = (x + kx).clamp(0, last) as usize;
                    acc += kernel.at(kx, ky) * row[sx];
                }
            }
            out[y as usize * size + x as usize] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// Annuli just outside (`.0`) and just inside (`.1`) radius `r`.
pub fn edge_rings(r: f64, epsilon: f64, center: (f64, f64), size: usize) -> Result<(Mask, Mask)> {
    if !(r > epsilon) {
        return Err(FusionError::RingTooNarrow { radius: r, epsilon });
    }
    let disk = radial_mask(r, center, size);
    let outer = disk.symmetric_difference(&radial_mask(r + epsilon, center, size));
    let inner = disk.symmetric_difference(&radial_mask(r - epsilon, center, size));
    if outer.count() == 0 || inner.count() == 0 {
        return Err(FusionError::EmptyRing { radius: r, epsilon });
    }
    Ok((outer, inner))
}

/// Per-exposure gains; the shortest exposure has gain 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub alphas: [f64; EXPOSURES],
}

/// Masks, rings and blend weights for one configuration and image size.
/// Build once and reuse for every capture.
#[derive(Debug, Clone)]
pub struct FusionPlan {
    config: FusionConfig,
    size: usize,
    center: (f64, f64),
    smoothed: Vec<SmoothMask>,
    /// Blend weight of each exposure; the last one includes everything
    /// outside the largest radius.
    region_weights: Vec<Vec<f64>>,
    residual_weight: Vec<f64>,
    rings: Vec<(Mask, Mask)>,
    valid: Vec<bool>,
}

impl FusionPlan {
    pub fn new(config: &FusionConfig, size: usize) -> Result<Self> {
        config.validate()?;
        let center = config.center_for(size);
        let kernel = gaussian_kernel(config.gaussian_sigma, config.kernel_size)?;
        let disks: Vec<Mask> = config
            .radii_px
            .iter()
            .map(|&r| radial_mask(r, center, size))
            .collect();
        let smoothed: Vec<SmoothMask> = disks.iter().map(|m| smooth_mask(m, &kernel)).collect();

        // Blurring the binary regions (rather than multiplying blurred disks)
        // keeps the fields an exact partition of unity.
        let mut region_weights = Vec::with_capacity(EXPOSURES);
        region_weights.push(smoothed[0].data.clone());
        for e in 1..EXPOSURES {
            let ring = disks[e].minus(&disks[e - 1]);
            region_weights.push(smooth_mask(&ring, &kernel).data);
        }
        let residual_weight = smooth_mask(&disks[EXPOSURES - 1].complement(), &kernel).data;

        let rings = config.radii_px[..EXPOSURES - 1]
            .iter()
            .map(|&r| edge_rings(r, config.ring_epsilon, center, size))
            .collect::<Result<Vec<_>>>()?;

        let fisheye = radial_mask(config.fisheye_radius_for(size), center, size);
        Ok(FusionPlan {
            config: config.clone(),
            size,
            center,
            smoothed,
            region_weights,
            residual_weight,
            rings,
            valid: fisheye.data,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    /// Blurred disk of each radius.
    pub fn smoothed_masks(&self) -> &[SmoothMask] {
        &self.smoothed
    }

    /// Weight fields of the four regions followed by the residual region
    /// beyond the largest radius.
    pub fn region_fields(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.region_weights.iter().map(|w| w.as_slice()).collect();
        v.push(&self.residual_weight);
        v
    }

    /// `(outside, inside)` ring pair at each of the first three radii.
    pub fn rings(&self) -> &[(Mask, Mask)] {
        &self.rings
    }

    pub fn valid_region(&self) -> &[bool] {
        &self.valid
    }

    fn check_size(&self, set: &ExposureSet) -> Result<()> {
        let f = &set.frames[0];
        if f.width() != self.size || f.height() != self.size {
            return Err(FusionError::SizeMismatch {
                width: f.width(),
                height: f.height(),
                size: self.size,
            });
        }
        Ok(())
    }

    pub fn alphas(&self, set: &ExposureSet) -> Result<FusionWeights> {
        self.check_size(set)?;
        let floor = self.config.regularizer / 2.0;
        let mut alphas = [1.0; EXPOSURES];
        for e in 0..EXPOSURES - 1 {
            let (outer, inner) = &self.rings[e];
            let radius = self.config.radii_px[e];
            let inside = ring_mean(set.frames[e].data(), inner);
            let outside = ring_mean(set.frames[e + 1].data(), outer);
            for mean in [inside, outside] {
                if !(mean >= floor) {
                    return Err(FusionError::DivisionDegenerate { radius, mean });
                }
            }
            alphas[e + 1] = alphas[e] * inside / outside;
        }
        Ok(FusionWeights { alphas })
    }

    /// Fused intensity before output scaling, for every pixel.
    pub fn blend(&self, set: &ExposureSet, weights: &FusionWeights) -> Result<Vec<f64>> {
        self.check_size(set)?;
        let a = weights.alphas;
        let f: Vec<&[f64]> = set.frames.iter().map(|f| f.data()).collect();
        let w = &self.region_weights;
        let res = &self.residual_weight;
        let out = (0..self.size * self.size)
            .map(|p| {
                a[0] * w[0][p] * f[0][p]
                    + a[1] * w[1][p] * f[1][p]
                    + a[2] * w[2][p] * f[2][p]
                    + a[3] * (w[3][p] + res[p]) * f[3][p]
            })
            .collect();
        Ok(out)
    }

    pub fn fuse(&self, set: &ExposureSet) -> Result<FusedImage> {
        let weights = self.alphas(set)?;
        let raw = self.blend(set, &weights)?;
        let top = self.config.output_max();
        let scale = top / self.config.max_amplitude;
        let mut clamped = 0usize;
        let mut valid_count = 0usize;
        let data: Vec<f64> = raw
            .iter()
            .zip(&self.valid)
            .map(|(&x, &valid)| {
                if !valid {
                    return 0.0;
                }
                valid_count += 1;
                let v = (x * scale).round();
                if v > top {
                    clamped += 1;
                    top
                } else {
                    v.max(0.0)
                }
            })
            .collect();
        let frame = Frame::new(
            self.size,
            self.size,
            1,
            data,
            set.capture_instant,
            self.config.output_bit_depth,
        )
        .map_err(|e| FusionError::InvalidConfig(e.to_string()))?;
        Ok(FusedImage {
            frame,
            weights,
            clamped_fraction: if valid_count == 0 {
                0.0
            } else {
                clamped as f64 / valid_count as f64
            },
        })
    }
}

fn ring_mean(values: &[f64], ring: &Mask) -> f64 {
    let (sum, n) = ring
        .iter_members()
        .fold((0.0, 0usize), |(s, n), p| (s + values[p], n + 1));
    sum / n as f64
}

/// Above this fraction of clamped pixels the output is flagged as saturated.
pub const SATURATION_WARNING_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    /// Integer-valued single-channel frame in the output bit depth.
    pub frame: Frame,
    pub weights: FusionWeights,
    /// Fraction of pixels inside the fisheye disk that hit the output ceiling.
    pub clamped_fraction: f64,
}

impl FusedImage {
    pub fn saturation_warning(&self) -> bool {
        self.clamped_fraction > SATURATION_WARNING_FRACTION
    }
}

pub fn compute_alphas(set: &ExposureSet, config: &FusionConfig) -> Result<FusionWeights> {
    FusionPlan::new(config, set.size())?.alphas(set)
}

/// One-shot fusion. Pipelines should build a [`FusionPlan`] once instead.
pub fn fuse(set: &ExposureSet, config: &FusionConfig) -> Result<FusedImage> {
    FusionPlan::new(config, set.size())?.fuse(set)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptureError {
    #[error("expected {EXPOSURES} exposure groups, got {0}")]
    GroupCount(usize),
    #[error("denoise of the {exposure_ms} ms group failed: {source}")]
    Denoise { exposure_ms: f64, source: StackError },
    #[error("preparing the {exposure_ms} ms frame failed: {source}")]
    Prepare { exposure_ms: f64, source: FusionError },
    #[error("fusion failed: {0}")]
    Fuse(FusionError),
}

impl CaptureError {
    pub fn stage(&self) -> &'static str {
        match self {
            CaptureError::GroupCount(_) => "input",
            CaptureError::Denoise { .. } => "denoise",
            CaptureError::Prepare { .. } => "prepare",
            CaptureError::Fuse(_) => "fuse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibleCapture {
    pub image: FusedImage,
    /// Frames kept by the denoiser in each exposure group.
    pub survivors: [usize; EXPOSURES],
}

/// Full visible pipeline for one capture instant: denoise each exposure
/// group of color frames, regularize, convert to grayscale, fuse.
pub fn process_visible_capture(
    groups: &[Vec<Frame>],
    capture_instant: f64,
    filter: &FilterConfig,
    plan: &FusionPlan,
) -> std::result::Result<VisibleCapture, CaptureError> {
    if groups.len() != EXPOSURES {
        return Err(CaptureError::GroupCount(groups.len()));
    }
    let config = plan.config();
    let mut survivors = [0; EXPOSURES];
    let mut gray = Vec::with_capacity(EXPOSURES);
    for (e, group) in groups.iter().enumerate() {
        let exposure_ms = config.exposure_times_ms[e];
        let denoised = denoise(group, filter)
            .map_err(|source| CaptureError::Denoise { exposure_ms, source })?;
        survivors[e] = denoised.kept.len();
        let frame = regularized_grayscale(&denoised.frame, config.regularizer, config.luma_weights)
            .map_err(|source| CaptureError::Prepare { exposure_ms, source })?;
        gray.push(frame);
    }
    let frames: [Frame; EXPOSURES] = gray.try_into().expect("four frames");
    let set = ExposureSet::new(frames, config.exposure_times_ms, capture_instant)
        .map_err(CaptureError::Fuse)?;
    let image = plan.fuse(&set).map_err(CaptureError::Fuse)?;
    Ok(VisibleCapture { image, survivors })
}

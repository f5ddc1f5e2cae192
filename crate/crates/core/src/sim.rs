//! Deterministic stand-in for a day of field acquisition.
//!
//! Synthetic cameras feed the real denoising, fusion and archive code, so a
//! simulated day exercises the same path as recorded data. Every random draw
//! comes from a ChaCha stream keyed by the seed and the capture instant, which
//! makes a run reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataset::{
    interpolate_weather, write_csv_stream, write_frame, DatasetError, DayArchive, ImageStream,
    Manifest, PyranometerRecord, SkippedInstant, TableStream, WeatherRecord,
};
use crate::denoise::{denoise, Centering, FilterConfig};
use crate::frame::Frame;
use crate::fusion::{process_visible_capture, FusionConfig, FusionError, FusionPlan, EXPOSURES};
use crate::solar::{
    session_window_for_date, solar_position, sun_position_table, GeoLocation, SolarError,
    WindowPolicy,
};

/// Pan range of the mount, degrees either side of South.
pub const PAN_LIMIT_DEG: f64 = 159.0;
pub const TILT_MIN_DEG: f64 = -47.0;
pub const TILT_MAX_DEG: f64 = 31.0;
/// Mount tilt zero sits this far above the horizon.
pub const TILT_ZERO_ELEVATION_DEG: f64 = 47.0;
pub const SLEW_LIMIT_DEG_PER_S: f64 = 60.0;

const VI_SIZE: usize = 450;
const IR_WIDTH: usize = 80;
const IR_HEIGHT: usize = 60;
const NOISE_BANK_LEN: usize = 1 << 21;
const GEN_BLOCK: usize = 4096;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Solar(#[from] SolarError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureSchedule {
    pub image_interval_s: f64,
    pub ir_burst_frames: usize,
    pub ir_fps: f64,
    pub vi_repeats: usize,
    pub tracker_update_s: f64,
    pub pyranometer_rate_hz: f64,
}

impl Default for CaptureSchedule {
    fn default() -> Self {
        CaptureSchedule {
            image_interval_s: 15.0,
            ir_burst_frames: 10,
            ir_fps: 9.0,
            vi_repeats: 10,
            tracker_update_s: 1.0,
            pyranometer_rate_hz: 5.0,
        }
    }
}

impl CaptureSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_interval_s", self.image_interval_s),
            ("ir_fps", self.ir_fps),
            ("tracker_update_s", self.tracker_update_s),
            ("pyranometer_rate_hz", self.pyranometer_rate_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Schedule(format!("{name} must be positive")));
            }
        }
        if self.ir_burst_frames == 0 || self.vi_repeats == 0 {
            return Err(SimError::Schedule("bursts need at least one frame".into()));
        }
        if self.ir_burst_frames as f64 / self.ir_fps >= self.image_interval_s {
            return Err(SimError::Schedule(
                "infrared burst must finish within one image interval".into(),
            ));
        }
        Ok(())
    }

    /// Capture instants: multiples of the interval inside `[start, end]`.
    pub fn capture_instants(&self, start: f64, end: f64) -> Vec<i64> {
        let step = self.image_interval_s;
        let first = (start / step).ceil() as i64;
        let last = (end / step).floor() as i64;
        (first..=last)
            .map(|k| (k as f64 * step).round() as i64)
            .collect()
    }
}

/// Parameters of the synthetic sky and its fault injector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyParams {
    pub seed: u64,
    /// Additive noise of the visible camera, 8-bit counts.
    pub vi_noise_sigma: f64,
    /// Additive noise of the infrared camera, 16-bit counts.
    pub ir_noise_sigma: f64,
    /// Per-frame chance that a frame repeats its predecessor.
    pub duplicate_prob: f64,
    /// Per-frame chance that a frame is structureless noise.
    pub defect_prob: f64,
    /// 0 for a clear day; 1 for roughly one cloud every three minutes.
    pub cloudiness: f64,
}

impl Default for SkyParams {
    fn default() -> Self {
        SkyParams {
            seed: 1,
            vi_noise_sigma: 0.5,
            ir_noise_sigma: 15.0,
            duplicate_prob: 0.0,
            defect_prob: 0.0,
            cloudiness: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub date: NaiveDate,
    pub site: GeoLocation,
    pub policy: WindowPolicy,
    pub schedule: CaptureSchedule,
    pub sky: SkyParams,
    pub fusion: FusionConfig,
    pub filter: FilterConfig,
    /// Stop after this many capture instants; `None` runs the whole window.
    pub max_captures: Option<usize>,
}

impl SimConfig {
    pub fn new(date: NaiveDate) -> Self {
        SimConfig {
            date,
            site: GeoLocation::ALBUQUERQUE,
            policy: WindowPolicy::Elevation15Deg,
            schedule: CaptureSchedule::default(),
            sky: SkyParams::default(),
            fusion: FusionConfig::default(),
            filter: FilterConfig::default(),
            max_captures: None,
        }
    }

    /// Parse `key = value` lines. `#` starts a comment; unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut date = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SimError::Config {
                line: n + 1,
                message: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "date" {
                date = Some(v.parse::<NaiveDate>().map_err(|e| SimError::Config {
                    line: n + 1,
                    message: e.to_string(),
                })?);
            } else {
                pairs.push((n + 1, k.to_string(), v.to_string()));
            }
        }
        let mut cfg = SimConfig::new(date.ok_or(SimError::Config {
            line: 0,
            message: "missing date".into(),
        })?);
        for (line, k, v) in pairs {
            cfg.set(&k, &v)
                .map_err(|message| SimError::Config { line, message })?;
        }
        cfg.site.validate()?;
        cfg.schedule.validate()?;
        cfg.fusion.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{v:?} is not a valid number"))
        }
        fn prob(v: &str) -> std::result::Result<f64, String> {
            let p: f64 = num(v)?;
            if (0.0..=1.0).contains(&p) {
                Ok(p)
            } else {
                Err(format!("probability {p} outside [0, 1]"))
            }
        }
        match key {
            "latitude" => self.site.latitude_deg = num(v)?,
            "longitude" => self.site.longitude_deg = num(v)?,
            "gmt_offset" => self.site.gmt_offset_hours = num(v)?,
            "policy" => self.policy = v.parse()?,
            "seed" => self.sky.seed = num(v)?,
            "image_interval_s" => self.schedule.image_interval_s = num(v)?,
            "ir_burst_frames" => self.schedule.ir_burst_frames = num(v)?,
            "ir_fps" => self.schedule.ir_fps = num(v)?,
            "vi_repeats" => self.schedule.vi_repeats = num(v)?,
            "tracker_update_s" => self.schedule.tracker_update_s = num(v)?,
            "pyranometer_rate_hz" => self.schedule.pyranometer_rate_hz = num(v)?,
            "vi_noise_sigma" => self.sky.vi_noise_sigma = num(v)?,
            "ir_noise_sigma" => self.sky.ir_noise_sigma = num(v)?,
            "duplicate_prob" => self.sky.duplicate_prob = prob(v)?,
            "defect_prob" => self.sky.defect_prob = prob(v)?,
            "cloudiness" => self.sky.cloudiness = num(v)?,
            "max_captures" => {
                let n: usize = num(v)?;
                self.max_captures = (n > 0).then_some(n);
            }
            "fusion_radii" => {
                let r: Vec<f64> = v.split(',').map(|s| num(s.trim())).collect::<std::result::Result<_, _>>()?;
                self.fusion.radii_px = r
                    .try_into()
                    .map_err(|_| format!("fusion_radii needs {EXPOSURES} values"))?;
            }
            "fusion_sigma" => self.fusion.gaussian_sigma = num(v)?,
            "fusion_kernel" => self.fusion.kernel_size = num(v)?,
            "regularizer" => self.fusion.regularizer = num(v)?,
            "defect_threshold" => self.filter.defect_threshold = num(v)?,
            "duplicate_tol" => self.filter.duplicate_tol = num(v)?,
            "centering" => self.filter.centering = v.parse::<Centering>()?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            SimError::Dataset(DatasetError::Io {
                path: path.to_path_buf(),
                source,
            })
        })?;
        SimConfig::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerSample {
    pub unix_time: f64,
    /// Degrees from South, positive toward West.
    pub pan_deg: f64,
    /// Degrees from the mount's rest elevation.
    pub tilt_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerTrace {
    pub samples: Vec<TrackerSample>,
    /// Samples where the Sun lay beyond a mount limit.
    pub clipped: usize,
    /// Consecutive samples that would need more than the slew limit.
    pub slew_violations: usize,
}

/// Map solar angles into mount coordinates, clipping to the mount's range.
pub fn mount_angles(elevation_deg: f64, azimuth_deg: f64) -> (f64, f64, bool) {
    let pan = azimuth_deg - 180.0;
    let tilt = elevation_deg - TILT_ZERO_ELEVATION_DEG;
    let cp = pan.clamp(-PAN_LIMIT_DEG, PAN_LIMIT_DEG);
    let ct = tilt.clamp(TILT_MIN_DEG, TILT_MAX_DEG);
    (cp, ct, cp != pan || ct != tilt)
}

/// Mount pointing at every tracker update across the day's session.
pub fn tracker_trace(
    loc: &GeoLocation,
    date: NaiveDate,
    policy: WindowPolicy,
    update_s: f64,
) -> Result<TrackerTrace> {
    let (start, end) = session_window_for_date(loc, date, policy)?.unix_bounds(loc, date);
    let first = (start / update_s).ceil() as i64;
    let last = (end / update_s).floor() as i64;
    let mut samples = Vec::with_capacity((last - first + 1).max(0) as usize);
    let mut clipped = 0;
    let mut slew_violations = 0;
    for k in first..=last {
        let t = k as f64 * update_s;
        let a = solar_position(loc, t)?;
        let (pan_deg, tilt_deg, clip) = mount_angles(a.elevation_deg, a.azimuth_deg);
        clipped += clip as usize;
        if let Some(prev) = samples.last() {
            let prev: &TrackerSample = prev;
            let step = (pan_deg - prev.pan_deg).abs().max((tilt_deg - prev.tilt_deg).abs());
            if step > SLEW_LIMIT_DEG_PER_S * update_s {
                slew_violations += 1;
            }
        }
        samples.push(TrackerSample {
            unix_time: t,
            pan_deg,
            tilt_deg,
        });
    }
    Ok(TrackerTrace {
        samples,
        clipped,
        slew_violations,
    })
}

#[derive(Debug, Clone, Copy)]
struct Cloud {
    born: f64,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    opacity: f64,
}

impl Cloud {
    fn position(&self, t: f64) -> (f64, f64) {
        let dt = t - self.born;
        (self.x0 + self.vx * dt, self.y0 + self.vy * dt)
    }
}

/// Synthetic sky seen by both cameras, with the Sun held at the image center.
pub struct VirtualSky {
    params: SkyParams,
    clouds: Vec<Cloud>,
    /// Standard normal samples shared by all frames; each frame reads from a
    /// random offset.
    noise: Vec<f32>,
    /// Per-millisecond RGB radiance of the clear sky and glare.
    clear: Vec<f64>,
    /// Sun glare per millisecond, used to dim the Sun behind clouds.
    glare: Vec<f64>,
    fisheye: Vec<bool>,
}

const SKY_TINT: [f64; 3] = [0.7, 0.9, 1.2];
const SKY_RADIANCE: f64 = 5.0;
const CLOUD_RADIANCE: f64 = 7.0;
const GLARE_PEAK: f64 = 200.0;

fn glare_profile(r: f64) -> f64 {
    GLARE_PEAK / (1.0 + (r / 2.0).powi(3))
}

impl VirtualSky {
    /// Build the sky for the span `[start, end]` of UNIX time.
    pub fn new(params: SkyParams, start: f64, end: f64) -> Self {
        let mut rng = stream_rng(params.seed, u64::MAX);
        let noise: Vec<f32> = (0..NOISE_BANK_LEN + VI_SIZE * VI_SIZE * 3)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        // Clouds drift across the frame along a common wind direction.
        let mut clouds = Vec::new();
        if params.cloudiness > 0.0 {
            let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed: f64 = rng.gen_range(0.3..0.8);
            let (ux, uy) = (heading.cos(), heading.sin());
            let mean_gap = 200.0 / params.cloudiness;
            let lead = 1600.0 / speed;
            let mut t = start - lead;
            loop {
                t += -mean_gap * (1.0 - rng.gen::<f64>()).ln();
                if t > end {
                    break;
                }
                let radius: f64 = rng.gen_range(30.0..120.0);
                let lateral: f64 = rng.gen_range(-300.0..300.0);
                let c = VI_SIZE as f64 / 2.0;
                let back = 400.0 + 3.0 * radius;
                clouds.push(Cloud {
                    born: t,
                    x0: c - ux * back - uy * lateral,
                    y0: c - uy * back + ux * lateral,
                    vx: ux * speed,
                    vy: uy * speed,
                    radius,
                    opacity: rng.gen_range(0.3..1.0),
                });
            }
        }

        let c = (VI_SIZE / 2) as f64;
        let fisheye_r = VI_SIZE as f64 / 2.0;
        let mut clear = Vec::with_capacity(VI_SIZE * VI_SIZE * 3);
        let mut glare = Vec::with_capacity(VI_SIZE * VI_SIZE);
        let mut fisheye = Vec::with_capacity(VI_SIZE * VI_SIZE);
        for y in 0..VI_SIZE {
            for x in 0..VI_SIZE {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let inside = r <= fisheye_r;
                let g = if inside { glare_profile(r) } else { 0.0 };
                // Sky brightens slightly toward the horizon.
                let sky = if inside {
                    SKY_RADIANCE * (1.0 + 0.3 * (r / fisheye_r).powi(2))
                } else {
                    0.0
                };
                for tint in SKY_TINT {
                    clear.push(g + sky * tint);
                }
                glare.push(g);
                fisheye.push(inside);
            }
        }
        VirtualSky {
            params,
            clouds,
            noise,
            clear,
            glare,
            fisheye,
        }
    }

    pub fn params(&self) -> &SkyParams {
        &self.params
    }

    /// Cloud optical density in `[0, 1]` at image point `(x, y)`.
    pub fn cloud_at(&self, x: f64, y: f64, t: f64) -> f64 {
        let mut total = 0.0;
        for cl in &self.clouds {
            if cl.born > t {
                break;
            }
            let (cx, cy) = cl.position(t);
            let reach = 3.0 * cl.radius;
            if (x - cx).abs() > reach || (y - cy).abs() > reach {
                continue;
            }
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            total += cl.opacity * (-d2 / (2.0 * cl.radius * cl.radius)).exp();
        }
        total.min(1.0)
    }

    /// Fraction of the Sun hidden by cloud.
    pub fn sun_cover(&self, t: f64) -> f64 {
        let c = (VI_SIZE / 2) as f64;
        self.cloud_at(c, c, t)
    }

    fn cloud_field(&self, t: f64) -> Vec<f64> {
        let mut field = vec![0.0; VI_SIZE * VI_SIZE];
        let last = VI_SIZE as f64 - 1.0;
        for cl in &self.clouds {
            if cl.born > t {
                break;
            }
            let (cx, cy) = cl.position(t);
            let reach = 3.0 * cl.radius;
            let x0 = (cx - reach).max(0.0).ceil();
            let x1 = (cx + reach).min(last).floor();
            let y0 = (cy - reach).max(0.0).ceil();
            let y1 = (cy + reach).min(last).floor();
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let inv = 1.0 / (2.0 * cl.radius * cl.radius);
            for y in y0 as usize..=y1 as usize {
                let dy2 = (y as f64 - cy).powi(2);
                let row = &mut field[y * VI_SIZE..(y + 1) * VI_SIZE];
                for (x, v) in row.iter_mut().enumerate().take(x1 as usize + 1).skip(x0 as usize) {
                    let d2 = (x as f64 - cx).powi(2) + dy2;
                    *v += cl.opacity * (-d2 * inv).exp();
                }
            }
        }
        for v in &mut field {
            *v = v.min(1.0);
        }
        field
    }

    /// A window of the noise bank at an offset not in `used`. Two frames of
    /// one burst on the same offset would be exact copies of each other.
    fn noise_slice(&self, rng: &mut ChaCha8Rng, len: usize, used: &mut Vec<usize>) -> &[f32] {
        let mut off = rng.gen_range(0..NOISE_BANK_LEN);
        while used.contains(&off) {
            off = rng.gen_range(0..NOISE_BANK_LEN);
        }
        used.push(off);
        &self.noise[off..off + len]
    }

    /// Which repeat of a burst is a copy or a corrupt frame.
    fn fault(&self, rng: &mut ChaCha8Rng, k: usize) -> Fault {
        let u: f64 = rng.gen();
        if k > 0 && u < self.params.duplicate_prob {
            Fault::Duplicate
        } else if u < self.params.duplicate_prob + self.params.defect_prob {
            Fault::Defect
        } else {
            Fault::None
        }
    }

    /// Color bursts of the visible camera, shortest exposure first.
    pub fn visible_bursts(
        &self,
        t: i64,
        exposures_ms: &[f64; EXPOSURES],
        repeats: usize,
    ) -> Vec<Vec<Frame>> {
        self.visible_bursts_pooled(t, exposures_ms, repeats, &mut Vec::new())
    }

    /// [`Self::visible_bursts`] drawing pixel buffers from `pool`. Reusing
    /// buffers across captures avoids faulting in fresh pages for every frame.
    pub fn visible_bursts_pooled(
        &self,
        t: i64,
        exposures_ms: &[f64; EXPOSURES],
        repeats: usize,
        pool: &mut Vec<Vec<f64>>,
    ) -> Vec<Vec<Frame>> {
        let mut rng = stream_rng(self.params.seed, 2 * t as u64);
        let clouds = self.cloud_field(t as f64);
        let n = VI_SIZE * VI_SIZE;
        let mut radiance = self.clear.clone();
        for p in 0..n {
            let c = clouds[p];
            if c == 0.0 || !self.fisheye[p] {
                continue;
            }
            let g = self.glare[p];
            for ch in 0..3 {
                let sky = self.clear[3 * p + ch] - g;
                radiance[3 * p + ch] =
                    g * (1.0 - 0.8 * c) + sky * (1.0 - c) + CLOUD_RADIANCE * c;
            }
        }
        let sigma = self.params.vi_noise_sigma;
        let len = 3 * n;
        exposures_ms
            .iter()
            .map(|&ms| {
                let mut used = Vec::with_capacity(repeats);
                let plan: Vec<(Fault, &[f32])> = (0..repeats)
                    .map(|k| (self.fault(&mut rng, k), self.noise_slice(&mut rng, len, &mut used)))
                    .collect();
                let mut bufs: Vec<Vec<f64>> = (0..repeats)
                    .map(|_| {
                        let mut b = pool.pop().unwrap_or_default();
                        b.clear();
                        b.reserve(len);
                        b
                    })
                    .collect();
                // Block by block, so each radiance block is read once per burst.
                let mut start = 0;
                while start < len {
                    let end = (start + GEN_BLOCK).min(len);
                    let rad = &radiance[start..end];
                    for (k, (fault, noise)) in plan.iter().enumerate() {
                        let (done, rest) = bufs.split_at_mut(k);
                        let out = &mut rest[0];
                        let z = &noise[start..end];
                        match fault {
                            Fault::Duplicate => out.extend_from_slice(&done[k - 1][start..end]),
                            Fault::Defect => out.extend(
                                z.iter().map(|&z| quantize(128.0 + 40.0 * z as f64, 255.0)),
                            ),
                            Fault::None => append_exposed(out, rad, z, ms, sigma),
                        }
                    }
                    start = end;
                }
                bufs.into_iter()
                    .map(|data| Frame::from_parts_unchecked(VI_SIZE, VI_SIZE, 3, data, t as f64, 8))
                    .collect()
            })
            .collect()
    }

    /// Thermal burst of the infrared camera.
    pub fn infrared_burst(&self, t: i64, frames: usize, fps: f64) -> Vec<Frame> {
        let mut rng = stream_rng(self.params.seed, 2 * t as u64 + 1);
        let (sx, sy) = (VI_SIZE as f64 / IR_WIDTH as f64, VI_SIZE as f64 / IR_HEIGHT as f64);
        let (cx, cy) = ((IR_WIDTH / 2) as f64, (IR_HEIGHT / 2) as f64);
        let mut base = Vec::with_capacity(IR_WIDTH * IR_HEIGHT);
        for y in 0..IR_HEIGHT {
            for x in 0..IR_WIDTH {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let cloud = self.cloud_at(x as f64 * sx, y as f64 * sy, t as f64);
                base.push(7600.0 + 600.0 * cloud + 3000.0 / (1.0 + (r / 1.5).powi(2)));
            }
        }
        let sigma = self.params.ir_noise_sigma;
        let mut burst: Vec<Frame> = Vec::with_capacity(frames);
        let mut used = Vec::with_capacity(frames);
        for k in 0..frames {
            let ts = t as f64 + k as f64 / fps;
            let fault = self.fault(&mut rng, k);
            let noise = self.noise_slice(&mut rng, base.len(), &mut used);
            let data: Vec<f64> = match fault {
                Fault::Duplicate => burst[k - 1].data().to_vec(),
                Fault::Defect => noise
                    .iter()
                    .map(|&z| quantize(8000.0 + 500.0 * z as f64, 65_535.0))
                    .collect(),
                Fault::None => base
                    .iter()
                    .zip(noise)
                    .map(|(b, &z)| quantize(b + sigma * z as f64, 65_535.0))
                    .collect(),
            };
            burst.push(Frame::from_parts_unchecked(IR_WIDTH, IR_HEIGHT, 1, data, ts, 16));
        }
        burst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    None,
    Duplicate,
    Defect,
}

/// Clamp to `[0, max]` and round half to even. Adding and removing 1.5·2^52
/// rounds in the FPU, which keeps the generator loops vectorizable.
#[inline(always)]
fn quantize(v: f64, max: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let c = if v < 0.0 { 0.0 } else if v > max { max } else { v };
    (c + MAGIC) - MAGIC
}

/// Appends `quantize(r * ms + sigma * z, 255)` for each radiance/noise pair.
fn append_exposed(out: &mut Vec<f64>, rad: &[f64], z: &[f32], ms: f64, sigma: f64) {
    debug_assert_eq!(rad.len(), z.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        out.reserve(rad.len());
        // SAFETY: capacity was reserved above and every slot up to the new
        // length is written before `set_len`.
        unsafe {
            let base = out.len();
            append_exposed_avx2(out.as_mut_ptr().add(base), rad, z, ms, sigma);
            out.set_len(base + rad.len());
        }
        return;
    }
    out.extend(rad.iter().zip(z).map(|(r, &z)| quantize(r * ms + sigma * z as f64, 255.0)));
}

/// Same arithmetic as the scalar path, with streaming stores so the frame
/// buffers are not read into cache before being overwritten.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn append_exposed_avx2(dst: *mut f64, rad: &[f64], z: &[f32], ms: f64, sigma: f64) {
    use std::arch::x86_64::*;
    let n = rad.len();
    let scalar = |i: usize| quantize(rad[i] * ms + sigma * z[i] as f64, 255.0);
    let mut i = 0;
    while i < n && (dst.add(i) as usize) % 32 != 0 {
        *dst.add(i) = scalar(i);
        i += 1;
    }
    let (vms, vsig) = (_mm256_set1_pd(ms), _mm256_set1_pd(sigma));
    let (zero, top) = (_mm256_setzero_pd(), _mm256_set1_pd(255.0));
    let magic = _mm256_set1_pd(6_755_399_441_055_744.0);
    while i + 4 <= n {
        let r = _mm256_loadu_pd(rad.as_ptr().add(i));
        let zz = _mm256_cvtps_pd(_mm_loadu_ps(z.as_ptr().add(i)));
        let v = _mm256_add_pd(_mm256_mul_pd(r, vms), _mm256_mul_pd(vsig, zz));
        let c = _mm256_min_pd(_mm256_max_pd(v, zero), top);
        let q = _mm256_sub_pd(_mm256_add_pd(c, magic), magic);
        _mm256_stream_pd(dst.add(i), q);
        i += 4;
    }
    while i < n {
        *dst.add(i) = scalar(i);
        i += 1;
    }
    _mm_sfence();
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Clear-sky irradiance dimmed by cloud, W/m².
pub fn synthetic_gsi(elevation_deg: f64, cover: f64) -> f64 {
    let s = elevation_deg.to_radians().sin().max(0.0);
    1050.0 * s.powf(1.15) * (1.0 - 0.7 * cover)
}

/// Pyranometer sample times: jittered around the nominal rate.
fn pyranometer_times(rng: &mut ChaCha8Rng, start: f64, end: f64, rate_hz: f64) -> Vec<f64> {
    let nominal = 1.0 / rate_hz;
    let mut out = Vec::with_capacity(((end - start) * rate_hz * 1.05) as usize + 1);
    let mut t = start;
    while t <= end {
        out.push((t * 1000.0).round() / 1000.0);
        t += rng.gen_range(0.9 * nominal..1.1 * nominal);
    }
    out.dedup();
    out
}

/// Weather station samples every ten minutes covering `[start, end]`.
fn weather_knots(rng: &mut ChaCha8Rng, loc: &GeoLocation, start: f64, end: f64) -> Vec<WeatherRecord> {
    let first = (start / 600.0).floor() as i64;
    let last = (end / 600.0).ceil() as i64;
    let mut wind: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pressure = 630.0 + rng.gen_range(-5.0..5.0);
    (first..=last)
        .map(|k| {
            let t = k as f64 * 600.0;
            let local_h = ((t / 3600.0 + loc.gmt_offset_hours).rem_euclid(24.0) - 15.0) / 24.0;
            let temperature = 15.0 + 8.0 * (std::f64::consts::TAU * local_h).cos() + rng.gen_range(-0.5..0.5);
            let dew_point = temperature - rng.gen_range(5.0..15.0);
            // Magnus approximation keeps humidity consistent with the dew point.
            let magnus = |c: f64| (17.625 * c / (243.04 + c)).exp();
            let relative_humidity = (100.0 * magnus(dew_point) / magnus(temperature)).min(100.0);
            wind = (wind + rng.gen_range(-0.6..0.6)).rem_euclid(std::f64::consts::TAU);
            pressure += rng.gen_range(-0.3..0.3);
            WeatherRecord {
                unix_time: t,
                temperature,
                dew_point,
                pressure,
                wind_direction: if wind >= std::f64::consts::TAU { 0.0 } else { wind },
                wind_velocity: rng.gen_range(0.0..0.01),
                relative_humidity,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub date: NaiveDate,
    pub window: (f64, f64),
    pub captures: usize,
    pub visible_written: usize,
    pub infrared_written: usize,
    pub skipped: Vec<SkippedInstant>,
    /// Mean denoiser survivors per visible exposure burst.
    pub mean_visible_survivors: f64,
    pub mean_infrared_survivors: f64,
    pub saturation_warnings: usize,
    pub pyranometer_records: usize,
    pub tracker_samples: usize,
    pub tracker_clipped: usize,
    pub tracker_slew_violations: usize,
}

/// Simulate one day and write its archive under `root`.
///
/// A failure in any processing stage skips that stream at that instant and
/// is listed in the manifest; IO failures abort the run.
pub fn run_session(cfg: &SimConfig, root: &Path) -> Result<SessionSummary> {
    cfg.site.validate()?;
    cfg.schedule.validate()?;
    let window = session_window_for_date(&cfg.site, cfg.date, cfg.policy)?;
    let (start, end) = window.unix_bounds(&cfg.site, cfg.date);
    let archive = DayArchive::new(root, cfg.date);
    archive.create_dirs()?;

    let trace = tracker_trace(&cfg.site, cfg.date, cfg.policy, cfg.schedule.tracker_update_s)?;
    let sky = VirtualSky::new(cfg.sky, start, end);
    let plan = FusionPlan::new(&cfg.fusion, VI_SIZE)?;

    let mut instants = cfg.schedule.capture_instants(start, end);
    if let Some(n) = cfg.max_captures {
        instants.truncate(n);
    }

    let mut skipped = Vec::new();
    let (mut vi_written, mut ir_written) = (0, 0);
    let (mut vi_survivors, mut vi_groups) = (0usize, 0usize);
    let (mut ir_survivors, mut ir_groups) = (0usize, 0usize);
    let mut saturation_warnings = 0;
    let mut pool = Vec::new();
    for &t in &instants {
        let burst = sky.infrared_burst(t, cfg.schedule.ir_burst_frames, cfg.schedule.ir_fps);
        match denoise(&burst, &cfg.filter) {
            Ok(d) => {
                ir_survivors += d.kept.len();
                ir_groups += 1;
                let mut frame = d.frame.quantized(16);
                frame.timestamp = t as f64;
                write_frame(&archive.image_path(ImageStream::Infrared, t), &frame)?;
                ir_written += 1;
            }
            Err(e) => skipped.push(SkippedInstant {
                unix_time: t,
                stream: ImageStream::Infrared.dir_name().into(),
                reason: format!("denoise: {e}"),
            }),
        }

        let groups = sky.visible_bursts_pooled(
            t,
            &cfg.fusion.exposure_times_ms,
            cfg.schedule.vi_repeats,
            &mut pool,
        );
        match process_visible_capture(&groups, t as f64, &cfg.filter, &plan) {
            Ok(cap) => {
                vi_survivors += cap.survivors.iter().sum::<usize>();
                vi_groups += EXPOSURES;
                saturation_warnings += cap.image.saturation_warning() as usize;
                write_frame(&archive.image_path(ImageStream::Visible, t), &cap.image.frame)?;
                vi_written += 1;
            }
            Err(e) => skipped.push(SkippedInstant {
                unix_time: t,
                stream: ImageStream::Visible.dir_name().into(),
                reason: format!("{}: {e}", e.stage()),
            }),
        }
        pool.extend(groups.into_iter().flatten().map(Frame::into_data));
    }

    let mut rng = stream_rng(cfg.sky.seed, u64::MAX - 1);
    let times = pyranometer_times(&mut rng, start, end, cfg.schedule.pyranometer_rate_hz);
    let table = sun_position_table(&times, &cfg.site)?;
    for s in &table.skipped {
        skipped.push(SkippedInstant {
            unix_time: s.unix_time.floor() as i64,
            stream: TableStream::SunPosition.dir_name().into(),
            reason: s.reason.to_string(),
        });
    }
    let pyra: Vec<PyranometerRecord> = table
        .records
        .iter()
        .map(|r| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let gsi = synthetic_gsi(r.elevation_deg, sky.sun_cover(r.unix_time)) + 2.0 * noise;
            PyranometerRecord {
                unix_time: r.unix_time,
                gsi: gsi.clamp(0.0, 1499.0),
            }
        })
        .collect();
    write_csv_stream(&pyra, &archive.table_path(TableStream::Pyranometer))?;
    write_csv_stream(&table.records, &archive.table_path(TableStream::SunPosition))?;

    let knots = weather_knots(&mut rng, &cfg.site, start, end);
    let weather = interpolate_weather(&knots, &times)?;
    write_csv_stream(&weather, &archive.table_path(TableStream::WeatherStation))?;

    let mean = |s: usize, n: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    let summary = SessionSummary {
        date: cfg.date,
        window: (start, end),
        captures: instants.len(),
        visible_written: vi_written,
        infrared_written: ir_written,
        skipped,
        mean_visible_survivors: mean(vi_survivors, vi_groups),
        mean_infrared_survivors: mean(ir_survivors, ir_groups),
        saturation_warnings,
        pyranometer_records: pyra.len(),
        tracker_samples: trace.samples.len(),
        tracker_clipped: trace.clipped,
        tracker_slew_violations: trace.slew_violations,
    };
    write_manifest(cfg, &summary, &archive)?;
    Ok(summary)
}

fn write_manifest(cfg: &SimConfig, s: &SessionSummary, archive: &DayArchive) -> Result<()> {
    let mut m = Manifest::new(cfg.date, cfg.site, cfg.policy);
    let e: BTreeMap<&str, String> = BTreeMap::from([
        ("seed", cfg.sky.seed.to_string()),
        ("window_start", s.window.0.to_string()),
        ("window_end", s.window.1.to_string()),
        ("captures", s.captures.to_string()),
        ("visible_written", s.visible_written.to_string()),
        ("infrared_written", s.infrared_written.to_string()),
        ("mean_visible_survivors", s.mean_visible_survivors.to_string()),
        ("mean_infrared_survivors", s.mean_infrared_survivors.to_string()),
        ("saturation_warnings", s.saturation_warnings.to_string()),
        ("pyranometer_records", s.pyranometer_records.to_string()),
        ("tracker_samples", s.tracker_samples.to_string()),
        ("tracker_clipped", s.tracker_clipped.to_string()),
        ("tracker_slew_violations", s.tracker_slew_violations.to_string()),
    ]);
    m.entries = e.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    m.skipped = s.skipped.clone();
    m.write(&archive.manifest_path())?;
    Ok(())
}

//! On-disk archive layout: per-day CSV tables, 16-bit PNG frames named by
//! UNIX seconds, a session manifest, and a validator for whole days.
//!
//! ```text
//! root/
//!   visible/<unix>.png           450x450, 16-bit gray
//!   infrared/<unix>.png          80 wide, 60 tall, 16-bit gray
//!   pyranometer/yyyy_mm_dd.csv   unix, gsi
//!   sun_position/yyyy_mm_dd.csv  unix, elevation, azimuth
//!   weather_station/yyyy_mm_dd.csv
//!   manifest_yyyy_mm_dd.txt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

use crate::frame::Frame;
use crate::solar::{session_window_for_date, GeoLocation, WindowPolicy};
pub use crate::solar::SunPositionRecord;

/// Images are taken every 15 s.
pub const IMAGE_CADENCE_S: f64 = 15.0;
/// Nominal pyranometer interval (4 to 6 samples per second).
pub const PYRANOMETER_CADENCE_S: f64 = 0.25;
/// Gaps longer than this multiple of the nominal cadence are reported.
pub const GAP_FACTOR: f64 = 2.0;
pub const GSI_CEILING: f64 = 1500.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    SchemaMismatch {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: timestamp {unix_time} is earlier than the previous row")]
    NonMonotoneTimestamps {
        path: PathBuf,
        line: u64,
        unix_time: f64,
    },
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("{path}: image is {found_w}x{found_h}, stream expects {expected_w}x{expected_h}")]
    BadDimensions {
        path: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("{path}: {found}, expected 16-bit single channel")]
    BadBitDepth { path: PathBuf, found: String },
    #[error("{0}: file name is not <unix seconds>.png")]
    UnparsableFilename(PathBuf),
    #[error("{path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("pixel {index} = {value} is not an integer in [0, 65535]")]
    BadPixel { index: usize, value: f64 },
    #[error("target {target} lies outside the raw series [{first}, {last}]")]
    TargetOutOfRange { target: f64, first: f64, last: f64 },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A row type of one of the archive's CSV tables.
pub trait CsvRecord: Sized {
    const COLUMNS: usize;
    fn unix_time(&self) -> f64;
    fn from_fields(fields: &[f64]) -> Self;
    fn to_fields(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyranometerRecord {
    pub unix_time: f64,
    /// Global solar irradiance, W/m².
    pub gsi: f64,
}

impl CsvRecord for PyranometerRecord {
    const COLUMNS: usize = 2;
    fn unix_time(&self) -> f64 {
        self.unix_time
    }
    fn from_fields(f: &[f64]) -> Self {
        PyranometerRecord {
            unix_time: f[0],
            gsi: f[1],
        }
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.unix_time, self.gsi]
    }
}

impl CsvRecord for SunPositionRecord {
    const COLUMNS: usize = 3;
    fn unix_time(&self) -> f64 {
        self.unix_time
    }
    fn from_fields(f: &[f64]) -> Self {
        SunPositionRecord {
            unix_time: f[0],
            elevation_deg: f[1],
            azimuth_deg: f[2],
        }
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![self.unix_time, self.elevation_deg, self.azimuth_deg]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherRecord {
    pub unix_time: f64,
    /// °C
    pub temperature: f64,
    /// °C
    pub dew_point: f64,
    /// mmHg
    pub pressure: f64,
    /// Radians in `[0, 2π)`.
    pub wind_direction: f64,
    pub wind_velocity: f64,
    /// Percent.
    pub relative_humidity: f64,
}

impl CsvRecord for WeatherRecord {
    const COLUMNS: usize = 7;
    fn unix_time(&self) -> f64 {
        self.unix_time
    }
    fn from_fields(f: &[f64]) -> Self {
        WeatherRecord {
            unix_time: f[0],
            temperature: f[1],
            dew_point: f[2],
            pressure: f[3],
            wind_direction: f[4],
            wind_velocity: f[5],
            relative_humidity: f[6],
        }
    }
    fn to_fields(&self) -> Vec<f64> {
        vec![
            self.unix_time,
            self.temperature,
            self.dew_point,
            self.pressure,
            self.wind_direction,
            self.wind_velocity,
            self.relative_humidity,
        ]
    }
}

/// Read a header-less CSV table. A non-numeric first line is taken to be a
/// header and skipped.
pub fn read_csv_stream<R: CsvRecord>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(io_err(path))?;
    read_csv_from(BufReader::new(file), path)
}

fn read_csv_from<R: CsvRecord>(input: impl std::io::Read, path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out: Vec<R> = Vec::new();
    let mut fields = Vec::with_capacity(R::COLUMNS);
    let mut prev = f64::NEG_INFINITY;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(row as u64 + 1, |p| p.line());
        if row == 0 && rec.get(0).map_or(false, |s| s.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != R::COLUMNS {
            return Err(DatasetError::SchemaMismatch {
                path: path.to_path_buf(),
                line,
                expected: R::COLUMNS,
                found: rec.len(),
            });
        }
        fields.clear();
        for s in rec.iter() {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => fields.push(v),
                _ => {
                    return Err(DatasetError::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("{s:?} is not a finite number"),
                    })
                }
            }
        }
        if fields[0] < prev {
            return Err(DatasetError::NonMonotoneTimestamps {
                path: path.to_path_buf(),
                line,
                unix_time: fields[0],
            });
        }
        prev = fields[0];
        out.push(R::from_fields(&fields));
    }
    Ok(out)
}

/// Write records without a header using shortest round-trip formatting.
/// Rejects out-of-order timestamps and non-finite values before touching
/// the file.
pub fn write_csv_stream<R: CsvRecord>(records: &[R], path: &Path) -> Result<()> {
    check_records(records)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_csv_to(records, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn check_records<R: CsvRecord>(records: &[R]) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (index, r) in records.iter().enumerate() {
        let fields = r.to_fields();
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidRecord {
                index,
                message: "non-finite value".into(),
            });
        }
        if fields[0] < prev {
            return Err(DatasetError::InvalidRecord {
                index,
                message: format!("timestamp {} precedes {prev}", fields[0]),
            });
        }
        prev = fields[0];
    }
    Ok(())
}

/// [`write_csv_stream`] for any sink, e.g. standard output.
pub fn write_csv<R: CsvRecord>(records: &[R], out: &mut impl Write) -> Result<()> {
    check_records(records)?;
    write_csv_to(records, out).map_err(io_err(Path::new("-")))
}

/// First column of a CSV table as timestamps, header tolerated. The other
/// columns are ignored, so any stream's file can supply target times.
pub fn read_timestamp_column(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(row as u64 + 1, |p| p.line());
        let first = rec.get(0).unwrap_or("");
        let t = match first.parse::<f64>() {
            Ok(t) if t.is_finite() => t,
            _ if row == 0 => continue,
            _ => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("{first:?} is not a finite number"),
                })
            }
        };
        if out.last().map_or(false, |&p| t < p) {
            return Err(DatasetError::NonMonotoneTimestamps {
                path: path.to_path_buf(),
                line,
                unix_time: t,
            });
        }
        out.push(t);
    }
    Ok(out)
}

fn write_csv_to<R: CsvRecord>(records: &[R], out: &mut impl Write) -> std::io::Result<()> {
    let mut line = String::new();
    for r in records {
        line.clear();
        for (i, v) in r.to_fields().iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            // f64's Display is the shortest string that parses back exactly.
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ImageStream {
    Visible,
    Infrared,
}

impl ImageStream {
    pub const ALL: [ImageStream; 2] = [ImageStream::Visible, ImageStream::Infrared];

    pub fn dir_name(self) -> &'static str {
        match self {
            ImageStream::Visible => "visible",
            ImageStream::Infrared => "infrared",
        }
    }

    /// `(width, height)` of every frame in the stream.
    pub fn dimensions(self) -> (usize, usize) {
        match self {
            ImageStream::Visible => (450, 450),
            ImageStream::Infrared => (80, 60),
        }
    }
}

/// Timestamp encoded in a `<unix seconds>.png` name.
pub fn timestamp_from_filename(path: &Path) -> Result<i64> {
    let bad = || DatasetError::UnparsableFilename(path.to_path_buf());
    if path.extension().and_then(|e| e.to_str()) != Some("png") {
        return Err(bad());
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(bad)?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    stem.parse().map_err(|_| bad())
}

struct DecodedPng {
    width: usize,
    height: usize,
    channels: usize,
    bit_depth: u8,
    data: Vec<f64>,
}

fn decode_png(path: &Path) -> Result<DecodedPng> {
    let png_err = |e: png::DecodingError| DatasetError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(DatasetError::BadBitDepth {
                path: path.to_path_buf(),
                found: format!("unsupported color type {other:?}"),
            })
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row_values = width * channels;
    let mut data = Vec::with_capacity(row_values * height);
    let bit_depth = match info.bit_depth {
        png::BitDepth::Eight => {
            for row in buf.chunks(info.line_size).take(height) {
                data.extend(row[..row_values].iter().map(|&b| b as f64));
            }
            8
        }
        png::BitDepth::Sixteen => {
            for row in buf.chunks(info.line_size).take(height) {
                data.extend(
                    row[..2 * row_values]
                        .chunks_exact(2)
                        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64),
                );
            }
            16
        }
        other => {
            return Err(DatasetError::BadBitDepth {
                path: path.to_path_buf(),
                found: format!("{other:?} bit samples"),
            })
        }
    };
    Ok(DecodedPng {
        width,
        height,
        channels,
        bit_depth,
        data,
    })
}

/// Read any 8- or 16-bit gray or RGB PNG. The timestamp comes from the file
/// name when it is `<unix seconds>.png`, else it is zero.
pub fn read_image(path: &Path) -> Result<Frame> {
    let d = decode_png(path)?;
    let ts = timestamp_from_filename(path).map_or(0.0, |t| t as f64);
    Frame::new(d.width, d.height, d.channels, d.data, ts, d.bit_depth).map_err(|e| {
        DatasetError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

/// Read an archive frame, checking the stream's dimensions and format.
pub fn read_frame(path: &Path, stream: ImageStream) -> Result<Frame> {
    let ts = timestamp_from_filename(path)?;
    let d = decode_png(path)?;
    if d.bit_depth != 16 || d.channels != 1 {
        return Err(DatasetError::BadBitDepth {
            path: path.to_path_buf(),
            found: format!("{}-bit, {} channel(s)", d.bit_depth, d.channels),
        });
    }
    let (w, h) = stream.dimensions();
    if (d.width, d.height) != (w, h) {
        return Err(DatasetError::BadDimensions {
            path: path.to_path_buf(),
            expected_w: w,
            expected_h: h,
            found_w: d.width,
            found_h: d.height,
        });
    }
    Ok(Frame::from_parts_unchecked(d.width, d.height, 1, d.data, ts as f64, 16))
}

/// Write a frame of integer values as a 16-bit PNG, gray for one channel
/// and RGB for three.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let color = match frame.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => {
            return Err(DatasetError::BadBitDepth {
                path: path.to_path_buf(),
                found: format!("{n} channels"),
            })
        }
    };
    let mut bytes = Vec::with_capacity(frame.len() * 2);
    for (index, &v) in frame.data().iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=65_535.0).contains(&v) {
            return Err(DatasetError::BadPixel { index, value: v });
        }
        bytes.extend_from_slice(&(v as u16).to_be_bytes());
    }
    let file = File::create(path).map_err(io_err(path))?;
    let enc_err = |e: png::EncodingError| DatasetError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width() as u32,
        frame.height() as u32,
    );
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Sixteen);
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(std::f64::consts::TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if w >= std::f64::consts::TAU {
        0.0
    } else {
        w
    }
}

/// Linearly resample a weather series at `targets`. Wind direction follows
/// the shorter arc between knots.
pub fn interpolate_weather(raw: &[WeatherRecord], targets: &[f64]) -> Result<Vec<WeatherRecord>> {
    use std::f64::consts::{PI, TAU};
    if let Some(i) = raw.windows(2).position(|w| w[1].unix_time <= w[0].unix_time) {
        return Err(DatasetError::InvalidRecord {
            index: i + 1,
            message: "raw weather timestamps must be strictly increasing".into(),
        });
    }
    let (first, last) = match (raw.first(), raw.last()) {
        (Some(f), Some(l)) => (f.unix_time, l.unix_time),
        _ if targets.is_empty() => return Ok(Vec::new()),
        _ => {
            return Err(DatasetError::TargetOutOfRange {
                target: targets[0],
                first: f64::NAN,
                last: f64::NAN,
            })
        }
    };
    targets
        .iter()
        .map(|&t| {
            if !(t >= first && t <= last) {
                return Err(DatasetError::TargetOutOfRange {
                    target: t,
                    first,
                    last,
                });
            }
            // Index of the first knot strictly after t.
            let hi = raw.partition_point(|r| r.unix_time <= t);
            let a = &raw[hi - 1];
            if a.unix_time == t || hi == raw.len() {
                return Ok(WeatherRecord { unix_time: t, ..*a });
            }
            let b = &raw[hi];
            let w = (t - a.unix_time) / (b.unix_time - a.unix_time);
            let lerp = |x: f64, y: f64| x + w * (y - x);
            let arc = (b.wind_direction - a.wind_direction + PI).rem_euclid(TAU) - PI;
            Ok(WeatherRecord {
                unix_time: t,
                temperature: lerp(a.temperature, b.temperature),
                dew_point: lerp(a.dew_point, b.dew_point),
                pressure: lerp(a.pressure, b.pressure),
                wind_direction: wrap_angle(a.wind_direction + w * arc),
                wind_velocity: lerp(a.wind_velocity, b.wind_velocity),
                relative_humidity: lerp(a.relative_humidity, b.relative_humidity),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableStream {
    Pyranometer,
    SunPosition,
    WeatherStation,
}

impl TableStream {
    pub const ALL: [TableStream; 3] = [
        TableStream::Pyranometer,
        TableStream::SunPosition,
        TableStream::WeatherStation,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            TableStream::Pyranometer => "pyranometer",
            TableStream::SunPosition => "sun_position",
            TableStream::WeatherStation => "weather_station",
        }
    }
}

pub fn csv_file_name(date: NaiveDate) -> String {
    format!("{}.csv", date.format("%Y_%m_%d"))
}

/// Paths of one day inside an archive root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayArchive {
    pub root: PathBuf,
    pub date: NaiveDate,
}

impl DayArchive {
    pub fn new(root: impl Into<PathBuf>, date: NaiveDate) -> Self {
        DayArchive {
            root: root.into(),
            date,
        }
    }

    pub fn image_dir(&self, stream: ImageStream) -> PathBuf {
        self.root.join(stream.dir_name())
    }

    pub fn image_path(&self, stream: ImageStream, unix_seconds: i64) -> PathBuf {
        self.image_dir(stream).join(format!("{unix_seconds}.png"))
    }

    pub fn table_path(&self, stream: TableStream) -> PathBuf {
        self.root.join(stream.dir_name()).join(csv_file_name(self.date))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root
            .join(format!("manifest_{}.txt", self.date.format("%Y_%m_%d")))
    }

    pub fn create_dirs(&self) -> Result<()> {
        let dirs = ImageStream::ALL
            .iter()
            .map(|s| s.dir_name())
            .chain(TableStream::ALL.iter().map(|s| s.dir_name()));
        for d in dirs {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(())
    }

    /// Image files of this day (by local date at `site`), sorted by time.
    /// Names that do not parse are returned separately.
    pub fn image_index(
        &self,
        stream: ImageStream,
        site: &GeoLocation,
    ) -> Result<(Vec<(i64, PathBuf)>, Vec<PathBuf>)> {
        let dir = self.image_dir(stream);
        let mut good = Vec::new();
        let mut bad = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            match timestamp_from_filename(&path) {
                Ok(t) if site.local_date(t as f64) == self.date => good.push((t, path)),
                Ok(_) => {}
                Err(_) => bad.push(path),
            }
        }
        good.sort();
        bad.sort();
        Ok((good, bad))
    }
}

/// A capture instant or stream sample that the acquisition run gave up on.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedInstant {
    pub unix_time: i64,
    pub stream: String,
    pub reason: String,
}

/// Session metadata written next to the day's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub date: NaiveDate,
    pub site: GeoLocation,
    pub policy: WindowPolicy,
    /// Other `key = value` entries, such as the seed and counts.
    pub entries: BTreeMap<String, String>,
    pub skipped: Vec<SkippedInstant>,
}

impl Manifest {
    pub fn new(date: NaiveDate, site: GeoLocation, policy: WindowPolicy) -> Self {
        Manifest {
            date,
            site,
            policy,
            entries: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s += &format!("date = {}\n", self.date);
        s += &format!("latitude = {}\n", self.site.latitude_deg);
        s += &format!("longitude = {}\n", self.site.longitude_deg);
        s += &format!("gmt_offset = {}\n", self.site.gmt_offset_hours);
        s += &format!("policy = {}\n", self.policy.name());
        for (k, v) in &self.entries {
            s += &format!("{k} = {v}\n");
        }
        for sk in &self.skipped {
            s += &format!("skip = {} {} {}\n", sk.unix_time, sk.stream, sk.reason);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| DatasetError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut date = None;
        let (mut lat, mut lon, mut off) = (None, None, None);
        let mut policy = None;
        let mut entries = BTreeMap::new();
        let mut skipped = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| err(format!("line {}: {v:?} is not a number", n + 1)))
            };
            match k {
                "date" => {
                    date = Some(
                        v.parse::<NaiveDate>()
                            .map_err(|e| err(format!("line {}: {e}", n + 1)))?,
                    )
                }
                "latitude" => lat = Some(num(v)?),
                "longitude" => lon = Some(num(v)?),
                "gmt_offset" => off = Some(num(v)?),
                "policy" => {
                    policy = Some(
                        v.parse::<WindowPolicy>()
                            .map_err(|e| err(format!("line {}: {e}", n + 1)))?,
                    )
                }
                "skip" => {
                    let mut parts = v.splitn(3, ' ');
                    let t = parts.next().and_then(|t| t.parse::<i64>().ok());
                    let stream = parts.next();
                    match (t, stream) {
                        (Some(unix_time), Some(stream)) => skipped.push(SkippedInstant {
                            unix_time,
                            stream: stream.to_string(),
                            reason: parts.next().unwrap_or("").to_string(),
                        }),
                        _ => return Err(err(format!("line {}: malformed skip entry", n + 1))),
                    }
                }
                _ => {
                    entries.insert(k.to_string(), v.to_string());
                }
            }
        }
        let missing = |what: &str| err(format!("missing {what}"));
        let site = GeoLocation::new(
            lat.ok_or_else(|| missing("latitude"))?,
            lon.ok_or_else(|| missing("longitude"))?,
            off.ok_or_else(|| missing("gmt_offset"))?,
        )
        .map_err(|e| err(e.to_string()))?;
        Ok(Manifest {
            date: date.ok_or_else(|| missing("date"))?,
            site,
            policy: policy.ok_or_else(|| missing("policy"))?,
            entries,
            skipped,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Manifest::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Visible,
    Infrared,
    Pyranometer,
    SunPosition,
    WeatherStation,
    Manifest,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Visible => "visible",
            Stream::Infrared => "infrared",
            Stream::Pyranometer => "pyranometer",
            Stream::SunPosition => "sun_position",
            Stream::WeatherStation => "weather_station",
            Stream::Manifest => "manifest",
        }
    }
}

impl From<ImageStream> for Stream {
    fn from(s: ImageStream) -> Self {
        match s {
            ImageStream::Visible => Stream::Visible,
            ImageStream::Infrared => Stream::Infrared,
        }
    }
}

impl From<TableStream> for Stream {
    fn from(s: TableStream) -> Self {
        match s {
            TableStream::Pyranometer => Stream::Pyranometer,
            TableStream::SunPosition => Stream::SunPosition,
            TableStream::WeatherStation => Stream::WeatherStation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    Missing,
    Unreadable,
    Format,
    Gap,
    Range,
    Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub stream: Stream,
    /// Seconds; rows without a time sort first.
    pub unix_time: Option<f64>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unix_time {
            Some(t) => write!(f, "{} @{}: {:?}: {}", self.stream.name(), t, self.kind, self.message),
            None => write!(f, "{}: {:?}: {}", self.stream.name(), self.kind, self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamSummary {
    pub stream: Stream,
    pub count: usize,
    pub first: Option<f64>,
    pub last: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub date: NaiveDate,
    /// Session window used for coverage checks, UNIX seconds.
    pub window: Option<(f64, f64)>,
    pub summaries: Vec<StreamSummary>,
    /// Sorted by stream, then time.
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, stream: Stream) -> usize {
        self.summaries
            .iter()
            .find(|s| s.stream == stream)
            .map_or(0, |s| s.count)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "date {}", self.date)?;
        if let Some((a, b)) = self.window {
            writeln!(f, "window {a} {b}")?;
        }
        for s in &self.summaries {
            write!(f, "{} count={}", s.stream.name(), s.count)?;
            if let (Some(a), Some(b)) = (s.first, s.last) {
                write!(f, " first={a} last={b}")?;
            }
            writeln!(f)?;
        }
        writeln!(f, "violations {}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

struct Collector {
    violations: Vec<Violation>,
}

impl Collector {
    fn push(&mut self, stream: Stream, unix_time: Option<f64>, kind: ViolationKind, message: String) {
        self.violations.push(Violation {
            stream,
            unix_time,
            kind,
            message,
        });
    }

    fn gaps(&mut self, stream: Stream, times: &[f64], limit: f64) {
        for w in times.windows(2) {
            if w[1] - w[0] > limit {
                self.push(
                    stream,
                    Some(w[0]),
                    ViolationKind::Gap,
                    format!("gap of {} s until {} exceeds {limit} s", w[1] - w[0], w[1]),
                );
            }
        }
    }
}

/// Check one day of an archive. Findings are collected, never raised.
///
/// The site and window policy come from the day's manifest when present,
/// otherwise Albuquerque and the 15° elevation window are assumed.
pub fn validate_day(root: &Path, date: NaiveDate) -> ValidationReport {
    let archive = DayArchive::new(root, date);
    let mut c = Collector {
        violations: Vec::new(),
    };
    let mut summaries = Vec::new();

    let manifest_path = archive.manifest_path();
    let manifest = if manifest_path.exists() {
        match Manifest::read(&manifest_path) {
            Ok(m) => Some(m),
            Err(e) => {
                c.push(Stream::Manifest, None, ViolationKind::Format, e.to_string());
                None
            }
        }
    } else {
        None
    };
    let (site, policy) = manifest
        .as_ref()
        .map_or((GeoLocation::ALBUQUERQUE, WindowPolicy::Elevation15Deg), |m| {
            (m.site, m.policy)
        });
    let skipped: BTreeSet<(String, i64)> = manifest
        .iter()
        .flat_map(|m| m.skipped.iter().map(|s| (s.stream.clone(), s.unix_time)))
        .collect();
    let window = session_window_for_date(&site, date, policy)
        .ok()
        .map(|w| w.unix_bounds(&site, date));

    for stream in ImageStream::ALL {
        let kind: Stream = stream.into();
        let (index, bad) = match archive.image_index(stream, &site) {
            Ok(v) => v,
            Err(e) => {
                c.push(kind, None, ViolationKind::Missing, e.to_string());
                summaries.push(StreamSummary {
                    stream: kind,
                    count: 0,
                    first: None,
                    last: None,
                });
                continue;
            }
        };
        for p in bad {
            c.push(
                kind,
                None,
                ViolationKind::Format,
                format!("{}: name is not <unix seconds>.png", p.display()),
            );
        }
        for (t, path) in &index {
            if let Err(e) = read_frame(path, stream) {
                let vk = match e {
                    DatasetError::BadDimensions { .. } | DatasetError::BadBitDepth { .. } => {
                        ViolationKind::Format
                    }
                    _ => ViolationKind::Unreadable,
                };
                c.push(kind, Some(*t as f64), vk, e.to_string());
            }
            if let Some((a, b)) = window {
                let tf = *t as f64;
                if tf < a.floor() || tf > b.ceil() {
                    c.push(
                        kind,
                        Some(tf),
                        ViolationKind::Coverage,
                        format!("{} lies outside the session window", path.display()),
                    );
                }
            }
        }
        // Instants the run logged as skipped do not count as gaps.
        let mut times: Vec<f64> = index.iter().map(|(t, _)| *t as f64).collect();
        times.extend(
            skipped
                .iter()
                .filter(|(s, _)| s == stream.dir_name())
                .map(|(_, t)| *t as f64),
        );
        times.sort_by(f64::total_cmp);
        times.dedup();
        c.gaps(kind, &times, GAP_FACTOR * IMAGE_CADENCE_S);
        summaries.push(StreamSummary {
            stream: kind,
            count: index.len(),
            first: index.first().map(|(t, _)| *t as f64),
            last: index.last().map(|(t, _)| *t as f64),
        });
    }

    let table_summary = |stream: Stream, times: &[f64]| StreamSummary {
        stream,
        count: times.len(),
        first: times.first().copied(),
        last: times.last().copied(),
    };

    let path = archive.table_path(TableStream::Pyranometer);
    match load_table::<PyranometerRecord>(&path, Stream::Pyranometer, &mut c) {
        Some(rows) => {
            for r in &rows {
                if !(r.gsi >= 0.0 && r.gsi < GSI_CEILING) {
                    c.push(
                        Stream::Pyranometer,
                        Some(r.unix_time),
                        ViolationKind::Range,
                        format!("GSI {} outside [0, {GSI_CEILING})", r.gsi),
                    );
                }
            }
            let times: Vec<f64> = rows.iter().map(|r| r.unix_time).collect();
            c.gaps(Stream::Pyranometer, &times, GAP_FACTOR * PYRANOMETER_CADENCE_S);
            summaries.push(table_summary(Stream::Pyranometer, &times));
        }
        None => summaries.push(table_summary(Stream::Pyranometer, &[])),
    }

    let path = archive.table_path(TableStream::SunPosition);
    match load_table::<SunPositionRecord>(&path, Stream::SunPosition, &mut c) {
        Some(rows) => {
            for r in &rows {
                if !(-90.0..=90.0).contains(&r.elevation_deg)
                    || !(0.0..360.0).contains(&r.azimuth_deg)
                {
                    c.push(
                        Stream::SunPosition,
                        Some(r.unix_time),
                        ViolationKind::Range,
                        format!(
                            "elevation {} / azimuth {} out of range",
                            r.elevation_deg, r.azimuth_deg
                        ),
                    );
                }
            }
            let times: Vec<f64> = rows.iter().map(|r| r.unix_time).collect();
            summaries.push(table_summary(Stream::SunPosition, &times));
        }
        None => summaries.push(table_summary(Stream::SunPosition, &[])),
    }

    let path = archive.table_path(TableStream::WeatherStation);
    match load_table::<WeatherRecord>(&path, Stream::WeatherStation, &mut c) {
        Some(rows) => {
            for r in &rows {
                let mut bad = Vec::new();
                if !(0.0..=100.0).contains(&r.relative_humidity) {
                    bad.push(format!("humidity {}", r.relative_humidity));
                }
                if !(0.0..std::f64::consts::TAU).contains(&r.wind_direction) {
                    bad.push(format!("wind direction {}", r.wind_direction));
                }
                if r.dew_point > r.temperature {
                    bad.push(format!(
                        "dew point {} above temperature {}",
                        r.dew_point, r.temperature
                    ));
                }
                if !bad.is_empty() {
                    c.push(
                        Stream::WeatherStation,
                        Some(r.unix_time),
                        ViolationKind::Range,
                        bad.join(", "),
                    );
                }
            }
            let times: Vec<f64> = rows.iter().map(|r| r.unix_time).collect();
            summaries.push(table_summary(Stream::WeatherStation, &times));
        }
        None => summaries.push(table_summary(Stream::WeatherStation, &[])),
    }

    let mut violations = c.violations;
    violations.sort_by(|a, b| {
        a.stream
            .cmp(&b.stream)
            .then(match (a.unix_time, b.unix_time) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (x, y) => x.is_some().cmp(&y.is_some()),
            })
            .then(a.kind.cmp(&b.kind))
            .then(a.message.cmp(&b.message))
    });
    ValidationReport {
        date,
        window,
        summaries,
        violations,
    }
}

fn load_table<R: CsvRecord>(path: &Path, stream: Stream, c: &mut Collector) -> Option<Vec<R>> {
    if !path.exists() {
        c.push(
            stream,
            None,
            ViolationKind::Missing,
            format!("{} not found", path.display()),
        );
        return None;
    }
    match read_csv_stream(path) {
        Ok(rows) => Some(rows),
        Err(e) => {
            c.push(stream, None, ViolationKind::Format, e.to_string());
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse<R: CsvRecord>(text: &str) -> Result<Vec<R>> {
        read_csv_from(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn csv_examples() {
        assert!(parse::<PyranometerRecord>("").unwrap().is_empty());
        let rows = parse::<PyranometerRecord>("1518305000.25,812.4\n").unwrap();
        assert_eq!(
            rows,
            vec![PyranometerRecord {
                unix_time: 1518305000.25,
                gsi: 812.4
            }]
        );
        let with_header = parse::<PyranometerRecord>("unix,gsi\n1,2\n").unwrap();
        assert_eq!(with_header.len(), 1);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse::<PyranometerRecord>("1,2\n2,x\n") {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse::<PyranometerRecord>("1,2\n2,3,4\n") {
            Err(DatasetError::SchemaMismatch { line, found, .. }) => {
                assert_eq!((line, found), (2, 3))
            }
            other => panic!("{other:?}"),
        }
        match parse::<PyranometerRecord>("5,1\n5,1\n4,1\n") {
            Err(DatasetError::NonMonotoneTimestamps { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse::<PyranometerRecord>("1,NaN\n").is_err());
    }

    #[test]
    fn csv_write_format_and_precondition() {
        let mut buf = Vec::new();
        let rows = [
            PyranometerRecord { unix_time: 0.1, gsi: 1.0 },
            PyranometerRecord { unix_time: 1e21, gsi: -0.0 },
        ];
        write_csv_to(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "0.1,1\n1000000000000000000000,-0\n");
        let back = parse::<PyranometerRecord>(&text).unwrap();
        assert_eq!(back[1].gsi.to_bits(), (-0.0f64).to_bits());
        let unordered = [rows[1], rows[0]];
        assert!(check_records(&unordered).is_err());
        let empty: [PyranometerRecord; 0] = [];
        let mut buf = Vec::new();
        write_csv_to(&empty, &mut buf).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn filename_timestamps() {
        assert_eq!(timestamp_from_filename(Path::new("a/1518305015.png")).unwrap(), 1518305015);
        assert!(timestamp_from_filename(Path::new("x.png")).is_err());
        assert!(timestamp_from_filename(Path::new("15.5.png")).is_err());
        assert!(timestamp_from_filename(Path::new("1518305015.jpg")).is_err());
    }

    fn weather(t: f64, temp: f64, wind: f64) -> WeatherRecord {
        WeatherRecord {
            unix_time: t,
            temperature: temp,
            dew_point: temp - 5.0,
            pressure: 630.0,
            wind_direction: wind,
            wind_velocity: 2.0,
            relative_humidity: 40.0,
        }
    }

    #[test]
    fn weather_interpolation_examples() {
        let raw = [weather(0.0, 10.0, 6.1), weather(600.0, 20.0, 0.2)];
        let out = interpolate_weather(&raw, &[0.0, 300.0, 600.0]).unwrap();
        assert_eq!(out[0], raw[0]);
        assert_eq!(out[2], raw[1]);
        assert!((out[1].temperature - 15.0).abs() < 1e-12);
        // Short way through zero: 6.1 + (0.2 + 2π - 6.1) / 2, wrapped.
        let expected = (6.1 + (0.2 + std::f64::consts::TAU - 6.1) / 2.0) - std::f64::consts::TAU;
        assert!((out[1].wind_direction - expected).abs() < 1e-12);
        assert!((out[1].wind_direction - 0.0084).abs() < 1e-4);
        assert!(matches!(
            interpolate_weather(&raw, &[601.0]),
            Err(DatasetError::TargetOutOfRange { .. })
        ));
        assert!(interpolate_weather(&[raw[1], raw[0]], &[300.0]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new(
            NaiveDate::from_ymd_opt(2018, 6, 21).unwrap(),
            GeoLocation::ALBUQUERQUE,
            WindowPolicy::Offset1h,
        );
        m.entries.insert("seed".into(), "7".into());
        m.skipped.push(SkippedInstant {
            unix_time: 1529600000,
            stream: "visible".into(),
            reason: "denoise: stack is degenerate".into(),
        });
        let back = Manifest::parse(&m.render(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("date = 2018-06-21\n", Path::new("m")).is_err());
    }
}

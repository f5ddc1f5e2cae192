//! Sun position from site coordinates and UNIX time.
//!
//! The model is the simplified clock-time chain used by small solar trackers:
//! time-zone meridian, equation of time, time correction, local solar time,
//! hour angle, then a sinusoidal declination. Accuracy is on the order of one
//! degree, which is enough to keep the Sun inside a wide-angle camera frame.
//!
//! Angles are degrees at every public boundary. Azimuth is measured clockwise
//! from true North in `[0, 360)`.

use chrono::{Datelike, NaiveDate};
use thiserror::Error;

/// Largest excursion outside `[-1, 1]` that an inverse-trig argument may have
/// before it is treated as a numeric inconsistency instead of rounding noise.
pub const UNIT_CLAMP_TOLERANCE: f64 = 1e-6;

/// Below this `|cos(elevation)|` the Sun is at the zenith and azimuth is undefined.
pub const ZENITH_COS_EPSILON: f64 = 1e-9;

/// Elevation threshold of the elevation-based observation window.
pub const OBSERVATION_ELEVATION_DEG: f64 = 15.0;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolarError {
    #[error("invalid location: {0}")]
    InvalidLocation(String),
    #[error("invalid time {0}: UNIX seconds must be finite and non-negative")]
    InvalidTime(f64),
    #[error("day of year {0} outside [1, 366]")]
    InvalidDayOfYear(u32),
    #[error("Sun at the zenith (elevation {elevation_deg}°); azimuth undefined")]
    DegeneratePosition { elevation_deg: f64 },
    #[error("{what} argument {value} lies outside [-1, 1] beyond tolerance")]
    NumericInconsistency { what: &'static str, value: f64 },
    #[error("polar day: the Sun does not set on day {day_of_year}")]
    PolarDay { day_of_year: u32 },
    #[error("polar night: the Sun does not rise on day {day_of_year}")]
    PolarNight { day_of_year: u32 },
    #[error("empty session window ({start_hours:.4} h >= {end_hours:.4} h)")]
    EmptyWindow { start_hours: f64, end_hours: f64 },
    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotoneTimestamps { index: usize },
}

pub type Result<T> = std::result::Result<T, SolarError>;

/// Site coordinates plus the fixed offset of its standard time from GMT.
///
/// No daylight-saving logic is applied anywhere: the offset is constant for
/// the whole year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLocation {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub gmt_offset_hours: f64,
}

impl GeoLocation {
    /// Roof of the ECE building, University of New Mexico (Mountain Standard Time).
    pub const ALBUQUERQUE: GeoLocation = GeoLocation {
        latitude_deg: 35.0821,
        longitude_deg: -106.6259,
        gmt_offset_hours: -7.0,
    };

    pub fn new(latitude_deg: f64, longitude_deg: f64, gmt_offset_hours: f64) -> Result<Self> {
        let loc = GeoLocation {
            latitude_deg,
            longitude_deg,
            gmt_offset_hours,
        };
        loc.validate()?;
        Ok(loc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SolarError::InvalidLocation(msg));
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return bad(format!("latitude {} outside [-90, 90]", self.latitude_deg));
        }
        if !(-180.0..=180.0).contains(&self.longitude_deg) {
            return bad(format!("longitude {} outside [-180, 180]", self.longitude_deg));
        }
        if !(-12.0..=14.0).contains(&self.gmt_offset_hours) {
            return bad(format!("GMT offset {} outside [-12, 14]", self.gmt_offset_hours));
        }
        Ok(())
    }

    /// UNIX time of local (standard-time) midnight starting `date`.
    pub fn local_midnight_unix(&self, date: NaiveDate) -> f64 {
        let days = date.signed_duration_since(unix_epoch_date()).num_days() as f64;
        days * SECONDS_PER_DAY - self.gmt_offset_hours * 3600.0
    }

    /// Local calendar date containing `unix_seconds`.
    pub fn local_date(&self, unix_seconds: f64) -> NaiveDate {
        let local = unix_seconds + self.gmt_offset_hours * 3600.0;
        let days = (local / SECONDS_PER_DAY).floor() as i64;
        unix_epoch_date() + chrono::Duration::days(days)
    }
}

fn unix_epoch_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

/// Every intermediate quantity of the clock-time to hour-angle chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarTime {
    pub unix_seconds: f64,
    pub day_of_year: u32,
    pub local_time_hours: f64,
    pub lstm_deg: f64,
    pub eot_minutes: f64,
    pub b_deg: f64,
    pub tc_minutes: f64,
    pub lst_hours: f64,
    pub hra_deg: f64,
}

impl SolarTime {
    pub fn at(loc: &GeoLocation, unix_seconds: f64) -> Result<Self> {
        let (day_of_year, local_time_hours) = decompose_time(unix_seconds, loc)?;
        let mut time = Self::from_local(loc, day_of_year, local_time_hours)?;
        time.unix_seconds = unix_seconds;
        Ok(time)
    }

    /// Chain evaluated from a day of year and local clock time directly.
    /// `unix_seconds` is left as NaN since no instant is implied.
    pub fn from_local(loc: &GeoLocation, day_of_year: u32, local_time_hours: f64) -> Result<Self> {
        check_day(day_of_year)?;
        let tc_minutes = time_correction(loc, day_of_year)?;
        let lst_hours = local_solar_time(local_time_hours, tc_minutes);
        Ok(SolarTime {
            unix_seconds: f64::NAN,
            day_of_year,
            local_time_hours,
            lstm_deg: lstm(loc.gmt_offset_hours),
            eot_minutes: equation_of_time(day_of_year)?,
            b_deg: orbit_angle_deg(day_of_year),
            tc_minutes,
            lst_hours,
            hra_deg: hour_angle(lst_hours),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarAngles {
    pub declination_deg: f64,
    pub elevation_deg: f64,
    /// Clockwise from true North, in `[0, 360)`.
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    /// Auxiliary angle in the azimuth denominator; same expression as elevation.
    pub xi_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowPolicy {
    /// From one hour after sunrise to one hour before sunset.
    Offset1h,
    /// While the Sun is above 15° of elevation.
    Elevation15Deg,
}

impl WindowPolicy {
    pub fn name(self) -> &'static str {
        match self {
            WindowPolicy::Offset1h => "offset_1h",
            WindowPolicy::Elevation15Deg => "elevation_15deg",
        }
    }
}

impl std::str::FromStr for WindowPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "offset_1h" | "offset1h" => Ok(WindowPolicy::Offset1h),
            "elevation_15deg" | "elevation15deg" => Ok(WindowPolicy::Elevation15Deg),
            other => Err(format!("unknown window policy '{other}'")),
        }
    }
}

/// Daily operating interval, all times in local standard decimal hours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionWindow {
    pub sunrise_hours: f64,
    pub sunset_hours: f64,
    pub start_hours: f64,
    pub end_hours: f64,
    pub policy: WindowPolicy,
}

impl SessionWindow {
    pub fn duration_hours(&self) -> f64 {
        self.end_hours - self.start_hours
    }

    /// `(start, end)` as UNIX seconds for the given local date.
    pub fn unix_bounds(&self, loc: &GeoLocation, date: NaiveDate) -> (f64, f64) {
        let midnight = loc.local_midnight_unix(date);
        (
            midnight + self.start_hours * 3600.0,
            midnight + self.end_hours * 3600.0,
        )
    }
}

/// One row of a sun-position table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SunPositionRecord {
    pub unix_time: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordSkipped {
    pub unix_time: f64,
    pub reason: SolarError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SunTable {
    pub records: Vec<SunPositionRecord>,
    pub skipped: Vec<RecordSkipped>,
}

fn check_day(day_of_year: u32) -> Result<()> {
    if (1..=366).contains(&day_of_year) {
        Ok(())
    } else {
        Err(SolarError::InvalidDayOfYear(day_of_year))
    }
}

/// Clamp an inverse-trig argument into `[-1, 1]`, refusing corrections
/// larger than [`UNIT_CLAMP_TOLERANCE`].
fn unit_arg(value: f64, what: &'static str) -> Result<f64> {
    if !value.is_finite() || value.abs() > 1.0 + UNIT_CLAMP_TOLERANCE {
        return Err(SolarError::NumericInconsistency { what, value });
    }
    Ok(value.clamp(-1.0, 1.0))
}

/// Day of year (1-based) and local clock hours under the site's fixed offset.
pub fn decompose_time(unix_seconds: f64, loc: &GeoLocation) -> Result<(u32, f64)> {
    if !unix_seconds.is_finite() || unix_seconds < 0.0 {
        return Err(SolarError::InvalidTime(unix_seconds));
    }
    let local = unix_seconds + loc.gmt_offset_hours * 3600.0;
    let days = (local / SECONDS_PER_DAY).floor();
    let mut hours = (local - days * SECONDS_PER_DAY) / 3600.0;
    let mut days = days as i64;
    if hours >= 24.0 {
        hours -= 24.0;
        days += 1;
    }
    let date = unix_epoch_date() + chrono::Duration::days(days);
    Ok((date.ordinal(), hours.max(0.0)))
}

/// Local standard time meridian in degrees.
pub fn lstm(gmt_offset_hours: f64) -> f64 {
    15.0 * gmt_offset_hours
}

/// `B = (360/365)(d - 81)` in degrees.
pub fn orbit_angle_deg(day_of_year: u32) -> f64 {
    360.0 / 365.0 * (day_of_year as f64 - 81.0)
}

/// Empirical equation of time in minutes.
pub fn equation_of_time(day_of_year: u32) -> Result<f64> {
    check_day(day_of_year)?;
    let b = orbit_angle_deg(day_of_year).to_radians();
    Ok(9.87 * (2.0 * b).sin() - 7.53 * b.cos() - 1.5 * b.sin())
}

/// Time correction in minutes: longitude offset from the zone meridian plus EoT.
pub fn time_correction(loc: &GeoLocation, day_of_year: u32) -> Result<f64> {
    Ok(4.0 * (loc.longitude_deg - lstm(loc.gmt_offset_hours)) + equation_of_time(day_of_year)?)
}

/// Local solar time in hours. Not wrapped into `[0, 24)`.
pub fn local_solar_time(local_time_hours: f64, tc_minutes: f64) -> f64 {
    local_time_hours + tc_minutes / 60.0
}

/// Hour angle in degrees, negative before solar noon.
pub fn hour_angle(lst_hours: f64) -> f64 {
    15.0 * (lst_hours - 12.0)
}

/// Solar declination in degrees.
pub fn declination(day_of_year: u32) -> Result<f64> {
    check_day(day_of_year)?;
    Ok(23.45 * orbit_angle_deg(day_of_year).to_radians().sin())
}

/// Elevation for a latitude, declination and hour angle (all degrees).
pub fn elevation_deg(latitude_deg: f64, declination_deg: f64, hour_angle_deg: f64) -> Result<f64> {
    let (phi, delta, h) = (
        latitude_deg.to_radians(),
        declination_deg.to_radians(),
        hour_angle_deg.to_radians(),
    );
    let s = delta.sin() * phi.sin() + delta.cos() * phi.cos() * h.cos();
    Ok(unit_arg(s, "elevation")?.asin().to_degrees())
}

/// Full angle set for a latitude, declination and hour angle.
pub fn horizontal_angles(
    latitude_deg: f64,
    declination_deg: f64,
    hour_angle_deg: f64,
) -> Result<SolarAngles> {
    let elevation = elevation_deg(latitude_deg, declination_deg, hour_angle_deg)?;
    let xi = elevation;
    let cos_xi = xi.to_radians().cos();
    if cos_xi.abs() < ZENITH_COS_EPSILON {
        return Err(SolarError::DegeneratePosition {
            elevation_deg: elevation,
        });
    }
    let (phi, delta, h) = (
        latitude_deg.to_radians(),
        declination_deg.to_radians(),
        hour_angle_deg.to_radians(),
    );
    let num = delta.sin() * phi.cos() - delta.cos() * phi.sin() * h.cos();
    let raw = unit_arg(num / cos_xi, "azimuth")?.acos().to_degrees();
    let mut azimuth = if hour_angle_deg <= 0.0 { raw } else { 360.0 - raw };
    if azimuth >= 360.0 {
        azimuth -= 360.0;
    }
    // Subtracting from 90 is exact when the operand is in [45, 180], so the
    // angle below 45° is derived from the other one and the pair sums to 90.
    let (elevation, zenith) = if elevation >= 45.0 {
        (elevation, 90.0 - elevation)
    } else {
        let zenith = 90.0 - elevation;
        (90.0 - zenith, zenith)
    };
    Ok(SolarAngles {
        declination_deg,
        elevation_deg: elevation,
        azimuth_deg: azimuth,
        zenith_deg: zenith,
        xi_deg: xi,
    })
}

/// Sun position at an instant.
pub fn solar_position(loc: &GeoLocation, unix_seconds: f64) -> Result<SolarAngles> {
    let time = SolarTime::at(loc, unix_seconds)?;
    horizontal_angles(
        loc.latitude_deg,
        declination(time.day_of_year)?,
        time.hra_deg,
    )
}

/// Elevation at a local clock time on a given day, bypassing the UNIX clock.
pub fn elevation_at_local_time(loc: &GeoLocation, day_of_year: u32, local_hours: f64) -> Result<f64> {
    let time = SolarTime::from_local(loc, day_of_year, local_hours)?;
    elevation_deg(loc.latitude_deg, declination(day_of_year)?, time.hra_deg)
}

/// Sunrise and sunset in local decimal hours.
pub fn sunrise_sunset(loc: &GeoLocation, day_of_year: u32) -> Result<(f64, f64)> {
    let delta = declination(day_of_year)?.to_radians();
    let phi = loc.latitude_deg.to_radians();
    let arg = -(phi.sin() * delta.sin()) / (phi.cos() * delta.cos());
    if !arg.is_finite() || arg < -1.0 - UNIT_CLAMP_TOLERANCE {
        return Err(SolarError::PolarDay { day_of_year });
    }
    if arg > 1.0 + UNIT_CLAMP_TOLERANCE {
        return Err(SolarError::PolarNight { day_of_year });
    }
    let half_day = arg.clamp(-1.0, 1.0).acos().to_degrees() / 15.0;
    let shift = time_correction(loc, day_of_year)? / 60.0;
    Ok((12.0 - half_day - shift, 12.0 + half_day - shift))
}

/// Local clock time of solar noon (hour angle zero).
pub fn solar_noon_hours(loc: &GeoLocation, day_of_year: u32) -> Result<f64> {
    Ok(12.0 - time_correction(loc, day_of_year)? / 60.0)
}

pub fn session_window(
    loc: &GeoLocation,
    day_of_year: u32,
    policy: WindowPolicy,
) -> Result<SessionWindow> {
    let (sunrise, sunset) = sunrise_sunset(loc, day_of_year)?;
    let (start, end) = match policy {
        WindowPolicy::Offset1h => (sunrise + 1.0, sunset - 1.0),
        WindowPolicy::Elevation15Deg => {
            let noon = solar_noon_hours(loc, day_of_year)?;
            let elevation = |h: f64| elevation_at_local_time(loc, day_of_year, h);
            if elevation(noon)? <= OBSERVATION_ELEVATION_DEG {
                return Err(SolarError::EmptyWindow {
                    start_hours: noon,
                    end_hours: noon,
                });
            }
            let start = bisect_crossing(&elevation, sunrise, noon, OBSERVATION_ELEVATION_DEG)?;
            let end = bisect_crossing(&elevation, noon, sunset, OBSERVATION_ELEVATION_DEG)?;
            (start, end)
        }
    };
    if start >= end {
        return Err(SolarError::EmptyWindow {
            start_hours: start,
            end_hours: end,
        });
    }
    Ok(SessionWindow {
        sunrise_hours: sunrise,
        sunset_hours: sunset,
        start_hours: start,
        end_hours: end,
        policy,
    })
}

/// Time in `[lo, hi]` where `f` crosses `level`; `f(lo) - level` and
/// `f(hi) - level` must differ in sign. Converges to 0.1 s.
fn bisect_crossing<F>(f: &F, mut lo: f64, mut hi: f64, level: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let rising = f(lo)? < f(hi)?;
    while hi - lo > 0.1 / 3600.0 {
        let mid = 0.5 * (lo + hi);
        let above = f(mid)? > level;
        if above == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Session window for a local calendar date.
pub fn session_window_for_date(
    loc: &GeoLocation,
    date: NaiveDate,
    policy: WindowPolicy,
) -> Result<SessionWindow> {
    session_window(loc, date.ordinal(), policy)
}

/// Sun position for each timestamp. Zenith singularities are reported in
/// `skipped` rather than failing the whole table.
pub fn sun_position_table(timestamps: &[f64], loc: &GeoLocation) -> Result<SunTable> {
    if let Some(index) = timestamps
        .windows(2)
        .position(|w| !(w[1] > w[0]))
        .map(|i| i + 1)
    {
        return Err(SolarError::NonMonotoneTimestamps { index });
    }
    let mut table = SunTable::default();
    for &t in timestamps {
        match solar_position(loc, t) {
            Ok(angles) => table.records.push(SunPositionRecord {
                unix_time: t,
                elevation_deg: angles.elevation_deg,
                azimuth_deg: angles.azimuth_deg,
            }),
            Err(reason @ SolarError::DegeneratePosition { .. }) => {
                table.skipped.push(RecordSkipped { unix_time: t, reason })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(table)
}

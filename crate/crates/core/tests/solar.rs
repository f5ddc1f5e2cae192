mod common;

use chrono::{Datelike, NaiveDate};
use proptest::prelude::*;
use skydaq::solar::*;

use common::{bearing_diff, noaa_sun};

const ABQ: GeoLocation = GeoLocation::ALBUQUERQUE;

#[test]
fn hourly_year_matches_reference_ephemeris() {
    let start = ABQ.local_midnight_unix(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap());
    let (mut worst_el, mut worst_az, mut samples) = (0.0f64, 0.0f64, 0);
    for h in 0..366 * 24 {
        let t = start + 3600.0 * h as f64;
        let a = solar_position(&ABQ, t).unwrap();
        if a.elevation_deg <= 15.0 {
            continue;
        }
        let (el, az) = noaa_sun(ABQ.latitude_deg, ABQ.longitude_deg, t);
        worst_el = worst_el.max((a.elevation_deg - el).abs());
        worst_az = worst_az.max(bearing_diff(a.azimuth_deg, az));
        samples += 1;
    }
    assert!(samples > 3000, "{samples}");
    assert!(worst_el <= 1.5, "elevation off by {worst_el}");
    assert!(worst_az <= 2.5, "azimuth off by {worst_az}");
}

#[test]
fn equation_of_time_has_reference_shape() {
    let eot: Vec<f64> = (1..=365).map(|d| equation_of_time(d).unwrap()).collect();
    let (dmin, min) = eot.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i + 1, v) } else { b });
    let (dmax, max) = eot.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i + 1, v) } else { b });
    assert!((min + 14.2).abs() <= 1.5 && (dmin as i32 - 41).abs() <= 10, "min {min} on day {dmin}");
    assert!((max - 16.4).abs() <= 1.5 && (dmax as i32 - 306).abs() <= 10, "max {max} on day {dmax}");
    let crossings = eot.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    assert_eq!(crossings, 4);
}

#[test]
fn sun_is_on_the_horizon_at_sunrise_and_sunset() {
    for d in (1..=365).step_by(7) {
        let (sr, ss) = sunrise_sunset(&ABQ, d).unwrap();
        assert!(elevation_at_local_time(&ABQ, d, sr).unwrap().abs() < 1e-9);
        assert!(elevation_at_local_time(&ABQ, d, ss).unwrap().abs() < 1e-9);
        let noon = solar_noon_hours(&ABQ, d).unwrap();
        assert!((noon - 0.5 * (sr + ss)).abs() < 1e-9);
    }
}

#[test]
fn elevation_window_starts_and_ends_at_fifteen_degrees() {
    for d in [1, 80, 172, 266, 355] {
        let w = session_window(&ABQ, d, WindowPolicy::Elevation15Deg).unwrap();
        for h in [w.start_hours, w.end_hours] {
            let e = elevation_at_local_time(&ABQ, d, h).unwrap();
            assert!((e - OBSERVATION_ELEVATION_DEG).abs() <= 0.01, "day {d}: {e}");
        }
        let o = session_window(&ABQ, d, WindowPolicy::Offset1h).unwrap();
        assert_eq!(o.start_hours, o.sunrise_hours + 1.0);
        assert_eq!(o.end_hours, o.sunset_hours - 1.0);
    }
}

#[test]
fn window_for_date_uses_the_local_calendar_day() {
    let date = NaiveDate::from_ymd_opt(2024, 6, 21).unwrap();
    let w = session_window_for_date(&ABQ, date, WindowPolicy::Elevation15Deg).unwrap();
    let (a, b) = w.unix_bounds(&ABQ, date);
    assert_eq!(ABQ.local_date(a), date);
    assert_eq!(ABQ.local_date(b), date);
    assert_eq!(ABQ.local_date(a).ordinal(), 173);
}

#[test]
fn polar_night_has_no_window() {
    let arctic = GeoLocation::new(80.0, 15.0, 1.0).unwrap();
    assert!(sunrise_sunset(&arctic, 355).is_err());
}

proptest! {
    #[test]
    fn noon_elevation_identity(lat in -89.0f64..89.0, d in 1u32..=365) {
        let dec = declination(d).unwrap();
        prop_assume!(lat >= dec);
        let e = elevation_deg(lat, dec, 0.0).unwrap();
        prop_assert!((e - (90.0 - lat + dec)).abs() <= 1e-9);
    }

    #[test]
    fn angles_stay_in_range(lat in -66.0f64..66.0, lon in -180.0f64..180.0, off in -12i32..=14, t in 0.0f64..4.0e9) {
        let loc = GeoLocation::new(lat, lon, off as f64).unwrap();
        if let Ok(a) = solar_position(&loc, t) {
            prop_assert!((0.0..360.0).contains(&a.azimuth_deg));
            prop_assert!((-90.0..=90.0).contains(&a.elevation_deg));
            prop_assert!(a.declination_deg.abs() <= 23.45);
            prop_assert_eq!(a.zenith_deg + a.elevation_deg, 90.0);
        }
    }

    #[test]
    fn morning_sun_is_east_afternoon_sun_is_west(d in 1u32..=365, dh in 0.5f64..4.0) {
        let noon = solar_noon_hours(&ABQ, d).unwrap();
        let dec = declination(d).unwrap();
        let angles = |h: f64| {
            let t = SolarTime::from_local(&ABQ, d, h).unwrap();
            horizontal_angles(ABQ.latitude_deg, dec, t.hra_deg).unwrap()
        };
        prop_assert!(angles(noon - dh).azimuth_deg < 180.0);
        prop_assert!(angles(noon + dh).azimuth_deg > 180.0);
        let am = angles(noon - dh).elevation_deg;
        let pm = angles(noon + dh).elevation_deg;
        prop_assert!((am - pm).abs() < 1e-9);
    }
}

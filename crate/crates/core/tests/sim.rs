use std::collections::BTreeMap;
use std::path::Path;

use skydaq::dataset::validate_day;
use skydaq::fusion::EXPOSURE_TIMES_MS;
use skydaq::sim::*;
use skydaq::solar::{session_window_for_date, solar_position};
use skydaq::{GeoLocation, NaiveDate, WindowPolicy};
use tempfile::TempDir;

const ABQ: GeoLocation = GeoLocation::ALBUQUERQUE;

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn window_seconds(d: NaiveDate) -> (f64, f64) {
    session_window_for_date(&ABQ, d, WindowPolicy::Elevation15Deg)
        .unwrap()
        .unix_bounds(&ABQ, d)
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn tracker_stays_in_range_and_follows_the_sun() {
    let summer = tracker_trace(&ABQ, date(2024, 6, 21), WindowPolicy::Elevation15Deg, 1.0).unwrap();
    let winter = tracker_trace(&ABQ, date(2024, 12, 21), WindowPolicy::Elevation15Deg, 1.0).unwrap();
    assert!(winter.samples.len() < summer.samples.len());
    for trace in [&summer, &winter] {
        assert_eq!(trace.slew_violations, 0);
        for w in trace.samples.windows(2) {
            assert_eq!(w[1].unix_time - w[0].unix_time, 1.0);
            assert!((w[1].pan_deg - w[0].pan_deg).abs() < 1.0);
            assert!((w[1].tilt_deg - w[0].tilt_deg).abs() < 1.0);
        }
        for s in trace.samples.iter().step_by(97) {
            assert!(s.pan_deg.abs() <= PAN_LIMIT_DEG);
            assert!((TILT_MIN_DEG..=TILT_MAX_DEG).contains(&s.tilt_deg));
            let a = solar_position(&ABQ, s.unix_time).unwrap();
            let (pan, tilt, _) = mount_angles(a.elevation_deg, a.azimuth_deg);
            assert_eq!((pan, tilt), (s.pan_deg, s.tilt_deg));
        }
    }
    // High summer sun exceeds the tilt range; the winter arc fits.
    assert!(summer.clipped > 0);
    assert_eq!(winter.clipped, 0);
}

#[test]
fn mount_mapping_faces_south() {
    assert_eq!(mount_angles(47.0, 180.0), (0.0, 0.0, false));
    assert_eq!(mount_angles(30.0, 90.0), (-90.0, -17.0, false));
    assert_eq!(mount_angles(80.0, 200.0), (20.0, TILT_MAX_DEG, true));
    assert_eq!(mount_angles(20.0, 345.0), (PAN_LIMIT_DEG, -27.0, true));
}

#[test]
fn capture_count_matches_window_length() {
    let schedule = CaptureSchedule::default();
    for d in [date(2024, 3, 20), date(2024, 6, 21), date(2024, 9, 22), date(2024, 12, 21)] {
        let (start, end) = window_seconds(d);
        let instants = schedule.capture_instants(start, end);
        let expected = ((end - start) / 15.0).floor() as i64;
        assert!((instants.len() as i64 - expected).abs() <= 1, "{d}: {} vs {expected}", instants.len());
        assert!(instants.iter().all(|&t| t as f64 >= start && t as f64 <= end));
        assert!(instants.windows(2).all(|w| w[1] - w[0] == 15));
    }
}

#[test]
fn schedule_rejects_bad_cadences() {
    let ok = CaptureSchedule::default();
    assert!(ok.validate().is_ok());
    assert!(CaptureSchedule { ir_fps: 0.0, ..ok }.validate().is_err());
    assert!(CaptureSchedule { vi_repeats: 0, ..ok }.validate().is_err());
    assert!(CaptureSchedule { ir_burst_frames: 200, ..ok }.validate().is_err());
}

#[test]
fn sky_is_a_function_of_its_seed() {
    let (start, end) = window_seconds(date(2024, 6, 21));
    let t = (start / 15.0).ceil() as i64 * 15 + 600;
    let a = VirtualSky::new(SkyParams::default(), start, end);
    let b = VirtualSky::new(SkyParams::default(), start, end);
    let c = VirtualSky::new(SkyParams { seed: 99, ..SkyParams::default() }, start, end);
    let (ga, gb, gc) = (
        a.visible_bursts(t, &EXPOSURE_TIMES_MS, 3),
        b.visible_bursts(t, &EXPOSURE_TIMES_MS, 3),
        c.visible_bursts(t, &EXPOSURE_TIMES_MS, 3),
    );
    assert_eq!(ga, gb);
    assert_ne!(ga, gc);
    assert_eq!(a.infrared_burst(t, 10, 9.0), b.infrared_burst(t, 10, 9.0));
    let ir = a.infrared_burst(t, 10, 9.0);
    assert_eq!((ir[0].width(), ir[0].height()), (80, 60));
    assert!((ir[9].timestamp - ir[0].timestamp - 1.0).abs() < 1e-12);
}

#[test]
fn short_session_is_reproducible_and_valid() {
    let d = date(2024, 12, 21);
    let mut cfg = SimConfig::new(d);
    cfg.max_captures = Some(3);
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let sa = run_session(&cfg, a.path()).unwrap();
    let sb = run_session(&cfg, b.path()).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.captures, 3);
    assert_eq!((sa.visible_written, sa.infrared_written), (3, 3));
    assert!(sa.skipped.is_empty());
    assert_eq!(snapshot(a.path()), snapshot(b.path()));

    let report = validate_day(a.path(), d);
    assert!(report.is_clean(), "{:?}", report.violations);

    // The tables cover the whole window regardless of the capture cap.
    let (start, end) = sa.window;
    let want = (end - start) * cfg.schedule.pyranometer_rate_hz;
    let got = sa.pyranometer_records as f64;
    assert!((got - want).abs() <= 0.01 * want, "{got} vs {want}");
    assert_eq!(sa.tracker_samples as f64, (end.floor() - start.ceil()) + 1.0);
}

#[test]
fn injected_defects_leave_about_nine_frames() {
    let d = date(2024, 12, 21);
    let cfg = SimConfig::parse("date = 2024-12-21\nseed = 5\ndefect_prob = 0.1\nmax_captures = 20\n").unwrap();
    assert_eq!((cfg.sky.defect_prob, cfg.max_captures), (0.1, Some(20)));
    let dir = TempDir::new().unwrap();
    let s = run_session(&cfg, dir.path()).unwrap();
    assert!(s.skipped.is_empty(), "{:?}", s.skipped);
    // 800 visible and 200 infrared frames: the binomial spread of the mean
    // is about 0.1 and 0.2 frames.
    assert!((s.mean_visible_survivors - 9.0).abs() < 0.35, "{}", s.mean_visible_survivors);
    assert!((s.mean_infrared_survivors - 9.0).abs() < 0.7, "{}", s.mean_infrared_survivors);
    let report = validate_day(dir.path(), d);
    assert!(report.is_clean(), "{:?}", report.violations);
}

#[test]
fn config_parsing_is_strict() {
    let cfg = SimConfig::parse(
        "# comment\ndate = 2024-06-21\nlatitude = 40.0  # trailing\nvi_repeats = 6\nfusion_radii = 10, 20, 30, 40\npolicy = offset_1h\n",
    )
    .unwrap();
    assert_eq!(cfg.date, date(2024, 6, 21));
    assert_eq!(cfg.site.latitude_deg, 40.0);
    assert_eq!(cfg.schedule.vi_repeats, 6);
    assert_eq!(cfg.fusion.radii_px, [10.0, 20.0, 30.0, 40.0]);
    assert_eq!(cfg.policy, WindowPolicy::Offset1h);

    let line_of = |text: &str| match SimConfig::parse(text) {
        Err(SimError::Config { line, .. }) => line,
        other => panic!("{other:?}"),
    };
    assert_eq!(line_of("date = 2024-06-21\nbogus = 1\n"), 2);
    assert_eq!(line_of("date = 2024-06-21\n\nseed = x\n"), 3);
    assert_eq!(line_of("date = 2024-06-21\ndefect_prob = 1.5\n"), 2);
    assert_eq!(line_of("date = 2024-06-21\nno equals sign\n"), 2);
    assert_eq!(line_of("seed = 1\n"), 0);
    assert!(SimConfig::parse("date = 2024-06-21\nfusion_radii = 1, 2\n").is_err());
}

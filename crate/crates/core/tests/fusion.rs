mod common;

use proptest::prelude::*;
use skydaq::denoise::FilterConfig;
use skydaq::fusion::*;
use skydaq::sim::{SkyParams, VirtualSky};
use skydaq::Frame;

use common::smooth_sky;

fn gray(size: usize, f: impl FnMut(usize, usize) -> f64) -> Frame {
    Frame::from_fn(size, size, 0.0, 16, f).unwrap()
}

fn dist(x: usize, y: usize, c: (f64, f64)) -> f64 {
    ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt()
}

/// Ring means by direct distance tests, without the mask types.
fn oracle_alphas(frames: &[Frame; EXPOSURES], radii: [f64; EXPOSURES], eps: f64, c: (f64, f64)) -> [f64; EXPOSURES] {
    let size = frames[0].width();
    let ring_mean = |f: &Frame, lo: f64, hi: f64| {
        let (mut s, mut n) = (0.0, 0);
        for y in 0..size {
            for x in 0..size {
                let d = dist(x, y, c);
                if d > lo && d <= hi {
                    s += f.get(x, y, 0);
                    n += 1;
                }
            }
        }
        s / n as f64
    };
    let mut a = [1.0; EXPOSURES];
    for e in 0..EXPOSURES - 1 {
        let r = radii[e];
        a[e + 1] = a[e] * ring_mean(&frames[e], r - eps, r) / ring_mean(&frames[e + 1], r, r + eps);
    }
    a
}

#[test]
fn region_weights_partition_unity() {
    let plan = FusionPlan::new(&FusionConfig::default(), 450).unwrap();
    let fields = plan.region_fields();
    assert_eq!(fields.len(), EXPOSURES + 1);
    let worst = (0..450 * 450)
        .map(|p| (fields.iter().map(|f| f[p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn uniform_peak_input_saturates_inside_and_is_zero_outside() {
    let cfg = FusionConfig::default();
    let frames = [0; EXPOSURES].map(|_| Frame::filled(450, 450, 1, 225.0, 0.0, 16).unwrap());
    let set = ExposureSet::new(frames, cfg.exposure_times_ms, 0.0).unwrap();
    let out = fuse(&set, &cfg).unwrap();
    assert_eq!(out.weights.alphas, [1.0; EXPOSURES]);
    let c = cfg.center_for(450);
    let radius = cfg.fisheye_radius_for(450);
    for y in 0..450 {
        for x in 0..450 {
            let want = if dist(x, y, c) <= radius { 65_535.0 } else { 0.0 };
            assert_eq!(out.frame.get(x, y, 0), want, "({x},{y})");
        }
    }
}

#[test]
fn kernel_is_normalized_and_symmetric() {
    for (sigma, size) in [(7.5, 15), (1.0, 5), (3.0, 9), (20.0, 31)] {
        let k = gaussian_kernel(sigma, size).unwrap();
        assert!((k.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let h = (size / 2) as isize;
        for dy in -h..=h {
            for dx in -h..=h {
                let v = k.at(dx, dy);
                assert_eq!(v, k.at(-dx, dy));
                assert_eq!(v, k.at(dx, -dy));
                assert_eq!(v, k.at(dy, dx));
            }
        }
    }
    assert!(gaussian_kernel(1.0, 4).is_err());
}

#[test]
fn masks_and_rings_match_pixel_counting() {
    for size in [41, 100, 200] {
        let c = ((size / 2) as f64, (size / 2) as f64);
        for r in [3.0, 5.0, 6.25, 12.5, 17.3] {
            let m = radial_mask(r, c, size);
            let want = (0..size * size).filter(|&p| dist(p % size, p / size, c) <= r).count();
            assert_eq!(m.count(), want);
            let (outer, inner) = edge_rings(r, std::f64::consts::SQRT_2, c, size).unwrap();
            for p in 0..size * size {
                let d = dist(p % size, p / size, c);
                let (x, y) = (p % size, p / size);
                assert_eq!(outer.get(x, y), d > r && d <= r + std::f64::consts::SQRT_2);
                assert_eq!(inner.get(x, y), d > r - std::f64::consts::SQRT_2 && d <= r);
            }
        }
    }
}

#[test]
fn interior_pixels_equal_scaled_sources() {
    let cfg = FusionConfig {
        radii_px: [20.0, 40.0, 60.0, 80.0],
        kernel_size: 5,
        ..FusionConfig::default()
    };
    let size = 200;
    let frames: [Frame; EXPOSURES] = std::array::from_fn(|e| {
        let k = (e + 1) as f64;
        gray(size, |x, y| 10.0 + 3.0 * k + 0.1 * x as f64 + 0.05 * k * y as f64)
    });
    let set = ExposureSet::new(frames.clone(), cfg.exposure_times_ms, 0.0).unwrap();
    let plan = FusionPlan::new(&cfg, size).unwrap();
    let w = plan.alphas(&set).unwrap();
    let want_alphas = oracle_alphas(&frames, cfg.radii_px, cfg.ring_epsilon, plan.center());
    for e in 0..EXPOSURES {
        assert!((w.alphas[e] - want_alphas[e]).abs() <= 1e-12 * want_alphas[e]);
    }
    let x = plan.blend(&set, &w).unwrap();
    let mut checked = 0;
    for py in 0..size {
        for px in 0..size {
            let d = dist(px, py, plan.center());
            if cfg.radii_px.iter().any(|r| (d - r).abs() < 3.0) {
                continue;
            }
            let e = cfg.radii_px.iter().position(|&r| d <= r).unwrap_or(EXPOSURES - 1);
            let want = want_alphas[e] * frames[e].get(px, py, 0);
            let got = x[py * size + px];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "({px},{py}): {got} vs {want}");
            checked += 1;
        }
    }
    assert!(checked > 30_000);
}

#[test]
fn boundaries_are_continuous_on_a_smooth_sky() {
    let cfg = FusionConfig::default();
    let size = 450;
    let frames: [Frame; EXPOSURES] =
        std::array::from_fn(|e| gray(size, |x, y| smooth_sky(size, x, y) * cfg.exposure_times_ms[e]));
    let set = ExposureSet::new(frames, cfg.exposure_times_ms, 0.0).unwrap();
    let plan = FusionPlan::new(&cfg, size).unwrap();
    let w = plan.alphas(&set).unwrap();
    for e in 1..EXPOSURES {
        let ratio = w.alphas[e] * cfg.exposure_times_ms[e];
        assert!((ratio - 1.0).abs() < 0.02, "alpha {e} = {}", w.alphas[e]);
    }
    let x = plan.blend(&set, &w).unwrap();
    for (outer, inner) in plan.rings() {
        let mean = |m: &Mask| m.iter_members().map(|p| x[p]).sum::<f64>() / m.count() as f64;
        let (a, b) = (mean(inner), mean(outer));
        assert!((a - b).abs() / a.max(b) <= 0.02, "{a} vs {b}");
    }
}

#[test]
fn defective_frame_in_each_group_leaves_nine() {
    let sky = VirtualSky::new(SkyParams::default(), 1.7e9, 1.7e9 + 3600.0);
    let t = 1_700_001_000;
    let mut groups = sky.visible_bursts(t, &EXPOSURE_TIMES_MS, REPEATS_PER_EXPOSURE);
    for (e, g) in groups.iter_mut().enumerate() {
        let junk = Frame::from_fn(g[0].width(), g[0].height(), 0.0, 8, |x, y| ((x * 31 + y * 17 + e) % 251) as f64).unwrap();
        let rgb: Vec<f64> = junk.data().iter().flat_map(|&v| [v, 255.0 - v, (v * 7.0) % 256.0]).collect();
        g[3 + e] = Frame::new(junk.width(), junk.height(), 3, rgb, t as f64, 8).unwrap();
    }
    let plan = FusionPlan::new(&FusionConfig::default(), 450).unwrap();
    let cap = process_visible_capture(&groups, t as f64, &FilterConfig::default(), &plan).unwrap();
    assert_eq!(cap.survivors, [9; EXPOSURES]);
}

#[test]
fn capture_errors_name_their_stage() {
    let plan = FusionPlan::new(&FusionConfig::default(), 450).unwrap();
    let err = process_visible_capture(&[], 0.0, &FilterConfig::default(), &plan).unwrap_err();
    assert!(matches!(err, CaptureError::GroupCount(0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scaling_inputs_scales_the_blend(s in 0.1f64..10.0, tilt in 0.0f64..0.2) {
        let cfg = FusionConfig { kernel_size: 5, radii_px: [8.0, 14.0, 20.0, 26.0], ..FusionConfig::default() };
        let size = 64;
        let frames: [Frame; EXPOSURES] = std::array::from_fn(|e| {
            gray(size, |x, y| (5.0 + tilt * x as f64 + 0.1 * y as f64) * (e + 1) as f64)
        });
        let scaled = frames.clone().map(|f| f.map(|v| v * s));
        let plan = FusionPlan::new(&cfg, size).unwrap();
        let a = ExposureSet::new(frames, cfg.exposure_times_ms, 0.0).unwrap();
        let b = ExposureSet::new(scaled, cfg.exposure_times_ms, 0.0).unwrap();
        let xa = plan.blend(&a, &plan.alphas(&a).unwrap()).unwrap();
        let xb = plan.blend(&b, &plan.alphas(&b).unwrap()).unwrap();
        for (u, v) in xa.iter().zip(&xb) {
            prop_assert!((u * s - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}

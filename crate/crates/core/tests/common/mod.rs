//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls into the code under test except for types.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Geometric Sun position after the NOAA solar calculator, which follows
/// Meeus' low-precision solar coordinates (about 0.01° over 1950 to 2050).
/// Returns (elevation, azimuth clockwise from North) in degrees, without
/// refraction.
pub fn noaa_sun(lat_deg: f64, lon_deg: f64, unix: f64) -> (f64, f64) {
    let jd = unix / 86_400.0 + 2_440_587.5;
    let jc = (jd - 2_451_545.0) / 36_525.0;
    let l0 = (280.46646 + jc * (36_000.76983 + jc * 0.000_303_2)).rem_euclid(360.0);
    let m = 357.52911 + jc * (35_999.05029 - 0.000_153_7 * jc);
    let e = 0.016_708_634 - jc * (0.000_042_037 + 0.000_000_126_7 * jc);
    let mr = m.to_radians();
    let c = mr.sin() * (1.914_602 - jc * (0.004_817 + 0.000_014 * jc))
        + (2.0 * mr).sin() * (0.019_993 - 0.000_101 * jc)
        + (3.0 * mr).sin() * 0.000_289;
    let true_long = l0 + c;
    let omega = (125.04 - 1_934.136 * jc).to_radians();
    let app_long = (true_long - 0.005_69 - 0.004_78 * omega.sin()).to_radians();
    let eps0 = 23.0 + (26.0 + (21.448 - jc * (46.815 + jc * (0.000_59 - jc * 0.001_813))) / 60.0) / 60.0;
    let eps = (eps0 + 0.002_56 * omega.cos()).to_radians();
    let decl = (eps.sin() * app_long.sin()).asin();
    let y = (eps / 2.0).tan().powi(2);
    let l0r = l0.to_radians();
    let eot_min = 4.0
        * (y * (2.0 * l0r).sin() - 2.0 * e * mr.sin() + 4.0 * e * y * mr.sin() * (2.0 * l0r).cos()
            - 0.5 * y * y * (4.0 * l0r).sin()
            - 1.25 * e * e * (2.0 * mr).sin())
        .to_degrees();
    let utc_min = unix.rem_euclid(86_400.0) / 60.0;
    let tst = (utc_min + eot_min + 4.0 * lon_deg).rem_euclid(1_440.0);
    let ha = if tst / 4.0 < 0.0 { tst / 4.0 + 180.0 } else { tst / 4.0 - 180.0 };
    let (lat, har) = (lat_deg.to_radians(), ha.to_radians());
    let cos_zen = (lat.sin() * decl.sin() + lat.cos() * decl.cos() * har.cos()).clamp(-1.0, 1.0);
    let zen = cos_zen.acos();
    let cos_az = ((lat.sin() * zen.cos() - decl.sin()) / (lat.cos() * zen.sin())).clamp(-1.0, 1.0);
    let a = cos_az.acos().to_degrees();
    let az = if ha > 0.0 { (a + 180.0).rem_euclid(360.0) } else { (540.0 - a).rem_euclid(360.0) };
    (90.0 - zen.to_degrees(), az)
}

/// Smallest absolute difference between two bearings, degrees.
pub fn bearing_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Textbook two-pass Pearson coefficient; `None` when either series is flat.
pub fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Coefficient with deviations taken from a given per-value reference
/// series (the ensemble mean image); `None` when either deviation is zero.
pub fn naive_pearson_about(a: &[f64], b: &[f64], reference: &[f64]) -> Option<f64> {
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for ((x, y), m) in a.iter().zip(b).zip(reference) {
        sab += (x - m) * (y - m);
        saa += (x - m) * (x - m);
        sbb += (y - m) * (y - m);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleOutcome {
    pub kept: Vec<usize>,
    pub duplicates: Vec<usize>,
    pub defective: Vec<usize>,
}

/// The filtering rule evaluated directly from its definition: every pairwise
/// coefficient recomputed from scratch, every survivor's mean recomputed on
/// each round. `None` where the rule is undefined: every frame flat with
/// per-frame centering, or some frame equal to the mean image with
/// ensemble centering.
pub fn brute_force_filter(
    frames: &[Vec<f64>],
    duplicate_tol: f64,
    threshold: f64,
    ensemble: bool,
) -> Option<OracleOutcome> {
    let n = frames.len();
    if n == 1 {
        return Some(OracleOutcome {
            kept: vec![0],
            duplicates: vec![],
            defective: vec![],
        });
    }
    let flat = |i: usize| !ensemble && frames[i].iter().all(|&v| v == frames[i][0]);
    let mut defective: Vec<usize> = (0..n).filter(|&i| flat(i)).collect();
    if defective.len() == n {
        return None;
    }
    let candidates: Vec<usize> = (0..n).filter(|&i| !flat(i)).collect();
    let len = frames[0].len();
    let mean_image: Vec<f64> = (0..len)
        .map(|p| candidates.iter().map(|&i| frames[i][p]).sum::<f64>() / candidates.len() as f64)
        .collect();
    let mut rho = vec![vec![1.0; n]; n];
    for &i in &candidates {
        for &j in &candidates {
            if i != j {
                rho[i][j] = if ensemble {
                    naive_pearson_about(&frames[i], &frames[j], &mean_image)?
                } else {
                    naive_pearson(&frames[i], &frames[j])?
                };
            }
        }
    }
    if ensemble && candidates.iter().any(|&i| frames[i] == mean_image) {
        return None;
    }
    if candidates.len() < 2 {
        return Some(OracleOutcome {
            kept: candidates,
            duplicates: vec![],
            defective,
        });
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut duplicates = Vec::new();
    for &j in &candidates {
        if kept.iter().any(|&i| rho[i][j] >= 1.0 - duplicate_tol) {
            duplicates.push(j);
        } else {
            kept.push(j);
        }
    }
    while kept.len() > 1 {
        let means: Vec<f64> = kept
            .iter()
            .map(|&i| {
                let others: Vec<f64> = kept.iter().filter(|&&j| j != i).map(|&j| rho[i][j]).collect();
                others.iter().sum::<f64>() / others.len() as f64
            })
            .collect();
        let worst = means.iter().cloned().fold(f64::INFINITY, f64::min);
        if worst >= threshold {
            break;
        }
        // Ties, up to rounding, go to the later frame.
        let pos = means.iter().rposition(|&m| m <= worst + 1e-12).unwrap();
        defective.push(kept.remove(pos));
    }
    defective.sort_unstable();
    Some(OracleOutcome {
        kept,
        duplicates,
        defective,
    })
}

/// Smallest margin between any decision quantity of the rule and its
/// threshold. Cases whose margin is at rounding level cannot be decided
/// identically by two correct evaluations of the same real-valued rule.
pub fn decision_margin(frames: &[Vec<f64>], duplicate_tol: f64, threshold: f64) -> f64 {
    let n = frames.len();
    let mut margin = f64::INFINITY;
    let varied: Vec<usize> = (0..n).filter(|&i| frames[i].iter().any(|&v| v != frames[i][0])).collect();
    for (a, &i) in varied.iter().enumerate() {
        for &j in &varied[a + 1..] {
            let r = naive_pearson(&frames[i], &frames[j]).unwrap();
            // Exact duplicates sit at exactly 1 and are unambiguous.
            if r < 1.0 {
                margin = margin.min((r - (1.0 - duplicate_tol)).abs());
            }
        }
    }
    // Means over every subset of at least two frames cover all rounds.
    for mask in 1u32..(1 << varied.len()) {
        let members: Vec<usize> = (0..varied.len()).filter(|b| mask >> b & 1 == 1).map(|b| varied[b]).collect();
        if members.len() < 2 {
            continue;
        }
        for &i in &members {
            let others: Vec<f64> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| naive_pearson(&frames[i], &frames[j]).unwrap())
                .collect();
            let m = others.iter().sum::<f64>() / others.len() as f64;
            margin = margin.min((m - threshold).abs());
        }
    }
    margin
}

/// Seeded stacks of 1 to 4 frames with 2 to 16 values each, mixing random
/// integers, exact and affine copies, flat frames, near-copies and inverted
/// frames so every branch of the rule is exercised.
pub fn pearson_corpus(seed: u64, cases: usize) -> Vec<Vec<Vec<f64>>> {
    let mut r = rng(seed);
    (0..cases)
        .map(|_| {
            let n = r.gen_range(1..=4);
            let len = r.gen_range(2..=16);
            let mut frames: Vec<Vec<f64>> = Vec::with_capacity(n);
            for _ in 0..n {
                let kind = r.gen_range(0..8);
                let f: Vec<f64> = match (kind, frames.last()) {
                    (1, Some(prev)) => prev.clone(),
                    (2, Some(prev)) => {
                        let (s, o) = (r.gen_range(1..4) as f64, r.gen_range(0..50) as f64);
                        prev.iter().map(|v| s * v + o).collect()
                    }
                    (3, _) => vec![r.gen_range(0..10) as f64; len],
                    (4, Some(prev)) => prev.iter().map(|v| (v + r.gen_range(-2..=2) as f64).max(0.0)).collect(),
                    (5, Some(prev)) => {
                        let top = prev.iter().fold(0.0, |m: f64, &v| m.max(v));
                        prev.iter().map(|v| top - v).collect()
                    }
                    (6, _) => (0..len).map(|i| (i * 7 % len) as f64 + r.gen_range(0..3) as f64).collect(),
                    _ => (0..len).map(|_| r.gen_range(0..20) as f64).collect(),
                };
                frames.push(f);
            }
            frames
        })
        .collect()
}

/// Radially smooth sky of relative gradient well below 1% per pixel,
/// centered on the image.
pub fn smooth_sky(size: usize, x: usize, y: usize) -> f64 {
    let c = size as f64 / 2.0;
    let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
    30.0 + 10.0 * (-(r / 150.0).powi(2)).exp()
}

pub const TRIAL_SIZE: usize = 24;
pub const TRIAL_SIGMA: f64 = 2.0;

/// Noiseless structured scene used by the denoiser trials.
pub fn trial_scene(x: usize, y: usize) -> f64 {
    100.0 + 40.0 * (0.3 * x as f64).sin() * (0.2 * y as f64).cos() + 0.5 * x as f64
}

/// One seeded burst: 8 noisy copies of the scene, an exact copy of one of
/// them and one frame of uniform noise, in shuffled order. Returns the
/// frames, the positions of the duplicated pair (earlier first) and the
/// position of the noise frame.
pub fn trial_burst(seed: u64) -> (Vec<Vec<f64>>, (usize, usize), usize) {
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let normal = Normal::new(0.0, TRIAL_SIGMA).unwrap();
    let len = TRIAL_SIZE * TRIAL_SIZE;
    let mut frames: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            (0..len)
                .map(|p| trial_scene(p % TRIAL_SIZE, p / TRIAL_SIZE) + normal.sample(&mut r))
                .collect()
        })
        .collect();
    let copied = r.gen_range(0..8);
    frames.push(frames[copied].clone());
    frames.push((0..len).map(|_| r.gen_range(0.0..200.0)).collect());
    let mut order: Vec<usize> = (0..10).collect();
    order.shuffle(&mut r);
    let pos = |k: usize| order.iter().position(|&o| o == k).unwrap();
    let (a, b) = (pos(copied), pos(8));
    let shuffled = order.iter().map(|&o| frames[o].clone()).collect();
    (shuffled, (a.min(b), a.max(b)), pos(9))
}

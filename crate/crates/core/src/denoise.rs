//! Burst denoising: drop re-read buffer frames and defective captures using
//! pairwise Pearson coefficients, then average what is left.

use std::sync::OnceLock;

use thiserror::Error;

use crate::frame::Frame;

/// `ρ ≥ 1 - DEFAULT_DUPLICATE_TOL` marks two frames as the same capture.
pub const DEFAULT_DUPLICATE_TOL: f64 = 1e-6;
/// A frame whose mean coefficient against the other survivors falls below
/// this is treated as defective.
pub const DEFAULT_DEFECT_THRESHOLD: f64 = 0.9;

const GRAM_CHUNK: usize = 2048;
/// Mean coefficients this close are treated as equal when picking the
/// frame to drop.
const TIE_TOL: f64 = 1e-12;
const MEAN_BLOCK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error("empty frame stack")]
    EmptyStack,
    #[error("frame {index} does not match the shape of frame 0")]
    ShapeMismatch { index: usize },
    #[error("at least two frames are required (got {0})")]
    TooFewFrames(usize),
    #[error("frame {index} has zero deviation; its Pearson coefficients are undefined")]
    DegenerateStack { index: usize },
}

pub type Result<T> = std::result::Result<T, StackError>;

/// What each frame's deviations are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Deviation of every pixel from the pixelwise mean image of the stack.
    EnsembleMean,
    /// Classical Pearson: deviation from the frame's own scalar mean.
    #[default]
    PerFrame,
}

impl std::str::FromStr for Centering {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ensemble" | "ensemble_mean" => Ok(Centering::EnsembleMean),
            "per_frame" | "per-frame" | "classical" => Ok(Centering::PerFrame),
            other => Err(format!("unknown centering '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub duplicate_tol: f64,
    pub defect_threshold: f64,
    pub centering: Centering,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            duplicate_tol: DEFAULT_DUPLICATE_TOL,
            defect_threshold: DEFAULT_DEFECT_THRESHOLD,
            centering: Centering::PerFrame,
        }
    }
}

/// A burst of same-shape frames. The pixelwise mean is computed on first use.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: Vec<Frame>,
    mean: OnceLock<Frame>,
}

impl PartialEq for FrameStack {
    fn eq(&self, other: &Self) -> bool {
        self.frames == other.frames
    }
}

impl FrameStack {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        check_shapes(&frames.iter().collect::<Vec<_>>())?;
        Ok(FrameStack {
            frames,
            mean: OnceLock::new(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn mean_frame(&self) -> &Frame {
        self.mean
            .get_or_init(|| mean_of(&self.frames.iter().collect::<Vec<_>>()))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

fn check_shapes(frames: &[&Frame]) -> Result<()> {
    let first = frames.first().ok_or(StackError::EmptyStack)?;
    match frames.iter().position(|f| !f.same_shape(first)) {
        Some(index) => Err(StackError::ShapeMismatch { index }),
        None => Ok(()),
    }
}

/// Pixelwise arithmetic mean. The timestamp is the mean of the inputs'.
pub fn ensemble_mean(frames: &[Frame]) -> Result<Frame> {
    let refs: Vec<&Frame> = frames.iter().collect();
    check_shapes(&refs)?;
    Ok(mean_of(&refs))
}

/// Mean of non-empty, same-shape frames, summed in frame order per value.
/// Works block by block so the partial sums stay in cache.
fn mean_of(frames: &[&Frame]) -> Frame {
    let first = frames[0];
    let n = frames.len() as f64;
    let mut sum = first.data().to_vec();
    for (b, block) in sum.chunks_mut(MEAN_BLOCK).enumerate() {
        let start = b * MEAN_BLOCK;
        for f in &frames[1..] {
            for (s, v) in block.iter_mut().zip(&f.data()[start..]) {
                *s += v;
            }
        }
    }
    finish_mean(sum, n, frames)
}

fn finish_mean(mut sum: Vec<f64>, n: f64, frames: &[&Frame]) -> Frame {
    for s in &mut sum {
        *s /= n;
    }
    let first = frames[0];
    let timestamp = frames.iter().map(|f| f.timestamp).sum::<f64>() / n;
    Frame::from_parts_unchecked(
        first.width(),
        first.height(),
        first.channels(),
        sum,
        timestamp,
        first.bit_depth,
    )
}

/// Symmetric N×N coefficient matrix with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonMatrix {
    n: usize,
    values: Vec<f64>,
}

impl PearsonMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Mean coefficient of `i` against every other member of `among`.
    pub fn mean_against(&self, i: usize, among: &[usize]) -> f64 {
        let others: Vec<f64> = among
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| self.get(i, j))
            .collect();
        if others.is_empty() {
            1.0
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        }
    }
}

/// Pairwise Pearson coefficients over all values (pixels and channels) of
/// each frame.
pub fn pearson_matrix(stack: &FrameStack, centering: Centering) -> Result<PearsonMatrix> {
    let refs: Vec<&Frame> = stack.frames().iter().collect();
    pearson_of(&refs, centering)
}

fn pearson_of(frames: &[&Frame], centering: Centering) -> Result<PearsonMatrix> {
    pearson_and_sum(frames, centering, false).map(|(m, _)| m)
}

/// Coefficients, plus the per-value sum of all frames when `want_sum` is set
/// and the centering allows it to be gathered in the same pass.
fn pearson_and_sum(
    frames: &[&Frame],
    centering: Centering,
    want_sum: bool,
) -> Result<(PearsonMatrix, Option<Vec<f64>>)> {
    let n = frames.len();
    if n < 2 {
        return Err(StackError::TooFewFrames(n));
    }
    if centering == Centering::PerFrame {
        if let Some(index) = frames.iter().position(|f| is_flat(f)) {
            return Err(StackError::DegenerateStack { index });
        }
    }
    let mut sum = (want_sum && centering == Centering::PerFrame).then(|| vec![0.0; frames[0].len()]);
    let gram = centered_gram(frames, centering, sum.as_deref_mut());
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let g = gram[i * n + i];
        if !(g > 0.0) {
            return Err(StackError::DegenerateStack { index: i });
        }
        norms.push(g.sqrt());
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let rho = (gram[i * n + j] / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = rho;
            values[j * n + i] = rho;
        }
    }
    Ok((PearsonMatrix { n, values }, sum))
}

/// Inner products of the centered frames in a single pass over the data.
///
/// Per-frame centering shifts each frame by a pilot estimate of its mean and
/// corrects with the shifted sums afterwards; the shift keeps cancellation
/// small. Values are processed chunk by chunk so they stay in cache. When
/// `sum_out` is given it receives the per-value sum of the frames, added in
/// frame order.
fn centered_gram(frames: &[&Frame], centering: Centering, mut sum_out: Option<&mut [f64]>) -> Vec<f64> {
    let n = frames.len();
    let len = frames[0].len();
    let mean_image = match centering {
        Centering::EnsembleMean => Some(mean_of(frames)),
        Centering::PerFrame => None,
    };
    // Integer shifts keep integer-valued frames integral after centering.
    let shifts: Vec<f64> = match centering {
        Centering::PerFrame => frames.iter().map(|f| pilot_mean(f.data()).round()).collect(),
        Centering::EnsembleMean => vec![0.0; n],
    };
    let mut gram = vec![0.0; n * n];
    let mut sums = vec![0.0; n];
    let mut buf = vec![0.0; n * GRAM_CHUNK];
    let mut small = vec![0i16; n * GRAM_CHUNK];
    let mut chunk_sums = vec![None; n];
    let shift_total: f64 = shifts.iter().sum();
    let mut start = 0;
    while start < len {
        let end = (start + GRAM_CHUNK).min(len);
        let width = end - start;
        // Small integer deviations take the exact 16-bit path. Every partial
        // sum of the float path is then an integer below 2^53 as well, so
        // both paths give the same bits.
        let mut exact = mean_image.is_none();
        if exact {
            for (i, f) in frames.iter().enumerate() {
                let row = &mut small[i * GRAM_CHUNK..i * GRAM_CHUNK + width];
                chunk_sums[i] = to_small(&f.data()[start..end], shifts[i], row);
                exact &= chunk_sums[i].is_some();
                if !exact {
                    break;
                }
            }
        }
        if let Some(total) = sum_out.as_deref_mut() {
            let total = &mut total[start..end];
            if exact {
                sum_small_rows(&small, n, width, shift_total, total);
            } else {
                total.copy_from_slice(&frames[0].data()[start..end]);
                for f in &frames[1..] {
                    for (t, v) in total.iter_mut().zip(&f.data()[start..end]) {
                        *t += v;
                    }
                }
            }
        }
        if exact {
            for i in 0..n {
                sums[i] += chunk_sums[i].unwrap_or_default();
                let a = &small[i * GRAM_CHUNK..i * GRAM_CHUNK + width];
                let mut j = i;
                while j < n {
                    let take = (n - j).min(4);
                    let mut bs = [a; 4];
                    for (q, b) in bs.iter_mut().enumerate().take(take) {
                        *b = &small[(j + q) * GRAM_CHUNK..(j + q) * GRAM_CHUNK + width];
                    }
                    let d = dot_small4(a, &bs);
                    for q in 0..take {
                        gram[i * n + j + q] += d[q] as f64;
                    }
                    j += take;
                }
            }
            start = end;
            continue;
        }
        for (i, f) in frames.iter().enumerate() {
            let row = &mut buf[i * GRAM_CHUNK..i * GRAM_CHUNK + width];
            let src = &f.data()[start..end];
            match &mean_image {
                None => {
                    let s = shifts[i];
                    for (r, v) in row.iter_mut().zip(src) {
                        *r = v - s;
                    }
                    sums[i] += lane_sum(row);
                }
                Some(m) => {
                    for ((r, v), m) in row.iter_mut().zip(src).zip(&m.data()[start..end]) {
                        *r = v - m;
                    }
                }
            }
        }
        for i in 0..n {
            let a = &buf[i * GRAM_CHUNK..i * GRAM_CHUNK + width];
            for j in i..n {
                let b = &buf[j * GRAM_CHUNK..j * GRAM_CHUNK + width];
                gram[i * n + j] += dot(a, b);
            }
        }
        start = end;
    }
    if mean_image.is_none() {
        for i in 0..n {
            for j in i..n {
                gram[i * n + j] -= sums[i] * sums[j] / len as f64;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i * n + j] = gram[j * n + i];
        }
    }
    gram
}

/// Mean of an evenly strided sample of at most 1024 values.
fn pilot_mean(data: &[f64]) -> f64 {
    let stride = (data.len() / 1024).max(1);
    let (sum, count) = data
        .iter()
        .step_by(stride)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

const LANES: usize = 16;
/// Largest deviation of the 16-bit path. Keeps a chunk's lane sums of
/// pairwise products far inside `i32`.
const SMALL_LIMIT: u32 = 2047;

/// Store `v - shift` as `i16`. Returns the sum of the deviations when every
/// one is an integer within `SMALL_LIMIT`, which also makes that sum exact.
fn to_small(src: &[f64], shift: f64, out: &mut [i16]) -> Option<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { to_small_avx2(src, shift, out) };
        }
    }
    to_small_portable(src, shift, out)
}

fn to_small_portable(src: &[f64], shift: f64, out: &mut [i16]) -> Option<f64> {
    let mut ok = true;
    let mut sum = 0i64;
    for (o, v) in out.iter_mut().zip(src) {
        let d = v - shift;
        let r = d as i32;
        ok &= (r as f64 == d) & (r.unsigned_abs() <= SMALL_LIMIT);
        *o = r as i16;
        sum += r as i64;
    }
    ok.then_some(sum as f64)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn to_small_avx2(src: &[f64], shift: f64, out: &mut [i16]) -> Option<f64> {
    use std::arch::x86_64::*;
    let n = src.len().min(out.len());
    let full = n / 4 * 4;
    let sh = _mm256_set1_pd(shift);
    let lim = _mm256_set1_pd(SMALL_LIMIT as f64);
    let neg_lim = _mm256_set1_pd(-(SMALL_LIMIT as f64));
    let mut bad = 0;
    let mut acc = _mm256_setzero_pd();
    let (ps, po) = (src.as_ptr(), out.as_mut_ptr());
    let mut k = 0;
    while k < full {
        // SAFETY: k + 3 < full <= n, inside both slices.
        let d = _mm256_sub_pd(_mm256_loadu_pd(ps.add(k)), sh);
        let r = _mm256_cvttpd_epi32(d);
        let integral = _mm256_cmp_pd::<_CMP_EQ_OQ>(_mm256_cvtepi32_pd(r), d);
        let below = _mm256_cmp_pd::<_CMP_LE_OQ>(d, lim);
        let above = _mm256_cmp_pd::<_CMP_GE_OQ>(d, neg_lim);
        bad |= _mm256_movemask_pd(_mm256_and_pd(integral, _mm256_and_pd(below, above))) ^ 0xF;
        _mm_storel_epi64(po.add(k) as *mut __m128i, _mm_packs_epi32(r, r));
        acc = _mm256_add_pd(acc, d);
        k += 4;
    }
    let tail = to_small_portable(&src[full..n], shift, &mut out[full..n]);
    let mut lanes = [0.0; 4];
    _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
    // Integers of bounded size: every ordering of this sum is exact.
    (bad == 0).then_some(())?;
    tail.map(|t| lanes.iter().sum::<f64>() + t)
}

/// Per-value sum of the first `n` rows of `small`, plus `shift_total`.
/// Exact, so it equals summing the original values in any order.
fn sum_small_rows(small: &[i16], n: usize, width: usize, shift_total: f64, total: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { sum_small_rows_avx2(small, n, width, shift_total, total) };
        }
    }
    sum_small_rows_portable(small, n, width, shift_total, total, 0);
}

fn sum_small_rows_portable(small: &[i16], n: usize, width: usize, shift_total: f64, total: &mut [f64], from: usize) {
    for (p, t) in total.iter_mut().enumerate().take(width).skip(from) {
        let s: i32 = (0..n).map(|i| small[i * GRAM_CHUNK + p] as i32).sum();
        *t = s as f64 + shift_total;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sum_small_rows_avx2(small: &[i16], n: usize, width: usize, shift_total: f64, total: &mut [f64]) {
    use std::arch::x86_64::*;
    assert!(n * GRAM_CHUNK <= small.len() && width <= total.len() && width <= GRAM_CHUNK);
    let full = width / 8 * 8;
    let st = _mm256_set1_pd(shift_total);
    let (ps, pt) = (small.as_ptr(), total.as_mut_ptr());
    let mut p = 0;
    while p < full {
        let mut acc = _mm256_setzero_si256();
        for i in 0..n {
            // SAFETY: p + 7 < width <= GRAM_CHUNK, so row i stays in bounds.
            let v = _mm_loadu_si128(ps.add(i * GRAM_CHUNK + p) as *const __m128i);
            acc = _mm256_add_epi32(acc, _mm256_cvtepi16_epi32(v));
        }
        let lo = _mm256_cvtepi32_pd(_mm256_castsi256_si128(acc));
        let hi = _mm256_cvtepi32_pd(_mm256_extracti128_si256::<1>(acc));
        _mm256_storeu_pd(pt.add(p), _mm256_add_pd(lo, st));
        _mm256_storeu_pd(pt.add(p + 4), _mm256_add_pd(hi, st));
        p += 8;
    }
    sum_small_rows_portable(small, n, width, shift_total, total, full);
}

/// Dot products of `a` with each of `bs`, sharing the loads of `a`.
fn dot_small4(a: &[i16], bs: &[&[i16]; 4]) -> [i64; 4] {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { dot_small4_avx2(a, bs) };
        }
    }
    bs.map(|b| dot_small_portable(a, b))
}

fn dot_small_portable(a: &[i16], b: &[i16]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_small4_avx2(a: &[i16], bs: &[&[i16]; 4]) -> [i64; 4] {
    use std::arch::x86_64::*;
    let n = bs.iter().fold(a.len(), |m, b| m.min(b.len()));
    let full = n / 16 * 16;
    let mut acc = [_mm256_setzero_si256(); 4];
    let pa = a.as_ptr();
    let pb = bs.map(|b| b.as_ptr());
    let mut k = 0;
    while k < full {
        // SAFETY: k + 15 < full <= n, inside every slice.
        let x = _mm256_loadu_si256(pa.add(k) as *const __m256i);
        for q in 0..4 {
            let y = _mm256_loadu_si256(pb[q].add(k) as *const __m256i);
            acc[q] = _mm256_add_epi32(acc[q], _mm256_madd_epi16(x, y));
        }
        k += 16;
    }
    let mut out = [0i64; 4];
    for q in 0..4 {
        let mut lanes = [0i32; 8];
        _mm256_storeu_si256(lanes.as_mut_ptr() as *mut __m256i, acc[q]);
        out[q] = lanes.iter().map(|&v| v as i64).sum::<i64>() + dot_small_portable(&a[full..n], &bs[q][full..n]);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the CPU supports AVX, checked just above.
            return unsafe { dot_avx(a, b) };
        }
    }
    dot_portable(a, b)
}

/// Adds the 16 lane accumulators in a fixed tree, then the tail.
fn reduce_lanes(acc: &[f64; LANES], tail: f64) -> f64 {
    let mut quads = [0.0; 4];
    for (q, c) in quads.iter_mut().zip(acc.chunks_exact(4)) {
        *q = (c[0] + c[1]) + (c[2] + c[3]);
    }
    ((quads[0] + quads[1]) + (quads[2] + quads[3])) + tail
}

/// The same lane layout as [`dot_portable`] with 256-bit registers. No fused
/// multiply-add, so both versions round identically.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_avx(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let (mut v0, mut v1, mut v2, mut v3) = (
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
    );
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut k = 0;
    while k < full {
        // SAFETY: k + 15 < full <= n, inside both slices.
        v0 = _mm256_add_pd(v0, _mm256_mul_pd(_mm256_loadu_pd(pa.add(k)), _mm256_loadu_pd(pb.add(k))));
        v1 = _mm256_add_pd(v1, _mm256_mul_pd(_mm256_loadu_pd(pa.add(k + 4)), _mm256_loadu_pd(pb.add(k + 4))));
        v2 = _mm256_add_pd(v2, _mm256_mul_pd(_mm256_loadu_pd(pa.add(k + 8)), _mm256_loadu_pd(pb.add(k + 8))));
        v3 = _mm256_add_pd(v3, _mm256_mul_pd(_mm256_loadu_pd(pa.add(k + 12)), _mm256_loadu_pd(pb.add(k + 12))));
        k += LANES;
    }
    let mut acc = [0.0; LANES];
    _mm256_storeu_pd(acc.as_mut_ptr(), v0);
    _mm256_storeu_pd(acc.as_mut_ptr().add(4), v1);
    _mm256_storeu_pd(acc.as_mut_ptr().add(8), v2);
    _mm256_storeu_pd(acc.as_mut_ptr().add(12), v3);
    let mut tail = 0.0;
    for i in full..n {
        tail += a[i] * b[i];
    }
    reduce_lanes(&acc, tail)
}

fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce_lanes(&acc, tail)
}

/// Sum with eight independent lanes, avoiding one long dependency chain.
fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        let x: &[f64; 8] = x.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for x in rest {
        total += x;
    }
    total
}

/// Result of [`filter_stack`]. Indices refer to the input stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub stack: FrameStack,
    pub kept: Vec<usize>,
    pub duplicates: Vec<usize>,
    pub defective: Vec<usize>,
}

/// Discard duplicate frames, then defective ones.
///
/// Duplicates: a frame whose coefficient with an earlier kept frame is at
/// least `1 - duplicate_tol` is dropped. Defects: while the survivor with the
/// lowest mean coefficient against the other survivors is below
/// `defect_threshold`, it is dropped (ties go to the later index). At least
/// one frame always survives.
///
/// With per-frame centering a flat frame has no defined coefficient; such
/// frames are classified as defective up front.
pub fn filter_stack(stack: &FrameStack, config: &FilterConfig) -> Result<FilterOutcome> {
    let refs: Vec<&Frame> = stack.frames().iter().collect();
    let c = classify(&refs, config)?;
    let frames = c.kept.iter().map(|&i| stack.frames()[i].clone()).collect();
    Ok(FilterOutcome {
        stack: FrameStack::new(frames)?,
        kept: c.kept,
        duplicates: c.duplicates,
        defective: c.defective,
    })
}

struct Classified {
    kept: Vec<usize>,
    duplicates: Vec<usize>,
    defective: Vec<usize>,
    /// Per-value sum over every input frame, when it came for free.
    sum_all: Option<Vec<f64>>,
}

fn classify(frames: &[&Frame], config: &FilterConfig) -> Result<Classified> {
    let n = frames.len();
    if n < 2 {
        return Err(StackError::TooFewFrames(n));
    }
    let mut defective = Vec::new();
    let mut candidates: Vec<usize> = (0..n).collect();
    if config.centering == Centering::PerFrame {
        let (flat, varied): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_flat(frames[i]));
        if varied.is_empty() {
            return Err(StackError::DegenerateStack { index: 0 });
        }
        defective.extend(flat);
        candidates = varied;
    }

    let mut sum_all = None;
    let rho = if candidates.len() == n {
        let (m, s) = pearson_and_sum(frames, config.centering, true)?;
        sum_all = s;
        Some(m)
    } else if candidates.len() >= 2 {
        let sub: Vec<&Frame> = candidates.iter().map(|&i| frames[i]).collect();
        Some(expand(&pearson_of(&sub, config.centering)?, &candidates, n))
    } else {
        None
    };

    let mut kept: Vec<usize> = Vec::new();
    let mut duplicates = Vec::new();
    match &rho {
        Some(rho) => {
            for &j in &candidates {
                if kept.iter().any(|&i| rho.get(i, j) >= 1.0 - config.duplicate_tol) {
                    duplicates.push(j);
                } else {
                    kept.push(j);
                }
            }
            while kept.len() > 1 {
                let means: Vec<f64> = kept.iter().map(|&i| rho.mean_against(i, &kept)).collect();
                let worst = means.iter().copied().fold(f64::INFINITY, f64::min);
                if worst >= config.defect_threshold {
                    break;
                }
                // Means equal up to rounding count as tied; the later frame goes.
                let pos = means.iter().rposition(|&m| m <= worst + TIE_TOL).unwrap_or(0);
                defective.push(kept.remove(pos));
            }
        }
        None => kept = candidates,
    }
    defective.sort_unstable();
    Ok(Classified {
        kept,
        duplicates,
        defective,
        sum_all,
    })
}

fn is_flat(frame: &Frame) -> bool {
    let first = frame.data()[0];
    frame.data().iter().all(|&v| v == first)
}

/// Lift a matrix over `members` into an N×N matrix indexed by the original
/// positions. Entries involving non-members are NaN and never read.
fn expand(sub: &PearsonMatrix, members: &[usize], n: usize) -> PearsonMatrix {
    let mut values = vec![f64::NAN; n * n];
    for (a, &i) in members.iter().enumerate() {
        for (b, &j) in members.iter().enumerate() {
            values[i * n + j] = sub.get(a, b);
        }
    }
    PearsonMatrix { n, values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub frame: Frame,
    pub kept: Vec<usize>,
    pub duplicates: Vec<usize>,
    pub defective: Vec<usize>,
}

/// Filter then average a burst. The result carries the earliest input
/// timestamp, the capture instant of the burst.
pub fn denoise(frames: &[Frame], config: &FilterConfig) -> Result<Denoised> {
    let refs: Vec<&Frame> = frames.iter().collect();
    check_shapes(&refs)?;
    let earliest = frames
        .iter()
        .map(|f| f.timestamp)
        .fold(f64::INFINITY, f64::min);
    if frames.len() == 1 {
        return Ok(Denoised {
            frame: frames[0].clone(),
            kept: vec![0],
            duplicates: Vec::new(),
            defective: Vec::new(),
        });
    }
    let c = classify(&refs, config)?;
    let survivors: Vec<&Frame> = c.kept.iter().map(|&i| &frames[i]).collect();
    let mut frame = match c.sum_all {
        Some(sum) if survivors.len() == frames.len() => finish_mean(sum, frames.len() as f64, &survivors),
        _ => mean_of(&survivors),
    };
    frame.timestamp = earliest;
    Ok(Denoised {
        frame,
        kept: c.kept,
        duplicates: c.duplicates,
        defective: c.defective,
    })
}

//! Coarse, decorrelation-tolerant initial displacement.
//!
//! A multi-level block matcher. The post frame is first companded by the
//! global axial stretch that best matches the whole frame, so blocks stay
//! correlated at large strain. Level 0 matches raw RF; coarser levels match
//! the complex baseband decimated axially by 2 per level. Blocks are matched
//! by normalized cross-correlation around the previous level's estimate, the
//! peak is refined by a 3-point parabola per axis, weak or edge-truncated
//! matches are replaced by the median of valid neighbours and the block grid
//! is median filtered. The finest grid is interpolated bilinearly to every
//! sample. Externally computed flow (e.g. from a CNN) can be imported instead
//! with [`import_external_flow`].

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rf::io::{load_field, Format, FormatError};
use crate::rf::{resample_field, DisplacementField, RfFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoarseError {
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("frame {frame:?} smaller than block plus twice the search range {needed:?}")]
    FrameTooSmall {
        frame: (usize, usize),
        needed: (usize, usize),
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseParams {
    /// Pyramid depth; level `k` is decimated axially by `2^k`.
    pub levels: usize,
    /// Block size (axial samples, lateral lines), in level units.
    pub block: (usize, usize),
    /// Search half-range (axial samples, lateral lines) at the coarsest
    /// level, in level units.
    pub search: (usize, usize),
    /// Search half-range at every finer level, around the upsampled
    /// estimate; capped by `search`.
    pub refine_search: (usize, usize),
    /// Blocks whose peak NCC falls below this are treated as invalid.
    pub min_correlation: f64,
    /// Odd side of the median filter applied to each block grid.
    pub median_window: usize,
    /// Largest global axial stretch searched for before block matching; the
    /// post frame is companded by the best one so blocks stay correlated
    /// under large strain. Zero disables the search.
    pub max_stretch: f64,
}

impl Default for CoarseParams {
    fn default() -> Self {
        Self {
            levels: 3,
            block: (64, 8),
            search: (16, 4),
            refine_search: (2, 1),
            min_correlation: 0.5,
            median_window: 5,
            max_stretch: 0.08,
        }
    }
}

impl CoarseParams {
    pub fn validate(&self) -> Result<(), CoarseError> {
        let bad = |msg: String| Err(CoarseError::InvalidParams(msg));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.block.0 < 3 || self.block.1 < 3 {
            return bad(format!("block {:?} must be at least 3x3", self.block));
        }
        if self.search.0 < 1 || self.search.1 < 1 {
            return bad(format!("search {:?} must be at least 1", self.search));
        }
        if self.refine_search.0 < 1 || self.refine_search.1 < 1 {
            return bad(format!("refine_search {:?} must be at least 1", self.refine_search));
        }
        if !(0.0..1.0).contains(&self.min_correlation) {
            return bad(format!("min_correlation {} outside [0, 1)", self.min_correlation));
        }
        if !(0.0..0.5).contains(&self.max_stretch) {
            return bad(format!("max_stretch {} outside [0, 0.5)", self.max_stretch));
        }
        if self.median_window % 2 == 0 {
            return bad(format!("median window {} must be odd", self.median_window));
        }
        Ok(())
    }

    fn window(&self, level: usize, coarsest: usize) -> (usize, usize) {
        if level == coarsest {
            self.search
        } else {
            (
                self.refine_search.0.min(self.search.0),
                self.refine_search.1.min(self.search.1),
            )
        }
    }

    /// Largest axial displacement the pyramid itself can report, in samples,
    /// on top of any global stretch.
    pub fn axial_reach(&self) -> f64 {
        (0..self.levels).map(|k| (self.window(k, self.levels - 1).0 << k) as f64).sum()
    }

    /// Largest lateral displacement a pyramid of `levels` can report, in
    /// lines.
    pub fn lateral_reach(&self) -> f64 {
        (0..self.levels).map(|k| self.window(k, self.levels - 1).1 as f64).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("median window {0} must be odd and at least 1")]
pub struct EvenWindow(pub usize);

/// Median of the `window x window` neighbourhood of every entry, with edge
/// replication. For an even count the lower middle element is taken so the
/// output is always one of the inputs.
pub fn median_filter(img: &Array2<f64>, window: usize) -> Result<Array2<f64>, EvenWindow> {
    if window == 0 || window % 2 == 0 {
        return Err(EvenWindow(window));
    }
    Ok(median_with(img, window, true))
}

/// Median over the neighbourhood, replicating edges or, with `replicate`
/// off, over the entries that fall inside the grid only. Block grids use
/// the latter: a replicated edge column counts three times in a 5-wide
/// window and outvotes its neighbours.
fn median_with(img: &Array2<f64>, window: usize, replicate: bool) -> Array2<f64> {
    let (m, n) = img.dim();
    let h = (window / 2) as isize;
    let mut buf = Vec::with_capacity(window * window);
    Array2::from_shape_fn((m, n), |(i, j)| {
        buf.clear();
        for di in -h..=h {
            for dj in -h..=h {
                let (r, c) = (i as isize + di, j as isize + dj);
                let inside = r >= 0 && c >= 0 && r < m as isize && c < n as isize;
                if inside || replicate {
                    buf.push(img[[r.clamp(0, m as isize - 1) as usize, c.clamp(0, n as isize - 1) as usize]]);
                }
            }
        }
        let mid = (buf.len() - 1) / 2;
        *buf.select_nth_unstable_by(mid, f64::total_cmp).1
    })
}

/// Componentwise median filter of a displacement field.
pub fn median_filter_field(field: &DisplacementField, window: usize) -> Result<DisplacementField, EvenWindow> {
    let a = median_filter(field.axial(), window)?;
    let l = median_filter(field.lateral(), window)?;
    Ok(DisplacementField::new(a, l).expect("median of finite values is finite"))
}

/// Normalized cross-correlation of two equally sized windows; zero when
/// either has no variance.
pub fn ncc(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let count = a.len() as f64;
    let ma = a.sum() / count;
    let mb = b.sum() / count;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Centred moving average of odd-ish length `len` along each line.
fn box_filter(img: &Array2<f64>, len: usize) -> Array2<f64> {
    let (m, n) = img.dim();
    let h = len / 2;
    let mut out = Array2::zeros((m, n));
    let mut prefix = vec![0.0; m + 1];
    for j in 0..n {
        for i in 0..m {
            prefix[i + 1] = prefix[i] + img[[i, j]];
        }
        for i in 0..m {
            let (lo, hi) = (i.saturating_sub(h), (i + h + 1).min(m));
            out[[i, j]] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    out
}

/// Complex baseband of an RF frame: mixed down by `cycles` per sample and
/// low-passed by two passes of a one-period moving average.
fn demodulate(img: &Array2<f64>, cycles: f64, period: usize) -> (Array2<f64>, Array2<f64>) {
    let phase = |i: usize| 2.0 * std::f64::consts::PI * cycles * i as f64;
    let re = Array2::from_shape_fn(img.dim(), |(i, j)| img[[i, j]] * phase(i).cos());
    let im = Array2::from_shape_fn(img.dim(), |(i, j)| -img[[i, j]] * phase(i).sin());
    let lp = |x: &Array2<f64>| box_filter(&box_filter(x, period), period);
    (lp(&re), lp(&im))
}

/// One image of a pyramid level: raw RF, or complex baseband whose matches
/// are scored by the magnitude of the complex NCC, which has no carrier
/// ambiguity and keeps the RF's tolerance to noise.
#[derive(Debug, Clone)]
enum Plane {
    Real(Array2<f64>),
    Complex(Array2<f64>, Array2<f64>),
}

impl Plane {
    fn dim(&self) -> (usize, usize) {
        match self {
            Plane::Real(a) | Plane::Complex(a, _) => a.dim(),
        }
    }

    fn decimate(&self) -> Plane {
        match self {
            Plane::Real(a) => Plane::Real(decimate_axial(a)),
            Plane::Complex(re, im) => Plane::Complex(decimate_axial(re), decimate_axial(im)),
        }
    }

    fn magnitude(&self) -> Array2<f64> {
        match self {
            Plane::Real(a) => a.mapv(f64::abs),
            Plane::Complex(re, im) => Array2::from_shape_fn(re.dim(), |ix| re[ix].hypot(im[ix])),
        }
    }
}

/// Magnitude of the normalized complex cross-correlation; zero when either
/// window has no variance.
fn complex_ncc(ar: ArrayView2<f64>, ai: ArrayView2<f64>, br: ArrayView2<f64>, bi: ArrayView2<f64>) -> f64 {
    let count = ar.len() as f64;
    let (mar, mai, mbr, mbi) = (ar.sum() / count, ai.sum() / count, br.sum() / count, bi.sum() / count);
    let (mut cr, mut ci, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0);
    for (((xr, xi), yr), yi) in ar.iter().zip(ai.iter()).zip(br.iter()).zip(bi.iter()) {
        let (xr, xi, yr, yi) = (xr - mar, xi - mai, yr - mbr, yi - mbi);
        cr += xr * yr + xi * yi;
        ci += xi * yr - xr * yi;
        saa += xr * xr + xi * xi;
        sbb += yr * yr + yi * yi;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (cr.hypot(ci) / (saa * sbb).sqrt()).min(1.0)
}

fn window_at(x: &Array2<f64>, (r, c): (usize, usize), (bh, bw): (usize, usize)) -> ArrayView2<'_, f64> {
    x.slice(s![r..r + bh, c..c + bw])
}

fn block_ncc(pre: &Plane, post: &Plane, at: (usize, usize), to: (usize, usize), block: (usize, usize)) -> f64 {
    let win = |x, p| window_at(x, p, block);
    match (pre, post) {
        (Plane::Real(a), Plane::Real(b)) => ncc(win(a, at), win(b, to)),
        (Plane::Complex(ar, ai), Plane::Complex(br, bi)) => complex_ncc(win(ar, at), win(ai, at), win(br, to), win(bi, to)),
        _ => unreachable!("pyramid levels pair like planes"),
    }
}

/// Halves the axial resolution by averaging sample pairs.
fn decimate_axial(img: &Array2<f64>) -> Array2<f64> {
    let (m, n) = img.dim();
    Array2::from_shape_fn((m / 2, n), |(i, j)| 0.5 * (img[[2 * i, j]] + img[[2 * i + 1, j]]))
}

/// Vertex offset of the parabola through `(−1, lo)`, `(0, mid)`, `(1, hi)`.
fn parabolic_offset(lo: f64, mid: f64, hi: f64) -> f64 {
    let denom = lo - 2.0 * mid + hi;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
}

/// Sub-lag offset and interpolated height of an axial correlation peak.
/// Raw RF correlation oscillates at the carrier, so it is fitted with a
/// cosine; baseband magnitudes with a parabola.
fn axial_peak(lo: f64, mid: f64, hi: f64, carrier: bool) -> (f64, f64) {
    if carrier && mid > 0.0 {
        let c = (lo + hi) / (2.0 * mid);
        if c > -1.0 && c < 1.0 {
            let w = c.acos();
            let off = ((hi - lo) / (2.0 * mid * w.sin())).atan() / w;
            if off.abs() <= 0.5 {
                return (off, mid / (w * off).cos());
            }
        }
    }
    let off = parabolic_offset(lo, mid, hi);
    (off, mid - 0.25 * (lo - hi) * off)
}

/// Regular grid of block positions along one axis.
#[derive(Debug, Clone)]
struct Axis {
    starts: Vec<usize>,
    len: usize,
}

impl Axis {
    fn new(extent: usize, block: usize) -> Self {
        let step = (block / 2).max(1);
        let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|s| s + block <= extent).collect();
        if let Some(&last) = starts.last() {
            if last + block < extent {
                starts.push(extent - block);
            }
        }
        Self { starts, len: block }
    }

    /// Block centre at this level, in level samples.
    fn centre(&self, k: usize) -> f64 {
        self.starts[k] as f64 + 0.5 * (self.len - 1) as f64
    }
}

/// Values on an irregular-but-sorted grid of centres, bilinearly
/// interpolated (clamped outside the hull).
struct GridField {
    rows: Vec<f64>,
    cols: Vec<f64>,
    axial: Array2<f64>,
    lateral: Array2<f64>,
}

fn bracket(centres: &[f64], t: f64) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if t <= centres[0] {
        return (0, 0, 0.0);
    }
    if t >= centres[last] {
        return (last, last, 0.0);
    }
    let hi = centres.partition_point(|c| *c <= t).min(last);
    let lo = hi - 1;
    (lo, hi, (t - centres[lo]) / (centres[hi] - centres[lo]))
}

impl GridField {
    fn at(&self, row: f64, col: f64) -> (f64, f64) {
        let (r0, r1, fr) = bracket(&self.rows, row);
        let (c0, c1, fc) = bracket(&self.cols, col);
        let lerp = |g: &Array2<f64>| {
            let top = g[[r0, c0]] * (1.0 - fc) + g[[r0, c1]] * fc;
            let bottom = g[[r1, c0]] * (1.0 - fc) + g[[r1, c1]] * fc;
            top * (1.0 - fr) + bottom * fr
        };
        (lerp(&self.axial), lerp(&self.lateral))
    }
}

struct BlockMatch {
    axial: f64,
    lateral: f64,
    peak: f64,
    /// The peak sits on a side of the search range cut short by the frame
    /// edge, so the true match may lie outside it.
    truncated: bool,
}

#[allow(clippy::too_many_arguments)]
fn match_block(
    pre: &Plane,
    post: &Plane,
    r0: usize,
    c0: usize,
    block: (usize, usize),
    predicted: (isize, isize),
    search: (usize, usize),
) -> Option<BlockMatch> {
    let (m, n) = post.dim();
    let (bh, bw) = block;
    let (sa, sl) = (search.0 as isize, search.1 as isize);
    let lo_a = (predicted.0 - sa).max(-(r0 as isize));
    let hi_a = (predicted.0 + sa).min((m - bh - r0) as isize);
    let lo_l = (predicted.1 - sl).max(-(c0 as isize));
    let hi_l = (predicted.1 + sl).min((n - bw - c0) as isize);
    if lo_a > hi_a || lo_l > hi_l {
        return None;
    }
    let width = (hi_l - lo_l + 1) as usize;
    let height = (hi_a - lo_a + 1) as usize;
    let mut scores = vec![0.0; height * width];
    for da in lo_a..=hi_a {
        for dl in lo_l..=hi_l {
            let (pr, pc) = ((r0 as isize + da) as usize, (c0 as isize + dl) as usize);
            scores[(da - lo_a) as usize * width + (dl - lo_l) as usize] =
                block_ncc(pre, post, (r0, c0), (pr, pc), block);
        }
    }
    let at = |a: isize, l: isize| scores[(a - lo_a) as usize * width + (l - lo_l) as usize];
    // Each lateral lag is scored by its axial peak interpolated between
    // integer lags. Speckle correlation ridges are tilted, so at a fractional
    // axial shift the best integer-lattice point can sit on the wrong line.
    // Ties go to the smaller lag magnitude, then the smaller lag.
    let lag_order = |x: isize, y: isize| (x.abs(), x) < (y.abs(), y);
    let mut ridge = Vec::with_capacity(width);
    for dl in lo_l..=hi_l {
        let mut best = lo_a;
        for da in lo_a..=hi_a {
            let (v, bv) = (at(da, dl), at(best, dl));
            if v > bv || (v == bv && lag_order(da, best)) {
                best = da;
            }
        }
        let peak = at(best, dl);
        let (sub, top) = if best > lo_a && best < hi_a && peak < 1.0 - 1e-12 {
            let (lo, hi) = (at(best - 1, dl), at(best + 1, dl));
            axial_peak(lo, peak, hi, matches!(post, Plane::Real(_)))
        } else {
            (0.0, peak)
        };
        ridge.push((best, sub, top, peak));
    }
    let mut k = 0;
    for j in 1..width {
        let l = lo_l + j as isize;
        if ridge[j].2 > ridge[k].2 || (ridge[j].2 == ridge[k].2 && lag_order(l, lo_l + k as isize)) {
            k = j;
        }
    }
    let (da, sub_a, top, peak) = ridge[k];
    let dl = lo_l + k as isize;
    // A perfect match is exact; a parabola would only add the asymmetry of
    // the neighbouring windows.
    let exact = peak >= 1.0 - 1e-12;
    let truncated = (da == lo_a && lo_a > predicted.0 - sa)
        || (da == hi_a && hi_a < predicted.0 + sa)
        || (dl == lo_l && lo_l > predicted.1 - sl)
        || (dl == hi_l && hi_l < predicted.1 + sl);
    let sub_l = if exact || k == 0 || k + 1 == width {
        0.0
    } else {
        parabolic_offset(ridge[k - 1].2, top, ridge[k + 1].2)
    };
    let sub_a = if exact { 0.0 } else { sub_a };
    Some(BlockMatch {
        axial: da as f64 + sub_a,
        lateral: dl as f64 + sub_l,
        peak,
        truncated,
    })
}

/// Replaces invalid entries with the median of their valid 8-neighbours, or
/// with `fallback` when none is valid. Reads only the original validity so
/// the result does not depend on visiting order.
fn fill_invalid(values: &Array2<f64>, valid: &Array2<bool>, fallback: &Array2<f64>) -> Array2<f64> {
    let (m, n) = values.dim();
    let mut found = Vec::with_capacity(8);
    Array2::from_shape_fn((m, n), |(i, j)| {
        if valid[[i, j]] {
            return values[[i, j]];
        }
        found.clear();
        for r in i.saturating_sub(1)..=(i + 1).min(m - 1) {
            for c in j.saturating_sub(1)..=(j + 1).min(n - 1) {
                if valid[[r, c]] {
                    found.push(values[[r, c]]);
                }
            }
        }
        if found.is_empty() {
            return fallback[[i, j]];
        }
        let mid = (found.len() - 1) / 2;
        *found.select_nth_unstable_by(mid, f64::total_cmp).1
    })
}

/// Coarse displacement of `post` relative to `pre` (axial samples, lateral
/// lines).
pub fn estimate_coarse(pre: &RfFrame, post: &RfFrame, params: &CoarseParams) -> Result<DisplacementField, CoarseError> {
    params.validate()?;
    if pre.dim() != post.dim() {
        return Err(CoarseError::DimensionMismatch(pre.dim(), post.dim()));
    }
    let (m, n) = pre.dim();
    let needed = (
        params.block.0 + 2 * params.search.0,
        params.block.1 + 2 * params.search.1,
    );
    if m < needed.0 || n < needed.1 {
        return Err(CoarseError::FrameTooSmall { frame: (m, n), needed });
    }
    let acq = pre.acquisition();
    let cycles = acq.center_frequency / acq.sampling_rate;
    let carrier = (cycles, (1.0 / cycles).round().max(2.0) as usize);

    let pyramid = build_pyramid(pre.samples(), post.samples(), params.levels, carrier, needed.0);
    let stretch = if params.max_stretch > 0.0 {
        let (epre, epost) = coarsest_envelopes(&pyramid, carrier);
        global_stretch(&epre, &epost, params.search, params.max_stretch)
    } else {
        0.0
    };
    if stretch == 0.0 {
        return Ok(match_pyramid(&pyramid, params));
    }
    log::debug!("companding post frame by a global stretch of {stretch:.5}");
    let warped = warp_axial(post.samples(), stretch);
    let pyramid = build_pyramid(pre.samples(), &warped, params.levels, carrier, needed.0);
    let (axial, lateral) = match_pyramid(&pyramid, params).into_parts();
    // `warped(i) = post((1 - s) i)`, so a residual `d` maps to `(1 - s)(i + d) - i`.
    let axial = Array2::from_shape_fn((m, n), |(i, j)| (1.0 - stretch) * (i as f64 + axial[[i, j]]) - i as f64);
    Ok(DisplacementField::new(axial, lateral).expect("companded estimates are finite"))
}

/// Level 0 is the raw RF; coarser levels hold the complex baseband
/// decimated by 2 per level, stopping early when a level would be shorter
/// than `min_rows`.
fn build_pyramid(pre: &Array2<f64>, post: &Array2<f64>, levels: usize, carrier: (f64, usize), min_rows: usize) -> Vec<(Plane, Plane)> {
    let mut pyramid = vec![(Plane::Real(pre.clone()), Plane::Real(post.clone()))];
    if levels > 1 {
        let base = |x: &Array2<f64>| {
            let (re, im) = demodulate(x, carrier.0, carrier.1);
            Plane::Complex(re, im)
        };
        let mut level = (base(pre), base(post));
        for _ in 1..levels {
            if level.0.dim().0 / 2 < min_rows {
                log::debug!("pyramid capped at {} levels for {} samples", pyramid.len(), pre.nrows());
                break;
            }
            level = (level.0.decimate(), level.1.decimate());
            pyramid.push(level.clone());
        }
    }
    pyramid
}

/// Envelopes of the coarsest level, used for the global stretch search.
fn coarsest_envelopes(pyramid: &[(Plane, Plane)], carrier: (f64, usize)) -> (Array2<f64>, Array2<f64>) {
    match pyramid.last().expect("at least one level") {
        (Plane::Real(a), Plane::Real(b)) => {
            let env = |x| {
                let (re, im) = demodulate(x, carrier.0, carrier.1);
                Plane::Complex(re, im).magnitude()
            };
            (env(a), env(b))
        }
        (a, b) => (a.magnitude(), b.magnitude()),
    }
}

/// NCC of `pre(i, j)` against `post((1 - s) i + lag, j + line)` over the
/// overlap of the two frames.
fn stretched_ncc(pre: &Array2<f64>, post: &Array2<f64>, s: f64, lag: f64, line: isize) -> f64 {
    let (m, n) = pre.dim();
    let (j0, j1) = ((-line).max(0) as usize, (n as isize - line.max(0)).max(0) as usize);
    let (mut sa, mut sb, mut sab, mut saa, mut sbb, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        let t = (1.0 - s) * i as f64 + lag;
        if t < 0.0 || t > (m - 1) as f64 {
            continue;
        }
        let i0 = (t.floor() as usize).min(m - 2);
        let f = t - i0 as f64;
        for j in j0..j1 {
            let jp = (j as isize + line) as usize;
            let a = pre[[i, j]];
            let b = post[[i0, jp]] * (1.0 - f) + post[[i0 + 1, jp]] * f;
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
            count += 1.0;
        }
    }
    if count < 2.0 {
        return 0.0;
    }
    let cov = sab - sa * sb / count;
    let (va, vb) = (saa - sa * sa / count, sbb - sb * sb / count);
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Global axial stretch `s` (compression positive) maximizing the whole-frame
/// NCC over integer axial and lateral lags within `search`. The stretch grid
/// moves the last row by one level sample per step; exactly zero is returned
/// when the unstretched frame matches best.
fn global_stretch(pre: &Array2<f64>, post: &Array2<f64>, search: (usize, usize), max_stretch: f64) -> f64 {
    let m = pre.nrows();
    let step = 1.0 / m as f64;
    let steps = (max_stretch / step).floor() as isize;
    if steps == 0 {
        return 0.0;
    }
    let lags = -(search.0 as isize)..=search.0 as isize;
    let lines = -(search.1 as isize)..=search.1 as isize;
    let scores: Vec<f64> = (-steps..=steps)
        .into_par_iter()
        .map(|k| {
            lines
                .clone()
                .map(|line| {
                    let v: Vec<f64> = lags
                        .clone()
                        .map(|lag| stretched_ncc(pre, post, k as f64 * step, lag as f64, line))
                        .collect();
                    interpolated_peak(&v)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut best = steps as usize;
    for (idx, &v) in scores.iter().enumerate() {
        let (k, bk) = (idx as isize - steps, best as isize - steps);
        if v > scores[best] || (v == scores[best] && k.abs() < bk.abs()) {
            best = idx;
        }
    }
    if best == steps as usize {
        return 0.0;
    }
    let offset = if best > 0 && best + 1 < scores.len() {
        parabolic_offset(scores[best - 1], scores[best], scores[best + 1])
    } else {
        0.0
    };
    ((best as isize - steps) as f64 + offset) * step
}

/// Largest value of `v` after a parabolic fit through the best sample and its
/// neighbours, so a fractional lag does not favour a spurious stretch.
fn interpolated_peak(v: &[f64]) -> f64 {
    let (k, &mid) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one lag");
    if k == 0 || k + 1 == v.len() {
        return mid;
    }
    let (lo, hi) = (v[k - 1], v[k + 1]);
    let denom = lo - 2.0 * mid + hi;
    if denom >= 0.0 {
        return mid;
    }
    mid - (lo - hi) * (lo - hi) / (8.0 * denom)
}

/// Keys cubic convolution weights (a = -1/2) for fractional offset `f`.
fn cubic_weights(f: f64) -> [f64; 4] {
    let (f2, f3) = (f * f, f * f * f);
    [
        -0.5 * f3 + f2 - 0.5 * f,
        1.5 * f3 - 2.5 * f2 + 1.0,
        -1.5 * f3 + 2.0 * f2 + 0.5 * f,
        0.5 * f3 - 0.5 * f2,
    ]
}

/// `out(i, j) = img((1 - s) i, j)` by cubic interpolation, zero outside.
fn warp_axial(img: &Array2<f64>, s: f64) -> Array2<f64> {
    let (m, n) = img.dim();
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let t = (1.0 - s) * i as f64;
        let i0 = t.floor() as isize;
        let w = cubic_weights(t - i0 as f64);
        for (k, wk) in w.iter().enumerate() {
            let r = i0 - 1 + k as isize;
            if r < 0 || r >= m as isize {
                continue;
            }
            let r = r as usize;
            for j in 0..n {
                out[[i, j]] += wk * img[[r, j]];
            }
        }
    }
    out
}

fn match_pyramid(pyramid: &[(Plane, Plane)], params: &CoarseParams) -> DisplacementField {
    let (m, n) = pyramid[0].0.dim();
    let mut grid: Option<GridField> = None;
    let (mut reach_a, mut reach_l) = (0.0, 0.0);
    let coarsest = pyramid.len() - 1;
    for (level, (lpre, lpost)) in pyramid.iter().enumerate().rev() {
        let scale = (1usize << level) as f64;
        let window = params.window(level, coarsest);
        reach_a += window.0 as f64 * scale;
        reach_l += window.1 as f64;
        let rows = Axis::new(lpre.dim().0, params.block.0);
        let cols = Axis::new(n, params.block.1);
        // Block centres in full-resolution samples.
        let full_rows: Vec<f64> = (0..rows.starts.len()).map(|k| (rows.centre(k) + 0.5) * scale - 0.5).collect();
        let full_cols: Vec<f64> = (0..cols.starts.len()).map(|k| cols.centre(k)).collect();
        let (gm, gn) = (full_rows.len(), full_cols.len());

        let predicted: Vec<(f64, f64)> = (0..gm * gn)
            .map(|k| match &grid {
                Some(g) => g.at(full_rows[k / gn], full_cols[k % gn]),
                None => (0.0, 0.0),
            })
            .collect();

        let matches: Vec<Option<BlockMatch>> = (0..gm * gn)
            .into_par_iter()
            .map(|k| {
                let (p_a, p_l) = predicted[k];
                match_block(
                    lpre,
                    lpost,
                    rows.starts[k / gn],
                    cols.starts[k % gn],
                    params.block,
                    ((p_a / scale).round() as isize, p_l.round() as isize),
                    window,
                )
            })
            .collect();

        let mut axial = Array2::zeros((gm, gn));
        let mut lateral = Array2::zeros((gm, gn));
        let mut valid = Array2::from_elem((gm, gn), false);
        let fallback_a = Array2::from_shape_fn((gm, gn), |(r, c)| predicted[r * gn + c].0);
        let fallback_l = Array2::from_shape_fn((gm, gn), |(r, c)| predicted[r * gn + c].1);
        for (k, mt) in matches.iter().enumerate() {
            let (r, c) = (k / gn, k % gn);
            if let Some(mt) = mt {
                axial[[r, c]] = (mt.axial * scale).clamp(-reach_a, reach_a);
                lateral[[r, c]] = mt.lateral.clamp(-reach_l, reach_l);
                valid[[r, c]] = mt.peak >= params.min_correlation && !mt.truncated;
            }
        }
        let axial = fill_invalid(&axial, &valid, &fallback_a);
        let lateral = fill_invalid(&lateral, &valid, &fallback_l);
        let axial = median_with(&axial, params.median_window, false);
        let lateral = median_with(&lateral, params.median_window, false);
        grid = Some(GridField {
            rows: full_rows,
            cols: full_cols,
            axial,
            lateral,
        });
    }

    let grid = grid.expect("at least one level");
    let values: Vec<(f64, f64)> = (0..m * n)
        .into_par_iter()
        .map(|k| grid.at((k / n) as f64, (k % n) as f64))
        .collect();
    let axial = Array2::from_shape_fn((m, n), |(i, j)| values[i * n + j].0);
    let lateral = Array2::from_shape_fn((m, n), |(i, j)| values[i * n + j].1);
    DisplacementField::new(axial, lateral).expect("interpolated block estimates are finite")
}

/// Loads an externally computed flow (ELDF) and resamples it onto the RF
/// grid, rescaling displacements into samples and lines.
pub fn import_external_flow(path: &Path, rf_dims: (usize, usize)) -> Result<DisplacementField, FormatError> {
    let field = load_field(path, Format::from_path(path))?;
    Ok(resample_field(&field, rf_dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn median_window_one_is_identity() {
        let img = array![[1.0, 5.0], [-2.0, 0.5]];
        assert_eq!(median_filter(&img, 1).unwrap(), img);
        assert_eq!(median_filter(&img, 2), Err(EvenWindow(2)));
        assert_eq!(median_filter(&img, 0), Err(EvenWindow(0)));
    }

    #[test]
    fn median_removes_spike() {
        let mut img = Array2::from_elem((5, 5), 2.0);
        img[[2, 2]] = 100.0;
        assert!(median_filter(&img, 3).unwrap().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn inbounds_median_ignores_a_bad_edge_column() {
        let mut img = Array2::from_elem((6, 6), 4.0);
        img.column_mut(5).fill(-30.0);
        assert!(median_with(&img, 5, false).iter().all(|v| *v == 4.0));
        assert_eq!(median_with(&img, 5, true).column(5).to_vec(), vec![-30.0; 6]);
    }

    #[test]
    fn ncc_bounds_and_degenerate() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert!((ncc(a.view(), a.view()) - 1.0).abs() < 1e-15);
        assert!((ncc(a.view(), (-&a).view()) + 1.0).abs() < 1e-15);
        let flat = Array2::from_elem((2, 2), 3.0);
        assert_eq!(ncc(a.view(), flat.view()), 0.0);
    }

    #[test]
    fn parabola_vertex() {
        // y = -(x - 0.3)²: samples at -1, 0, 1.
        let f = |x: f64| -(x - 0.3) * (x - 0.3);
        assert!((parabolic_offset(f(-1.0), f(0.0), f(1.0)) - 0.3).abs() < 1e-12);
        assert_eq!(parabolic_offset(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn block_axis_covers_extent() {
        let ax = Axis::new(100, 16);
        assert_eq!(ax.starts.first(), Some(&0));
        assert_eq!(ax.starts.last().unwrap() + 16, 100);
    }

    #[test]
    fn fill_uses_valid_neighbours_only() {
        let values = array![[1.0, 9.0, 3.0, 7.0], [2.0, 50.0, 4.0, 8.0]];
        let valid = array![[true, false, true, false], [true, false, true, false]];
        let fallback = Array2::from_elem((2, 4), -1.0);
        let out = fill_invalid(&values, &valid, &fallback);
        // Neighbours of (0,1): 1, 3, 2, 4 → lower median 2.
        assert_eq!(out[[0, 1]], 2.0);
        assert_eq!(out[[1, 1]], 2.0);
        // (0,3) sees 3 and 4 → 3.
        assert_eq!(out[[0, 3]], 3.0);
        let none = Array2::from_elem((2, 4), false);
        assert_eq!(fill_invalid(&values, &none, &fallback), fallback);
    }

    #[test]
    fn isolated_invalid_block_keeps_prediction() {
        let values = Array2::from_elem((5, 5), 4.0);
        let mut valid = Array2::from_elem((5, 5), true);
        for r in 1..4 {
            for c in 1..4 {
                valid[[r, c]] = false;
            }
        }
        let out = fill_invalid(&values, &valid, &Array2::from_elem((5, 5), 0.5));
        assert_eq!(out[[2, 2]], 0.5);
        assert_eq!(out[[1, 1]], 4.0);
    }

    #[test]
    fn params_rejected() {
        let mut p = CoarseParams::default();
        p.median_window = 4;
        assert!(p.validate().is_err());
        let p = CoarseParams {
            block: (2, 8),
            ..CoarseParams::default()
        };
        assert!(p.validate().is_err());
        let p = CoarseParams {
            min_correlation: 1.0,
            ..CoarseParams::default()
        };
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn median_outputs_are_inputs(vals in proptest::collection::vec(-10.0f64..10.0, 30), w in 0usize..3) {
            let img = Array2::from_shape_vec((6, 5), vals).unwrap();
            let out = median_filter(&img, 2 * w + 1).unwrap();
            for v in out.iter() {
                prop_assert!(img.iter().any(|x| x == v));
            }
        }
    }
}


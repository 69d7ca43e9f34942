//! Global translation estimation by FFT phase correlation.
//!
//! The correlation surface is `F⁻¹(norm(conj(F(a)) ⊙ F(b)))`, so its peak sits
//! at the displacement that carries `a` onto `b`: if `b = shift(a, d)` the
//! argmax is `d`. Sparse frames are max-pooled before correlation so holes do
//! not dominate the spectrum.

use std::cell::RefCell;
use std::collections::HashMap;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2d;
use crate::frame::{canonical_offset, shift_frame, DenseFrame, Displacement, Grid, SparseFrame};

/// Guard on the spectral magnitude inside the normalization.
pub const SPECTRAL_EPSILON: f64 = 1e-9;

pub const DEFAULT_POOL_FACTOR: usize = 4;

/// Minimum correlation peak for a phase-correlation match to count.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.05;

/// Phase-correlation peaks checked by NCC when locating a template.
const PEAK_CANDIDATES: usize = 8;

/// Which version of a frame feeds the displacement estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationSource {
    /// Neighbour-augmented frames.
    #[default]
    Augmented,
    /// Frames exactly as acquired.
    Raw,
}

impl std::str::FromStr for RegistrationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmented" => Ok(RegistrationSource::Augmented),
            "raw" => Ok(RegistrationSource::Raw),
            other => Err(Error::invalid(format!("unknown registration source '{other}'"))),
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Fft2d>> = RefCell::new(HashMap::new());
}

/// Plans are cached per worker thread.
pub(crate) fn fft_plan(width: usize, height: usize) -> Fft2d {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((width, height))
            .or_insert_with(|| Fft2d::new(width, height))
            .clone()
    })
}

/// Real-valued phase-correlation surface.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSurface {
    values: Grid<f64>,
}

impl CorrelationSurface {
    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    /// Highest value; ties go to the smallest `|dx| + |dy|`, then row-major order.
    pub fn peak(&self) -> Displacement {
        let (w, h) = self.values.dims();
        best_peak(
            (0..h)
                .flat_map(|iy| (0..w).map(move |ix| (ix, iy)))
                .map(|(ix, iy)| (canonical_offset(ix, w), canonical_offset(iy, h), self.values[(ix, iy)])),
        )
        .expect("surface is non-empty")
    }
}

/// Row-major candidates `(dx, dy, value)` reduced with the surface tie-break rule.
fn best_peak(candidates: impl Iterator<Item = (i64, i64, f64)>) -> Option<Displacement> {
    let mut best: Option<Displacement> = None;
    for (dx, dy, v) in candidates {
        if !v.is_finite() {
            continue;
        }
        best = match best {
            None => Some(Displacement::new(dx, dy, v)),
            Some(b) if v > b.score => Some(Displacement::new(dx, dy, v)),
            Some(b) if v == b.score && dx.abs() + dy.abs() < b.dx.abs() + b.dy.abs() => {
                Some(Displacement::new(dx, dy, v))
            }
            keep => keep,
        };
    }
    best
}

fn correlate(a: &Grid<f64>, b: &Grid<f64>) -> Grid<f64> {
    let (w, h) = a.dims();
    let plan = fft_plan(w, h);
    let fa = plan.forward_real(a.data());
    let mut fb = plan.forward_real(b.data());
    for (pb, pa) in fb.iter_mut().zip(&fa) {
        let cross = pa.conj() * *pb;
        let mag = cross.norm().max(SPECTRAL_EPSILON);
        *pb = cross / mag;
    }
    plan.inverse(&mut fb);
    Grid::from_vec(w, h, fb.iter().map(|c: &Complex64| c.re).collect()).expect("same size")
}

/// Phase correlation of two equally sized dense frames.
pub fn phase_correlation(a: &DenseFrame, b: &DenseFrame) -> Result<CorrelationSurface> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "phase correlation of {:?} and {:?} frames",
            a.dims(),
            b.dims()
        )));
    }
    for (name, f) in [("first", a), ("second", b)] {
        if f.intensity().data().iter().all(|&v| v == 0.0) {
            return Err(Error::degenerate(format!("{name} frame is all zero")));
        }
    }
    Ok(CorrelationSurface {
        values: correlate(a.intensity(), b.intensity()),
    })
}

/// Block maximum over measured pixels; blocks without a measurement stay holes.
pub fn max_pool(frame: &SparseFrame, factor: usize) -> Result<SparseFrame> {
    let (w, h) = frame.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::invalid(format!("pool factor {factor} does not divide {w}x{h}")));
    }
    if factor == 1 {
        return Ok(frame.clone());
    }
    let (pw, ph) = (w / factor, h / factor);
    let mut intensity = Grid::new(pw, ph, 0.0);
    let mut mask = Grid::new(pw, ph, false);
    for y in 0..h {
        for x in 0..w {
            if let Some(v) = frame.value(x, y) {
                let (bx, by) = (x / factor, y / factor);
                if !mask[(bx, by)] || v > intensity[(bx, by)] {
                    intensity[(bx, by)] = v;
                    mask[(bx, by)] = true;
                }
            }
        }
    }
    Ok(SparseFrame::from_parts(
        intensity,
        mask,
        frame.timestamp,
        frame.frame_rate,
    ))
}

/// Measured values minus their mean; holes stay at zero.
///
/// Centering keeps the shared sampling pattern of two frames from producing a
/// spurious zero-shift peak.
fn centered(frame: &SparseFrame) -> Result<Grid<f64>> {
    let n = frame.measured_count();
    if n == 0 {
        return Err(Error::degenerate("frame has no measured pixels"));
    }
    let mean = frame
        .intensity()
        .data()
        .iter()
        .zip(frame.mask().data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum::<f64>()
        / n as f64;
    let out = Grid::from_vec(
        frame.width(),
        frame.height(),
        frame
            .intensity()
            .data()
            .iter()
            .zip(frame.mask().data())
            .map(|(&v, &m)| if m { v - mean } else { 0.0 })
            .collect(),
    )?;
    if out.data().iter().all(|&v| v.abs() < 1e-12) {
        return Err(Error::degenerate("frame has no intensity variation"));
    }
    Ok(out)
}

/// Displacement `d` such that `b ≈ shift_frame(a, d)`.
///
/// Both frames are max-pooled by `pool_factor`, phase-correlated, and the
/// pooled peak is scaled back to full resolution; `score` is the peak value.
pub fn estimate_displacement(a: &SparseFrame, b: &SparseFrame, pool_factor: usize) -> Result<Displacement> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "cannot register {:?} against {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let pa = centered(&max_pool(a, pool_factor)?)?;
    let pb = centered(&max_pool(b, pool_factor)?)?;
    let surface = CorrelationSurface {
        values: correlate(&pa, &pb),
    };
    Ok(surface.peak().scaled(pool_factor as i64))
}

/// Outcome of registering one neighbour to the target.
#[derive(Debug, Clone, PartialEq)]
pub enum Alignment {
    Aligned {
        frame: SparseFrame,
        displacement: Displacement,
    },
    Skipped {
        reason: String,
    },
}

impl Alignment {
    pub fn frame(&self) -> Option<&SparseFrame> {
        match self {
            Alignment::Aligned { frame, .. } => Some(frame),
            Alignment::Skipped { .. } => None,
        }
    }

    pub fn displacement(&self) -> Option<Displacement> {
        match self {
            Alignment::Aligned { displacement, .. } => Some(*displacement),
            Alignment::Skipped { .. } => None,
        }
    }
}

/// Registers every neighbour to `target` and moves it into the target's coordinates.
///
/// Neighbours that cannot be registered (no measurements, flat content) come
/// back as [`Alignment::Skipped`].
pub fn align_window(target: &SparseFrame, neighbors: &[SparseFrame], pool_factor: usize) -> Result<Vec<Alignment>> {
    if let Some(bad) = neighbors.iter().find(|n| n.dims() != target.dims()) {
        return Err(Error::invalid(format!(
            "neighbour {:?} does not match target {:?}",
            bad.dims(),
            target.dims()
        )));
    }
    neighbors
        .par_iter()
        .map(|n| match estimate_displacement(n, target, pool_factor) {
            Ok(d) => Ok(Alignment::Aligned {
                frame: shift_frame(n, &d)?,
                displacement: d,
            }),
            Err(Error::DegenerateInput(reason)) => Ok(Alignment::Skipped { reason }),
            Err(e) => Err(e),
        })
        .collect()
}

/// Normalized cross-correlation between the measured pixels of `template` and
/// the reference window whose top-left corner is `(ux, uy)`.
///
/// Only pixels measured in the template and present in the reference take
/// part. Returns the coefficient and the number of participating pixels, or
/// `None` if either side has no variance there.
pub fn masked_ncc_at(
    template: &SparseFrame,
    reference: &Grid<f64>,
    reference_mask: &Grid<bool>,
    ux: i64,
    uy: i64,
) -> Option<(f64, usize)> {
    let (tw, th) = template.dims();
    let (rw, rh) = reference.dims();
    let x_lo = (-ux).max(0) as usize;
    let y_lo = (-uy).max(0) as usize;
    let x_hi = (tw as i64).min(rw as i64 - ux);
    let y_hi = (th as i64).min(rh as i64 - uy);
    if x_hi <= x_lo as i64 || y_hi <= y_lo as i64 {
        return None;
    }
    let (mut n, mut st, mut sr, mut stt, mut srr, mut str_) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y_lo..y_hi as usize {
        let ry = (y as i64 + uy) as usize;
        for x in x_lo..x_hi as usize {
            let Some(t) = template.value(x, y) else {
                continue;
            };
            let rx = (x as i64 + ux) as usize;
            if !reference_mask[(rx, ry)] {
                continue;
            }
            let r = reference[(rx, ry)];
            n += 1;
            st += t;
            sr += r;
            stt += t * t;
            srr += r * r;
            str_ += t * r;
        }
    }
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let cov = str_ - st * sr / nf;
    let vt = stt - st * st / nf;
    let vr = srr - sr * sr / nf;
    if vt <= 1e-12 * nf || vr <= 1e-12 * nf {
        return None;
    }
    Some((cov / (vt * vr).sqrt(), n))
}

/// Where a smaller frame sits inside a larger reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub x: i64,
    pub y: i64,
    /// Phase-correlation peak of the coarse search.
    pub score: f64,
}

fn pad_to_multiple(frame: &SparseFrame, factor: usize) -> SparseFrame {
    let (w, h) = frame.dims();
    let pw = w.div_ceil(factor) * factor;
    let ph = h.div_ceil(factor) * factor;
    if (pw, ph) == (w, h) {
        return frame.clone();
    }
    embed(frame, pw, ph)
}

fn embed(frame: &SparseFrame, width: usize, height: usize) -> SparseFrame {
    let mut intensity = Grid::new(width, height, 0.0);
    let mut mask = Grid::new(width, height, false);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if let Some(v) = frame.value(x, y) {
                intensity[(x, y)] = v;
                mask[(x, y)] = true;
            }
        }
    }
    SparseFrame::from_parts(intensity, mask, frame.timestamp, frame.frame_rate)
}

fn embed_grid(values: &Grid<f64>, width: usize, height: usize) -> Grid<f64> {
    let mut out = Grid::new(width, height, 0.0);
    for y in 0..values.height() {
        for x in 0..values.width() {
            out[(x, y)] = values[(x, y)];
        }
    }
    out
}

/// Pooled-resolution placement of `template` inside `reference`.
///
/// Both inputs are max-pooled, zero-padded to a common FFT size and
/// phase-correlated; the peak is taken over admissible placements only. With
/// `allow_partial` a placement may hang over the reference edge as long as at
/// least `min_overlap` of the template area lies inside, otherwise the
/// template must fit entirely.
pub fn locate_coarse(
    template: &SparseFrame,
    reference: &SparseFrame,
    pool_factor: usize,
    allow_partial: bool,
    min_overlap: f64,
) -> Result<Option<Located>> {
    let p = pool_factor.max(1);
    let (tw, th) = template.dims();
    let (rw, rh) = reference.dims();
    if !allow_partial && (tw > rw || th > rh) {
        return Err(Error::invalid(format!(
            "template {tw}x{th} larger than reference {rw}x{rh}"
        )));
    }
    let pt = max_pool(&pad_to_multiple(template, p), p)?;
    let pr = max_pool(&pad_to_multiple(reference, p), p)?;
    let ct = centered(&pt)?;
    let cr = centered(&pr)?;
    let (ptw, pth) = pt.dims();
    let (prw, prh) = pr.dims();
    let (fw, fh) = if allow_partial {
        (prw + ptw, prh + pth)
    } else {
        (prw, prh)
    };
    let surface = correlate(&embed_grid(&ct, fw, fh), &embed_grid(&cr, fw, fh));

    let admissible = admissibility(template.dims(), reference.dims(), allow_partial, min_overlap);
    let unwrap = |i: usize, n: usize, rn: usize| -> i64 {
        if allow_partial && i >= rn {
            i as i64 - n as i64
        } else {
            i as i64
        }
    };
    let p_i = p as i64;
    let mut peaks: Vec<(i64, i64, f64)> = Vec::new();
    for iy in 0..fh {
        for ix in 0..fw {
            let ux = unwrap(ix, fw, prw) * p_i;
            let uy = unwrap(iy, fh, prh) * p_i;
            // pooled grids can place the template a fraction of a block
            // outside; clamp so refinement starts from a legal position
            let (ux, uy) = if allow_partial {
                (ux, uy)
            } else {
                (ux.min(rw as i64 - tw as i64), uy.min(rh as i64 - th as i64))
            };
            let v = surface[(ix, iy)];
            if v.is_finite() && admissible(ux, uy) {
                peaks.push((ux, uy, v));
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then((a.0.abs() + a.1.abs()).cmp(&(b.0.abs() + b.1.abs())))
    });

    // Box edges and coverage boundaries leave spurious peaks, so the
    // strongest few separated peaks are verified by NCC on the pooled grids.
    let mut picks: Vec<(i64, i64, f64)> = Vec::with_capacity(PEAK_CANDIDATES);
    for &c in &peaks {
        if picks.len() == PEAK_CANDIDATES {
            break;
        }
        if picks
            .iter()
            .all(|q| (q.0 - c.0).abs() > 2 * p_i || (q.1 - c.1).abs() > 2 * p_i)
        {
            picks.push(c);
        }
    }
    let min_pooled = ((pt.measured_count() as f64) * min_overlap.max(0.01)) as usize;
    let mut coarse: Option<(Displacement, f64)> = None;
    for &(ux, uy, v) in &picks {
        let ncc = masked_ncc_at(&pt, pr.intensity(), pr.mask(), ux.div_euclid(p_i), uy.div_euclid(p_i))
            .filter(|&(_, n)| n >= min_pooled.max(2))
            .map_or(f64::NEG_INFINITY, |(r, _)| r);
        if coarse.is_none_or(|(_, best)| ncc > best) {
            coarse = Some((Displacement::new(ux, uy, v), ncc));
        }
    }
    let Some((coarse, _)) = coarse else {
        return Ok(None);
    };
    Ok(Some(Located {
        x: coarse.dx,
        y: coarse.dy,
        score: coarse.score,
    }))
}

/// Placement rule shared by the coarse search and the refinement.
fn admissibility(
    (tw, th): (usize, usize),
    (rw, rh): (usize, usize),
    allow_partial: bool,
    min_overlap: f64,
) -> impl Fn(i64, i64) -> bool {
    let min_area = min_overlap * (tw * th) as f64;
    move |x, y| {
        if allow_partial {
            let ox = (x + tw as i64).min(rw as i64) - x.max(0);
            let oy = (y + th as i64).min(rh as i64) - y.max(0);
            (ox.max(0) * oy.max(0)) as f64 >= min_area
        } else {
            x >= 0 && y >= 0 && x + tw as i64 <= rw as i64 && y + th as i64 <= rh as i64
        }
    }
}

/// Full-resolution masked-NCC search within one pooling block of `coarse`.
pub fn refine_location(
    template: &SparseFrame,
    reference: &SparseFrame,
    coarse: Located,
    pool_factor: usize,
    allow_partial: bool,
    min_overlap: f64,
) -> Located {
    let p_i = pool_factor.max(1) as i64;
    if p_i == 1 {
        return coarse;
    }
    let admissible = admissibility(template.dims(), reference.dims(), allow_partial, min_overlap);
    let coarse_d = Displacement::new(coarse.x, coarse.y, coarse.score);
    let min_pixels = ((template.measured_count() as f64) * min_overlap.max(0.01)) as usize;
    let candidates: Vec<(i64, i64)> = (-p_i..=p_i)
        .flat_map(|dy| (-p_i..=p_i).map(move |dx| (coarse_d.dx + dx, coarse_d.dy + dy)))
        .filter(|&(x, y)| admissible(x, y))
        .collect();
    let scored: Vec<(i64, i64, Option<(f64, usize)>)> = candidates
        .par_iter()
        .map(|&(x, y)| {
            (
                x,
                y,
                masked_ncc_at(template, reference.intensity(), reference.mask(), x, y),
            )
        })
        .collect();
    let mut best: Option<(i64, i64, f64)> = None;
    for (x, y, r) in scored {
        let Some((ncc, n)) = r else { continue };
        if n < min_pixels.max(2) {
            continue;
        }
        let better = match best {
            None => true,
            Some((bx, by, bv)) => {
                ncc > bv
                    || (ncc == bv
                        && (x - coarse_d.dx).abs() + (y - coarse_d.dy).abs()
                            < (bx - coarse_d.dx).abs() + (by - coarse_d.dy).abs())
            }
        };
        if better {
            best = Some((x, y, ncc));
        }
    }
    let (x, y) = best.map_or((coarse.x, coarse.y), |(x, y, _)| (x, y));
    Located {
        x,
        y,
        score: coarse.score,
    }
}

/// Coarse search followed by full-resolution refinement.
pub fn locate(
    template: &SparseFrame,
    reference: &SparseFrame,
    pool_factor: usize,
    allow_partial: bool,
    min_overlap: f64,
) -> Result<Option<Located>> {
    Ok(
        locate_coarse(template, reference, pool_factor, allow_partial, min_overlap)?
            .map(|c| refine_location(template, reference, c, pool_factor, allow_partial, min_overlap)),
    )
}

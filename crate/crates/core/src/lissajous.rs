//! Lissajous scan simulation.
//!
//! The beam follows `x(t) = (W-1)/2 (1 + sin(2π fx t + φx))`,
//! `y(t) = (H-1)/2 (1 + sin(2π fy t + φy))`, sampled at the pixel clock and
//! rounded to the nearest pixel. Each frame keeps the last sample written to
//! a pixel; pixels never visited within the frame are holes.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DenseFrame, FrameSequence, Grid, SparseFrame};

/// Resonant-scanner parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LissajousConfig {
    /// Fast-axis frequency (Hz).
    pub fx: f64,
    /// Slow-axis frequency (Hz).
    pub fy: f64,
    pub phase_x: f64,
    pub phase_y: f64,
    /// Pixel clock (samples per second).
    pub sample_rate: f64,
    pub frame_rate: f64,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of additive Gaussian read noise.
    pub noise_sigma: f64,
}

impl Default for LissajousConfig {
    /// 512² scanner at 10 Hz. With these frequencies a 10 Hz frame leaves
    /// about 72% of pixels unvisited and a 2 Hz frame about 8%.
    fn default() -> Self {
        LissajousConfig {
            fx: 745.0,
            fy: 532.0,
            phase_x: FRAC_PI_2,
            phase_y: FRAC_PI_2,
            sample_rate: 1_400_000.0,
            frame_rate: 10.0,
            width: 512,
            height: 512,
            noise_sigma: 0.02,
        }
    }
}

impl LissajousConfig {
    /// Same scanner running at a different frame rate.
    pub fn at_frame_rate(&self, frame_rate: f64) -> Self {
        LissajousConfig {
            frame_rate,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fx", self.fx),
            ("fy", self.fy),
            ("sample_rate", self.sample_rate),
            ("frame_rate", self.frame_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sample_rate / self.frame_rate < 1.0 {
            return Err(Error::invalid("fewer than one sample per frame"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scan grid must be non-empty"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if !self.phase_x.is_finite() || !self.phase_y.is_finite() {
            return Err(Error::invalid("phases must be finite"));
        }
        Ok(())
    }

    /// First sample index belonging to frame `k`.
    fn frame_start_sample(&self, k: usize) -> u64 {
        sample_count(k as f64 / self.frame_rate, self.sample_rate)
    }

    #[inline]
    fn position(&self, t: f64) -> (usize, usize) {
        let half_w = (self.width - 1) as f64 / 2.0;
        let half_h = (self.height - 1) as f64 / 2.0;
        let x = half_w * (1.0 + (2.0 * PI * self.fx * t + self.phase_x).sin());
        let y = half_h * (1.0 + (2.0 * PI * self.fy * t + self.phase_y).sin());
        (
            (x.round() as usize).min(self.width - 1),
            (y.round() as usize).min(self.height - 1),
        )
    }
}

fn sample_count(duration: f64, sample_rate: f64) -> u64 {
    // products like 0.1 * 1.4e6 land a hair below the integer
    (duration * sample_rate + 1e-6).floor().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub time: f64,
    pub px: usize,
    pub py: usize,
}

/// Time-ordered pixel visits of the beam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn distinct_pixels(&self) -> usize {
        self.visits.iter().map(|v| (v.px, v.py)).collect::<HashSet<_>>().len()
    }
}

/// Beam visits during `[0, duration)`.
pub fn generate_trajectory(cfg: &LissajousConfig, duration: f64) -> Result<Trajectory> {
    cfg.validate()?;
    if !(duration > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let n = sample_count(duration, cfg.sample_rate);
    Ok(trajectory_span(cfg, 0, n))
}

fn trajectory_span(cfg: &LissajousConfig, first: u64, end: u64) -> Trajectory {
    let visits = (first..end)
        .map(|i| {
            let time = i as f64 / cfg.sample_rate;
            let (px, py) = cfg.position(time);
            Visit { time, px, py }
        })
        .collect();
    Trajectory { visits }
}

/// Beam visits belonging to frame `k` of a continuous acquisition.
pub fn frame_trajectory(cfg: &LissajousConfig, k: usize) -> Result<Trajectory> {
    cfg.validate()?;
    Ok(trajectory_span(
        cfg,
        cfg.frame_start_sample(k),
        cfg.frame_start_sample(k + 1),
    ))
}

/// Distinct visited pixels over `width * height`.
pub fn coverage_fraction(traj: &Trajectory, width: usize, height: usize) -> f64 {
    let total = width * height;
    if total == 0 {
        return 0.0;
    }
    let mut seen = vec![false; total];
    let mut count = 0usize;
    for v in &traj.visits {
        if v.px < width && v.py < height {
            let idx = v.py * width + v.px;
            if !seen[idx] {
                seen[idx] = true;
                count += 1;
            }
        }
    }
    count as f64 / total as f64
}

/// Per-frame translation of the tissue relative to the probe, in pixels.
///
/// Frame `k` sees the ground truth window whose top-left corner is
/// `offsets[k]`. Between frame centres the offset is interpolated linearly in
/// time, so motion inside a frame distorts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPath {
    pub offsets: Vec<(f64, f64)>,
}

impl MotionPath {
    pub fn stationary(n_frames: usize) -> Self {
        MotionPath {
            offsets: vec![(0.0, 0.0); n_frames],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Adds a constant to every offset.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        MotionPath {
            offsets: self.offsets.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
        }
    }

    /// Bounding box `(min_x, min_y, max_x, max_y)` of the offsets.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let first = *self.offsets.first()?;
        Some(
            self.offsets
                .iter()
                .fold((first.0, first.1, first.0, first.1), |(a, b, c, d), &(x, y)| {
                    (a.min(x), b.min(y), c.max(x), d.max(y))
                }),
        )
    }

    /// Offset at time `t` for a sequence at `frame_rate`.
    pub fn offset_at(&self, t: f64, frame_rate: f64) -> (f64, f64) {
        let n = self.offsets.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let pos = t * frame_rate - 0.5;
        if pos <= 0.0 {
            return self.offsets[0];
        }
        let k = pos.floor() as usize;
        if k + 1 >= n {
            return self.offsets[n - 1];
        }
        let frac = pos - k as f64;
        let (x0, y0) = self.offsets[k];
        let (x1, y1) = self.offsets[k + 1];
        (x0 + (x1 - x0) * frac, y0 + (y1 - y0) * frac)
    }
}

/// Square outward spiral of FOV positions.
///
/// `fov` is the frame extent in pixels; consecutive positions are
/// `round(fov * (1 - overlap_fraction))` apart along one axis.
pub fn spiral_motion(n_frames: usize, fov: f64, overlap_fraction: f64) -> Result<MotionPath> {
    if !(fov > 0.0) {
        return Err(Error::invalid("spiral step must be positive"));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::invalid("overlap fraction must lie in [0, 1)"));
    }
    let stride = (fov * (1.0 - overlap_fraction)).round();
    let offsets = spiral_cells(n_frames)
        .into_iter()
        .map(|(i, j)| (i as f64 * stride, j as f64 * stride))
        .collect();
    Ok(MotionPath { offsets })
}

/// Integer cells of a square spiral: (0,0), (1,0), (1,1), (0,1), (-1,1), ...
pub fn spiral_cells(n: usize) -> Vec<(i64, i64)> {
    let mut cells = Vec::with_capacity(n);
    let (mut x, mut y) = (0i64, 0i64);
    let dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let mut dir = 0;
    let mut run = 1;
    'outer: while cells.len() < n {
        for _ in 0..2 {
            for _ in 0..run {
                if cells.len() >= n {
                    break 'outer;
                }
                cells.push((x, y));
                x += dirs[dir].0;
                y += dirs[dir].1;
            }
            dir = (dir + 1) % 4;
        }
        run += 1;
    }
    cells
}

/// Random walk starting at the origin with i.i.d. integer steps drawn
/// uniformly from `[-max_step, max_step]` on each axis.
pub fn random_walk_motion(n_frames: usize, max_step: u32, seed: u64) -> MotionPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_step as i64;
    let mut offsets = Vec::with_capacity(n_frames);
    let (mut x, mut y) = (0i64, 0i64);
    for k in 0..n_frames {
        if k > 0 {
            x += rng.random_range(-m..=m);
            y += rng.random_range(-m..=m);
        }
        offsets.push((x as f64, y as f64));
    }
    MotionPath { offsets }
}

/// Bilinear sample of `grid` at a fractional position; `None` outside the grid.
#[inline]
pub fn sample_bilinear(grid: &Grid<f64>, x: f64, y: f64) -> Option<f64> {
    let (w, h) = grid.dims();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    if fx == 0.0 && fy == 0.0 {
        return Some(grid[(x0, y0)]);
    }
    let top = grid[(x0, y0)] * (1.0 - fx) + grid[(x1, y0)] * fx;
    let bottom = grid[(x0, y1)] * (1.0 - fx) + grid[(x1, y1)] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// The `width`×`height` ground-truth window at a (possibly fractional) offset.
pub fn ground_truth_crop(gt: &DenseFrame, offset: (f64, f64), width: usize, height: usize) -> Result<DenseFrame> {
    let mut out = Grid::new(width, height, 0.0);
    for y in 0..height {
        for x in 0..width {
            out[(x, y)] = sample_bilinear(gt.intensity(), x as f64 + offset.0, y as f64 + offset.1)
                .ok_or_else(|| Error::invalid(format!("window at {offset:?} leaves the ground truth")))?;
        }
    }
    DenseFrame::new(out)
}

/// Synthesizes `n_frames` consecutive frames of the scanner imaging `ground_truth`
/// while the tissue follows `motion`.
pub fn acquire_sequence(
    ground_truth: &DenseFrame,
    cfg: &LissajousConfig,
    motion: &MotionPath,
    n_frames: usize,
    seed: u64,
) -> Result<FrameSequence> {
    cfg.validate()?;
    if motion.len() < n_frames {
        return Err(Error::invalid(format!(
            "motion path has {} offsets for {n_frames} frames",
            motion.len()
        )));
    }
    let (gw, gh) = ground_truth.dims();
    let max_x = (gw as f64) - cfg.width as f64;
    let max_y = (gh as f64) - cfg.height as f64;
    for k in 0..n_frames {
        // the interpolated path is piecewise linear, so its extremes within a
        // frame are at the span ends or at frame centres
        let t0 = k as f64 / cfg.frame_rate;
        let t1 = (k + 1) as f64 / cfg.frame_rate;
        let probes = [t0, (k as f64 + 0.5) / cfg.frame_rate, t1];
        for t in probes {
            let (ox, oy) = motion.offset_at(t, cfg.frame_rate);
            if ox < 0.0 || oy < 0.0 || ox > max_x || oy > max_y {
                return Err(Error::FovExcursion { frame: k });
            }
        }
    }
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let frames: Vec<SparseFrame> = (0..n_frames)
        .into_par_iter()
        .map(|k| {
            let traj = trajectory_span(cfg, cfg.frame_start_sample(k), cfg.frame_start_sample(k + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut intensity = Grid::new(cfg.width, cfg.height, 0.0);
            let mut mask = Grid::new(cfg.width, cfg.height, false);
            for v in &traj.visits {
                let (ox, oy) = motion.offset_at(v.time, cfg.frame_rate);
                let clean = sample_bilinear(ground_truth.intensity(), v.px as f64 + ox, v.py as f64 + oy)
                    .expect("excursions rejected above");
                let value = match &noise {
                    Some(n) => (clean + n.sample(&mut rng)).clamp(0.0, 1.0),
                    None => clean,
                };
                intensity[(v.px, v.py)] = value;
                mask[(v.px, v.py)] = true;
            }
            SparseFrame::from_parts(intensity, mask, k as f64 / cfg.frame_rate, cfg.frame_rate)
        })
        .collect();
    FrameSequence::new(frames, cfg.frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::tissue_texture;

    fn small_cfg() -> LissajousConfig {
        LissajousConfig {
            width: 64,
            height: 48,
            sample_rate: 200_000.0,
            ..LissajousConfig::default()
        }
    }

    #[test]
    fn quarter_phase_starts_at_far_corner() {
        let cfg = small_cfg();
        let traj = generate_trajectory(&cfg, 1e-3).unwrap();
        let first = traj.visits[0];
        assert_eq!((first.px, first.py), (63, 47));
        assert_eq!(first.time, 0.0);
    }

    #[test]
    fn equal_frequencies_trace_the_diagonal() {
        let cfg = LissajousConfig {
            fx: 700.0,
            fy: 700.0,
            phase_x: 0.3,
            phase_y: 0.3,
            width: 50,
            height: 50,
            ..small_cfg()
        };
        let traj = generate_trajectory(&cfg, 0.01).unwrap();
        assert!(traj.visits.iter().all(|v| v.px == v.py));
    }

    #[test]
    fn one_frame_holds_samples_per_frame_visits() {
        let cfg = LissajousConfig::default();
        let traj = generate_trajectory(&cfg, 1.0 / cfg.frame_rate).unwrap();
        assert_eq!(traj.len(), 140_000);
        assert!(traj.visits.windows(2).all(|w| w[1].time > w[0].time));
        assert!(traj.visits.iter().all(|v| v.px < 512 && v.py < 512));
    }

    #[test]
    fn coverage_edge_cases() {
        assert_eq!(coverage_fraction(&Trajectory::default(), 4, 4), 0.0);
        let visits = (0..12)
            .map(|i| Visit {
                time: i as f64,
                px: i % 4,
                py: i / 4,
            })
            .collect();
        assert_eq!(coverage_fraction(&Trajectory { visits }, 4, 3), 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.sample_rate = 5.0;
        assert!(cfg.validate().is_err());
        let cfg = LissajousConfig { fx: 0.0, ..small_cfg() };
        assert!(generate_trajectory(&cfg, 1.0).is_err());
        assert!(generate_trajectory(&small_cfg(), 0.0).is_err());
    }

    #[test]
    fn spiral_examples() {
        assert_eq!(spiral_motion(1, 100.0, 0.2).unwrap().offsets, vec![(0.0, 0.0)]);
        let path = spiral_motion(25, 1024.0, 0.2).unwrap();
        for pair in path.offsets.windows(2) {
            let dx = (pair[1].0 - pair[0].0).abs();
            let dy = (pair[1].1 - pair[0].1).abs();
            let (moved, still) = if dx > 0.0 { (dx, dy) } else { (dy, dx) };
            assert!((819.0..=820.0).contains(&moved), "{pair:?}");
            assert_eq!(still, 0.0);
        }
        let cells = spiral_cells(25);
        let distinct: HashSet<_> = cells.iter().collect();
        assert_eq!(distinct.len(), 25);
        assert!(cells.iter().all(|&(i, j)| i.abs() <= 2 && j.abs() <= 2));
        assert!(spiral_motion(3, 10.0, 1.0).is_err());
    }

    #[test]
    fn random_walk_examples() {
        let still = random_walk_motion(10, 0, 5);
        assert!(still.offsets.iter().all(|&o| o == (0.0, 0.0)));
        let a = random_walk_motion(50, 6, 9);
        assert_eq!(a, random_walk_motion(50, 6, 9));
        for pair in a.offsets.windows(2) {
            assert!((pair[1].0 - pair[0].0).abs() <= 6.0);
            assert!((pair[1].1 - pair[0].1).abs() <= 6.0);
        }
    }

    #[test]
    fn offset_interpolates_between_frame_centres() {
        let path = MotionPath {
            offsets: vec![(0.0, 0.0), (10.0, -4.0)],
        };
        assert_eq!(path.offset_at(0.0, 10.0), (0.0, 0.0));
        assert_eq!(path.offset_at(0.05, 10.0), (0.0, 0.0));
        let (x, y) = path.offset_at(0.1, 10.0);
        assert!((x - 5.0).abs() < 1e-9 && (y + 2.0).abs() < 1e-9);
        assert_eq!(path.offset_at(0.5, 10.0), (10.0, -4.0));
    }

    #[test]
    fn noiseless_full_coverage_reproduces_crop() {
        let gt = tissue_texture(40, 30, 3);
        let cfg = LissajousConfig {
            width: 20,
            height: 16,
            noise_sigma: 0.0,
            frame_rate: 1.0,
            ..LissajousConfig::default()
        };
        let seq = acquire_sequence(&gt, &cfg, &MotionPath::stationary(2), 2, 1).unwrap();
        for f in seq.frames() {
            assert_eq!(f.coverage(), 1.0);
            assert_eq!(f.intensity(), gt.crop(0, 0, 20, 16).unwrap().intensity());
        }
    }

    #[test]
    fn constant_field_is_motion_blind() {
        let gt = DenseFrame::constant(120, 120, 0.37);
        let cfg = LissajousConfig {
            width: 48,
            height: 48,
            noise_sigma: 0.0,
            ..LissajousConfig::default()
        };
        let motion = random_walk_motion(6, 7, 2).translated(40.0, 40.0);
        let seq = acquire_sequence(&gt, &cfg, &motion, 6, 0).unwrap();
        for f in seq.frames() {
            for y in 0..48 {
                for x in 0..48 {
                    if let Some(v) = f.value(x, y) {
                        assert!((v - 0.37).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn measured_count_matches_distinct_visits_and_seed_is_reproducible() {
        let gt = tissue_texture(200, 200, 1);
        let cfg = LissajousConfig {
            width: 96,
            height: 96,
            sample_rate: 250_000.0,
            ..LissajousConfig::default()
        };
        let motion = random_walk_motion(4, 3, 8).translated(50.0, 50.0);
        let a = acquire_sequence(&gt, &cfg, &motion, 4, 77).unwrap();
        let b = acquire_sequence(&gt, &cfg, &motion, 4, 77).unwrap();
        assert_eq!(a, b);
        let c = acquire_sequence(&gt, &cfg, &motion, 4, 78).unwrap();
        assert_ne!(a, c);
        for (k, f) in a.frames().iter().enumerate() {
            let traj = frame_trajectory(&cfg, k).unwrap();
            assert_eq!(f.measured_count(), traj.distinct_pixels());
            assert!((f.timestamp - k as f64 / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn excursion_reports_frame() {
        let gt = DenseFrame::constant(100, 100, 0.5);
        let cfg = LissajousConfig {
            width: 50,
            height: 50,
            ..small_cfg()
        };
        let motion = MotionPath {
            offsets: vec![(0.0, 0.0), (10.0, 10.0), (60.0, 0.0)],
        };
        match acquire_sequence(&gt, &cfg, &motion, 3, 0) {
            Err(Error::FovExcursion { frame }) => assert_eq!(frame, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_shrinks_with_frame_rate() {
        let base = LissajousConfig {
            width: 128,
            height: 128,
            sample_rate: 90_000.0,
            ..LissajousConfig::default()
        };
        let cov: Vec<f64> = [2.0, 4.0, 6.0, 8.0, 10.0, 15.0]
            .iter()
            .map(|&fr| {
                let t = generate_trajectory(&base.at_frame_rate(fr), 1.0 / fr).unwrap();
                coverage_fraction(&t, 128, 128)
            })
            .collect();
        assert!(cov.windows(2).all(|w| w[1] <= w[0]), "{cov:?}");
    }
}

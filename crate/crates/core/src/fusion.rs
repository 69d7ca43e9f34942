//! Masked multi-frame aggregation, hole filling and the classical recurrent
//! restorer.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::frame::{shift_frame, DenseFrame, Displacement, Grid, SparseFrame};
use crate::registration::{align_window, estimate_displacement, Alignment};

/// Frames kept in the restorer's memory bank.
pub const WINDOW_SIZE: usize = 4;

pub const DEFAULT_RECURRENT_WEIGHT: f64 = 0.5;

/// Per-pixel mean over measured values; the mask is the union of all masks.
pub fn masked_mean(frames: &[&SparseFrame]) -> Result<SparseFrame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("masked mean of no frames"))?;
    let (w, h) = first.dims();
    if frames.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::invalid("masked mean over frames of different sizes"));
    }
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for f in frames {
        for (i, (&v, &m)) in f.intensity().data().iter().zip(f.mask().data()).enumerate() {
            if m {
                sum[i] += v;
                count[i] += 1;
            }
        }
    }
    let intensity: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mask: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    Ok(SparseFrame::from_parts(
        Grid::from_vec(w, h, intensity)?,
        Grid::from_vec(w, h, mask)?,
        first.timestamp,
        first.frame_rate,
    ))
}

/// Augments `target` with its registered past and future neighbours.
///
/// Neighbours that fail to register are left out.
pub fn augment_frame(
    target: &SparseFrame,
    past: &[SparseFrame],
    future: &[SparseFrame],
    pool_factor: usize,
) -> Result<SparseFrame> {
    if past.len() > WINDOW_SIZE || future.len() > WINDOW_SIZE {
        return Err(Error::invalid(format!(
            "at most {WINDOW_SIZE} neighbours per side, got {} past and {} future",
            past.len(),
            future.len()
        )));
    }
    let neighbours: Vec<SparseFrame> = past.iter().chain(future).cloned().collect();
    let aligned = align_window(target, &neighbours, pool_factor)?;
    let mut contributing: Vec<&SparseFrame> = vec![target];
    contributing.extend(aligned.iter().filter_map(Alignment::frame));
    let mut out = masked_mean(&contributing)?;
    out.timestamp = target.timestamp;
    out.frame_rate = target.frame_rate;
    Ok(out)
}

/// Fills every hole from its nearest measured neighbours along the four axis
/// directions, weighted by inverse distance. Pixels with no measured pixel in
/// their row or column take the value of the nearest measured pixel.
pub fn fill_bilinear(frame: &SparseFrame) -> Result<DenseFrame> {
    let (w, h) = frame.dims();
    if frame.measured_count() == 0 {
        return Err(Error::degenerate("cannot fill a frame with no measured pixels"));
    }
    let mut sum = Grid::new(w, h, 0.0);
    let mut weight = Grid::new(w, h, 0.0);

    // horizontal then vertical passes accumulate (value / distance, 1 / distance)
    let mut accumulate = |len: usize, lines: usize, at: &dyn Fn(usize, usize) -> (usize, usize)| {
        let mut prev: Vec<Option<(usize, f64)>> = vec![None; len];
        for line in 0..lines {
            let mut last: Option<(usize, f64)> = None;
            for i in 0..len {
                let (x, y) = at(line, i);
                if let Some(v) = frame.value(x, y) {
                    last = Some((i, v));
                }
                prev[i] = last;
            }
            let mut next: Option<(usize, f64)> = None;
            for i in (0..len).rev() {
                let (x, y) = at(line, i);
                if let Some(v) = frame.value(x, y) {
                    next = Some((i, v));
                    continue;
                }
                for (j, v) in prev[i].into_iter().chain(next) {
                    let d = j.abs_diff(i) as f64;
                    sum[(x, y)] += v / d;
                    weight[(x, y)] += 1.0 / d;
                }
            }
        }
    };
    accumulate(w, h, &|row, i| (i, row));
    accumulate(h, w, &|col, i| (col, i));

    let mut out = Grid::new(w, h, 0.0);
    let mut orphans = false;
    for y in 0..h {
        for x in 0..w {
            out[(x, y)] = match frame.value(x, y) {
                Some(v) => v,
                None if weight[(x, y)] > 0.0 => sum[(x, y)] / weight[(x, y)],
                None => {
                    orphans = true;
                    f64::NAN
                }
            };
        }
    }
    if orphans {
        fill_nearest(&mut out);
    }
    Ok(DenseFrame::from_clamped(out))
}

/// Breadth-first propagation of known values into NaN cells.
fn fill_nearest(grid: &mut Grid<f64>) {
    let (w, h) = grid.dims();
    let mut queue: VecDeque<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| !grid[(x, y)].is_nan())
        .collect();
    while let Some((x, y)) = queue.pop_front() {
        let v = grid[(x, y)];
        let neighbours = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in neighbours {
            if nx < w && ny < h && grid[(nx, ny)].is_nan() {
                grid[(nx, ny)] = v;
                queue.push_back((nx, ny));
            }
        }
    }
}

/// Recurrent state of one restoration stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionCache {
    window: Vec<SparseFrame>,
    last_output: Option<DenseFrame>,
}

impl FusionCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cached frames, oldest first, in the coordinates of the latest frame.
    pub fn window(&self) -> &[SparseFrame] {
        &self.window
    }

    pub fn last_output(&self) -> Option<&DenseFrame> {
        self.last_output.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty() && self.last_output.is_none()
    }
}

/// Moves a dense frame by `d`; pixels whose source falls outside are `None`.
fn shift_dense(frame: &DenseFrame, d: &Displacement) -> Grid<Option<f64>> {
    let (w, h) = frame.dims();
    Grid::from_fn(w, h, |x, y| {
        let sx = x as i64 - d.dx;
        let sy = y as i64 - d.dy;
        (sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64).then(|| frame.intensity()[(sx as usize, sy as usize)])
    })
}

/// One step of the classical recurrent restorer.
///
/// The cached window is registered against `current` as a whole (masked mean
/// of the window), shifted by that one displacement, averaged with `current`
/// over measured pixels, hole-filled, and blended with the shifted previous
/// output using `recurrent_weight`.
pub fn restore_step(
    cache: &FusionCache,
    current: &SparseFrame,
    pool_factor: usize,
    recurrent_weight: f64,
) -> Result<(DenseFrame, FusionCache)> {
    if !(0.0..1.0).contains(&recurrent_weight) {
        return Err(Error::invalid(format!(
            "recurrent weight {recurrent_weight} outside [0, 1)"
        )));
    }
    let dims_of_cache = cache
        .window
        .first()
        .map(SparseFrame::dims)
        .or_else(|| cache.last_output.as_ref().map(DenseFrame::dims));
    if let Some(dims) = dims_of_cache {
        if dims != current.dims() {
            return Err(Error::invalid(format!(
                "frame {:?} does not match cache {:?}",
                current.dims(),
                dims
            )));
        }
    }
    if current.measured_count() == 0 {
        return match &cache.last_output {
            Some(last) => Ok((last.clone(), cache.clone())),
            None => Err(Error::degenerate("current frame has no measured pixels and no history")),
        };
    }

    let (d, window) = if cache.window.is_empty() {
        (Displacement::zero(), Vec::new())
    } else {
        let refs: Vec<&SparseFrame> = cache.window.iter().collect();
        let reference = masked_mean(&refs)?;
        match estimate_displacement(&reference, current, pool_factor) {
            Ok(d) => {
                let moved: Result<Vec<SparseFrame>> = cache.window.iter().map(|f| shift_frame(f, &d)).collect();
                match moved {
                    Ok(m) => (d, m),
                    Err(_) => (d, Vec::new()),
                }
            }
            Err(Error::DegenerateInput(_)) => (Displacement::zero(), cache.window.clone()),
            Err(e) => return Err(e),
        }
    };

    let mut contributing: Vec<&SparseFrame> = window.iter().collect();
    contributing.push(current);
    let fused = masked_mean(&contributing)?;
    let filled = fill_bilinear(&fused)?;

    let out = match &cache.last_output {
        Some(last) if recurrent_weight > 0.0 => {
            let shifted = shift_dense(last, &d);
            let blended = Grid::from_fn(current.width(), current.height(), |x, y| {
                let f = filled.intensity()[(x, y)];
                match shifted[(x, y)] {
                    Some(l) => (1.0 - recurrent_weight) * f + recurrent_weight * l,
                    None => f,
                }
            });
            DenseFrame::from_clamped(blended)
        }
        _ => filled,
    };

    let keep = window.len().saturating_sub(WINDOW_SIZE - 1);
    let mut next_window: Vec<SparseFrame> = window.into_iter().skip(keep).collect();
    next_window.push(current.clone());
    Ok((
        out.clone(),
        FusionCache {
            window: next_window,
            last_output: Some(out),
        },
    ))
}

/// Restores a whole sequence with a fresh cache.
pub fn restore_sequence(frames: &[SparseFrame], pool_factor: usize, recurrent_weight: f64) -> Result<Vec<DenseFrame>> {
    let mut cache = FusionCache::new();
    let mut outputs = Vec::with_capacity(frames.len());
    for f in frames {
        let (out, next) = restore_step(&cache, f, pool_factor, recurrent_weight)?;
        outputs.push(out);
        cache = next;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lissajous::{acquire_sequence, ground_truth_crop, LissajousConfig, MotionPath};
    use crate::texture::tissue_texture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(values: Grid<f64>, mask: Grid<bool>) -> SparseFrame {
        SparseFrame::new(values, mask, 0.0, 10.0).unwrap()
    }

    #[test]
    fn augment_without_neighbours_is_identity() {
        let dense = tissue_texture(32, 32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = Grid::from_fn(32, 32, |_, _| rng.random_bool(0.3));
        let t = SparseFrame::masked(&dense, mask, 0.0, 10.0).unwrap();
        assert_eq!(augment_frame(&t, &[], &[], 1).unwrap(), t);
    }

    #[test]
    fn two_value_mean() {
        let a = sparse(Grid::new(4, 4, 0.4), Grid::new(4, 4, true));
        let b = sparse(Grid::new(4, 4, 0.6), Grid::new(4, 4, true));
        let m = masked_mean(&[&a, &b]).unwrap();
        assert!((m.value(2, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn augmentation_of_stationary_noiseless_video_is_exact() {
        let gt = tissue_texture(260, 260, 5);
        let cfg = LissajousConfig {
            width: 128,
            height: 128,
            noise_sigma: 0.0,
            ..LissajousConfig::default()
        };
        let motion = MotionPath::stationary(9).translated(40.0, 50.0);
        let seq = acquire_sequence(&gt, &cfg, &motion, 9, 0).unwrap();
        let frames = seq.frames();
        let aug = augment_frame(&frames[4], &frames[..4], &frames[5..], 2).unwrap();
        assert!(aug.measured_count() >= frames[4].measured_count());
        let truth = ground_truth_crop(&gt, (40.0, 50.0), 128, 128).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                if let Some(v) = aug.value(x, y) {
                    assert!((v - truth.intensity()[(x, y)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fill_examples() {
        let full = tissue_texture(16, 12, 2);
        let f = SparseFrame::from_dense(&full, 0.0, 10.0);
        assert_eq!(fill_bilinear(&f).unwrap(), full);

        let mut values = Grid::new(3, 1, 0.0);
        values[(0, 0)] = 0.2;
        values[(2, 0)] = 0.8;
        let mut mask = Grid::new(3, 1, true);
        mask[(1, 0)] = false;
        let out = fill_bilinear(&sparse(values, mask)).unwrap();
        assert!((out.intensity()[(1, 0)] - 0.5).abs() < 1e-12);

        assert!(matches!(
            fill_bilinear(&SparseFrame::unmeasured(4, 4, 0.0, 1.0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn ramp_is_reconstructed_exactly() {
        let (w, h) = (48, 40);
        let ramp = Grid::from_fn(w, h, |x, y| 0.1 + 0.01 * x as f64 + 0.007 * y as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mask = Grid::from_fn(w, h, |x, y| {
            x == 0 || y == 0 || x == w - 1 || y == h - 1 || rng.random_bool(0.5)
        });
        let f = SparseFrame::masked(&DenseFrame::new(ramp.clone()).unwrap(), mask, 0.0, 10.0).unwrap();
        let out = fill_bilinear(&f).unwrap();
        for (a, b) in out.intensity().data().iter().zip(ramp.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn isolated_pixels_take_nearest_value() {
        let mut values = Grid::new(5, 5, 0.0);
        values[(0, 0)] = 0.9;
        let mut mask = Grid::new(5, 5, false);
        mask[(0, 0)] = true;
        let out = fill_bilinear(&sparse(values, mask)).unwrap();
        assert!(out.intensity().data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn first_step_with_zero_weight_returns_current() {
        let dense = tissue_texture(32, 32, 8);
        let f = SparseFrame::from_dense(&dense, 0.0, 10.0);
        let (out, cache) = restore_step(&FusionCache::new(), &f, 1, 0.0).unwrap();
        assert_eq!(out, dense);
        assert_eq!(cache.window().len(), 1);
    }

    #[test]
    fn static_scene_converges_monotonically() {
        let dense = tissue_texture(64, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = Grid::from_fn(64, 64, |_, _| rng.random_bool(0.3));
        let f = SparseFrame::masked(&dense, mask, 0.0, 10.0).unwrap();
        for &w in &[0.0, 0.3, 0.5, 0.9] {
            let mut cache = FusionCache::new();
            let mut prev: Option<DenseFrame> = None;
            let mut deltas = Vec::new();
            for _ in 0..20 {
                let (out, next) = restore_step(&cache, &f, 4, w).unwrap();
                if let Some(p) = &prev {
                    let d = out
                        .intensity()
                        .data()
                        .iter()
                        .zip(p.intensity().data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    deltas.push(d);
                }
                prev = Some(out);
                cache = next;
            }
            for pair in deltas[4..].windows(2) {
                assert!(pair[1] <= pair[0] + 1e-15, "w={w}: {deltas:?}");
            }
            assert!(*deltas.last().unwrap() < 1e-3);
        }
    }

    #[test]
    fn window_is_capped_and_degenerate_frames_handled() {
        let dense = tissue_texture(32, 32, 9);
        let f = SparseFrame::from_dense(&dense, 0.0, 10.0);
        let mut cache = FusionCache::new();
        for _ in 0..7 {
            cache = restore_step(&cache, &f, 1, 0.5).unwrap().1;
            assert!(cache.window().len() <= WINDOW_SIZE);
        }
        assert_eq!(cache.window().len(), WINDOW_SIZE);
        let empty = SparseFrame::unmeasured(32, 32, 0.0, 10.0);
        let (out, _) = restore_step(&cache, &empty, 1, 0.5).unwrap();
        assert_eq!(Some(&out), cache.last_output());
        assert!(matches!(
            restore_step(&FusionCache::new(), &empty, 1, 0.5),
            Err(Error::DegenerateInput(_))
        ));
        assert!(restore_step(&cache, &f, 1, 1.0).is_err());
        let wrong = SparseFrame::from_dense(&tissue_texture(16, 32, 1), 0.0, 10.0);
        assert!(restore_step(&cache, &wrong, 1, 0.5).is_err());
    }

    #[test]
    fn restore_step_is_deterministic() {
        let gt = tissue_texture(160, 160, 2);
        let cfg = LissajousConfig {
            width: 64,
            height: 64,
            ..LissajousConfig::default()
        };
        let motion = crate::lissajous::random_walk_motion(6, 3, 1).translated(40.0, 40.0);
        let seq = acquire_sequence(&gt, &cfg, &motion, 6, 3).unwrap();
        let a = restore_sequence(seq.frames(), 4, 0.5).unwrap();
        let b = restore_sequence(seq.frames(), 4, 0.5).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn fill_preserves_measured_pixels(seed in 0u64..500, p in 0.05f64..0.95) {
            let dense = tissue_texture(24, 20, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask = Grid::from_fn(24, 20, |_, _| rng.random_bool(p));
            mask[(3, 3)] = true;
            let f = SparseFrame::masked(&dense, mask, 0.0, 1.0).unwrap();
            let out = fill_bilinear(&f).unwrap();
            for y in 0..20 {
                for x in 0..24 {
                    if let Some(v) = f.value(x, y) {
                        prop_assert_eq!(out.intensity()[(x, y)], v);
                    }
                }
            }
        }

        #[test]
        fn augmentation_is_a_bounded_union(seed in 0u64..200, dx in -6i64..6, dy in -6i64..6) {
            let dense = tissue_texture(48, 48, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = Grid::from_fn(48, 48, |_, _| rng.random_bool(0.4));
            let m2 = Grid::from_fn(48, 48, |_, _| rng.random_bool(0.4));
            let t = SparseFrame::masked(&dense, m1, 0.0, 1.0).unwrap();
            let n = shift_frame(&SparseFrame::masked(&dense, m2, 0.0, 1.0).unwrap(), &Displacement::new(dx, dy, 0.0)).unwrap();
            let aug = augment_frame(&t, std::slice::from_ref(&n), &[], 1).unwrap();
            prop_assert!(aug.measured_count() >= t.measured_count());
            let aligned = align_window(&t, &[n], 1).unwrap();
            let nb = aligned[0].frame().cloned();
            for y in 0..48 {
                for x in 0..48 {
                    let vals: Vec<f64> = [t.value(x, y), nb.as_ref().and_then(|f| f.value(x, y))]
                        .into_iter()
                        .flatten()
                        .collect();
                    if let Some(v) = aug.value(x, y) {
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}

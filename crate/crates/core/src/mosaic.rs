//! Hann-blended mosaics of dense frames.
//!
//! Coordinates are "world" pixels: the first stitched frame sits at (0, 0)
//! and the canvas grows in every direction as frames are placed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DenseFrame, Grid, SparseFrame};
use crate::registration::{locate_coarse, refine_location, Located, DEFAULT_MATCH_THRESHOLD};

/// Minimum fraction of a new frame that must overlap the mosaic extent.
pub const MIN_STITCH_OVERLAP: f64 = 0.1;

fn hann(i: usize, n: usize) -> f64 {
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
}

/// Separable Hann weights, zero on the border.
pub fn hann_weight_grid(width: usize, height: usize) -> Result<Grid<f64>> {
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!(
            "Hann window needs at least 2x2, got {width}x{height}"
        )));
    }
    let wx: Vec<f64> = (0..width).map(|i| hann(i, width)).collect();
    let wy: Vec<f64> = (0..height).map(|i| hann(i, height)).collect();
    Ok(Grid::from_fn(width, height, |x, y| wx[x] * wy[y]))
}

/// Where one frame sits in the mosaic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub frame_id: usize,
    pub x: i64,
    pub y: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    /// world coordinates of grid cell (0, 0)
    origin: (i64, i64),
    canvas: Grid<f64>,
    weights: Grid<f64>,
    plain: Grid<f64>,
    counts: Grid<u32>,
}

impl Layers {
    fn empty() -> Self {
        Layers {
            origin: (0, 0),
            canvas: Grid::new(0, 0, 0.0),
            weights: Grid::new(0, 0, 0.0),
            plain: Grid::new(0, 0, 0.0),
            counts: Grid::new(0, 0, 0),
        }
    }

    fn dims(&self) -> (usize, usize) {
        self.canvas.dims()
    }

    /// Grows the grids so the world rectangle fits.
    fn include(&mut self, x: i64, y: i64, w: usize, h: usize) {
        let (cw, ch) = self.dims();
        let (x0, y0) = if cw == 0 {
            (x, y)
        } else {
            (self.origin.0.min(x), self.origin.1.min(y))
        };
        let (x1, y1) = if cw == 0 {
            (x + w as i64, y + h as i64)
        } else {
            (
                (self.origin.0 + cw as i64).max(x + w as i64),
                (self.origin.1 + ch as i64).max(y + h as i64),
            )
        };
        let (nw, nh) = ((x1 - x0) as usize, (y1 - y0) as usize);
        if (x0, y0) == self.origin && (nw, nh) == (cw, ch) {
            return;
        }
        let (sx, sy) = ((self.origin.0 - x0) as usize, (self.origin.1 - y0) as usize);
        fn regrow<T: Clone>(g: &Grid<T>, nw: usize, nh: usize, sx: usize, sy: usize, fill: T) -> Grid<T> {
            let mut out = Grid::new(nw, nh, fill);
            for y in 0..g.height() {
                let row = g.row(y);
                let start = (y + sy) * nw + sx;
                out.data_mut()[start..start + row.len()].clone_from_slice(row);
            }
            out
        }
        self.canvas = regrow(&self.canvas, nw, nh, sx, sy, 0.0);
        self.weights = regrow(&self.weights, nw, nh, sx, sy, 0.0);
        self.plain = regrow(&self.plain, nw, nh, sx, sy, 0.0);
        self.counts = regrow(&self.counts, nw, nh, sx, sy, 0);
        self.origin = (x0, y0);
    }

    fn accumulate(&mut self, frame: &Grid<f64>, window: &Grid<f64>, x: i64, y: i64) {
        let (w, h) = frame.dims();
        self.include(x, y, w, h);
        let gx = (x - self.origin.0) as usize;
        let gy = (y - self.origin.1) as usize;
        for fy in 0..h {
            for fx in 0..w {
                let v = frame[(fx, fy)];
                let wt = window[(fx, fy)];
                let cell = (gx + fx, gy + fy);
                self.canvas[cell] += wt * v;
                self.weights[cell] += wt;
                self.plain[cell] += v;
                self.counts[cell] += 1;
            }
        }
    }

    /// Rendered value of grid cell `(cx, cy)`, `None` where nothing was placed.
    ///
    /// Cells covered by a single frame return that frame's value exactly.
    /// Cells that only saw zero Hann weight (frame borders) fall back to the
    /// plain mean of the frames covering them.
    fn value(&self, cx: usize, cy: usize) -> Option<f64> {
        let n = self.counts[(cx, cy)];
        if n == 0 {
            None
        } else if n == 1 {
            Some(self.plain[(cx, cy)])
        } else if self.weights[(cx, cy)] > 0.0 {
            Some(self.canvas[(cx, cy)] / self.weights[(cx, cy)])
        } else {
            Some(self.plain[(cx, cy)] / n as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Placed {
    frame: Grid<f64>,
    x: i64,
    y: i64,
    score: f64,
}

/// Weighted accumulation of placed frames.
///
/// Accumulation always runs in ascending `frame_id` order, so the rendered
/// mosaic does not depend on the order in which placements were added.
#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    frames: BTreeMap<usize, Placed>,
    layers: Layers,
    /// set for mosaics reconstructed from a rendered image
    frozen: bool,
}

impl Default for Mosaic {
    fn default() -> Self {
        Self::new()
    }
}

impl Mosaic {
    pub fn new() -> Self {
        Mosaic {
            frames: BTreeMap::new(),
            layers: Layers::empty(),
            frozen: false,
        }
    }

    /// Builds a mosaic from fixed placements.
    pub fn from_placements(items: &[(usize, &DenseFrame, i64, i64)]) -> Result<Self> {
        let mut m = Mosaic::new();
        for &(id, frame, x, y) in items {
            m.place(id, frame, x, y, 1.0)?;
        }
        Ok(m)
    }

    /// Reconstructs a mosaic from a rendered image and its coverage mask,
    /// with the image's top-left corner at world `origin`.
    ///
    /// The result can be cropped and matched against but takes no new frames.
    pub fn from_rendered(values: Grid<f64>, coverage: &Grid<bool>, origin: (i64, i64)) -> Result<Self> {
        if values.dims() != coverage.dims() {
            return Err(Error::invalid("rendered mosaic and coverage differ in size"));
        }
        let (w, h) = values.dims();
        let counts = coverage.map(|&c| u32::from(c));
        let weights = coverage.map(|&c| if c { 1.0 } else { 0.0 });
        let plain = Grid::from_fn(w, h, |x, y| if coverage[(x, y)] { values[(x, y)] } else { 0.0 });
        Ok(Mosaic {
            frames: BTreeMap::new(),
            layers: Layers {
                origin,
                canvas: plain.clone(),
                weights,
                plain,
                counts,
            },
            frozen: true,
        })
    }

    /// Adds a frame with its top-left corner at world `(x, y)`.
    pub fn place(&mut self, frame_id: usize, frame: &DenseFrame, x: i64, y: i64, score: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::invalid(
                "mosaic loaded from a rendered image cannot take new frames",
            ));
        }
        if self.frames.contains_key(&frame_id) {
            return Err(Error::invalid(format!("frame {frame_id} is already placed")));
        }
        let window = hann_weight_grid(frame.width(), frame.height())?;
        let in_order = self.frames.keys().next_back().is_none_or(|&last| frame_id > last);
        let placed = Placed {
            frame: frame.intensity().clone(),
            x,
            y,
            score,
        };
        if in_order {
            self.layers.accumulate(&placed.frame, &window, x, y);
            self.frames.insert(frame_id, placed);
        } else {
            self.frames.insert(frame_id, placed);
            self.rebuild()?;
        }
        Ok(())
    }

    fn rebuild(&mut self) -> Result<()> {
        let mut layers = Layers::empty();
        for p in self.frames.values() {
            let window = hann_weight_grid(p.frame.width(), p.frame.height())?;
            layers.accumulate(&p.frame, &window, p.x, p.y);
        }
        self.layers = layers;
        Ok(())
    }

    pub fn placements(&self) -> Vec<Placement> {
        self.frames
            .iter()
            .map(|(&frame_id, p)| Placement {
                frame_id,
                x: p.x,
                y: p.y,
                score: p.score,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.dims().0 == 0
    }

    /// World rectangle `(x, y, width, height)` spanned by the canvas.
    pub fn extent(&self) -> (i64, i64, usize, usize) {
        let (w, h) = self.layers.dims();
        (self.layers.origin.0, self.layers.origin.1, w, h)
    }

    /// Blend weights over the canvas extent.
    pub fn weights(&self) -> &Grid<f64> {
        &self.layers.weights
    }

    /// Rendered value at a world pixel.
    pub fn value_at(&self, x: i64, y: i64) -> Option<f64> {
        let (w, h) = self.layers.dims();
        let cx = x - self.layers.origin.0;
        let cy = y - self.layers.origin.1;
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            return None;
        }
        self.layers.value(cx as usize, cy as usize)
    }

    /// Rendered world rectangle; cells outside coverage are 0 with a false mask.
    pub fn render_region(&self, x: i64, y: i64, width: usize, height: usize) -> (Grid<f64>, Grid<bool>) {
        let mut values = Grid::new(width, height, 0.0);
        let mut mask = Grid::new(width, height, false);
        for ry in 0..height {
            for rx in 0..width {
                if let Some(v) = self.value_at(x + rx as i64, y + ry as i64) {
                    values[(rx, ry)] = v;
                    mask[(rx, ry)] = true;
                }
            }
        }
        (values, mask)
    }

    /// The whole extent as a sparse frame (covered pixels measured).
    pub fn render(&self) -> SparseFrame {
        let (x, y, w, h) = self.extent();
        let (values, mask) = self.render_region(x, y, w, h);
        SparseFrame::from_parts(values, mask, 0.0, 0.0)
    }

    /// Fraction of the world rectangle that no frame covers.
    pub fn uncovered_fraction(&self, x: i64, y: i64, width: usize, height: usize) -> f64 {
        let total = width * height;
        if total == 0 {
            return 0.0;
        }
        let (cx0, cy0, cw, ch) = self.extent();
        let mut uncovered = 0usize;
        for ry in 0..height as i64 {
            for rx in 0..width as i64 {
                let (gx, gy) = (x + rx - cx0, y + ry - cy0);
                let covered = gx >= 0
                    && gy >= 0
                    && gx < cw as i64
                    && gy < ch as i64
                    && self.layers.counts[(gx as usize, gy as usize)] > 0;
                if !covered {
                    uncovered += 1;
                }
            }
        }
        uncovered as f64 / total as f64
    }

    /// Rendered crop of a fully covered world rectangle.
    pub fn crop(&self, x: i64, y: i64, width: usize, height: usize) -> Result<DenseFrame> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("zero-area mosaic crop"));
        }
        let uncovered = self.uncovered_fraction(x, y, width, height);
        if uncovered > 0.0 {
            return Err(Error::OutOfCoverage {
                uncovered_fraction: uncovered,
            });
        }
        let (values, _) = self.render_region(x, y, width, height);
        Ok(DenseFrame::from_clamped(values))
    }
}

fn footprint(mosaic: &Mosaic, p: &Placement, w: usize, h: usize) -> SparseFrame {
    let (values, mask) = mosaic.render_region(p.x, p.y, w, h);
    SparseFrame::from_parts(values, mask, 0.0, 0.0)
}

/// Mosaic plus the frames that could not be registered.
#[derive(Debug, Clone)]
pub struct StitchResult {
    pub mosaic: Mosaic,
    pub unplaced: Vec<usize>,
}

/// Stitching parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchParams {
    pub pool_factor: usize,
    pub threshold: f64,
    pub min_overlap: f64,
}

impl Default for StitchParams {
    fn default() -> Self {
        StitchParams {
            pool_factor: crate::registration::DEFAULT_POOL_FACTOR,
            threshold: DEFAULT_MATCH_THRESHOLD,
            min_overlap: MIN_STITCH_OVERLAP,
        }
    }
}

/// Registers each frame against the mosaic rendered so far and blends it in.
///
/// A new frame is correlated with the rendered footprint of every frame
/// already placed and goes where the strongest of those peaks puts it.
/// Frame 0 is anchored at the world origin. Frames whose correlation peak
/// stays below `threshold` are reported in [`StitchResult::unplaced`].
pub fn stitch(frames: &[DenseFrame], params: &StitchParams) -> Result<StitchResult> {
    let first = frames.first().ok_or_else(|| Error::invalid("nothing to stitch"))?;
    if frames.iter().any(|f| f.dims() != first.dims()) {
        return Err(Error::invalid("stitched frames must share dimensions"));
    }
    let mut mosaic = Mosaic::new();
    mosaic.place(0, first, 0, 0, 1.0)?;
    let mut unplaced = Vec::new();
    let (w, h) = first.dims();
    for (id, frame) in frames.iter().enumerate().skip(1) {
        let template = SparseFrame::from_dense(frame, 0.0, 0.0);
        // candidate regions: the rendered footprint of every placed frame
        let footprints = mosaic.placements();
        let hits: Vec<Option<(usize, Located)>> = footprints
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let region = footprint(&mosaic, p, w, h);
                match locate_coarse(&template, &region, params.pool_factor, true, params.min_overlap) {
                    Ok(hit) => Ok(hit.map(|l| (i, l))),
                    Err(Error::DegenerateInput(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut best: Option<(usize, Located)> = None;
        for hit in hits.into_iter().flatten() {
            if best.is_none_or(|b| hit.1.score > b.1.score) {
                best = Some(hit);
            }
        }
        let best = best.map(|(i, coarse)| {
            let p = &footprints[i];
            let region = footprint(&mosaic, p, w, h);
            let l = refine_location(&template, &region, coarse, params.pool_factor, true, params.min_overlap);
            (p.x + l.x, p.y + l.y, l.score)
        });
        match best {
            Some((x, y, score)) if score >= params.threshold => {
                log::debug!("frame {id} placed at ({x}, {y}) score {score:.3}");
                mosaic.place(id, frame, x, y, score)?;
            }
            other => {
                log::warn!(
                    "frame {id} left unplaced (score {:.3})",
                    other.map_or(f64::NAN, |b| b.2)
                );
                unplaced.push(id);
            }
        }
    }
    Ok(StitchResult { mosaic, unplaced })
}

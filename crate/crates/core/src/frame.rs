//! Frame types shared by every stage of the pipeline.
//!
//! Coordinates follow image convention: `x` is the column index growing to
//! the right, `y` the row index growing downward. A [`Displacement`] of
//! `(dx, dy)` carries content found at `(x, y)` to `(x + dx, y + dy)`.

use crate::error::{Error, Result};

/// Row-major 2-D buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Copy of the `width`×`height` block whose top-left corner is `(x0, y0)`.
    pub fn sub_grid(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Grid<T>> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "block {width}x{height} at ({x0},{y0}) exceeds {}x{} grid",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.row(y)[x0..x0 + width]);
        }
        Ok(Grid { width, height, data })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Grid<T> {
        Grid::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y).clone())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;

    #[inline]
    fn index(&self, (x, y): (usize, usize)) -> &T {
        &self.data[y * self.width + x]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        &mut self.data[y * self.width + x]
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Rect::new(0, 0, width, height)
    }

    fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x + self.width > width || self.y + self.height > height {
            return Err(Error::invalid(format!(
                "region {:?} is outside the {width}x{height} frame",
                self
            )));
        }
        Ok(())
    }
}

fn check_unit_range(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
    }
    Ok(())
}

/// One Lissajous-scanned frame: measured intensities plus the measurement mask.
///
/// Unmeasured pixels always hold intensity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFrame {
    intensity: Grid<f64>,
    mask: Grid<bool>,
    pub timestamp: f64,
    pub frame_rate: f64,
}

impl SparseFrame {
    pub fn new(intensity: Grid<f64>, mask: Grid<bool>, timestamp: f64, frame_rate: f64) -> Result<Self> {
        if intensity.dims() != mask.dims() {
            return Err(Error::invalid(format!(
                "intensity {:?} and mask {:?} dimensions differ",
                intensity.dims(),
                mask.dims()
            )));
        }
        check_unit_range(intensity.data())?;
        if intensity.data().iter().zip(mask.data()).any(|(&v, &m)| !m && v != 0.0) {
            return Err(Error::invalid("unmeasured pixel with nonzero intensity"));
        }
        Ok(SparseFrame {
            intensity,
            mask,
            timestamp,
            frame_rate,
        })
    }

    /// Builds a frame whose invariants the caller already guarantees.
    pub(crate) fn from_parts(intensity: Grid<f64>, mask: Grid<bool>, timestamp: f64, frame_rate: f64) -> Self {
        debug_assert_eq!(intensity.dims(), mask.dims());
        SparseFrame {
            intensity,
            mask,
            timestamp,
            frame_rate,
        }
    }

    pub fn unmeasured(width: usize, height: usize, timestamp: f64, frame_rate: f64) -> Self {
        SparseFrame::from_parts(
            Grid::new(width, height, 0.0),
            Grid::new(width, height, false),
            timestamp,
            frame_rate,
        )
    }

    /// Every pixel of `dense` marked as measured.
    pub fn from_dense(dense: &DenseFrame, timestamp: f64, frame_rate: f64) -> Self {
        let (w, h) = dense.intensity().dims();
        SparseFrame::from_parts(dense.intensity().clone(), Grid::new(w, h, true), timestamp, frame_rate)
    }

    /// Keeps `dense` only where `mask` is set.
    pub fn masked(dense: &DenseFrame, mask: Grid<bool>, timestamp: f64, frame_rate: f64) -> Result<Self> {
        if dense.intensity().dims() != mask.dims() {
            return Err(Error::invalid("mask and frame dimensions differ"));
        }
        let intensity = Grid::from_fn(mask.width(), mask.height(), |x, y| {
            if mask[(x, y)] {
                dense.intensity()[(x, y)]
            } else {
                0.0
            }
        });
        Ok(SparseFrame::from_parts(intensity, mask, timestamp, frame_rate))
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.intensity.dims()
    }

    pub fn intensity(&self) -> &Grid<f64> {
        &self.intensity
    }

    pub fn mask(&self) -> &Grid<bool> {
        &self.mask
    }

    #[inline]
    pub fn is_measured(&self, x: usize, y: usize) -> bool {
        self.mask[(x, y)]
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> Option<f64> {
        if self.mask[(x, y)] {
            Some(self.intensity[(x, y)])
        } else {
            None
        }
    }

    pub fn measured_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m).count()
    }

    /// Fraction of pixels carrying a measurement.
    pub fn coverage(&self) -> f64 {
        let n = self.mask.data().len();
        if n == 0 {
            0.0
        } else {
            self.measured_count() as f64 / n as f64
        }
    }

    /// Window of this frame as a new frame with the same timing.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<SparseFrame> {
        Ok(SparseFrame::from_parts(
            self.intensity.sub_grid(x0, y0, width, height)?,
            self.mask.sub_grid(x0, y0, width, height)?,
            self.timestamp,
            self.frame_rate,
        ))
    }

    pub fn into_parts(self) -> (Grid<f64>, Grid<bool>) {
        (self.intensity, self.mask)
    }
}

/// Fully populated grayscale frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFrame {
    intensity: Grid<f64>,
}

impl DenseFrame {
    pub fn new(intensity: Grid<f64>) -> Result<Self> {
        check_unit_range(intensity.data())?;
        Ok(DenseFrame { intensity })
    }

    /// Clamps every value into [0, 1]; non-finite values become 0.
    pub fn from_clamped(mut intensity: Grid<f64>) -> Self {
        for v in intensity.data_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        DenseFrame { intensity }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        DenseFrame::from_clamped(Grid::new(width, height, value))
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.intensity.dims()
    }

    pub fn intensity(&self) -> &Grid<f64> {
        &self.intensity
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.intensity
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<DenseFrame> {
        Ok(DenseFrame {
            intensity: self.intensity.sub_grid(x0, y0, width, height)?,
        })
    }
}

/// Ordered frames sharing dimensions and a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<SparseFrame>,
    frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<SparseFrame>, frame_rate: f64) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if let Some(first) = frames.first() {
            let dims = first.dims();
            let period = 1.0 / frame_rate;
            for (i, pair) in frames.windows(2).enumerate() {
                let gap = pair[1].timestamp - pair[0].timestamp;
                if (gap - period).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "frames {i} and {} are {gap} s apart, expected {period} s",
                        i + 1
                    )));
                }
            }
            if frames.iter().any(|f| f.dims() != dims) {
                return Err(Error::invalid("frames differ in dimensions"));
            }
        }
        Ok(FrameSequence { frames, frame_rate })
    }

    pub fn frames(&self) -> &[SparseFrame] {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| f.dims())
    }

    pub fn into_frames(self) -> Vec<SparseFrame> {
        self.frames
    }
}

/// Integer translation with the correlation peak that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub dx: i64,
    pub dy: i64,
    pub score: f64,
}

impl Displacement {
    pub fn new(dx: i64, dy: i64, score: f64) -> Self {
        Displacement { dx, dy, score }
    }

    pub fn zero() -> Self {
        Displacement::new(0, 0, 1.0)
    }

    /// Canonical representative of a circular shift: components wrap into
    /// `[-n/2, n/2)`.
    pub fn from_circular(ix: usize, iy: usize, width: usize, height: usize, score: f64) -> Self {
        Displacement::new(canonical_offset(ix, width), canonical_offset(iy, height), score)
    }

    pub fn inverse(&self) -> Self {
        Displacement::new(-self.dx, -self.dy, self.score)
    }

    /// Displacement applied after `self`.
    pub fn then(&self, next: &Displacement) -> Self {
        Displacement::new(self.dx + next.dx, self.dy + next.dy, next.score)
    }

    pub fn scaled(&self, factor: i64) -> Self {
        Displacement::new(self.dx * factor, self.dy * factor, self.score)
    }
}

pub(crate) fn canonical_offset(index: usize, n: usize) -> i64 {
    let i = index as i64;
    let n = n as i64;
    if 2 * i >= n {
        i - n
    } else {
        i
    }
}

/// Translates the measured content of `frame` by `d`.
///
/// Content pushed off the grid is dropped and the vacated area is unmeasured.
pub fn shift_frame(frame: &SparseFrame, d: &Displacement) -> Result<SparseFrame> {
    let (w, h) = frame.dims();
    if d.dx.unsigned_abs() as usize >= w.max(1) || d.dy.unsigned_abs() as usize >= h.max(1) {
        return Err(Error::invalid(format!(
            "displacement ({}, {}) out of range for {w}x{h} frame",
            d.dx, d.dy
        )));
    }
    let mut intensity = Grid::new(w, h, 0.0);
    let mut mask = Grid::new(w, h, false);
    // target x range whose source x - dx is inside the grid
    let x_lo = d.dx.max(0) as usize;
    let x_hi = (w as i64 + d.dx.min(0)) as usize;
    let y_lo = d.dy.max(0) as usize;
    let y_hi = (h as i64 + d.dy.min(0)) as usize;
    for y in y_lo..y_hi {
        let sy = (y as i64 - d.dy) as usize;
        for x in x_lo..x_hi {
            let sx = (x as i64 - d.dx) as usize;
            if frame.mask[(sx, sy)] {
                mask[(x, y)] = true;
                intensity[(x, y)] = frame.intensity[(sx, sy)];
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

/// Anything that can report a per-pixel measurement.
pub trait Samples {
    fn dims(&self) -> (usize, usize);
    fn sample(&self, x: usize, y: usize) -> Option<f64>;
}

impl Samples for SparseFrame {
    fn dims(&self) -> (usize, usize) {
        SparseFrame::dims(self)
    }

    #[inline]
    fn sample(&self, x: usize, y: usize) -> Option<f64> {
        self.value(x, y)
    }
}

impl Samples for DenseFrame {
    fn dims(&self) -> (usize, usize) {
        DenseFrame::dims(self)
    }

    #[inline]
    fn sample(&self, x: usize, y: usize) -> Option<f64> {
        Some(self.intensity[(x, y)])
    }
}

/// Mean squared difference over the pixels of `region` measured in both inputs.
///
/// Returns `Ok(None)` when the two inputs share no measured pixel there.
pub fn masked_mse<A: Samples + ?Sized, B: Samples + ?Sized>(a: &A, b: &B, region: Rect) -> Result<Option<f64>> {
    let (w, h) = a.dims();
    if b.dims() != (w, h) {
        return Err(Error::invalid("masked_mse inputs differ in dimensions"));
    }
    region.check_within(w, h)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in region.y..region.y + region.height {
        for x in region.x..region.x + region.width {
            if let (Some(va), Some(vb)) = (a.sample(x, y), b.sample(x, y)) {
                let d = va - vb;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

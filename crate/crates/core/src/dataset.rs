//! Paired LQ/HQ training data: block-wise consistency checks, rejection
//! sampled crops, and the on-disk dataset layout.
//!
//! Layout under the output root:
//!
//! ```text
//! clips/<clip_id>/lq/<t>.pgm     16-bit sparse intensities (holes are 0)
//! clips/<clip_id>/mask/<t>.pgm   8-bit, 255 = measured
//! clips/<clip_id>/hq/<t>.pgm     16-bit mosaic crop matched to frame t
//! manifest.jsonl                 one ManifestEntry per line
//! report.json                    BuildReport
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DenseFrame, Grid, Rect, SparseFrame};
use crate::fusion::{augment_frame, fill_bilinear, WINDOW_SIZE};
use crate::imageio;
use crate::lissajous::{
    acquire_sequence, ground_truth_crop, random_walk_motion, sample_bilinear, spiral_motion, LissajousConfig,
    MotionPath,
};
use crate::matching::{expand_matches, match_phase, MatchRecord, TemplateParams};
use crate::mosaic::{stitch, StitchParams};
use crate::registration::{RegistrationSource, DEFAULT_MATCH_THRESHOLD, DEFAULT_POOL_FACTOR};
use crate::texture::tissue_texture;

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_BLOCK_SIZE: usize = 8;
pub const DEFAULT_MSE_THRESHOLD: f64 = 0.01;
/// Crops whose flagged area exceeds this fraction are rejected.
pub const DEFAULT_REJECT_FRACTION: f64 = 0.125;
pub const DEFAULT_MAX_ATTEMPTS: usize = 20;
/// Frames per LQ training window (t-4..=t).
pub const LQ_WINDOW: usize = WINDOW_SIZE + 1;

/// Per-block consistency flags between an HQ patch and an LQ patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFlags {
    /// `true` where the block MSE exceeds the threshold.
    pub flags: Grid<bool>,
    pub fraction: f64,
}

impl BlockFlags {
    pub fn flagged(&self) -> usize {
        self.flags.data().iter().filter(|&&f| f).count()
    }
}

/// Splits the patch into `block`×`block` tiles and flags every tile whose
/// MSE over measured LQ pixels exceeds `mse_threshold`. Tiles without
/// measured pixels are never flagged.
pub fn inconsistency_mask(
    hq: &DenseFrame,
    aug_lq: &SparseFrame,
    block: usize,
    mse_threshold: f64,
) -> Result<BlockFlags> {
    let (w, h) = hq.dims();
    if aug_lq.dims() != (w, h) {
        return Err(Error::invalid("HQ and LQ patches differ in dimensions"));
    }
    if block == 0 || w % block != 0 || h % block != 0 {
        return Err(Error::invalid(format!(
            "{w}x{h} patch is not divisible into {block}-pixel blocks"
        )));
    }
    let (bw, bh) = (w / block, h / block);
    let mut flags = Grid::new(bw, bh, false);
    for by in 0..bh {
        for bx in 0..bw {
            let region = Rect::new(bx * block, by * block, block, block);
            let mse = crate::frame::masked_mse(hq, aug_lq, region)?;
            flags[(bx, by)] = mse.is_some_and(|m| m > mse_threshold);
        }
    }
    let fraction = flags.data().iter().filter(|&&f| f).count() as f64 / (bw * bh) as f64;
    Ok(BlockFlags { flags, fraction })
}

/// Rejection-sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub size: usize,
    pub block: usize,
    pub mse_threshold: f64,
    pub reject_fraction: f64,
    pub max_attempts: usize,
    /// Both patches are mean-pooled over the LQ-measured pixels by this
    /// factor before the block comparison. 1 compares at full resolution.
    pub compare_pool: usize,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            size: DEFAULT_PATCH_SIZE,
            block: DEFAULT_BLOCK_SIZE,
            mse_threshold: DEFAULT_MSE_THRESHOLD,
            reject_fraction: DEFAULT_REJECT_FRACTION,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            compare_pool: 1,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.block == 0 || self.compare_pool == 0 || self.max_attempts == 0 {
            return Err(Error::invalid(
                "patch size, block, compare_pool and max_attempts must be positive",
            ));
        }
        if !self.size.is_multiple_of(self.block * self.compare_pool) {
            return Err(Error::invalid(format!(
                "patch size {} is not a multiple of block {} x compare_pool {}",
                self.size, self.block, self.compare_pool
            )));
        }
        if !(self.mse_threshold >= 0.0) {
            return Err(Error::invalid("mse_threshold must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.reject_fraction) {
            return Err(Error::invalid("reject_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A curated training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// Raw LQ crops, oldest first, ending at the matched frame.
    pub lq_window: Vec<SparseFrame>,
    pub hq_patch: DenseFrame,
    pub crop_offset: (usize, usize),
    pub inconsistent_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchSample {
    Accepted {
        pair: PatchPair,
        attempts: usize,
    },
    /// Every draw exceeded the rejection fraction; `best` is the draw with the
    /// lowest inconsistent fraction (earliest on ties).
    Failed {
        best: PatchPair,
        attempts: usize,
    },
}

impl PatchSample {
    pub fn pair(&self) -> &PatchPair {
        match self {
            PatchSample::Accepted { pair, .. } => pair,
            PatchSample::Failed { best, .. } => best,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, PatchSample::Accepted { .. })
    }
}

fn pool_for_comparison(lq: &SparseFrame, hq: &DenseFrame, f: usize) -> Result<(SparseFrame, DenseFrame)> {
    if f == 1 {
        return Ok((lq.clone(), hq.clone()));
    }
    let (w, h) = (lq.width() / f, lq.height() / f);
    let mut lv = Grid::new(w, h, 0.0);
    let mut hv = Grid::new(w, h, 0.0);
    let mut mask = Grid::new(w, h, false);
    for cy in 0..h {
        for cx in 0..w {
            let (mut sl, mut sh, mut n) = (0.0, 0.0, 0usize);
            for y in cy * f..(cy + 1) * f {
                for x in cx * f..(cx + 1) * f {
                    if let Some(v) = lq.value(x, y) {
                        sl += v;
                        sh += hq.intensity()[(x, y)];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                lv[(cx, cy)] = sl / n as f64;
                hv[(cx, cy)] = sh / n as f64;
                mask[(cx, cy)] = true;
            }
        }
    }
    Ok((
        SparseFrame::new(lv, mask, lq.timestamp, lq.frame_rate)?,
        DenseFrame::from_clamped(hv),
    ))
}

/// Fraction of flagged blocks for the crop of `aug_lq`/`hq` at `(x, y)`.
pub fn crop_inconsistency(
    aug_lq: &SparseFrame,
    hq: &DenseFrame,
    x: usize,
    y: usize,
    params: &PatchParams,
) -> Result<BlockFlags> {
    let s = params.size;
    let (lq, hq) = pool_for_comparison(&aug_lq.crop(x, y, s, s)?, &hq.crop(x, y, s, s)?, params.compare_pool)?;
    inconsistency_mask(&hq, &lq, params.block, params.mse_threshold)
}

/// Draws uniformly random crop offsets until the crop's inconsistent
/// fraction is at most `reject_fraction`, for at most `max_attempts` draws.
///
/// `lq_window` holds the raw LQ frames ending at the matched frame;
/// `aug_lq` is the augmented matched frame used for the consistency test.
pub fn sample_patch(
    lq_window: &[SparseFrame],
    aug_lq: &SparseFrame,
    hq: &DenseFrame,
    params: &PatchParams,
    seed: u64,
) -> Result<PatchSample> {
    params.validate()?;
    let (w, h) = hq.dims();
    if aug_lq.dims() != (w, h) || lq_window.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::invalid("LQ window, augmented LQ and HQ must share dimensions"));
    }
    if lq_window.is_empty() {
        return Err(Error::invalid("empty LQ window"));
    }
    let s = params.size;
    if w < s || h < s {
        return Err(Error::invalid(format!(
            "{w}x{h} frames are smaller than the {s}-pixel patch"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<((usize, usize), f64)> = None;
    let mut accepted = None;
    let mut attempts = 0;
    while attempts < params.max_attempts {
        attempts += 1;
        let x = rng.random_range(0..=w - s);
        let y = rng.random_range(0..=h - s);
        let fraction = crop_inconsistency(aug_lq, hq, x, y, params)?.fraction;
        if best.is_none_or(|(_, f)| fraction < f) {
            best = Some(((x, y), fraction));
        }
        if fraction <= params.reject_fraction {
            accepted = Some(((x, y), fraction));
            break;
        }
    }
    let ((x, y), fraction) = accepted.or(best).expect("at least one attempt");
    let pair = PatchPair {
        lq_window: lq_window.iter().map(|f| f.crop(x, y, s, s)).collect::<Result<_>>()?,
        hq_patch: hq.crop(x, y, s, s)?,
        crop_offset: (x, y),
        inconsistent_fraction: fraction,
    };
    Ok(if accepted.is_some() {
        PatchSample::Accepted { pair, attempts }
    } else {
        log::warn!("no consistent crop in {attempts} attempts (best fraction {fraction:.4})");
        PatchSample::Failed { best: pair, attempts }
    })
}

/// Reverses frame order; contents are untouched.
pub fn temporal_reversal(window: &[SparseFrame]) -> Vec<SparseFrame> {
    window.iter().rev().cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Assigns whole clips to splits: `floor(n * train_ratio)` clips go to
/// training, clamped so both splits are non-empty when there are at least
/// two clips. The clip order is shuffled with `seed`.
pub fn split_clips(clip_ids: &[String], train_ratio: f64, seed: u64) -> BTreeMap<String, Split> {
    let n = clip_ids.len();
    let mut n_train = (n as f64 * train_ratio).floor() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n_train.min(n);
    }
    let mut order: Vec<&String> = clip_ids.iter().collect();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < n_train { Split::Train } else { Split::Val }))
        .collect()
}

/// One accepted training pair. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frame_id: usize,
    pub lq_path: String,
    pub mask_path: String,
    pub hq_path: String,
    /// Position of the LQ frame in the clip's mosaic.
    pub offset: [i64; 2],
    pub split: Split,
    /// Top-left corner of the accepted crop inside the frame.
    pub patch_offset: [usize; 2],
    pub inconsistent_fraction: f64,
    pub score: f64,
    pub method: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub split: Option<Split>,
    pub lq_frames: usize,
    pub hq_frames: usize,
    pub unplaced_hq: Vec<usize>,
    pub phase_matches: usize,
    pub template_matches: usize,
    pub accepted: usize,
    /// Matched frames whose mosaic crop was not fully covered.
    pub uncovered: Vec<usize>,
    /// Matched frames where rejection sampling ran out of attempts.
    pub sampling_failures: Vec<usize>,
    /// Largest matched-offset error against the simulated motion.
    pub max_offset_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub clips: Vec<ClipReport>,
    pub errors: Vec<String>,
    pub train_entries: usize,
    pub val_entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub report: BuildReport,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Where the clips come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// One simulated clip per texture. Textures are read from a directory of
    /// graymaps (cycled if there are fewer than `clips`), or generated
    /// procedurally when no directory is given.
    Synthetic { textures: Option<PathBuf> },
    /// Pre-acquired clips laid out as `<root>/<clip>/{lq,mask,hq}/<t>.pgm`,
    /// where `hq` holds the dense frames to stitch.
    Real { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// LQ scanner; its frame size is also the HQ frame size.
    pub scanner: LissajousConfig,
    pub hq_frame_rate: f64,
    pub clips: usize,
    pub lq_frames: usize,
    pub hq_frames: usize,
    pub hq_overlap: f64,
    /// Largest per-frame LQ step in pixels along each axis.
    pub max_step: u32,
    pub pool_factor: usize,
    pub match_threshold: f64,
    pub registration_source: RegistrationSource,
    pub template: TemplateParams,
    pub patch: PatchParams,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scanner: LissajousConfig::default(),
            hq_frame_rate: 2.0,
            clips: 16,
            lq_frames: 20,
            hq_frames: 9,
            hq_overlap: 0.2,
            max_step: 2,
            pool_factor: DEFAULT_POOL_FACTOR,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            registration_source: RegistrationSource::default(),
            template: TemplateParams::default(),
            patch: PatchParams::default(),
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scanner.validate()?;
        self.patch.validate()?;
        if self.scanner.width < self.patch.size || self.scanner.height < self.patch.size {
            return Err(Error::invalid("frames are smaller than the patch size"));
        }
        if !(self.hq_frame_rate > 0.0) {
            return Err(Error::invalid("hq_frame_rate must be positive"));
        }
        if self.lq_frames == 0 || self.hq_frames == 0 || self.pool_factor == 0 {
            return Err(Error::invalid("lq_frames, hq_frames and pool_factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::invalid("train_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.hq_overlap) {
            return Err(Error::invalid("hq_overlap must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Independent seed for a (stream, index) pair.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Loaded or simulated inputs for one clip.
struct ClipInput {
    id: String,
    lq: Vec<SparseFrame>,
    hq: Vec<DenseFrame>,
    /// Simulated LQ positions in the coordinates of HQ frame 0.
    truth: Option<Vec<(f64, f64)>>,
}

/// Bilinear upscale so the texture is at least `w`×`h`.
pub fn fit_texture(tex: &DenseFrame, w: usize, h: usize) -> DenseFrame {
    let (tw, th) = tex.dims();
    if tw >= w && th >= h {
        return tex.clone();
    }
    let scale = (w as f64 / tw as f64).max(h as f64 / th as f64);
    let (nw, nh) = ((tw as f64 * scale).ceil() as usize, (th as f64 * scale).ceil() as usize);
    let grid = Grid::from_fn(nw, nh, |x, y| {
        let sx = (x as f64 / scale).min((tw - 1) as f64);
        let sy = (y as f64 / scale).min((th - 1) as f64);
        sample_bilinear(tex.intensity(), sx, sy).unwrap_or(0.0)
    });
    DenseFrame::from_clamped(grid)
}

/// A simulated acquisition of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedClip {
    /// Sparse frames from `cfg.scanner` following a random walk.
    pub lq: Vec<SparseFrame>,
    /// Noise-free scene crops at each LQ frame's mid-frame position.
    pub lq_truth: Vec<DenseFrame>,
    /// LQ positions relative to HQ frame 0.
    pub lq_offsets: Vec<(f64, f64)>,
    /// Dense frames on a square spiral, each acquired stationary at
    /// `cfg.hq_frame_rate` and hole-filled.
    pub hq: Vec<DenseFrame>,
}

/// Simulates one clip over `texture` (upscaled when too small), or over a
/// procedural texture when `texture` is `None`.
pub fn simulate_clip(texture: Option<&DenseFrame>, cfg: &DatasetConfig, seed: u64) -> Result<SimulatedClip> {
    cfg.scanner.validate()?;
    if cfg.lq_frames == 0 || cfg.hq_frames == 0 {
        return Err(Error::invalid("lq_frames and hq_frames must be positive"));
    }
    let (fw, fh) = (cfg.scanner.width, cfg.scanner.height);
    let fov = fw.max(fh) as f64;
    let spiral = spiral_motion(cfg.hq_frames, fov, cfg.hq_overlap)?;
    let (sx0, sy0, sx1, sy1) = spiral.bounds().expect("hq_frames > 0");
    let reach = (cfg.lq_frames as f64) * cfg.max_step as f64 + 2.0;
    let pad_x = reach - sx0;
    let pad_y = reach - sy0;
    let (sw, sh) = (
        (sx1 - sx0 + 2.0 * reach) as usize + fw + 1,
        (sy1 - sy0 + 2.0 * reach) as usize + fh + 1,
    );
    let scene = match texture {
        Some(t) => fit_texture(t, sw, sh),
        None => tissue_texture(sw, sh, seed),
    };

    let hq_cfg = cfg.scanner.at_frame_rate(cfg.hq_frame_rate);
    let hq: Vec<DenseFrame> = spiral
        .offsets
        .par_iter()
        .enumerate()
        .map(|(k, &(ox, oy))| {
            let motion = MotionPath::stationary(1).translated(ox + pad_x, oy + pad_y);
            let seq = acquire_sequence(&scene, &hq_cfg, &motion, 1, derive_seed(seed, 2, k as u64))?;
            fill_bilinear(&seq.frames()[0])
        })
        .collect::<Result<_>>()?;

    // the LQ walk starts on HQ frame 0
    let (hx, hy) = spiral.offsets[0];
    let walk = random_walk_motion(cfg.lq_frames, cfg.max_step, derive_seed(seed, 3, 0));
    let lq_offsets: Vec<(f64, f64)> = walk.offsets.iter().map(|&(x, y)| (x - hx, y - hy)).collect();
    let motion = walk.translated(pad_x + hx, pad_y + hy);
    let lq = acquire_sequence(&scene, &cfg.scanner, &motion, cfg.lq_frames, derive_seed(seed, 4, 0))?.into_frames();
    let lq_truth = (0..cfg.lq_frames)
        .map(|k| {
            let mid = motion.offset_at((k as f64 + 0.5) / cfg.scanner.frame_rate, cfg.scanner.frame_rate);
            ground_truth_crop(&scene, mid, fw, fh)
        })
        .collect::<Result<_>>()?;
    Ok(SimulatedClip {
        lq,
        lq_truth,
        lq_offsets,
        hq,
    })
}

fn load_real_clip(root: &Path, id: &str, frame_rate: f64, errors: &mut Vec<String>) -> Option<ClipInput> {
    let dir = root.join(id);
    let mut lq = Vec::new();
    let lq_files = match imageio::list_graymaps(&dir.join("lq")) {
        Ok(f) => f,
        Err(e) => {
            errors.push(e.to_string());
            return None;
        }
    };
    for (t, path) in lq_files.iter().enumerate() {
        let mask = dir.join("mask").join(path.file_name().expect("listed file"));
        match imageio::read_sparse(path, &mask, t as f64 / frame_rate, frame_rate) {
            Ok(f) => lq.push(f),
            Err(e) => {
                // keep temporal order intact: a broken frame ends the clip
                errors.push(e.to_string());
                break;
            }
        }
    }
    let mut hq = Vec::new();
    match imageio::list_graymaps(&dir.join("hq")) {
        Ok(files) => {
            for path in files {
                match imageio::read_dense(&path) {
                    Ok(f) => hq.push(f),
                    Err(e) => errors.push(e.to_string()),
                }
            }
        }
        Err(e) => errors.push(e.to_string()),
    }
    if lq.is_empty() || hq.is_empty() {
        errors.push(format!("{}: clip has no usable LQ or HQ frames", dir.display()));
        return None;
    }
    Some(ClipInput {
        id: id.to_string(),
        lq,
        hq,
        truth: None,
    })
}

struct ClipOutput {
    entries: Vec<ManifestEntry>,
    report: ClipReport,
}

fn rel(clip: &str, kind: &str, t: usize) -> String {
    format!("clips/{clip}/{kind}/{t}.pgm")
}

fn process_clip(input: ClipInput, split: Split, index: usize, cfg: &DatasetConfig, out: &Path) -> Result<ClipOutput> {
    let ClipInput { id, lq, hq, truth } = input;
    let pool = cfg.pool_factor;
    let mut report = ClipReport {
        clip_id: id.clone(),
        split: Some(split),
        lq_frames: lq.len(),
        hq_frames: hq.len(),
        ..ClipReport::default()
    };
    if lq.iter().any(|f| f.dims() != lq[0].dims()) {
        return Err(Error::invalid(format!("clip {id}: LQ frames differ in size")));
    }

    let augmented: Vec<SparseFrame> = (0..lq.len())
        .into_par_iter()
        .map(|t| {
            let past = &lq[t.saturating_sub(WINDOW_SIZE)..t];
            let future = &lq[t + 1..(t + 1 + WINDOW_SIZE).min(lq.len())];
            augment_frame(&lq[t], past, future, pool)
        })
        .collect::<Result<_>>()?;

    let stitched = stitch(
        &hq,
        &StitchParams {
            pool_factor: pool,
            ..StitchParams::default()
        },
    )?;
    report.unplaced_hq = stitched.unplaced;
    let mosaic = stitched.mosaic;

    let probes = match cfg.registration_source {
        RegistrationSource::Augmented => &augmented,
        RegistrationSource::Raw => &lq,
    };
    let seeds: Vec<MatchRecord> = probes
        .par_iter()
        .enumerate()
        .map(|(t, f)| match_phase(t, f, &mosaic, pool, cfg.match_threshold))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    report.phase_matches = seeds.len();
    let matches = expand_matches(&seeds, probes, &mosaic, &cfg.template);
    report.template_matches = matches.len() - seeds.len();

    if let Some(truth) = &truth {
        report.max_offset_error = matches
            .iter()
            .map(|m| {
                let (tx, ty) = truth[m.frame_id];
                (m.x as f64 - tx).abs().max((m.y as f64 - ty).abs())
            })
            .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    }

    let (fw, fh) = lq[0].dims();
    let samples: Vec<(MatchRecord, Option<(DenseFrame, PatchSample)>)> = matches
        .par_iter()
        .map(|m| {
            let hq_crop = match mosaic.crop(m.x, m.y, fw, fh) {
                Ok(c) => c,
                Err(Error::OutOfCoverage { .. }) => return Ok((*m, None)),
                Err(e) => return Err(e),
            };
            let t = m.frame_id;
            let window = &lq[t.saturating_sub(LQ_WINDOW - 1)..=t];
            let seed = derive_seed(cfg.seed, 5 + index as u64, t as u64);
            let sample = sample_patch(window, &augmented[t], &hq_crop, &cfg.patch, seed)?;
            Ok((*m, Some((hq_crop, sample))))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for (m, result) in samples {
        let t = m.frame_id;
        match result {
            None => report.uncovered.push(t),
            Some((_, PatchSample::Failed { .. })) => report.sampling_failures.push(t),
            Some((hq_crop, PatchSample::Accepted { pair, .. })) => {
                imageio::write_dense(&out.join(rel(&id, "hq", t)), &hq_crop)?;
                entries.push(ManifestEntry {
                    clip_id: id.clone(),
                    frame_id: t,
                    lq_path: rel(&id, "lq", t),
                    mask_path: rel(&id, "mask", t),
                    hq_path: rel(&id, "hq", t),
                    offset: [m.x, m.y],
                    split,
                    patch_offset: [pair.crop_offset.0, pair.crop_offset.1],
                    inconsistent_fraction: pair.inconsistent_fraction,
                    score: m.score,
                    method: m.method.to_string(),
                });
            }
        }
    }
    report.accepted = entries.len();
    if !entries.is_empty() {
        for (t, f) in lq.iter().enumerate() {
            imageio::write_sparse(&out.join(rel(&id, "lq", t)), &out.join(rel(&id, "mask", t)), f)?;
        }
    }
    Ok(ClipOutput { entries, report })
}

fn write_outputs(out: &Path, entries: &[ManifestEntry], report: &BuildReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = String::new();
    for e in entries {
        manifest.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        manifest.push('\n');
    }
    let path = out.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs augmentation, stitching, matching and patch sampling for every clip
/// and writes the dataset under `out`.
///
/// Clips are processed in parallel; outputs are ordered by clip id and
/// frame id, so identical inputs produce identical files. Per-clip failures
/// are recorded in the report and do not stop other clips. An empty result
/// still writes the (empty) manifest and report, then fails with
/// [`Error::EmptyDataset`].
pub fn build_dataset(source: &DatasetSource, cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut errors = Vec::new();
    let inputs: Vec<Option<ClipInput>> = match source {
        DatasetSource::Synthetic { textures } => {
            let textures: Option<Vec<DenseFrame>> = match textures {
                None => None,
                Some(dir) => {
                    let mut loaded = Vec::new();
                    for path in imageio::list_graymaps(dir)? {
                        match imageio::read_dense(&path) {
                            Ok(t) => loaded.push(t),
                            Err(e) => errors.push(e.to_string()),
                        }
                    }
                    Some(loaded)
                }
            };
            let n = match &textures {
                Some(t) if t.is_empty() => 0,
                _ => cfg.clips,
            };
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let tex = textures.as_ref().map(|t| &t[i % t.len()]);
                    let sim = simulate_clip(tex, cfg, derive_seed(cfg.seed, 1, i as u64))?;
                    Ok(ClipInput {
                        id: format!("clip_{i:03}"),
                        lq: sim.lq,
                        hq: sim.hq,
                        truth: Some(sim.lq_offsets),
                    })
                })
                .collect::<Vec<Result<ClipInput>>>()
                .into_iter()
                .map(|r| r.map_err(|e| errors.push(e.to_string())).ok())
                .collect()
        }
        DatasetSource::Real { root } => {
            let mut ids: Vec<String> = fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().to_str().map(str::to_string))
                .collect();
            ids.sort();
            ids.iter()
                .map(|id| load_real_clip(root, id, cfg.scanner.frame_rate, &mut errors))
                .collect()
        }
    };
    let inputs: Vec<ClipInput> = inputs.into_iter().flatten().collect();
    let ids: Vec<String> = inputs.iter().map(|c| c.id.clone()).collect();
    let splits = split_clips(&ids, cfg.train_ratio, cfg.seed);

    let outputs: Vec<(String, Result<ClipOutput>)> = inputs
        .into_par_iter()
        .enumerate()
        .map(|(i, c)| {
            let id = c.id.clone();
            let split = splits[&id];
            (id, process_clip(c, split, i, cfg, out))
        })
        .collect();

    let mut report = BuildReport::default();
    let mut entries = Vec::new();
    for (id, result) in outputs {
        match result {
            Ok(o) => {
                entries.extend(o.entries);
                report.clips.push(o.report);
            }
            Err(e) => {
                errors.push(format!("clip {id}: {e}"));
                report.clips.push(ClipReport {
                    clip_id: id,
                    ..ClipReport::default()
                });
            }
        }
    }
    report.errors = errors;
    report.train_entries = entries.iter().filter(|e| e.split == Split::Train).count();
    report.val_entries = entries.len() - report.train_entries;
    write_outputs(out, &entries, &report)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} clips, {} errors",
            report.clips.len(),
            report.errors.len()
        )));
    }
    Ok(DatasetManifest { entries, report })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(entries)
}

/// Checks a written dataset: every referenced file parses with consistent
/// dimensions, no clip appears in both splits, and every entry's
/// inconsistent fraction is within `reject_fraction`.
pub fn validate_dataset(root: &Path, reject_fraction: f64) -> Result<Vec<ManifestEntry>> {
    let manifest = root.join("manifest.jsonl");
    let entries = read_manifest(&manifest)?;
    let bad = |reason: String| Error::Format {
        kind: "manifest",
        path: manifest.clone(),
        reason,
    };
    let mut clip_split: BTreeMap<&str, Split> = BTreeMap::new();
    for e in &entries {
        if *clip_split.entry(&e.clip_id).or_insert(e.split) != e.split {
            return Err(bad(format!("clip {} appears in both splits", e.clip_id)));
        }
        if !(e.inconsistent_fraction <= reject_fraction) {
            return Err(bad(format!(
                "{}/{}: inconsistent fraction {} exceeds {reject_fraction}",
                e.clip_id, e.frame_id, e.inconsistent_fraction
            )));
        }
        let lq = imageio::read_sparse(&root.join(&e.lq_path), &root.join(&e.mask_path), 0.0, 1.0)?;
        let hq = imageio::read_dense(&root.join(&e.hq_path))?;
        if lq.dims() != hq.dims() {
            return Err(bad(format!("{}/{}: LQ and HQ sizes differ", e.clip_id, e.frame_id)));
        }
    }
    Ok(entries)
}

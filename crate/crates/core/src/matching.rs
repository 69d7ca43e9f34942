//! Locating LQ frames inside an HQ mosaic: phase correlation for seeds,
//! masked template matching for temporal propagation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Grid, SparseFrame};
use crate::mosaic::Mosaic;
use crate::registration::{fft_plan, locate, masked_ncc_at};

pub const DEFAULT_SEARCH_RADIUS: usize = 64;
pub const DEFAULT_NCC_THRESHOLD: f64 = 0.3;

/// Frames with less measured support than this are not template matched.
pub const MIN_TEMPLATE_SUPPORT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Phase,
    Template,
}

impl std::fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMethod::Phase => "phase",
            MatchMethod::Template => "template",
        })
    }
}

/// An LQ frame paired with the mosaic subimage at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub frame_id: usize,
    pub x: i64,
    pub y: i64,
    pub score: f64,
    pub method: MatchMethod,
}

/// Locates an augmented LQ frame in the whole mosaic.
///
/// Accepted only when the correlation peak reaches `threshold` and the
/// matched subimage is fully covered.
pub fn match_phase(
    frame_id: usize,
    aug_lq: &SparseFrame,
    mosaic: &Mosaic,
    pool_factor: usize,
    threshold: f64,
) -> Result<Option<MatchRecord>> {
    let (w, h) = aug_lq.dims();
    let (ox, oy, mw, mh) = mosaic.extent();
    if mw < w || mh < h {
        return Ok(None);
    }
    let reference = mosaic.render();
    let hit = match locate(aug_lq, &reference, pool_factor, false, 0.0) {
        Ok(hit) => hit,
        Err(Error::DegenerateInput(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(hit.and_then(|l| {
        let (x, y) = (ox + l.x, oy + l.y);
        (l.score >= threshold && mosaic.uncovered_fraction(x, y, w, h) == 0.0).then_some(MatchRecord {
            frame_id,
            x,
            y,
            score: l.score,
            method: MatchMethod::Phase,
        })
    }))
}

/// Result of a template search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemplateMatch {
    Matched(MatchRecord),
    /// Best NCC stayed below the threshold, or no fully covered crop exists.
    NoMatch,
    /// The frame has no intensity variance (or too little support) to correlate.
    Degenerate,
}

impl TemplateMatch {
    pub fn record(&self) -> Option<MatchRecord> {
        match self {
            TemplateMatch::Matched(r) => Some(*r),
            _ => None,
        }
    }
}

/// Template search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub search_radius: usize,
    pub ncc_threshold: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        TemplateParams {
            search_radius: DEFAULT_SEARCH_RADIUS,
            ncc_threshold: DEFAULT_NCC_THRESHOLD,
        }
    }
}

/// Circular cross-correlation `out[u] = Σ_p a[p] · b[p + u]` on equal-sized grids.
fn cross_correlate(a: &Grid<f64>, b: &Grid<f64>) -> Vec<f64> {
    let (w, h) = a.dims();
    let plan = fft_plan(w, h);
    let fa = plan.forward_real(a.data());
    let mut fb = plan.forward_real(b.data());
    for (pb, pa) in fb.iter_mut().zip(&fa) {
        *pb *= pa.conj();
    }
    plan.inverse(&mut fb);
    fb.iter().map(|c| c.re).collect()
}

/// Masked NCC of the raw LQ frame against mosaic crops within
/// `search_radius` of `prior`.
///
/// Only crops that are fully covered by the mosaic are candidates. All
/// candidate scores come from FFT correlations; the winner's NCC is then
/// recomputed directly.
pub fn match_template(
    frame_id: usize,
    lq: &SparseFrame,
    mosaic: &Mosaic,
    prior: (i64, i64),
    params: &TemplateParams,
) -> TemplateMatch {
    let (w, h) = lq.dims();
    let n = lq.measured_count();
    if (n as f64) < MIN_TEMPLATE_SUPPORT * (w * h) as f64 || n < 2 {
        return TemplateMatch::Degenerate;
    }
    let tvals: Vec<f64> = lq
        .intensity()
        .data()
        .iter()
        .zip(lq.mask().data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let nf = n as f64;
    let st: f64 = tvals.iter().sum();
    let var_t = tvals.iter().map(|v| v * v).sum::<f64>() - st * st / nf;
    if var_t <= 1e-12 * nf {
        return TemplateMatch::Degenerate;
    }

    let r = params.search_radius as i64;
    let (bx, by) = (prior.0 - r, prior.1 - r);
    let (bw, bh) = (w + 2 * params.search_radius, h + 2 * params.search_radius);
    let (values, covered) = mosaic.render_region(bx, by, bw, bh);

    // integral image of uncovered cells for the full-coverage test
    let mut holes = vec![0u32; (bw + 1) * (bh + 1)];
    for y in 0..bh {
        for x in 0..bw {
            holes[(y + 1) * (bw + 1) + x + 1] =
                u32::from(!covered[(x, y)]) + holes[y * (bw + 1) + x + 1] + holes[(y + 1) * (bw + 1) + x]
                    - holes[y * (bw + 1) + x];
        }
    }
    let fully_covered = |ux: usize, uy: usize| {
        let at = |x: usize, y: usize| holes[y * (bw + 1) + x];
        at(ux + w, uy + h) + at(ux, uy) - at(ux + w, uy) - at(ux, uy + h) == 0
    };

    let template = Grid::from_fn(bw, bh, |x, y| {
        if x < w && y < h {
            lq.value(x, y).unwrap_or(0.0)
        } else {
            0.0
        }
    });
    let mask = Grid::from_fn(bw, bh, |x, y| {
        if x < w && y < h && lq.is_measured(x, y) {
            1.0
        } else {
            0.0
        }
    });
    let squares = values.map(|v| v * v);
    let (s_tr, (s_r, s_rr)) = rayon::join(
        || cross_correlate(&template, &values),
        || rayon::join(|| cross_correlate(&mask, &values), || cross_correlate(&mask, &squares)),
    );

    let mut best: Option<(usize, usize, f64)> = None;
    for uy in 0..=2 * params.search_radius {
        for ux in 0..=2 * params.search_radius {
            if !fully_covered(ux, uy) {
                continue;
            }
            let i = uy * bw + ux;
            let var_r = s_rr[i] - s_r[i] * s_r[i] / nf;
            if var_r <= 1e-9 * nf {
                continue;
            }
            let ncc = (s_tr[i] - st * s_r[i] / nf) / (var_t * var_r).sqrt();
            let closer = |a: (usize, usize), b: (usize, usize)| {
                let d = |(x, y): (usize, usize)| x.abs_diff(params.search_radius) + y.abs_diff(params.search_radius);
                d(a) < d(b)
            };
            let better = match best {
                None => true,
                Some((px, py, pv)) => ncc > pv + 1e-12 || ((ncc - pv).abs() <= 1e-12 && closer((ux, uy), (px, py))),
            };
            if better {
                best = Some((ux, uy, ncc));
            }
        }
    }
    let Some((ux, uy, _)) = best else {
        return TemplateMatch::NoMatch;
    };
    let Some((ncc, _)) = masked_ncc_at(lq, &values, &covered, ux as i64, uy as i64) else {
        return TemplateMatch::NoMatch;
    };
    if ncc < params.ncc_threshold {
        return TemplateMatch::NoMatch;
    }
    TemplateMatch::Matched(MatchRecord {
        frame_id,
        x: bx + ux as i64,
        y: by + uy as i64,
        score: ncc,
        method: MatchMethod::Template,
    })
}

/// Propagates matches to temporal neighbours breadth-first.
///
/// Every matched frame proposes its own offset as the prior for frames
/// `t - 1` and `t + 1`. A frame takes the best-scoring proposal of the round
/// in which it is first matched and is never revisited. Frames are indexed by
/// position in `frames`; the output is sorted by frame id.
pub fn expand_matches(
    seeds: &[MatchRecord],
    frames: &[SparseFrame],
    mosaic: &Mosaic,
    params: &TemplateParams,
) -> Vec<MatchRecord> {
    let mut matched: BTreeMap<usize, MatchRecord> = BTreeMap::new();
    for s in seeds {
        let keep = matched.get(&s.frame_id).is_none_or(|m| s.score > m.score);
        if keep && s.frame_id < frames.len() {
            matched.insert(s.frame_id, *s);
        }
    }
    let mut frontier: Vec<usize> = matched.keys().copied().collect();
    while !frontier.is_empty() {
        let mut proposals: Vec<(usize, (i64, i64))> = Vec::new();
        for &t in &frontier {
            let m = matched[&t];
            for nb in [t.checked_sub(1), Some(t + 1)].into_iter().flatten() {
                if nb < frames.len() && !matched.contains_key(&nb) {
                    proposals.push((nb, (m.x, m.y)));
                }
            }
        }
        let results: Vec<(usize, TemplateMatch)> = proposals
            .par_iter()
            .map(|&(id, prior)| (id, match_template(id, &frames[id], mosaic, prior, params)))
            .collect();
        let mut round: BTreeMap<usize, MatchRecord> = BTreeMap::new();
        for (id, result) in results {
            if let Some(rec) = result.record() {
                if round.get(&id).is_none_or(|m| rec.score > m.score) {
                    round.insert(id, rec);
                }
            }
        }
        frontier = round.keys().copied().collect();
        matched.extend(round);
    }
    matched.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::DenseFrame;
    use crate::lissajous::{acquire_sequence, LissajousConfig, MotionPath};
    use crate::texture::tissue_texture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn source_mosaic(seed: u64) -> (DenseFrame, Mosaic) {
        let src = tissue_texture(400, 360, seed);
        let m = Mosaic::from_placements(&[(0, &src, 0, 0)]).unwrap();
        (src, m)
    }

    fn sparse_crop(src: &DenseFrame, x: usize, y: usize, w: usize, h: usize, p: f64, seed: u64) -> SparseFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Grid::from_fn(w, h, |_, _| rng.random_bool(p));
        SparseFrame::masked(&src.crop(x, y, w, h).unwrap(), mask, 0.0, 10.0).unwrap()
    }

    /// Independent exhaustive scan of the masked NCC over the search square.
    fn direct_scan(lq: &SparseFrame, mosaic: &Mosaic, prior: (i64, i64), r: i64) -> (i64, i64, f64) {
        let (w, h) = lq.dims();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for y in prior.1 - r..=prior.1 + r {
            for x in prior.0 - r..=prior.0 + r {
                let Ok(crop) = mosaic.crop(x, y, w, h) else { continue };
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for yy in 0..h {
                    for xx in 0..w {
                        if let Some(v) = lq.value(xx, yy) {
                            a.push(v);
                            b.push(crop.intensity()[(xx, yy)]);
                        }
                    }
                }
                let n = a.len() as f64;
                let ma = a.iter().sum::<f64>() / n;
                let mb = b.iter().sum::<f64>() / n;
                let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
                let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
                let ncc = cov / (va * vb).sqrt();
                if ncc > best.2 {
                    best = (x, y, ncc);
                }
            }
        }
        best
    }

    #[test]
    fn self_match_by_phase() {
        let (src, mosaic) = source_mosaic(1);
        let lq = SparseFrame::from_dense(&src.crop(130, 90, 128, 128).unwrap(), 0.0, 10.0);
        let m = match_phase(3, &lq, &mosaic, 4, 0.05).unwrap().unwrap();
        assert_eq!((m.frame_id, m.x, m.y, m.method), (3, 130, 90, MatchMethod::Phase));
        assert!(m.score >= 0.05);
        assert!(mosaic.crop(m.x, m.y, 128, 128).is_ok());
    }

    #[test]
    fn foreign_tissue_is_not_phase_matched() {
        let (_, mosaic) = source_mosaic(1);
        for seed in 10..14 {
            let other = tissue_texture(256, 256, seed);
            let lq = sparse_crop(&other, 0, 0, 256, 256, 0.7, seed);
            assert_eq!(match_phase(0, &lq, &mosaic, 4, 0.05).unwrap(), None, "seed {seed}");
        }
    }

    #[test]
    fn template_match_at_prior_with_zero_radius() {
        let (src, mosaic) = source_mosaic(2);
        let lq = sparse_crop(&src, 40, 50, 96, 80, 0.3, 1);
        let params = TemplateParams {
            search_radius: 0,
            ncc_threshold: 0.3,
        };
        let rec = match_template(0, &lq, &mosaic, (40, 50), &params).record().unwrap();
        assert_eq!((rec.x, rec.y), (40, 50));
        assert!((rec.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_frame_is_degenerate() {
        let (_, mosaic) = source_mosaic(2);
        let lq = SparseFrame::from_dense(&DenseFrame::constant(64, 64, 0.3), 0.0, 10.0);
        assert_eq!(
            match_template(0, &lq, &mosaic, (10, 10), &TemplateParams::default()),
            TemplateMatch::Degenerate
        );
    }

    #[test]
    fn planted_offset_recovered_and_matches_direct_scan() {
        let (src, mosaic) = source_mosaic(3);
        let lq = sparse_crop(&src, 107, 93, 64, 48, 0.3, 4);
        let params = TemplateParams {
            search_radius: 16,
            ncc_threshold: 0.3,
        };
        let rec = match_template(0, &lq, &mosaic, (100, 93), &params).record().unwrap();
        assert_eq!((rec.x, rec.y), (107, 93));
        let (dx, dy, dv) = direct_scan(&lq, &mosaic, (100, 93), 16);
        assert_eq!((dx, dy), (rec.x, rec.y));
        assert!((dv - rec.score).abs() < 1e-9);
    }

    #[test]
    fn ncc_is_affine_invariant() {
        let (src, mosaic) = source_mosaic(4);
        let lq = sparse_crop(&src, 60, 70, 64, 64, 0.4, 5);
        let (v, m) = lq.clone().into_parts();
        let scaled = SparseFrame::new(
            Grid::from_fn(64, 64, |x, y| if m[(x, y)] { 0.6 * v[(x, y)] + 0.1 } else { 0.0 }),
            m.clone(),
            0.0,
            10.0,
        )
        .unwrap();
        let params = TemplateParams {
            search_radius: 8,
            ncc_threshold: 0.3,
        };
        let a = match_template(0, &lq, &mosaic, (58, 66), &params).record().unwrap();
        let b = match_template(0, &scaled, &mosaic, (58, 66), &params).record().unwrap();
        assert_eq!((a.x, a.y), (b.x, b.y));
        assert!((a.score - b.score).abs() < 1e-6);
    }

    #[test]
    fn search_window_outside_coverage_finds_nothing() {
        let (src, mosaic) = source_mosaic(5);
        let lq = sparse_crop(&src, 0, 0, 64, 64, 0.4, 5);
        let params = TemplateParams {
            search_radius: 10,
            ncc_threshold: 0.3,
        };
        assert_eq!(
            match_template(0, &lq, &mosaic, (2000, 2000), &params),
            TemplateMatch::NoMatch
        );
    }

    #[test]
    fn expansion_trivial_cases() {
        let (src, mosaic) = source_mosaic(6);
        let frames: Vec<SparseFrame> = (0..3)
            .map(|k| sparse_crop(&src, 50 + 3 * k, 60, 64, 64, 0.4, k as u64))
            .collect();
        let seed = MatchRecord {
            frame_id: 0,
            x: 50,
            y: 60,
            score: 0.5,
            method: MatchMethod::Phase,
        };
        assert_eq!(
            expand_matches(&[seed], &frames[..1], &mosaic, &TemplateParams::default()),
            vec![seed]
        );
        let all: Vec<MatchRecord> = (0..3)
            .map(|k| MatchRecord {
                frame_id: k,
                x: 50 + 3 * k as i64,
                y: 60,
                ..seed
            })
            .collect();
        assert_eq!(expand_matches(&all, &frames, &mosaic, &TemplateParams::default()), all);
    }

    #[test]
    fn expansion_from_sparse_seeds() {
        let src = tissue_texture(400, 400, 8);
        let mosaic = Mosaic::from_placements(&[(0, &src, 0, 0)]).unwrap();
        let cfg = LissajousConfig {
            width: 128,
            height: 128,
            ..LissajousConfig::default()
        };
        let mut motion = MotionPath::stationary(40);
        for k in 0..40 {
            motion.offsets[k] = (100.0 + 2.0 * k as f64, 150.0 + k as f64);
        }
        let seq = acquire_sequence(&src, &cfg, &motion, 40, 2).unwrap();
        let seeds: Vec<MatchRecord> = [3usize, 11, 19, 27, 35]
            .iter()
            .map(|&k| MatchRecord {
                frame_id: k,
                x: motion.offsets[k].0 as i64,
                y: motion.offsets[k].1 as i64,
                score: 0.1,
                method: MatchMethod::Phase,
            })
            .collect();
        let out = expand_matches(&seeds, seq.frames(), &mosaic, &TemplateParams::default());
        let good = out
            .iter()
            .filter(|m| {
                let (tx, ty) = motion.offsets[m.frame_id];
                (m.x - tx as i64).abs() <= 2 && (m.y - ty as i64).abs() <= 2
            })
            .count();
        assert!(good >= 36, "{good}/40 frames matched within 2 px");
        for m in &out {
            assert!(mosaic.crop(m.x, m.y, 128, 128).is_ok());
        }
    }
}

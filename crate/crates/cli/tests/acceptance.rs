//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lcle::dataset::{inconsistency_mask, sample_patch, simulate_clip, DatasetConfig, PatchParams};
use lcle::fusion::{fill_bilinear, restore_sequence};
use lcle::lissajous::{
    acquire_sequence, coverage_fraction, frame_trajectory, ground_truth_crop, random_walk_motion, spiral_motion,
    LissajousConfig, MotionPath,
};
use lcle::matching::{expand_matches, match_phase, TemplateParams};
use lcle::metrics::{charbonnier, frequency_l1, ms_ssim, psnr, ssim};
use lcle::mosaic::{stitch, Mosaic, StitchParams};
use lcle::registration::estimate_displacement;
use lcle::texture::tissue_texture;
use lcle::{shift_frame, DenseFrame, Displacement, Grid, SparseFrame};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// 100 trials, 512² frames with at least 30% coverage, shifts up to ±128 px,
/// pool factor 1, at least 95 exact, under 30 s.
fn registration_exactness() -> Outcome {
    let start = Instant::now();
    let scene = tissue_texture(820, 820, 101);
    // 8 Hz is the fastest default-scanner rate whose frames reach 30% coverage
    let cfg = LissajousConfig::default().at_frame_rate(8.0);
    let trials: Vec<(bool, bool, f64)> = (0..100u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let qx = rng.random_range(-128i64..=128);
            let qy = rng.random_range(-128i64..=128);
            let (px, py) = (
                150.0 + rng.random_range(0..16) as f64,
                150.0 + rng.random_range(0..16) as f64,
            );
            let a = acquire_sequence(&scene, &cfg, &MotionPath::stationary(1).translated(px, py), 1, trial)
                .unwrap()
                .into_frames()
                .remove(0);
            // b is a separate acquisition of the shifted view using the next
            // frame's (different) sampling pattern
            let moved = MotionPath::stationary(2).translated(px + qx as f64, py + qy as f64);
            let b = acquire_sequence(&scene, &cfg, &moved, 2, trial + 10_000)
                .unwrap()
                .into_frames()
                .remove(1);
            let d = estimate_displacement(&a, &b, 1).unwrap();
            let independent = d.dx == -qx && d.dy == -qy;

            let planted = Displacement::new(qx, qy, 0.0);
            let shifted = shift_frame(&a, &planted).unwrap();
            let d2 = estimate_displacement(&a, &shifted, 1).unwrap();
            let copied = d2.dx == qx && d2.dy == qy;
            (independent, copied, a.coverage().min(b.coverage()))
        })
        .collect();
    let elapsed = start.elapsed();
    let independent = trials.iter().filter(|t| t.0).count();
    let copied = trials.iter().filter(|t| t.1).count();
    let min_cov = trials.iter().map(|t| t.2).fold(1.0, f64::min);
    let pass = independent >= 95 && copied >= 95 && min_cov >= 0.30 && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "independent acquisitions {independent}/100 exact, shift_frame copies {copied}/100 exact \
             (need >= 95); min coverage {min_cov:.3} (need >= 0.30); {:.1} s (limit 30 s)",
            secs(elapsed)
        ),
    )
}

/// Missing fraction > 0.70 at 10 Hz and < 0.10 at 2 Hz; coverage
/// non-increasing over 2..10 Hz.
fn coverage_calibration() -> Outcome {
    let base = LissajousConfig::default();
    let coverage = |rate: f64| {
        let cfg = base.at_frame_rate(rate);
        let traj = frame_trajectory(&cfg, 0).unwrap();
        coverage_fraction(&traj, cfg.width, cfg.height)
    };
    let rates = [2.0, 4.0, 6.0, 8.0, 10.0];
    let cov: Vec<f64> = rates.iter().map(|&r| coverage(r)).collect();
    let missing_10 = 1.0 - cov[4];
    let missing_2 = 1.0 - cov[0];
    let monotone = cov.windows(2).all(|w| w[1] <= w[0]);
    let pass = missing_10 > 0.70 && missing_2 < 0.10 && monotone;
    outcome(
        pass,
        format!(
            "missing at 10 Hz {missing_10:.4} (need > 0.70), at 2 Hz {missing_2:.4} (need < 0.10); \
             coverage over 2/4/6/8/10 Hz = {} non-increasing: {monotone}",
            cov.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join("/")
        ),
    )
}

/// 25-frame spiral with 20% overlap: PSNR >= 40 dB over the covered region
/// and bit-exact rendering under placement-order permutations.
fn stitching_fidelity() -> Outcome {
    let start = Instant::now();
    let fov = 512usize;
    let spiral = spiral_motion(25, fov as f64, 0.2).unwrap();
    let (x0, y0, x1, y1) = spiral.bounds().unwrap();
    let pad = 8.0;
    let scene = tissue_texture((x1 - x0) as usize + fov + 16, (y1 - y0) as usize + fov + 16, 303);
    let origin = (pad - x0, pad - y0);
    let frames: Vec<DenseFrame> = spiral
        .offsets
        .iter()
        .map(|&(x, y)| ground_truth_crop(&scene, (x + origin.0, y + origin.1), fov, fov).unwrap())
        .collect();
    let result = stitch(&frames, &StitchParams::default()).unwrap();
    let placements = result.mosaic.placements();
    let (sx, sy) = spiral.offsets[0];
    let exact_placements = placements
        .iter()
        .filter(|p| {
            let (tx, ty) = spiral.offsets[p.frame_id];
            p.x == (tx - sx) as i64 && p.y == (ty - sy) as i64
        })
        .count();

    // covered pixels of the mosaic against the scene
    let rendered = result.mosaic.render();
    let (ox, oy, w, h) = result.mosaic.extent();
    let (mut se, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if let Some(v) = rendered.value(x, y) {
                let gx = (ox + x as i64) as f64 + sx + origin.0;
                let gy = (oy + y as i64) as f64 + sy + origin.1;
                let t = scene.intensity()[(gx as usize, gy as usize)];
                se += (v - t) * (v - t);
                n += 1;
            }
        }
    }
    let mse = se / n as f64;
    let fidelity = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    };

    let items: Vec<(usize, &DenseFrame, i64, i64)> = placements
        .iter()
        .map(|p| (p.frame_id, &frames[p.frame_id], p.x, p.y))
        .collect();
    let reference = Mosaic::from_placements(&items).unwrap().render();
    let mut invariant = reference == rendered;
    for seed in 0..5u64 {
        let mut shuffled = items.clone();
        if seed == 0 {
            shuffled.reverse();
        } else {
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        invariant &= Mosaic::from_placements(&shuffled).unwrap().render() == reference;
    }
    let pass = result.unplaced.is_empty() && fidelity >= 40.0 && invariant;
    outcome(
        pass,
        format!(
            "{} of 25 placed ({exact_placements} at the planted offset); covered-region PSNR {fidelity:.2} dB \
             (need >= 40); permutation-invariant render (6 orders): {invariant}; {:.1} s",
            placements.len(),
            secs(start.elapsed())
        ),
    )
}

/// >= 90% of frames matched within 2 px; negative controls yield no match.
fn matching_recall() -> Outcome {
    let start = Instant::now();
    let cfg = DatasetConfig {
        lq_frames: 30,
        ..DatasetConfig::default()
    };
    let sim = simulate_clip(None, &cfg, 404).unwrap();
    let mosaic = stitch(&sim.hq, &StitchParams::default()).unwrap().mosaic;
    let augmented = augment_all(&sim.lq, cfg.pool_factor);
    let seeds: Vec<_> = augmented
        .par_iter()
        .enumerate()
        .filter_map(|(t, f)| match_phase(t, f, &mosaic, cfg.pool_factor, 0.05).unwrap())
        .collect();
    let matches = expand_matches(&seeds, &augmented, &mosaic, &TemplateParams::default());
    let good = matches
        .iter()
        .filter(|m| {
            let (tx, ty) = sim.lq_offsets[m.frame_id];
            (m.x as f64 - tx).abs() <= 2.0 && (m.y as f64 - ty).abs() <= 2.0
        })
        .count();
    let recall = good as f64 / sim.lq.len() as f64;

    // negative controls: a clip over a different texture
    let other = simulate_clip(
        None,
        &DatasetConfig {
            lq_frames: 10,
            ..cfg.clone()
        },
        9_999,
    )
    .unwrap();
    let other_aug = augment_all(&other.lq, cfg.pool_factor);
    let false_seeds: Vec<_> = other_aug
        .par_iter()
        .enumerate()
        .filter_map(|(t, f)| match_phase(t, f, &mosaic, cfg.pool_factor, 0.05).unwrap())
        .collect();
    let false_total = expand_matches(&false_seeds, &other_aug, &mosaic, &TemplateParams::default()).len();
    let pass = recall >= 0.90 && false_total == 0;
    outcome(
        pass,
        format!(
            "{good}/{} frames within 2 px = {:.1}% (need >= 90%; {} phase seeds, {} matched in total); \
             negative controls matched {false_total}/{} (need 0); {:.1} s",
            sim.lq.len(),
            100.0 * recall,
            seeds.len(),
            matches.len(),
            other.lq.len(),
            secs(start.elapsed())
        ),
    )
}

fn augment_all(frames: &[SparseFrame], pool: usize) -> Vec<SparseFrame> {
    (0..frames.len())
        .into_par_iter()
        .map(|t| {
            let past = &frames[t.saturating_sub(4)..t];
            let future = &frames[t + 1..(t + 5).min(frames.len())];
            lcle::fusion::augment_frame(&frames[t], past, future, pool).unwrap()
        })
        .collect()
}

fn corrupt(hq: &DenseFrame, blocks: &[(usize, usize)]) -> SparseFrame {
    let mut g = hq.intensity().clone();
    for &(bx, by) in blocks {
        for y in by * 8..by * 8 + 8 {
            for x in bx * 8..bx * 8 + 8 {
                let v = g[(x, y)];
                g[(x, y)] = if v <= 0.5 { v + 0.5 } else { v - 0.5 };
            }
        }
    }
    SparseFrame::from_dense(&DenseFrame::new(g).unwrap(), 0.0, 10.0)
}

/// Planted corruptions flag exactly the planted blocks; 128/1024 accepted,
/// 129/1024 rejected.
fn rejection_sampling() -> Outcome {
    let hq = tissue_texture(256, 256, 505);
    let mut exact_fixtures = 0;
    let fixtures = 20;
    for seed in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..200);
        let mut all: Vec<(usize, usize)> = (0..1024).map(|i| (i % 32, i / 32)).collect();
        all.shuffle(&mut rng);
        let planted = &all[..n];
        let flags = inconsistency_mask(&hq, &corrupt(&hq, planted), 8, 0.01).unwrap();
        let expect = Grid::from_fn(32, 32, |x, y| planted.contains(&(x, y)));
        if flags.flags == expect && flags.fraction == n as f64 / 1024.0 {
            exact_fixtures += 1;
        }
    }
    let params = PatchParams {
        size: 256,
        max_attempts: 1,
        ..PatchParams::default()
    };
    let decide = |n: usize| {
        let blocks: Vec<(usize, usize)> = (0..n).map(|i| (i % 32, i / 32)).collect();
        let lq = corrupt(&hq, &blocks);
        sample_patch(std::slice::from_ref(&lq), &lq, &hq, &params, 0)
            .unwrap()
            .is_accepted()
    };
    let (at_128, at_129) = (decide(128), decide(129));
    let pass = exact_fixtures == fixtures && at_128 && !at_129;
    outcome(
        pass,
        format!(
            "{exact_fixtures}/{fixtures} planted fixtures flagged exactly; 128/1024 accepted: {at_128}; \
             129/1024 rejected: {}",
            !at_129
        ),
    )
}

/// Analytic metric values.
fn metrics_suite() -> Outcome {
    let a = tissue_texture(256, 256, 606).into_grid();
    let low = a.map(|v| v * 0.8);
    let shifted = low.map(|v| v + 0.1);
    let p = psnr(&low, &shifted).unwrap();
    let s = ssim(&a, &a).unwrap();
    let m = ms_ssim(&a, &a).unwrap();
    let c = charbonnier(&a, &a, 1e-3).unwrap();
    let b = tissue_texture(256, 256, 607).into_grid();
    let f1 = frequency_l1(&a, &b).unwrap();
    let k = 3.7;
    let fk = frequency_l1(&a.map(|v| v * k), &b.map(|v| v * k)).unwrap();
    let checks = [
        (p - 20.0).abs() <= 1e-6,
        (s - 1.0).abs() <= 1e-9,
        (m - 1.0).abs() <= 1e-9,
        (c - 1e-3).abs() <= 1e-12,
        (fk - k * f1).abs() <= 1e-9,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "PSNR(+0.1) = {p:.9} dB; SSIM = {s:.12}; MS-SSIM = {m:.12}; charbonnier(a,a) = {c:.3e}; \
             frequency_l1 homogeneity error {:.2e}",
            (fk - k * f1).abs()
        ),
    )
}

/// restore_step beats per-frame fill_bilinear by >= 2 dB mean PSNR on a
/// 100-frame random walk, under 2 minutes.
fn restoration_gain() -> Outcome {
    let start = Instant::now();
    let cfg = LissajousConfig::default();
    let n = 100;
    let max_step = 2;
    let walk = random_walk_motion(n, max_step, 707);
    let (x0, y0, x1, y1) = walk.bounds().unwrap();
    let pad = 4.0;
    let scene = tissue_texture(
        (x1 - x0 + 2.0 * pad) as usize + cfg.width + 1,
        (y1 - y0 + 2.0 * pad) as usize + cfg.height + 1,
        708,
    );
    let motion = walk.translated(pad - x0, pad - y0);
    let frames = acquire_sequence(&scene, &cfg, &motion, n, 709).unwrap().into_frames();
    let truth: Vec<DenseFrame> = motion
        .offsets
        .iter()
        .map(|&o| ground_truth_crop(&scene, o, cfg.width, cfg.height).unwrap())
        .collect();
    let restored = restore_sequence(&frames, 4, 0.5).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let restored_psnr = mean(
        restored
            .par_iter()
            .zip(&truth)
            .map(|(r, t)| psnr(r.intensity(), t.intensity()).unwrap())
            .collect(),
    );
    let baseline_psnr = mean(
        frames
            .par_iter()
            .zip(&truth)
            .map(|(f, t)| psnr(fill_bilinear(f).unwrap().intensity(), t.intensity()).unwrap())
            .collect(),
    );
    let elapsed = start.elapsed();
    let gain = restored_psnr - baseline_psnr;
    let pass = gain >= 2.0 && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "restore {restored_psnr:.2} dB vs fill_bilinear {baseline_psnr:.2} dB: gain {gain:.2} dB (need >= 2) \
             on {n} frames, random-walk step <= {max_step} px; {:.1} s (limit 120 s)",
            secs(elapsed)
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Two `build-dataset` runs with a pinned seed produce identical trees apart
/// from the run record's timestamp.
fn determinism() -> Outcome {
    let start = Instant::now();
    let run = |wd: &Path| {
        Command::new(env!("CARGO_BIN_EXE_lcle"))
            .args(["--workdir", wd.to_str().unwrap(), "--seed", "2024"])
            .args(["--set", "scanner.width=256", "--set", "scanner.height=256"])
            .args([
                "--set",
                "dataset.clips=4",
                "--set",
                "dataset.lq_frames=12",
                "--set",
                "dataset.patch_size=128",
            ])
            .args(["build-dataset", "--out", "ds"])
            .output()
            .unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    if !ra.status.success() || !rb.status.success() {
        return outcome(
            false,
            format!("build-dataset failed: {}", String::from_utf8_lossy(&ra.stderr)),
        );
    }
    let (mut ta, mut tb) = (tree(&a.path().join("ds")), tree(&b.path().join("ds")));
    let strip = |t: &mut BTreeMap<String, Vec<u8>>| {
        let rec: serde_json::Value = serde_json::from_slice(&t["run.json"]).unwrap();
        let mut rec = rec.as_object().unwrap().clone();
        let had = rec.remove("timestamp").is_some();
        t.insert("run.json".into(), serde_json::to_vec(&rec).unwrap());
        had
    };
    let stamped = strip(&mut ta) && strip(&mut tb);
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let same_files = ta.len() == tb.len() && differing.is_empty();
    let entries = String::from_utf8_lossy(&ta["manifest.jsonl"]).lines().count();
    outcome(
        stamped && same_files && entries > 0,
        format!(
            "{} files, {entries} manifest entries; identical apart from timestamp: {same_files} ({} differ); {:.1} s",
            ta.len(),
            differing.len(),
            secs(start.elapsed())
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("registration exactness", registration_exactness),
        ("coverage calibration", coverage_calibration),
        ("stitching fidelity", stitching_fidelity),
        ("matching recall", matching_recall),
        ("rejection sampling", rejection_sampling),
        ("metrics analytic suite", metrics_suite),
        ("restoration gain", restoration_gain),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "[{}] {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

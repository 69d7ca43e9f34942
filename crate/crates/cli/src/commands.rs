use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use lcle::dataset::{build_dataset, simulate_clip, DatasetSource};
use lcle::fusion::{augment_frame, restore_sequence, WINDOW_SIZE};
use lcle::imageio;
use lcle::matching::{expand_matches, match_phase, MatchRecord};
use lcle::metrics::{frame_metrics, MetricReport};
use lcle::mosaic::{stitch, Mosaic};
use lcle::registration::{align_window, Alignment, RegistrationSource};
use lcle::{DenseFrame, Grid, SparseFrame};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, PipelineConfig};
use crate::seqio::{
    read_dense_dir, read_sequence, write_dense_dir, write_file, write_json, write_jsonl, write_sequence,
};
use crate::{resolve, Cli, Command, DataError};

const BUNDLED_TEXTURE: &[u8] = include_bytes!("../assets/texture128.pgm");

/// Config snapshot, seed and tool version for one run.
#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    seed: u64,
    config: BTreeMap<String, Value>,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    timestamp: u64,
}

fn write_run_record(path: &Path, command: &str, cfg: &PipelineConfig) -> Result<()> {
    let record = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        config: cfg.entries(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(path, &record)
}

/// Record location for a file output: `<file>.run.json`.
fn record_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    file.with_file_name(name)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .context("configuring worker threads")?;
    }
    let wd = cli.workdir.as_path();
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let config_path = cli.config.as_ref().map(|p| resolve(wd, p));
    let cfg = config::load(config_path.as_deref(), &overrides)?;
    let name = cli.command.name();
    match &cli.command {
        Command::Simulate(a) => {
            let out = resolve(wd, &a.out);
            let texture = if a.procedural {
                None
            } else {
                Some(match &a.texture {
                    Some(p) => imageio::read_dense(&resolve(wd, p))?,
                    None => DenseFrame::new(imageio::parse_gray(BUNDLED_TEXTURE, Path::new("bundled texture"))?)?,
                })
            };
            let mut dcfg = cfg.dataset_config();
            if let Some(n) = a.frames {
                dcfg.lq_frames = n as usize;
            }
            write_run_record(&out.join("run.json"), name, &cfg)?;
            simulate(&out, texture.as_ref(), &dcfg)
        }
        Command::Augment(a) => {
            let out = resolve(wd, &a.out);
            let frames = read_sequence(&resolve(wd, &a.input), cfg.scanner.frame_rate)?;
            write_run_record(&out.join("run.json"), name, &cfg)?;
            write_sequence(&out, &augment_all(&frames, cfg.registration.pool_factor)?)
        }
        Command::Register(a) => {
            let out = resolve(wd, &a.out);
            let frames = read_sequence(&resolve(wd, &a.input), cfg.scanner.frame_rate)?;
            write_run_record(&record_beside(&out), name, &cfg)?;
            register(&out, &frames, &cfg)
        }
        Command::Stitch(a) => {
            let out = resolve(wd, &a.out);
            let frames = read_dense_dir(&resolve(wd, &a.input))?;
            write_run_record(&out.join("run.json"), name, &cfg)?;
            stitch_frames(&out, &frames, &cfg)
        }
        Command::Match(a) => {
            let out = resolve(wd, &a.out);
            let frames = read_sequence(&resolve(wd, &a.input), cfg.scanner.frame_rate)?;
            let mosaic = load_mosaic(&resolve(wd, &a.mosaic))?;
            write_run_record(&record_beside(&out), name, &cfg)?;
            match_frames(&out, &frames, &mosaic, &cfg)
        }
        Command::BuildDataset(a) => {
            cfg.validate_for_dataset()?;
            let out = resolve(wd, &a.out);
            let source = match (&a.textures, &a.real) {
                (_, Some(r)) => DatasetSource::Real { root: resolve(wd, r) },
                (t, None) => DatasetSource::Synthetic {
                    textures: t.as_ref().map(|t| resolve(wd, t)),
                },
            };
            write_run_record(&out.join("run.json"), name, &cfg)?;
            let manifest = build_dataset(&source, &cfg.dataset_config(), &out)?;
            println!(
                "{} entries ({} train, {} val) from {} clips",
                manifest.entries.len(),
                manifest.report.train_entries,
                manifest.report.val_entries,
                manifest.report.clips.len()
            );
            if !manifest.report.errors.is_empty() {
                for e in &manifest.report.errors {
                    eprintln!("  {e}");
                }
                return Err(DataError(format!("{} inputs failed", manifest.report.errors.len())).into());
            }
            Ok(())
        }
        Command::Restore(a) => {
            let out = resolve(wd, &a.out);
            let frames = read_sequence(&resolve(wd, &a.input), cfg.scanner.frame_rate)?;
            write_run_record(&out.join("run.json"), name, &cfg)?;
            let restored = restore_sequence(&frames, cfg.registration.pool_factor, cfg.fusion.recurrent_weight)?;
            write_dense_dir(&out, &restored)
        }
        Command::Evaluate(a) => {
            let out = resolve(wd, &a.out);
            let pred = read_dense_dir(&resolve(wd, &a.pred))?;
            let gt_dir = resolve(wd, &a.gt);
            write_run_record(&record_beside(&out), name, &cfg)?;
            evaluate(&out, &pred, &gt_dir)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PositionRecord {
    frame_id: usize,
    x: f64,
    y: f64,
}

fn simulate(out: &Path, texture: Option<&DenseFrame>, cfg: &lcle::dataset::DatasetConfig) -> Result<()> {
    let sim = simulate_clip(texture, cfg, cfg.seed)?;
    write_sequence(out, &sim.lq)?;
    write_dense_dir(&out.join("gt"), &sim.lq_truth)?;
    write_dense_dir(&out.join("hq"), &sim.hq)?;
    let motion: Vec<PositionRecord> = sim
        .lq_offsets
        .iter()
        .enumerate()
        .map(|(frame_id, &(x, y))| PositionRecord { frame_id, x, y })
        .collect();
    write_jsonl(&out.join("motion.jsonl"), &motion)?;
    println!(
        "{} LQ frames, {} HQ frames written to {}",
        sim.lq.len(),
        sim.hq.len(),
        out.display()
    );
    Ok(())
}

fn augment_all(frames: &[SparseFrame], pool: usize) -> Result<Vec<SparseFrame>> {
    Ok((0..frames.len())
        .into_par_iter()
        .map(|t| {
            let past = &frames[t.saturating_sub(WINDOW_SIZE)..t];
            let future = &frames[t + 1..(t + 1 + WINDOW_SIZE).min(frames.len())];
            augment_frame(&frames[t], past, future, pool)
        })
        .collect::<lcle::Result<_>>()?)
}

fn probes(frames: &[SparseFrame], cfg: &PipelineConfig) -> Result<Vec<SparseFrame>> {
    match cfg.registration.source {
        RegistrationSource::Augmented => augment_all(frames, cfg.registration.pool_factor),
        RegistrationSource::Raw => Ok(frames.to_vec()),
    }
}

/// `frame ≈ shift_frame(neighbor, (dx, dy))`.
#[derive(Serialize)]
struct DisplacementRecord {
    frame_id: usize,
    neighbor_id: usize,
    dx: i64,
    dy: i64,
    score: f64,
}

fn register(out: &Path, frames: &[SparseFrame], cfg: &PipelineConfig) -> Result<()> {
    let frames = probes(frames, cfg)?;
    let per_frame: Vec<Vec<DisplacementRecord>> = (0..frames.len())
        .into_par_iter()
        .map(|t| {
            let lo = t.saturating_sub(WINDOW_SIZE);
            let aligned = align_window(&frames[t], &frames[lo..t], cfg.registration.pool_factor)?;
            Ok(aligned
                .iter()
                .enumerate()
                .filter_map(|(i, a)| match a {
                    Alignment::Aligned { displacement: d, .. } => Some(DisplacementRecord {
                        frame_id: t,
                        neighbor_id: lo + i,
                        dx: d.dx,
                        dy: d.dy,
                        score: d.score,
                    }),
                    Alignment::Skipped { reason } => {
                        log::warn!("frame {t}: neighbour {} skipped: {reason}", lo + i);
                        None
                    }
                })
                .collect())
        })
        .collect::<lcle::Result<_>>()?;
    let records: Vec<DisplacementRecord> = per_frame.into_iter().flatten().collect();
    write_jsonl(out, &records)?;
    println!("{} displacement records written to {}", records.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PlacementRecord {
    frame_id: usize,
    ox: i64,
    oy: i64,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct MosaicInfo {
    /// World position of the mosaic image's top-left pixel.
    origin: [i64; 2],
    width: usize,
    height: usize,
    /// Input file names by frame id.
    frames: Vec<String>,
    unplaced: Vec<usize>,
}

fn stitch_frames(out: &Path, frames: &[(String, DenseFrame)], cfg: &PipelineConfig) -> Result<()> {
    let dense: Vec<DenseFrame> = frames.iter().map(|(_, f)| f.clone()).collect();
    let result = stitch(&dense, &cfg.stitch_params())?;
    let (ox, oy, w, h) = result.mosaic.extent();
    let rendered = result.mosaic.render();
    imageio::write_gray16(&out.join("mosaic.pgm"), rendered.intensity())?;
    imageio::write_mask(&out.join("mosaic_mask.pgm"), rendered.mask())?;
    let placements: Vec<PlacementRecord> = result
        .mosaic
        .placements()
        .iter()
        .map(|p| PlacementRecord {
            frame_id: p.frame_id,
            ox: p.x,
            oy: p.y,
            score: p.score,
        })
        .collect();
    write_jsonl(&out.join("placements.jsonl"), &placements)?;
    write_json(
        &out.join("mosaic.json"),
        &MosaicInfo {
            origin: [ox, oy],
            width: w,
            height: h,
            frames: frames.iter().map(|(n, _)| n.clone()).collect(),
            unplaced: result.unplaced.clone(),
        },
    )?;
    println!(
        "{} of {} frames placed; {w}x{h} mosaic written to {}",
        placements.len(),
        frames.len(),
        out.display()
    );
    Ok(())
}

fn load_mosaic(dir: &Path) -> Result<Mosaic> {
    let info_path = dir.join("mosaic.json");
    let text = std::fs::read_to_string(&info_path).with_context(|| format!("reading {}", info_path.display()))?;
    let info: MosaicInfo =
        serde_json::from_str(&text).map_err(|e| DataError(format!("{}: {e}", info_path.display())))?;
    let values = imageio::read_gray(&dir.join("mosaic.pgm"))?;
    let mask: Grid<bool> = imageio::read_mask(&dir.join("mosaic_mask.pgm"))?;
    Ok(Mosaic::from_rendered(values, &mask, (info.origin[0], info.origin[1]))?)
}

#[derive(Serialize)]
struct MatchLine {
    frame_id: usize,
    ox: i64,
    oy: i64,
    score: f64,
    method: String,
}

fn match_frames(out: &Path, frames: &[SparseFrame], mosaic: &Mosaic, cfg: &PipelineConfig) -> Result<()> {
    let probes = probes(frames, cfg)?;
    let pool = cfg.registration.pool_factor;
    let seeds: Vec<MatchRecord> = probes
        .par_iter()
        .enumerate()
        .map(|(t, f)| match_phase(t, f, mosaic, pool, cfg.registration.match_threshold))
        .collect::<lcle::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let matches = expand_matches(&seeds, &probes, mosaic, &cfg.template_params());
    let lines: Vec<MatchLine> = matches
        .iter()
        .map(|m| MatchLine {
            frame_id: m.frame_id,
            ox: m.x,
            oy: m.y,
            score: m.score,
            method: m.method.to_string(),
        })
        .collect();
    write_jsonl(out, &lines)?;
    println!(
        "{} of {} frames matched ({} by phase correlation)",
        lines.len(),
        frames.len(),
        seeds.len()
    );
    Ok(())
}

/// Non-finite values become the strings `inf`, `-inf` or `nan`.
fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn evaluate(out: &Path, pred: &[(String, DenseFrame)], gt_dir: &Path) -> Result<()> {
    let scored: Vec<(String, lcle::metrics::FrameMetrics)> = pred
        .par_iter()
        .map(|(name, p)| {
            let gt_path = gt_dir.join(name);
            if !gt_path.exists() {
                return Err(DataError(format!("no reference frame {}", gt_path.display())).into());
            }
            let gt = imageio::read_dense(&gt_path)?;
            let m = frame_metrics(p.intensity(), gt.intensity()).with_context(|| format!("scoring {name}"))?;
            Ok((name.clone(), m))
        })
        .collect::<Result<_>>()?;
    let report = MetricReport::new(scored.iter().map(|(_, m)| *m).collect());
    let frames: Vec<Value> = scored
        .iter()
        .map(|(name, m)| {
            json!({
                "frame": name,
                "psnr": number(m.psnr),
                "ssim": number(m.ssim),
                "ms_ssim": m.ms_ssim.map(number),
            })
        })
        .collect();
    let summary = json!({
        "frames": frames,
        "mean_psnr": number(report.mean_psnr),
        "mean_ssim": number(report.mean_ssim),
        "mean_ms_ssim": report.mean_ms_ssim.map(number),
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_file(out, text.as_bytes())?;
    let ms = report.mean_ms_ssim.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} frames: PSNR {} dB, SSIM {:.4}, MS-SSIM {ms}",
        scored.len(),
        if report.mean_psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.3}", report.mean_psnr)
        },
        report.mean_ssim
    );
    Ok(())
}

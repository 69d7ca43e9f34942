//! Directory-level frame I/O and JSON-lines records.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lcle::imageio;
use lcle::{DenseFrame, SparseFrame};
use serde::Serialize;

use crate::DataError;

/// Reads `dir/lq/<t>.pgm` with masks from `dir/mask/<t>.pgm`.
pub fn read_sequence(dir: &Path, frame_rate: f64) -> Result<Vec<SparseFrame>> {
    let files = imageio::list_graymaps(&dir.join("lq"))?;
    if files.is_empty() {
        return Err(DataError(format!("no frames in {}", dir.join("lq").display())).into());
    }
    files
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mask = dir.join("mask").join(p.file_name().expect("listed file"));
            Ok(imageio::read_sparse(p, &mask, t as f64 / frame_rate, frame_rate)?)
        })
        .collect()
}

pub fn write_sequence(dir: &Path, frames: &[SparseFrame]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        imageio::write_sparse(&dir.join(format!("lq/{t}.pgm")), &dir.join(format!("mask/{t}.pgm")), f)?;
    }
    Ok(())
}

/// Dense frames of `dir` with their file names, in frame order.
pub fn read_dense_dir(dir: &Path) -> Result<Vec<(String, DenseFrame)>> {
    let files = imageio::list_graymaps(dir)?;
    if files.is_empty() {
        return Err(DataError(format!("no frames in {}", dir.display())).into());
    }
    files
        .iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).expect("listed file").to_string();
            Ok((name, imageio::read_dense(p)?))
        })
        .collect()
}

pub fn write_dense_dir(dir: &Path, frames: &[DenseFrame]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        imageio::write_dense(&dir.join(format!("{t}.pgm")), f)?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

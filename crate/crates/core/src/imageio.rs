//! Binary portable graymap I/O.
//!
//! Intensities are stored as 16-bit samples scaled to [0, 65535]; masks as
//! 8-bit samples with 255 for measured pixels.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::frame::{DenseFrame, Grid, SparseFrame};

const KIND: &str = "graymap";

fn format_error(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        kind: KIND,
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes a binary (P5) graymap; 16-bit samples are big-endian.
fn save(path: &Path, width: usize, height: usize, maxval: u16, body: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    bytes.extend_from_slice(body);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Graymaps in `dir`, sorted by numeric stem when every stem is a number
/// and lexically otherwise.
pub fn list_graymaps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    let numeric = |p: &PathBuf| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
    };
    if files.iter().all(|p| numeric(p).is_some()) {
        files.sort_by_key(|p| numeric(p));
    } else {
        files.sort();
    }
    Ok(files)
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes intensities in [0, 1] as a 16-bit graymap (values are clamped).
pub fn write_gray16(path: &Path, values: &Grid<f64>) -> Result<()> {
    let body: Vec<u8> = values.data().iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
    save(path, values.width(), values.height(), u16::MAX, &body)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| format_error(path, e))
}

/// Reads an 8- or 16-bit graymap as intensities in [0, 1].
pub fn read_gray(path: &Path) -> Result<Grid<f64>> {
    gray_from_image(decode(path)?, path)
}

/// Decodes an in-memory graymap; `origin` only labels errors.
pub fn parse_gray(bytes: &[u8], origin: &Path) -> Result<Grid<f64>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| format_error(origin, e))?;
    gray_from_image(img, origin)
}

fn gray_from_image(img: DynamicImage, path: &Path) -> Result<Grid<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(format_error(
                path,
                format!("expected grayscale, got {:?}", other.color()),
            ))
        }
    };
    Grid::from_vec(w, h, data)
}

pub fn write_mask(path: &Path, mask: &Grid<bool>) -> Result<()> {
    let body: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    save(path, mask.width(), mask.height(), 255, &body)
}

/// Reads a mask; any nonzero sample counts as measured.
pub fn read_mask(path: &Path) -> Result<Grid<bool>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<bool> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v != 0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v != 0).collect(),
        other => {
            return Err(format_error(
                path,
                format!("expected grayscale mask, got {:?}", other.color()),
            ))
        }
    };
    Grid::from_vec(w, h, data)
}

pub fn write_dense(path: &Path, frame: &DenseFrame) -> Result<()> {
    write_gray16(path, frame.intensity())
}

pub fn read_dense(path: &Path) -> Result<DenseFrame> {
    DenseFrame::new(read_gray(path)?)
}

/// Writes a sparse frame as an intensity image (holes stored as 0) and a mask.
pub fn write_sparse(image_path: &Path, mask_path: &Path, frame: &SparseFrame) -> Result<()> {
    write_gray16(image_path, frame.intensity())?;
    write_mask(mask_path, frame.mask())
}

pub fn read_sparse(image_path: &Path, mask_path: &Path, timestamp: f64, frame_rate: f64) -> Result<SparseFrame> {
    let values = read_gray(image_path)?;
    let mask = read_mask(mask_path)?;
    if values.dims() != mask.dims() {
        return Err(format_error(
            mask_path,
            format!("mask is {:?} but image is {:?}", mask.dims(), values.dims()),
        ));
    }
    let values = Grid::from_fn(values.width(), values.height(), |x, y| {
        if mask[(x, y)] {
            values[(x, y)]
        } else {
            0.0
        }
    });
    SparseFrame::new(values, mask, timestamp, frame_rate)
}

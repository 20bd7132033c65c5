//! Dataset loading, stratified splitting and the synthetic gait generator.
//!
//! Every loader emits flattened `rows x cols` windows (row-major, rows are
//! channels and columns are time steps) so the network sees one layout
//! regardless of modality.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::spatiotemporal::WindowLayout;
use crate::tensor::{l2_normalize, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Timeseries,
    Skeleton,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub features: Tensor,
    pub label: usize,
    pub subject: String,
    pub modality: Modality,
    /// Source file, or `synthetic`.
    pub source: String,
    /// Window position within its source.
    pub index: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses whitespace- or comma-delimited numeric text. Blank lines and lines
/// starting with `#` are skipped; empty cells are rejected.
pub fn parse_numeric(path: &Path, text: &str) -> DataResult<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (r, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        let row = cells
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse {
                        path: path.to_path_buf(),
                        row: r + 1,
                        col: c + 1,
                        value: cell.to_string(),
                    })
            })
            .collect::<DataResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_numeric(path: &Path) -> DataResult<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_numeric(path, &text)
}

fn window_sample(data: Vec<f64>, label: usize, modality: Modality, source: &Path, index: usize) -> SampleWindow {
    let n = data.len();
    let features = l2_normalize(&Tensor::new(vec![n], data).expect("finite parsed values"));
    SampleWindow {
        features,
        label,
        subject: subject_of(source),
        modality,
        source: source.display().to_string(),
        index,
    }
}

fn subject_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesOptions {
    /// Rows between window starts; defaults to the window length.
    pub stride: Option<usize>,
    /// Drop the first column (a timestamp).
    pub skip_timestamp: bool,
}

impl Default for TimeseriesOptions {
    fn default() -> Self {
        Self {
            stride: None,
            skip_timestamp: true,
        }
    }
}

/// Sliding windows of `layout.cols` ticks over `layout.rows` channels, each
/// window l2-normalized. A file shorter than one window yields no windows.
pub fn load_timeseries(
    path: &Path,
    layout: WindowLayout,
    opts: TimeseriesOptions,
    label: usize,
) -> DataResult<Vec<SampleWindow>> {
    let rows = read_numeric(path)?;
    timeseries_windows(path, &rows, layout, opts, label)
}

pub fn timeseries_windows(
    path: &Path,
    rows: &[Vec<f64>],
    layout: WindowLayout,
    opts: TimeseriesOptions,
    label: usize,
) -> DataResult<Vec<SampleWindow>> {
    let stride = opts.stride.unwrap_or(layout.cols);
    if stride == 0 {
        return Err(DataError::Invalid("window stride must be positive".into()));
    }
    let skip = usize::from(opts.skip_timestamp);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != layout.rows + skip {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "row {} has {} columns, expected {} channels{}",
                    r + 1,
                    row.len(),
                    layout.rows,
                    if skip == 1 { " plus a timestamp" } else { "" }
                ),
            });
        }
    }
    if rows.len() < layout.cols {
        warn!(
            "{}: {} rows is shorter than one {}-step window, skipping",
            path.display(),
            rows.len(),
            layout.cols
        );
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + layout.cols <= rows.len() {
        let mut data = Vec::with_capacity(layout.len());
        for k in 0..layout.rows {
            for t in 0..layout.cols {
                data.push(rows[start + t][skip + k]);
            }
        }
        out.push(window_sample(data, label, Modality::Timeseries, path, out.len()));
        start += stride;
    }
    Ok(out)
}

pub const SKELETON_JOINTS: usize = 21;
pub const SKELETON_COLUMNS: usize = SKELETON_JOINTS * 3;

/// Windows of `layout.cols` consecutive skeleton frames. Each frame's 21
/// joints are split into `layout.rows / 3` contiguous groups and every
/// channel is one coordinate of a group centroid, ordered
/// `(group 0: x, y, z), (group 1: x, y, z), ...`. With 63 rows every joint is
/// its own group; with 9 rows the groups hold 7 joints each.
pub fn load_skeleton(path: &Path, layout: WindowLayout, label: usize) -> DataResult<Vec<SampleWindow>> {
    let rows = read_numeric(path)?;
    skeleton_windows(path, &rows, layout, label)
}

pub fn skeleton_windows(path: &Path, frames: &[Vec<f64>], layout: WindowLayout, label: usize) -> DataResult<Vec<SampleWindow>> {
    if !layout.rows.is_multiple_of(3) || !SKELETON_JOINTS.is_multiple_of((layout.rows / 3).max(1)) || layout.rows == 0 {
        return Err(DataError::Invalid(format!(
            "skeleton layout needs rows = 3 x a divisor of {SKELETON_JOINTS}, got {}",
            layout.rows
        )));
    }
    if let Some((r, row)) = frames.iter().enumerate().find(|(_, f)| f.len() != SKELETON_COLUMNS) {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            msg: format!("frame {} has {} columns, expected {SKELETON_COLUMNS}", r + 1, row.len()),
        });
    }
    let groups = layout.rows / 3;
    let per_group = SKELETON_JOINTS / groups;
    let channel = |frame: &[f64], k: usize| {
        let (grp, axis) = (k / 3, k % 3);
        let sum: f64 = (grp * per_group..(grp + 1) * per_group).map(|j| frame[j * 3 + axis]).sum();
        sum / per_group as f64
    };
    Ok(frames
        .chunks_exact(layout.cols)
        .enumerate()
        .map(|(w, win)| {
            let mut data = Vec::with_capacity(layout.len());
            for k in 0..layout.rows {
                for frame in win {
                    data.push(channel(frame, k));
                }
            }
            window_sample(data, label, Modality::Skeleton, path, w)
        })
        .collect())
}

/// A grayscale grid with its format maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub max_value: f64,
    pub pixels: Vec<f64>,
}

/// Reads a plain (P2) or raw (P5) PGM, or a CSV grid of 8-bit intensities.
pub fn read_grid(path: &Path) -> DataResult<Grid> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fmt = |msg: String| DataError::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        return parse_pgm(&bytes).map_err(fmt);
    }
    if bytes.first() == Some(&b'P') {
        return Err(fmt(format!(
            "unsupported image format {:?}",
            String::from_utf8_lossy(&bytes[..2.min(bytes.len())])
        )));
    }
    let text = String::from_utf8(bytes).map_err(|_| fmt("not a PGM or text grid".into()))?;
    let rows = parse_numeric(path, &text)?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(fmt("grid rows must be non-empty and equally long".into()));
    }
    Ok(Grid {
        height: rows.len(),
        width,
        max_value: 255.0,
        pixels: rows.into_iter().flatten().collect(),
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<Grid, String> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    let [width, height, max] = header;
    if width == 0 || height == 0 || max == 0 || max > 65535 {
        return Err(format!("invalid PGM header {width}x{height} max {max}"));
    }
    let n = width * height;
    let pixels: Vec<f64> = if bytes[1] == b'2' {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| "non-ASCII P2 body")?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<u32>().map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|_| "non-numeric P2 pixel")?;
        vals
    } else {
        pos += 1; // single whitespace before raster
        let width_bytes = if max < 256 { 1 } else { 2 };
        let body = bytes.get(pos..pos + n * width_bytes).ok_or("truncated P5 raster")?;
        if width_bytes == 1 {
            body.iter().map(|&b| f64::from(b)).collect()
        } else {
            body.chunks(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]]))).collect()
        }
    };
    if pixels.len() != n {
        return Err(format!("expected {n} pixels, found {}", pixels.len()));
    }
    Ok(Grid {
        height,
        width,
        max_value: max as f64,
        pixels,
    })
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// One image as a `layout.rows x layout.cols` window scaled to `[0, 1]`.
pub fn load_image_grid(path: &Path, layout: WindowLayout, label: usize) -> DataResult<SampleWindow> {
    let grid = read_grid(path)?;
    let resized = resize_bilinear(&grid.pixels, grid.height, grid.width, layout.rows, layout.cols);
    let data: Vec<f64> = resized.into_iter().map(|v| v / grid.max_value).collect();
    Ok(SampleWindow {
        features: Tensor::new(vec![layout.len()], data).expect("finite pixels"),
        label,
        subject: subject_of(path),
        modality: Modality::Image,
        source: path.display().to_string(),
        index: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_name: String,
}

/// Reads a `path,class_name` CSV (header required). Relative paths resolve
/// against `base`, or the manifest's directory when `base` is `None`.
pub fn read_manifest(path: &Path, base: Option<&Path>) -> DataResult<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let merr = |msg: String| DataError::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| merr("empty manifest".into()))?.1;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["path", "class_name"] {
        return Err(merr(format!("header must be `path,class_name`, got {header:?}")));
    }
    let base = base.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")));
    lines
        .map(|(i, line)| {
            let (p, c) = line
                .split_once(',')
                .ok_or_else(|| merr(format!("line {} is not `path,class_name`", i + 1)))?;
            let (p, c) = (p.trim(), c.trim());
            if p.is_empty() || c.is_empty() {
                return Err(merr(format!("line {} has an empty field", i + 1)));
            }
            Ok(ManifestEntry {
                path: base.join(p),
                class_name: c.to_string(),
            })
        })
        .collect()
}

/// Class names sorted, mapped to consecutive indices.
pub fn label_map(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut names: Vec<&str> = entries.iter().map(|e| e.class_name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names.into_iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect()
}

/// Loads every manifest entry and returns the windows sorted by
/// `(source, index)` together with the class names in label order. With
/// `classes`, labels follow that list and unknown class names are rejected.
pub fn load_manifest_dataset(
    manifest: &Path,
    base: Option<&Path>,
    modality: Modality,
    layout: WindowLayout,
    opts: TimeseriesOptions,
    classes: Option<&[String]>,
) -> DataResult<(Vec<SampleWindow>, Vec<String>)> {
    let entries = read_manifest(manifest, base)?;
    let labels = match classes {
        None => label_map(&entries),
        Some(names) => {
            let map: BTreeMap<String, usize> = names.iter().cloned().zip(0..).collect();
            if let Some(e) = entries.iter().find(|e| !map.contains_key(&e.class_name)) {
                return Err(DataError::Manifest {
                    path: manifest.to_path_buf(),
                    msg: format!("class {:?} is unknown to the model", e.class_name),
                });
            }
            map
        }
    };
    let mut windows = Vec::new();
    for e in &entries {
        let label = labels[&e.class_name];
        match modality {
            Modality::Timeseries => windows.extend(load_timeseries(&e.path, layout, opts, label)?),
            Modality::Skeleton => windows.extend(load_skeleton(&e.path, layout, label)?),
            Modality::Image => windows.push(load_image_grid(&e.path, layout, label)?),
        }
    }
    windows.sort_by(|a, b| (a.source.as_str(), a.index).cmp(&(b.source.as_str(), b.index)));
    let mut names: Vec<(usize, String)> = labels.into_iter().map(|(n, i)| (i, n)).collect();
    names.sort();
    Ok((windows, names.into_iter().map(|(_, n)| n).collect()))
}

/// Stratified split: within each class a seeded shuffle picks
/// `round(fraction * n)` training windows (at least one on each side).
/// Both halves keep the input order.
pub fn split(
    data: &[SampleWindow],
    train_fraction: f64,
    rng: &mut Rng,
) -> DataResult<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in data.iter().enumerate() {
        by_class.entry(w.label).or_default().push(i);
    }
    let mut in_train = vec![false; data.len()];
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(DataError::Invalid(format!(
                "class {label} has {} window(s); splitting needs at least 2",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let take = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = data.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(w, _)| w).collect(),
        test.into_iter().map(|(w, _)| w).collect(),
    ))
}

/// Frequency in cycles per window of channel `k` for class `c`.
pub fn synth_frequency(c: usize, k: usize, classes: usize) -> f64 {
    0.5 + 0.5 * ((c + k) % classes) as f64
}

pub fn synth_phase(c: usize, k: usize, classes: usize) -> f64 {
    PI * c as f64 / classes as f64 + 0.3 * k as f64
}

/// Half-width of the per-window phase jitter.
pub const SYNTH_JITTER: f64 = PI / 8.0;

/// Synthetic gait windows. For class `c`, window `w`, channel `k` and step `t`:
///
/// `x = sin(2π f(c,k) t / T + φ(c,k) + δ_w) + σ ε`
///
/// with `f` from [`synth_frequency`], `φ` from [`synth_phase`],
/// `δ_w ~ U(-π/8, π/8)` drawn once per window and `ε ~ N(0, 1)` drawn per
/// cell in row-major order. Windows are generated class by class, each drawing
/// its jitter before its noise, and are l2-normalized.
pub fn synth_generate(
    classes: usize,
    windows_per_class: usize,
    layout: WindowLayout,
    noise_sigma: f64,
    rng: &mut Rng,
) -> DataResult<Vec<SampleWindow>> {
    if classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::Invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let t_len = layout.cols as f64;
    let mut out = Vec::with_capacity(classes * windows_per_class);
    for c in 0..classes {
        for w in 0..windows_per_class {
            let jitter = rng.uniform(-SYNTH_JITTER, SYNTH_JITTER);
            let mut data = Vec::with_capacity(layout.len());
            for k in 0..layout.rows {
                let (f, phi) = (synth_frequency(c, k, classes), synth_phase(c, k, classes));
                for t in 0..layout.cols {
                    let clean = (2.0 * PI * f * t as f64 / t_len + phi + jitter).sin();
                    let noise = if noise_sigma > 0.0 { noise_sigma * rng.normal() } else { 0.0 };
                    data.push(clean + noise);
                }
            }
            out.push(SampleWindow {
                features: l2_normalize(&Tensor::new(vec![layout.len()], data).expect("finite synth values")),
                label: c,
                subject: format!("class{c}-window{w}"),
                modality: Modality::Timeseries,
                source: "synthetic".into(),
                index: c * windows_per_class + w,
            });
        }
    }
    Ok(out)
}

/// Accuracy of a nearest-centroid classifier fit on `train` and scored on `test`.
pub fn centroid_accuracy(train: &[SampleWindow], test: &[SampleWindow]) -> f64 {
    let classes = train.iter().map(|w| w.label + 1).max().unwrap_or(0);
    let n = train.first().map_or(0, |w| w.features.len());
    let mut sums = vec![vec![0.0; n]; classes];
    let mut counts = vec![0usize; classes];
    for w in train {
        counts[w.label] += 1;
        for (s, v) in sums[w.label].iter_mut().zip(w.features.data()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|w| {
            let dists: Vec<f64> = sums
                .iter()
                .map(|m| -m.iter().zip(w.features.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            crate::tensor::argmax(&dists) == w.label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

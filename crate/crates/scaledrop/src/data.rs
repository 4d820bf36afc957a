//! Datasets, file formats, and distribution-shift generators.
//!
//! Built-in synthetic sets: two-moons, Gaussian blobs, and a 10-class
//! digit-glyph image set (28×28, stroke-rendered with random rotation,
//! shift, thickness, and pixel noise) that stands in for handwritten-digit
//! data at desk scale.
//!
//! File formats: IDX (big-endian magic 0x00000803 for images, 0x00000801
//! for labels) and a plain numeric CSV with the label in the last column.
//! Both parsers report the byte offset of the first malformed value.
//!
//! Datasets hold model-domain values. Images are normalized from raw [0,1]
//! to [−1,1]; the OOD generators work in the same domain (pure Gaussian
//! noise is N(0,1); pure uniform noise spans the input range; additive
//! noise and rotation corrupt a base dataset).

use crate::error::{Error, Result};
use crate::rng::{derive_stream, Stream};
use crate::tensor::RealTensor;
use crate::train::BatchSource;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, ...sample shape]`, model-domain values.
    pub data: RealTensor,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Batch tensor for explicit indices (labels required).
    pub fn gather_batch(&self, indices: &[usize]) -> (RealTensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * sl..(i + 1) * sl]);
            if let Some(l) = &self.labels {
                labels.push(l[i]);
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (RealTensor::new(shape, data).expect("sized"), labels)
    }

    /// Contiguous batch without labels.
    pub fn slice_batch(&self, start: usize, end: usize) -> RealTensor {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_batch(&idx).0
    }

    /// Maps raw [0,1] values into the symmetric model domain [−1,1].
    pub fn normalize_symmetric(mut self) -> Self {
        for v in self.data.data_mut() {
            *v = *v * 2.0 - 1.0;
        }
        self
    }
}

impl BatchSource for Dataset {
    fn len(&self) -> usize {
        self.len()
    }
    fn gather(&self, indices: &[usize]) -> (RealTensor, Vec<usize>) {
        self.gather_batch(indices)
    }
}

/// Two interleaved half-moons, 2 classes, 2 features.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = derive_stream(seed, "two-moons", 0);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x + noise * gaussian(&mut rng));
        data.push(y + noise * gaussian(&mut rng));
        labels.push(class);
    }
    Dataset {
        data: RealTensor::new(vec![n, 2], data).expect("sized"),
        labels: Some(labels),
        n_classes: 2,
    }
}

/// Isotropic Gaussian blobs: `classes` centers on a circle.
pub fn gaussian_blobs(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Dataset {
    let mut rng = derive_stream(seed, "blobs", 0);
    let mut centers = vec![vec![0.0; dim]; classes];
    for (k, c) in centers.iter_mut().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        c[0] = 2.0 * angle.cos();
        if dim > 1 {
            c[1] = 2.0 * angle.sin();
        }
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            data.push(centers[class][d] + spread * gaussian(&mut rng));
        }
        labels.push(class);
    }
    Dataset {
        data: RealTensor::new(vec![n, dim], data).expect("sized"),
        labels: Some(labels),
        n_classes: classes,
    }
}

fn gaussian(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-feature (lo, hi) ranges defining a thermometer code.
#[derive(Debug, Clone)]
pub struct ThermometerBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn thermometer_bounds(ds: &Dataset) -> Result<ThermometerBounds> {
    let [n, f] = *ds.data.shape() else {
        return Err(Error::ShapeMismatch(
            "thermometer encoding expects flat feature vectors".to_string(),
        ));
    };
    let mut lo = vec![f64::INFINITY; f];
    let mut hi = vec![f64::NEG_INFINITY; f];
    for i in 0..n {
        for j in 0..f {
            let v = ds.data.data()[i * f + j];
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    Ok(ThermometerBounds { lo, hi })
}

/// Thermometer encoding: each feature becomes `bits` ±1 values, bit j set
/// when the feature exceeds the j-th threshold. Thresholds are evenly
/// spaced inside the given per-feature ranges (endpoints excluded), so a
/// training set's bounds define one fixed code for every split.
pub fn thermometer_encode_with(
    ds: &Dataset,
    bits: usize,
    bounds: &ThermometerBounds,
) -> Result<Dataset> {
    if bits == 0 {
        return Err(Error::InvalidArgument(
            "thermometer encoding needs >= 1 bit".to_string(),
        ));
    }
    let [n, f] = *ds.data.shape() else {
        return Err(Error::ShapeMismatch(
            "thermometer encoding expects flat feature vectors".to_string(),
        ));
    };
    if bounds.lo.len() != f || bounds.hi.len() != f {
        return Err(Error::ShapeMismatch(format!(
            "thermometer bounds cover {} features, data has {f}",
            bounds.lo.len()
        )));
    }
    let mut out = Vec::with_capacity(n * f * bits);
    for i in 0..n {
        for j in 0..f {
            let v = ds.data.data()[i * f + j];
            for b in 0..bits {
                let thr = bounds.lo[j]
                    + (bounds.hi[j] - bounds.lo[j]) * (b as f64 + 1.0) / (bits as f64 + 1.0);
                out.push(if v > thr { 1.0 } else { -1.0 });
            }
        }
    }
    Ok(Dataset {
        data: RealTensor::new(vec![n, f * bits], out)?,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
    })
}

/// Thermometer code with thresholds from this dataset's own ranges.
pub fn thermometer_encode(ds: &Dataset, bits: usize) -> Result<Dataset> {
    thermometer_encode_with(ds, bits, &thermometer_bounds(ds)?)
}

// ───────────────────────── digit glyphs ─────────────────────────

/// Stroke polylines for the ten digits in a unit box (x right, y down).
fn glyph_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
        (0..=20)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / 20.0;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    }
    match digit {
        0 => vec![ellipse(0.50, 0.50, 0.24, 0.34)],
        1 => vec![vec![(0.36, 0.30), (0.54, 0.14), (0.54, 0.86)]],
        2 => vec![
            vec![
                (0.30, 0.32),
                (0.34, 0.20),
                (0.47, 0.14),
                (0.60, 0.17),
                (0.68, 0.27),
                (0.66, 0.40),
                (0.55, 0.52),
                (0.42, 0.64),
                (0.30, 0.76),
                (0.30, 0.85),
            ],
            vec![(0.30, 0.85), (0.70, 0.85)],
        ],
        3 => vec![
            vec![
                (0.32, 0.20),
                (0.45, 0.13),
                (0.60, 0.16),
                (0.66, 0.27),
                (0.60, 0.39),
                (0.47, 0.45),
            ],
            vec![
                (0.47, 0.45),
                (0.62, 0.51),
                (0.68, 0.63),
                (0.62, 0.77),
                (0.46, 0.86),
                (0.32, 0.79),
            ],
        ],
        4 => vec![
            vec![(0.56, 0.14), (0.28, 0.60), (0.74, 0.60)],
            vec![(0.58, 0.34), (0.58, 0.86)],
        ],
        5 => vec![
            vec![(0.66, 0.14), (0.34, 0.14), (0.32, 0.46)],
            vec![
                (0.32, 0.46),
                (0.48, 0.41),
                (0.62, 0.47),
                (0.68, 0.60),
                (0.62, 0.75),
                (0.46, 0.85),
                (0.32, 0.78),
            ],
        ],
        6 => vec![
            vec![
                (0.62, 0.15),
                (0.46, 0.26),
                (0.36, 0.44),
                (0.33, 0.62),
                (0.40, 0.78),
                (0.56, 0.84),
                (0.66, 0.72),
                (0.64, 0.57),
                (0.52, 0.49),
                (0.37, 0.55),
            ],
        ],
        7 => vec![
            vec![(0.30, 0.15), (0.70, 0.15), (0.45, 0.86)],
            vec![(0.40, 0.50), (0.62, 0.50)],
        ],
        8 => vec![
            ellipse(0.50, 0.31, 0.17, 0.17),
            ellipse(0.50, 0.66, 0.20, 0.20),
        ],
        9 => vec![
            ellipse(0.52, 0.33, 0.17, 0.19),
            vec![(0.69, 0.35), (0.64, 0.60), (0.50, 0.85)],
        ],
        _ => unreachable!("digits are 0..=9"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = ax + t * dx;
    let cy = ay + t * dy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders one 28×28 digit glyph in raw [0,1] with the given augmentation.
#[allow(clippy::too_many_arguments)]
fn render_glyph(
    digit: usize,
    angle_deg: f64,
    dx: f64,
    dy: f64,
    scale: f64,
    thickness: f64,
    noise: f64,
    rng: &mut Stream,
) -> Vec<f64> {
    const SIZE: usize = 28;
    let strokes = glyph_strokes(digit);
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let transform = |(x, y): (f64, f64)| {
        // rotate and scale about the glyph center, then shift
        let (cx, cy) = (x - 0.5, y - 0.5);
        (
            0.5 + scale * (cx * cos - cy * sin) + dx,
            0.5 + scale * (cx * sin + cy * cos) + dy,
        )
    };
    let strokes: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|poly| poly.iter().map(|&p| transform(p)).collect())
        .collect();
    let mut out = vec![0.0; SIZE * SIZE];
    let sigma = thickness / SIZE as f64;
    for py in 0..SIZE {
        for px in 0..SIZE {
            let p = (
                (px as f64 + 0.5) / SIZE as f64,
                (py as f64 + 0.5) / SIZE as f64,
            );
            let mut best = f64::INFINITY;
            for poly in &strokes {
                for w in poly.windows(2) {
                    best = best.min(dist_to_segment(p, w[0], w[1]));
                }
            }
            let v = (-0.5 * (best / sigma).powi(2)).exp();
            let noisy = v + noise * gaussian(rng);
            out[py * SIZE + px] = noisy.clamp(0.0, 1.0);
        }
    }
    out
}

/// 10-class synthetic digit images, 28×28×1, raw [0,1] values. Labels are
/// balanced round-robin; each sample draws its own rotation, shift, scale,
/// stroke thickness, and pixel noise.
pub fn synth_digits_raw(n: usize, seed: u64) -> Dataset {
    let mut rng = derive_stream(seed, "synth-digits", 0);
    let mut data = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let angle = rng.random_range(-14.0..14.0);
        let dx = rng.random_range(-0.08..0.08);
        let dy = rng.random_range(-0.08..0.08);
        let scale = rng.random_range(0.85..1.1);
        let thickness = rng.random_range(1.3..2.1);
        let noise = 0.06;
        data.extend(render_glyph(
            digit, angle, dx, dy, scale, thickness, noise, &mut rng,
        ));
        labels.push(digit);
    }
    Dataset {
        data: RealTensor::new(vec![n, 28, 28, 1], data).expect("sized"),
        labels: Some(labels),
        n_classes: 10,
    }
}

/// Model-domain digit set ([−1,1] values).
pub fn synth_digits(n: usize, seed: u64) -> Dataset {
    synth_digits_raw(n, seed).normalize_symmetric()
}

// ───────────────────────── IDX format ─────────────────────────

fn malformed(path: &Path, format: &'static str, offset: u64, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.display().to_string(),
        format,
        offset,
        reason: reason.into(),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(malformed(
            path,
            "idx",
            bytes.len() as u64,
            format!("truncated while reading {what}"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses IDX image bytes: magic, count, rows, cols, then u8 pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, path, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(malformed(
            path,
            "idx",
            0,
            format!("bad image magic 0x{magic:08x}, want 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(bytes, 4, path, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, path, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, path, "column count")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| malformed(path, "idx", 4, "dimension overflow"))?;
    let have = bytes.len() - 16.min(bytes.len());
    if have != need {
        return Err(malformed(
            path,
            "idx",
            16,
            format!("payload is {have} bytes, header promises {need}"),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses IDX label bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, path, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(malformed(
            path,
            "idx",
            0,
            format!("bad label magic 0x{magic:08x}, want 0x{IDX_LABEL_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(bytes, 4, path, "label count")? as usize;
    let have = bytes.len() - 8.min(bytes.len());
    if have != n {
        return Err(malformed(
            path,
            "idx",
            8,
            format!("payload is {have} bytes, header promises {n}"),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image/label pair as a model-domain dataset.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let label_bytes = fs::read(labels)?;
    let raw_labels = parse_idx_labels(&label_bytes, labels)?;
    if raw_labels.len() != n {
        return Err(malformed(
            labels,
            "idx",
            4,
            format!("{} labels for {} images", raw_labels.len(), n),
        ));
    }
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    Ok(Dataset {
        data: RealTensor::new(vec![n, rows, cols, 1], data)?,
        labels: Some(labels),
        n_classes,
    }
    .normalize_symmetric())
}

pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for {n}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Exports a model-domain image dataset back to raw IDX bytes.
pub fn save_idx_dataset(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [n, rows, cols, c] = *ds.data.shape() else {
        return Err(Error::ShapeMismatch(
            "idx export needs [n,h,w,1] images".to_string(),
        ));
    };
    if c != 1 {
        return Err(Error::ShapeMismatch("idx export is single-channel".to_string()));
    }
    let pixels: Vec<u8> = ds
        .data
        .data()
        .iter()
        .map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_idx_images(images, n, rows, cols, &pixels)?;
    let raw: Vec<u8> = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no labels".to_string()))?
        .iter()
        .map(|&l| l as u8)
        .collect();
    write_idx_labels(labels, &raw)?;
    Ok(())
}

// ───────────────────────── CSV vectors ─────────────────────────

/// Parses numeric CSV: one sample per line, features followed by an integer
/// label in the last column. No quoting; `#`-prefixed lines are comments.
pub fn parse_csv_vectors(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut features: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for line in bytes.split(|&b| b == b'\n') {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        let text = std::str::from_utf8(line)
            .map_err(|e| malformed(path, "csv", line_start + e.valid_up_to() as u64, "not utf-8"))?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = Vec::new();
        let mut col_off = 0u64;
        for field in text.split(',') {
            let field_start = line_start + col_off;
            col_off += field.len() as u64 + 1;
            let v: f64 = field.trim().parse().map_err(|_| {
                malformed(
                    path,
                    "csv",
                    field_start,
                    format!("cannot parse {:?} as a number", field.trim()),
                )
            })?;
            fields.push(v);
        }
        if fields.len() < 2 {
            return Err(malformed(
                path,
                "csv",
                line_start,
                "a row needs at least one feature and a label",
            ));
        }
        let label = *fields.last().unwrap();
        if label < 0.0 || label.fract() != 0.0 {
            return Err(malformed(
                path,
                "csv",
                line_start,
                format!("label {label} is not a non-negative integer"),
            ));
        }
        let f = fields.len() - 1;
        match features {
            None => features = Some(f),
            Some(expect) if expect != f => {
                return Err(malformed(
                    path,
                    "csv",
                    line_start,
                    format!("row has {f} features, previous rows had {expect}"),
                ));
            }
            _ => {}
        }
        data.extend_from_slice(&fields[..f]);
        labels.push(label as usize);
    }
    let f = features.ok_or_else(|| malformed(path, "csv", 0, "no data rows"))?;
    let n = labels.len();
    let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    Ok(Dataset {
        data: RealTensor::new(vec![n, f], data)?,
        labels: Some(labels),
        n_classes,
    })
}

/// Loads a CSV dataset, optionally reshaping flat features into images
/// (e.g. 784 features into [28, 28, 1]).
pub fn load_csv_dataset(path: &Path, reshape: Option<&[usize]>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut ds = parse_csv_vectors(&bytes, path)?;
    if let Some(shape) = reshape {
        let per: usize = shape.iter().product();
        if per != ds.sample_len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} features into {:?}",
                ds.sample_len(),
                shape
            )));
        }
        let mut full = vec![ds.len()];
        full.extend_from_slice(shape);
        ds.data = ds.data.reshape(full)?;
    }
    Ok(ds)
}

pub fn save_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no labels".to_string()))?;
    let sl = ds.sample_len();
    let mut out = String::new();
    for i in 0..ds.len() {
        for j in 0..sl {
            out.push_str(&ds.data.data()[i * sl + j].to_string());
            out.push(',');
        }
        out.push_str(&labels[i].to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ───────────────────────── OOD generators ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    /// Pure N(0,1) inputs.
    GaussianNoise,
    /// Pure uniform inputs spanning the model domain [−1,1].
    UniformNoise,
    /// Base plus `strength` · N(0,1).
    AdditiveGaussian,
    /// Base plus `strength` · U(−1,1).
    AdditiveUniform,
    /// Base rotated by `strength` degrees (bilinear, −1 fill).
    Rotate,
}

impl OodKind {
    pub fn label(&self) -> &'static str {
        match self {
            OodKind::GaussianNoise => "gaussian-noise",
            OodKind::UniformNoise => "uniform-noise",
            OodKind::AdditiveGaussian => "additive-gaussian",
            OodKind::AdditiveUniform => "additive-uniform",
            OodKind::Rotate => "rotate",
        }
    }
}

/// Builds a shifted or out-of-distribution set. Pure-noise kinds take their
/// shape (and size) from `base` but drop its labels; additive and rotation
/// kinds keep the base labels.
pub fn make_ood(kind: OodKind, base: Option<&Dataset>, strength: f64, seed: u64) -> Result<Dataset> {
    let base = base.ok_or_else(|| {
        Error::InvalidArgument(format!("{} needs a base dataset", kind.label()))
    })?;
    let mut rng = derive_stream(seed, "ood", kind as u64);
    let n = base.len();
    let shape = base.data.shape().to_vec();
    match kind {
        OodKind::GaussianNoise => {
            let data: Vec<f64> = (0..base.data.len()).map(|_| gaussian(&mut rng)).collect();
            Ok(Dataset {
                data: RealTensor::new(shape, data)?,
                labels: None,
                n_classes: base.n_classes,
            })
        }
        OodKind::UniformNoise => {
            let data: Vec<f64> = (0..base.data.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Ok(Dataset {
                data: RealTensor::new(shape, data)?,
                labels: None,
                n_classes: base.n_classes,
            })
        }
        OodKind::AdditiveGaussian => {
            let data: Vec<f64> = base
                .data
                .data()
                .iter()
                .map(|&v| v + strength * gaussian(&mut rng))
                .collect();
            Ok(Dataset {
                data: RealTensor::new(shape, data)?,
                labels: base.labels.clone(),
                n_classes: base.n_classes,
            })
        }
        OodKind::AdditiveUniform => {
            let data: Vec<f64> = base
                .data
                .data()
                .iter()
                .map(|&v| v + strength * rng.random_range(-1.0..1.0))
                .collect();
            Ok(Dataset {
                data: RealTensor::new(shape, data)?,
                labels: base.labels.clone(),
                n_classes: base.n_classes,
            })
        }
        OodKind::Rotate => {
            let [_, h, w, c] = shape[..] else {
                return Err(Error::ShapeMismatch(
                    "rotation needs [n,h,w,c] images".to_string(),
                ));
            };
            let mut data = Vec::with_capacity(base.data.len());
            let per = h * w * c;
            for i in 0..n {
                let img = &base.data.data()[i * per..(i + 1) * per];
                data.extend(rotate_image(img, h, w, c, strength, -1.0));
            }
            Ok(Dataset {
                data: RealTensor::new(shape, data)?,
                labels: base.labels.clone(),
                n_classes: base.n_classes,
            })
        }
    }
}

/// Bilinear rotation about the image center, out-of-frame pixels filled
/// with `fill`.
pub fn rotate_image(img: &[f64], h: usize, w: usize, c: usize, degrees: f64, fill: f64) -> Vec<f64> {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![fill; h * w * c];
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output pixel back into the source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = img[(y0 * w + x0) * c + ch];
                let v01 = img[(y0 * w + x1) * c + ch];
                let v10 = img[(y1 * w + x0) * c + ch];
                let v11 = img[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(y * w + x) * c + ch] = top + fy * (bot - top);
            }
        }
    }
    out
}

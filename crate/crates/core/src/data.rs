//! Dataset ingestion and shift construction.
//!
//! * IDX image/label files (the MNIST container), raw or gzip-compressed.
//! * Rotation of image sets about the image center.
//! * Directories of PNG images, used as out-of-distribution sets.
//! * Generic feature CSVs with an optional `label` column.
//! * Seeded subsampling without replacement.

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nca::LabeledDataset;
use crate::numcore::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Rec. 601 luma weights for RGB to grayscale.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Square grayscale images flattened row-major, pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pixels: Array2<f64>,
    height: usize,
    width: usize,
    labels: Option<Vec<usize>>,
    sha256: String,
}

impl ImageSet {
    pub fn new(
        pixels: Array2<f64>,
        height: usize,
        width: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if pixels.ncols() != height * width {
            return Err(Error::invalid(format!(
                "{} pixels per row do not form {height}x{width} images",
                pixels.ncols()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.nrows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    pixels.nrows()
                )));
            }
        }
        let sha256 = hex_digest(&[pixels_bytes(&pixels).as_slice()]);
        Ok(Self {
            pixels,
            height,
            width,
            labels,
            sha256,
        })
    }

    fn with_hash(mut self, sha256: String) -> Self {
        self.sha256 = sha256;
        self
    }

    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.nrows() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `n × (height·width)` matrix, one image per row.
    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> ArrayView2<'_, f64> {
        self.pixels
            .row(i)
            .into_shape_with_order((self.height, self.width))
            .expect("row is contiguous")
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Hex SHA-256 of the source bytes, or of the pixels for derived sets.
    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    /// Rows `indices` in the given order. The hash is recomputed from pixels.
    pub fn select(&self, indices: &[usize]) -> Result<ImageSet> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for {} images",
                self.len()
            )));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageSet::new(
            self.pixels.select(Axis(0), indices),
            self.height,
            self.width,
            labels,
        )
    }

    pub fn to_labeled(&self, num_classes: usize) -> Result<LabeledDataset> {
        let Some(labels) = &self.labels else {
            return Err(Error::Data("image set has no labels".into()));
        };
        LabeledDataset::new(self.pixels.clone(), labels.clone(), num_classes)
    }
}

fn pixels_bytes(p: &Array2<f64>) -> Vec<u8> {
    p.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// File contents, gunzipped when the gzip magic `1f 8b` leads.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_header(bytes: &[u8], path: &Path, expect: u32, dims: usize) -> Result<Vec<usize>> {
    let mut cur = bytes;
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::format(path, "truncated IDX header"))?;
    if magic != expect {
        return Err(Error::format(
            path,
            format!("bad IDX magic {magic} (0x{magic:08x}), expected {expect} (0x{expect:08x})"),
        ));
    }
    (0..dims)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| Error::format(path, "truncated IDX header"))
        })
        .collect()
}

/// Big-endian IDX images (`0x00000803`, dims `n × rows × cols`) with optional
/// labels (`0x00000801`, dim `n`). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageSet> {
    let img_bytes = read_maybe_gz(images_path)?;
    let dims = read_header(&img_bytes, images_path, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &img_bytes[16..];
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(images_path, "IDX dimensions overflow"))?;
    if body.len() < need {
        return Err(Error::format(
            images_path,
            format!(
                "truncated IDX images: header promises {need} bytes, found {}",
                body.len()
            ),
        ));
    }
    if body.len() > need {
        return Err(Error::format(
            images_path,
            format!("{} trailing bytes after IDX images", body.len() - need),
        ));
    }
    let pixels = Array2::from_shape_fn((n, rows * cols), |(i, k)| {
        body[i * rows * cols + k] as f64 / 255.0
    });
    let mut parts = vec![img_bytes.clone()];
    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lab_bytes = read_maybe_gz(lp)?;
            let count = read_header(&lab_bytes, lp, IDX_LABELS_MAGIC, 1)?[0];
            let body = &lab_bytes[8..];
            if body.len() != count {
                return Err(Error::format(
                    lp,
                    format!(
                        "IDX labels header promises {count} entries, found {}",
                        body.len()
                    ),
                ));
            }
            if count != n {
                return Err(Error::format(lp, format!("{count} labels for {n} images")));
            }
            let labels = body.iter().map(|&b| b as usize).collect();
            parts.push(lab_bytes);
            Some(labels)
        }
    };
    let hash = hex_digest(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>());
    Ok(ImageSet::new(pixels, rows, cols, labels)?.with_hash(hash))
}

/// `n` distinct indices out of `len`, uniform without replacement, sorted.
pub fn subsample_indices(len: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::invalid(format!("cannot draw {n} items from {len}")));
    }
    let mut idx = rand::seq::index::sample(rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform subsample of `n` images keeping the original order.
pub fn subsample(set: &ImageSet, n: usize, rng: &mut Rng) -> Result<ImageSet> {
    set.select(&subsample_indices(set.len(), n, rng)?)
}

fn bilinear(img: ArrayView2<'_, f64>, r: f64, c: f64) -> f64 {
    let (h, w) = img.dim();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let at = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
            0.0
        } else {
            img[[rr as usize, cc as usize]]
        }
    };
    let mut v = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let weight = wr * wc;
            if weight != 0.0 {
                v += weight * at(r0 + dr, c0 + dc);
            }
        }
    }
    v
}

/// Counterclockwise rotation by `degrees` about the image center
/// (`((h−1)/2, (w−1)/2)` in pixel coordinates), bilinear interpolation,
/// zero fill outside the frame, output clamped to [0, 1].
pub fn rotate_images(set: &ImageSet, degrees: f64) -> Result<ImageSet> {
    let (h, w) = (set.height, set.width);
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array2::zeros(set.pixels.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = set.image(i);
        for r in 0..h {
            for col in 0..w {
                // y axis points up
                let x = col as f64 - cx;
                let y = cy - r as f64;
                let xs = x * c + y * s;
                let ys = -x * s + y * c;
                row[r * w + col] = bilinear(src, cy - ys, cx + xs).clamp(0.0, 1.0);
            }
        }
    }
    ImageSet::new(out, h, w, set.labels.clone())
}

/// Every decodable image in `dir` (sorted by file name), converted to
/// grayscale with [`LUMA_WEIGHTS`], resized to `size × size` and scaled to
/// [0, 1]. Returns the set and the number of skipped files. The hash covers
/// the names and bytes of the files used.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<(ImageSet, usize)> {
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut rows = Vec::new();
    let mut hasher = Sha256::new();
    let mut skipped = 0;
    for path in &files {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = match image::load_from_memory(&bytes) {
            Ok(img) => img.to_rgb32f(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let gray: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
                let p = img.get_pixel(x, y).0;
                Luma([LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]])
            });
        let gray = if gray.dimensions() == (size as u32, size as u32) {
            gray
        } else {
            imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
        };
        rows.extend(gray.pixels().map(|p| (p.0[0] as f64).clamp(0.0, 1.0)));
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable files skipped in {}", dir.display());
    }
    let n = rows.len() / (size * size);
    if n == 0 {
        return Err(Error::Data(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    let pixels = Array2::from_shape_vec((n, size * size), rows).expect("shape");
    let hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok((
        ImageSet::new(pixels, size, size, None)?.with_hash(hash),
        skipped,
    ))
}

/// Numeric feature table with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub x: Array2<f64>,
    pub y: Option<Vec<usize>>,
    pub feature_names: Vec<String>,
}

pub const LABEL_COLUMN: &str = "label";

/// Comma-separated, header row first; a column named `label` holds labels.
pub fn load_features_csv(path: &Path) -> Result<FeatureSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_col = headers.iter().position(|h| h == LABEL_COLUMN);
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_col)
        .map(|(_, h)| h.to_string())
        .collect();
    let d = feature_names.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(i) == label_col {
                let label = cell.parse::<usize>().map_err(|_| {
                    Error::format(
                        path,
                        format!("row {line}: label {cell:?} is not a non-negative integer"),
                    )
                })?;
                labels.push(label);
            } else {
                let v = cell.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("row {line}: {cell:?} is not a number"))
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("row {line}: non-finite value {cell:?}"),
                    ));
                }
                values.push(v);
            }
        }
        n += 1;
    }
    Ok(FeatureSet {
        x: Array2::from_shape_vec((n, d), values).expect("shape"),
        y: label_col.map(|_| labels),
        feature_names,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => match line {
            Some(line) => Error::format(path, format!("row {line}: {e}")),
            None => Error::format(path, e.to_string()),
        },
    }
}

/// Writes features (shortest round-trip float formatting), then `label`.
pub fn write_features_csv(path: &Path, set: &FeatureSet) -> Result<()> {
    if set.feature_names.len() != set.x.ncols() {
        return Err(Error::invalid("feature names do not match column count"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = set.feature_names.clone();
    if set.y.is_some() {
        header.push(LABEL_COLUMN.into());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, row) in set.x.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(y) = &set.y {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! Patch descriptors: the `OGFV` feature-file format, manifests, the built-in
//! baseline extractor and multi-view pooling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_rgb, write_bytes, RgbImage};

pub const FEATURE_MAGIC: &[u8; 4] = b"OGFV";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Which side of the cross-view problem an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Drone,
    Satellite,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Drone => "drone",
            Side::Satellite => "satellite",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Side::Drone => 0,
            Side::Satellite => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Side::Drone),
            1 => Some(Side::Satellite),
            _ => None,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drone" => Ok(Side::Drone),
            "satellite" => Ok(Side::Satellite),
            other => Err(Error::InvalidInput(format!("unknown side `{other}`"))),
        }
    }
}

/// Trailing JSON block of a feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub image_id: String,
    pub extractor: String,
    /// `[rows, cols]` of the patch grid.
    pub grid: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}

/// Row-major `N × D` matrix of unit-norm patch descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    features: Vec<f32>,
    dim: usize,
    pub meta: FeatureMeta,
}

fn normalize_row(row: &mut [f32]) -> bool {
    let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return false;
    }
    if (norm - 1.0).abs() > 2.0 * f32::EPSILON as f64 {
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    true
}

impl PatchFeatureSet {
    /// Validates the shape and normalizes every row.
    pub fn new(mut features: Vec<f32>, dim: usize, meta: FeatureMeta) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("descriptor dimension must be positive".into()));
        }
        let n = (meta.grid[0] as usize) * (meta.grid[1] as usize);
        if features.len() != n * dim {
            return Err(Error::dims(format!("{n}x{dim} values"), features.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch features"));
        }
        for row in features.chunks_mut(dim) {
            if !normalize_row(row) {
                return Err(Error::DegenerateDescriptor("zero patch descriptor"));
            }
        }
        Ok(Self { features, dim, meta })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.features.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.features
    }

    pub fn side(&self) -> Option<Side> {
        self.meta.side
    }

    pub fn with_identity(mut self, image_id: &str, side: Side) -> Self {
        self.meta.image_id = image_id.to_string();
        self.meta.side = Some(side);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.features.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&serde_json::to_vec(&self.meta)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::FeatureFile { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), format!("file is {} bytes, header needs 16", bytes.len())));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(err(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let (n, d) = (u32_at(8) as usize, u32_at(12) as usize);
        if d == 0 {
            return Err(err(12, "descriptor dimension is zero".into()));
        }
        let payload_end = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| err(8, format!("{n}x{d} payload overflows")))?;
        if bytes.len() < payload_end {
            return Err(err(
                bytes.len(),
                format!("payload truncated: {n}x{d} floats need {payload_end} bytes"),
            ));
        }
        let mut features = Vec::with_capacity(n * d);
        for (k, chunk) in bytes[HEADER_LEN..payload_end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(err(
                    HEADER_LEN + 4 * k,
                    format!("non-finite value at row {}, column {}", k / d, k % d),
                ));
            }
            features.push(v);
        }
        let meta: FeatureMeta = serde_json::from_slice(&bytes[payload_end..])
            .map_err(|e| err(payload_end, format!("metadata: {e}")))?;
        let grid_n = meta.grid[0] as usize * meta.grid[1] as usize;
        if grid_n != n {
            return Err(err(
                8,
                format!("{n} rows but grid {}x{} has {grid_n} patches", meta.grid[0], meta.grid[1]),
            ));
        }
        for (i, row) in features.chunks_mut(d).enumerate() {
            if !normalize_row(row) {
                return Err(err(HEADER_LEN + 4 * i * d, format!("row {i} has zero norm")));
            }
        }
        Ok(Self { features, dim: d, meta })
    }
}

pub fn load_feature_file(path: &Path) -> Result<PatchFeatureSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PatchFeatureSet::from_bytes(&bytes)
}

pub fn write_feature_file(path: &Path, set: &PatchFeatureSet) -> Result<()> {
    write_bytes(path, &set.to_bytes()?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default)]
    pub image: Option<PathBuf>,
    pub features: PathBuf,
}

/// Image → feature-file listing; relative paths resolve against the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub side: Side,
    pub extractor: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl FeatureManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Loads every entry. Each set is stamped with the manifest side; a file
    /// whose own side or extractor disagrees with the manifest is rejected.
    pub fn load_sets(&self, manifest_path: &Path) -> Result<Vec<PatchFeatureSet>> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.entries
            .par_iter()
            .map(|e| {
                let set = load_feature_file(&base.join(&e.features))?;
                if set.meta.extractor != self.extractor {
                    return Err(Error::InvalidInput(format!(
                        "{}: extractor `{}` differs from manifest `{}`",
                        e.image_id, set.meta.extractor, self.extractor
                    )));
                }
                if let Some(side) = set.meta.side {
                    if side != self.side {
                        return Err(Error::InvalidInput(format!(
                            "{}: file is tagged {side}, manifest is {}",
                            e.image_id, self.side
                        )));
                    }
                }
                Ok(set.with_identity(&e.image_id, self.side))
            })
            .collect()
    }
}

pub const BASELINE_SIDE: usize = 256;
pub const BASELINE_DIM: usize = 14;
pub const BASELINE_EXTRACTOR: &str = "baseline-v1:d14:s256";

/// Lanczos resize of the shorter side to `side` followed by a centered
/// square crop.
pub fn resize_center_crop(image: &RgbImage, side: usize) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(Error::Empty("image"));
    }
    let short = w.min(h) as f64;
    let nw = ((w as f64 * side as f64 / short).round() as usize).max(side);
    let nh = ((h as f64 * side as f64 / short).round() as usize).max(side);
    let resized = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        resize_rgb(image, nw, nh)
    };
    resized.crop((nw - side) / 2, (nh - side) / 2, side, side)
}

fn luminance(p: &[f32; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Sobel gradients of luminance with edge replication; `gy` points down.
pub fn sobel(image: &RgbImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let lum: Vec<f64> = image.data().iter().map(luminance).collect();
    let at = |x: i64, y: i64| lum[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut gx = vec![0.0; lum.len()];
    let mut gy = vec![0.0; lum.len()];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Bin centered on `k·45°`, angles measured from +x.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
    ((theta / std::f64::consts::FRAC_PI_4).round() as usize) % 8
}

/// Per-cell `[mean RGB, std RGB, 8-bin magnitude-weighted orientation
/// histogram / pixel count]`, before normalization.
pub fn cell_descriptors(image: &RgbImage, grid: (usize, usize)) -> Vec<[f64; BASELINE_DIM]> {
    let (rows, cols) = grid;
    let (w, h) = (image.width(), image.height());
    let (gx, gy) = sobel(image);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
            let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut d = [0f64; BASELINE_DIM];
            let mut sq = [0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.get(x, y);
                    for k in 0..3 {
                        d[k] += p[k] as f64;
                        sq[k] += (p[k] as f64) * (p[k] as f64);
                    }
                    let i = y * w + x;
                    let mag = gx[i].hypot(gy[i]);
                    if mag > 0.0 {
                        d[6 + orientation_bin(gx[i], gy[i])] += mag;
                    }
                }
            }
            for k in 0..3 {
                d[k] /= n;
                d[3 + k] = (sq[k] / n - d[k] * d[k]).max(0.0).sqrt();
            }
            for v in &mut d[6..] {
                *v /= n;
            }
            out.push(d);
        }
    }
    out
}

/// Deterministic hand-crafted stand-in for a backbone: 256×256 center crop,
/// 14-d cell descriptors, ℓ2-normalized. A cell with an all-zero descriptor
/// (pure black) takes the flat-gray direction `(1,1,1)/√3` on the mean block.
pub fn baseline_extract(image: &RgbImage, grid: (usize, usize)) -> Result<PatchFeatureSet> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || rows > BASELINE_SIDE || cols > BASELINE_SIDE {
        return Err(Error::InvalidInput(format!("unsupported grid {rows}x{cols}")));
    }
    if image.width() < cols || image.height() < rows {
        return Err(Error::InvalidInput(format!(
            "{}x{} image is smaller than the {rows}x{cols} grid",
            image.width(),
            image.height()
        )));
    }
    let crop = resize_center_crop(image, BASELINE_SIDE)?;
    let mut features = Vec::with_capacity(rows * cols * BASELINE_DIM);
    for mut d in cell_descriptors(&crop, grid) {
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            d.iter_mut().for_each(|v| *v /= norm);
        } else {
            let g = 1.0 / 3f64.sqrt();
            d[..3].copy_from_slice(&[g, g, g]);
        }
        features.extend(d.iter().map(|&v| v as f32));
    }
    PatchFeatureSet::new(
        features,
        BASELINE_DIM,
        FeatureMeta {
            image_id: String::new(),
            extractor: BASELINE_EXTRACTOR.into(),
            grid: [rows as u32, cols as u32],
            side: None,
        },
    )
}

/// Mean of equal-length descriptors, ℓ2-renormalized.
pub fn pool_multiview(descriptors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = descriptors.first().ok_or(Error::Empty("descriptor list"))?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for v in descriptors {
        if v.len() != d {
            return Err(Error::dims(d, v.len()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = descriptors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateDescriptor("degenerate pool"));
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

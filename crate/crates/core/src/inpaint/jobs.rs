//! File-based hand-off of large holes to an external completion model.
//!
//! A job directory holds `image.png`, `mask.png` (pixels to replace),
//! `holes.png` (the undilated large holes) and `meta.json`; the completer
//! writes `completed.png` next to them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::knn::fallback_large_fill;
use super::morph::{dilate, ellipse5, square};
use super::{apply_writes, classify_holes};
use crate::digest::DigestBuilder;
use crate::error::{Error, Result};
use crate::raster::{write_bytes, Image, Mask, RgbImage};

pub const FEATHER_PX: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobMeta {
    pub job_id: String,
    pub scene_id: String,
    pub spec_digest: String,
    pub width: usize,
    pub height: usize,
    pub mask_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionJob {
    pub meta: JobMeta,
    pub image: RgbImage,
    pub mask: Mask,
    pub holes: Mask,
}

/// Pixels whose 5×5 neighborhood holds roof-mask values on both sides of 0.5.
pub fn roof_boundary_band(roof_mask: &Image<f32>) -> Mask {
    Image::from_fn(roof_mask.width(), roof_mask.height(), |x, y| {
        let (mut hi, mut lo) = (false, false);
        for dy in -2..=2 {
            for dx in -2..=2 {
                if let Some(&m) = roof_mask.at(x as i64 + dx, y as i64 + dy) {
                    if m >= 0.5 {
                        hi = true;
                    } else {
                        lo = true;
                    }
                }
            }
        }
        hi && lo
    })
}

fn sanitize(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "scene".into()
    } else {
        s
    }
}

/// Dilates the large holes with a 5×5 ellipse and removes the roof–ground
/// boundary band. Returns `None` when there is nothing to complete.
pub fn export_completion_job(
    image: &RgbImage,
    large_holes: &Mask,
    roof_mask: Option<&Image<f32>>,
    scene_id: &str,
    spec_digest: &str,
) -> Result<Option<CompletionJob>> {
    if !image.same_shape(large_holes) {
        return Err(Error::dims(
            format!("{}x{}", image.width(), image.height()),
            format!("{}x{}", large_holes.width(), large_holes.height()),
        ));
    }
    if !large_holes.any() {
        return Ok(None);
    }
    let mut mask = dilate(large_holes, &ellipse5());
    if let Some(roof) = roof_mask {
        let band = roof_boundary_band(roof);
        for (m, b) in mask.data_mut().iter_mut().zip(band.data()) {
            *m &= !*b;
        }
    }
    let mut d = DigestBuilder::new();
    d.update(spec_digest.as_bytes());
    d.update(&mask.data().iter().map(|&b| b as u8).collect::<Vec<_>>());
    let job_id = format!("{}-{}", sanitize(scene_id), &d.finish()[..12]);
    Ok(Some(CompletionJob {
        meta: JobMeta {
            job_id,
            scene_id: scene_id.to_string(),
            spec_digest: spec_digest.to_string(),
            width: image.width(),
            height: image.height(),
            mask_pixels: mask.count(),
        },
        image: image.clone(),
        mask,
        holes: large_holes.clone(),
    }))
}

impl CompletionJob {
    pub fn dir(&self, jobs_root: &Path) -> PathBuf {
        jobs_root.join(&self.meta.job_id)
    }

    pub fn write(&self, jobs_root: &Path) -> Result<PathBuf> {
        let dir = self.dir(jobs_root);
        self.image.write_png(&dir.join("image.png"))?;
        write_bytes(&dir.join("mask.png"), &self.mask.encode_png()?)?;
        write_bytes(&dir.join("holes.png"), &self.holes.encode_png()?)?;
        write_bytes(
            &dir.join("meta.json"),
            serde_json::to_string_pretty(&self.meta)?.as_bytes(),
        )?;
        Ok(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
        let meta: JobMeta = serde_json::from_slice(&read("meta.json")?)?;
        let image = RgbImage::decode_png(&read("image.png")?)?;
        let mask = Mask::decode_png(&read("mask.png")?)?;
        let holes = Mask::decode_png(&read("holes.png")?)?;
        for (w, h) in [
            (image.width(), image.height()),
            (mask.width(), mask.height()),
            (holes.width(), holes.height()),
        ] {
            if (w, h) != (meta.width, meta.height) {
                return Err(Error::JobRejected(format!(
                    "job {} files are {w}x{h}, meta says {}x{}",
                    meta.job_id, meta.width, meta.height
                )));
            }
        }
        Ok(Self {
            meta,
            image,
            mask,
            holes,
        })
    }

    pub fn completed_path(&self, jobs_root: &Path) -> PathBuf {
        self.dir(jobs_root).join("completed.png")
    }
}

/// Chessboard distance to the nearest set pixel, capped at `limit + 1`.
fn chessboard_distance(mask: &Mask, limit: usize) -> Image<usize> {
    let mut dist = mask.map(|&b| if b { 0 } else { limit + 1 });
    let mut front = mask.clone();
    let k = square(1);
    for d in 1..=limit {
        let grown = dilate(&front, &k);
        for i in 0..dist.len() {
            if grown.data()[i] && !front.data()[i] {
                dist.data_mut()[i] = d;
            }
        }
        front = grown;
    }
    dist
}

/// Replaces masked pixels with the completion, blends a 3-pixel seam outside
/// the mask with alpha `1 − d/4`, then fills any large-hole pixels the mask
/// excluded by boundary peeling.
pub fn apply_completion(job: &CompletionJob, expected_id: &str, completed: &RgbImage) -> Result<RgbImage> {
    if job.meta.job_id != expected_id {
        return Err(Error::JobRejected(format!(
            "job id mismatch: expected {expected_id}, found {}",
            job.meta.job_id
        )));
    }
    if (completed.width(), completed.height()) != (job.meta.width, job.meta.height) {
        return Err(Error::JobRejected(format!(
            "completed image is {}x{}, job {} expects {}x{}",
            completed.width(),
            completed.height(),
            job.meta.job_id,
            job.meta.width,
            job.meta.height
        )));
    }
    let dist = chessboard_distance(&job.mask, FEATHER_PX);
    let mut out = job.image.clone();
    for i in 0..out.len() {
        let d = dist.data()[i];
        if d > FEATHER_PX {
            continue;
        }
        let a = 1.0 - d as f32 / (FEATHER_PX + 1) as f32;
        let (src, dst) = (completed.data()[i], out.data()[i]);
        out.data_mut()[i] = if d == 0 {
            src
        } else {
            std::array::from_fn(|c| a * src[c] + (1.0 - a) * dst[c])
        };
    }
    let residual = Image::from_fn(out.width(), out.height(), |x, y| {
        *job.holes.get(x, y) && !*job.mask.get(x, y)
    });
    if residual.any() {
        let base = out.clone();
        for c in classify_holes(&residual, 0, f64::INFINITY) {
            let o = fallback_large_fill(&base, &residual, &c, 6, 4.0);
            apply_writes(&mut out, &o.writes);
        }
    }
    Ok(out)
}

/// Reads a job directory and its `completed.png`.
pub fn import_completion(job_dir: &Path, expected_id: &str) -> Result<RgbImage> {
    let job = CompletionJob::read(job_dir)?;
    let completed = RgbImage::read_png(&job_dir.join("completed.png"))?;
    apply_completion(&job, expected_id, &completed)
}

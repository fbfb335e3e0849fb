//! Scene rendering: field → points → ground frame → orthophoto → inpainting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfgeo_core::digest::{sha256_hex, DigestBuilder};
use sfgeo_core::gaussian_field::{estimate_visibility, parse_gaussian_ply, prune, CameraPose, GaussianField};
use sfgeo_core::ground_plane::{estimate_frame, to_local_frame, PlaneFrame};
use sfgeo_core::inpaint::{center_crop, export_completion_job, import_completion, inpaint, CompletionJob, InpaintResult};
use sfgeo_core::ortho_renderer::{render_local, Orthophoto, RasterSpec};
use sfgeo_core::point_sampler::sample_point_cloud;
use sfgeo_core::raster::{write_bytes, Image, Mask, RgbImage};

use crate::config::PipelineConfig;

pub const RENDER_REPORT: &str = "render.json";
pub const FINAL_IMAGE: &str = "orthophoto.png";

/// Reads a splat PLY, applies camera visibility when cameras are given and
/// prunes by opacity and visibility.
pub fn load_field(ply: &Path, cameras: Option<&Path>, cfg: &PipelineConfig) -> anyhow::Result<GaussianField> {
    let bytes = std::fs::read(ply).with_context(|| format!("reading {}", ply.display()))?;
    let mut field = parse_gaussian_ply(&bytes)?;
    if let Some(path) = cameras {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let poses: Vec<CameraPose> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        field = estimate_visibility(&field, &poses)?;
    }
    Ok(prune_field(&field, cfg)?)
}

pub fn prune_field(field: &GaussianField, cfg: &PipelineConfig) -> anyhow::Result<GaussianField> {
    let kept = prune(field, cfg.field.alpha_min, cfg.field.v_min);
    log::info!("pruned {} of {} Gaussians", field.len() - kept.len(), field.len());
    if kept.is_empty() {
        bail!("no Gaussian survives pruning (alpha_min {}, v_min {})", cfg.field.alpha_min, cfg.field.v_min);
    }
    Ok(kept)
}

#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub scene_id: String,
    pub source_digest: String,
    pub frame: PlaneFrame,
    pub ortho: Orthophoto,
    pub inpainted: InpaintResult,
    /// Center crop of the completed image; absent while large holes wait
    /// for external completion.
    pub final_image: Option<RgbImage>,
    pub job: Option<CompletionJob>,
}

impl RenderOutcome {
    pub fn pending(&self) -> bool {
        self.final_image.is_none()
    }
}

pub fn spec_digest(spec: &RasterSpec, config_digest: &str) -> String {
    let mut d = DigestBuilder::new();
    d.update(serde_json::to_string(spec).expect("spec serializes").as_bytes());
    d.update(config_digest.as_bytes());
    d.finish()
}

/// Runs every stage in memory. Stages are sequential; the heavy ones
/// parallelize internally.
pub fn render_field(field: &GaussianField, cfg: &PipelineConfig, scene_id: &str) -> anyhow::Result<RenderOutcome> {
    let cloud = sample_point_cloud(field, &cfg.sampler)?;
    let positions: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.position).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ransac_seed());
    let frame = estimate_frame(&positions, &cfg.ground, &mut rng)?;
    let local = to_local_frame(&cloud, &frame, cfg.render.h_band);
    let ortho = render_local(&local, &cfg.render)?;
    let inpainted = inpaint(&ortho, &cfg.inpaint);
    let (final_image, job) = if inpainted.pending() {
        let digest = spec_digest(&ortho.spec, &cfg.digest());
        let job = export_completion_job(
            &inpainted.image,
            &inpainted.large_mask,
            Some(&ortho.roof_mask),
            scene_id,
            &digest,
        )?;
        (None, job)
    } else {
        (Some(center_crop(&inpainted.image, cfg.inpaint.m_crop)?), None)
    };
    Ok(RenderOutcome {
        scene_id: scene_id.to_string(),
        source_digest: field.source_digest().to_string(),
        frame: local.frame,
        ortho,
        inpainted,
        final_image,
        job,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub config_digest: String,
    pub scene_id: String,
    pub source_digest: String,
    pub spec: RasterSpec,
    pub roof_height: Option<f64>,
    pub frame: PlaneFrame,
    pub m_crop: f64,
    pub pending: bool,
    pub job_id: Option<String>,
    /// SHA-256 of every written image, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

impl RenderReport {
    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(RENDER_REPORT);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_bytes(&dir.join(RENDER_REPORT), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

fn put(dir: &Path, name: &str, bytes: Vec<u8>, outputs: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
    outputs.insert(name.to_string(), sha256_hex(&bytes));
    write_bytes(&dir.join(name), &bytes)?;
    Ok(())
}

/// Writes the raw render under `raw/`, the inpainting products, the final
/// crop when complete, and `render.json`. A pending completion job is
/// written under `jobs_root`.
pub fn write_render(
    outcome: &RenderOutcome,
    cfg: &PipelineConfig,
    out_dir: &Path,
    jobs_root: &Path,
) -> anyhow::Result<RenderReport> {
    let ortho = &outcome.ortho;
    ortho.write_to_dir(&out_dir.join("raw"))?;
    let mut outputs = BTreeMap::new();
    put(out_dir, "inpainted.png", outcome.inpainted.image.encode_png()?, &mut outputs)?;
    put(out_dir, "filled_mask.png", outcome.inpainted.filled_mask.encode_png()?, &mut outputs)?;
    put(out_dir, "large_mask.png", outcome.inpainted.large_mask.encode_png()?, &mut outputs)?;
    put(out_dir, "raw/orthophoto.png", ortho.rgb.encode_png()?, &mut outputs)?;
    if let Some(img) = &outcome.final_image {
        put(out_dir, FINAL_IMAGE, img.encode_png()?, &mut outputs)?;
    }
    if let Some(job) = &outcome.job {
        let dir = job.write(jobs_root)?;
        log::info!("completion job {} written to {}", job.meta.job_id, dir.display());
    }
    let report = RenderReport {
        config_digest: cfg.digest(),
        scene_id: outcome.scene_id.clone(),
        source_digest: outcome.source_digest.clone(),
        spec: ortho.spec,
        roof_height: ortho.roof_height.is_finite().then_some(ortho.roof_height),
        frame: outcome.frame,
        m_crop: cfg.inpaint.m_crop,
        pending: outcome.pending(),
        job_id: outcome.job.as_ref().map(|j| j.meta.job_id.clone()),
        outputs,
    };
    report.write(out_dir)?;
    Ok(report)
}

/// Rebuilds the completion job of a pending render directory from its
/// written products.
pub fn job_from_render_dir(dir: &Path) -> anyhow::Result<Option<CompletionJob>> {
    let report = RenderReport::read(dir)?;
    if !report.pending {
        return Ok(None);
    }
    let image = RgbImage::read_png(&dir.join("inpainted.png"))?;
    let large = Mask::decode_png(&read(&dir.join("large_mask.png"))?)?;
    let roof = gray_plane(&dir.join("raw/roof_mask.png"))?;
    let job = export_completion_job(
        &image,
        &large,
        Some(&roof),
        &report.scene_id,
        &spec_digest(&report.spec, &report.config_digest),
    )?;
    if let (Some(job), Some(id)) = (&job, &report.job_id) {
        if &job.meta.job_id != id {
            bail!("{}: rebuilt job {} does not match recorded job {id}", dir.display(), job.meta.job_id);
        }
    }
    Ok(job)
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn gray_plane(path: &Path) -> anyhow::Result<Image<f32>> {
    let rgb = RgbImage::read_png(path)?;
    Ok(rgb.map(|p| p[0]))
}

/// Outcome of importing a completion into a render directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportStatus {
    Completed,
    AlreadyComplete,
    StillPending,
}

/// Merges `jobs_root/<job_id>/completed.png` into a pending render
/// directory and writes the final crop.
pub fn import_into_render_dir(dir: &Path, jobs_root: &Path) -> anyhow::Result<ImportStatus> {
    let mut report = RenderReport::read(dir)?;
    if !report.pending {
        return Ok(ImportStatus::AlreadyComplete);
    }
    let Some(job_id) = report.job_id.clone() else {
        bail!("{}: pending render without a job id", dir.display());
    };
    let job_dir = jobs_root.join(&job_id);
    if !job_dir.join("completed.png").exists() {
        log::warn!("{}: no completed.png for job {job_id}", dir.display());
        return Ok(ImportStatus::StillPending);
    }
    let merged = import_completion(&job_dir, &job_id)?;
    let finished = center_crop(&merged, report.m_crop)?;
    put(dir, "inpainted.png", merged.encode_png()?, &mut report.outputs)?;
    put(dir, FINAL_IMAGE, finished.encode_png()?, &mut report.outputs)?;
    report.pending = false;
    report.write(dir)?;
    Ok(ImportStatus::Completed)
}

/// Every directory under `root` (inclusive) holding a render report.
pub fn render_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.join(RENDER_REPORT).exists() {
        out.push(root.to_path_buf());
    }
    if root.is_dir() {
        let mut children: Vec<PathBuf> = std::fs::read_dir(root)
            .with_context(|| format!("listing {}", root.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RENDER_REPORT).exists())
            .collect();
        children.sort();
        out.extend(children);
    }
    Ok(out)
}

//! Synthetic evaluation corpus: procedural city blocks rendered as drone-side
//! pseudo-orthophotos, paired with noisy re-rendered "tiles".

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfgeo_core::features::{PatchFeatureSet, Side};
use sfgeo_core::raster::RgbImage;
use sfgeo_core::retrieval::GroundTruth;
use sfgeo_core::synthetic::{city_block, perturb_tile, SceneParams};

use crate::config::PipelineConfig;
use crate::pipeline::{prune_field, render_field};
use crate::stages::{extract_images, write_feature_sets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub first_seed: u64,
    pub scene: SceneParams,
    /// Points sampled per scene.
    pub n_target: usize,
    /// Sampler seed offset for the tile re-render.
    pub tile_seed_offset: u64,
    pub noise_sigma: f64,
    pub max_shift: i64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            first_seed: 1,
            scene: SceneParams::default(),
            n_target: 800_000,
            tile_seed_offset: 1000,
            noise_sigma: 0.03,
            max_shift: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub drone: Vec<(String, RgbImage)>,
    pub tiles: Vec<(String, RgbImage)>,
    pub gt: GroundTruth,
}

pub fn scene_id(i: usize) -> String {
    format!("scene-{i:03}")
}

pub fn tile_id(i: usize) -> String {
    format!("tile-{i:03}")
}

/// Renders every scene twice: once with the pipeline seed (drone query)
/// and once with an offset sampler seed, then perturbed (gallery tile).
/// Scenes render in parallel.
pub fn build_corpus(corpus: &CorpusConfig, cfg: &PipelineConfig) -> anyhow::Result<Corpus> {
    let pairs: Vec<((String, RgbImage), (String, RgbImage))> = (0..corpus.scenes)
        .into_par_iter()
        .map(|i| {
            let seed = corpus.first_seed + i as u64;
            let field = prune_field(&city_block(seed, &corpus.scene)?, cfg)?;
            let mut drone_cfg = cfg.clone();
            drone_cfg.sampler.n_target = corpus.n_target;
            drone_cfg.inpaint.fallback = true;
            let mut tile_cfg = drone_cfg.clone();
            tile_cfg.sampler.seed = drone_cfg.sampler.seed + corpus.tile_seed_offset + i as u64;
            let drone = render_field(&field, &drone_cfg, &scene_id(i))?;
            let tile = render_field(&field, &tile_cfg, &tile_id(i))?;
            let d = drone.final_image.context("drone render left holes")?;
            let t = tile.final_image.context("tile render left holes")?;
            let t = perturb_tile(&t, seed.wrapping_mul(31) + 7, corpus.noise_sigma, corpus.max_shift);
            Ok(((scene_id(i), d), (tile_id(i), t)))
        })
        .collect::<anyhow::Result<_>>()?;
    let mut gt = GroundTruth::default();
    for i in 0..corpus.scenes {
        gt.insert(&scene_id(i), &tile_id(i));
    }
    let (drone, tiles) = pairs.into_iter().unzip();
    Ok(Corpus { drone, tiles, gt })
}

pub struct CorpusFeatures {
    pub drone: Vec<PatchFeatureSet>,
    pub satellite: Vec<PatchFeatureSet>,
}

pub fn corpus_features(corpus: &Corpus, cfg: &PipelineConfig) -> anyhow::Result<CorpusFeatures> {
    Ok(CorpusFeatures {
        drone: extract_images(&corpus.drone, Side::Drone, cfg.grid())?,
        satellite: extract_images(&corpus.tiles, Side::Satellite, cfg.grid())?,
    })
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub drone_manifest: PathBuf,
    pub satellite_manifest: PathBuf,
    pub gt: PathBuf,
}

/// Writes images, both feature manifests and `gt.json` under `out`.
pub fn write_corpus(corpus: &Corpus, feats: &CorpusFeatures, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<CorpusPaths> {
    for (dir, images) in [("drone/images", &corpus.drone), ("satellite/images", &corpus.tiles)] {
        for (id, img) in images {
            img.write_png(&out.join(dir).join(format!("{id}.png")))?;
        }
    }
    let digest = cfg.digest();
    let drone_manifest = write_feature_sets(&feats.drone, None, Side::Drone, &out.join("drone"), &digest)?;
    let satellite_manifest = write_feature_sets(&feats.satellite, None, Side::Satellite, &out.join("satellite"), &digest)?;
    let gt = out.join("gt.json");
    corpus.gt.write(&gt)?;
    Ok(CorpusPaths { drone_manifest, satellite_manifest, gt })
}

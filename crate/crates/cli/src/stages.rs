//! Feature extraction, vocabulary fitting, encoding, evaluation and sweeps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfgeo_core::features::{
    baseline_extract, write_feature_file, FeatureManifest, ManifestEntry, PatchFeatureSet, Side, BASELINE_EXTRACTOR,
};
use sfgeo_core::fisher_agg::{encode_all, Aggregator, DescriptorStore, Vocabulary};
use sfgeo_core::raster::{write_bytes, RgbImage};
use sfgeo_core::retrieval::{evaluate, Gallery, GroundTruth, MetricsReport};
use sfgeo_core::vocabulary::{ensure_drone_only, fit_gmm, fit_kmeans, subsample_descriptors, EmConfig, KmeansConfig};
use sfgeo_core::Error;

use crate::config::PipelineConfig;
use crate::pipeline::{RenderReport, FINAL_IMAGE};

/// An image to extract features from, with its id.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub id: String,
    pub path: PathBuf,
}

/// Resolves extract inputs: a render directory contributes its final
/// orthophoto under the directory name, an image file its stem.
pub fn resolve_inputs(paths: &[PathBuf]) -> anyhow::Result<Vec<ImageInput>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let report = RenderReport::read(p)?;
            if report.pending {
                bail!("{} is waiting for completion job {:?}", p.display(), report.job_id);
            }
            let id = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or(report.scene_id);
            out.push(ImageInput { id, path: p.join(FINAL_IMAGE) });
        } else {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .with_context(|| format!("no file name in {}", p.display()))?;
            out.push(ImageInput { id, path: p.clone() });
        }
    }
    let mut ids: Vec<&str> = out.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("duplicate image id `{}`", w[0]);
    }
    Ok(out)
}

/// Baseline features for in-memory images, tagged with `side`.
pub fn extract_images(images: &[(String, RgbImage)], side: Side, grid: (usize, usize)) -> anyhow::Result<Vec<PatchFeatureSet>> {
    images
        .par_iter()
        .map(|(id, img)| Ok(baseline_extract(img, grid)?.with_identity(id, side)))
        .collect()
}

/// Writes `features/<id>.ogfv` per set and `manifest.json` in `out_dir`.
pub fn write_feature_sets(
    sets: &[PatchFeatureSet],
    images: Option<&[ImageInput]>,
    side: Side,
    out_dir: &Path,
    config_digest: &str,
) -> anyhow::Result<PathBuf> {
    let mut entries = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{}.ogfv", set.meta.image_id));
        write_feature_file(&out_dir.join(&rel), set)?;
        entries.push(ManifestEntry {
            image_id: set.meta.image_id.clone(),
            image: images.map(|im| absolute(&im[i].path)),
            features: rel,
        });
    }
    let manifest = FeatureManifest {
        side,
        extractor: BASELINE_EXTRACTOR.into(),
        entries,
        errors: vec![],
        config_digest: Some(config_digest.into()),
    };
    let path = out_dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn extract(inputs: &[ImageInput], side: Side, cfg: &PipelineConfig, out_dir: &Path) -> anyhow::Result<PathBuf> {
    let images: Vec<(String, RgbImage)> = inputs
        .par_iter()
        .map(|i| Ok((i.id.clone(), RgbImage::read_png(&i.path)?)))
        .collect::<anyhow::Result<_>>()?;
    let sets = extract_images(&images, side, cfg.grid())?;
    write_feature_sets(&sets, Some(inputs), side, out_dir, &cfg.digest())
}

/// Loads a manifest and its feature sets.
pub fn load_manifest(path: &Path) -> anyhow::Result<(FeatureManifest, Vec<PatchFeatureSet>)> {
    let manifest = FeatureManifest::read(path)?;
    let sets = manifest.load_sets(path).with_context(|| format!("loading features of {}", path.display()))?;
    if sets.is_empty() {
        bail!("{} lists no feature files", path.display());
    }
    Ok((manifest, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabReport {
    pub config_digest: String,
    pub vocab_digest: String,
    pub kind: String,
    pub k: usize,
    pub dim: usize,
    pub n_gmm: usize,
    pub samples: usize,
    pub images: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    /// Average log-likelihood (GMM) or inertia (k-means) per iteration.
    pub trace: Vec<f64>,
}

/// Fits a GMM for Fisher vectors or a k-means codebook for the VLAD family.
/// Only drone-tagged sets are accepted.
pub fn fit_vocabulary(
    sets: &[PatchFeatureSet],
    aggregator: Aggregator,
    k: usize,
    n_gmm: usize,
    seed: u64,
    em: &EmConfig,
    kmeans: &KmeansConfig,
) -> anyhow::Result<(Vocabulary, VocabReport)> {
    ensure_drone_only(sets)?;
    let x = subsample_descriptors(sets, n_gmm, seed)?;
    log::info!("fitting K={k} {} vocabulary on {} descriptors", if aggregator.uses_gmm() { "GMM" } else { "k-means" }, x.len());
    let (vocab, iterations, converged, trace) = if aggregator.uses_gmm() {
        let fit = fit_gmm(&x, k, &EmConfig { seed, ..em.clone() })?;
        (Vocabulary::Gmm(fit.gmm), fit.iterations, fit.converged, fit.log_likelihood)
    } else {
        let fit = fit_kmeans(&x, k, &KmeansConfig { seed, ..kmeans.clone() })?;
        (Vocabulary::Codebook(fit.codebook), fit.iterations, fit.converged, fit.inertia)
    };
    let report = VocabReport {
        config_digest: String::new(),
        vocab_digest: vocab.digest(),
        kind: if aggregator.uses_gmm() { "gmm" } else { "kmeans" }.into(),
        k,
        dim: x.dim(),
        n_gmm,
        samples: x.len(),
        images: sets.len(),
        seed,
        iterations,
        converged,
        trace,
    };
    Ok((vocab, report))
}

/// Writes the vocabulary and its JSON report next to it.
pub fn write_vocabulary(vocab: &Vocabulary, report: &VocabReport, path: &Path) -> anyhow::Result<()> {
    vocab.write(path)?;
    write_bytes(&path.with_extension("json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

pub fn encode_sets(
    sets: &[PatchFeatureSet],
    side: Side,
    vocab: &Vocabulary,
    aggregator: Aggregator,
    config_digest: &str,
) -> anyhow::Result<DescriptorStore> {
    if vocab.dim() != sets[0].dim() {
        return Err(Error::dims(vocab.dim(), sets[0].dim()).into());
    }
    let digest = vocab.digest();
    let descriptors = encode_all(vocab, aggregator, sets)?;
    let dim = descriptors[0].dim();
    let mut store = DescriptorStore::new(side, aggregator, &digest, config_digest, dim);
    for (set, g) in sets.iter().zip(&descriptors) {
        store.push(&set.meta.image_id, g)?;
    }
    Ok(store)
}

/// Checks that both stores share a vocabulary and aggregator, then scores
/// both retrieval directions.
pub fn evaluate_stores(
    queries: &DescriptorStore,
    gallery: &DescriptorStore,
    gt: &GroundTruth,
    config_digest: &str,
) -> anyhow::Result<MetricsReport> {
    if queries.vocab_digest != gallery.vocab_digest {
        return Err(Error::DigestMismatch { expected: gallery.vocab_digest.clone(), actual: queries.vocab_digest.clone() }.into());
    }
    if queries.config_digest != gallery.config_digest {
        log::warn!("query and gallery stores come from different configurations");
    }
    let q = Gallery::from_store(queries)?;
    let g = Gallery::from_store(gallery)?;
    Ok(evaluate(&q, &g, gt, config_digest)?)
}

/// Ablation group of a sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepGroup {
    Aggregation,
    Components,
    Subsampling,
}

impl std::fmt::Display for SweepGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepGroup::Aggregation => "aggregation",
            SweepGroup::Components => "components",
            SweepGroup::Subsampling => "subsampling",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub group: SweepGroup,
    pub aggregator: Aggregator,
    pub k: usize,
    pub n_gmm: usize,
}

impl SweepCell {
    pub fn setting(&self) -> String {
        match self.group {
            SweepGroup::Aggregation => self.aggregator.to_string(),
            SweepGroup::Components => format!("K={}", self.k),
            SweepGroup::Subsampling => format!("n_gmm={}", self.n_gmm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub r1_d2s: f64,
    pub ap_d2s: f64,
    pub r1_s2d: f64,
    pub ap_s2d: f64,
}

pub const SWEEP_HEADER: &str = "group,setting,aggregator,K,n_gmm,r1_d2s,ap_d2s,r1_s2d,ap_s2d";

/// Builds the grid. Groups named in `groups` are emitted in the order
/// aggregation, components, subsampling; the aggregation group compares
/// VLAD, SoftVLAD at every temperature and Fisher at the configured K.
pub fn sweep_cells(cfg: &PipelineConfig, groups: &[SweepGroup]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    let (k0, n0) = (cfg.vocab.k, cfg.vocab.n_gmm);
    if groups.contains(&SweepGroup::Aggregation) {
        let cell = |aggregator| SweepCell { group: SweepGroup::Aggregation, aggregator, k: k0, n_gmm: n0 };
        cells.push(cell(Aggregator::Vlad));
        for &alpha in &cfg.sweep.alphas {
            cells.push(cell(Aggregator::SoftVlad { alpha }));
        }
        cells.push(cell(Aggregator::Fisher));
    }
    if groups.contains(&SweepGroup::Components) {
        for &k in &cfg.sweep.ks {
            cells.push(SweepCell { group: SweepGroup::Components, aggregator: Aggregator::Fisher, k, n_gmm: n0 });
        }
    }
    if groups.contains(&SweepGroup::Subsampling) {
        for &n in &cfg.sweep.n_gmms {
            cells.push(SweepCell { group: SweepGroup::Subsampling, aggregator: Aggregator::Fisher, k: k0, n_gmm: n });
        }
    }
    cells
}

/// One row per cell: fit on the drone sets, encode both sides, evaluate.
/// Cells run one after another; each fit parallelizes internally.
pub fn run_sweep(
    drone: &[PatchFeatureSet],
    satellite: &[PatchFeatureSet],
    gt: &GroundTruth,
    cells: &[SweepCell],
    cfg: &PipelineConfig,
) -> anyhow::Result<Vec<SweepRow>> {
    let digest = cfg.digest();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let (vocab, _) = fit_vocabulary(drone, cell.aggregator, cell.k, cell.n_gmm, cfg.seed, &cfg.vocab.em, &cfg.vocab.kmeans)
            .with_context(|| format!("sweep cell {} {}", cell.group, cell.setting()))?;
        let q = encode_sets(drone, Side::Drone, &vocab, cell.aggregator, &digest)?;
        let g = encode_sets(satellite, Side::Satellite, &vocab, cell.aggregator, &digest)?;
        let report = evaluate_stores(&q, &g, gt, &digest)?;
        let [fwd, bwd] = [&report.directions[0], &report.directions[1]];
        log::info!("{} {}: R@1 {:.4} / {:.4}", cell.group, cell.setting(), fwd.recall_at_1, bwd.recall_at_1);
        rows.push(SweepRow {
            cell: cell.clone(),
            r1_d2s: fwd.recall_at_1,
            ap_d2s: fwd.ap,
            r1_s2d: bwd.recall_at_1,
            ap_s2d: bwd.ap,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.cell.group,
            csv_field(&r.cell.setting()),
            csv_field(&r.cell.aggregator.to_string()),
            r.cell.k,
            r.cell.n_gmm,
            r.r1_d2s,
            r.ap_d2s,
            r.r1_s2d,
            r.ap_s2d
        ));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

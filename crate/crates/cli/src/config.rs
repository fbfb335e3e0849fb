//! Run configuration: every pipeline hyperparameter plus seed and paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sfgeo_core::digest::sha256_hex;
use sfgeo_core::fisher_agg::Aggregator;
use sfgeo_core::ground_plane::GroundConfig;
use sfgeo_core::inpaint::InpaintConfig;
use sfgeo_core::ortho_renderer::RenderConfig;
use sfgeo_core::point_sampler::SamplerConfig;
use sfgeo_core::vocabulary::{EmConfig, KmeansConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub alpha_min: f64,
    pub v_min: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { alpha_min: 0.0, v_min: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Patch grid `[rows, cols]` for the baseline extractor.
    pub grid: [usize; 2],
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { grid: [16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub k: usize,
    pub n_gmm: usize,
    pub aggregator: Aggregator,
    pub em: EmConfig,
    pub kmeans: KmeansConfig,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            k: 256,
            n_gmm: 500_000,
            aggregator: Aggregator::Fisher,
            em: EmConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub n_gmms: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![16, 32, 64, 128, 256, 512],
            n_gmms: vec![100_000, 500_000, 1_000_000, 2_000_000],
            alphas: vec![10.0, 30.0, 50.0, 100.0, 200.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    pub jobs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub field: FieldConfig,
    pub sampler: SamplerConfig,
    pub ground: GroundConfig,
    pub render: RenderConfig,
    pub inpaint: InpaintConfig,
    pub features: FeatureConfig,
    pub vocab: VocabConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            field: FieldConfig::default(),
            sampler: SamplerConfig::default(),
            ground: GroundConfig::default(),
            render: RenderConfig::default(),
            inpaint: InpaintConfig::default(),
            features: FeatureConfig::default(),
            vocab: VocabConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

/// Stream offset separating the RANSAC generator from the sampler.
const RANSAC_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let seed = cfg.seed;
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// The top-level seed drives every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = seed;
        self.vocab.em.seed = seed;
        self.vocab.kmeans.seed = seed;
    }

    pub fn ransac_seed(&self) -> u64 {
        self.seed ^ RANSAC_STREAM
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.features.grid[0], self.features.grid[1])
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let f = &self.field;
        if !(0.0..=1.0).contains(&f.alpha_min) || !(0.0..=1.0).contains(&f.v_min) {
            bail!("field.alpha_min and field.v_min must lie in [0, 1]");
        }
        self.sampler.validate()?;
        if !(self.ground.delta > 0.0) || self.ground.iters == 0 || !(self.ground.h_band >= 0.0) {
            bail!("ground.delta and ground.iters must be positive, ground.h_band non-negative");
        }
        self.render.validate()?;
        let ip = &self.inpaint;
        if !(0.0..0.5).contains(&ip.m_crop) {
            bail!("inpaint.m_crop must lie in [0, 0.5)");
        }
        if ip.knn_k == 0 || !(ip.knn_radius >= 1.0) || !(ip.tau_a_frac > 0.0) {
            bail!("inpaint.knn_k, knn_radius and tau_a_frac must be positive");
        }
        let [r, c] = self.features.grid;
        if r == 0 || c == 0 {
            bail!("features.grid must be positive");
        }
        if self.vocab.k == 0 || self.vocab.n_gmm == 0 {
            bail!("vocab.k and vocab.n_gmm must be positive");
        }
        if let Aggregator::SoftVlad { alpha } = self.vocab.aggregator {
            if !(alpha > 0.0) {
                bail!("softvlad temperature must be positive");
            }
        }
        if self.vocab.em.max_iters == 0 || !(self.vocab.em.tol >= 0.0) {
            bail!("vocab.em.max_iters must be positive and tol non-negative");
        }
        if self.sweep.ks.contains(&0) || self.sweep.n_gmms.contains(&0) || self.sweep.alphas.iter().any(|a| !(*a > 0.0)) {
            bail!("sweep axes must hold positive values");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON of every setting except paths.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        sha256_hex(canonical_json(&v).as_bytes())
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_digest() {
        let mut cfg = PipelineConfig::default();
        cfg.vocab.aggregator = Aggregator::SoftVlad { alpha: 30.0 };
        cfg.set_seed(7);
        let back: PipelineConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn paths_do_not_change_the_digest() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.vocab.k = 64;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 3\n[vocab]\nk = 32\n").unwrap();
        assert_eq!(cfg.vocab.k, 32);
        assert_eq!(cfg.vocab.n_gmm, 500_000);
        assert_eq!(cfg.render, RenderConfig::default());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,2],"c":null}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.field.v_min = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.inpaint.m_crop = 0.6;
        assert!(cfg.validate().is_err());
    }
}

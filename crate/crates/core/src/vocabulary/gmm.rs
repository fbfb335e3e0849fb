use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kmeanspp, DroneDescriptors};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::features::Side;
use crate::raster::write_bytes;

pub const VAR_FLOOR: f64 = 1e-6;
pub const GMM_MAGIC: &[u8; 4] = b"OGGM";
const GMM_VERSION: u32 = 1;
const CHUNK: usize = 2048;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    trained_on: Side,
    // per component: ln π_k − ½ Σ_d ln(2π σ²_kd)
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        Self::with_tag(weights, means, variances, dim, Side::Drone)
    }

    fn with_tag(
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        dim: usize,
        trained_on: Side,
    ) -> Result<Self> {
        if trained_on != Side::Drone {
            return Err(Error::SatelliteFreeViolation(format!(
                "vocabulary trained on {trained_on} descriptors"
            )));
        }
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(Error::Empty("mixture components"));
        }
        if means.len() != k * dim {
            return Err(Error::dims(k * dim, means.len()));
        }
        if variances.len() != k * dim {
            return Err(Error::dims(k * dim, variances.len()));
        }
        if weights.iter().chain(&means).chain(&variances).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture parameters"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidInput(format!("mixture weights sum to {sum}")));
        }
        if let Some(v) = variances.iter().find(|&&v| v < VAR_FLOOR) {
            return Err(Error::InvalidInput(format!("variance {v} below floor {VAR_FLOOR}")));
        }
        let inv_var = variances.iter().map(|v| 1.0 / v).collect();
        let log_norm = (0..k)
            .map(|c| {
                weights[c].ln()
                    - 0.5 * variances[c * dim..(c + 1) * dim].iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>()
            })
            .collect();
        Ok(Self { weights, means, variances, dim, trained_on, log_norm, inv_var })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.dim..(c + 1) * self.dim]
    }

    pub fn trained_on(&self) -> Side {
        self.trained_on
    }

    /// `ln π_c + ln N(x; μ_c, diag σ_c²)` for every component.
    pub fn component_log_joint(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let mu = &self.means[c * d..(c + 1) * d];
            let iv = &self.inv_var[c * d..(c + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let r = x[j] - mu[j];
                q += r * r * iv[j];
            }
            *o = self.log_norm[c] - 0.5 * q;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 8 * (self.weights.len() + 2 * self.means.len()));
        out.extend_from_slice(GMM_MAGIC);
        out.extend_from_slice(&GMM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.trained_on.code());
        for v in self.weights.iter().chain(&self.means).chain(&self.variances) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < 17 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != GMM_MAGIC {
            return Err(err(0, "bad magic, expected OGGM".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(4) != GMM_VERSION as usize {
            return Err(err(4, format!("unsupported version {}", u32_at(4))));
        }
        let (k, dim) = (u32_at(8), u32_at(12));
        let side = Side::from_code(bytes[16]).ok_or_else(|| err(16, "bad side tag".into()))?;
        let n = k + 2 * k * dim;
        if bytes.len() != 17 + 8 * n {
            return Err(err(bytes.len().min(17 + 8 * n), format!("expected {} bytes", 17 + 8 * n)));
        }
        let vals: Vec<f64> = bytes[17..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::with_tag(
            vals[..k].to_vec(),
            vals[k..k + k * dim].to_vec(),
            vals[k + k * dim..].to_vec(),
            dim,
            side,
        )
    }

    /// SHA-256 of the binary serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "OGGM",
            "version": GMM_VERSION,
            "k": self.k(),
            "dim": self.dim,
            "trained_on": self.trained_on,
            "digest": self.digest(),
        })
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln p(x)` under the mixture.
pub fn log_density(gmm: &DiagGmm, x: &[f64]) -> f64 {
    let mut l = vec![0.0; gmm.k()];
    gmm.component_log_joint(x, &mut l);
    log_sum_exp(&l)
}

/// Responsibilities `γ_k ∝ π_k N(x; μ_k, σ_k²)`, evaluated in log space.
pub fn posteriors(gmm: &DiagGmm, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; gmm.k()];
    posteriors_into(gmm, x, &mut g);
    g
}

pub(crate) fn posteriors_into(gmm: &DiagGmm, x: &[f64], g: &mut [f64]) -> f64 {
    gmm.component_log_joint(x, g);
    let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in g.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in g.iter_mut() {
        *v /= s;
    }
    m + s.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the average log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: DiagGmm,
    /// Average log-likelihood of the parameters at each E-step, starting
    /// with the initialization.
    pub log_likelihood: Vec<f64>,
    /// E-step indices after which at least one component was reseeded.
    pub reseeded: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

struct Stats {
    ll: f64,
    nk: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Stats {
    fn zero(k: usize, d: usize) -> Self {
        Self { ll: 0.0, nk: vec![0.0; k], s1: vec![0.0; k * d], s2: vec![0.0; k * d] }
    }

    fn add(&mut self, o: &Stats) {
        self.ll += o.ll;
        for (a, b) in self.nk.iter_mut().zip(&o.nk) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&o.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&o.s2) {
            *a += b;
        }
    }
}

/// One E-step. Sufficient statistics are centered on the current means and
/// accumulated per chunk, then summed in chunk order.
fn e_step(gmm: &DiagGmm, x: &DroneDescriptors, point_ll: &mut [f64]) -> Stats {
    let (k, d) = (gmm.k(), gmm.dim());
    let chunks: Vec<Stats> = point_ll
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(ci, lls)| {
            let mut st = Stats::zero(k, d);
            let mut g = vec![0.0; k];
            for (j, ll) in lls.iter_mut().enumerate() {
                let row = x.row(ci * CHUNK + j);
                *ll = posteriors_into(gmm, row, &mut g);
                st.ll += *ll;
                for c in 0..k {
                    let gc = g[c];
                    if gc == 0.0 {
                        continue;
                    }
                    st.nk[c] += gc;
                    let mu = gmm.mean(c);
                    for t in 0..d {
                        let r = row[t] - mu[t];
                        st.s1[c * d + t] += gc * r;
                        st.s2[c * d + t] += gc * r * r;
                    }
                }
            }
            st
        })
        .collect();
    let mut total = Stats::zero(k, d);
    for c in &chunks {
        total.add(c);
    }
    total
}

fn data_variance(x: &DroneDescriptors) -> Vec<f64> {
    let (n, d) = (x.len() as f64, x.dim());
    let mut mean = vec![0.0; d];
    for i in 0..x.len() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..x.len() {
        for t in 0..d {
            let r = x.row(i)[t] - mean[t];
            var[t] += r * r;
        }
    }
    var.into_iter().map(|v| (v / n).max(VAR_FLOOR)).collect()
}

/// EM for a diagonal GMM with k-means++ initialization: means at the seeds,
/// uniform weights, the data variance for every component.
pub fn fit_gmm(x: &DroneDescriptors, k: usize, cfg: &EmConfig) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be positive".into()));
    }
    if x.len() < 10 * k {
        return Err(Error::TooFewSamples { needed: 10 * k, got: x.len() });
    }
    let (n, d) = (x.len(), x.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeanspp(x, k, &mut rng)?;
    let global_var = data_variance(x);
    let means: Vec<f64> = seeds.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let variances: Vec<f64> = (0..k).flat_map(|_| global_var.clone()).collect();
    let mut gmm = DiagGmm::new(vec![1.0 / k as f64; k], means, variances, d)?;

    let mut point_ll = vec![0.0; n];
    let mut history = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let st = e_step(&gmm, x, &mut point_ll);
        let avg = st.ll / n as f64;
        if !avg.is_finite() {
            return Err(Error::NonFinite("log-likelihood"));
        }
        if let Some(&prev) = history.last() {
            if avg - prev < cfg.tol {
                history.push(avg);
                converged = true;
                break;
            }
        }
        history.push(avg);
        if iterations == cfg.max_iters {
            break;
        }
        iterations += 1;

        let mut weights = vec![0.0; k];
        let mut means = vec![0.0; k * d];
        let mut vars = vec![0.0; k * d];
        let mut empty = Vec::new();
        for c in 0..k {
            let nk = st.nk[c];
            if !(nk > 1e-10 * n as f64) {
                empty.push(c);
                continue;
            }
            weights[c] = nk / n as f64;
            let mu = gmm.mean(c);
            for t in 0..d {
                let shift = st.s1[c * d + t] / nk;
                means[c * d + t] = mu[t] + shift;
                vars[c * d + t] = (st.s2[c * d + t] / nk - shift * shift).max(VAR_FLOOR);
            }
        }
        if !empty.is_empty() {
            // worst-fit points, lowest log-likelihood first
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
            for (slot, &c) in empty.iter().enumerate() {
                let p = order[slot];
                means[c * d..(c + 1) * d].copy_from_slice(x.row(p));
                vars[c * d..(c + 1) * d].copy_from_slice(&global_var);
                weights[c] = 1.0 / n as f64;
            }
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            reseeded.push(history.len() - 1);
        }
        gmm = DiagGmm::new(weights, means, vars, d)?;
    }
    log::debug!(
        "EM: K={k}, {iterations} iterations, avg log-likelihood {:.6}",
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(GmmFit { gmm, log_likelihood: history, reseeded, iterations, converged })
}

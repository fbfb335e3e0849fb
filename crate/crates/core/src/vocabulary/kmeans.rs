use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kmeanspp, sq_dist, DroneDescriptors};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::raster::write_bytes;

pub const KMEANS_MAGIC: &[u8; 4] = b"OGKM";
const KMEANS_VERSION: u32 = 1;
const DUPLICATE_TOL: f64 = 1e-9;

/// k-means centers, row-major `K × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Vec<f64>,
    dim: usize,
}

impl Codebook {
    pub fn new(centers: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || centers.is_empty() || centers.len() % dim != 0 {
            return Err(Error::dims(format!("K x {dim} centers"), centers.len()));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook centers"));
        }
        let cb = Self { centers, dim };
        if let Some((a, b)) = cb.duplicate_pair() {
            return Err(Error::InvalidInput(format!("centers {a} and {b} coincide")));
        }
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        let k = self.k();
        for a in 0..k {
            for b in a + 1..k {
                if sq_dist(self.center(a), self.center(b)).sqrt() <= DUPLICATE_TOL {
                    return Some((a, b));
                }
            }
        }
        None
    }

    /// Nearest center and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k() {
            let d = sq_dist(x, self.center(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.centers.len());
        out.extend_from_slice(KMEANS_MAGIC);
        out.extend_from_slice(&KMEANS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centers {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < 16 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != KMEANS_MAGIC {
            return Err(err(0, "bad magic, expected OGKM".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(4) != KMEANS_VERSION as usize {
            return Err(err(4, format!("unsupported version {}", u32_at(4))));
        }
        let (k, dim) = (u32_at(8), u32_at(12));
        if bytes.len() != 16 + 8 * k * dim {
            return Err(err(bytes.len().min(16 + 8 * k * dim), format!("expected {} bytes", 16 + 8 * k * dim)));
        }
        let centers = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(centers, dim)
    }

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
            "format": "OGKM",
            "version": KMEANS_VERSION,
            "k": self.k(),
            "dim": self.dim,
            "digest": self.digest(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { max_iters: 100, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn assign(x: &DroneDescriptors, centers: &[f64], dim: usize) -> Vec<(usize, f64)> {
    let k = centers.len() / dim;
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(row, &centers[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd iterations from k-means++ seeds until assignments stop changing.
/// Empty or coinciding clusters are reseeded at the points farthest from
/// their current center.
pub fn fit_kmeans(x: &DroneDescriptors, k: usize, cfg: &KmeansConfig) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be positive".into()));
    }
    let (n, d) = (x.len(), x.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeanspp(x, k, &mut rng)?;
    let mut centers: Vec<f64> = seeds.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let mut labels = assign(x, &centers, d);
    let mut inertia = vec![labels.iter().map(|l| l.1).sum::<f64>()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut stale = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                stale.push(c);
                continue;
            }
            for t in 0..d {
                centers[c * d + t] = sums[c * d + t] / counts[c] as f64;
            }
        }
        for a in 0..k {
            if stale.contains(&a) {
                continue;
            }
            for b in a + 1..k {
                if !stale.contains(&b)
                    && sq_dist(&centers[a * d..(a + 1) * d], &centers[b * d..(b + 1) * d]).sqrt() <= DUPLICATE_TOL
                {
                    stale.push(b);
                }
            }
        }
        if !stale.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| labels[b].1.total_cmp(&labels[a].1).then(a.cmp(&b)));
            let mut taken: Vec<usize> = Vec::new();
            for &c in &stale {
                let p = order
                    .iter()
                    .copied()
                    .find(|&p| {
                        labels[p].1 > 0.0 && taken.iter().all(|&q| sq_dist(x.row(p), x.row(q)) > 0.0)
                    })
                    .ok_or_else(|| {
                        Error::DegenerateGeometry(format!("fewer than {k} distinct descriptors"))
                    })?;
                taken.push(p);
                centers[c * d..(c + 1) * d].copy_from_slice(x.row(p));
            }
        }
        let next = assign(x, &centers, d);
        inertia.push(next.iter().map(|l| l.1).sum());
        let same = stale.is_empty() && next.iter().zip(&labels).all(|(a, b)| a.0 == b.0);
        labels = next;
        if same {
            converged = true;
            break;
        }
    }
    log::debug!("k-means: K={k}, {iterations} iterations, inertia {:.6}", inertia.last().unwrap());
    Ok(KmeansFit { codebook: Codebook::new(centers, d)?, inertia, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn k_equals_n_returns_the_points() {
        let pts = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0];
        let x = DroneDescriptors::from_rows(pts.clone(), 2).unwrap();
        let fit = fit_kmeans(&x, 4, &KmeansConfig::default()).unwrap();
        let mut got: Vec<Vec<f64>> = (0..4).map(|c| fit.codebook.center(c).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = pts.chunks(2).map(|c| c.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn two_separated_clusters() {
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = [[0.0, 0.0, 0.0], [3.0, 3.0, -1.0]];
        let mut data = Vec::new();
        for i in 0..2000 {
            for t in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(truth[i % 2][t] + sigma * z);
            }
        }
        let x = DroneDescriptors::from_rows(data, 3).unwrap();
        for seed in 0..5 {
            let fit = fit_kmeans(&x, 2, &KmeansConfig { seed, ..Default::default() }).unwrap();
            for t in &truth {
                let (c, d2) = fit.codebook.nearest(t);
                assert!(d2.sqrt() < 0.1 * sigma, "seed {seed} center {c}");
            }
            assert!(fit.converged);
        }
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = DroneDescriptors::from_rows(data, 3).unwrap();
            let fit = fit_kmeans(&x, 8, &KmeansConfig { seed, ..Default::default() }).unwrap();
            for w in fit.inertia.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "seed {seed}: {:?}", fit.inertia);
            }
        }
    }

    #[test]
    fn nearest_ties_pick_lowest_index() {
        let cb = Codebook::new(vec![-1.0, 1.0], 1).unwrap();
        assert_eq!(cb.nearest(&[0.0]).0, 0);
        assert!(Codebook::new(vec![1.0, 1.0], 1).is_err());
    }

    #[test]
    fn too_few_distinct_points() {
        let x = DroneDescriptors::from_rows(vec![1.0, 1.0, 1.0, 2.0], 1).unwrap();
        assert!(fit_kmeans(&x, 3, &KmeansConfig::default()).is_err());
        assert!(fit_kmeans(&x, 5, &KmeansConfig::default()).is_err());
    }

    #[test]
    fn codebook_round_trip() {
        let cb = Codebook::new(vec![0.5, -0.25, 1.0, 2.0], 2).unwrap();
        assert_eq!(Codebook::from_bytes(&cb.to_bytes()).unwrap(), cb);
        let mut b = cb.to_bytes();
        b.pop();
        assert!(matches!(Codebook::from_bytes(&b), Err(Error::Format { .. })));
    }
}

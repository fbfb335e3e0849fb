//! Drone-only visual vocabularies: descriptor subsampling, a diagonal GMM
//! fitted by EM, and a k-means codebook for the VLAD family.

mod gmm;
mod kmeans;

pub use gmm::{fit_gmm, log_density, posteriors, DiagGmm, EmConfig, GmmFit, VAR_FLOOR};
pub use kmeans::{fit_kmeans, Codebook, KmeansConfig, KmeansFit};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{PatchFeatureSet, Side};

/// Row-major descriptor matrix that may be used to build a vocabulary.
///
/// Feature sets only reach this type through [`subsample_descriptors`],
/// which refuses anything that is not tagged drone-side.
#[derive(Debug, Clone, PartialEq)]
pub struct DroneDescriptors {
    data: Vec<f64>,
    dim: usize,
    /// `(set index, row)` of every sampled row, when drawn from feature sets.
    origins: Vec<(u32, u32)>,
}

impl DroneDescriptors {
    /// Wraps a raw matrix of drone-side descriptors (synthetic data, tests).
    pub fn from_rows(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::dims(format!("a multiple of {dim}"), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptor matrix"));
        }
        Ok(Self { data, dim, origins: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn origins(&self) -> &[(u32, u32)] {
        &self.origins
    }
}

/// Per-image cap used by [`subsample_descriptors`]: twice the mean share.
pub fn per_image_cap(n_total: usize, n_images: usize) -> usize {
    n_total.div_ceil(n_images.max(1)) * 2
}

/// Gate shared by every vocabulary entry point.
pub fn ensure_drone_only(sets: &[PatchFeatureSet]) -> Result<()> {
    for set in sets {
        match set.side() {
            Some(Side::Drone) => {}
            Some(Side::Satellite) => {
                return Err(Error::SatelliteFreeViolation(format!(
                    "feature set `{}` is satellite-side",
                    set.meta.image_id
                )))
            }
            None => {
                return Err(Error::SatelliteFreeViolation(format!(
                    "feature set `{}` has no side tag",
                    set.meta.image_id
                )))
            }
        }
    }
    Ok(())
}

/// Uniform per-image sampling without replacement up to the cap, then a
/// global uniform down-sample to `n_total`. If the cap leaves fewer than
/// `min(n_total, available)` rows, dropped rows are drawn uniformly to make
/// up the difference. Rows keep (image, row) order. When everything fits in
/// `n_total` all rows are returned unchanged.
pub fn subsample_descriptors(
    sets: &[PatchFeatureSet],
    n_total: usize,
    seed: u64,
) -> Result<DroneDescriptors> {
    if sets.is_empty() {
        return Err(Error::Empty("feature sets"));
    }
    ensure_drone_only(sets)?;
    let dim = sets[0].dim();
    if let Some(bad) = sets.iter().find(|s| s.dim() != dim) {
        return Err(Error::dims(dim, bad.dim()));
    }
    if n_total == 0 {
        return Err(Error::InvalidInput("n_total must be positive".into()));
    }
    let available: usize = sets.iter().map(|s| s.len()).sum();
    let picks: Vec<Vec<usize>> = if available <= n_total {
        sets.iter().map(|s| (0..s.len()).collect()).collect()
    } else {
        let cap = per_image_cap(n_total, sets.len());
        sets.par_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() <= cap {
                    return (0..s.len()).collect();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut idx = index::sample(&mut rng, s.len(), cap).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect()
    };
    let mut origins: Vec<(u32, u32)> = picks
        .iter()
        .enumerate()
        .flat_map(|(i, rows)| rows.iter().map(move |&r| (i as u32, r as u32)))
        .collect();
    if origins.len() < n_total.min(available) {
        // the cap left too few rows: top up uniformly from the rows it dropped
        let mut taken: Vec<Vec<bool>> = sets.iter().map(|s| vec![false; s.len()]).collect();
        for &(i, r) in &origins {
            taken[i as usize][r as usize] = true;
        }
        let rest: Vec<(u32, u32)> = taken
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.iter().enumerate().filter(|(_, &b)| !b).map(move |(r, _)| (i as u32, r as u32)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sets.len() as u64 + 1);
        let extra = index::sample(&mut rng, rest.len(), n_total - origins.len());
        origins.extend(extra.into_iter().map(|k| rest[k]));
        origins.sort_unstable();
    }
    if origins.len() > n_total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sets.len() as u64);
        let mut keep = index::sample(&mut rng, origins.len(), n_total).into_vec();
        keep.sort_unstable();
        origins = keep.into_iter().map(|k| origins[k]).collect();
    }
    let mut data = Vec::with_capacity(origins.len() * dim);
    for &(i, r) in &origins {
        data.extend(sets[i as usize].row(r as usize).iter().map(|&v| v as f64));
    }
    Ok(DroneDescriptors { data, dim, origins })
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns the chosen row indices; fails when the data
/// has fewer than `k` distinct rows.
pub(crate) fn kmeanspp(x: &DroneDescriptors, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = x.len();
    if k == 0 || n < k {
        return Err(Error::TooFewSamples { needed: k.max(1), got: n });
    }
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = (0..n).into_par_iter().map(|i| sq_dist(x.row(i), x.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "only {} distinct descriptors for {k} clusters",
                chosen.len()
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let c = pick.expect("positive total has a positive entry");
        chosen.push(c);
        let cr = x.row(c);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(x.row(i), cr);
            if nd < *d {
                *d = nd;
            }
        });
    }
    Ok(chosen)
}

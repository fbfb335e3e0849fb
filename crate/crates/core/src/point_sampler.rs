//! Importance-weighted, Mahalanobis-bounded sampling of a Gaussian field into
//! a colored point cloud.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_field::ply::{self, Column, ScalarType};
use crate::gaussian_field::{covariance_of, Gaussian, GaussianField};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPoint {
    pub position: [f64; 3],
    pub color: [f32; 3],
    pub normal: [f32; 3],
    pub source_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<SampledPoint>,
    pub target_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_target: usize,
    /// Mahalanobis radius bounding every sample.
    pub tau_m: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_target: 10_000_000,
            tau_m: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::InvalidInput("n_target must be at least 1".into()));
        }
        if !(self.tau_m > 0.0) {
            return Err(Error::InvalidInput("tau_m must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized `αᵢ·vᵢ` weights. Falls back to uniform weights when every
/// product is zero.
pub fn importance_scores(field: &GaussianField) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Err(Error::Empty("gaussian field"));
    }
    let raw: Vec<f64> = field
        .gaussians()
        .iter()
        .map(|g| g.opacity * g.visibility)
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        let u = 1.0 / raw.len() as f64;
        return Ok(vec![u; raw.len()]);
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `Nᵢ = max(1, ⌊n_target · wᵢ⌋)`.
pub fn allocate_samples(weights: &[f64], n_target: usize) -> Vec<usize> {
    weights
        .iter()
        .map(|&w| {
            let x = n_target as f64 * w;
            // absorb representation error such as 0.29999999999999999 * 10
            let n = (x + 1e-9 * x.max(1.0)).floor() as usize;
            n.max(1)
        })
        .collect()
}

/// Draws `count` positions `μ + R·diag(scale)·z` with `z` standard normal,
/// rejected until `‖z‖ ≤ tau_m`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    g: &Gaussian,
    count: usize,
    tau_m: f64,
    rng: &mut R,
) -> Vec<[f64; 3]> {
    let r = g.rotation_matrix();
    let mu = g.center_vec();
    let tau2 = tau_m * tau_m;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let z = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if z.norm_squared() > tau2 {
            continue;
        }
        let local = Vector3::new(z.x * g.scale[0], z.y * g.scale[1], z.z * g.scale[2]);
        let x = mu + r * local;
        out.push([x.x, x.y, x.z]);
    }
    out
}

/// Mahalanobis distance of `x` from `g` under `covariance_of(g)`.
pub fn mahalanobis(g: &Gaussian, x: [f64; 3]) -> f64 {
    let cov = covariance_of(g);
    let d = Vector3::from(x) - g.center_vec();
    let chol = cov.cholesky().expect("covariance is SPD");
    let y = chol.solve(&d);
    d.dot(&y).max(0.0).sqrt()
}

fn degree_of(g: &Gaussian) -> u8 {
    match g.sh.len() {
        0 | 1 => 0,
        2..=4 => 1,
        5..=9 => 2,
        _ => 3,
    }
}

/// Color averaged over the canonical axis directions, offset by 0.5 and
/// clamped to `[0, 1]`.
pub fn sh_color(g: &Gaussian) -> [f64; 3] {
    let degree = degree_of(g);
    let mut acc = [0.0; 3];
    for d in sh::CANONICAL_DIRECTIONS {
        let c = sh::eval(degree, &g.sh, d);
        for k in 0..3 {
            acc[k] += c[k];
        }
    }
    let n = sh::CANONICAL_DIRECTIONS.len() as f64;
    acc.map(|v| (v / n + 0.5).clamp(0.0, 1.0))
}

/// Rotation column of the smallest scale axis, signed so that z ≥ 0
/// (then y ≥ 0, then x ≥ 0 on ties).
pub fn normal_of(g: &Gaussian) -> [f64; 3] {
    let axis = (0..3)
        .min_by(|&a, &b| g.scale[a].total_cmp(&g.scale[b]))
        .unwrap();
    let col = g.rotation_matrix().column(axis).normalize();
    let mut n = [col.x, col.y, col.z];
    const TIE: f64 = 1e-12;
    let flip = if n[2].abs() > TIE {
        n[2] < 0.0
    } else if n[1].abs() > TIE {
        n[1] < 0.0
    } else {
        n[0] < 0.0
    };
    if flip {
        n = n.map(|v| -v);
    }
    n
}

/// Per-Gaussian RNG stream; independent of evaluation order.
pub fn gaussian_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Importance scores, allocation and bounded sampling composed; each point
/// inherits its parent's baked color and normal.
pub fn sample_point_cloud(field: &GaussianField, cfg: &SamplerConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let weights = importance_scores(field)?;
    let counts = allocate_samples(&weights, cfg.n_target);
    let per_gaussian: Vec<Vec<SampledPoint>> = field
        .gaussians()
        .par_iter()
        .zip(counts.par_iter())
        .enumerate()
        .map(|(i, (g, &count))| {
            let mut rng = gaussian_rng(cfg.seed, i);
            let c = sh_color(g).map(|v| v as f32);
            let n = normal_of(g).map(|v| v as f32);
            sample_gaussian(g, count, cfg.tau_m, &mut rng)
                .into_iter()
                .map(|position| SampledPoint {
                    position,
                    color: c,
                    normal: n,
                    source_index: i as u32,
                })
                .collect()
        })
        .collect();
    Ok(PointCloud {
        points: per_gaussian.into_iter().flatten().collect(),
        target_count: cfg.n_target,
    })
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// XYZ / normal / 8-bit RGB PLY for inspection in point-cloud viewers.
    pub fn to_ply_bytes(&self) -> Vec<u8> {
        let columns = [
            Column { name: "x", ty: ScalarType::F32 },
            Column { name: "y", ty: ScalarType::F32 },
            Column { name: "z", ty: ScalarType::F32 },
            Column { name: "nx", ty: ScalarType::F32 },
            Column { name: "ny", ty: ScalarType::F32 },
            Column { name: "nz", ty: ScalarType::F32 },
            Column { name: "red", ty: ScalarType::U8 },
            Column { name: "green", ty: ScalarType::U8 },
            Column { name: "blue", ty: ScalarType::U8 },
        ];
        let rows: Vec<[f64; 9]> = self
            .points
            .iter()
            .map(|p| {
                [
                    p.position[0],
                    p.position[1],
                    p.position[2],
                    p.normal[0] as f64,
                    p.normal[1] as f64,
                    p.normal[2] as f64,
                    p.color[0] as f64 * 255.0,
                    p.color[1] as f64 * 255.0,
                    p.color[2] as f64 * 255.0,
                ]
            })
            .collect();
        ply::write(&columns, rows.len(), rows.iter().map(|r| r.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_field::normalize_quat;
    use nalgebra::Matrix3;

    fn g(scale: [f64; 3], rotation: [f64; 4]) -> Gaussian {
        Gaussian {
            center: [1.0, -2.0, 0.5],
            scale,
            rotation,
            opacity: 0.8,
            sh: vec![[0.0; 3]],
            visibility: 1.0,
        }
    }

    fn field(alpha: &[f64], vis: &[f64]) -> GaussianField {
        let gs = alpha
            .iter()
            .zip(vis)
            .map(|(&a, &v)| Gaussian {
                opacity: a,
                visibility: v,
                ..g([1.0; 3], [1.0, 0.0, 0.0, 0.0])
            })
            .collect();
        GaussianField::new(gs, 0, String::new()).unwrap()
    }

    fn rand_quat(rng: &mut impl Rng) -> [f64; 4] {
        normalize_quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_scores(&field(&[0.3], &[0.2])).unwrap(), vec![1.0]);
        assert_eq!(
            importance_scores(&field(&[0.5, 0.5], &[1.0, 0.0])).unwrap(),
            vec![1.0, 0.0]
        );
        let w = importance_scores(&field(&[0.2, 0.4, 0.4], &[1.0, 1.0, 0.5])).unwrap();
        // hand arithmetic: (0.2, 0.4, 0.2) / 0.8
        for (a, b) in w.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_importance_is_uniform() {
        let w = importance_scores(&field(&[0.0, 0.5], &[1.0, 0.0])).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_field_is_an_error() {
        let f = GaussianField::new(vec![], 0, String::new()).unwrap();
        assert!(matches!(importance_scores(&f), Err(Error::Empty(_))));
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_samples(&[1.0], 100), vec![100]);
        assert_eq!(allocate_samples(&[0.5, 0.5], 7), vec![3, 3]);
        // max(1, floor(10 * w)) by hand
        assert_eq!(allocate_samples(&[0.7, 0.2, 0.1], 10), vec![7, 2, 1]);
        assert_eq!(allocate_samples(&[0.999, 0.001], 10), vec![9, 1]);
    }

    #[test]
    fn allocation_is_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let n = 1_000_000;
        let counts = allocate_samples(&w, n);
        let total: usize = counts.iter().sum();
        assert!(total >= 50 && total <= n + 50);
        for (c, wi) in counts.iter().zip(&w) {
            let dev = (*c as f64 / n as f64 - wi).abs();
            assert!(dev <= 1.0 / n as f64 + 50.0 / n as f64);
        }
    }

    #[test]
    fn zero_count_draws_nothing() {
        let mut rng = gaussian_rng(0, 0);
        assert!(sample_gaussian(&g([1.0; 3], [1.0, 0.0, 0.0, 0.0]), 0, 2.0, &mut rng).is_empty());
    }

    #[test]
    fn unit_gaussian_samples_stay_in_ball() {
        let mut unit = g([1.0; 3], [1.0, 0.0, 0.0, 0.0]);
        unit.center = [0.0; 3];
        let mut rng = gaussian_rng(9, 0);
        for p in sample_gaussian(&unit, 5000, 2.0, &mut rng) {
            assert!(Vector3::from(p).norm() <= 2.0);
        }
    }

    /// Monte-Carlo estimate of the truncated covariance, from an independent
    /// RNG stream and an explicit Σ^{1/2} built from the eigendecomposition.
    fn truncated_covariance_oracle(g: &Gaussian, draws: usize) -> Matrix3<f64> {
        let eig = covariance_of(g).symmetric_eigen();
        let sqrt = eig.eigenvectors
            * Matrix3::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(424242);
        let mut acc = Matrix3::zeros();
        let mut n = 0;
        while n < draws {
            let z: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
            if z.norm() <= 2.0 {
                let d = sqrt * z;
                acc += d * d.transpose();
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn empirical_covariance_matches_truncated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gauss = g([0.2, 0.7, 1.5], rand_quat(&mut rng));
        let samples = sample_gaussian(&gauss, 10_000, 2.0, &mut gaussian_rng(1, 0));
        let mu = gauss.center_vec();
        let mut emp = Matrix3::zeros();
        for s in &samples {
            let d = Vector3::from(*s) - mu;
            emp += d * d.transpose();
        }
        emp /= samples.len() as f64;
        let oracle = truncated_covariance_oracle(&gauss, 1_000_000);
        let rel = (emp - oracle).norm() / oracle.norm();
        assert!(rel < 0.15, "relative Frobenius error {rel}");
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gauss = g([0.3, 1.0, 2.5], rand_quat(&mut rng));
        let samples = sample_gaussian(&gauss, 100_000, 2.0, &mut gaussian_rng(5, 3));
        let mean = samples
            .iter()
            .fold(Vector3::zeros(), |a, s| a + Vector3::from(*s))
            / samples.len() as f64;
        assert!((mean - gauss.center_vec()).norm() <= 0.05 * 2.5);
    }

    #[test]
    fn sh_dc_only_colors() {
        let mut red = g([1.0; 3], [1.0, 0.0, 0.0, 0.0]);
        red.sh = vec![[0.5 / sh::SH_C0, -0.5 / sh::SH_C0, -0.5 / sh::SH_C0]];
        let c = sh_color(&red);
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
        let zero = g([1.0; 3], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(sh_color(&zero), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn sh_degree_one_matches_direct_basis_sum() {
        let mut gauss = g([1.0; 3], [1.0, 0.0, 0.0, 0.0]);
        gauss.sh = vec![
            [0.3, -0.2, 0.1],
            [0.4, 0.1, -0.3],
            [-0.2, 0.5, 0.2],
            [0.1, 0.1, 0.6],
        ];
        // direct per-direction evaluation of Y_00, Y_1m with hand-written basis
        let dirs = [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        let c0 = 0.5 / std::f64::consts::PI.sqrt();
        let c1 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
        let mut expect = [0.0; 3];
        for [x, y, z] in dirs {
            for ch in 0..3 {
                expect[ch] += c0 * gauss.sh[0][ch] - c1 * y * gauss.sh[1][ch]
                    + c1 * z * gauss.sh[2][ch]
                    - c1 * x * gauss.sh[3][ch];
            }
        }
        let got = sh_color(&gauss);
        for ch in 0..3 {
            let e = (expect[ch] / 6.0 + 0.5).clamp(0.0, 1.0);
            assert!((got[ch] - e).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_examples() {
        assert_eq!(normal_of(&g([3.0, 2.0, 1.0], [1.0, 0.0, 0.0, 0.0])), [0.0, 0.0, 1.0]);
        assert_eq!(normal_of(&g([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0])), [1.0, 0.0, 0.0]);
        // 180° about y flips the z column, sign rule restores +z
        assert_eq!(
            normal_of(&g([3.0, 2.0, 1.0], [0.0, 0.0, 1.0, 0.0])).map(|v| v + 0.0),
            [0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn normal_is_smallest_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let scale = [
                rng.random_range(0.5..1.0),
                rng.random_range(1.5..2.0),
                rng.random_range(0.01..0.3),
            ];
            let gauss = g(scale, rand_quat(&mut rng));
            let eig = covariance_of(&gauss).symmetric_eigen();
            let i = eig.eigenvalues.imin();
            let e = eig.eigenvectors.column(i);
            let n = Vector3::from(normal_of(&gauss));
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!((n.dot(&e).abs() - 1.0).abs() < 1e-6);
            assert!(n.z >= 0.0);
        }
    }

    #[test]
    fn single_isotropic_gaussian_cloud() {
        let f = field(&[0.9], &[1.0]);
        let cfg = SamplerConfig {
            n_target: 1000,
            tau_m: 2.0,
            seed: 4,
        };
        let pc = sample_point_cloud(&f, &cfg).unwrap();
        assert_eq!(pc.len(), 1000);
        for p in &pc.points {
            assert!(mahalanobis(&f.gaussians()[0], p.position) <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn two_gaussian_allocation_and_determinism() {
        let f = field(&[0.9, 0.1], &[1.0, 1.0]);
        let cfg = SamplerConfig {
            n_target: 1000,
            tau_m: 2.0,
            seed: 17,
        };
        let a = sample_point_cloud(&f, &cfg).unwrap();
        let first = a.points.iter().filter(|p| p.source_index == 0).count();
        assert_eq!((first, a.len() - first), (900, 100));
        let b = sample_point_cloud(&f, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_point_cloud(&f, &SamplerConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let f = field(&[0.9], &[1.0]);
        let bad = SamplerConfig {
            n_target: 0,
            ..Default::default()
        };
        assert!(sample_point_cloud(&f, &bad).is_err());
        let bad = SamplerConfig {
            tau_m: 0.0,
            ..Default::default()
        };
        assert!(sample_point_cloud(&f, &bad).is_err());
    }
}

//! Dominant ground-plane estimation and the local `(u, v, h)` frame.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point_sampler::PointCloud;

/// Plane `n·x + offset = 0` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    fn through(points: [&Vector3<f64>; 3]) -> Option<Self> {
        let [a, b, c] = points;
        let cross = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        if scale == 0.0 || cross.norm() <= 1e-10 * scale {
            return None;
        }
        let n = orient_up(cross.normalize());
        Some(Self {
            normal: n,
            offset: -n.dot(a),
        })
    }
}

/// Sign convention for normals: z ≥ 0, then y ≥ 0, then x ≥ 0.
fn orient_up(n: Vector3<f64>) -> Vector3<f64> {
    const TIE: f64 = 1e-12;
    let flip = if n.z.abs() > TIE {
        n.z < 0.0
    } else if n.y.abs() > TIE {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub plane: Plane,
    /// Sorted indices of points within `delta` of the best hypothesis.
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Score {
    count: usize,
    rms: f64,
    iteration: usize,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        (self.count, other.rms, other.iteration) > (other.count, self.rms, self.iteration)
    }
}

/// Least-squares plane through `points` (centroid and smallest principal
/// direction).
pub fn fit_plane_least_squares(points: &[Vector3<f64>]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "least-squares plane needs 3 points, got {}",
            points.len()
        )));
    }
    let (mean, cov) = mean_and_covariance(points.iter().copied());
    let eig = cov.symmetric_eigen();
    let n = orient_up(eig.eigenvectors.column(eig.eigenvalues.imin()).normalize());
    Ok(Plane {
        normal: n,
        offset: -n.dot(&mean),
    })
}

fn mean_and_covariance(points: impl Iterator<Item = Vector3<f64>> + Clone) -> (Vector3<f64>, Matrix3<f64>) {
    let mut n = 0usize;
    let mut mean = Vector3::zeros();
    for p in points.clone() {
        mean += p;
        n += 1;
    }
    mean /= n.max(1) as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (mean, cov / n.max(1) as f64)
}

/// RANSAC over `iters` random 3-point hypotheses. Hypotheses are scored by
/// inlier count, then by lower inlier RMS, then by lower iteration index; the
/// winner is refit by least squares on its inliers.
pub fn fit_plane_ransac<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    delta: f64,
    iters: usize,
    rng: &mut R,
) -> Result<RansacFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "RANSAC needs at least 3 points, got {}",
            points.len()
        )));
    }
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
    let triples: Vec<[usize; 3]> = (0..iters)
        .map(|_| {
            let s = sample(rng, pts.len(), 3);
            [s.index(0), s.index(1), s.index(2)]
        })
        .collect();

    let best = triples
        .par_iter()
        .enumerate()
        .filter_map(|(iteration, t)| {
            let plane = Plane::through([&pts[t[0]], &pts[t[1]], &pts[t[2]]])?;
            let (count, sq) = pts.iter().fold((0usize, 0.0f64), |(c, s), p| {
                let d = plane.signed_distance(p);
                if d.abs() <= delta {
                    (c + 1, s + d * d)
                } else {
                    (c, s)
                }
            });
            let rms = (sq / count.max(1) as f64).sqrt();
            Some((Score { count, rms, iteration }, plane))
        })
        .reduce_with(|a, b| if b.0.better_than(&a.0) { b } else { a });

    let Some((_, hypothesis)) = best else {
        return Err(Error::DegenerateGeometry(format!(
            "all {iters} RANSAC samples were collinear"
        )));
    };
    let inliers: Vec<usize> = (0..pts.len())
        .filter(|&i| hypothesis.signed_distance(&pts[i]).abs() <= delta)
        .collect();
    let inlier_pts: Vec<Vector3<f64>> = inliers.iter().map(|&i| pts[i]).collect();
    let plane = fit_plane_least_squares(&inlier_pts).unwrap_or(hypothesis);
    Ok(RansacFit { plane, inliers })
}

fn project(plane: &Plane, p: &Vector3<f64>) -> Vector3<f64> {
    p - plane.normal * plane.signed_distance(p)
}

/// In-plane basis from the principal direction of the projected points, with
/// `u·x ≥ 0` (tie-break `u·y ≥ 0`) and `v = n × u`. Collinear or too few
/// points fall back to projecting the world x axis (or y) onto the plane.
pub fn pca_basis(points: &[[f64; 3]], plane: &Plane) -> (Vector3<f64>, Vector3<f64>) {
    let n = plane.normal;
    let projected = points.iter().map(|p| project(plane, &Vector3::from(*p)));
    let mut u = None;
    if points.len() >= 2 {
        let (_, cov) = mean_and_covariance(projected);
        let eig = cov.symmetric_eigen();
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
        if l1 > 0.0 && l2 > 1e-9 * l1 {
            let e = eig.eigenvectors.column(order[0]).into_owned();
            let inplane = e - n * n.dot(&e);
            if inplane.norm() > 1e-9 {
                u = Some(inplane.normalize());
            }
        }
    }
    let u = u.unwrap_or_else(|| canonical_axis(&n));
    const TIE: f64 = 1e-12;
    let u = if u.x < -TIE || (u.x.abs() <= TIE && u.y < 0.0) {
        -u
    } else {
        u
    };
    let v = n.cross(&u).normalize();
    (u, v)
}

fn canonical_axis(n: &Vector3<f64>) -> Vector3<f64> {
    for axis in [Vector3::x(), Vector3::y()] {
        let p = axis - n * n.dot(&axis);
        if p.norm() > 1e-6 {
            return p.normalize();
        }
    }
    unreachable!("x and y cannot both be parallel to a unit normal")
}

/// Orthonormal ground frame; `v = normal × u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFrame {
    pub normal: [f64; 3],
    pub basis_u: [f64; 3],
    pub basis_v: [f64; 3],
    pub origin: [f64; 3],
    pub plane_offset: f64,
    pub inlier_count: usize,
}

impl PlaneFrame {
    pub fn from_plane(
        plane: &Plane,
        u: Vector3<f64>,
        v: Vector3<f64>,
        origin: Vector3<f64>,
        inlier_count: usize,
    ) -> Self {
        Self {
            normal: plane.normal.into(),
            basis_u: u.into(),
            basis_v: v.into(),
            origin: origin.into(),
            plane_offset: plane.offset,
            inlier_count,
        }
    }

    pub fn plane(&self) -> Plane {
        Plane {
            normal: Vector3::from(self.normal),
            offset: self.plane_offset,
        }
    }

    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = Vector3::from(p) - Vector3::from(self.origin);
        [
            d.dot(&Vector3::from(self.basis_u)),
            d.dot(&Vector3::from(self.basis_v)),
            d.dot(&Vector3::from(self.normal)),
        ]
    }

    pub fn to_world(&self, uvh: [f64; 3]) -> [f64; 3] {
        let p = Vector3::from(self.origin)
            + Vector3::from(self.basis_u) * uvh[0]
            + Vector3::from(self.basis_v) * uvh[1]
            + Vector3::from(self.normal) * uvh[2];
        p.into()
    }

    /// Upside-down frame: negates the normal, the offset and `basis_v` so the
    /// frame stays right-handed with `u` unchanged.
    pub fn flipped(&self) -> Self {
        Self {
            normal: self.normal.map(|x| -x),
            basis_v: self.basis_v.map(|x| -x),
            plane_offset: -self.plane_offset,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundConfig {
    pub delta: f64,
    pub iters: usize,
    /// Half-thickness of the ground band, also used by the flip test.
    pub h_band: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            delta: 0.30,
            iters: 1000,
            h_band: 0.18,
        }
    }
}

/// RANSAC plane, PCA basis over its inliers and origin at the mean of all
/// plane-projected points.
pub fn estimate_frame<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    cfg: &GroundConfig,
    rng: &mut R,
) -> Result<PlaneFrame> {
    let fit = fit_plane_ransac(points, cfg.delta, cfg.iters, rng)?;
    let inlier_pts: Vec<[f64; 3]> = fit.inliers.iter().map(|&i| points[i]).collect();
    let (u, v) = pca_basis(&inlier_pts, &fit.plane);
    let origin = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + project(&fit.plane, &Vector3::from(*p)))
        / points.len() as f64;
    Ok(PlaneFrame::from_plane(&fit.plane, u, v, origin, fit.inliers.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalCloud {
    /// `(u, v, h)` per point, meters.
    pub coords: Vec<[f64; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub frame: PlaneFrame,
}

impl LocalCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// True when more points beyond the ground band lie below the plane than
/// above it.
fn needs_flip(coords: &[[f64; 3]], h_band: f64) -> bool {
    let (mut above, mut below) = (0usize, 0usize);
    for c in coords {
        if c[2] > h_band {
            above += 1;
        } else if c[2] < -h_band {
            below += 1;
        }
    }
    below > above
}

/// Expresses positions in the frame; flips the frame if roofs would come out
/// negative.
pub fn to_local_coords(
    positions: &[[f64; 3]],
    frame: &PlaneFrame,
    h_band: f64,
) -> (Vec<[f64; 3]>, PlaneFrame) {
    let mut coords: Vec<[f64; 3]> = positions.par_iter().map(|p| frame.to_local(*p)).collect();
    if needs_flip(&coords, h_band) {
        for c in &mut coords {
            c[1] = -c[1];
            c[2] = -c[2];
        }
        (coords, frame.flipped())
    } else {
        (coords, *frame)
    }
}

pub fn to_local_frame(cloud: &PointCloud, frame: &PlaneFrame, h_band: f64) -> LocalCloud {
    let positions: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.position).collect();
    let (coords, frame) = to_local_coords(&positions, frame, h_band);
    LocalCloud {
        coords,
        colors: cloud.points.iter().map(|p| p.color).collect(),
        frame,
    }
}

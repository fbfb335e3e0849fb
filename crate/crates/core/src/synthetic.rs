//! Procedural splat scenes and tile perturbations for tests, demos and the
//! synthetic evaluation corpus.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::DigestBuilder;
use crate::error::Result;
use crate::gaussian_field::{Gaussian, GaussianField};
use crate::raster::{Image, RgbImage};
use crate::sh::SH_C0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Ground extent along x and y, meters.
    pub extent: [f64; 2],
    /// Splat spacing on every surface, meters.
    pub spacing: f64,
    pub buildings: usize,
    /// Maximum tilt of the whole scene away from z-up, degrees.
    pub max_tilt_deg: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { extent: [24.0, 16.0], spacing: 0.25, buildings: 3, max_tilt_deg: 8.0 }
    }
}

/// DC-only SH coefficients rendering as `color`.
pub fn dc_from_color(color: [f64; 3]) -> Vec<[f64; 3]> {
    vec![color.map(|c| (c - 0.5) / SH_C0)]
}

fn quat_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let q = q.quaternion();
    let v = [q.w, q.i, q.j, q.k];
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// Thin disk splat facing `normal`.
fn disk(center: Vector3<f64>, normal: Vector3<f64>, radius: f64, color: [f64; 3]) -> Gaussian {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    Gaussian {
        center: center.into(),
        scale: [radius, radius, radius * 0.1],
        rotation: quat_array(&q),
        opacity: 0.9,
        sh: dc_from_color(color),
        visibility: 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
    pub roof_color: [f64; 3],
}

impl Building {
    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        (x - self.center[0]).abs() <= self.size[0] / 2.0 + margin
            && (y - self.center[1]).abs() <= self.size[1] / 2.0 + margin
    }
}

/// Roof splats per ground splat along each axis. Roofs are sampled more
/// densely so they keep enough points per pixel for the roof layer.
const ROOF_SUBDIVISION: usize = 2;

/// Ground, roofs and walls of axis-aligned boxes on a z-up grid.
fn block_gaussians(
    extent: [f64; 2],
    spacing: f64,
    buildings: &[Building],
    ground_color: &dyn Fn(f64, f64) -> [f64; 3],
    wall_color: [f64; 3],
) -> Vec<Gaussian> {
    let r = spacing * 0.6;
    let mut out = Vec::new();
    let nx = (extent[0] / spacing).round() as usize;
    let ny = (extent[1] / spacing).round() as usize;
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = ((i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing);
            if buildings.iter().any(|b| b.contains(x, y, -spacing * 0.25)) {
                continue;
            }
            out.push(disk(Vector3::new(x, y, 0.0), Vector3::z(), r, ground_color(x, y)));
        }
    }
    for b in buildings {
        let [cx, cy] = b.center;
        let (hx, hy) = (b.size[0] / 2.0, b.size[1] / 2.0);
        let mx = (b.size[0] / spacing).round().max(1.0) as usize;
        let my = (b.size[1] / spacing).round().max(1.0) as usize;
        let (rx, ry) = (mx * ROOF_SUBDIVISION, my * ROOF_SUBDIVISION);
        for j in 0..ry {
            for i in 0..rx {
                let x = cx - hx + (i as f64 + 0.5) * b.size[0] / rx as f64;
                let y = cy - hy + (j as f64 + 0.5) * b.size[1] / ry as f64;
                // two-tone roof: a darker ridge band along the long axis
                let ridge = if b.size[0] >= b.size[1] { (y - cy).abs() < hy * 0.2 } else { (x - cx).abs() < hx * 0.2 };
                let c = if ridge { b.roof_color.map(|v| v * 0.7) } else { b.roof_color };
                out.push(disk(Vector3::new(x, y, b.height), Vector3::z(), r / ROOF_SUBDIVISION as f64, c));
            }
        }
        let mz = (b.height / spacing).round().max(1.0) as usize;
        for k in 0..mz {
            let z = (k as f64 + 0.5) * b.height / mz as f64;
            for i in 0..mx {
                let x = cx - hx + (i as f64 + 0.5) * b.size[0] / mx as f64;
                out.push(disk(Vector3::new(x, cy - hy, z), -Vector3::y(), r, wall_color));
                out.push(disk(Vector3::new(x, cy + hy, z), Vector3::y(), r, wall_color));
            }
            for j in 0..my {
                let y = cy - hy + (j as f64 + 0.5) * b.size[1] / my as f64;
                out.push(disk(Vector3::new(cx - hx, y, z), -Vector3::x(), r, wall_color));
                out.push(disk(Vector3::new(cx + hx, y, z), Vector3::x(), r, wall_color));
            }
        }
    }
    out
}

fn transform(gaussians: &mut [Gaussian], rot: &UnitQuaternion<f64>, shift: Vector3<f64>) {
    for g in gaussians {
        g.center = (rot * Vector3::from(g.center) + shift).into();
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
        ));
        g.rotation = quat_array(&(rot * q));
    }
}

fn field(gaussians: Vec<Gaussian>, tag: &str) -> Result<GaussianField> {
    let mut d = DigestBuilder::new();
    d.update(tag.as_bytes());
    for g in &gaussians {
        d.update_f64s(&g.center);
    }
    GaussianField::new(gaussians, 0, d.finish())
}

/// Flat ground of one color with a single box of another color on top,
/// z-up, ground spanning `[0, extent]²`.
pub fn box_scene(
    extent: f64,
    ground: [f64; 3],
    roof: [f64; 3],
    box_center: [f64; 2],
    box_size: [f64; 2],
    height: f64,
    spacing: f64,
) -> Result<GaussianField> {
    let b = Building { center: box_center, size: box_size, height, roof_color: roof };
    let g = block_gaussians([extent, extent], spacing, &[b], &|_, _| ground, [0.5, 0.5, 0.5]);
    field(g, "box")
}

/// The layout of a procedural block, before tilt.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub buildings: Vec<Building>,
    pub palette: Vec<[f64; 3]>,
    pub waves: Vec<([f64; 2], f64, f64)>,
    pub roads: Vec<([f64; 2], f64, f64)>,
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

pub fn block_layout(seed: u64, params: &SceneParams) -> BlockLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ex, ey] = params.extent;
    let palette: Vec<[f64; 3]> = (0..rng.random_range(3..5)).map(|_| random_color(&mut rng, 0.1, 0.9)).collect();
    let waves = (0..3)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = rng.random_range(0.15..0.6);
            ([k * theta.cos(), k * theta.sin()], rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let roads = (0..rng.random_range(1..3))
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            ([theta.cos(), theta.sin()], rng.random_range(-4.0..4.0), rng.random_range(1.2..2.4))
        })
        .collect();
    let mut buildings: Vec<Building> = Vec::new();
    let mut attempts = 0;
    while buildings.len() < params.buildings && attempts < 200 {
        attempts += 1;
        let size = [rng.random_range(3.0..6.5), rng.random_range(3.0..6.5)];
        let center = [
            rng.random_range(size[0] / 2.0 + 1.5..ex - size[0] / 2.0 - 1.5),
            rng.random_range(size[1] / 2.0 + 1.5..ey - size[1] / 2.0 - 1.5),
        ];
        let clash = buildings.iter().any(|b| {
            (b.center[0] - center[0]).abs() < (b.size[0] + size[0]) / 2.0 + 1.0
                && (b.center[1] - center[1]).abs() < (b.size[1] + size[1]) / 2.0 + 1.0
        });
        if clash {
            continue;
        }
        buildings.push(Building {
            center,
            size,
            height: rng.random_range(3.0..8.0),
            roof_color: random_color(&mut rng, 0.15, 0.95),
        });
    }
    BlockLayout { buildings, palette, waves, roads }
}

impl BlockLayout {
    pub fn ground_color(&self, x: f64, y: f64, extent: [f64; 2]) -> [f64; 3] {
        let (px, py) = (x - extent[0] / 2.0, y - extent[1] / 2.0);
        for (dir, offset, width) in &self.roads {
            if (dir[0] * px + dir[1] * py - offset).abs() < width / 2.0 {
                return [0.22, 0.22, 0.24];
            }
        }
        let f: f64 = self.waves.iter().map(|(k, phase, a)| a * (k[0] * x + k[1] * y + phase).sin()).sum();
        let total: f64 = self.waves.iter().map(|w| w.2).sum();
        let t = ((f / total + 1.0) / 2.0).clamp(0.0, 0.999_999);
        self.palette[(t * self.palette.len() as f64) as usize]
    }
}

/// A procedural city block: textured ground with roads, a few boxes, and a
/// random rigid tilt and shift applied to the whole scene.
pub fn city_block(seed: u64, params: &SceneParams) -> Result<GaussianField> {
    let layout = block_layout(seed, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b10c);
    let jitter = Normal::new(0.0, 0.02).expect("valid sigma");
    let ground = |x: f64, y: f64| layout.ground_color(x, y, params.extent);
    let mut g = block_gaussians(params.extent, params.spacing, &layout.buildings, &ground, [0.6, 0.58, 0.55]);
    for s in &mut g {
        let c = s.sh[0].map(|v| v * SH_C0 + 0.5);
        let c = c.map(|v| (v + jitter.sample(&mut rng)).clamp(0.02, 0.98));
        s.sh = dc_from_color(c);
    }
    let axis: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = rng.random_range(0.0..params.max_tilt_deg).to_radians();
    let tilt_axis = nalgebra::Unit::new_normalize(Vector3::new(axis.cos(), axis.sin(), 0.0));
    let rot = UnitQuaternion::from_axis_angle(&tilt_axis, tilt);
    let shift = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
    transform(&mut g, &rot, shift);
    field(g, &format!("city-block-{seed}"))
}

/// A noisy re-take of an image: brightness and contrast jitter, a shift of
/// up to `max_shift` pixels with edge replication, and i.i.d. Gaussian noise.
pub fn perturb_tile(image: &RgbImage, seed: u64, noise_sigma: f64, max_shift: i64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = rng.random_range(0.92..1.08);
    let bias = rng.random_range(-0.04..0.04);
    let (sx, sy) = if max_shift > 0 {
        (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift))
    } else {
        (0, 0)
    };
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("valid sigma");
    let (w, h) = (image.width() as i64, image.height() as i64);
    Image::from_fn(image.width(), image.height(), |x, y| {
        let src = image.get((x as i64 + sx).clamp(0, w - 1) as usize, (y as i64 + sy).clamp(0, h - 1) as usize);
        std::array::from_fn(|c| {
            let v = gain * src[c] as f64 + bias + noise.sample(&mut rng);
            v.clamp(0.0, 1.0) as f32
        })
    })
}

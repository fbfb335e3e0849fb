//! Top-down rasterization of a local point cloud into a pseudo-orthophoto:
//! adaptive resolution, supersampled ground and roof splatting, two-layer
//! compositing and Lanczos downsampling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ground_plane::{to_local_frame, LocalCloud, PlaneFrame};
use crate::point_sampler::PointCloud;
use crate::raster::{resize_plane, write_bytes, Image, Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub rho_target: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub max_pixels: usize,
    pub h_band: f64,
    pub roof_floor: f64,
    pub dh_bw: f64,
    pub t_roof: f64,
    pub n_min_roof: u32,
    pub r_ground: u32,
    pub r_roof: u32,
    pub ssaa: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rho_target: 1.5,
            r_min: 0.0075,
            r_max: 0.05,
            max_pixels: 100_000_000,
            h_band: 0.18,
            roof_floor: 0.20,
            dh_bw: 0.25,
            t_roof: 0.125,
            n_min_roof: 3,
            r_ground: 1,
            r_roof: 1,
            ssaa: 2,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.rho_target > 0.0) {
            return bad("rho_target must be positive");
        }
        if !(self.r_min > 0.0 && self.r_min <= self.r_max) {
            return bad("resolution range must satisfy 0 < r_min <= r_max");
        }
        if self.max_pixels == 0 || self.ssaa == 0 {
            return bad("max_pixels and ssaa must be at least 1");
        }
        if !(self.h_band >= 0.0 && self.dh_bw >= 0.0 && self.t_roof > 0.0) {
            return bad("band widths must be non-negative and t_roof positive");
        }
        Ok(())
    }

    fn sigma_h(&self) -> f64 {
        self.t_roof * self.dh_bw
    }
}

/// Output raster geometry at final resolution. The supersampled canvas is
/// `ssaa·width × ssaa·height` at `resolution / ssaa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin_uv: [f64; 2],
    pub ssaa: u32,
}

impl RasterSpec {
    pub fn ss_width(&self) -> usize {
        self.width * self.ssaa as usize
    }

    pub fn ss_height(&self) -> usize {
        self.height * self.ssaa as usize
    }

    pub fn ss_resolution(&self) -> f64 {
        self.resolution / self.ssaa as f64
    }

    /// Supersampled pixel of a `(u, v)` location; row 0 is the largest `v`.
    pub fn ss_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let r = self.ss_resolution();
        let fx = ((u - self.origin_uv[0]) / r).floor();
        let fy = ((v - self.origin_uv[1]) / r).floor();
        let (w, h) = (self.ss_width() as f64, self.ss_height() as f64);
        if !(fx >= 0.0 && fx < w && fy >= 0.0 && fy < h) {
            return None;
        }
        Some((fx as usize, self.ss_height() - 1 - fy as usize))
    }
}

/// `r = √(A·ρ/N)` clipped to the configured range, then grown until the
/// canvas fits the pixel cap.
pub fn resolution_from_stats(
    w_x: f64,
    w_y: f64,
    n_pts: usize,
    cfg: &RenderConfig,
) -> Result<(f64, usize, usize)> {
    let area = w_x * w_y;
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "ground footprint {w_x} x {w_y} m has no area"
        )));
    }
    if n_pts == 0 {
        return Err(Error::Empty("point cloud"));
    }
    let n_pix = n_pts as f64 / cfg.rho_target;
    let mut r = (area / n_pix).sqrt().clamp(cfg.r_min, cfg.r_max);
    let dims = |r: f64| {
        let w = (w_x / r - 1e-9).ceil().max(0.0) as usize + 1;
        let h = (w_y / r - 1e-9).ceil().max(0.0) as usize + 1;
        (w, h)
    };
    let (mut w, mut h) = dims(r);
    while w.saturating_mul(h) > cfg.max_pixels {
        let ratio = (w as f64 * h as f64 / cfg.max_pixels as f64).sqrt();
        r *= ratio.max(1.0 + 1e-6);
        (w, h) = dims(r);
    }
    Ok((r, w, h))
}

fn bounds(coords: impl Iterator<Item = [f64; 3]>) -> Option<[f64; 4]> {
    coords.fold(None, |acc, c| {
        let [umin, vmin, umax, vmax] = acc.unwrap_or([c[0], c[1], c[0], c[1]]);
        Some([umin.min(c[0]), vmin.min(c[1]), umax.max(c[0]), vmax.max(c[1])])
    })
}

/// Resolution and canvas from the ground band (or every point when the band
/// holds fewer than 50).
pub fn choose_resolution(local: &LocalCloud, cfg: &RenderConfig) -> Result<RasterSpec> {
    cfg.validate()?;
    if local.is_empty() {
        return Err(Error::Empty("local cloud"));
    }
    let band: Vec<[f64; 3]> = local
        .coords
        .iter()
        .copied()
        .filter(|c| c[2].abs() <= cfg.h_band)
        .collect();
    let selected = if band.len() < 50 { &local.coords } else { &band };
    let [umin, vmin, umax, vmax] = bounds(selected.iter().copied()).expect("non-empty");
    let (resolution, width, height) =
        resolution_from_stats(umax - umin, vmax - vmin, selected.len(), cfg)?;
    Ok(RasterSpec {
        resolution,
        width,
        height,
        origin_uv: [umin, vmin],
        ssaa: cfg.ssaa,
    })
}

/// Accumulated splat layer on the supersampled canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rgb: RgbImage,
    pub weight: Image<f32>,
    pub support: Image<u32>,
}

impl Layer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            rgb: Image::filled(width, height, [0.0; 3]),
            weight: Image::filled(width, height, 0.0),
            support: Image::filled(width, height, 0),
        }
    }
}

/// Integer offsets inside a radius-`r` disk with Gaussian weights
/// (`σ = r/2`).
pub fn disk_kernel(radius: u32) -> Vec<(i64, i64, f64)> {
    let r = radius as i64;
    let sigma = (radius as f64 / 2.0).max(f64::MIN_POSITIVE);
    let mut k = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= (r * r) as f64 {
                k.push((dx, dy, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    k
}

/// One splat: target-independent point weight, color and pixel.
#[derive(Debug, Clone, Copy)]
struct Splat {
    x: usize,
    y: usize,
    weight: f64,
    color: [f32; 3],
}

const TILE_ROWS: usize = 64;

/// Scatter-accumulates splats over row tiles in parallel. Each tile owns its
/// rows and visits splats in input order, so results do not depend on
/// scheduling.
fn accumulate(splats: &[Splat], width: usize, height: usize, radius: u32) -> Layer {
    let kernel = disk_kernel(radius);
    let r = radius as usize;
    let n_tiles = height.div_ceil(TILE_ROWS).max(1);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n_tiles];
    for (i, s) in splats.iter().enumerate() {
        let lo = s.y.saturating_sub(r) / TILE_ROWS;
        let hi = ((s.y + r).min(height.saturating_sub(1))) / TILE_ROWS;
        for bin in &mut bins[lo..=hi] {
            bin.push(i as u32);
        }
    }
    let tiles: Vec<(Vec<[f64; 4]>, Vec<u32>)> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let y0 = t * TILE_ROWS;
            let rows = TILE_ROWS.min(height - y0);
            let mut acc = vec![[0f64; 4]; rows * width];
            let mut sup = vec![0u32; rows * width];
            for &i in bin {
                let s = splats[i as usize];
                for &(dx, dy, kw) in &kernel {
                    let (x, y) = (s.x as i64 + dx, s.y as i64 + dy);
                    if x < 0 || x >= width as i64 || y < y0 as i64 || y >= (y0 + rows) as i64 {
                        continue;
                    }
                    let w = kw * s.weight;
                    if w <= 0.0 {
                        continue;
                    }
                    let idx = (y as usize - y0) * width + x as usize;
                    let a = &mut acc[idx];
                    a[0] += w * s.color[0] as f64;
                    a[1] += w * s.color[1] as f64;
                    a[2] += w * s.color[2] as f64;
                    a[3] += w;
                    sup[idx] += 1;
                }
            }
            (acc, sup)
        })
        .collect();
    let mut layer = Layer::empty(width, height);
    let mut offset = 0;
    for (acc, sup) in tiles {
        for (k, (a, s)) in acc.iter().zip(sup).enumerate() {
            let i = offset + k;
            if a[3] > 0.0 {
                layer.rgb.data_mut()[i] = [
                    (a[0] / a[3]) as f32,
                    (a[1] / a[3]) as f32,
                    (a[2] / a[3]) as f32,
                ];
                layer.weight.data_mut()[i] = a[3] as f32;
                layer.support.data_mut()[i] = s;
            }
        }
        offset += acc.len();
    }
    layer
}

/// Splats points with `|h| ≤ h_band`.
pub fn splat_ground(local: &LocalCloud, spec: &RasterSpec, cfg: &RenderConfig) -> Layer {
    let splats: Vec<Splat> = local
        .coords
        .iter()
        .zip(&local.colors)
        .filter(|(c, _)| c[2].abs() <= cfg.h_band)
        .filter_map(|(c, col)| {
            let (x, y) = spec.ss_pixel(c[0], c[1])?;
            Some(Splat {
                x,
                y,
                weight: 1.0,
                color: *col,
            })
        })
        .collect();
    accumulate(&splats, spec.ss_width(), spec.ss_height(), cfg.r_ground)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `min(max(P25, floor), median)` of the off-ground heights; `+∞` when there
/// are none.
pub fn estimate_roof_height(heights: &[f64], floor: f64) -> f64 {
    if heights.is_empty() {
        return f64::INFINITY;
    }
    let mut sorted = heights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p25 = percentile_sorted(&sorted, 0.25);
    let median = percentile_sorted(&sorted, 0.5);
    p25.max(floor).min(median)
}

/// Weight of a roof point `dh` meters below its pixel's maximum height.
pub fn roof_height_weight(dh: f64, sigma_h: f64) -> f64 {
    (-(dh * dh) / (2.0 * sigma_h * sigma_h)).exp()
}

/// Roof layer from points with `h ≥ h_roof`: per-pixel maximum height,
/// band rejection, height-weighted splatting and support suppression.
/// Returns the layer and the max-normalized weight mask.
pub fn splat_roof(
    local: &LocalCloud,
    spec: &RasterSpec,
    h_roof: f64,
    cfg: &RenderConfig,
) -> (Layer, Image<f32>) {
    let (w, h) = (spec.ss_width(), spec.ss_height());
    let candidates: Vec<(usize, usize, f64, [f32; 3])> = local
        .coords
        .iter()
        .zip(&local.colors)
        .filter(|(c, _)| c[2] >= h_roof)
        .filter_map(|(c, col)| {
            let (x, y) = spec.ss_pixel(c[0], c[1])?;
            Some((x, y, c[2], *col))
        })
        .collect();
    let mut h_max = Image::filled(w, h, f64::NEG_INFINITY);
    for &(x, y, z, _) in &candidates {
        let m = h_max.get_mut(x, y);
        *m = m.max(z);
    }
    let sigma_h = cfg.sigma_h();
    let splats: Vec<Splat> = candidates
        .iter()
        .filter_map(|&(x, y, z, color)| {
            let dh = *h_max.get(x, y) - z;
            (dh <= cfg.dh_bw).then(|| Splat {
                x,
                y,
                weight: roof_height_weight(dh, sigma_h),
                color,
            })
        })
        .collect();
    let mut layer = accumulate(&splats, w, h, cfg.r_roof);
    for i in 0..layer.support.len() {
        if layer.support.data()[i] < cfg.n_min_roof {
            layer.support.data_mut()[i] = 0;
            layer.weight.data_mut()[i] = 0.0;
            layer.rgb.data_mut()[i] = [0.0; 3];
        }
    }
    let max_w = layer.weight.data().iter().fold(0f32, |a, &b| a.max(b));
    let mask = layer
        .weight
        .map(|&wt| if max_w > 0.0 { (wt / max_w).clamp(0.0, 1.0) } else { 0.0 });
    (layer, mask)
}

/// Composited supersampled raster before downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub rgb: RgbImage,
    pub coverage: Mask,
    pub roof_mask: Image<f32>,
    pub support: Image<u32>,
}

/// `M·roof + (1−M)·ground` where both layers are defined; a layer with zero
/// weight has no color, so the other one is taken as is.
pub fn composite(ground: &Layer, roof: &Layer, roof_mask: &Image<f32>) -> Result<Composite> {
    for (w, h) in [
        (roof.rgb.width(), roof.rgb.height()),
        (roof_mask.width(), roof_mask.height()),
    ] {
        if (w, h) != (ground.rgb.width(), ground.rgb.height()) {
            return Err(Error::dims(
                format!("{}x{}", ground.rgb.width(), ground.rgb.height()),
                format!("{w}x{h}"),
            ));
        }
    }
    let (w, h) = (ground.rgb.width(), ground.rgb.height());
    let mut rgb = Image::filled(w, h, [0f32; 3]);
    let mut coverage = Image::filled(w, h, false);
    for i in 0..rgb.len() {
        let m = roof_mask.data()[i];
        let g_def = ground.weight.data()[i] > 0.0;
        let r_def = roof.weight.data()[i] > 0.0;
        let (g, r) = (ground.rgb.data()[i], roof.rgb.data()[i]);
        rgb.data_mut()[i] = match (g_def, r_def) {
            (true, true) => std::array::from_fn(|c| m * r[c] + (1.0 - m) * g[c]),
            (true, false) => g,
            (false, true) => r,
            (false, false) => [0.0; 3],
        };
        coverage.data_mut()[i] = g_def || m > 0.0;
    }
    let support = Image::from_fn(w, h, |x, y| ground.support.get(x, y) + roof.support.get(x, y));
    Ok(Composite {
        rgb,
        coverage,
        roof_mask: roof_mask.clone(),
        support,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthophoto {
    pub rgb: RgbImage,
    pub coverage_mask: Mask,
    pub roof_mask: Image<f32>,
    pub hole_mask: Mask,
    /// Contributing splats per output pixel, summed over the supersampled block.
    pub support: Image<u32>,
    pub spec: RasterSpec,
    pub roof_height: f64,
}

/// 3×3 majority vote; pixels outside the image do not vote.
pub fn majority_filter(mask: &Mask) -> Mask {
    Image::from_fn(mask.width(), mask.height(), |x, y| {
        let (mut on, mut total) = (0, 0);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(&v) = mask.at(x as i64 + dx, y as i64 + dy) {
                    total += 1;
                    on += v as usize;
                }
            }
        }
        2 * on > total
    })
}

/// Normalized-convolution Lanczos reduction by `factor`: color is resampled
/// premultiplied by coverage, so empty supersamples do not darken edges.
pub fn downsample_composite(c: &Composite, spec: &RasterSpec) -> Orthophoto {
    let (w, h) = (spec.width, spec.height);
    let f = spec.ssaa as usize;
    let cov_ss = c.coverage.map(|&b| b as u8 as f32);
    let planes: Vec<Image<f32>> = (0..3)
        .map(|ch| {
            let p = Image::from_fn(c.rgb.width(), c.rgb.height(), |x, y| {
                c.rgb.get(x, y)[ch] * cov_ss.get(x, y)
            });
            resize_plane(&p, w, h)
        })
        .collect();
    let cov = resize_plane(&cov_ss, w, h);
    let rgb = Image::from_fn(w, h, |x, y| {
        let k = *cov.get(x, y);
        if k > 1e-3 {
            std::array::from_fn(|ch| (planes[ch].get(x, y) / k).clamp(0.0, 1.0))
        } else {
            [0.0; 3]
        }
    });
    let coverage = majority_filter(&cov.map(|&k| k >= 0.5));
    let roof_mask = resize_plane(&c.roof_mask, w, h).map(|m| m.clamp(0.0, 1.0));
    let support = Image::from_fn(w, h, |x, y| {
        let mut s = 0;
        for dy in 0..f {
            for dx in 0..f {
                s += c.support.get(x * f + dx, y * f + dy);
            }
        }
        s
    });
    let hole_mask = coverage.map(|&b| !b);
    Orthophoto {
        rgb,
        coverage_mask: coverage,
        roof_mask,
        hole_mask,
        support,
        spec: *spec,
        roof_height: f64::INFINITY,
    }
}

fn identity_downsample(c: &Composite, spec: &RasterSpec) -> Orthophoto {
    Orthophoto {
        rgb: c.rgb.clone(),
        coverage_mask: c.coverage.clone(),
        roof_mask: c.roof_mask.clone(),
        hole_mask: c.coverage.map(|&b| !b),
        support: c.support.clone(),
        spec: *spec,
        roof_height: f64::INFINITY,
    }
}

/// Resolution, both layers, compositing and downsampling for a cloud already
/// in local coordinates.
pub fn render_local(local: &LocalCloud, cfg: &RenderConfig) -> Result<Orthophoto> {
    let spec = choose_resolution(local, cfg)?;
    let ground = splat_ground(local, &spec, cfg);
    let off_ground: Vec<f64> = local
        .coords
        .iter()
        .map(|c| c[2])
        .filter(|&h| h > cfg.h_band)
        .collect();
    let h_roof = estimate_roof_height(&off_ground, cfg.roof_floor);
    let (roof, mask) = splat_roof(local, &spec, h_roof, cfg);
    let comp = composite(&ground, &roof, &mask)?;
    let mut ortho = if spec.ssaa == 1 {
        identity_downsample(&comp, &spec)
    } else {
        downsample_composite(&comp, &spec)
    };
    ortho.roof_height = h_roof;
    log::info!(
        "rendered {}x{} at {:.4} m/px, roof height {h_roof:.3} m, {} holes",
        spec.width,
        spec.height,
        spec.resolution,
        ortho.hole_mask.count()
    );
    Ok(ortho)
}

pub fn render_orthophoto(
    cloud: &PointCloud,
    frame: &PlaneFrame,
    cfg: &RenderConfig,
) -> Result<Orthophoto> {
    let local = to_local_frame(cloud, frame, cfg.h_band);
    render_local(&local, cfg)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: RasterSpec,
    roof_height: Option<f64>,
}

impl Orthophoto {
    /// Writes `orthophoto.png`, `coverage.png`, `roof_mask.png`, `hole.png`
    /// and `raster.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        self.rgb.write_png(&dir.join("orthophoto.png"))?;
        write_bytes(&dir.join("coverage.png"), &self.coverage_mask.encode_png()?)?;
        write_bytes(&dir.join("roof_mask.png"), &self.roof_mask.encode_png()?)?;
        write_bytes(&dir.join("hole.png"), &self.hole_mask.encode_png()?)?;
        let sidecar = Sidecar {
            spec: self.spec,
            roof_height: self.roof_height.is_finite().then_some(self.roof_height),
        };
        write_bytes(
            &dir.join("raster.json"),
            serde_json::to_string_pretty(&sidecar)?.as_bytes(),
        )
    }
}

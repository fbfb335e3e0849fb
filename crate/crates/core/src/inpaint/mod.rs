//! Hole detection and filling for rendered orthophotos.

pub mod jobs;
pub mod knn;
pub mod morph;
pub mod telea;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ortho_renderer::Orthophoto;
use crate::raster::{Image, Mask, RgbImage};

pub use jobs::{export_completion_job, import_completion, CompletionJob, JobMeta};
pub use knn::{fallback_large_fill, knn_fill, KnnOutcome};
pub use morph::morph_cleanup;
pub use telea::telea_fill;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    pub tau_alpha: f32,
    pub tau_s: u32,
    pub s_small: usize,
    /// Large-hole threshold as a fraction of the image area.
    pub tau_a_frac: f64,
    pub knn_k: usize,
    pub knn_radius: f64,
    pub telea_radius: usize,
    pub m_crop: f64,
    /// Fill large holes natively instead of waiting for external completion.
    pub fallback: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            tau_alpha: 0.05,
            tau_s: 1,
            s_small: 12,
            tau_a_frac: 0.005,
            knn_k: 6,
            knn_radius: 4.0,
            telea_radius: 3,
            m_crop: 0.20,
            fallback: true,
        }
    }
}

impl InpaintConfig {
    /// Effective large-hole area; never below the small-hole bound.
    pub fn tau_a(&self, width: usize, height: usize) -> f64 {
        (self.tau_a_frac * (width * height) as f64).max(self.s_small as f64)
    }
}

/// Hole predicate: no coverage, too little support, or a weak roof
/// contribution (`0 < roof_mask < tau_alpha`).
pub fn hole_mask(ortho: &Orthophoto, tau_alpha: f32, tau_s: u32) -> Mask {
    Image::from_fn(ortho.rgb.width(), ortho.rgb.height(), |x, y| {
        let roof = *ortho.roof_mask.get(x, y);
        !*ortho.coverage_mask.get(x, y)
            || *ortho.support.get(x, y) < tau_s
            || (roof > 0.0 && roof < tau_alpha)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoleClass {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoleComponent {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    pub class: HoleClass,
}

impl HoleComponent {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

pub fn classify_area(area: usize, s_small: usize, tau_a: f64) -> HoleClass {
    if area <= s_small {
        HoleClass::Small
    } else if area as f64 > tau_a {
        HoleClass::Large
    } else {
        HoleClass::Medium
    }
}

/// 4-connected components in row-major discovery order.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data()[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn component_from_pixels(pixels: Vec<usize>, width: usize, class: HoleClass) -> HoleComponent {
    let mut bbox = [usize::MAX, usize::MAX, 0, 0];
    for &i in &pixels {
        let (x, y) = (i % width, i / width);
        bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x), bbox[3].max(y)];
    }
    HoleComponent { pixels, bbox, class }
}

pub fn classify_holes(mask: &Mask, s_small: usize, tau_a: f64) -> Vec<HoleComponent> {
    connected_components(mask)
        .into_iter()
        .map(|px| {
            let class = classify_area(px.len(), s_small, tau_a);
            component_from_pixels(px, mask.width(), class)
        })
        .collect()
}

/// `[⌊mW⌋, W−⌊mW⌋) × [⌊mH⌋, H−⌊mH⌋)`.
pub fn center_crop<T: Clone>(img: &Image<T>, m_crop: f64) -> Result<Image<T>> {
    let (w, h) = (img.width(), img.height());
    let mx = (m_crop * w as f64).floor() as usize;
    let my = (m_crop * h as f64).floor() as usize;
    if w <= 2 * mx || h <= 2 * my || w == 0 || h == 0 {
        return Err(Error::InvalidInput(format!(
            "{w}x{h} image is too small for a {m_crop} crop margin"
        )));
    }
    img.crop(mx, my, w - 2 * mx, h - 2 * my)
}

pub(crate) fn apply_writes(img: &mut RgbImage, writes: &[(usize, [f32; 3])]) {
    for &(i, c) in writes {
        img.data_mut()[i] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResult {
    pub image: RgbImage,
    /// Holes left after filling; empty when the fallback is enabled and any
    /// valid pixel exists.
    pub hole_mask: Mask,
    /// Cleaned hole mask that was filled.
    pub filled_mask: Mask,
    pub components: Vec<HoleComponent>,
    /// Pixels of large components, in need of external completion when the
    /// fallback is disabled.
    pub large_mask: Mask,
}

impl InpaintResult {
    pub fn pending(&self) -> bool {
        self.hole_mask.any()
    }
}

/// Detection, cleanup, classification and the native fills. Large holes are
/// left open (see [`InpaintResult::large_mask`]) unless `cfg.fallback` is set.
pub fn inpaint(ortho: &Orthophoto, cfg: &InpaintConfig) -> InpaintResult {
    let raw = hole_mask(ortho, cfg.tau_alpha, cfg.tau_s);
    inpaint_mask(&ortho.rgb, &raw, cfg)
}

pub fn inpaint_mask(image: &RgbImage, raw: &Mask, cfg: &InpaintConfig) -> InpaintResult {
    let (w, h) = (image.width(), image.height());
    let cleaned = morph_cleanup(raw);
    // isolated uncovered pixels dropped by the opening still need a color
    let holes = Image::from_fn(w, h, |x, y| *cleaned.get(x, y) || *raw.get(x, y));
    let mut components = classify_holes(&holes, cfg.s_small, cfg.tau_a(w, h));
    let mut img = image.clone();

    let telea: Vec<(usize, Vec<(usize, [f32; 3])>, Vec<usize>)> = components
        .par_iter()
        .enumerate()
        .filter(|(_, c)| c.class == HoleClass::Small)
        .map(|(i, c)| {
            let out = telea_fill(image, &holes, c, cfg.telea_radius);
            (i, out.writes, out.unfilled)
        })
        .collect();
    for (i, writes, unfilled) in telea {
        apply_writes(&mut img, &writes);
        if !unfilled.is_empty() {
            log::warn!("small hole {i} has no known neighbors; escalating");
            components[i].class = HoleClass::Large;
        }
    }

    let knn: Vec<(usize, KnnOutcome)> = components
        .par_iter()
        .enumerate()
        .filter(|(_, c)| c.class == HoleClass::Medium)
        .map(|(i, c)| (i, knn_fill(image, &holes, c, cfg.knn_k, cfg.knn_radius)))
        .collect();
    for (i, out) in knn {
        apply_writes(&mut img, &out.writes);
        if !out.unfilled.is_empty() {
            log::warn!("medium hole {i} stalled with {} pixels; escalating", out.unfilled.len());
            components[i].class = HoleClass::Large;
        }
    }

    let mut large_mask = Image::filled(w, h, false);
    for c in components.iter().filter(|c| c.class == HoleClass::Large) {
        for &p in &c.pixels {
            large_mask.data_mut()[p] = true;
        }
    }
    let mut remaining = large_mask.clone();
    if cfg.fallback && large_mask.any() {
        let filled_pre = img.clone();
        let fills: Vec<KnnOutcome> = components
            .par_iter()
            .filter(|c| c.class == HoleClass::Large)
            .map(|c| fallback_large_fill(&filled_pre, &holes, c, cfg.knn_k, cfg.knn_radius))
            .collect();
        remaining = Image::filled(w, h, false);
        for out in fills {
            apply_writes(&mut img, &out.writes);
            for p in out.unfilled {
                remaining.data_mut()[p] = true;
            }
        }
    }
    InpaintResult {
        image: img,
        hole_mask: remaining,
        filled_mask: holes,
        components,
        large_mask,
    }
}

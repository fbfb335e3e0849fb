//! Inverse-distance KNN color propagation and the shell-peeling fallback for
//! large holes.

use super::HoleComponent;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnnOutcome {
    pub writes: Vec<(usize, [f32; 3])>,
    pub unfilled: Vec<usize>,
}

/// Offsets within `radius`, ordered by distance then row then column.
pub fn neighbor_offsets(radius: f64) -> Vec<(i64, i64, f64)> {
    let r = radius.floor() as i64;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            if d > 0.0 && d <= radius {
                offs.push((dx, dy, d));
            }
        }
    }
    offs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    offs
}

/// Inverse-distance mean of the `k` nearest valid pixels, or `None` when no
/// valid pixel lies within the offsets.
pub fn knn_color(
    colors: &[[f32; 3]],
    valid: &[bool],
    width: usize,
    height: usize,
    x: usize,
    y: usize,
    k: usize,
    offsets: &[(i64, i64, f64)],
) -> Option<[f32; 3]> {
    let mut acc = [0f64; 3];
    let mut sum = 0f64;
    let mut found = 0;
    for &(dx, dy, d) in offsets {
        if found == k {
            break;
        }
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            continue;
        }
        let j = ny as usize * width + nx as usize;
        if !valid[j] {
            continue;
        }
        let w = 1.0 / (d + 1e-6);
        for c in 0..3 {
            acc[c] += w * colors[j][c] as f64;
        }
        sum += w;
        found += 1;
    }
    (found > 0).then(|| acc.map(|v| (v / sum) as f32))
}

/// Repeated passes over the component; within a pass only pixels valid at
/// its start are read. Pixels with no neighbor in range wait for the next
/// pass; a pass that fills nothing stops the loop.
fn pass_fill(
    image: &RgbImage,
    holes: &Mask,
    component: &HoleComponent,
    k: usize,
    radius: f64,
    eligible: impl Fn(&[bool], usize, usize) -> bool,
) -> KnnOutcome {
    let (w, h) = (image.width(), image.height());
    let offsets = neighbor_offsets(radius);
    let mut colors = image.data().to_vec();
    let mut valid: Vec<bool> = holes.data().iter().map(|&b| !b).collect();
    let mut pending = component.pixels.clone();
    let mut out = KnnOutcome::default();
    while !pending.is_empty() {
        let mut filled = Vec::new();
        let mut rest = Vec::new();
        for &p in &pending {
            let (x, y) = (p % w, p / w);
            let c = eligible(&valid, x, y)
                .then(|| knn_color(&colors, &valid, w, h, x, y, k, &offsets))
                .flatten();
            match c {
                Some(c) => filled.push((p, c)),
                None => rest.push(p),
            }
        }
        if filled.is_empty() {
            break;
        }
        for &(p, c) in &filled {
            colors[p] = c;
            valid[p] = true;
        }
        out.writes.extend(filled);
        pending = rest;
    }
    out.unfilled = pending;
    out
}

/// KNN fill for medium components: up to `k` valid pixels within `radius`,
/// weighted by `1/(d + 1e-6)`.
pub fn knn_fill(
    image: &RgbImage,
    holes: &Mask,
    component: &HoleComponent,
    k: usize,
    radius: f64,
) -> KnnOutcome {
    pass_fill(image, holes, component, k, radius, |_, _, _| true)
}

/// Boundary peeling: each pass fills only pixels 8-adjacent to a valid pixel.
pub fn fallback_large_fill(
    image: &RgbImage,
    holes: &Mask,
    component: &HoleComponent,
    k: usize,
    radius: f64,
) -> KnnOutcome {
    let (w, h) = (image.width() as i64, image.height() as i64);
    pass_fill(image, holes, component, k, radius, move |valid, x, y| {
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                (dx, dy) != (0, 0)
                    && nx >= 0
                    && ny >= 0
                    && nx < w
                    && ny < h
                    && valid[(ny * w + nx) as usize]
            })
        })
    })
}

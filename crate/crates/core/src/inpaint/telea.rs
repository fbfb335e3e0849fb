//! Fast-marching inpainting after Telea (2004), in the form used by OpenCV's
//! `INPAINT_TELEA` without the gradient correction term.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::HoleComponent;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
    /// Another hole, or outside the working window: never a source.
    Blocked,
}

const FAR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    t: f64,
    y: usize,
    x: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (t, y, x)
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.y.cmp(&self.y))
            .then_with(|| other.x.cmp(&self.x))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeleaOutcome {
    pub writes: Vec<(usize, [f32; 3])>,
    /// Component pixels the front never reached.
    pub unfilled: Vec<usize>,
}

struct Window {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    flags: Vec<Flag>,
    t: Vec<f64>,
    color: Vec<[f64; 3]>,
}

impl Window {
    fn idx(&self, x: i64, y: i64) -> Option<usize> {
        (x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h)
            .then(|| y as usize * self.w + x as usize)
    }

    fn flag(&self, x: i64, y: i64) -> Flag {
        self.idx(x, y).map_or(Flag::Blocked, |i| self.flags[i])
    }

    fn time(&self, x: i64, y: i64) -> f64 {
        self.idx(x, y).map_or(FAR, |i| self.t[i])
    }

    fn is_source(&self, x: i64, y: i64) -> bool {
        matches!(self.flag(x, y), Flag::Known | Flag::Band)
    }

    /// Eikonal update from one horizontal and one vertical neighbor.
    fn solve(&self, (x1, y1): (i64, i64), (x2, y2): (i64, i64)) -> f64 {
        let (a11, a22) = (self.time(x1, y1), self.time(x2, y2));
        let m12 = a11.min(a22);
        match (self.is_source(x1, y1), self.is_source(x2, y2)) {
            (true, true) => {
                if (a11 - a22).abs() >= 1.0 {
                    1.0 + m12
                } else {
                    (a11 + a22 + (2.0 - (a11 - a22) * (a11 - a22)).sqrt()) * 0.5
                }
            }
            (true, false) => 1.0 + a11,
            (false, true) => 1.0 + a22,
            (false, false) => 1.0 + m12,
        }
    }

    fn arrival(&self, x: i64, y: i64) -> f64 {
        [
            self.solve((x, y - 1), (x - 1, y)),
            self.solve((x, y + 1), (x - 1, y)),
            self.solve((x, y - 1), (x + 1, y)),
            self.solve((x, y + 1), (x + 1, y)),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }

    fn gradient(&self, x: i64, y: i64) -> (f64, f64) {
        let t = self.time(x, y);
        let axis = |(ax, ay): (i64, i64), (bx, by): (i64, i64)| {
            match (self.is_source(ax, ay), self.is_source(bx, by)) {
                (true, true) => (self.time(ax, ay) - self.time(bx, by)) * 0.5,
                (true, false) => self.time(ax, ay) - t,
                (false, true) => t - self.time(bx, by),
                (false, false) => 0.0,
            }
        };
        (axis((x + 1, y), (x - 1, y)), axis((x, y + 1), (x, y - 1)))
    }

    fn inpaint(&self, x: i64, y: i64, radius: i64) -> Option<[f64; 3]> {
        let (gx, gy) = self.gradient(x, y);
        let t = self.time(x, y);
        let mut acc = [0.0; 3];
        let mut sum = 0.0;
        for ky in y - radius..=y + radius {
            for kx in x - radius..=x + radius {
                let (rx, ry) = ((x - kx) as f64, (y - ky) as f64);
                let len2 = rx * rx + ry * ry;
                if len2 == 0.0 || len2 > (radius * radius) as f64 || !self.is_source(kx, ky) {
                    continue;
                }
                let i = self.idx(kx, ky).expect("sources lie inside the window");
                let lev = 1.0 / (1.0 + (self.t[i] - t).abs());
                let dst = 1.0 / (len2 * len2.sqrt());
                let mut dir = (rx * gx + ry * gy).abs();
                if dir <= 0.01 {
                    dir = 1e-6;
                }
                let w = dst * lev * dir;
                for c in 0..3 {
                    acc[c] += w * self.color[i][c];
                }
                sum += w;
            }
        }
        (sum > 0.0).then(|| acc.map(|v| v / sum))
    }
}

/// Fills one component by marching inward from its known boundary. Pixels of
/// other holes are never read, so components can be filled independently.
pub fn telea_fill(
    image: &RgbImage,
    holes: &Mask,
    component: &HoleComponent,
    radius: usize,
) -> TeleaOutcome {
    let (iw, ih) = (image.width(), image.height());
    let pad = radius + 1;
    let [bx0, by0, bx1, by1] = component.bbox;
    let (x0, y0) = (bx0.saturating_sub(pad), by0.saturating_sub(pad));
    let (x1, y1) = ((bx1 + pad).min(iw - 1), (by1 + pad).min(ih - 1));
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut win = Window {
        x0,
        y0,
        w,
        h,
        flags: Vec::with_capacity(w * h),
        t: vec![0.0; w * h],
        color: Vec::with_capacity(w * h),
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            win.flags.push(if *holes.get(x, y) { Flag::Blocked } else { Flag::Known });
            win.color.push(image.get(x, y).map(f64::from));
        }
    }
    for &p in &component.pixels {
        let i = (p / iw - y0) * w + (p % iw - x0);
        win.flags[i] = Flag::Inside;
        win.t[i] = FAR;
    }
    for i in 0..w * h {
        if win.flags[i] == Flag::Blocked {
            win.t[i] = FAR;
        }
    }

    let mut heap = BinaryHeap::new();
    let n4 = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
    for &p in &component.pixels {
        let (lx, ly) = ((p % iw - x0) as i64, (p / iw - y0) as i64);
        for (dx, dy) in n4 {
            if let Some(j) = win.idx(lx + dx, ly + dy) {
                if win.flags[j] == Flag::Known {
                    win.flags[j] = Flag::Band;
                    heap.push(Entry {
                        t: 0.0,
                        y: (ly + dy) as usize,
                        x: (lx + dx) as usize,
                    });
                }
            }
        }
    }

    let mut out = TeleaOutcome::default();
    while let Some(Entry { x, y, .. }) = heap.pop() {
        let i = y * w + x;
        if win.flags[i] == Flag::Known {
            continue;
        }
        win.flags[i] = Flag::Known;
        for (dx, dy) in n4 {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            let Some(j) = win.idx(nx, ny) else { continue };
            if win.flags[j] != Flag::Inside {
                continue;
            }
            win.t[j] = win.arrival(nx, ny);
            let Some(c) = win.inpaint(nx, ny, radius as i64) else {
                continue;
            };
            win.color[j] = c;
            win.flags[j] = Flag::Band;
            heap.push(Entry {
                t: win.t[j],
                y: ny as usize,
                x: nx as usize,
            });
            let global = (ny as usize + win.y0) * iw + nx as usize + win.x0;
            out.writes.push((global, c.map(|v| v.clamp(0.0, 1.0) as f32)));
        }
    }
    for &p in &component.pixels {
        let i = (p / iw - y0) * w + (p % iw - x0);
        if win.flags[i] == Flag::Inside {
            out.unfilled.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inpaint::{classify_holes, HoleClass};
    use crate::raster::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fill(img: &RgbImage, holes: &Mask) -> (RgbImage, Vec<TeleaOutcome>) {
        let mut out = img.clone();
        let mut outcomes = Vec::new();
        for c in classify_holes(holes, 12, 1e9) {
            let o = telea_fill(img, holes, &c, 3);
            for &(i, v) in &o.writes {
                out.data_mut()[i] = v;
            }
            outcomes.push(o);
        }
        (out, outcomes)
    }

    #[test]
    fn constant_surround() {
        let img = Image::filled(9, 9, [0.3f32, 0.6, 0.9]);
        let mut holes = Image::filled(9, 9, false);
        holes.set(4, 4, true);
        let mut damaged = img.clone();
        damaged.set(4, 4, [0.0; 3]);
        let (out, _) = fill(&damaged, &holes);
        for (a, b) in out.get(4, 4).iter().zip(img.get(4, 4)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn horizontal_gradient_midpoint() {
        let img = Image::from_fn(11, 11, |x, _| [x as f32 / 10.0, 0.5, 1.0 - x as f32 / 10.0]);
        let mut holes = Image::filled(11, 11, false);
        holes.set(5, 5, true);
        let mut damaged = img.clone();
        damaged.set(5, 5, [1.0, 0.0, 0.0]);
        let (out, _) = fill(&damaged, &holes);
        let got = out.get(5, 5);
        assert!((got[0] - 0.5).abs() <= 2.0 / 255.0);
        assert!((got[2] - 0.5).abs() <= 2.0 / 255.0);
    }

    #[test]
    fn only_component_pixels_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img: RgbImage = Image::from_fn(20, 20, |_, _| std::array::from_fn(|_| rng.random()));
        let holes = Image::from_fn(20, 20, |x, y| (8..12).contains(&x) && (8..11).contains(&y));
        let comps = classify_holes(&holes, 12, 1e9);
        assert_eq!((comps.len(), comps[0].area(), comps[0].class), (1, 12, HoleClass::Small));
        let (out, outcomes) = fill(&img, &holes);
        assert!(outcomes[0].unfilled.is_empty());
        for i in 0..img.len() {
            if !holes.data()[i] {
                assert_eq!(out.data()[i].map(f32::to_bits), img.data()[i].map(f32::to_bits));
            }
        }
    }

    #[test]
    fn unreachable_component_is_flagged() {
        let img = Image::filled(4, 4, [0.5f32; 3]);
        let holes = Image::filled(4, 4, true);
        let (_, outcomes) = fill(&img, &holes);
        assert_eq!(outcomes[0].unfilled.len(), 16);
        assert!(outcomes[0].writes.is_empty());
    }

    #[test]
    fn neighbouring_holes_are_not_read() {
        let img = Image::from_fn(12, 5, |x, _| [x as f32 / 11.0; 3]);
        let mut holes = Image::filled(12, 5, false);
        holes.set(5, 2, true);
        holes.set(6, 3, true);
        let mut poisoned = img.clone();
        poisoned.set(6, 3, [100.0; 3]);
        let comps = classify_holes(&holes, 12, 1e9);
        let a = telea_fill(&img, &holes, &comps[0], 3);
        let b = telea_fill(&poisoned, &holes, &comps[0], 3);
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn fills_stay_within_known_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: RgbImage = Image::from_fn(16, 16, |_, _| std::array::from_fn(|_| rng.random_range(0.2..0.7)));
            let holes = Image::from_fn(16, 16, |x, y| (6..9).contains(&x) && (6..10).contains(&y));
            let (out, _) = fill(&img, &holes);
            for i in 0..out.len() {
                for c in out.data()[i] {
                    proptest::prop_assert!((0.2 - 1e-6..=0.7 + 1e-6).contains(&c));
                }
            }
        }
    }
}

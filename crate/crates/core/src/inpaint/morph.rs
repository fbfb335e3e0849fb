//! Binary morphology with square and elliptical structuring elements.

use crate::raster::{Image, Mask};

/// `(dx, dy)` offsets of a `(2r+1)²` square.
pub fn square(radius: i64) -> Vec<(i64, i64)> {
    let mut k = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            k.push((dx, dy));
        }
    }
    k
}

/// The 5×5 ellipse: full middle rows, single centre pixel in the top and
/// bottom rows.
pub fn ellipse5() -> Vec<(i64, i64)> {
    square(2)
        .into_iter()
        .filter(|&(dx, dy)| !(dy.abs() == 2 && dx != 0))
        .collect()
}

/// Pixels outside the image count as unset.
pub fn dilate(mask: &Mask, element: &[(i64, i64)]) -> Mask {
    Image::from_fn(mask.width(), mask.height(), |x, y| {
        element
            .iter()
            .any(|&(dx, dy)| mask.at(x as i64 + dx, y as i64 + dy).copied().unwrap_or(false))
    })
}

/// Pixels outside the image count as set.
pub fn erode(mask: &Mask, element: &[(i64, i64)]) -> Mask {
    Image::from_fn(mask.width(), mask.height(), |x, y| {
        element
            .iter()
            .all(|&(dx, dy)| mask.at(x as i64 + dx, y as i64 + dy).copied().unwrap_or(true))
    })
}

pub fn close(mask: &Mask, element: &[(i64, i64)]) -> Mask {
    erode(&dilate(mask, element), element)
}

pub fn open(mask: &Mask, element: &[(i64, i64)]) -> Mask {
    dilate(&erode(mask, element), element)
}

/// Closing followed by opening with a 3×3 square.
pub fn morph_cleanup(mask: &Mask) -> Mask {
    let k = square(1);
    open(&close(mask, &k), &k)
}

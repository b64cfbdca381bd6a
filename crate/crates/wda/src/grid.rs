//! Small raster utilities shared across the crate: connected components,
//! binary morphology, separable Gaussian blur, and bilinear resampling.
//!
//! Masks are `Array2<u8>` with nonzero = foreground. Label maps are
//! `Array2<u32>` with 0 = background and instance ids 1..=count assigned in
//! raster order of each component's first pixel, which keeps labeling
//! deterministic.

use ndarray::Array2;

/// 8-connected component labeling.
///
/// ```
/// use ndarray::array;
/// use wda::grid::connected_components;
///
/// let mask = array![[1u8, 0, 0], [0, 1, 0], [0, 0, 0]]; // diagonal touch
/// let (labels, count) = connected_components(&mask);
/// assert_eq!(count, 1);
/// assert_eq!(labels[[1, 1]], 1);
/// ```
pub fn connected_components(mask: &Array2<u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Pixel-mean centroid of each label, `(row, col)`, indexed by `label - 1`.
pub fn centroids(labels: &Array2<u32>, count: usize) -> Vec<(f64, f64)> {
    let mut sum = vec![(0.0f64, 0.0f64, 0usize); count];
    for ((y, x), &l) in labels.indexed_iter() {
        if l > 0 {
            let e = &mut sum[(l - 1) as usize];
            e.0 += y as f64;
            e.1 += x as f64;
            e.2 += 1;
        }
    }
    sum.iter().map(|&(sy, sx, n)| (sy / n.max(1) as f64, sx / n.max(1) as f64)).collect()
}

/// Areas in pixels, indexed by `label - 1`.
pub fn areas(labels: &Array2<u32>, count: usize) -> Vec<usize> {
    let mut a = vec![0usize; count];
    for &l in labels.iter() {
        if l > 0 {
            a[(l - 1) as usize] += 1;
        }
    }
    a
}

fn disk_offsets(r: usize) -> Vec<(i64, i64)> {
    let ri = r as i64;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if dy * dy + dx * dx <= ri * ri {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary dilation by a Euclidean disk of radius `r` (radius 1 = the
/// 4-neighborhood cross).
pub fn dilate_disk(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offs = disk_offsets(r);
    let mut out = Array2::<u8>::zeros((h, w));
    for ((y, x), &m) in mask.indexed_iter() {
        if m == 0 {
            continue;
        }
        for &(dy, dx) in &offs {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                out[[ny as usize, nx as usize]] = 1;
            }
        }
    }
    out
}

/// Binary erosion by a Euclidean disk of radius `r`; pixels beyond the
/// border count as background.
pub fn erode_disk(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offs = disk_offsets(r);
    let mut out = Array2::<u8>::zeros((h, w));
    'pix: for ((y, x), &m) in mask.indexed_iter() {
        if m == 0 {
            continue;
        }
        for &(dy, dx) in &offs {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue 'pix;
            }
            if mask[[ny as usize, nx as usize]] == 0 {
                continue 'pix;
            }
        }
        out[[y, x]] = 1;
    }
    out
}

/// Morphological opening (erosion then dilation) with a disk of radius `r`.
pub fn open_disk(mask: &Array2<u8>, r: usize) -> Array2<u8> {
    dilate_disk(&erode_disk(mask, r), r)
}

/// Geodesic reconstruction of `marker` inside `mask`: the union of the
/// connected components of `mask` that intersect `marker`. Unlike a plain
/// opening this never splits or reshapes a surviving component.
pub fn reconstruct(marker: &Array2<u8>, mask: &Array2<u8>) -> Array2<u8> {
    let (labels, count) = connected_components(mask);
    let mut keep = vec![false; count + 1];
    for ((y, x), &m) in marker.indexed_iter() {
        if m != 0 && labels[[y, x]] != 0 {
            keep[labels[[y, x]] as usize] = true;
        }
    }
    labels.mapv(|l| u8::from(keep[l as usize]))
}

/// Separable Gaussian blur with replicate padding, truncated at 4 sigma.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for d in -radius..=radius {
        let v = (-0.5 * (d as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        sum += v;
    }
    let kernel: Vec<f32> = kernel.iter().map(|v| (v / sum) as f32).collect();
    let (h, w) = img.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, d) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * img[[y, clamp(x as i64 + d, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, d) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * tmp[[clamp(y as i64 + d, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Bilinear resize using the pixel-center convention
/// (`src = (dst + 0.5) * scale - 0.5`), clamped at the borders.
pub fn resize_bilinear(img: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(h > 0 && w > 0 && oh > 0 && ow > 0);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array2::<f32>::zeros((oh, ow));
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
            let bot = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

use crate::image::Image;
use crate::scalar::Scalar;

/// Components smaller than this are discarded as noise.
pub const MIN_COMPONENT_PX: usize = 9;

const BINS: usize = 256;

/// Otsu threshold of values in `[0, 1]`, as a bin index; pixels in bins
/// `0..=t` form the dark class.
fn otsu_bin(hist: &[usize; BINS]) -> usize {
    let total: usize = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0usize, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1).powi(2);
        if between > best_var {
            best_var = between;
            best = t;
        }
    }
    best
}

/// Dark-object count: min-max stretch, Otsu threshold, drop components
/// under [`MIN_COMPONENT_PX`] pixels, count 8-connected components.
pub fn cell_count<T: Scalar>(image: &Image<T>) -> usize {
    let (lo, hi) = image.min_max();
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    if !(hi - lo > 1e-9) {
        return 0;
    }
    let bins: Vec<usize> = image
        .as_slice()
        .iter()
        .map(|&v| {
            let s = (v.to_f64_lossy() - lo) / (hi - lo);
            ((s * (BINS - 1) as f64).round() as usize).min(BINS - 1)
        })
        .collect();
    let mut hist = [0usize; BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let t = otsu_bin(&hist);
    let fg: Vec<bool> = bins.iter().map(|&b| b <= t).collect();
    components(&fg, image.width(), image.height())
        .into_iter()
        .filter(|&size| size >= MIN_COMPONENT_PX)
        .count()
}

/// Sizes of the 8-connected components of `mask`, in scan order.
fn components(mask: &[bool], w: usize, h: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

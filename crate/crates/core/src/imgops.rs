//! Plain-array image utilities shared by augmentation, inference and metrics.

use ndarray::{Array2, Array3};

/// Source indices and lerp weight per output position, half-pixel convention.
pub(crate) fn resize_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, n_in as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a channel-first `[C,H,W]` array.
pub fn bilinear_resize_chw(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let plan_y = resize_plan(h, oh);
    let plan_x = resize_plan(w, ow);
    let mut y = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (oi, &(i0, i1, wy)) in plan_y.iter().enumerate() {
            for (oj, &(j0, j1, wx)) in plan_x.iter().enumerate() {
                y[[ci, oi, oj]] = x[[ci, i0, j0]] * (1.0 - wy) * (1.0 - wx)
                    + x[[ci, i0, j1]] * (1.0 - wy) * wx
                    + x[[ci, i1, j0]] * wy * (1.0 - wx)
                    + x[[ci, i1, j1]] * wy * wx;
            }
        }
    }
    y
}

/// Nearest-neighbor resize of a label map; labels are preserved exactly.
pub fn nn_resize_labels(labels: &Array2<u32>, oh: usize, ow: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    if (h, w) == (oh, ow) {
        return labels.clone();
    }
    let mut out = Array2::<u32>::zeros((oh, ow));
    for oi in 0..oh {
        let si = (((oi as f64 + 0.5) * h as f64 / oh as f64 - 0.5).round())
            .clamp(0.0, h as f64 - 1.0) as usize;
        for oj in 0..ow {
            let sj = (((oj as f64 + 0.5) * w as f64 / ow as f64 - 0.5).round())
                .clamp(0.0, w as f64 - 1.0) as usize;
            out[[oi, oj]] = labels[[si, sj]];
        }
    }
    out
}

/// Mirror a `[C,H,W]` array left-right.
pub fn hflip_chw(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                y[[ci, i, j]] = x[[ci, i, w - 1 - j]];
            }
        }
    }
    y
}

/// Mirror a label map left-right.
pub fn hflip_labels(labels: &Array2<u32>) -> Array2<u32> {
    let (h, w) = labels.dim();
    let mut y = Array2::<u32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            y[[i, j]] = labels[[i, w - 1 - j]];
        }
    }
    y
}

/// Symmetric border reflection: `(d c b a | a b c d | d c b a)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

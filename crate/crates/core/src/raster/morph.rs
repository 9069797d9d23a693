use ndarray::Array2;

use super::BitMask;

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance (in pixels, center to center) from each
/// cell to the nearest `true` cell. Cells with no `true` cell anywhere get a
/// huge value.
///
/// Separable lower-envelope-of-parabolas transform, linear in the number of
/// cells.
pub fn squared_distance_transform(bits: &Array2<bool>) -> Array2<f64> {
    let (h, w) = bits.dim();
    let mut d = bits.mapv(|b| if b { 0.0 } else { FAR });
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for c in 0..w {
        for r in 0..h {
            f[r] = d[[r, c]];
        }
        transform_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            d[[r, c]] = out[r];
        }
    }
    for r in 0..h {
        for c in 0..w {
            f[c] = d[[r, c]];
        }
        transform_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for c in 0..w {
            d[[r, c]] = out[c];
        }
    }
    d
}

fn transform_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let intersect = |k: usize| {
            let p = v[k] as f64;
            ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p)
        };
        let mut s = intersect(k);
        // z[0] is -inf, so this never underflows
        while s <= z[k] {
            k -= 1;
            s = intersect(k);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

fn within(d2: f64, radius_px: f64) -> bool {
    let r2 = radius_px * radius_px;
    d2 <= r2 + 1e-9 * r2.max(1.0)
}

/// Buffers a mask by `radius_m` meters: an output cell is set iff some input
/// cell lies within that Euclidean distance (pixel centers).
pub fn dilate_mask(mask: &BitMask, radius_m: f64) -> BitMask {
    if radius_m <= 0.0 {
        return mask.clone();
    }
    let radius_px = radius_m / mask.meta.pixel_size;
    let d2 = squared_distance_transform(&mask.bits);
    BitMask {
        meta: mask.meta.clone(),
        bits: d2.mapv(|v| within(v, radius_px)),
    }
}

/// Sets every cell of `target` within `radius_px` of any seed cell.
///
/// Works on the seeds' bounding box grown by the radius, so the cost scales
/// with the object size rather than the grid size.
pub fn dilate_seeds(target: &mut Array2<bool>, seeds: &[(usize, usize)], radius_px: f64) {
    if seeds.is_empty() {
        return;
    }
    let (h, w) = target.dim();
    let pad = radius_px.max(0.0).ceil() as usize;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &(r, c) in seeds {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let r0 = r0.saturating_sub(pad);
    let c0 = c0.saturating_sub(pad);
    let r1 = (r1 + pad).min(h - 1);
    let c1 = (c1 + pad).min(w - 1);
    let mut local = Array2::from_elem((r1 - r0 + 1, c1 - c0 + 1), false);
    for &(r, c) in seeds {
        local[[r - r0, c - c0]] = true;
    }
    let d2 = squared_distance_transform(&local);
    for ((r, c), &v) in d2.indexed_iter() {
        if within(v, radius_px) {
            target[[r + r0, c + c0]] = true;
        }
    }
}

/// A connected group of same-class cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub class: u32,
    /// Cells as `(row, col)` in row-major discovery order.
    pub cells: Vec<(usize, usize)>,
}

/// 8-connected components of cells whose class satisfies `keep`. Adjacent
/// cells of different classes belong to different components. Components are
/// returned in row-major order of their first cell.
pub fn connected_components(
    labels: &Array2<u32>,
    keep: impl Fn(u32) -> bool,
) -> Vec<Component> {
    let (h, w) = labels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let class = labels[[r, c]];
            if seen[[r, c]] || !keep(class) {
                continue;
            }
            seen[[r, c]] = true;
            stack.push((r, c));
            let mut cells = Vec::new();
            while let Some((cr, cc)) = stack.pop() {
                cells.push((cr, cc));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let nr = cr as i64 + dr;
                        let nc = cc as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[[nr, nc]] && labels[[nr, nc]] == class {
                            seen[[nr, nc]] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            cells.sort_unstable();
            out.push(Component { class, cells });
        }
    }
    out
}

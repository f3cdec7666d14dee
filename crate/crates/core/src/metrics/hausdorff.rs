use crate::error::Result;
use crate::metrics::{mean, BinaryMask};

const FAR: f64 = 1e20;

/// Mask pixels with at least one false 4-neighbor; the image border counts
/// as false.
fn boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height(), m.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest seed pixel.
fn squared_distance_map(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        dt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed(from: &[(usize, usize)], to_map: &[f64], w: usize) -> f64 {
    from.iter()
        .map(|&(y, x)| to_map[y * w + x])
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between mask boundaries, in pixels. If
/// either boundary is empty the image diagonal is returned.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "hausdorff")?;
    let (h, w) = (a.height(), a.width());
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return Ok(((h * h + w * w) as f64).sqrt());
    }
    let da = squared_distance_map(&ba, h, w);
    let db = squared_distance_map(&bb, h, w);
    Ok(directed(&ba, &db, w).max(directed(&bb, &da, w)))
}

/// Mean over GT instances (pooled across frames) of the smallest Hausdorff
/// distance to any prediction of the same frame. A GT instance with no
/// prediction scores the image diagonal.
pub fn mbhd(frames: &[(Vec<BinaryMask>, Vec<BinaryMask>)]) -> Result<Option<f64>> {
    let mut best = Vec::new();
    for (preds, gts) in frames {
        for g in gts {
            let diag = ((g.height().pow(2) + g.width().pow(2)) as f64).sqrt();
            let mut b = diag;
            for p in preds {
                b = b.min(hausdorff(p, g)?);
            }
            best.push(b);
        }
    }
    Ok(mean(&best))
}

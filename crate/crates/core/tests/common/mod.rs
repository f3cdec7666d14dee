//! Independent brute-force oracles and random generators shared by the
//! property suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotforge::metrics::BinaryMask;
use slotforge::slot_attention::SlotFrame;
use slotforge::Tensor64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Slots drawn around a few shared directions so that every threshold in
/// the sweep produces some merges. At least one slot is valid.
pub fn clustered_frame(rng: &mut ChaCha8Rng, k: usize, d: usize) -> SlotFrame<f64> {
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=3))
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise = rng.random_range(0.0..0.6);
    let mut valid: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
    let first = rng.random_range(0..k);
    valid[first] = true;
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let c = &centers[rng.random_range(0..centers.len())];
        data.extend(c.iter().map(|v| v + noise * rng.random_range(-1.0..1.0)));
    }
    SlotFrame::new(Tensor64::new(vec![k, d], data).unwrap(), valid).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

/// Random blob-like mask: a random rectangle with random holes, so both
/// boundaries and interiors occur.
pub fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let y0 = rng.random_range(0..h);
    let x0 = rng.random_range(0..w);
    let y1 = rng.random_range(y0..h);
    let x1 = rng.random_range(x0..w);
    let mut m = BinaryMask::empty(h, w);
    for y in y0..=y1 {
        for x in x0..=x1 {
            m.set(y, x, !rng.random_bool(0.15));
        }
    }
    m
}

/// Random label map with labels in `0..=n`.
pub fn random_labels(rng: &mut ChaCha8Rng, len: usize, n: u32) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..=n)).collect()
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if a.get(y, x) && b.get(y, x) {
                inter += 1;
            }
            if a.get(y, x) || b.get(y, x) {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best-overlap mean by exhaustive pairing.
pub fn mbo(pred: &[BinaryMask], gt: &[BinaryMask]) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for g in gt {
        let mut best = 0.0f64;
        for p in pred {
            best = best.max(iou(p, g));
        }
        total += best;
    }
    Some(total / gt.len() as f64)
}

/// Tube IoU by counting voxels over all frames.
pub fn tube_iou(a: &[BinaryMask], b: &[BinaryMask]) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for (fa, fb) in a.iter().zip(b) {
        for (&x, &y) in fa.data().iter().zip(fb.data()) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// ARI from raw pair counts over every pixel pair on the foreground.
pub fn ari_pairs(pred: &[u32], gt: &[u32], fg: &BinaryMask) -> Option<f64> {
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| fg.data()[i]).collect();
    if idx.is_empty() {
        return None;
    }
    let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let sp = pred[idx[a]] == pred[idx[b]];
            let sg = gt[idx[a]] == gt[idx[b]];
            match (sp, sg) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if denom == 0.0 {
        // Both partitions trivial: they agree iff no pair disagrees.
        return Some(if n10 + n01 == 0.0 { 1.0 } else { 0.0 });
    }
    Some(2.0 * (n00 * n11 - n01 * n10) / denom)
}

fn boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Hausdorff distance by the direct distance matrix between boundaries.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (boundary(a), boundary(b));
    let diag = ((a.height().pow(2) + a.width().pow(2)) as f64).sqrt();
    if ba.is_empty() || bb.is_empty() {
        return diag;
    }
    let d = |p: (i64, i64), q: (i64, i64)| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt();
    let dir = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    dir(&ba, &bb).max(dir(&bb, &ba))
}

pub fn mbhd(frames: &[(Vec<BinaryMask>, Vec<BinaryMask>)]) -> Option<f64> {
    let mut all = Vec::new();
    for (p, g) in frames {
        for gm in g {
            let diag = ((gm.height().pow(2) + gm.width().pow(2)) as f64).sqrt();
            all.push(p.iter().map(|pm| hausdorff(pm, gm)).fold(diag, f64::min));
        }
    }
    (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
}

/// Pixel set of a mask's bounding box, or `None` when empty.
pub fn box_pixels(m: &BinaryMask) -> Option<Vec<(usize, usize)>> {
    let on: Vec<(usize, usize)> = (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x))
        .collect();
    if on.is_empty() {
        return None;
    }
    let (y0, y1) = (on.iter().map(|p| p.0).min()?, on.iter().map(|p| p.0).max()?);
    let (x0, x1) = (on.iter().map(|p| p.1).min()?, on.iter().map(|p| p.1).max()?);
    Some((y0..=y1).flat_map(|y| (x0..=x1).map(move |x| (y, x))).collect())
}

/// CorLoc by rasterizing boxes and counting pixel overlaps.
pub fn corloc(frames: &[(Vec<BinaryMask>, Vec<BinaryMask>)]) -> Option<f64> {
    let (mut scored, mut hit) = (0, 0);
    for (p, g) in frames {
        let gb: Vec<_> = g.iter().filter_map(box_pixels).collect();
        if gb.is_empty() {
            continue;
        }
        scored += 1;
        let pb: Vec<_> = p.iter().filter_map(box_pixels).collect();
        let good = pb.iter().any(|a| {
            gb.iter().any(|b| {
                let inter = a.iter().filter(|q| b.contains(q)).count();
                inter as f64 / (a.len() + b.len() - inter) as f64 >= 0.5
            })
        });
        hit += good as usize;
    }
    (scored > 0).then(|| 100.0 * hit as f64 / scored as f64)
}

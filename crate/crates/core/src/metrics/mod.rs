//! Unsupervised object-discovery metrics.
//!
//! Predicted instances are the per-pixel argmax slot masks; ground truth is
//! one mask per annotated object. "Best overlap" metrics take, for every GT
//! instance, the best-matching prediction (no one-to-one assignment).

mod ari;
mod hausdorff;
mod mask;

pub use ari::fg_ari;
pub use hausdorff::{hausdorff, mbhd};
pub use mask::{box_iou, mask_to_box, upsample_labels, BBox, BinaryMask, MaskTube};

use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`; two empty masks give 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Best IoU of every GT mask against the predictions (0 when none).
pub fn best_overlaps(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Vec<f64>> {
    gt.iter()
        .map(|g| {
            pred.iter()
                .map(|p| iou(p, g))
                .try_fold(0.0f64, |best, v| v.map(|v| best.max(v)))
        })
        .collect()
}

/// Frame mean best overlap; `None` when the frame has no GT instance.
pub fn mbo_frame(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Option<f64>> {
    Ok(mean(&best_overlaps(pred, gt)?))
}

/// mBO-F with GT instances pooled across frames: `frames[t] = (pred, gt)`.
pub fn mbo_frames(frames: &[(Vec<BinaryMask>, Vec<BinaryMask>)]) -> Result<Option<f64>> {
    let mut all = Vec::new();
    for (p, g) in frames {
        all.extend(best_overlaps(p, g)?);
    }
    Ok(mean(&all))
}

/// Best spatio-temporal IoU of every GT tube against the predicted tubes.
pub fn best_tube_overlaps(pred: &[MaskTube], gt: &[MaskTube]) -> Result<Vec<f64>> {
    gt.iter()
        .map(|g| {
            let mut best = 0.0f64;
            for p in pred {
                best = best.max(p.iou(g)?);
            }
            Ok(best)
        })
        .collect()
}

/// Video mean best overlap over tubes; `None` without GT tubes.
pub fn mbo_video(pred: &[MaskTube], gt: &[MaskTube]) -> Result<Option<f64>> {
    Ok(mean(&best_tube_overlaps(pred, gt)?))
}

/// Percentage of scored frames (frames with at least one GT box) in which
/// some predicted box has IoU ≥ 0.5 with some GT box. `None` when no frame
/// is scored.
pub fn corloc(pred_boxes: &[Vec<BBox>], gt_boxes: &[Vec<BBox>]) -> Result<Option<f64>> {
    if pred_boxes.len() != gt_boxes.len() {
        return Err(Error::contract(format!(
            "corloc: {} predicted frames vs {} GT frames",
            pred_boxes.len(),
            gt_boxes.len()
        )));
    }
    let (mut scored, mut correct) = (0usize, 0usize);
    for (p, g) in pred_boxes.iter().zip(gt_boxes) {
        if g.is_empty() {
            continue;
        }
        scored += 1;
        if p.iter().any(|pb| g.iter().any(|gb| box_iou(pb, gb) >= 0.5)) {
            correct += 1;
        }
    }
    Ok((scored > 0).then(|| 100.0 * correct as f64 / scored as f64))
}

pub(crate) fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn mbo_frame_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1)]);
        let b = mask(4, 4, &[(3, 3), (3, 2)]);
        assert_eq!(mbo_frame(&[b.clone(), a.clone(), mask(4, 4, &[(2, 2)])], &[a.clone(), b.clone()]).unwrap(), Some(1.0));
        assert_eq!(mbo_frame(&[], &[a.clone()]).unwrap(), Some(0.0));
        assert_eq!(mbo_frame(&[a.clone()], &[]).unwrap(), None);

        // iou(A) = 0.6 best, iou(B) = 0.2 best.
        let ga = mask(10, 10, &(0..5).map(|x| (0, x)).collect::<Vec<_>>());
        let pa = mask(10, 10, &(0..3).map(|x| (0, x)).collect::<Vec<_>>());
        let gb = mask(10, 10, &(0..5).map(|x| (5, x)).collect::<Vec<_>>());
        let pb = mask(10, 10, &[(5, 0)]);
        let got = mbo_frame(&[pa, pb], &[ga, gb]).unwrap().unwrap();
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mbo_video_identity_swap() {
        // Two equal objects; the prediction swaps identities halfway.
        let t_len = 4;
        let a = mask(4, 4, &[(0, 0), (0, 1)]);
        let b = mask(4, 4, &[(3, 2), (3, 3)]);
        let gt_a = MaskTube::new(vec![a.clone(); t_len]).unwrap();
        let gt_b = MaskTube::new(vec![b.clone(); t_len]).unwrap();
        let p0 = MaskTube::new(vec![a.clone(), a.clone(), b.clone(), b.clone()]).unwrap();
        let p1 = MaskTube::new(vec![b.clone(), b.clone(), a.clone(), a.clone()]).unwrap();
        let v = mbo_video(&[p0, p1], &[gt_a.clone(), gt_b.clone()]).unwrap().unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let frames: Vec<_> = (0..t_len)
            .map(|t| {
                let preds = if t < 2 { vec![a.clone(), b.clone()] } else { vec![b.clone(), a.clone()] };
                (preds, vec![a.clone(), b.clone()])
            })
            .collect();
        assert_eq!(mbo_frames(&frames).unwrap(), Some(1.0));
        assert_eq!(mbo_video(&[gt_a.clone()], &[gt_a]).unwrap(), Some(1.0));
    }

    #[test]
    fn mbo_video_single_frame_equals_mbo_frame() {
        let a = mask(5, 5, &[(0, 0), (1, 1), (2, 2)]);
        let b = mask(5, 5, &[(1, 1), (2, 2), (4, 4)]);
        let v = mbo_video(&[MaskTube::new(vec![b.clone()]).unwrap()], &[MaskTube::new(vec![a.clone()]).unwrap()])
            .unwrap();
        assert_eq!(v, mbo_frame(&[b], &[a]).unwrap());
        let short = MaskTube::new(vec![BinaryMask::empty(5, 5); 2]).unwrap();
        let long = MaskTube::new(vec![BinaryMask::empty(5, 5); 3]).unwrap();
        assert!(mbo_video(&[short], &[long]).is_err());
    }

    #[test]
    fn corloc_examples() {
        let gb = BBox::new(0, 0, 9, 9);
        let good = BBox::new(0, 0, 9, 8);
        let bad = BBox::new(20, 20, 30, 30);
        assert_eq!(corloc(&[vec![gb]], &[vec![gb]]).unwrap(), Some(100.0));
        assert_eq!(corloc(&[vec![], vec![]], &[vec![gb], vec![gb]]).unwrap(), Some(0.0));
        assert_eq!(
            corloc(&[vec![bad, good], vec![bad], vec![]], &[vec![gb], vec![gb], vec![]]).unwrap(),
            Some(50.0)
        );
        assert_eq!(corloc(&[vec![]], &[vec![]]).unwrap(), None);
    }
}

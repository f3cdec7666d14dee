use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings restricted to `fg` pixels.
///
/// Returns `None` when `fg` is empty. A zero denominator (both partitions
/// trivial) yields 1 when the partitions coincide and 0 otherwise.
pub fn fg_ari(pred_labels: &[u32], gt_labels: &[u32], fg: &BinaryMask) -> Result<Option<f64>> {
    if pred_labels.len() != fg.data().len() || gt_labels.len() != fg.data().len() {
        return Err(Error::shape(
            "fg_ari",
            format!(
                "pred {} / gt {} labels for {} pixels",
                pred_labels.len(),
                gt_labels.len(),
                fg.data().len()
            ),
        ));
    }
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    let mut n = 0u64;
    for ((&p, &g), &on) in pred_labels.iter().zip(gt_labels).zip(fg.data()) {
        if !on {
            continue;
        }
        *table.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let denom = 0.5 * (a + b) - expected;
    if denom == 0.0 || total == 0.0 {
        // Identical partitions: every nonzero cell fills its row and column.
        let identical = table.len() == rows.len() && table.len() == cols.len();
        return Ok(Some(if identical { 1.0 } else { 0.0 }));
    }
    Ok(Some((index - expected) / denom))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_fg(n: usize) -> BinaryMask {
        BinaryMask::new(1, n, vec![true; n]).unwrap()
    }

    #[test]
    fn examples() {
        let gt = [1, 1, 1, 2, 2, 2];
        assert_eq!(fg_ari(&[7, 7, 7, 3, 3, 3], &gt, &all_fg(6)).unwrap(), Some(1.0));
        assert_eq!(fg_ari(&[4; 6], &gt, &all_fg(6)).unwrap(), Some(0.0));
        let v = fg_ari(&[1, 1, 2, 2, 2, 2], &gt, &all_fg(6)).unwrap().unwrap();
        assert!((v - 12.0 / 37.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn background_ignored_and_empty_fg_skipped() {
        let fg = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
        assert_eq!(fg_ari(&[1, 1, 5, 6], &[2, 2, 0, 0], &fg).unwrap(), Some(1.0));
        let none = BinaryMask::empty(1, 4);
        assert_eq!(fg_ari(&[1, 1, 1, 1], &[0; 4], &none).unwrap(), None);
    }

    #[test]
    fn degenerate_partitions() {
        // All singletons on both sides: identical.
        assert_eq!(fg_ari(&[1, 2, 3], &[4, 5, 6], &all_fg(3)).unwrap(), Some(1.0));
        assert_eq!(fg_ari(&[1], &[9], &all_fg(1)).unwrap(), Some(1.0));
    }
}

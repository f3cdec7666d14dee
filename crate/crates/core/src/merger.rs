//! Similarity-thresholded slot merging. Within one frame, valid slots whose
//! cosine similarity reaches `theta` are linked; each connected component
//! collapses into its lowest-index member, which takes the mean of the
//! component. The other members are zeroed and marked invalid.
//!
//! The clustering decision is discrete. Gradients reach the merged rows
//! through the mean only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, RowSource, Tensor};
use crate::scalar::Scalar;
use crate::slot_attention::{SlotFrame, SlotSequence, SlotVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergerConfig {
    pub theta: f64,
    pub eps: f64,
}

impl Default for MergerConfig {
    fn default() -> Self {
        Self { theta: 0.90, eps: 1e-8 }
    }
}

impl MergerConfig {
    pub fn with_theta(theta: f64) -> Self {
        Self { theta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", format!("{} outside [-1, 1]", self.theta)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("merger_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeResult<T> {
    pub merged: SlotFrame<T>,
    pub valid: Vec<bool>,
    /// Representative slot of each input slot; `None` for slots that were
    /// already invalid.
    pub cluster_of: Vec<Option<usize>>,
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T], eps: T) -> T {
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let na = a.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let nb = b.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    dot / (na * nb + eps)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    /// Keeps the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Representative of every row of `rows` (indexed as given), linking pairs
/// with similarity `>= theta`.
fn components<T: Scalar>(rows: &[&[T]], cfg: &MergerConfig) -> Vec<usize> {
    let mut uf = UnionFind((0..rows.len()).collect());
    let theta = T::of(cfg.theta);
    let eps = T::of(cfg.eps);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if cosine_similarity(rows[i], rows[j], eps) >= theta {
                uf.union(i, j);
            }
        }
    }
    (0..rows.len()).map(|i| uf.find(i)).collect()
}

/// Merges the valid slots of a frame held in a graph. Returns the merged
/// valid rows and, per input row, the row that now represents it.
pub fn merge_vars<T: Scalar>(g: &mut Graph<T>, slots: &SlotVars, cfg: &MergerConfig) -> Result<(SlotVars, Vec<usize>)> {
    let v = g.value(slots.var);
    let rows: Vec<&[T]> = (0..v.rows()).map(|r| v.row(r)).collect();
    let rep = components(&rows, cfg);
    let d = v.cols();
    let reps: Vec<usize> = (0..rep.len()).filter(|&i| rep[i] == i).collect();
    if reps.len() == rep.len() {
        return Ok((slots.clone(), rep));
    }
    let sources = reps
        .iter()
        .map(|&r| {
            let members: Vec<usize> = (0..rep.len()).filter(|&i| rep[i] == r).collect();
            let w = T::one() / T::of(members.len() as f64);
            members.iter().map(|&i| RowSource::new(slots.var, i, w)).collect()
        })
        .collect();
    let var = g.row_mix(d, sources)?;
    let valid = reps.iter().map(|&r| slots.valid[r]).collect();
    Ok((SlotVars { var, valid, k: slots.k }, rep))
}

pub fn merge_frame<T: Scalar>(sf: &SlotFrame<T>, cfg: &MergerConfig) -> Result<MergeResult<T>> {
    let mut g = Graph::new();
    let sv = SlotVars::from_frame(&mut g, sf)?;
    let (merged, rep) = merge_vars(&mut g, &sv, cfg)?;
    let merged = merged.to_frame(&g)?;
    let mut cluster_of = vec![None; sf.k()];
    for (i, &slot) in sv.valid.iter().enumerate() {
        cluster_of[slot] = Some(sv.valid[rep[i]]);
    }
    Ok(MergeResult {
        valid: merged.valid.clone(),
        merged,
        cluster_of,
    })
}

/// Applies [`merge_frame`] to each frame; returns the merged sequence and the
/// `T × K` validity mask.
pub fn merge_sequence<T: Scalar>(s: &SlotSequence<T>, cfg: &MergerConfig) -> Result<(SlotSequence<T>, Vec<Vec<bool>>)> {
    let frames = s
        .frames
        .iter()
        .map(|f| merge_frame(f, cfg).map(|r| r.merged))
        .collect::<Result<Vec<_>>>()?;
    let seq = SlotSequence::new(frames)?;
    let mask = seq.validity();
    Ok((seq, mask))
}

/// Convenience for building a frame from plain rows in tests and tools.
pub fn frame_from_rows<T: Scalar>(rows: &[Vec<f64>]) -> Result<SlotFrame<T>> {
    let d = rows.first().map_or(0, |r| r.len());
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    SlotFrame::all_valid(Tensor::from_f64(&[rows.len(), d], &data)?)
}

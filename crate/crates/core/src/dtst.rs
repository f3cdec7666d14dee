//! Temporal slot transformer: bidirectional self-attention over every valid
//! slot of a window of frames.
//!
//! Frame position enters as a sinusoidal code added to the query and key
//! inputs only, so a layer with zero output projections is an exact identity
//! and slots are never tagged with their index. A learned per-head bias on
//! pairs that share a slot index lets otherwise identical mask tokens attend
//! to their own slot's history while keeping within-frame permutation
//! equivariance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::merger::{merge_vars, MergerConfig};
use crate::model::Model;
use crate::nn::{Graph, MlpVars, ParamStore, RowSource, Tensor, Var};
use crate::scalar::Scalar;
use crate::slot_attention::{SlotFrame, SlotSequence, SlotVars};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal code of frame `t`.
pub fn temporal_pe<T: Scalar>(t: usize, d_slot: usize, t_max: usize) -> Result<Vec<T>> {
    if t >= t_max {
        return Err(Error::contract(format!("frame index {t} outside [0, {t_max})")));
    }
    Ok((0..d_slot)
        .map(|j| {
            let i = (j / 2) as f64;
            let a = t as f64 / 10000f64.powf(2.0 * i / d_slot as f64);
            T::of(if j % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect())
}

/// Which valid tokens of a `T × K` grid are replaced by the mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<Vec<bool>>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Masks `round(ratio · valid count)` valid tokens chosen uniformly.
    pub fn sample(validity: &[Vec<bool>], ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config("mask_ratio", format!("{ratio} outside [0, 1]")));
        }
        let tokens: Vec<(usize, usize)> = validity
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().filter(|(_, &v)| v).map(move |(k, _)| (t, k)))
            .collect();
        let count = (ratio * tokens.len() as f64).round() as usize;
        let mut masked: Vec<Vec<bool>> = validity.iter().map(|r| vec![false; r.len()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, tokens.len(), count) {
            let (t, k) = tokens[i];
            masked[t][k] = true;
        }
        Ok(Self { masked, ratio, seed })
    }

    pub fn count(&self) -> usize {
        self.masked.iter().flatten().filter(|&&m| m).count()
    }
}

struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    b_o: Var,
    same_slot: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    ff: MlpVars,
}

/// Transformer parameters bound into a graph.
pub struct DtstVars {
    mask_emb: Var,
    layers: Vec<LayerVars>,
    heads: usize,
    d_slot: usize,
    t_max: usize,
}

pub fn num_layers<T: Scalar>(store: &ParamStore<T>) -> usize {
    (0..).take_while(|l| store.contains(&format!("dtst.l{l}.ln1.gain"))).count()
}

impl DtstVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, heads: usize, t_max: usize) -> Result<Self> {
        let emb = g.param(store, "dtst.mask_emb")?;
        let d_slot = g.value(emb).len();
        if heads == 0 || d_slot % heads != 0 {
            return Err(Error::config("dtst_heads", format!("d_slot {d_slot} not divisible by {heads} heads")));
        }
        let mask_emb = g.reshape(emb, &[1, d_slot])?;
        let layers = (0..num_layers(store))
            .map(|l| {
                let mut p = |n: &str| g.param(store, &format!("dtst.l{l}.{n}"));
                Ok(LayerVars {
                    ln1_gain: p("ln1.gain")?,
                    ln1_bias: p("ln1.bias")?,
                    w_q: p("attn.w_q")?,
                    w_k: p("attn.w_k")?,
                    w_v: p("attn.w_v")?,
                    w_o: p("attn.w_o")?,
                    b_o: p("attn.b_o")?,
                    same_slot: p("attn.same_slot")?,
                    ln2_gain: p("ln2.gain")?,
                    ln2_bias: p("ln2.bias")?,
                    ff: MlpVars::bind(g, store, &format!("dtst.l{l}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mask_emb,
            layers,
            heads,
            d_slot,
            t_max,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_width<T: Scalar>(&self, g: &Graph<T>, frames: &[SlotVars]) -> Result<()> {
        match frames.iter().find(|f| g.value(f.var).cols() != self.d_slot) {
            Some(f) => Err(Error::contract(format!(
                "slot width {} does not match transformer width {}",
                g.value(f.var).cols(),
                self.d_slot
            ))),
            None => Ok(()),
        }
    }

    /// Replaces the masked tokens of each frame by the mask token.
    pub fn apply_mask<T: Scalar>(&self, g: &mut Graph<T>, frames: &[SlotVars], masked: &[Vec<bool>]) -> Result<Vec<SlotVars>> {
        if masked.len() != frames.len() {
            return Err(Error::shape("apply_mask", format!("{} mask rows for {} frames", masked.len(), frames.len())));
        }
        self.check_width(g, frames)?;
        frames
            .iter()
            .zip(masked)
            .map(|(f, m)| {
                if m.len() != f.k {
                    return Err(Error::shape("apply_mask", format!("mask row of {} for K = {}", m.len(), f.k)));
                }
                if (0..f.k).any(|k| m[k] && f.row_of(k).is_none()) {
                    return Err(Error::contract("mask plan covers an invalid slot"));
                }
                if !f.valid.iter().any(|&k| m[k]) {
                    return Ok(f.clone());
                }
                let rows = f
                    .valid
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let one = T::one();
                        vec![if m[k] { RowSource::new(self.mask_emb, 0, one) } else { RowSource::new(f.var, i, one) }]
                    })
                    .collect();
                Ok(SlotVars {
                    var: g.row_mix(self.d_slot, rows)?,
                    valid: f.valid.clone(),
                    k: f.k,
                })
            })
            .collect()
    }

    /// Full transformer over the valid tokens of `frames`; frame `i` carries
    /// temporal code `i`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, frames: &[SlotVars]) -> Result<Vec<SlotVars>> {
        self.check_width(g, frames)?;
        if self.layers.is_empty() || frames.is_empty() {
            return Ok(frames.to_vec());
        }
        // Token layout: valid rows of each frame, frame-major.
        let mut slot_id = Vec::new();
        let mut sources = Vec::new();
        let mut pe = Vec::new();
        for (t, f) in frames.iter().enumerate() {
            let code = temporal_pe::<T>(t, self.d_slot, self.t_max)?;
            for (i, &k) in f.valid.iter().enumerate() {
                slot_id.push(k);
                sources.push(vec![RowSource::new(f.var, i, T::one())]);
                pe.extend_from_slice(&code);
            }
        }
        let m = slot_id.len();
        let mut x = g.row_mix(self.d_slot, sources)?;
        let pe = g.constant(Tensor::new(vec![m, self.d_slot], pe)?)?;
        let same = slot_id
            .iter()
            .flat_map(|&a| slot_id.iter().map(move |&b| if a == b { T::one() } else { T::zero() }))
            .collect();
        let same = g.constant(Tensor::new(vec![m, m], same)?)?;
        for layer in &self.layers {
            x = self.layer(g, layer, x, pe, same)?;
        }
        let mut start = 0;
        frames
            .iter()
            .map(|f| {
                let idx: Vec<usize> = (start..start + f.valid.len()).collect();
                start += f.valid.len();
                Ok(SlotVars {
                    var: g.gather_rows(x, &idx)?,
                    valid: f.valid.clone(),
                    k: f.k,
                })
            })
            .collect()
    }

    fn layer<T: Scalar>(&self, g: &mut Graph<T>, p: &LayerVars, x: Var, pe: Var, same: Var) -> Result<Var> {
        let dh = self.d_slot / self.heads;
        let h = g.layer_norm(x, p.ln1_gain, p.ln1_bias, T::of(LN_EPS))?;
        let hp = g.add(h, pe)?;
        let q = g.matmul(hp, p.w_q, false, false)?;
        let k = g.matmul(hp, p.w_k, false, false)?;
        let v = g.matmul(h, p.w_v, false, false)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let logits = g.matmul(qh, kh, false, true)?;
            let logits = g.scale(logits, scale)?;
            let beta = g.gather_rows(p.same_slot, &[head])?;
            let bias = g.mul_scalar(same, beta)?;
            let logits = g.add(logits, bias)?;
            let attn = g.softmax_rows(logits)?;
            outs.push(g.matmul(attn, vh, false, false)?);
        }
        let o = g.concat_cols(&outs)?;
        let o = g.matmul(o, p.w_o, false, false)?;
        let o = g.add_row(o, p.b_o)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, p.ln2_gain, p.ln2_bias, T::of(LN_EPS))?;
        let f = p.ff.forward(g, h)?;
        g.add(x, f)
    }

    /// Appends a frame of `k` mask tokens, runs the transformer and returns
    /// the appended frame's outputs (before merging).
    pub fn predict_next_raw<T: Scalar>(&self, g: &mut Graph<T>, buffer: &[SlotVars], k: usize) -> Result<SlotVars> {
        if buffer.is_empty() {
            return Err(Error::contract("predict_next needs a non-empty buffer"));
        }
        let rows = (0..k).map(|_| vec![RowSource::new(self.mask_emb, 0, T::one())]).collect();
        let future = SlotVars {
            var: g.row_mix(self.d_slot, rows)?,
            valid: (0..k).collect(),
            k,
        };
        let mut frames = buffer.to_vec();
        frames.push(future);
        let mut out = self.forward(g, &frames)?;
        Ok(out.pop().expect("appended frame"))
    }

    /// Next-frame slot initialization: prediction followed by merging.
    pub fn predict_next<T: Scalar>(&self, g: &mut Graph<T>, buffer: &[SlotVars], k: usize, merger: &MergerConfig) -> Result<SlotVars> {
        let raw = self.predict_next_raw(g, buffer, k)?;
        Ok(merge_vars(g, &raw, merger)?.0)
    }
}

fn bind_frames<T: Scalar>(g: &mut Graph<T>, s: &SlotSequence<T>) -> Result<Vec<SlotVars>> {
    s.frames.iter().map(|f| SlotVars::from_frame(g, f)).collect()
}

fn unbind_frames<T: Scalar>(g: &Graph<T>, frames: &[SlotVars]) -> Result<SlotSequence<T>> {
    SlotSequence::new(frames.iter().map(|f| f.to_frame(g)).collect::<Result<Vec<_>>>()?)
}

/// Replaces the masked tokens of `s` by the learned mask token.
pub fn apply_mask<T: Scalar>(s: &SlotSequence<T>, plan: &MaskPlan, model: &Model<T>) -> Result<SlotSequence<T>> {
    let mut g = Graph::new();
    let dt = DtstVars::bind(&mut g, &model.params, model.dims.dtst_heads, model.dims.t_max)?;
    let frames = bind_frames(&mut g, s)?;
    let out = dt.apply_mask(&mut g, &frames, &plan.masked)?;
    unbind_frames(&g, &out)
}

pub fn dtst_forward<T: Scalar>(s: &SlotSequence<T>, model: &Model<T>) -> Result<SlotSequence<T>> {
    let mut g = Graph::new();
    let dt = DtstVars::bind(&mut g, &model.params, model.dims.dtst_heads, model.dims.t_max)?;
    let frames = bind_frames(&mut g, s)?;
    let out = dt.forward(&mut g, &frames)?;
    unbind_frames(&g, &out)
}

/// Predicted slot initialization for the frame after `buffer`.
pub fn predict_next<T: Scalar>(buffer: &SlotSequence<T>, model: &Model<T>, merger: &MergerConfig) -> Result<SlotFrame<T>> {
    let mut g = Graph::new();
    let dt = DtstVars::bind(&mut g, &model.params, model.dims.dtst_heads, model.dims.t_max)?;
    let frames = bind_frames(&mut g, buffer)?;
    let k = buffer.frames.first().map_or(model.dims.k, |f| f.k());
    dt.predict_next(&mut g, &frames, k, merger)?.to_frame(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::nn::gradient_check;
    use crate::slot_attention::init_slots_gaussian;

    fn model() -> Model<f64> {
        let dims = ModelDims {
            d_slot: 8,
            k: 4,
            dtst_layers: 2,
            ..ModelDims::tiny()
        };
        Model::init(&dims, 5).unwrap()
    }

    fn seq(t: usize, k: usize, d: usize, seed: u64) -> SlotSequence<f64> {
        SlotSequence::new((0..t).map(|i| init_slots_gaussian(k, d, seed + i as u64)).collect()).unwrap()
    }

    #[test]
    fn pe_examples() {
        let p0 = temporal_pe::<f64>(0, 6, 64).unwrap();
        assert_eq!(p0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let p1 = temporal_pe::<f64>(1, 4, 64).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in p1.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        for t in 0..64 {
            assert!(temporal_pe::<f32>(t, 64, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(temporal_pe::<f32>(64, 8, 64).is_err());
    }

    #[test]
    fn mask_plan_counts_and_reproducibility() {
        let v = vec![vec![true; 4]; 2];
        let p = MaskPlan::sample(&v, 0.5, 9).unwrap();
        assert_eq!(p.count(), 4);
        assert_eq!(p, MaskPlan::sample(&v, 0.5, 9).unwrap());
        let partial = vec![vec![true, false, true, false]];
        let p = MaskPlan::sample(&partial, 1.0, 1).unwrap();
        assert_eq!(p.masked, vec![vec![true, false, true, false]]);
    }

    #[test]
    fn apply_mask_examples() {
        let m = model();
        let s = seq(2, 4, 8, 1);
        let none = MaskPlan::sample(&s.validity(), 0.0, 0).unwrap();
        assert_eq!(apply_mask(&s, &none, &m).unwrap(), s);
        let all = MaskPlan::sample(&s.validity(), 1.0, 0).unwrap();
        let out = apply_mask(&s, &all, &m).unwrap();
        let emb = m.params.get("dtst.mask_emb").unwrap();
        for f in &out.frames {
            for k in 0..4 {
                assert_eq!(f.slots.row(k), emb.data());
            }
        }
        let mut bad = s.clone();
        bad.frames[0] = SlotFrame::new(bad.frames[0].slots.clone(), vec![true, false, true, true]).unwrap();
        assert!(apply_mask(&bad, &all, &m).is_err());
    }

    #[test]
    fn zero_layers_and_zero_outputs_are_identity() {
        let mut m = model();
        let s = seq(3, 4, 8, 2);
        for l in 0..2 {
            for n in ["attn.w_o", "attn.b_o", "ff.w2", "ff.b2"] {
                let name = format!("dtst.l{l}.{n}");
                let sh = m.params.get(&name).unwrap().shape().to_vec();
                m.params.set(&name, Tensor::zeros(&sh)).unwrap();
            }
        }
        assert_eq!(dtst_forward(&s, &m).unwrap(), s);
        let dims = ModelDims { dtst_layers: 0, ..m.dims.clone() };
        let m0 = Model::<f64>::init(&dims, 1).unwrap();
        assert_eq!(dtst_forward(&s, &m0).unwrap(), s);
    }

    #[test]
    fn within_frame_permutation_equivariance() {
        let m = model();
        let mut s = seq(3, 4, 8, 3);
        s.frames[1] = SlotFrame::new(s.frames[1].slots.clone(), vec![true, true, false, true]).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = SlotSequence::new(s.frames.iter().map(|f| f.permuted(&perm)).collect()).unwrap();
        let a = dtst_forward(&s, &m).unwrap();
        let b = dtst_forward(&permuted, &m).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let fa = fa.permuted(&perm);
            assert_eq!(fa.valid, fb.valid);
            assert!(fa.slots.max_abs_diff(&fb.slots) < 1e-12);
        }
        assert_eq!(a.validity(), s.validity());
    }

    #[test]
    fn predict_next_shape_and_determinism() {
        let m = model();
        let s = seq(2, 4, 8, 4);
        let cfg = MergerConfig::default();
        let p = predict_next(&s, &m, &cfg).unwrap();
        assert_eq!(p.slots.shape(), &[4, 8]);
        assert!((1..=4).contains(&p.num_valid()));
        assert_eq!(p, predict_next(&s, &m, &cfg).unwrap());
        assert!(predict_next(&SlotSequence::<f64>::new(vec![]).unwrap(), &m, &cfg).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = model();
        assert!(matches!(dtst_forward(&seq(2, 4, 6, 0), &m), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_embedding_receives_gradient_and_gradcheck_passes() {
        let m = model();
        let s = seq(2, 4, 8, 6);
        let mut masked = vec![vec![false; 4]; 2];
        masked[1][2] = true;
        let target = Tensor::from_f64(&[4, 8], &(0..32).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
            let dt = DtstVars::bind(g, p, 2, 8)?;
            let frames = bind_frames(g, &s)?;
            let frames = dt.apply_mask(g, &frames, &masked)?;
            let out = dt.forward(g, &frames)?;
            let t = g.constant(target.clone())?;
            g.sq_err_sum(out[1].var, t)
        };
        let mut g = Graph::new();
        let l = loss(&mut g, &m.params).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads["dtst.mask_emb"].sum_sq() > 0.0);
        let report = gradient_check(loss, &m.params, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

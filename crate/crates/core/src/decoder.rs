//! Spatial-broadcast decoder. Every valid slot is added to a learned
//! per-patch position code and passed through an MLP shared across slots and
//! positions. The MLP emits `D` feature channels followed by one alpha logit.
//! Masks are the softmax of the alpha logits across valid slots, and the
//! reconstruction is the mask-weighted sum of per-slot features.

use crate::error::{Error, Result};
use crate::nn::{kernels, Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::slot_attention::{SlotFrame, SlotVars};

/// One decoded frame in the full `K`-slot layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame<T> {
    /// `N × D` reconstruction.
    pub x_recon: Tensor<T>,
    /// `K × N` masks; invalid rows are zero.
    pub masks: Tensor<T>,
    /// `K` tensors of shape `N × D`; zero for invalid slots.
    pub per_slot_features: Vec<Tensor<T>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> DecodedFrame<T> {
    /// Per-patch argmax over valid slots.
    pub fn argmax_labels(&self) -> Vec<usize> {
        let (k, n) = (self.masks.rows(), self.masks.cols());
        (0..n)
            .map(|p| {
                let mut best = None::<(usize, T)>;
                for s in (0..k).filter(|&s| self.valid[s]) {
                    let v = self.masks.row(s)[p];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((s, v));
                    }
                }
                best.map_or(0, |(s, _)| s)
            })
            .collect()
    }
}

/// Decoder parameters bound into a graph.
pub struct DecoderVars {
    pos: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    d_feature: usize,
}

/// Graph outputs of decoding the valid slots of one frame.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// `N × D`.
    pub recon: Var,
    /// `N × K_valid`.
    pub masks: Var,
    /// `K_valid·N × D`, slot-major.
    pub features: Var,
}

impl DecoderVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Self> {
        let b2 = g.param(store, "dec.mlp.b2")?;
        let d_feature = g.value(b2).len();
        Ok(Self {
            pos: g.param(store, "dec.pos")?,
            w1: g.param(store, "dec.mlp.w1")?,
            b1: g.param(store, "dec.mlp.b1")?,
            w2: g.param(store, "dec.mlp.w2")?,
            b2,
            d_feature,
        })
    }

    pub fn n_patches<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.value(self.pos).rows()
    }

    /// Features and alpha logits for a block of slots: `(K·N × D, K × N)`.
    fn tokens<T: Scalar>(&self, g: &mut Graph<T>, slots: Var) -> Result<(Var, Var)> {
        let k = g.value(slots).rows();
        let n = self.n_patches(g);
        let x = g.broadcast(slots, self.pos)?;
        let h = g.matmul(x, self.w1, false, false)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, self.w2, false, false)?;
        let feats = g.slice_cols(o, 0, self.d_feature)?;
        let feats = g.add_row(feats, self.b2)?;
        let alpha = g.slice_cols(o, self.d_feature, 1)?;
        let alpha = g.reshape(alpha, &[k, n])?;
        Ok((feats, alpha))
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, slots: &SlotVars) -> Result<DecodedVars> {
        if slots.valid.is_empty() {
            return Err(Error::contract("decoding needs at least one valid slot"));
        }
        let (features, alpha) = self.tokens(g, slots.var)?;
        let alpha = g.transpose(alpha)?;
        let masks = g.softmax_rows(alpha)?;
        let recon = g.slot_mix(masks, features)?;
        Ok(DecodedVars { recon, masks, features })
    }
}

/// Decodes one slot vector to `(N × D features, N alpha logits)`.
pub fn decode_slot<T: Scalar>(slot: &[T], params: &ParamStore<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let mut g = Graph::new();
    let dec = DecoderVars::bind(&mut g, params)?;
    let s = g.constant(Tensor::new(vec![1, slot.len()], slot.to_vec())?)?;
    let (feats, alpha) = dec.tokens(&mut g, s)?;
    Ok((g.value(feats).clone(), g.value(alpha).data().to_vec()))
}

/// Softmax-combines per-slot decodings over the valid slots.
pub fn combine_slots<T: Scalar>(decoded: &[(Tensor<T>, Vec<T>)], valid: &[bool]) -> Result<DecodedFrame<T>> {
    if decoded.len() != valid.len() {
        return Err(Error::shape(
            "combine_slots",
            format!("{} decodings vs {} validity flags", decoded.len(), valid.len()),
        ));
    }
    let live: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    let Some(&first) = live.first() else {
        return Err(Error::contract("combine_slots needs at least one valid slot"));
    };
    let (n, d) = (decoded[first].0.rows(), decoded[first].0.cols());
    if live.iter().any(|&k| decoded[k].0.shape() != [n, d] || decoded[k].1.len() != n) {
        return Err(Error::shape("combine_slots", "per-slot decodings differ in shape"));
    }
    let k = valid.len();
    let mut masks = Tensor::zeros(&[k, n]);
    let mut x_recon = Tensor::zeros(&[n, d]);
    let mut logits = vec![T::zero(); live.len()];
    let mut m = vec![T::zero(); live.len()];
    let mut scratch = Vec::new();
    for p in 0..n {
        for (i, &s) in live.iter().enumerate() {
            logits[i] = decoded[s].1[p];
        }
        kernels::softmax_row(&logits, &mut m, &mut scratch);
        for (i, &s) in live.iter().enumerate() {
            masks.data_mut()[s * n + p] = m[i];
            let f = decoded[s].0.row(p);
            for (o, &v) in x_recon.row_mut(p).iter_mut().zip(f) {
                *o += m[i] * v;
            }
        }
    }
    let per_slot_features = (0..k)
        .map(|s| if valid[s] { decoded[s].0.clone() } else { Tensor::zeros(&[n, d]) })
        .collect();
    Ok(DecodedFrame {
        x_recon,
        masks,
        per_slot_features,
        valid: valid.to_vec(),
    })
}

/// Decodes every valid slot of a frame and combines them.
pub fn decode_frame<T: Scalar>(sf: &SlotFrame<T>, params: &ParamStore<T>) -> Result<DecodedFrame<T>> {
    let mut g = Graph::new();
    let dec = DecoderVars::bind(&mut g, params)?;
    let sv = SlotVars::from_frame(&mut g, sf)?;
    let out = dec.decode(&mut g, &sv)?;
    decoded_from_vars(&g, &out, &sv, dec.d_feature)
}

/// Expands graph decoder outputs to the full `K`-slot layout of `slots`.
pub fn decoded_from_vars<T: Scalar>(
    g: &Graph<T>,
    out: &DecodedVars,
    slots: &SlotVars,
    d_feature: usize,
) -> Result<DecodedFrame<T>> {
    let m = g.value(out.masks);
    let f = g.value(out.features);
    let (n, kv) = (m.rows(), m.cols());
    if kv != slots.valid.len() || f.len() != kv * n * d_feature {
        return Err(Error::shape("decoded_from_vars", "decoder outputs do not match the slot layout"));
    }
    let k = slots.k;
    let mut masks = Tensor::zeros(&[k, n]);
    let mut per_slot_features = vec![Tensor::zeros(&[n, d_feature]); k];
    let mut valid = vec![false; k];
    for (i, &s) in slots.valid.iter().enumerate() {
        valid[s] = true;
        for p in 0..n {
            masks.data_mut()[s * n + p] = m.data()[p * kv + i];
        }
        per_slot_features[s]
            .data_mut()
            .copy_from_slice(&f.data()[i * n * d_feature..(i + 1) * n * d_feature]);
    }
    Ok(DecodedFrame {
        x_recon: g.value(out.recon).clone(),
        masks,
        per_slot_features,
        valid,
    })
}

/// Mean squared error over all elements of paired frame sequences.
pub fn recon_loss<T: Scalar>(x_recon: &[Tensor<T>], x: &[Tensor<T>]) -> Result<T> {
    if x_recon.len() != x.len() || x_recon.iter().zip(x).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::contract("recon_loss inputs differ in shape"));
    }
    let count: usize = x.iter().map(|t| t.len()).sum();
    if count == 0 {
        return Err(Error::contract("recon_loss of an empty sequence"));
    }
    let sum: f64 = x_recon
        .iter()
        .zip(x)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .map(|(&a, &b)| (a - b).f64().powi(2))
        .sum();
    Ok(T::of(sum / count as f64))
}

/// In-graph counterpart of [`recon_loss`].
pub fn recon_loss_var<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for &(a, b) in pairs {
        count += g.value(b).len();
        let e = g.sq_err_sum(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    let total = total.ok_or_else(|| Error::contract("recon_loss of an empty sequence"))?;
    g.scale(total, T::one() / T::of(count as f64))
}

//! Iterative slot attention: slots compete for feature locations through a
//! softmax over the slot axis, then each slot is updated from the
//! attention-weighted mean of its values by a GRU and a residual MLP.
//!
//! Only valid slots take part. Invalid slots are removed before the softmax
//! (not masked with large negative logits) so they receive exactly zero
//! attention mass and zero gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{Graph, GruVars, MlpVars, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const ATTN_EPS: f64 = 1e-8;

/// `K × d_slot` slots of one frame with their validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotFrame<T> {
    pub slots: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> SlotFrame<T> {
    pub fn new(slots: Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        if slots.shape().len() != 2 || slots.rows() != valid.len() {
            return Err(Error::shape(
                "slot_frame",
                format!("slots {:?} with {} validity flags", slots.shape(), valid.len()),
            ));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::contract("slot frame needs at least one valid slot"));
        }
        let mut slots = slots;
        for (k, &v) in valid.iter().enumerate() {
            if !v {
                slots.row_mut(k).fill(T::zero());
            }
        }
        Ok(Self { slots, valid })
    }

    pub fn all_valid(slots: Tensor<T>) -> Result<Self> {
        let k = slots.rows();
        Self::new(slots, vec![true; k])
    }

    pub fn k(&self) -> usize {
        self.valid.len()
    }

    pub fn d(&self) -> usize {
        self.slots.cols()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Reorders slot rows: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut slots = Tensor::zeros(self.slots.shape());
        for (i, &p) in perm.iter().enumerate() {
            slots.row_mut(i).copy_from_slice(self.slots.row(p));
        }
        Self {
            slots,
            valid: perm.iter().map(|&p| self.valid[p]).collect(),
        }
    }
}

/// Slots over `T` frames; `K` and `d_slot` are constant across frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSequence<T> {
    pub frames: Vec<SlotFrame<T>>,
}

impl<T: Scalar> SlotSequence<T> {
    pub fn new(frames: Vec<SlotFrame<T>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.slots.shape() != first.slots.shape()) {
                return Err(Error::shape("slot_sequence", "K or d_slot differs across frames"));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Validity mask `T × K`.
    pub fn validity(&self) -> Vec<Vec<bool>> {
        self.frames.iter().map(|f| f.valid.clone()).collect()
    }
}

/// Valid slots of one frame inside a graph: row `i` of `var` is slot
/// `valid[i]` of a `k`-slot layout.
#[derive(Clone, Debug)]
pub struct SlotVars {
    pub var: Var,
    pub valid: Vec<usize>,
    pub k: usize,
}

impl SlotVars {
    pub fn from_frame<T: Scalar>(g: &mut Graph<T>, sf: &SlotFrame<T>) -> Result<Self> {
        let valid = sf.valid_indices();
        let rows: Vec<T> = valid.iter().flat_map(|&k| sf.slots.row(k).to_vec()).collect();
        let var = g.constant(Tensor::new(vec![valid.len(), sf.d()], rows)?)?;
        Ok(Self { var, valid, k: sf.k() })
    }

    pub fn to_frame<T: Scalar>(&self, g: &Graph<T>) -> Result<SlotFrame<T>> {
        let v = g.value(self.var);
        let mut slots = Tensor::zeros(&[self.k, v.cols()]);
        let mut valid = vec![false; self.k];
        for (i, &k) in self.valid.iter().enumerate() {
            slots.row_mut(k).copy_from_slice(v.row(i));
            valid[k] = true;
        }
        SlotFrame::new(slots, valid)
    }

    pub fn detach<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Self> {
        Ok(Self {
            var: g.detach(self.var)?,
            valid: self.valid.clone(),
            k: self.k,
        })
    }

    /// Row of `var` holding slot index `k`, if valid.
    pub fn row_of(&self, k: usize) -> Option<usize> {
        self.valid.iter().position(|&v| v == k)
    }
}

/// `K × d_slot` i.i.d. standard normal slots, all valid.
pub fn init_slots_gaussian<T: Scalar>(k: usize, d_slot: usize, seed: u64) -> SlotFrame<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * d_slot)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::of(v)
        })
        .collect();
    SlotFrame::all_valid(Tensor::new(vec![k, d_slot], data).expect("k, d >= 1"))
        .expect("all slots valid")
}

/// Slot-attention parameters bound into a graph.
pub struct SaVars {
    ln_in_gain: Var,
    ln_in_bias: Var,
    ln_slot_gain: Var,
    ln_slot_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    gru: GruVars,
    ln_mlp_gain: Var,
    ln_mlp_bias: Var,
    mlp: MlpVars,
    d_slot: usize,
    pub n_iter: usize,
}

/// Keys and values of one frame's features; shared by all iterations.
#[derive(Clone, Copy, Debug)]
pub struct FrameInputs {
    pub keys: Var,
    pub values: Var,
}

impl SaVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, n_iter: usize) -> Result<Self> {
        let ln_slot_gain = g.param(store, "sa.ln_slot.gain")?;
        let d_slot = g.value(ln_slot_gain).len();
        Ok(Self {
            ln_in_gain: g.param(store, "sa.ln_in.gain")?,
            ln_in_bias: g.param(store, "sa.ln_in.bias")?,
            ln_slot_gain,
            ln_slot_bias: g.constant(Tensor::zeros(&[d_slot]))?,
            w_q: g.param(store, "sa.w_q")?,
            w_k: g.param(store, "sa.w_k")?,
            w_v: g.param(store, "sa.w_v")?,
            gru: GruVars::bind(g, store, "sa.gru")?,
            ln_mlp_gain: g.param(store, "sa.ln_mlp.gain")?,
            ln_mlp_bias: g.param(store, "sa.ln_mlp.bias")?,
            mlp: MlpVars::bind(g, store, "sa.mlp")?,
            d_slot,
            n_iter,
        })
    }

    pub fn inputs<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<FrameInputs> {
        let xn = g.layer_norm(x, self.ln_in_gain, self.ln_in_bias, T::of(LN_EPS))?;
        Ok(FrameInputs {
            keys: g.matmul(xn, self.w_k, false, false)?,
            values: g.matmul(xn, self.w_v, false, false)?,
        })
    }

    /// One attention iteration. Returns the updated slots and the `N × K_valid`
    /// attention map.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, inp: FrameInputs, slots: &SlotVars) -> Result<(SlotVars, Var)> {
        if slots.valid.is_empty() {
            return Err(Error::contract("attention_step needs at least one valid slot"));
        }
        if g.value(slots.var).cols() != self.d_slot {
            return Err(Error::shape(
                "attention_step",
                format!("slot width {} vs parameters {}", g.value(slots.var).cols(), self.d_slot),
            ));
        }
        let s = slots.var;
        let sn = g.layer_norm(s, self.ln_slot_gain, self.ln_slot_bias, T::of(LN_EPS))?;
        let q = g.matmul(sn, self.w_q, false, false)?;
        let logits = g.matmul(inp.keys, q, false, true)?;
        let logits = g.scale(logits, T::one() / T::of(self.d_slot as f64).sqrt())?;
        let attn = g.softmax_rows(logits)?;
        let weights = g.normalize_cols(attn, T::of(ATTN_EPS))?;
        let updates = g.matmul(weights, inp.values, true, false)?;
        let s = self.gru.forward(g, s, updates)?;
        let h = g.layer_norm(s, self.ln_mlp_gain, self.ln_mlp_bias, T::of(LN_EPS))?;
        let h = self.mlp.forward(g, h)?;
        let s = g.add(s, h)?;
        Ok((
            SlotVars {
                var: s,
                valid: slots.valid.clone(),
                k: slots.k,
            },
            attn,
        ))
    }

    /// `n_iter` attention iterations from `init`.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var, init: &SlotVars) -> Result<SlotVars> {
        if self.n_iter == 0 {
            return Ok(init.clone());
        }
        let inp = self.inputs(g, x)?;
        let mut s = init.clone();
        for _ in 0..self.n_iter {
            s = self.step(g, inp, &s)?.0;
        }
        Ok(s)
    }
}

/// Scatters an `N × K_valid` attention map to `N × K` with zero columns
/// for invalid slots.
fn full_attention<T: Scalar>(attn: &Tensor<T>, valid: &[usize], k: usize) -> Tensor<T> {
    let n = attn.rows();
    let mut out = Tensor::zeros(&[n, k]);
    for r in 0..n {
        for (i, &slot) in valid.iter().enumerate() {
            out.data_mut()[r * k + slot] = attn.row(r)[i];
        }
    }
    out
}

/// One attention iteration on plain tensors. Returns the new slots and the
/// `N × K` attention map.
pub fn attention_step<T: Scalar>(
    x: &FeatureGrid<T>,
    sf: &SlotFrame<T>,
    params: &ParamStore<T>,
) -> Result<(SlotFrame<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let sa = SaVars::bind(&mut g, params, 1)?;
    let xv = g.constant(x.x.clone())?;
    let init = SlotVars::from_frame(&mut g, sf)?;
    let inp = sa.inputs(&mut g, xv)?;
    let (s, attn) = sa.step(&mut g, inp, &init)?;
    let attn = full_attention(g.value(attn), &s.valid, sf.k());
    Ok((s.to_frame(&g)?, attn))
}

/// The slot encoder: `n_iter` attention iterations from `s_init`.
pub fn f_sa<T: Scalar>(
    x: &FeatureGrid<T>,
    s_init: &SlotFrame<T>,
    params: &ParamStore<T>,
    n_iter: usize,
) -> Result<SlotFrame<T>> {
    if n_iter == 0 {
        return Ok(s_init.clone());
    }
    let mut g = Graph::new();
    let sa = SaVars::bind(&mut g, params, n_iter)?;
    let xv = g.constant(x.x.clone())?;
    let init = SlotVars::from_frame(&mut g, s_init)?;
    sa.run(&mut g, xv, &init)?.to_frame(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelDims};

    fn setup() -> (Model<f64>, FeatureGrid<f64>) {
        let dims = ModelDims {
            canvas: 32,
            d_feature: 8,
            d_slot: 6,
            k: 4,
            ..ModelDims::tiny()
        };
        let model = Model::<f64>::init(&dims, 1).unwrap();
        let n = dims.n_patches();
        let x = Tensor::from_f64(&[n, 8], &(0..n * 8).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        (model, FeatureGrid { x, grid: dims.grid() })
    }

    #[test]
    fn gaussian_init_is_seeded() {
        let a = init_slots_gaussian::<f32>(7, 64, 5);
        assert_eq!(a, init_slots_gaussian(7, 64, 5));
        assert!(a.slots.max_abs_diff(&init_slots_gaussian(7, 64, 6).slots) > 0.0);
        assert_eq!(a.num_valid(), 7);
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_slots() {
        let (model, x) = setup();
        let mut sf = init_slots_gaussian(4, 6, 2);
        sf = SlotFrame::new(sf.slots, vec![true, false, true, true]).unwrap();
        let (out, attn) = attention_step(&x, &sf, &model.params).unwrap();
        for r in 0..attn.rows() {
            let row = attn.row(r);
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!(out.slots.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(out.valid, sf.valid);
    }

    #[test]
    fn single_valid_slot_takes_unweighted_mean() {
        let (model, x) = setup();
        let sf = SlotFrame::new(init_slots_gaussian::<f64>(4, 6, 3).slots, vec![false, false, true, false]).unwrap();
        let (_, attn) = attention_step(&x, &sf, &model.params).unwrap();
        assert!((0..attn.rows()).all(|r| attn.row(r)[2] == 1.0));

        // Update equals the plain mean of the value rows.
        let mut g = Graph::new();
        let sa = SaVars::bind(&mut g, &model.params, 1).unwrap();
        let xv = g.constant(x.x.clone()).unwrap();
        let inp = sa.inputs(&mut g, xv).unwrap();
        let ones = g.constant(Tensor::full(&[x.x.rows(), 1], 1.0)).unwrap();
        let w = g.normalize_cols(ones, ATTN_EPS).unwrap();
        let upd = g.matmul(w, inp.values, true, false).unwrap();
        let vals = g.value(inp.values);
        for c in 0..vals.cols() {
            let mean: f64 = (0..vals.rows()).map(|r| vals.row(r)[c]).sum::<f64>() / vals.rows() as f64;
            assert!((g.value(upd).data()[c] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_projections_give_zero_update() {
        let (mut model, x) = setup();
        for n in ["sa.w_k", "sa.w_v", "sa.w_q"] {
            let shape = model.params.get(n).unwrap().shape().to_vec();
            model.params.set(n, Tensor::zeros(&shape)).unwrap();
        }
        let sf = init_slots_gaussian::<f64>(4, 6, 4);
        let (out, _) = attention_step(&x, &sf, &model.params).unwrap();
        // Same result as stepping on an all-zero feature grid.
        let zero = FeatureGrid { x: Tensor::zeros(x.x.shape()), grid: x.grid };
        let (out0, _) = attention_step(&zero, &sf, &model.params).unwrap();
        assert_eq!(out, out0);
    }

    #[test]
    fn f_sa_identity_and_determinism() {
        let (model, x) = setup();
        let sf = init_slots_gaussian::<f64>(4, 6, 9);
        assert_eq!(f_sa(&x, &sf, &model.params, 0).unwrap(), sf);
        let a = f_sa(&x, &sf, &model.params, 3).unwrap();
        assert_eq!(a, f_sa(&x, &sf, &model.params, 3).unwrap());
        assert!(a.slots.is_finite());
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let (model, x) = setup();
        let x32 = FeatureGrid { x: x.x.cast::<f32>(), grid: x.grid };
        let p32 = model.params.cast::<f32>();
        let sf = SlotFrame::new(init_slots_gaussian::<f32>(4, 6, 11).slots, vec![true, true, false, true]).unwrap();
        let perm = [3, 0, 2, 1];
        let a = f_sa(&x32, &sf, &p32, 3).unwrap();
        let b = f_sa(&x32, &sf.permuted(&perm), &p32, 3).unwrap();
        assert_eq!(b, a.permuted(&perm));
    }

    #[test]
    fn no_valid_slot_or_bad_width_is_rejected() {
        let (model, x) = setup();
        assert!(SlotFrame::new(Tensor::<f64>::zeros(&[2, 6]), vec![false, false]).is_err());
        let wide = init_slots_gaussian::<f64>(2, 5, 0);
        assert!(attention_step(&x, &wide, &model.params).is_err());
    }
}

//! Model dimensions and the named parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serde::{Deserialize, Serialize};

use crate::data::FeatureEncoderParams;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Name of the frozen feature projection inside the parameter store.
pub const FEATURE_PROJECTION: &str = "features.projection";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub canvas: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_feature: usize,
    pub k: usize,
    pub d_slot: usize,
    pub n_iter: usize,
    pub sa_hidden: usize,
    pub dec_hidden: usize,
    pub dtst_layers: usize,
    pub dtst_heads: usize,
    pub dtst_ff: usize,
    /// Temporal window (slot buffer length).
    pub window: usize,
    pub t_max: usize,
    pub feature_seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            canvas: 64,
            channels: 3,
            patch: 8,
            d_feature: 64,
            k: 7,
            d_slot: 64,
            n_iter: 3,
            sa_hidden: 128,
            dec_hidden: 128,
            dtst_layers: 3,
            dtst_heads: 4,
            dtst_ff: 256,
            window: 5,
            t_max: 64,
            feature_seed: 1234,
        }
    }
}

impl ModelDims {
    /// The smallest configuration exercised by gradient checks.
    pub fn tiny() -> Self {
        Self {
            canvas: 16,
            channels: 3,
            patch: 8,
            d_feature: 4,
            k: 2,
            d_slot: 4,
            n_iter: 2,
            sa_hidden: 6,
            dec_hidden: 6,
            dtst_layers: 1,
            dtst_heads: 2,
            dtst_ff: 8,
            window: 2,
            t_max: 8,
            feature_seed: 7,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.canvas / self.patch, self.canvas / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("d_feature", self.d_feature),
            ("K", self.k),
            ("d_slot", self.d_slot),
            ("sa_hidden", self.sa_hidden),
            ("dec_hidden", self.dec_hidden),
            ("dtst_heads", self.dtst_heads),
            ("dtst_ff", self.dtst_ff),
            ("T", self.window),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.canvas % self.patch != 0 {
            return Err(Error::config("patch", format!("canvas {} not divisible by patch {}", self.canvas, self.patch)));
        }
        if self.d_slot % self.dtst_heads != 0 {
            return Err(Error::config(
                "dtst_heads",
                format!("d_slot {} not divisible by {} heads", self.d_slot, self.dtst_heads),
            ));
        }
        if self.window >= self.t_max {
            return Err(Error::config("T", format!("must be below t_max = {}", self.t_max)));
        }
        Ok(())
    }
}

/// Parameters plus the dimensions they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub params: ParamStore<T>,
}

struct Init<'a, T: Scalar> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore<T>,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    /// Weight matrix with variance `1 / fan_in`.
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::of(v)), true)
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gain"), &[width], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[width], 0.0)
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w1"), d_in, hidden)?;
        self.constant(&format!("{prefix}.b1"), &[hidden], 0.0)?;
        self.weight(&format!("{prefix}.w2"), hidden, d_out)?;
        self.constant(&format!("{prefix}.b2"), &[d_out], 0.0)
    }
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization of every parameter.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let (d, df, n) = (dims.d_slot, dims.d_feature, dims.n_patches());
        {
            let mut init = Init {
                rng: ChaCha8Rng::seed_from_u64(seed),
                store: &mut store,
            };
            // Slot attention. The slot layer norm has a gain only: a bias
            // would shift every slot's query equally, which the slot-axis
            // softmax cancels.
            init.layer_norm("sa.ln_in", df)?;
            init.constant("sa.ln_slot.gain", &[d], 1.0)?;
            init.weight("sa.w_q", d, d)?;
            init.weight("sa.w_k", df, d)?;
            init.weight("sa.w_v", df, d)?;
            for gate in ["z", "r", "h"] {
                init.weight(&format!("sa.gru.w_{gate}"), d, d)?;
                init.weight(&format!("sa.gru.u_{gate}"), d, d)?;
                init.constant(&format!("sa.gru.b_{gate}"), &[d], 0.0)?;
            }
            init.layer_norm("sa.ln_mlp", d)?;
            init.mlp("sa.mlp", d, dims.sa_hidden, d)?;

            // Broadcast decoder: last output column is the alpha logit and
            // carries no bias (softmax over slots is shift invariant).
            init.normal("dec.pos", &[n, d], 0.5)?;
            init.weight("dec.mlp.w1", d, dims.dec_hidden)?;
            init.constant("dec.mlp.b1", &[dims.dec_hidden], 0.0)?;
            init.weight("dec.mlp.w2", dims.dec_hidden, df + 1)?;
            init.constant("dec.mlp.b2", &[df], 0.0)?;

            // Temporal slot transformer.
            init.normal("dtst.mask_emb", &[d], 0.02)?;
            for l in 0..dims.dtst_layers {
                let p = format!("dtst.l{l}");
                init.layer_norm(&format!("{p}.ln1"), d)?;
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    init.weight(&format!("{p}.attn.{w}"), d, d)?;
                }
                init.constant(&format!("{p}.attn.b_o"), &[d], 0.0)?;
                init.constant(&format!("{p}.attn.same_slot"), &[dims.dtst_heads, 1], 1.0)?;
                init.layer_norm(&format!("{p}.ln2"), d)?;
                init.mlp(&format!("{p}.ff"), d, dims.dtst_ff, d)?;
            }
        }
        let enc = FeatureEncoderParams::<T>::new(dims.patch, dims.channels, df, dims.feature_seed);
        store.insert(FEATURE_PROJECTION, enc.projection, false)?;
        Ok(Self {
            dims: dims.clone(),
            params: store,
        })
    }

    pub fn encoder(&self) -> Result<FeatureEncoderParams<T>> {
        Ok(FeatureEncoderParams {
            projection: self.params.get(FEATURE_PROJECTION)?.clone(),
            patch: self.dims.patch,
            channels: self.dims.channels,
            seed: self.dims.feature_seed,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            dims: self.dims.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_projection_frozen() {
        let dims = ModelDims::tiny();
        let a = Model::<f32>::init(&dims, 3).unwrap();
        assert_eq!(a, Model::init(&dims, 3).unwrap());
        assert_ne!(a.params, Model::<f32>::init(&dims, 4).unwrap().params);
        assert!(!a.params.trainable_names().contains(&FEATURE_PROJECTION.to_string()));
        let regen = FeatureEncoderParams::<f32>::new(dims.patch, 3, dims.d_feature, dims.feature_seed);
        assert_eq!(a.encoder().unwrap(), regen);
    }

    #[test]
    fn dims_validation() {
        let mut d = ModelDims::default();
        assert!(d.validate().is_ok());
        d.dtst_heads = 5;
        assert!(matches!(d.validate(), Err(Error::Config { key, .. }) if key == "dtst_heads"));
    }
}

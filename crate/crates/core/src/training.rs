//! Two-stage training and inference rollout.
//!
//! Pretraining encodes each clip with slot attention, initializing frame 0
//! from a standard Gaussian and every later frame from the previous frame's
//! slots, then decodes every frame. Stage 2 can instead initialize from the
//! transformer's next-frame prediction over a detached buffer, and before
//! decoding it either bypasses refinement or masks, refines and merges the
//! slots.
//!
//! Every random draw is a function of `(seed, step, clip position)`, so a run
//! is fully determined by its seed, data and configuration.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{recon_loss_var, DecodedFrame, DecoderVars};
use crate::dtst::{DtstVars, MaskPlan};
use crate::error::{Error, Result};
use crate::merger::{merge_vars, MergerConfig};
use crate::model::{Model, ModelDims};
use crate::nn::{gradient_check, GradCheckReport, Grads, Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::slot_attention::{init_slots_gaussian, SaVars, SlotFrame, SlotVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub bypass_prob: f64,
    pub merger_drop_prob: f64,
    pub mask_ratio: f64,
    pub merger: MergerConfig,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch: usize,
    /// Frames per training window.
    pub window: usize,
    pub seed: u64,
    pub use_dtst: bool,
    pub use_merger: bool,
    pub use_xslot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            bypass_prob: 0.5,
            merger_drop_prob: 0.5,
            mask_ratio: 0.15,
            merger: MergerConfig::default(),
            lr: 4e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1000,
            batch: 4,
            window: 5,
            seed: 0,
            use_dtst: true,
            use_merger: true,
            use_xslot: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("p_b", self.bypass_prob),
            ("p_d", self.merger_drop_prob),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} outside [0, 1]")));
            }
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("T", "must be positive"));
        }
        if self.use_xslot && !self.use_dtst {
            return Err(Error::config("use_xslot", "next-slot prediction needs the transformer (use_dtst)"));
        }
        self.merger.validate()
    }
}

/// Adam moments for every parameter that has received a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

/// Bias-corrected Adam step. Parameters absent from `grads` are untouched.
pub fn adam_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.adam_eps));
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut_data(name)?;
        if p.len() != g.len() {
            return Err(Error::shape("adam_update", format!("`{name}` gradient length {}", g.len())));
        }
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (T::one() - b1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mh = m.data()[i] / c1;
            let vh = v.data()[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

const STREAM_INIT: u64 = 0;
const STREAM_CONTROL: u64 = 1;
const STREAM_BATCH: u64 = 2;

/// All random draws of one clip in one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipDraws {
    pub init_seed: u64,
    pub bypass_u: f64,
    pub mask_seed: u64,
    pub drop_u: f64,
}

impl ClipDraws {
    pub fn new(seed: u64, step: u64, clip: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, clip, STREAM_CONTROL]));
        Self {
            init_seed: derive_seed(&[seed, step, clip, STREAM_INIT]),
            bypass_u: rng.random(),
            mask_seed: rng.random(),
            drop_u: rng.random(),
        }
    }
}

/// Which path produced the decoded slots of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Pretrain,
    Bypass,
    Refine,
    RefineMerge,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub branches: Vec<Branch>,
    pub active_slots: f64,
}

/// A training clip: per-frame `N × D` features.
pub type ClipFeatures<T> = Vec<Tensor<T>>;

struct Bound {
    sa: SaVars,
    dec: DecoderVars,
    dt: Option<DtstVars>,
}

impl Bound {
    fn new<T: Scalar>(g: &mut Graph<T>, model_dims: &ModelDims, params: &ParamStore<T>, dtst: bool) -> Result<Self> {
        Ok(Self {
            sa: SaVars::bind(g, params, model_dims.n_iter)?,
            dec: DecoderVars::bind(g, params)?,
            dt: if dtst {
                Some(DtstVars::bind(g, params, model_dims.dtst_heads, model_dims.t_max)?)
            } else {
                None
            },
        })
    }
}

/// Graph of one stage-2 (or pretraining) batch.
pub struct BatchGraph {
    pub loss: Var,
    pub branches: Vec<Branch>,
    pub active_slots: f64,
    /// Raw slot-attention outputs per clip and frame.
    pub raw: Vec<Vec<SlotVars>>,
}

/// Builds the loss of a batch. With `cfg = None` this is pretraining.
///
/// `frozen` replaces the detached prediction buffer by given values; it is
/// only needed to make finite differences agree with the stop-gradient.
pub fn batch_graph<T: Scalar>(
    g: &mut Graph<T>,
    model_dims: &ModelDims,
    params: &ParamStore<T>,
    batch: &[&[Tensor<T>]],
    draws: &[ClipDraws],
    cfg: Option<&TrainConfig>,
    frozen: Option<&[Vec<SlotFrame<T>>]>,
) -> Result<BatchGraph> {
    if batch.is_empty() || batch.len() != draws.len() || batch.iter().any(|c| c.is_empty()) {
        return Err(Error::contract("batch needs non-empty clips and one draw per clip"));
    }
    let dtst = cfg.is_some_and(|c| c.use_dtst);
    let b = Bound::new(g, model_dims, params, dtst)?;
    let (k, d) = (model_dims.k, model_dims.d_slot);
    let mut pairs = Vec::new();
    let mut branches = Vec::new();
    let mut active = 0usize;
    let mut raw_all = Vec::new();
    for (c, (clip, dr)) in batch.iter().zip(draws).enumerate() {
        let mut raw: Vec<SlotVars> = Vec::with_capacity(clip.len());
        let mut targets = Vec::with_capacity(clip.len());
        for (t, x) in clip.iter().enumerate() {
            let xv = g.constant(x.clone())?;
            targets.push(xv);
            let init = if t == 0 {
                SlotVars::from_frame(g, &init_slots_gaussian(k, d, dr.init_seed))?
            } else if let (Some(cfg), Some(dt)) = (cfg.filter(|c| c.use_xslot), &b.dt) {
                let lo = t.saturating_sub(cfg.window);
                let buffer = match frozen {
                    Some(f) => (lo..t).map(|i| SlotVars::from_frame(g, &f[c][i])).collect::<Result<Vec<_>>>()?,
                    None => raw[lo..t].iter().map(|s| s.detach(g)).collect::<Result<Vec<_>>>()?,
                };
                dt.predict_next(g, &buffer, k, &cfg.merger)?
            } else {
                raw[t - 1].clone()
            };
            raw.push(b.sa.run(g, xv, &init)?);
        }
        let (decode_from, branch) = match cfg {
            None => (raw.clone(), Branch::Pretrain),
            Some(cfg) if dr.bypass_u < cfg.bypass_prob => (raw.clone(), Branch::Bypass),
            Some(cfg) => {
                let mut s = raw.clone();
                if let Some(dt) = &b.dt {
                    let validity: Vec<Vec<bool>> = s.iter().map(|f| valid_mask(f)).collect();
                    let plan = MaskPlan::sample(&validity, cfg.mask_ratio, dr.mask_seed)?;
                    s = dt.apply_mask(g, &s, &plan.masked)?;
                    s = dt.forward(g, &s)?;
                }
                if cfg.use_merger && dr.drop_u >= cfg.merger_drop_prob {
                    s = s.iter().map(|f| merge_vars(g, f, &cfg.merger).map(|m| m.0)).collect::<Result<_>>()?;
                    (s, Branch::RefineMerge)
                } else {
                    (s, Branch::Refine)
                }
            }
        };
        for (s, &x) in decode_from.iter().zip(&targets) {
            active += s.valid.len();
            let out = b.dec.decode(g, s)?;
            pairs.push((out.recon, x));
        }
        branches.push(branch);
        raw_all.push(raw);
    }
    let loss = recon_loss_var(g, &pairs)?;
    Ok(BatchGraph {
        loss,
        branches,
        active_slots: active as f64 / pairs.len() as f64,
        raw: raw_all,
    })
}

fn valid_mask(s: &SlotVars) -> Vec<bool> {
    let mut m = vec![false; s.k];
    for &i in &s.valid {
        m[i] = true;
    }
    m
}

fn step_impl<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &[&[Tensor<T>]],
    cfg: &TrainConfig,
    step: u64,
    stage2: bool,
) -> Result<StepRecord> {
    let draws: Vec<ClipDraws> = (0..batch.len()).map(|c| ClipDraws::new(cfg.seed, step, c as u64)).collect();
    let mut g = Graph::new();
    let bg = batch_graph(&mut g, &model.dims, &model.params, batch, &draws, stage2.then_some(cfg), None)?;
    let loss = g.value(bg.loss).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = g.backward(bg.loss)?;
    drop(g);
    adam_update(&mut model.params, &grads, opt, cfg)?;
    Ok(StepRecord {
        step,
        stage: if stage2 { Stage::Stage2 } else { Stage::Pretrain },
        loss: loss.f64(),
        branches: bg.branches,
        active_slots: bg.active_slots,
    })
}

/// One pretraining update on `batch`; returns the pre-update loss.
pub fn pretrain_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &[&[Tensor<T>]],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    step_impl(model, opt, batch, cfg, step, false)
}

/// One stage-2 update on `batch`; returns the pre-update loss.
pub fn stage2_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &[&[Tensor<T>]],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    step_impl(model, opt, batch, cfg, step, true)
}

/// Owns the model, optimizer state and training clips.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    /// Number of completed updates.
    pub step: u64,
    clips: Vec<ClipFeatures<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, clips: Vec<ClipFeatures<T>>) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() || clips.iter().any(|c| c.is_empty()) {
            return Err(Error::contract("training needs at least one non-empty clip"));
        }
        Ok(Self {
            model,
            opt: OptimizerState::default(),
            cfg,
            step: 0,
            clips,
        })
    }

    /// Continues from saved optimizer state after `step` completed updates.
    pub fn resume(
        model: Model<T>,
        opt: OptimizerState<T>,
        step: u64,
        cfg: TrainConfig,
        clips: Vec<ClipFeatures<T>>,
    ) -> Result<Self> {
        let mut t = Self::new(model, cfg, clips)?;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    /// Clip windows of the current step: `min(batch, clips)` distinct clips,
    /// each cut to a random window of at most `T` frames.
    pub fn batch_windows(&self) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, self.step, 0, STREAM_BATCH]));
        let n = self.cfg.batch.min(self.clips.len());
        let mut picks = sample(&mut rng, self.clips.len(), n).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|c| {
                let spare = self.clips[c].len().saturating_sub(self.cfg.window);
                (c, rng.random_range(0..=spare))
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let windows = self.batch_windows();
        let batch: Vec<&[Tensor<T>]> = windows
            .iter()
            .map(|&(c, s)| {
                let clip = &self.clips[c];
                &clip[s..(s + self.cfg.window).min(clip.len())]
            })
            .collect();
        let rec = step_impl(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.cfg,
            self.step,
            self.cfg.stage == Stage::Stage2,
        )?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs until `cfg.steps` updates are done, writing one JSON line per step.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
            }
            on_step(&rec);
            out.push(rec);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub merger: MergerConfig,
    pub eval_seed: u64,
    pub window: usize,
    pub use_dtst: bool,
    pub use_merger: bool,
    pub use_xslot: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            merger: MergerConfig::default(),
            eval_seed: 0,
            window: 5,
            use_dtst: true,
            use_merger: true,
            use_xslot: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutFrame<T> {
    /// Slot-attention output.
    pub raw: SlotFrame<T>,
    /// Refined and merged slots that were decoded.
    pub slots: SlotFrame<T>,
    pub decoded: DecodedFrame<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<T> {
    pub frames: Vec<RolloutFrame<T>>,
    /// `L × K` validity of the decoded slots.
    pub m_s: Vec<Vec<bool>>,
    pub peak_buffer: usize,
}

impl<T: Scalar> Rollout<T> {
    pub fn mean_active_slots(&self) -> f64 {
        let n: usize = self.m_s.iter().map(|r| r.iter().filter(|&&v| v).count()).sum();
        n as f64 / self.m_s.len() as f64
    }
}

/// Inference over a video of any length with a sliding buffer of `T` frames.
pub fn rollout<T: Scalar>(model: &Model<T>, features: &[Tensor<T>], cfg: &RolloutConfig) -> Result<Rollout<T>> {
    if features.is_empty() {
        return Err(Error::contract("rollout of an empty video"));
    }
    if cfg.use_xslot && !cfg.use_dtst {
        return Err(Error::config("use_xslot", "next-slot prediction needs the transformer (use_dtst)"));
    }
    if cfg.window == 0 {
        return Err(Error::config("T", "must be positive"));
    }
    let dims = &model.dims;
    let mut buffer: VecDeque<SlotFrame<T>> = VecDeque::with_capacity(cfg.window + 1);
    let mut peak = 0;
    let mut frames = Vec::with_capacity(features.len());
    for x in features {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, dims, &model.params, cfg.use_dtst)?;
        let buf = buffer
            .iter()
            .map(|f| SlotVars::from_frame(&mut g, f))
            .collect::<Result<Vec<_>>>()?;
        let init = match buf.last() {
            None => SlotVars::from_frame(&mut g, &init_slots_gaussian(dims.k, dims.d_slot, cfg.eval_seed))?,
            Some(last) => match (&b.dt, cfg.use_xslot) {
                (Some(dt), true) => dt.predict_next(&mut g, &buf, dims.k, &cfg.merger)?,
                _ => last.clone(),
            },
        };
        let xv = g.constant(x.clone())?;
        let s = b.sa.run(&mut g, xv, &init)?;
        let raw = s.to_frame(&g)?;
        let mut refined = s;
        if let Some(dt) = &b.dt {
            let mut window = buf[buf.len().saturating_sub(cfg.window - 1)..].to_vec();
            window.push(refined);
            refined = dt.forward(&mut g, &window)?.pop().expect("current frame");
        }
        if cfg.use_merger {
            refined = merge_vars(&mut g, &refined, &cfg.merger)?.0;
        }
        let out = b.dec.decode(&mut g, &refined)?;
        let slots = refined.to_frame(&g)?;
        let decoded = crate::decoder::decoded_from_vars(&g, &out, &refined, dims.d_feature)?;
        buffer.push_back(raw.clone());
        while buffer.len() > cfg.window {
            buffer.pop_front();
        }
        peak = peak.max(buffer.len());
        frames.push(RolloutFrame { raw, slots, decoded });
    }
    let m_s = frames.iter().map(|f| f.slots.valid.clone()).collect();
    Ok(Rollout {
        frames,
        m_s,
        peak_buffer: peak,
    })
}

/// Finite-difference check of the pretraining loss and of the full stage-2
/// loss (prediction init, masking, transformer, merger) on seeded random
/// features. Returns `(path name, report)` pairs.
pub fn pipeline_gradcheck(dims: &ModelDims, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let model = Model::<f64>::init(dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_BATCH]));
    let np = dims.n_patches();
    let clips: Vec<ClipFeatures<f64>> = (0..2)
        .map(|_| {
            (0..dims.window.max(2))
                .map(|_| {
                    let v: Vec<f64> = (0..np * dims.d_feature).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Tensor::from_f64(&[np, dims.d_feature], &v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&[Tensor<f64>]> = clips.iter().map(|c| c.as_slice()).collect();
    let draws: Vec<ClipDraws> = (0..batch.len()).map(|c| ClipDraws::new(seed, 0, c as u64)).collect();
    let full = TrainConfig {
        stage: Stage::Stage2,
        bypass_prob: 0.0,
        merger_drop_prob: 0.0,
        mask_ratio: 0.5,
        window: dims.window,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    for (name, cfg) in [("pretrain", None), ("stage2", Some(&full))] {
        let mut g = Graph::new();
        let bg = batch_graph(&mut g, dims, &model.params, &batch, &draws, cfg, None)?;
        let frozen: Vec<Vec<SlotFrame<f64>>> = bg
            .raw
            .iter()
            .map(|c| c.iter().map(|s| s.to_frame(&g)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let report = gradient_check(
            |g, p| Ok(batch_graph(g, dims, p, &batch, &draws, cfg, Some(&frozen))?.loss),
            &model.params,
            1e-6,
        )?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

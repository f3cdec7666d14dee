//! Flat run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::merger::MergerConfig;
use crate::model::ModelDims;
use crate::training::{RolloutConfig, Stage, TrainConfig};

/// Every knob of a run. Unknown keys are rejected; `K`, `T`, `p_b` and `p_d`
/// are accepted as aliases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Data.
    pub canvas: usize,
    pub clip_len: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_max: f64,
    pub two_tone: bool,
    pub entry_exit: bool,

    // Model.
    pub patch: usize,
    pub d_feature: usize,
    #[serde(alias = "K")]
    pub k: usize,
    pub d_slot: usize,
    pub n_iter: usize,
    pub sa_hidden: usize,
    pub dec_hidden: usize,
    pub dtst_layers: usize,
    pub dtst_heads: usize,
    pub dtst_ff: usize,
    #[serde(alias = "T")]
    pub window: usize,
    pub t_max: usize,
    pub feature_seed: u64,

    // Merger.
    pub theta: f64,
    pub merger_eps: f64,

    // Training.
    #[serde(alias = "p_b")]
    pub bypass_prob: f64,
    #[serde(alias = "p_d")]
    pub merger_drop_prob: f64,
    pub mask_ratio: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_steps: u64,
    pub stage2_steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub use_dtst: bool,
    pub use_merger: bool,
    pub use_xslot: bool,
    /// Allows stage 2 without a pretrained checkpoint.
    pub cold_start: bool,

    // Evaluation.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        let m = ModelDims::default();
        let t = TrainConfig::default();
        Self {
            canvas: g.canvas,
            clip_len: g.clip_len,
            sprites_min: g.sprites_min,
            sprites_max: g.sprites_max,
            radius_min: g.radius_min,
            radius_max: g.radius_max,
            speed_max: g.speed_max,
            two_tone: g.two_tone,
            entry_exit: g.entry_exit,
            patch: m.patch,
            d_feature: m.d_feature,
            k: m.k,
            d_slot: m.d_slot,
            n_iter: m.n_iter,
            sa_hidden: m.sa_hidden,
            dec_hidden: m.dec_hidden,
            dtst_layers: m.dtst_layers,
            dtst_heads: m.dtst_heads,
            dtst_ff: m.dtst_ff,
            window: m.window,
            t_max: m.t_max,
            feature_seed: m.feature_seed,
            theta: t.merger.theta,
            merger_eps: t.merger.eps,
            bypass_prob: t.bypass_prob,
            merger_drop_prob: t.merger_drop_prob,
            mask_ratio: t.mask_ratio,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            pretrain_steps: 1500,
            stage2_steps: 500,
            batch: 8,
            seed: 0,
            use_dtst: t.use_dtst,
            use_merger: t.use_merger,
            use_xslot: t.use_xslot,
            cold_start: false,
            eval_seed: 0,
        }
    }
}

const ALIASES: [(&str, &str); 4] = [
    ("K", "k"),
    ("T", "window"),
    ("p_b", "bypass_prob"),
    ("p_d", "merger_drop_prob"),
];

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::config("config", e.to_string())
}

/// Deserializes, naming the first offending key on failure.
fn from_object(obj: Map<String, Value>) -> Result<RunConfig> {
    serde_json::from_value(Value::Object(obj.clone())).map_err(|e| {
        let culprit = obj.iter().find(|(k, v)| {
            let one: Map<String, Value> = [((*k).clone(), (*v).clone())].into_iter().collect();
            serde_json::from_value::<RunConfig>(Value::Object(one)).is_err()
        });
        match culprit {
            Some((k, _)) => Error::config(k.clone(), e.to_string()),
            None => json_error(e),
        }
    })
}

impl RunConfig {
    /// Parses JSON text (empty text gives the defaults), applies `key=value`
    /// overrides and validates. Override values are parsed as JSON and fall
    /// back to plain strings.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let base: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text).map_err(json_error)?
        };
        let Value::Object(base) = base else {
            return Err(Error::config("config", "top level must be a JSON object"));
        };
        let mut obj = Map::new();
        for (k, v) in base {
            obj.insert(canonical(&k).to_string(), v);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            obj.insert(canonical(k.trim()).to_string(), v);
        }
        let cfg = from_object(obj)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.model_dims().validate()?;
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return Err(Error::config("patch", format!("canvas {} not divisible by patch {}", self.canvas, self.patch)));
        }
        self.train_config(Stage::Pretrain).validate()
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            canvas: self.canvas,
            clip_len: self.clip_len,
            sprites_min: self.sprites_min,
            sprites_max: self.sprites_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            speed_max: self.speed_max,
            two_tone: self.two_tone,
            entry_exit: self.entry_exit,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            canvas: self.canvas,
            channels: 3,
            patch: self.patch,
            d_feature: self.d_feature,
            k: self.k,
            d_slot: self.d_slot,
            n_iter: self.n_iter,
            sa_hidden: self.sa_hidden,
            dec_hidden: self.dec_hidden,
            dtst_layers: self.dtst_layers,
            dtst_heads: self.dtst_heads,
            dtst_ff: self.dtst_ff,
            window: self.window,
            t_max: self.t_max,
            feature_seed: self.feature_seed,
        }
    }

    pub fn merger(&self) -> MergerConfig {
        MergerConfig {
            theta: self.theta,
            eps: self.merger_eps,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            bypass_prob: self.bypass_prob,
            merger_drop_prob: self.merger_drop_prob,
            mask_ratio: self.mask_ratio,
            merger: self.merger(),
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            steps: match stage {
                Stage::Pretrain => self.pretrain_steps,
                Stage::Stage2 => self.stage2_steps,
            },
            batch: self.batch,
            window: self.window,
            seed: self.seed,
            use_dtst: self.use_dtst,
            use_merger: self.use_merger,
            use_xslot: self.use_xslot,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            merger: self.merger(),
            eval_seed: self.eval_seed,
            window: self.window,
            use_dtst: self.use_dtst,
            use_merger: self.use_merger,
            use_xslot: self.use_xslot,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("plain data serializes")
    }
}

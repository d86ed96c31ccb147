//! Flat `key=value` run configuration.
//!
//! One file drives a whole run: architecture, optimization and masking keys
//! side by side. Unknown keys are hard errors so a typo cannot silently
//! train the wrong model. `#` starts a comment; blank lines are skipped.

use std::path::Path;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::masker::MaskPolicy;
use crate::model::ModelConfig;
use crate::objective::OovMode;

/// Optimization and bookkeeping knobs. Training always runs in f32;
/// gradient checking always runs in f64.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub ckpt_interval: u64,
    pub sense_weight: f64,
    pub mode: OovMode,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 42,
            log_interval: 100,
            ckpt_interval: 1000,
            sense_weight: 1.0,
            mode: OovMode::SixtyKNoOov,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{} must lie in [0, 1), got {}",
                    name, v
                )));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.sense_weight.is_finite() && self.sense_weight >= 0.0) {
            return Err(Error::Config(format!(
                "sense_weight must be nonnegative, got {}",
                self.sense_weight
            )));
        }
        if self.log_interval == 0 || self.ckpt_interval == 0 {
            return Err(Error::Config("intervals must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, resolved against the defaults.
#[derive(Clone, Copy, Debug)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskPolicy,
}

/// Architecture defaults. `d_w` and `d_s` start at zero, standing for
/// "derive from the vocabulary and inventory"; they must be resolved before
/// the model config validates.
fn default_model() -> ModelConfig {
    ModelConfig {
        d: 64,
        layers: 2,
        heads: 4,
        ff_dim: 256,
        n_max: 128,
        d_w: 0,
        d_s: 0,
    }
}

impl Default for FullConfig {
    fn default() -> FullConfig {
        FullConfig {
            model: default_model(),
            train: TrainConfig::default(),
            mask: MaskPolicy::default(),
        }
    }
}

impl FullConfig {
    pub fn load(path: &Path) -> Result<FullConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        let mut saw_warmup = false;
        let mut saw_whole_word = false;
        let mut saw_steps = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(origin, lineno, "expected key=value"));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::parse(
                    origin,
                    lineno,
                    format!("cannot parse '{}' as {} for key {}", value, what, key),
                )
            };
            let as_usize =
                |v: &str| v.parse::<usize>().map_err(|_| bad("an unsigned integer"));
            let as_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad("an unsigned integer"));
            let as_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("a number"));
            let as_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad("true or false")),
            };

            match key {
                // Architecture.
                "d" => cfg.model.d = as_usize(value)?,
                "layers" => cfg.model.layers = as_usize(value)?,
                "heads" => cfg.model.heads = as_usize(value)?,
                "ff_dim" => cfg.model.ff_dim = as_usize(value)?,
                "n_max" => cfg.model.n_max = as_usize(value)?,
                "d_w" => cfg.model.d_w = as_usize(value)?,
                "d_s" => cfg.model.d_s = as_usize(value)?,
                // Optimization.
                "steps" => {
                    cfg.train.steps = as_u64(value)?;
                    saw_steps = true;
                }
                "batch_size" => cfg.train.batch_size = as_usize(value)?,
                "lr" => cfg.train.lr = as_f64(value)?,
                "warmup_steps" => {
                    cfg.train.warmup_steps = as_u64(value)?;
                    saw_warmup = true;
                }
                "beta1" => cfg.train.beta1 = as_f64(value)?,
                "beta2" => cfg.train.beta2 = as_f64(value)?,
                "adam_eps" => cfg.train.adam_eps = as_f64(value)?,
                "weight_decay" => cfg.train.weight_decay = as_f64(value)?,
                "seed" => cfg.train.seed = as_u64(value)?,
                "log_interval" => cfg.train.log_interval = as_u64(value)?,
                "ckpt_interval" => cfg.train.ckpt_interval = as_u64(value)?,
                "sense_weight" => cfg.train.sense_weight = as_f64(value)?,
                "mode" => cfg.train.mode = OovMode::parse(value).map_err(|e| {
                    Error::parse(origin, lineno, e.to_string())
                })?,
                // Masking.
                "mask_rate" => cfg.mask.mask_rate = as_f64(value)?,
                "single_sense_take" => cfg.mask.single_sense_take = as_f64(value)?,
                "single_sense_cap" => cfg.mask.single_sense_cap = as_f64(value)?,
                "keep_prob" => cfg.mask.keep_prob = as_f64(value)?,
                "whole_word" => {
                    cfg.mask.whole_word = as_bool(value)?;
                    saw_whole_word = true;
                }
                _ => {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        format!("unknown key '{}'", key),
                    ));
                }
            }
        }

        // Derived defaults: warmup is a tenth of the run, and average
        // embedding mode supervises whole words unless told otherwise.
        if !saw_warmup && saw_steps {
            cfg.train.warmup_steps = cfg.train.steps / 10;
        }
        if !saw_whole_word && cfg.train.mode == OovMode::AverageEmbedding {
            cfg.mask.whole_word = true;
        }

        cfg.train.validate()?;
        cfg.mask.validate()?;
        Ok(cfg)
    }

    /// Fill `d_w`/`d_s` from the artifacts when the file leaves them at 0.
    pub fn resolve_dims(&mut self, vocab_size: usize, inventory_size: usize) {
        if self.model.d_w == 0 {
            self.model.d_w = vocab_size;
        }
        if self.model.d_s == 0 {
            self.model.d_s = inventory_size;
        }
    }

    /// Canonical serialization; every field in fixed order.
    pub fn canonical_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let k = &self.mask;
        format!(
            "d={}\nlayers={}\nheads={}\nff_dim={}\nn_max={}\nd_w={}\nd_s={}\n\
             steps={}\nbatch_size={}\nlr={}\nwarmup_steps={}\nbeta1={}\nbeta2={}\n\
             adam_eps={}\nweight_decay={}\nseed={}\nlog_interval={}\nckpt_interval={}\n\
             sense_weight={}\nmode={}\n\
             mask_rate={}\nsingle_sense_take={}\nsingle_sense_cap={}\nkeep_prob={}\nwhole_word={}\n",
            m.d, m.layers, m.heads, m.ff_dim, m.n_max, m.d_w, m.d_s,
            t.steps, t.batch_size, t.lr, t.warmup_steps, t.beta1, t.beta2,
            t.adam_eps, t.weight_decay, t.seed, t.log_interval, t.ckpt_interval,
            t.sense_weight, t.mode.name(),
            k.mask_rate, k.single_sense_take, k.single_sense_cap, k.keep_prob, k.whole_word,
        )
    }

    /// Content hash of the canonical serialization; stored in checkpoints so
    /// resumes cannot silently change the run recipe.
    pub fn digest(&self) -> u64 {
        binfmt::fnv1a(self.canonical_string().as_bytes())
    }
}

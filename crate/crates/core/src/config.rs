//! Run configuration stored as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`RunConfig::default`] and the training defaults in
//! [`TrainConfig`]); unknown keys are rejected. The file written by
//! [`RunConfig::to_text`] lists every key, so an echoed config reproduces a run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::hma::{FeatureMode, Masking};
use crate::model::Preset;
use crate::train::TrainConfig;

/// Environment variable that overrides the seed from a config file.
pub const SEED_ENV: &str = "EDITOR_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Manifest of the corpus to train or evaluate on.
    pub manifest: PathBuf,
    /// Directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
    pub metric: Metric,
    pub camera_filter: bool,
    /// Samples per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            manifest: PathBuf::from("corpus/manifest.jsonl"),
            out_dir: PathBuf::from("run"),
            metric: Metric::Euclidean,
            camera_filter: true,
            eval_batch: 16,
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! fromstr_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::config(format!("cannot parse {s:?} as {}", stringify!($t))))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
fromstr_value!(usize, u64, f64, bool);

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Preset {
    fn parse(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse()
            }
            fn render(&self) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}
str_value!(FeatureMode, Masking, Metric);

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every recognised key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse(value)
                            .map_err(|e| Error::config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// All keys with their current values.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

keys! {
    "preset" => train.preset;
    "lr_base" => train.lr_base;
    "warmup_iters" => train.warmup_iters;
    "total_iters" => train.total_iters;
    "momentum" => train.momentum;
    "weight_decay" => train.weight_decay;
    "seed" => train.seed;
    "p" => train.p;
    "k" => train.k;
    "s" => train.s;
    "f" => train.f;
    "dhwt_levels" => train.dhwt_levels;
    "alpha" => train.alpha;
    "w_bcc" => train.w_bcc;
    "w_ocfr" => train.w_ocfr;
    "hma_mode" => train.hma_mode;
    "masking" => train.masking;
    "shared_encoder" => train.shared_encoder;
    "smoothing" => train.smoothing;
    "margin" => train.margin;
    "bn_neck" => train.bn_neck;
    "eval_every" => train.eval_every;
    "height" => train.height;
    "width" => train.width;
    "patch" => train.patch;
    "dim" => train.dim;
    "depth" => train.depth;
    "heads" => train.heads;
    "mlp_ratio" => train.mlp_ratio;
    "camera_embedding" => train.camera_embedding;
    "num_cameras" => train.num_cameras;
    "augment" => train.augment;
    "monitor_samples" => train.monitor_samples;
    "epoch_iters" => train.epoch_iters;
    "stop_after" => train.stop_after;
    "manifest" => manifest;
    "out_dir" => out_dir;
    "metric" => metric;
    "camera_filter" => camera_filter;
    "eval_batch" => eval_batch;
}

impl RunConfig {
    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len();
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
                offset: here,
                msg: format!("expected `key = value`, found {body:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                offset: here,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim()).map_err(|e| Error::config(format!("{SEED_ENV}: {e}")))?;
        }
        Ok(())
    }
}

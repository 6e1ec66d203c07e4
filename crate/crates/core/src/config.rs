//! Flat `key=value` configuration with dotted sections, e.g.
//! `model.motion_dim=96`. Blank lines and `#` comments are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{make_dataset, SceneDistribution, SyntheticSequence};
use crate::trainer::TrainConfig;

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: SceneDistribution,
    /// Training sequences.
    pub count: usize,
    /// Held-out sequences.
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: SceneDistribution::default(), count: 64, eval_count: 8, seed: 0 }
    }
}

impl DataConfig {
    /// Seed of the held-out set, disjoint from the training stream.
    pub fn held_out_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    pub fn train_set(&self) -> Result<Vec<SyntheticSequence>> {
        make_dataset(&self.scenes, self.count, self.seed)
    }

    pub fn held_out_set(&self) -> Result<Vec<SyntheticSequence>> {
        make_dataset(&self.scenes, self.eval_count, self.held_out_seed())
    }
}

/// Everything a CLI invocation can configure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, bool);

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        // `Display` prints the shortest string that parses back exactly.
        self.to_string()
    }
}

fn parse<T: Value>(key: &str, value: &str) -> Result<T> {
    T::parse(value).ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

macro_rules! fields {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every recognized key, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => cfg.$($field).+ = parse(key, value)?,)*
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        }

        fn field_value(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(cfg.$($field).+.render()),)*
                _ => None,
            }
        }
    };
}

fields! {
    "model.in_channels" => train.model.in_channels;
    "model.downsample" => train.model.downsample;
    "model.feat_dim" => train.model.feat_dim;
    "model.corr_dim" => train.model.corr_dim;
    "model.flow_dim" => train.model.flow_dim;
    "model.motion_dim" => train.model.motion_dim;
    "model.hidden_dim" => train.model.hidden_dim;
    "model.corr_levels" => train.model.corr_levels;
    "model.corr_radius" => train.model.corr_radius;
    "model.corr_normalize" => train.model.corr_normalize;
    "model.depthwise_updater" => train.model.depthwise_updater;
    "model.mop_encoder" => train.model.mop_encoder;
    "ablation.bidirectional" => train.model.ablation.bidirectional;
    "ablation.recurrent_fusion" => train.model.ablation.recurrent_fusion;
    "ablation.mop" => train.model.ablation.mop;
    "train.iters" => train.iters;
    "train.gamma" => train.gamma;
    "train.include_initial" => train.include_initial;
    "train.clip_frames" => train.clip_frames;
    "train.steps" => train.steps;
    "train.batch" => train.batch;
    "train.lr" => train.lr;
    "train.final_lr" => train.final_lr;
    "train.warmup" => train.warmup;
    "train.weight_decay" => train.weight_decay;
    "train.clip_norm" => train.clip_norm;
    "train.seed" => train.seed;
    "train.log_every" => train.log_every;
    "data.width" => data.scenes.width;
    "data.height" => data.scenes.height;
    "data.frames" => data.scenes.frames;
    "data.min_sprites" => data.scenes.min_sprites;
    "data.max_sprites" => data.scenes.max_sprites;
    "data.max_translation" => data.scenes.max_translation;
    "data.max_rotation" => data.scenes.max_rotation;
    "data.max_background_translation" => data.scenes.max_background_translation;
    "data.min_extent" => data.scenes.min_extent;
    "data.max_extent" => data.scenes.max_extent;
    "data.texture_scale" => data.scenes.texture_scale;
    "data.count" => data.count;
    "data.eval_count" => data.eval_count;
    "data.seed" => data.seed;
}

/// Splits `key=value`, trimming whitespace around both.
pub fn split_assignment(text: &str) -> Result<(&str, &str)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{text}`")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("missing key in `{text}`")));
    }
    Ok((k, v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_field(self, key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        field_value(self, key)
    }

    /// Applies every assignment of a config text in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `key=value` lines for keys whose prefix is one of `sections`
    /// (all keys when empty).
    pub fn to_text(&self, sections: &[&str]) -> String {
        KEYS.iter()
            .filter(|k| sections.is_empty() || sections.iter().any(|s| k.starts_with(&format!("{s}."))))
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.scenes.validate()?;
        if self.data.count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("data.count and data.eval_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sections that describe a trained model, as stored in checkpoints.
pub const MODEL_SECTIONS: &[&str] = &["model", "ablation", "train"];

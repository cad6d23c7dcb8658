//! Flat `key=value` run configuration.
//!
//! A config file holds one `key=value` pair per line; blank lines and lines
//! starting with `#` are ignored. Command-line `--key value` pairs are applied
//! on top of the file. Every command declares the keys it accepts and unknown
//! keys are rejected, so a typo never silently falls back to a default.
//!
//! [`Settings::to_text`] renders the resolved settings in the same format,
//! which makes an echoed config a valid input config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, TcnError};
use crate::layers::Alignment;
use crate::network::{DecoderOutput, ModelConfig};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// A documented configuration key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

pub const MODEL_KEYS: &[Key] = &[
    key("num_layers", "auto", "encoder layers L; auto = length of filters_per_layer"),
    key("filters_per_layer", "32,64,96", "comma-separated filter counts F_1..F_L"),
    key("filter_duration", "auto", "filter duration d in frames; auto = mean segment length of the shortest class"),
    key("num_classes", "auto", "number of classes C; auto = largest training label"),
    key("input_dim", "auto", "feature dimension F_0; auto = from the data"),
    key("leaky_slope", "0.01", "negative slope of the leaky ReLU"),
    key("decoder_output", "input_dim", "decoder output width: input_dim (F_0) or first_layer (F_1)"),
    key("input_norm", "true", "normalize each input frame by its maximum"),
    key("conv_alignment", "forward", "conv window: forward (t..t+d-1) or centered"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("learning_rate", "0.001", "Adam step size"),
    key("adam_beta1", "0.9", "Adam first-moment decay"),
    key("adam_beta2", "0.999", "Adam second-moment decay"),
    key("adam_epsilon", "1e-8", "Adam denominator offset"),
    key("epochs", "200", "passes over the training set"),
    key("batch_size", "8", "sequences per optimizer step"),
    key("rng_seed", "0", "seed for initialization and shuffling"),
    key("shuffle", "true", "shuffle sequence order every epoch"),
];

pub const SYNTH_KEYS: &[Key] = &[
    key("num_classes", "5", "number of classes"),
    key("feature_dim", "8", "feature dimension"),
    key("num_sequences", "10", "sequences to generate"),
    key("mean_sequence_length", "200", "mean frames per sequence"),
    key("mean_segment_length", "20", "mean frames per segment"),
    key("separation", "4", "distance between class means in noise standard deviations"),
    key("noise_std", "1", "emission noise standard deviation"),
    key("num_groups", "1", "source groups, assigned round-robin"),
    key("frame_period", "0.03333333333333333", "seconds per frame"),
    key("rng_seed", "0", "generator seed"),
];

/// Parsed `key=value` settings. Later assignments win.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TcnError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |column: usize, message: String| TcnError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                column,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(1, format!("expected key=value, found `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err(1, "empty key".into()));
            }
            if s.values.contains_key(k) {
                return Err(err(1, format!("duplicate key `{k}`")));
            }
            s.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(s)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.values.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies every entry of `overrides` on top of `self`.
    pub fn merge(&mut self, overrides: &Settings) {
        for (k, v) in &overrides.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Fails on the first key not listed in `allowed`.
    pub fn check_known(&self, allowed: &[&[Key]]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.iter().any(|group| group.iter().any(|key| key.name == k)) {
                return Err(TcnError::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Fills in the documented default of every key not already set.
    pub fn apply_defaults(&mut self, keys: &[Key]) {
        for key in keys {
            if let Some(d) = key.default {
                self.values.entry(key.name.to_string()).or_insert_with(|| d.to_string());
            }
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| TcnError::Config(format!("missing required key `{key}`")))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| TcnError::Config(format!("bad value for `{key}`: `{raw}`")))
    }

    /// `None` when the value is `auto`.
    pub fn parsed_or_auto<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.require(key)? {
            "auto" => Ok(None),
            _ => self.parsed(key).map(Some),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(TcnError::Config(format!("bad value for `{key}`: `{other}` (expected true or false)"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|_| TcnError::Config(format!("bad list item for `{key}`: `{item}`")))
            })
            .collect()
    }

    /// Path value, relative to the working directory.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Model settings with `auto` fields left open until data is available.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    pub filters_per_layer: Vec<usize>,
    pub filter_duration: Option<usize>,
    pub num_classes: Option<usize>,
    pub input_dim: Option<usize>,
    pub leaky_slope: f64,
    pub decoder_output: DecoderOutput,
    pub input_norm: bool,
    pub conv_alignment: Alignment,
}

impl ModelTemplate {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let filters_per_layer: Vec<usize> = s.list("filters_per_layer")?;
        if let Some(l) = s.parsed_or_auto::<usize>("num_layers")? {
            if l != filters_per_layer.len() {
                return Err(TcnError::Config(format!(
                    "num_layers={l} but filters_per_layer lists {} values",
                    filters_per_layer.len()
                )));
            }
        }
        let decoder_output = DecoderOutput::parse(s.require("decoder_output")?)
            .ok_or_else(|| TcnError::Config("decoder_output must be input_dim or first_layer".into()))?;
        let conv_alignment = Alignment::parse(s.require("conv_alignment")?)
            .ok_or_else(|| TcnError::Config("conv_alignment must be forward or centered".into()))?;
        Ok(Self {
            filters_per_layer,
            filter_duration: s.parsed_or_auto("filter_duration")?,
            num_classes: s.parsed_or_auto("num_classes")?,
            input_dim: s.parsed_or_auto("input_dim")?,
            leaky_slope: s.parsed("leaky_slope")?,
            decoder_output,
            input_norm: s.flag("input_norm")?,
            conv_alignment,
        })
    }

    /// Fills the open fields. `filter_duration` is only called when needed.
    pub fn resolve(
        &self,
        num_classes: usize,
        input_dim: usize,
        filter_duration: impl FnOnce() -> Result<usize>,
    ) -> Result<ModelConfig> {
        let config = ModelConfig {
            num_layers: self.filters_per_layer.len(),
            filters_per_layer: self.filters_per_layer.clone(),
            filter_duration: match self.filter_duration {
                Some(d) => d,
                None => filter_duration()?,
            },
            num_classes: self.num_classes.unwrap_or(num_classes),
            input_dim: self.input_dim.unwrap_or(input_dim),
            leaky_slope: self.leaky_slope,
            decoder_output: self.decoder_output,
            input_norm: self.input_norm,
            conv_alignment: self.conv_alignment,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Writes every model key with its resolved value.
pub fn write_model_config(c: &ModelConfig, s: &mut Settings) {
    let filters: Vec<String> = c.filters_per_layer.iter().map(usize::to_string).collect();
    s.set("num_layers", c.num_layers.to_string());
    s.set("filters_per_layer", filters.join(","));
    s.set("filter_duration", c.filter_duration.to_string());
    s.set("num_classes", c.num_classes.to_string());
    s.set("input_dim", c.input_dim.to_string());
    s.set("leaky_slope", c.leaky_slope.to_string());
    s.set("decoder_output", c.decoder_output.name());
    s.set("input_norm", c.input_norm.to_string());
    s.set("conv_alignment", c.conv_alignment.name());
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let c = TrainConfig {
        learning_rate: s.parsed("learning_rate")?,
        adam_beta1: s.parsed("adam_beta1")?,
        adam_beta2: s.parsed("adam_beta2")?,
        adam_epsilon: s.parsed("adam_epsilon")?,
        epochs: s.parsed("epochs")?,
        batch_size: s.parsed("batch_size")?,
        rng_seed: s.parsed("rng_seed")?,
        shuffle: s.flag("shuffle")?,
    };
    c.validate()?;
    Ok(c)
}

pub fn write_train_config(c: &TrainConfig, s: &mut Settings) {
    s.set("learning_rate", c.learning_rate.to_string());
    s.set("adam_beta1", c.adam_beta1.to_string());
    s.set("adam_beta2", c.adam_beta2.to_string());
    s.set("adam_epsilon", c.adam_epsilon.to_string());
    s.set("epochs", c.epochs.to_string());
    s.set("batch_size", c.batch_size.to_string());
    s.set("rng_seed", c.rng_seed.to_string());
    s.set("shuffle", c.shuffle.to_string());
}

pub fn synth_config(s: &Settings) -> Result<SynthConfig> {
    let c = SynthConfig {
        num_classes: s.parsed("num_classes")?,
        feature_dim: s.parsed("feature_dim")?,
        num_sequences: s.parsed("num_sequences")?,
        mean_sequence_length: s.parsed("mean_sequence_length")?,
        mean_segment_length: s.parsed("mean_segment_length")?,
        separation: s.parsed("separation")?,
        noise_std: s.parsed("noise_std")?,
        num_groups: s.parsed("num_groups")?,
        frame_period: s.parsed("frame_period")?,
        rng_seed: s.parsed("rng_seed")?,
    };
    c.validate()?;
    Ok(c)
}

/// Help lines for a key group, one per key.
pub fn describe(keys: &[Key]) -> String {
    let mut s = String::new();
    for k in keys {
        let default = match k.default {
            Some(d) => format!(" [default: {d}]"),
            None => " [required]".to_string(),
        };
        let _ = writeln!(s, "  --{:<22} {}{}", k.name, k.help, default);
    }
    s
}

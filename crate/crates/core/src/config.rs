//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors; keys that are absent keep their defaults.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Box-filter factor applied to images before they reach the network.
    pub downsample_factor: usize,
    /// Double the training set with mirrored images.
    pub augment_flip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            downsample_factor: 1,
            augment_flip: true,
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Validation(format!("bad value '{raw}' for key '{key}'")))
}

fn parsed<T: FromStr<Err = Error>>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|e| Error::Validation(format!("bad value '{raw}' for key '{key}': {e}")))
}

fn value_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("input_height", m.input_height.to_string()),
        ("input_width", m.input_width.to_string()),
        ("block_widths", list(&m.block_widths)),
        ("convs_per_block", m.convs_per_block.to_string()),
        ("kernel_size", m.kernel_size.to_string()),
        ("fc_widths", list(&m.fc_widths)),
        ("dropout_p", m.dropout_p.to_string()),
        ("head", m.head.to_string()),
        ("width_multiplier", m.width_multiplier.to_string()),
    ]
}

/// Returns `Ok(false)` when `key` is not a model key.
fn set_model(m: &mut ModelConfig, key: &str, raw: &str) -> Result<bool> {
    match key {
        "input_height" => m.input_height = value(key, raw)?,
        "input_width" => m.input_width = value(key, raw)?,
        "block_widths" => m.block_widths = value_list(key, raw)?,
        "convs_per_block" => m.convs_per_block = value(key, raw)?,
        "kernel_size" => m.kernel_size = value(key, raw)?,
        "fc_widths" => m.fc_widths = value_list(key, raw)?,
        "dropout_p" => m.dropout_p = value(key, raw)?,
        "head" => m.head = parsed(key, raw)?,
        "width_multiplier" => m.width_multiplier = value(key, raw)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn render_entries(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Calls `set` for every `key = value` line, rejecting unknown and repeated keys.
fn parse_lines(text: &str, mut set: impl FnMut(&str, &str) -> Result<bool>) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Format(format!("line {}: key '{key}' repeated", i + 1)));
        }
        if !set(key, raw.trim())? {
            return Err(Error::Format(format!("line {}: unknown key '{key}'", i + 1)));
        }
    }
    Ok(())
}

pub fn render_model(model: &ModelConfig) -> String {
    render_entries(&model_entries(model))
}

/// Parses a model-only configuration; absent keys take the full-size defaults.
pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    parse_lines(text, |k, v| set_model(&mut m, k, v))?;
    Ok(m)
}

impl RunConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, s) = (&self.train, &self.synth);
        let mut e = model_entries(&self.model);
        e.extend([
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("clip_scope", t.clip_scope.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("synth_width", s.width.to_string()),
            ("synth_height", s.height.to_string()),
            ("synth_mode", s.mode.to_string()),
            ("synth_gaze", s.gaze.to_string()),
            ("synth_count", s.count.to_string()),
            ("od_radius_min", s.od_radius_range.0.to_string()),
            ("od_radius_max", s.od_radius_range.1.to_string()),
            ("angle_jitter_deg", s.angle_jitter_deg.to_string()),
            ("noise_sigma_rg", s.noise_sigma_rg.to_string()),
            ("noise_sigma_af", s.noise_sigma_af.to_string()),
            ("images_per_subject", s.images_per_subject.to_string()),
            ("synth_seed", s.seed.to_string()),
            ("downsample_factor", self.downsample_factor.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
        ]);
        e
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        if set_model(&mut self.model, key, raw)? {
            return Ok(true);
        }
        let (t, s) = (&mut self.train, &mut self.synth);
        match key {
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "beta1" => t.beta1 = value(key, raw)?,
            "beta2" => t.beta2 = value(key, raw)?,
            "epsilon" => t.epsilon = value(key, raw)?,
            "clip_norm" => t.clip_norm = value(key, raw)?,
            "clip_scope" => t.clip_scope = parsed(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "max_epochs" => t.max_epochs = value(key, raw)?,
            "patience" => t.patience = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "synth_width" => s.width = value(key, raw)?,
            "synth_height" => s.height = value(key, raw)?,
            "synth_mode" => s.mode = parsed(key, raw)?,
            "synth_gaze" => s.gaze = parsed(key, raw)?,
            "synth_count" => s.count = value(key, raw)?,
            "od_radius_min" => s.od_radius_range.0 = value(key, raw)?,
            "od_radius_max" => s.od_radius_range.1 = value(key, raw)?,
            "angle_jitter_deg" => s.angle_jitter_deg = value(key, raw)?,
            "noise_sigma_rg" => s.noise_sigma_rg = value(key, raw)?,
            "noise_sigma_af" => s.noise_sigma_af = value(key, raw)?,
            "images_per_subject" => s.images_per_subject = value(key, raw)?,
            "synth_seed" => s.seed = value(key, raw)?,
            "downsample_factor" => self.downsample_factor = value(key, raw)?,
            "augment_flip" => self.augment_flip = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn render(&self) -> String {
        render_entries(&self.entries())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        parse_lines(text, |k, v| config.set(k, v))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.downsample_factor == 0 {
            return Err(Error::Argument("downsample_factor must be at least 1".into()));
        }
        Ok(())
    }

    /// One `key=value` string per field, for provenance headers.
    pub fn header_lines(&self) -> Vec<String> {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use crate::synth::Choice;
    use crate::data::Modality;
    use crate::trainer::ClipScope;

    #[test]
    fn roundtrip_of_non_default_values() {
        let mut c = RunConfig::default();
        c.model = ModelConfig { head: Head::Laterality1, fc_widths: vec![], ..ModelConfig::desk() };
        c.train.learning_rate = 3.3e-5;
        c.train.clip_scope = ClipScope::Global;
        c.synth.mode = Choice::Fixed(Modality::Af);
        c.synth.od_radius_range = (0.031, 0.047);
        c.augment_flip = false;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn comments_blanks_and_defaults() {
        let c = RunConfig::parse("# run\n\n  input_height = 192 \nwidth_multiplier=0.5\n").unwrap();
        assert_eq!(c.model.input_height, 192);
        assert_eq!(c.model.width_multiplier, 0.5);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Format(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Format(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Format(_))));
        assert!(matches!(RunConfig::parse("seed = -1"), Err(Error::Validation(_))));
        assert!(matches!(RunConfig::parse("head = both"), Err(Error::Validation(_))));
    }

    #[test]
    fn model_section_alone() {
        let m = ModelConfig::desk();
        assert_eq!(parse_model(&render_model(&m)).unwrap(), m);
        assert!(parse_model("learning_rate = 1").is_err());
    }
}

//! Flat key-value configuration files (TOML syntax, scalar and small-array
//! values only) for dataset generation and training, with defaults for
//! every key and rejection of unknown keys.

use super::schedule::ScheduleKind;
use crate::model::ModelConfig;
use crate::backbone::BackboneConfig;
use crate::recurrent::ZoneoutConfig;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("toml: {0}")]
    Toml(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {detail}")]
    BadValue { key: String, detail: String },
}

fn bad(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        detail: detail.into(),
    }
}

/// All training knobs, one flat namespace. Per-stage values carry s1_/s2_/
/// s3_ prefixes; everything else is shared.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    // model
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub first_kernel: usize,
    pub dropout: f64,
    pub blocks_per_stage: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub zoneout: f64,
    pub recurrence: bool,
    // viewsphere / resampling
    pub grid_az: u32,
    pub grid_el: u32,
    pub k_t: usize,
    pub n_per_class: usize,
    // data handling
    pub augment: f64,
    pub val_fraction: f64,
    // optimization
    pub minibatch: usize,
    pub window: usize,
    pub stride: usize,
    pub s1_epochs: usize,
    pub s2_epochs: usize,
    pub s3_epochs: usize,
    pub s1_lr: f64,
    pub s2_lr: f64,
    pub s3_lr: f64,
    pub s1_schedule: ScheduleKind,
    pub s2_schedule: ScheduleKind,
    pub s3_schedule: ScheduleKind,
    pub freeze_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    /// 0 = unlimited; otherwise stop after this many optimizer steps.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            in_channels: 4,
            widths: vec![16, 32, 64, 128, 256],
            first_kernel: 3,
            dropout: 0.2,
            blocks_per_stage: 1,
            hidden: 128,
            lstm_layers: 2,
            zoneout: 0.15,
            recurrence: true,
            grid_az: 30,
            grid_el: 30,
            k_t: 5,
            n_per_class: 24,
            augment: 0.5,
            val_fraction: 0.1,
            minibatch: 16,
            window: 8,
            stride: 4,
            s1_epochs: 100,
            s2_epochs: 100,
            s3_epochs: 66,
            s1_lr: 1e-3,
            s2_lr: 1e-3,
            s3_lr: 1e-4,
            s1_schedule: ScheduleKind::Cyclical,
            s2_schedule: ScheduleKind::Cyclical,
            s3_schedule: ScheduleKind::Step,
            freeze_fraction: 0.25,
            patience: 10,
            seed: 42,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<TrainConfig, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        let mut cfg = TrainConfig::default();
        for (key, value) in table {
            cfg.apply(&key, &value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &toml::Value) -> Result<(), ConfigError> {
        match key {
            "in_channels" => self.in_channels = usize_of(key, v)?,
            "widths" => self.widths = usize_list(key, v)?,
            "first_kernel" => self.first_kernel = usize_of(key, v)?,
            "dropout" => self.dropout = f64_of(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = usize_of(key, v)?,
            "hidden" => self.hidden = usize_of(key, v)?,
            "lstm_layers" => self.lstm_layers = usize_of(key, v)?,
            "zoneout" => self.zoneout = f64_of(key, v)?,
            "recurrence" => self.recurrence = bool_of(key, v)?,
            "grid_az" => self.grid_az = usize_of(key, v)? as u32,
            "grid_el" => self.grid_el = usize_of(key, v)? as u32,
            "k_t" => self.k_t = usize_of(key, v)?,
            "n_per_class" => self.n_per_class = usize_of(key, v)?,
            "augment" => self.augment = f64_of(key, v)?,
            "val_fraction" => self.val_fraction = f64_of(key, v)?,
            "minibatch" => self.minibatch = usize_of(key, v)?,
            "window" => self.window = usize_of(key, v)?,
            "stride" => self.stride = usize_of(key, v)?,
            "s1_epochs" => self.s1_epochs = usize_of(key, v)?,
            "s2_epochs" => self.s2_epochs = usize_of(key, v)?,
            "s3_epochs" => self.s3_epochs = usize_of(key, v)?,
            "s1_lr" => self.s1_lr = f64_of(key, v)?,
            "s2_lr" => self.s2_lr = f64_of(key, v)?,
            "s3_lr" => self.s3_lr = f64_of(key, v)?,
            "s1_schedule" => self.s1_schedule = schedule_of(key, v)?,
            "s2_schedule" => self.s2_schedule = schedule_of(key, v)?,
            "s3_schedule" => self.s3_schedule = schedule_of(key, v)?,
            "freeze_fraction" => self.freeze_fraction = f64_of(key, v)?,
            "patience" => self.patience = usize_of(key, v)?,
            "seed" => self.seed = usize_of(key, v)? as u64,
            "max_steps" => self.max_steps = usize_of(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: self.in_channels,
                widths: self.widths.clone(),
                first_kernel: self.first_kernel,
                dropout_p: self.dropout,
                blocks_per_stage: self.blocks_per_stage,
            },
            hidden: self.hidden,
            lstm_layers: self.lstm_layers,
            zoneout: ZoneoutConfig {
                zeta_c: self.zoneout,
                zeta_h: self.zoneout,
            },
            classes: (360 / self.grid_az as usize) * (180 / self.grid_el as usize),
            recurrence: self.recurrence,
        }
    }

    pub fn epochs(&self, stage: u8) -> usize {
        match stage {
            1 => self.s1_epochs,
            2 => self.s2_epochs,
            _ => self.s3_epochs,
        }
    }

    pub fn base_lr(&self, stage: u8) -> f64 {
        match stage {
            1 => self.s1_lr,
            2 => self.s2_lr,
            _ => self.s3_lr,
        }
    }

    pub fn schedule(&self, stage: u8) -> ScheduleKind {
        match stage {
            1 => self.s1_schedule,
            2 => self.s2_schedule,
            _ => self.s3_schedule,
        }
    }

    /// Flat key=value echo for the run log.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        m.insert("in_channels".into(), self.in_channels.to_string());
        m.insert("widths".into(), widths.join(","));
        m.insert("first_kernel".into(), self.first_kernel.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("blocks_per_stage".into(), self.blocks_per_stage.to_string());
        m.insert("hidden".into(), self.hidden.to_string());
        m.insert("lstm_layers".into(), self.lstm_layers.to_string());
        m.insert("zoneout".into(), self.zoneout.to_string());
        m.insert("recurrence".into(), self.recurrence.to_string());
        m.insert("grid_az".into(), self.grid_az.to_string());
        m.insert("grid_el".into(), self.grid_el.to_string());
        m.insert("k_t".into(), self.k_t.to_string());
        m.insert("n_per_class".into(), self.n_per_class.to_string());
        m.insert("augment".into(), self.augment.to_string());
        m.insert("val_fraction".into(), self.val_fraction.to_string());
        m.insert("minibatch".into(), self.minibatch.to_string());
        m.insert("window".into(), self.window.to_string());
        m.insert("stride".into(), self.stride.to_string());
        for (k, v) in [
            ("s1_epochs", self.s1_epochs),
            ("s2_epochs", self.s2_epochs),
            ("s3_epochs", self.s3_epochs),
        ] {
            m.insert(k.into(), v.to_string());
        }
        for (k, v) in [("s1_lr", self.s1_lr), ("s2_lr", self.s2_lr), ("s3_lr", self.s3_lr)] {
            m.insert(k.into(), v.to_string());
        }
        m.insert("freeze_fraction".into(), self.freeze_fraction.to_string());
        m.insert("patience".into(), self.patience.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("max_steps".into(), self.max_steps.to_string());
        m
    }
}

/// Dataset generation knobs: the benchmark dataset is a fixed matrix of
/// guidance x tumbling x approach combinations split into train and test.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub fps: f64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Per-sequence durations, cycled.
    pub durations: Vec<f64>,
    pub glare: f64,
    pub noise_rgb: f64,
    pub noise_thermal: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 64,
            height: 64,
            focal: 64.0,
            fps: 10.0,
            train_sequences: 6,
            test_sequences: 2,
            durations: vec![60.0],
            glare: 1.0,
            noise_rgb: 0.01,
            noise_thermal: 0.01,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn from_toml_str(text: &str) -> Result<GenConfig, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        let mut cfg = GenConfig::default();
        for (key, value) in table {
            match key.as_str() {
                "width" => cfg.width = usize_of(&key, &value)?,
                "height" => cfg.height = usize_of(&key, &value)?,
                "focal" => cfg.focal = f64_of(&key, &value)?,
                "fps" => cfg.fps = f64_of(&key, &value)?,
                "train_sequences" => cfg.train_sequences = usize_of(&key, &value)?,
                "test_sequences" => cfg.test_sequences = usize_of(&key, &value)?,
                "durations" => cfg.durations = f64_list(&key, &value)?,
                "glare" => cfg.glare = f64_of(&key, &value)?,
                "noise_rgb" => cfg.noise_rgb = f64_of(&key, &value)?,
                "noise_thermal" => cfg.noise_thermal = f64_of(&key, &value)?,
                "seed" => cfg.seed = usize_of(&key, &value)? as u64,
                _ => return Err(ConfigError::UnknownKey(key)),
            }
        }
        Ok(cfg)
    }
}

fn f64_of(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "expected a number")),
    }
}

fn usize_of(key: &str, v: &toml::Value) -> Result<usize, ConfigError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "expected a non-negative integer")),
    }
}

fn bool_of(key: &str, v: &toml::Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| bad(key, "expected a boolean"))
}

fn usize_list(key: &str, v: &toml::Value) -> Result<Vec<usize>, ConfigError> {
    let arr = v.as_array().ok_or_else(|| bad(key, "expected an array"))?;
    arr.iter()
        .map(|e| usize_of(key, e))
        .collect::<Result<Vec<_>, _>>()
}

fn f64_list(key: &str, v: &toml::Value) -> Result<Vec<f64>, ConfigError> {
    let arr = v.as_array().ok_or_else(|| bad(key, "expected an array"))?;
    arr.iter().map(|e| f64_of(key, e)).collect()
}

fn schedule_of(key: &str, v: &toml::Value) -> Result<ScheduleKind, ConfigError> {
    match v.as_str() {
        Some("cyclical") => Ok(ScheduleKind::Cyclical),
        Some("step") => Ok(ScheduleKind::Step),
        _ => Err(bad(key, "expected \"cyclical\" or \"step\"")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_override() {
        let cfg = TrainConfig::from_toml_str(
            "hidden = 96\nwidths = [8, 16, 32]\ns3_schedule = \"step\"\nseed = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.hidden, 96);
        assert_eq!(cfg.widths, vec![8, 16, 32]);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.s1_epochs, 100, "untouched default");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            TrainConfig::from_toml_str("hidden_sizes = 4\n"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            GenConfig::from_toml_str("durationz = [60]\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn paper_scale_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.window, 8);
        assert_eq!(cfg.stride, 4);
        assert_eq!(cfg.zoneout, 0.15);
        assert_eq!(cfg.dropout, 0.2);
        assert_eq!(cfg.s1_epochs, 100);
        assert_eq!(cfg.s3_epochs, 66);
        assert_eq!(cfg.model_config().classes, 72);
    }

    #[test]
    fn echo_is_flat_and_complete_enough() {
        let cfg = TrainConfig::default();
        let echo = cfg.echo();
        assert_eq!(echo["window"], "8");
        assert_eq!(echo["widths"], "16,32,64,128,256");
    }
}

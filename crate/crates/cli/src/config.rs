//! Run configuration: a flat `key = value` UTF-8 file with `#` comments.
//! Every key has a default, unknown keys are rejected, and all values are
//! range-checked at parse time. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use icnn_core::net::IcnnConfig;
use icnn_core::synth::SynthSpec;
use icnn_core::train::{AugmentSpec, TrainConfig};
use icnn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // architecture
    pub num_columns: usize,
    pub interlink_rounds: usize,
    pub maps_per_column: Vec<usize>,
    pub kernel_size: usize,
    pub final_kernel_size: usize,
    pub input_channels: usize,
    // training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub eval_every: usize,
    pub lr_decay: f64,
    pub patience: usize,
    // augmentation
    pub max_rotation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_shift: f64,
    // synthetic data
    pub synth_count: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub image_size: usize,
    pub pos_jitter: f64,
    pub size_jitter: f64,
    pub rotation_jitter: f64,
    pub color_jitter: f64,
    pub noise: f64,
    // paths and modes
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Stage-2 patch centers: "gt" (ground-truth label medians) or
    /// "predicted" (stage-1 localization).
    pub centers_mode: String,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_columns: 4,
            interlink_rounds: 3,
            maps_per_column: vec![8, 8, 8, 8],
            kernel_size: 5,
            final_kernel_size: 9,
            input_channels: 3,
            learning_rate: 0.05,
            batch_size: 1,
            max_epochs: 50,
            seed: 0,
            augment: true,
            eval_every: 1,
            lr_decay: 1.0,
            patience: 10,
            max_rotation: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_shift: 10.0,
            synth_count: 260,
            synth_val: 30,
            synth_test: 30,
            image_size: 256,
            pos_jitter: 5.0,
            size_jitter: 0.12,
            rotation_jitter: 3.0,
            color_jitter: 0.04,
            noise: 0.02,
            data_dir: PathBuf::from("data"),
            model_dir: PathBuf::from("models"),
            out_dir: PathBuf::from("out"),
            centers_mode: "gt".into(),
            threads: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected a boolean, got '{value}'"))),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line {}: expected 'key = value'", idx + 1))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_columns" => self.num_columns = parse(key, value)?,
            "interlink_rounds" => self.interlink_rounds = parse(key, value)?,
            "maps_per_column" => {
                let maps: Result<Vec<usize>> =
                    value.split(',').map(|v| parse(key, v.trim())).collect();
                self.maps_per_column = maps?;
            }
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "final_kernel_size" => self.final_kernel_size = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_rotation" => self.max_rotation = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "max_shift" => self.max_shift = parse(key, value)?,
            "synth_count" => self.synth_count = parse(key, value)?,
            "synth_val" => self.synth_val = parse(key, value)?,
            "synth_test" => self.synth_test = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "pos_jitter" => self.pos_jitter = parse(key, value)?,
            "size_jitter" => self.size_jitter = parse(key, value)?,
            "rotation_jitter" => self.rotation_jitter = parse(key, value)?,
            "color_jitter" => self.color_jitter = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "model_dir" => self.model_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "centers_mode" => {
                if value != "gt" && value != "predicted" {
                    return Err(Error::Config(format!(
                        "key 'centers_mode': expected 'gt' or 'predicted', got '{value}'"
                    )));
                }
                self.centers_mode = value.into();
            }
            "threads" => self.threads = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config(9).validate()?;
        self.train_config().validate()?;
        self.augment_spec().validate()?;
        self.synth_spec().validate()?;
        Ok(())
    }

    pub fn net_config(&self, num_labels: usize) -> IcnnConfig {
        IcnnConfig {
            num_columns: self.num_columns,
            num_labels,
            interlink_rounds: self.interlink_rounds,
            maps_per_column: self.maps_per_column.clone(),
            kernel_size: self.kernel_size,
            final_kernel_size: self.final_kernel_size,
            input_channels: self.input_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            augment: self.augment,
            eval_every: self.eval_every,
            lr_decay: self.lr_decay,
            patience: self.patience,
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            max_rotation: self.max_rotation,
            scale_range: (self.scale_min, self.scale_max),
            max_shift: self.max_shift,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            count: self.synth_count,
            val_count: self.synth_val,
            test_count: self.synth_test,
            image_size: self.image_size,
            pos_jitter: self.pos_jitter,
            size_jitter: self.size_jitter,
            rotation_jitter: self.rotation_jitter,
            color_jitter: self.color_jitter,
            noise: self.noise,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.txt")
    }

    /// Canonical `key = value` rendering: what the run log records.
    pub fn canonical(&self) -> String {
        let maps: Vec<String> = self.maps_per_column.iter().map(|m| m.to_string()).collect();
        format!(
            "num_columns = {}\ninterlink_rounds = {}\nmaps_per_column = {}\nkernel_size = {}\n\
             final_kernel_size = {}\ninput_channels = {}\nlearning_rate = {}\nbatch_size = {}\n\
             max_epochs = {}\nseed = {}\naugment = {}\neval_every = {}\nlr_decay = {}\n\
             patience = {}\nmax_rotation = {}\nscale_min = {}\nscale_max = {}\nmax_shift = {}\n\
             synth_count = {}\nsynth_val = {}\nsynth_test = {}\nimage_size = {}\n\
             pos_jitter = {}\nsize_jitter = {}\nrotation_jitter = {}\ncolor_jitter = {}\n\
             noise = {}\ndata_dir = {}\nmodel_dir = {}\nout_dir = {}\ncenters_mode = {}\n\
             threads = {}\n",
            self.num_columns,
            self.interlink_rounds,
            maps.join(","),
            self.kernel_size,
            self.final_kernel_size,
            self.input_channels,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.seed,
            self.augment,
            self.eval_every,
            self.lr_decay,
            self.patience,
            self.max_rotation,
            self.scale_min,
            self.scale_max,
            self.max_shift,
            self.synth_count,
            self.synth_val,
            self.synth_test,
            self.image_size,
            self.pos_jitter,
            self.size_jitter,
            self.rotation_jitter,
            self.color_jitter,
            self.noise,
            self.data_dir.display(),
            self.model_dir.display(),
            self.out_dir.display(),
            self.centers_mode,
            self.threads,
        )
    }

    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.canonical().as_bytes())
    }
}

//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers and `#` comments, chosen so any language can parse it
//! without dependencies. `parse` then `serialize` then `parse` is the
//! identity.
//!
//! Unset keys take documented defaults: the optimizer block defaults to the
//! standard CIFAR protocol (lr 0.1, momentum 0.9, weight decay 5e-4, decay
//! 0.2 every 15 epochs, 50 epochs, batch 128) while the architecture and
//! dataset default to the quick desk-scale setup (width 16, 4 modules,
//! synthetic task).

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::net::AuxKind;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sync,
    Sequential,
    Pipelined,
    Async,
    AsyncQuantized,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Sequential => "sequential",
            Mode::Pipelined => "pipelined",
            Mode::Async => "async",
            Mode::AsyncQuantized => "async-quantized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sync" => Some(Mode::Sync),
            "sequential" => Some(Mode::Sequential),
            "pipelined" => Some(Mode::Pipelined),
            "async" => Some(Mode::Async),
            "async-quantized" => Some(Mode::AsyncQuantized),
            _ => None,
        }
    }
}

/// Buffer capacity unit: batch counts are used directly; sample counts are
/// converted with ceil(M / batch_size), and the conversion is echoed in the
/// run summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferUnit {
    Samples,
    Batches,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // [run]
    pub mode: Mode,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub eval_per_epoch: u32,
    /// 32 for training precision, 64 for verification runs.
    pub precision: u32,
    // [architecture]
    pub width: usize,
    pub modules: usize,
    pub aux: AuxKind,
    // [optimizer]
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_period: u32,
    // [delay]
    pub slow_module: Option<usize>,
    pub slowdown: f64,
    pub pmf: Option<Vec<f64>>,
    // [buffer]
    pub buffer_capacity: u64,
    pub buffer_unit: BufferUnit,
    /// Bounded-channel capacity for the pipelined mode, in batches.
    pub channel_capacity: usize,
    // [quantizer]
    pub atoms: u64,
    pub groups: usize,
    pub ema_decay: f64,
    /// Decoder codebooks refresh every `sync_period` iterations unless a
    /// fractional `sync_rate` is given instead.
    pub sync_period: u64,
    pub sync_rate: Option<f64>,
    // [dataset]
    pub dataset: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Sync,
            seed: 0,
            epochs: 50,
            batch_size: 128,
            eval_per_epoch: 2,
            precision: 32,
            width: 16,
            modules: 4,
            aux: AuxKind::MlpAux,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_factor: 0.2,
            decay_period: 15,
            slow_module: None,
            slowdown: 1.0,
            pmf: None,
            buffer_capacity: 2,
            buffer_unit: BufferUnit::Batches,
            channel_capacity: 2,
            atoms: 256,
            groups: 32,
            ema_decay: 0.99,
            sync_period: 1,
            sync_rate: None,
            dataset: DatasetSpec::SyntheticGaussians {
                classes: 4,
                channels: 1,
                spatial: 8,
                train_n: 512,
                test_n: 256,
                noise: 1.0,
            },
        }
    }
}

impl ExperimentConfig {
    /// Codebook synchronization fraction used in the bandwidth accounting.
    pub fn sync_alpha(&self) -> f64 {
        match self.sync_rate {
            Some(alpha) => alpha,
            None => {
                if self.sync_period == 0 {
                    0.0
                } else {
                    1.0 / self.sync_period as f64
                }
            }
        }
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "eval_per_epoch = {}", self.eval_per_epoch);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "\n[architecture]");
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "modules = {}", self.modules);
        let _ = writeln!(s, "aux = {}", self.aux.name());
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "decay_factor = {}", self.decay_factor);
        let _ = writeln!(s, "decay_period = {}", self.decay_period);
        let _ = writeln!(s, "\n[delay]");
        if let Some(j) = self.slow_module {
            let _ = writeln!(s, "slow_module = {j}");
        }
        let _ = writeln!(s, "slowdown = {}", self.slowdown);
        if let Some(pmf) = &self.pmf {
            let joined: Vec<String> = pmf.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(s, "pmf = {}", joined.join(","));
        }
        let _ = writeln!(s, "\n[buffer]");
        let _ = writeln!(s, "capacity = {}", self.buffer_capacity);
        let _ = writeln!(
            s,
            "unit = {}",
            match self.buffer_unit {
                BufferUnit::Samples => "samples",
                BufferUnit::Batches => "batches",
            }
        );
        let _ = writeln!(s, "channel_capacity = {}", self.channel_capacity);
        let _ = writeln!(s, "\n[quantizer]");
        let _ = writeln!(s, "atoms = {}", self.atoms);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "sync_period = {}", self.sync_period);
        if let Some(alpha) = self.sync_rate {
            let _ = writeln!(s, "sync_rate = {alpha}");
        }
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "kind = {}", self.dataset.kind_name());
        match &self.dataset {
            DatasetSpec::SyntheticGaussians {
                classes,
                channels,
                spatial,
                train_n,
                test_n,
                noise,
            } => {
                let _ = writeln!(s, "classes = {classes}");
                let _ = writeln!(s, "channels = {channels}");
                let _ = writeln!(s, "spatial = {spatial}");
                let _ = writeln!(s, "train_n = {train_n}");
                let _ = writeln!(s, "test_n = {test_n}");
                let _ = writeln!(s, "noise = {noise}");
            }
            DatasetSpec::SyntheticSpirals {
                classes,
                spatial,
                train_n,
                test_n,
                noise,
            } => {
                let _ = writeln!(s, "classes = {classes}");
                let _ = writeln!(s, "spatial = {spatial}");
                let _ = writeln!(s, "train_n = {train_n}");
                let _ = writeln!(s, "test_n = {test_n}");
                let _ = writeln!(s, "noise = {noise}");
            }
            DatasetSpec::Cifar10Binary {
                train_paths,
                test_path,
                subset_n,
            } => {
                let joined: Vec<String> = train_paths
                    .iter()
                    .map(|p| p.to_string_lossy().into_owned())
                    .collect();
                let _ = writeln!(s, "train_paths = {}", joined.join(","));
                if let Some(p) = test_path {
                    let _ = writeln!(s, "test_path = {}", p.to_string_lossy());
                }
                let _ = writeln!(s, "subset_n = {subset_n}");
            }
            DatasetSpec::IdxImages {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(s, "train_images = {}", train_images.to_string_lossy());
                let _ = writeln!(s, "train_labels = {}", train_labels.to_string_lossy());
                if let Some(p) = test_images {
                    let _ = writeln!(s, "test_images = {}", p.to_string_lossy());
                }
                if let Some(p) = test_labels {
                    let _ = writeln!(s, "test_labels = {}", p.to_string_lossy());
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let mut dataset_keys: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Config {
                        line: lineno,
                        message: format!("malformed section header '{line}'"),
                    });
                }
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "run" | "architecture" | "optimizer" | "delay" | "buffer" | "quantizer"
                    | "dataset" => {}
                    other => {
                        return Err(Error::Config {
                            line: lineno,
                            message: format!("unknown section '[{other}]'"),
                        })
                    }
                }
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config {
                    line: lineno,
                    message: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if section == "dataset" {
                dataset_keys.insert(key.to_string(), (value.to_string(), lineno));
                continue;
            }
            cfg.apply(&section, key, value, lineno)?;
        }
        if !dataset_keys.is_empty() {
            cfg.dataset = parse_dataset(&mut dataset_keys)?;
            if let Some((key, (_, lineno))) = dataset_keys.iter().next() {
                return Err(Error::Config {
                    line: *lineno,
                    message: format!("unknown dataset key '{key}'"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let bad_key = || Error::Config {
            line,
            message: format!("unknown key '{key}' in section [{section}]"),
        };
        let bad_value = |what: &str| Error::Config {
            line,
            message: format!("invalid {what} '{value}' for key '{key}'"),
        };
        match (section, key) {
            ("run", "mode") => {
                self.mode = Mode::parse(value).ok_or_else(|| bad_value("mode"))?;
            }
            ("run", "seed") => self.seed = value.parse().map_err(|_| bad_value("integer"))?,
            ("run", "epochs") => self.epochs = value.parse().map_err(|_| bad_value("integer"))?,
            ("run", "batch_size") => {
                self.batch_size = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("run", "eval_per_epoch") => {
                self.eval_per_epoch = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("run", "precision") => {
                self.precision = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("architecture", "width") => {
                self.width = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("architecture", "modules") => {
                self.modules = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("architecture", "aux") => {
                self.aux = AuxKind::parse(value).map_err(|_| bad_value("aux kind"))?
            }
            ("optimizer", "lr") => self.lr = value.parse().map_err(|_| bad_value("number"))?,
            ("optimizer", "momentum") => {
                self.momentum = value.parse().map_err(|_| bad_value("number"))?
            }
            ("optimizer", "weight_decay") => {
                self.weight_decay = value.parse().map_err(|_| bad_value("number"))?
            }
            ("optimizer", "decay_factor") => {
                self.decay_factor = value.parse().map_err(|_| bad_value("number"))?
            }
            ("optimizer", "decay_period") => {
                self.decay_period = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("delay", "slow_module") => {
                self.slow_module = Some(value.parse().map_err(|_| bad_value("integer"))?)
            }
            ("delay", "slowdown") => {
                self.slowdown = value.parse().map_err(|_| bad_value("number"))?
            }
            ("delay", "pmf") => {
                let pmf: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                self.pmf = Some(pmf.map_err(|_| bad_value("number list"))?);
            }
            ("buffer", "capacity") => {
                self.buffer_capacity = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("buffer", "unit") => {
                self.buffer_unit = match value {
                    "samples" => BufferUnit::Samples,
                    "batches" => BufferUnit::Batches,
                    _ => return Err(bad_value("unit (samples | batches)")),
                }
            }
            ("buffer", "channel_capacity") => {
                self.channel_capacity = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("quantizer", "atoms") => self.atoms = value.parse().map_err(|_| bad_value("integer"))?,
            ("quantizer", "groups") => {
                self.groups = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("quantizer", "ema_decay") => {
                self.ema_decay = value.parse().map_err(|_| bad_value("number"))?
            }
            ("quantizer", "sync_period") => {
                self.sync_period = value.parse().map_err(|_| bad_value("integer"))?
            }
            ("quantizer", "sync_rate") => {
                self.sync_rate = Some(value.parse().map_err(|_| bad_value("number"))?)
            }
            _ => return Err(bad_key()),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let check = |cond: bool, message: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config {
                    line: 0,
                    message: message.to_string(),
                })
            }
        };
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(self.epochs > 0, "epochs must be positive")?;
        check(
            self.precision == 32 || self.precision == 64,
            "precision must be 32 or 64",
        )?;
        check(self.modules >= 1, "modules must be at least 1")?;
        check(self.slowdown > 0.0, "slowdown must be positive")?;
        if let Some(pmf) = &self.pmf {
            check(pmf.len() == self.modules, "pmf length must equal modules")?;
            check(pmf.iter().all(|p| *p > 0.0), "pmf entries must be positive")?;
            let sum: f64 = pmf.iter().sum();
            check((sum - 1.0).abs() < 1e-9, "pmf must sum to 1")?;
        }
        if let Some(j) = self.slow_module {
            check(
                j >= 1 && j <= self.modules,
                "slow_module must name a module (1-based)",
            )?;
        }
        if let Some(alpha) = self.sync_rate {
            check((0.0..=1.0).contains(&alpha), "sync_rate must lie in [0, 1]")?;
        }
        check(self.buffer_capacity > 0, "buffer capacity must be positive")?;
        check(self.atoms > 0, "quantizer needs at least one atom")?;
        check(self.groups > 0, "quantizer needs at least one group")?;
        Ok(())
    }

    /// Buffer capacity in batches, with the sample-count conversion applied.
    pub fn buffer_batches(&self) -> usize {
        match self.buffer_unit {
            BufferUnit::Batches => self.buffer_capacity as usize,
            BufferUnit::Samples => {
                (self.buffer_capacity as usize).div_ceil(self.batch_size).max(1)
            }
        }
    }
}

fn parse_dataset(keys: &mut BTreeMap<String, (String, usize)>) -> Result<DatasetSpec> {
    let mut grab = |key: &str| keys.remove(key).map(|(v, _)| v);
    let kind = grab("kind").ok_or(Error::Config {
        line: 0,
        message: "dataset section needs a 'kind' key".into(),
    })?;
    let parse_usize = |v: Option<String>, default: usize, what: &str| -> Result<usize> {
        match v {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::Config {
                line: 0,
                message: format!("invalid integer '{s}' for dataset key '{what}'"),
            }),
        }
    };
    let parse_f64 = |v: Option<String>, default: f64, what: &str| -> Result<f64> {
        match v {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::Config {
                line: 0,
                message: format!("invalid number '{s}' for dataset key '{what}'"),
            }),
        }
    };
    match kind.as_str() {
        "synthetic-gaussians" => Ok(DatasetSpec::SyntheticGaussians {
            classes: parse_usize(grab("classes"), 4, "classes")?,
            channels: parse_usize(grab("channels"), 1, "channels")?,
            spatial: parse_usize(grab("spatial"), 8, "spatial")?,
            train_n: parse_usize(grab("train_n"), 512, "train_n")?,
            test_n: parse_usize(grab("test_n"), 256, "test_n")?,
            noise: parse_f64(grab("noise"), 1.0, "noise")?,
        }),
        "synthetic-spirals" => Ok(DatasetSpec::SyntheticSpirals {
            classes: parse_usize(grab("classes"), 3, "classes")?,
            spatial: parse_usize(grab("spatial"), 8, "spatial")?,
            train_n: parse_usize(grab("train_n"), 512, "train_n")?,
            test_n: parse_usize(grab("test_n"), 256, "test_n")?,
            noise: parse_f64(grab("noise"), 1.0, "noise")?,
        }),
        "cifar10-binary" => {
            let train = grab("train_paths").ok_or(Error::Config {
                line: 0,
                message: "cifar10-binary needs 'train_paths'".into(),
            })?;
            Ok(DatasetSpec::Cifar10Binary {
                train_paths: train.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                test_path: grab("test_path").map(PathBuf::from),
                subset_n: parse_usize(grab("subset_n"), 0, "subset_n")?,
            })
        }
        "idx-images" => {
            let images = grab("train_images").ok_or(Error::Config {
                line: 0,
                message: "idx-images needs 'train_images'".into(),
            })?;
            let labels = grab("train_labels").ok_or(Error::Config {
                line: 0,
                message: "idx-images needs 'train_labels'".into(),
            })?;
            Ok(DatasetSpec::IdxImages {
                train_images: PathBuf::from(images),
                train_labels: PathBuf::from(labels),
                test_images: grab("test_images").map(PathBuf::from),
                test_labels: grab("test_labels").map(PathBuf::from),
            })
        }
        other => Err(Error::Config {
            line: 0,
            message: format!("unknown dataset kind '{other}'"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity_for_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn roundtrip_is_identity_for_async_quantized_setup() {
        let cfg = ExperimentConfig {
            mode: Mode::AsyncQuantized,
            seed: 99,
            epochs: 10,
            batch_size: 16,
            precision: 64,
            slow_module: Some(2),
            slowdown: 1.2,
            pmf: Some(vec![0.25, 0.25, 0.25, 0.25]),
            atoms: 4,
            groups: 4,
            sync_period: 16,
            sync_rate: Some(0.0625),
            buffer_unit: BufferUnit::Samples,
            buffer_capacity: 50,
            dataset: DatasetSpec::SyntheticSpirals {
                classes: 3,
                spatial: 8,
                train_n: 300,
                test_n: 60,
                noise: 0.5,
            },
            ..Default::default()
        };
        let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_protocol_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lr, 0.1);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.decay_factor, 0.2);
        assert_eq!(cfg.decay_period, 15);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::parse("[run]\nmodee = sync\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2") && msg.contains("modee"), "{msg}");

        let err = ExperimentConfig::parse("[nonsense]\n").unwrap_err();
        assert!(format!("{err}").contains("[nonsense]"));

        let err = ExperimentConfig::parse("[run]\nmode sync\n").unwrap_err();
        assert!(format!("{err}").contains("key = value"));
    }

    #[test]
    fn sample_capacity_converts_with_ceiling() {
        let cfg = ExperimentConfig {
            buffer_unit: BufferUnit::Samples,
            buffer_capacity: 50,
            batch_size: 16,
            ..Default::default()
        };
        assert_eq!(cfg.buffer_batches(), 4);
        let cfg = ExperimentConfig {
            buffer_unit: BufferUnit::Batches,
            buffer_capacity: 2,
            ..Default::default()
        };
        assert_eq!(cfg.buffer_batches(), 2);
    }

    #[test]
    fn pmf_validation() {
        let text = "[delay]\npmf = 0.5,0.5\n";
        // Default modules = 4, so a 2-entry pmf fails validation.
        assert!(ExperimentConfig::parse(text).is_err());
        let text = "[architecture]\nmodules = 2\n\n[delay]\npmf = 0.5,0.5\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.pmf, Some(vec![0.5, 0.5]));
    }

    #[test]
    fn sync_alpha_derives_from_period_or_rate() {
        let mut cfg = ExperimentConfig::default();
        cfg.sync_period = 16;
        assert!((cfg.sync_alpha() - 0.0625).abs() < 1e-15);
        cfg.sync_rate = Some(0.5);
        assert_eq!(cfg.sync_alpha(), 0.5);
    }
}

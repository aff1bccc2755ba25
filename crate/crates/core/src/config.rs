//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. A
//! single `seed` drives every random stream (sampling, init, shuffling,
//! splitting).
//!
//! ```text
//! seed = 7
//! cube_edge = 48
//! target_spacing = 1.0, 1.0, 1.0   # or a single value for all axes
//! hu_window = -1000, 400
//! epochs = 10
//! width_divisor = 4
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::preprocess::SamplerConfig;
use crate::train::TrainConfig;

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "cube_edge",
    "target_spacing",
    "hu_window",
    "positives_per_nodule",
    "negatives_per_scan",
    "batch_size",
    "epochs",
    "lr",
    "momentum",
    "train_scans",
    "val_scans",
    "test_scans",
    "checkpoint_dir",
    "metrics_path",
    "record_wall_time",
    "width_divisor",
    "batchnorm",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Divides every layer width of the canonical network (1 = canonical).
    pub width_divisor: usize,
    pub batchnorm: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            width_divisor: 1,
            batchnorm: false,
        }
    }
}

impl PipelineConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.sampler.seed = seed;
        self.train.seed = seed;
    }

    /// The canonical layer sequence at this width and cube edge.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.width_divisor == 0 || 32 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width_divisor must divide 32, got {}",
                self.width_divisor
            )));
        }
        let mut spec = NetworkSpec::canonical_scaled(self.width_divisor);
        spec.input_edge = self.sampler.cube_edge;
        spec.batchnorm = self.batchnorm;
        spec.layer_table()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.train.validate()?;
        self.network_spec().map(|_| ())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "cube_edge" => self.sampler.cube_edge = parse(key, v)?,
            "target_spacing" => {
                let xs: Vec<f64> = parse_list(key, v)?;
                self.sampler.target_spacing = match xs[..] {
                    [s] => [s; 3],
                    [x, y, z] => [x, y, z],
                    _ => return Err(bad(key, v, "expected 1 or 3 values")),
                };
            }
            "hu_window" => {
                let xs: Vec<f64> = parse_list(key, v)?;
                self.sampler.hu_window = match xs[..] {
                    [lo, hi] => (lo, hi),
                    _ => return Err(bad(key, v, "expected low, high")),
                };
            }
            "positives_per_nodule" => self.sampler.positives_per_nodule = parse(key, v)?,
            "negatives_per_scan" => self.sampler.negatives_per_scan = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "train_scans" => self.train.train_scans = parse(key, v)?,
            "val_scans" => self.train.val_scans = parse(key, v)?,
            "test_scans" => self.train.test_scans = parse(key, v)?,
            "checkpoint_dir" => self.train.checkpoint_dir = Some(PathBuf::from(v)),
            "metrics_path" => self.train.metrics_path = Some(PathBuf::from(v)),
            "record_wall_time" => self.train.record_wall_time = parse(key, v)?,
            "width_divisor" => self.width_divisor = parse(key, v)?,
            "batchnorm" => self.batchnorm = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "invalid value"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

/// Parses config text on top of the defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                i + 1
            ))
        })?;
        config
            .set(key.trim(), value)
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let c = parse_config(
            "# smoke run\nseed = 7\ntarget_spacing = 0.5\nhu_window = -900, 300\n\
             epochs=3 # inline\nwidth_divisor = 4\nbatchnorm = true\nmetrics_path = out/m.csv\n\
             record_wall_time = false\n",
        )
        .unwrap();
        assert_eq!(c.sampler.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.sampler.target_spacing, [0.5; 3]);
        assert_eq!(c.sampler.hu_window, (-900.0, 300.0));
        assert_eq!(c.train.epochs, 3);
        assert!(c.batchnorm && !c.train.record_wall_time);
        assert_eq!(c.train.metrics_path, Some(PathBuf::from("out/m.csv")));
        assert_eq!(c.network_spec().unwrap(), {
            let mut s = NetworkSpec::canonical_scaled(4);
            s.batchnorm = true;
            s
        });
    }

    #[test]
    fn empty_text_is_defaults() {
        assert_eq!(parse_config("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "learning_rate = 0.1",
            "epochs = ten",
            "just words",
            "batch_size = 0",
            "hu_window = 400, -1000",
            "width_divisor = 3",
            "target_spacing = 1, 2",
            "cube_edge = 40",
        ] {
            assert!(
                matches!(
                    parse_config(text),
                    Err(Error::Config(_)) | Err(Error::ShapeIncompatible(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn every_known_key_is_accepted() {
        let mut c = PipelineConfig::default();
        let values = [
            "1",
            "48",
            "1",
            "-1000,400",
            "1",
            "1",
            "2",
            "1",
            "0.003",
            "0.9",
            "720",
            "80",
            "88",
            "ck",
            "m.csv",
            "true",
            "1",
            "false",
        ];
        for (k, v) in KNOWN_KEYS.iter().zip(values) {
            c.set(k, v).unwrap();
        }
    }
}

//! Flat `key = value` run files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Any key may hold a comma-separated list; `train` requires single values
//! and `sweep` takes the cross product of the grid keys (`mode`, `stages`,
//! `fw_bits`, `bw_bits`, `buffer_bits`, `seed`).
//!
//! | key | values | default |
//! |-----|--------|---------|
//! | `mode` | `fp32`, `directq`, `aqsgd` | `aqsgd` |
//! | `stages` | integer ≥ 2 | `2` |
//! | `scheme` | `range`, `l2` | `range` |
//! | `fw_bits`, `bw_bits` | 1..=16 | `4`, `8` |
//! | `buffer_bits` | `full` or 2..=16 | `full` |
//! | `lr` | non-negative float or `theorem` | `0.05` |
//! | `epochs` | integer | `10` |
//! | `steps` | integer, overrides `epochs` | unset |
//! | `seed` | integer | `0` |
//! | `dataset` | `regression-mlp`, `classification-2d`, `toy-lq` | `regression-mlp` |
//! | `samples` | integer | `256` |
//! | `data_seed` | integer | same as `seed` |
//! | `sampling` | `shuffle`, `uniform` | `shuffle` |
//! | `order` | `simultaneous`, `sequential` | `simultaneous` |
//! | `execution` | `reference`, `workers` | `reference` |
//! | `checkpoint_every` | integer, 0 disables | `0` |
//! | `analysis` | `true`, `false` | `false` |

use std::collections::BTreeMap;
use std::fmt;

use aqsgd_core::protocol::{
    BufferPrecision, Execution, LearningRate, Mode, Sampling, TrainConfig, UpdateOrder,
};
use aqsgd_core::quantize::{QuantizerSpec, Scheme};
use serde::{Deserialize, Serialize};

pub const KEYS: [&str; 18] = [
    "mode",
    "stages",
    "scheme",
    "fw_bits",
    "bw_bits",
    "buffer_bits",
    "lr",
    "epochs",
    "steps",
    "seed",
    "dataset",
    "samples",
    "data_seed",
    "sampling",
    "order",
    "execution",
    "checkpoint_every",
    "analysis",
];

pub const GRID_KEYS: [&str; 6] = ["mode", "stages", "fw_bits", "bw_bits", "buffer_bits", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Raw settings, each a list of one or more strings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(BTreeMap<String, Vec<String>>);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", n + 1));
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return err(format!("line {}: unknown key `{key}`", n + 1));
            }
            if map.insert(key.to_string(), split_list(value)).is_some() {
                return err(format!("line {}: `{key}` given twice", n + 1));
            }
        }
        Ok(Self(map))
    }

    /// Replace `key` with the values in `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return err(format!("unknown key `{key}`"));
        }
        self.0.insert(key.to_string(), split_list(value));
        Ok(())
    }

    fn list(&self, key: &str) -> Option<&[String]> {
        self.0.get(key).map(Vec::as_slice)
    }

    fn single(&self, key: &str) -> Result<Option<&str>> {
        match self.list(key) {
            None => Ok(None),
            Some([v]) => Ok(Some(v.as_str())),
            Some(_) => err(format!("`{key}` must have a single value here")),
        }
    }

    /// Values of a grid axis, or the default.
    fn axis(&self, key: &str, default: &str) -> Vec<String> {
        self.list(key)
            .map(<[String]>::to_vec)
            .unwrap_or_else(|| vec![default.to_string()])
    }

    /// Every combination of the grid axes, in row-major order of
    /// [`GRID_KEYS`] with `seed` varying fastest.
    pub fn expand(&self) -> Vec<RawConfig> {
        let mut out = vec![self.clone()];
        for key in GRID_KEYS {
            let Some(values) = self.list(key) else { continue };
            out = out
                .into_iter()
                .flat_map(|base| {
                    values.iter().map(move |v| {
                        let mut c = base.clone();
                        c.0.insert(key.to_string(), vec![v.clone()]);
                        c
                    })
                })
                .collect();
        }
        out
    }

    pub fn seeds(&self) -> Vec<String> {
        self.axis("seed", "0")
    }
}

fn split_list(value: &str) -> Vec<String> {
    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ConfigError(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

/// Dataset part of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub samples: usize,
    pub seed: u64,
}

/// A fully resolved single run. A train manifest deserializes into this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
}

impl RunSpec {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let get = |k: &str| raw.single(k);
        let mode = match get("mode")? {
            Some(v) => Mode::parse(v).map_err(|e| ConfigError(e.to_string()))?,
            None => Mode::AqSgd,
        };
        let stages: usize = get("stages")?.map_or(Ok(2), |v| parse_num("stages", v))?;
        let scheme = match get("scheme")? {
            None | Some("range") => Scheme::RangeUniformStochastic,
            Some("l2") => Scheme::L2StochasticRound,
            Some(other) => return err(format!("`scheme`: expected range or l2, got `{other}`")),
        };
        let bits = |k: &str, d: u8| -> Result<QuantizerSpec> {
            let b: u8 = get(k)?.map_or(Ok(d), |v| parse_num(k, v))?;
            QuantizerSpec::new(scheme, b).map_err(|e| ConfigError(format!("`{k}`: {e}")))
        };
        let mut cfg = TrainConfig::new(mode, stages).with_quantizers(bits("fw_bits", 4)?, bits("bw_bits", 8)?);
        if let Some(v) = get("buffer_bits")? {
            cfg.buffer = BufferPrecision::parse(v).map_err(|e| ConfigError(e.to_string()))?;
        }
        cfg.lr = match get("lr")? {
            None => LearningRate::Fixed(0.05),
            Some("theorem") => LearningRate::Theorem,
            Some(v) => LearningRate::Fixed(parse_num("lr", v)?),
        };
        if let Some(v) = get("epochs")? {
            cfg.epochs = parse_num("epochs", v)?;
        }
        if let Some(v) = get("steps")? {
            cfg.steps = Some(parse_num("steps", v)?);
        }
        cfg.seed = get("seed")?.map_or(Ok(0), |v| parse_num("seed", v))?;
        cfg.sampling = match get("sampling")? {
            None | Some("shuffle") => Sampling::EpochShuffle,
            Some("uniform") => Sampling::UniformWithReplacement,
            Some(other) => return err(format!("`sampling`: expected shuffle or uniform, got `{other}`")),
        };
        cfg.order = match get("order")? {
            None | Some("simultaneous") => UpdateOrder::Simultaneous,
            Some("sequential") => UpdateOrder::Sequential,
            Some(other) => return err(format!("`order`: expected simultaneous or sequential, got `{other}`")),
        };
        cfg.execution = match get("execution")? {
            None | Some("reference") => Execution::Reference,
            Some("workers") => Execution::Workers,
            Some(other) => return err(format!("`execution`: expected reference or workers, got `{other}`")),
        };
        if let Some(v) = get("checkpoint_every")? {
            cfg.checkpoint_every = parse_num("checkpoint_every", v)?;
        }
        if let Some(v) = get("analysis")? {
            cfg.analysis = parse_bool("analysis", v)?;
        }
        let dataset = DatasetSpec {
            name: get("dataset")?.unwrap_or("regression-mlp").to_string(),
            samples: get("samples")?.map_or(Ok(256), |v| parse_num("samples", v))?,
            seed: get("data_seed")?.map_or(Ok(cfg.seed), |v| parse_num("data_seed", v))?,
        };
        if dataset.samples == 0 {
            return err("`samples` must be positive");
        }
        Ok(Self { config: cfg, dataset })
    }
}

//! Experiment configuration file.
//!
//! One TOML file drives every CLI subcommand. Any field can be overridden
//! with a dotted path, e.g. `train.learning_rate=5e-4`.
//!
//! ```toml
//! [paths]
//! data_dir = "data"
//! output_dir = "runs/demo"
//!
//! [schedule]
//! k = 6.0
//! sigma = 0.1
//! t_eps = 0.03
//! t_max = 0.97
//!
//! [estimator]
//! dim = 64
//! num_condition_layers = 3
//! trunk = "mlp-baseline"
//! trunk_depth = 2
//! trunk_width = 128
//! time_embed_dim = 16
//!
//! [train]
//! batch_size = 64
//! total_steps = 2000
//! learning_rate = 1e-3
//! seed = 0
//!
//! [sampler]
//! num_steps = 20
//!
//! [data]
//! split = [0.7, 0.15, 0.15]
//!
//! [data.synthetic]
//! num_classes = 4
//! dim = 64
//! layers = 3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::estimator::EstimatorConfig;
use crate::evaluation::{DEFAULT_PANEL_TIMES, DEFAULT_SWEEP_STEPS};
use crate::sampler::SamplerConfig;
use crate::schedules::ScheduleParams;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds `train.gsf`, `validation.gsf` and `test.gsf`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/model.gsck`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            output_dir: "runs/default".into(),
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.gsck"))
    }

    pub fn split_file(&self, split: &str) -> PathBuf {
        self.data_dir.join(format!("{split}.gsf"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub num_steps: usize,
    /// Step counts for `sweep-steps`.
    pub sweep: Vec<usize>,
    /// Panel times for `dump-trajectory`.
    pub panel_times: Vec<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            num_steps: 20,
            sweep: DEFAULT_SWEEP_STEPS.to_vec(),
            panel_times: DEFAULT_PANEL_TIMES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: SyntheticSpec,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            split: [0.7, 0.15, 0.15],
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub schedule: ScheduleParams,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            schedule: ScheduleParams::default(),
            estimator: EstimatorConfig::mlp_baseline(64, 3),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Sets `path` (dot-separated) in `root` to `raw`, parsed as a TOML value
/// when possible and as a bare string otherwise.
fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Layers `text` over the defaults, applies `key=value` overrides in
    /// order, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut table, file);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate().map_err(config_err)?;
        self.estimator.validate().map_err(config_err)?;
        self.train.validate()?;
        self.sampler_config().validate().map_err(config_err)?;
        if self.sampler.sweep.is_empty() || self.sampler.sweep.contains(&0) {
            return Err(Error::Config(
                "sampler.sweep must list step counts >= 1".into(),
            ));
        }
        for &t in &self.sampler.panel_times {
            self.schedule.check_time(t).map_err(config_err)?;
        }
        self.data.synthetic.validate().map_err(config_err)?;
        let sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.split must be non-negative and sum to 1, got {:?}",
                self.data.split
            )));
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig::new(self.sampler.num_steps, self.schedule)
    }

    /// Writes `effective_config.toml` into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

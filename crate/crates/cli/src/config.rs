//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Later assignments (including command-line overrides) replace earlier ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use otpe_core::data::{read_raster, Encoding, RandmanSpec};
use otpe_core::exact::DEFAULT_RTRL_CAP;
use otpe_core::online::SpatialFactor;
use otpe_core::train::loss::{LossKind, LossSpec};
use otpe_core::train::{AdamaxParams, CompareConfig, DataSource, OnlineUpdate, TrainConfig, TrainMode};
use otpe_core::{Algorithm, Error, LifParams, Network, Result};
use serde::Serialize;

pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.kind", "randman_t"),
    ("data.path", ""),
    ("data.valid_fraction", "0.1"),
    ("data.valid_size", "512"),
    ("randman.dim", "3"),
    ("randman.classes", "10"),
    ("randman.neurons", "50"),
    ("randman.alpha", "1.0"),
    ("randman.harmonics", "4"),
    ("randman.time_steps", "50"),
    ("randman.max_spikes", ""),
    ("randman.seed", ""),
    ("model.hidden_layers", "2"),
    ("model.width", "64"),
    ("model.leak", "0.98"),
    ("model.threshold", "1.0"),
    ("model.slope", "25"),
    ("model.init_gain", ""),
    ("train.algorithm", "otpe"),
    ("train.mode", "offline"),
    ("train.reset", "surrogate"),
    ("train.bptt_reset", "surrogate"),
    ("train.spatial_factor", ""),
    ("train.rtrl_cap", ""),
    ("train.online_update", "every_step"),
    ("loss.kind", ""),
    ("loss.output_leak", ""),
    ("optimizer.lr", ""),
    ("optimizer.beta1", "0.9"),
    ("optimizer.beta2", "0.999"),
    ("optimizer.eps", "1e-8"),
    ("schedule.minibatches", "1000"),
    ("schedule.batch_size", "64"),
    ("schedule.valid_every", "1"),
    ("schedule.checkpoint_every", "200"),
    ("output.dir", ""),
    ("diagnostics.cosine_vs_bptt", "false"),
    ("diagnostics.report_memory", "false"),
    ("compare.algorithms", "ostl,ottt,otpe,approx_otpe"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    RandmanT,
    RandmanR,
    Raster,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "randman_t" | "t_randman" => Ok(DataKind::RandmanT),
            "randman_r" | "r_randman" => Ok(DataKind::RandmanR),
            "raster" | "raster_file" => Ok(DataKind::Raster),
            _ => Err(Error::config(format!("data.kind: unknown dataset `{s}`"))),
        }
    }
}

/// Raw key-value settings with their defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::config(format!("unknown key `{key}`"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| Error::config(format!("{key}: cannot parse `{v}`: {e}")))
    }

    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Round-trippable text form.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Typed, validated experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_kind: DataKind,
    pub data_path: Option<PathBuf>,
    pub valid_fraction: f64,
    pub valid_size: usize,
    pub randman: RandmanSpec,
    pub hidden_layers: usize,
    pub width: usize,
    pub lif: LifParams,
    pub init_gain: f64,
    pub train: TrainConfig,
    pub compare_algorithms: Vec<Algorithm>,
    pub output_dir: Option<PathBuf>,
    pub report_memory: bool,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = s.get("seed")?;
        let data_kind: DataKind = s.get("data.kind")?;
        let data_path = s.get_opt::<PathBuf>("data.path")?;
        if data_kind == DataKind::Raster {
            match &data_path {
                None => return Err(Error::config("data.kind=raster needs data.path")),
                Some(p) if !p.is_file() => {
                    return Err(Error::config(format!("data.path `{}` is not a readable file", p.display())))
                }
                _ => {}
            }
        }
        let randman = RandmanSpec {
            dim: s.get("randman.dim")?,
            num_classes: s.get("randman.classes")?,
            neurons: s.get("randman.neurons")?,
            alpha: s.get("randman.alpha")?,
            harmonics: s.get("randman.harmonics")?,
            time_steps: s.get("randman.time_steps")?,
            max_spikes: s.get_opt("randman.max_spikes")?,
            encoding: if data_kind == DataKind::RandmanR { Encoding::Rate } else { Encoding::Time },
            seed: s.get_opt("randman.seed")?.unwrap_or(seed),
        };
        if data_kind != DataKind::Raster {
            randman.validate()?;
        }
        let lif = LifParams::new(s.get("model.leak")?, s.get("model.threshold")?, s.get("model.slope")?)?;
        let algorithm: Algorithm = s.get("train.algorithm")?;
        let mode: TrainMode = s.get("train.mode")?;
        let kind = match s.get_opt::<LossKind>("loss.kind")? {
            Some(k) => k,
            None => match (mode, algorithm.is_f_variant()) {
                (TrainMode::Offline, _) => LossKind::SequenceCeOnSum,
                (TrainMode::Online, true) => LossKind::LeakySumCe,
                (TrainMode::Online, false) => LossKind::PerStepCe,
            },
        };
        let output_leak = match s.get_opt("loss.output_leak")? {
            Some(v) => v,
            None if kind == LossKind::LeakySumCe => lif.leak,
            None => 1.0,
        };
        // class count is checked again against the data when it is loaded
        let classes = if data_kind == DataKind::Raster { 2.max(randman.num_classes) } else { randman.num_classes };
        let loss = LossSpec::new(kind, output_leak, classes)?;
        let optimizer = AdamaxParams {
            lr: s
                .get_opt("optimizer.lr")?
                .unwrap_or(if data_kind == DataKind::RandmanR { 0.003 } else { 0.03 }),
            beta1: s.get("optimizer.beta1")?,
            beta2: s.get("optimizer.beta2")?,
            eps: s.get("optimizer.eps")?,
        };
        optimizer.validate()?;
        let mut train = TrainConfig::new(algorithm, loss);
        train.mode = mode;
        train.reset = s.get("train.reset")?;
        train.bptt_reset = s.get("train.bptt_reset")?;
        train.spatial_factor = s.get_opt::<SpatialFactor>("train.spatial_factor")?;
        train.rtrl_cap = s.get_opt("train.rtrl_cap")?.unwrap_or(DEFAULT_RTRL_CAP);
        train.online_update = s.get::<OnlineUpdate>("train.online_update")?;
        train.optimizer = optimizer;
        train.minibatches = s.get("schedule.minibatches")?;
        train.batch_size = s.get("schedule.batch_size")?;
        train.valid_every = s.get("schedule.valid_every")?;
        train.checkpoint_every = s.get("schedule.checkpoint_every")?;
        train.cosine_vs_bptt = parse_bool("diagnostics.cosine_vs_bptt", s.raw("diagnostics.cosine_vs_bptt"))?;
        if train.minibatches == 0 || train.batch_size == 0 {
            return Err(Error::config("schedule.minibatches and schedule.batch_size must be positive"));
        }
        if mode == TrainMode::Online && algorithm == Algorithm::Bptt {
            return Err(Error::config(
                "train.algorithm=bptt cannot run with train.mode=online (BPTT needs the whole sequence)",
            ));
        }
        let compare_algorithms = s
            .raw("compare.algorithms")
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(|a| a.parse::<Algorithm>().map_err(|e| Error::config(format!("compare.algorithms: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let valid_fraction: f64 = s.get("data.valid_fraction")?;
        if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
            return Err(Error::config("data.valid_fraction must lie in (0, 1)"));
        }
        let width: usize = s.get("model.width")?;
        if width == 0 {
            return Err(Error::config("model.width must be positive"));
        }
        Ok(Self {
            seed,
            data_kind,
            data_path,
            valid_fraction,
            valid_size: s.get("data.valid_size")?,
            randman,
            hidden_layers: s.get("model.hidden_layers")?,
            width,
            lif,
            init_gain: s
                .get_opt("model.init_gain")?
                .unwrap_or(if data_kind == DataKind::RandmanR { 1.0 } else { 2.0 }),
            train,
            compare_algorithms,
            output_dir: s.get_opt("output.dir")?,
            report_memory: parse_bool("diagnostics.report_memory", s.raw("diagnostics.report_memory"))?,
        })
    }

    /// Load the dataset and fix the class count of the loss to match it.
    pub fn load_data(&mut self) -> Result<DataSource> {
        let data = match self.data_kind {
            DataKind::RandmanT | DataKind::RandmanR => DataSource::randman(self.randman.clone(), self.valid_size)?,
            DataKind::Raster => {
                let path = self.data_path.as_ref().expect("validated");
                let (_, raster) = read_raster(path)?;
                DataSource::raster(&raster, self.valid_fraction, self.seed)?
            }
        };
        self.train.loss.num_classes = data.num_classes();
        Ok(data)
    }

    pub fn widths(&self, data: &DataSource) -> Vec<usize> {
        let mut w = vec![data.channels()];
        w.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        w.push(data.num_classes());
        w
    }

    pub fn network(&self, data: &DataSource) -> Result<Network> {
        Network::init(&self.widths(data), self.lif, self.init_gain, self.seed)
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            algorithms: self.compare_algorithms.clone(),
            reset: self.train.reset,
            bptt_reset: self.train.bptt_reset,
            spatial_factor: self.train.spatial_factor,
            rtrl_cap: self.train.rtrl_cap,
            loss: self.train.loss,
            optimizer: self.train.optimizer,
            minibatches: self.train.minibatches,
            batch_size: self.train.batch_size,
        }
    }
}

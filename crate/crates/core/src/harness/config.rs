//! Flat `key = value` experiment configuration.
//!
//! One setting per line, dotted section names, `#` starts a comment. Lists are
//! comma separated. Unknown or duplicate keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::{format_architecture, parse_architecture, LayerSpec, SgdConfig};
use crate::spp::ScheduleParams;

/// The reference CIFAR-10 network: three 5x5 conv layers (75, 800, 800 columns) and one fc layer.
pub const REFERENCE_ARCHITECTURE: &str =
    "conv(32,5,1,2) relu maxpool(2,2) conv(32,5,1,2) relu maxpool(2,2) conv(64,5,1,2) relu maxpool(2,2) fc(10)";

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Cifar10 { dir: Option<PathBuf>, validation: usize },
    Synthetic { spec: SyntheticSpec, validation: usize },
}

impl DataConfig {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            DataConfig::Cifar10 { .. } => [3, 32, 32],
            DataConfig::Synthetic { spec, .. } => spec.shape,
        }
    }

    pub fn validation(&self) -> usize {
        match self {
            DataConfig::Cifar10 { validation, .. } | DataConfig::Synthetic { validation, .. } => *validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
}

/// Per-layer remaining-ratio proportions for FLOP-targeted allocation.
#[derive(Debug, Clone, PartialEq)]
pub enum Proportions {
    /// One entry per conv layer; `None` keeps the layer dense.
    Explicit(Vec<Option<f64>>),
    /// Derived from PCA sensitivity of the pre-trained weights.
    Pca,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RatioSource {
    /// One global pruning ratio or one per conv layer.
    Fixed(Vec<f64>),
    Speedup { target: f64, proportions: Proportions },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub sgd: SgdConfig,
    pub schedule: ScheduleParams,
    pub ratios: RatioSource,
    pub max_iterations: Option<usize>,
    /// Evaluate every this many probability updates.
    pub eval_every: usize,
    /// Save resumable state every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub architecture: Vec<LayerSpec>,
    pub train: PhaseConfig,
    pub prune: PruneConfig,
    pub retrain: PhaseConfig,
    pub eval_batch: usize,
    pub bench: BenchConfig,
}

struct Raw {
    entries: BTreeMap<String, (String, usize)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Raw { entries })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{key} = {v}`"))),
        }
    }

    fn get_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{key} = {v}`"))),
        }
    }

    fn sgd(&mut self, section: &str, default: SgdConfig) -> Result<SgdConfig> {
        Ok(SgdConfig {
            learning_rate: self.get(&format!("{section}.learning_rate"), default.learning_rate)?,
            momentum: self.get(&format!("{section}.momentum"), default.momentum)?,
            weight_decay: self.get(&format!("{section}.weight_decay"), default.weight_decay)?,
            batch_size: self.get(&format!("{section}.batch_size"), default.batch_size)?,
        })
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<Option<f64>>> {
    v.split(',')
        .map(str::trim)
        .map(|s| match s {
            "-" => Ok(None),
            s => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse list entry `{s}`"))),
        })
        .collect()
}

fn parse_shape(v: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = v
        .split('x')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("data.shape `{v}` must look like 3x16x16")))?;
    dims.try_into()
        .map_err(|_| Error::Config(format!("data.shape `{v}` must have three dimensions")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Raw::parse(text)?;
        let seed = raw.get("seed", 0u64)?;
        let validation_default = 5000;
        let data = match raw.get("data.source", "cifar10".to_string())?.as_str() {
            "cifar10" => DataConfig::Cifar10 {
                dir: raw.get_opt::<String>("data.dir")?.map(PathBuf::from),
                validation: raw.get("data.validation", validation_default)?,
            },
            "synthetic" => {
                let d = SyntheticSpec::default();
                let shape = match raw.take("data.shape") {
                    Some((v, _)) => parse_shape(&v)?,
                    None => d.shape,
                };
                let samples = raw.get("data.samples", d.samples)?;
                DataConfig::Synthetic {
                    spec: SyntheticSpec {
                        classes: raw.get("data.classes", d.classes)?,
                        samples,
                        shape,
                        margin: raw.get("data.margin", d.margin)?,
                        noise: raw.get("data.noise", d.noise)?,
                    },
                    validation: raw.get("data.validation", samples / 5)?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source `{other}` is not one of cifar10, synthetic"
                )))
            }
        };
        let architecture = parse_architecture(&raw.get("model.architecture", REFERENCE_ARCHITECTURE.to_string())?)?;

        let train = PhaseConfig {
            sgd: raw.sgd("train", SgdConfig::default())?,
            epochs: raw.get("train.epochs", 10)?,
        };
        let sp = ScheduleParams::default();
        let schedule = ScheduleParams {
            max_increment: raw.get("prune.max_increment", sp.max_increment)?,
            flatness: raw.get("prune.flatness", sp.flatness)?,
            interval: raw.get("prune.interval", sp.interval)?,
        };
        let ratio = raw.take("prune.ratio");
        let speedup = raw.get_opt::<f64>("prune.target_speedup")?;
        let proportions = raw.take("prune.proportions");
        let ratios = match (ratio, speedup) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either prune.ratio or prune.target_speedup, not both".into()))
            }
            (Some((v, line)), None) => {
                if proportions.is_some() {
                    return Err(Error::Config("prune.proportions needs prune.target_speedup".into()));
                }
                let list = parse_list("prune.ratio", &v)?;
                RatioSource::Fixed(
                    list.into_iter()
                        .map(|r| r.ok_or_else(|| Error::Config(format!("line {line}: use 0 for a dense layer in prune.ratio"))))
                        .collect::<Result<_>>()?,
                )
            }
            (None, Some(target)) => RatioSource::Speedup {
                target,
                proportions: match proportions {
                    None => Proportions::Pca,
                    Some((v, _)) if v == "pca" => Proportions::Pca,
                    Some((v, _)) => Proportions::Explicit(parse_list("prune.proportions", &v)?),
                },
            },
            (None, None) => RatioSource::Speedup {
                target: 4.0,
                proportions: match proportions {
                    None => Proportions::Pca,
                    Some((v, _)) if v == "pca" => Proportions::Pca,
                    Some((v, _)) => Proportions::Explicit(parse_list("prune.proportions", &v)?),
                },
            },
        };
        let prune = PruneConfig {
            sgd: raw.sgd("prune", SgdConfig { learning_rate: 0.001, ..SgdConfig::default() })?,
            schedule,
            ratios,
            max_iterations: raw.get_opt("prune.max_iterations")?,
            eval_every: raw.get("prune.eval_every", 1)?,
            checkpoint_every: raw.get("prune.checkpoint_every", 0)?,
        };
        let retrain = PhaseConfig {
            sgd: raw.sgd("retrain", SgdConfig { learning_rate: 0.001, ..SgdConfig::default() })?,
            epochs: raw.get("retrain.epochs", 5)?,
        };
        let eval_batch = raw.get("eval.batch_size", 256)?;
        let bench = BenchConfig {
            warmup: raw.get("bench.warmup", 5)?,
            runs: raw.get("bench.runs", 50)?,
            batch_size: raw.get("bench.batch_size", 32)?,
        };
        raw.finish()?;
        let cfg = ExperimentConfig {
            seed,
            data,
            architecture,
            train,
            prune,
            retrain,
            eval_batch,
            bench,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.sgd.validate().map_err(|e| prefix("train", e))?;
        self.prune.sgd.validate().map_err(|e| prefix("prune", e))?;
        self.retrain.sgd.validate().map_err(|e| prefix("retrain", e))?;
        self.prune.schedule.validate()?;
        match &self.prune.ratios {
            RatioSource::Fixed(r) => {
                if r.is_empty() || r.iter().any(|r| !(0.0..1.0).contains(r)) {
                    return Err(Error::Config(format!("prune.ratio entries must be in [0, 1), got {r:?}")));
                }
            }
            RatioSource::Speedup { target, proportions } => {
                if !(*target > 1.0 && target.is_finite()) {
                    return Err(Error::Config(format!("prune.target_speedup must exceed 1, got {target}")));
                }
                if let Proportions::Explicit(p) = proportions {
                    if p.iter().flatten().any(|p| !(*p > 0.0 && p.is_finite())) {
                        return Err(Error::Config("prune.proportions entries must be positive or `-`".into()));
                    }
                }
            }
        }
        if self.prune.eval_every == 0 {
            return Err(Error::Config("prune.eval_every must be positive".into()));
        }
        if self.eval_batch == 0 || self.bench.batch_size == 0 || self.bench.runs == 0 {
            return Err(Error::Config("eval.batch_size, bench.batch_size and bench.runs must be positive".into()));
        }
        if let DataConfig::Synthetic { spec, validation } = &self.data {
            spec.validate()?;
            if *validation >= spec.samples {
                return Err(Error::Config(format!(
                    "data.validation {validation} leaves no training samples out of {}",
                    spec.samples
                )));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seed", self.seed.to_string());
        match &self.data {
            DataConfig::Cifar10 { dir, validation } => {
                put("data.source", "cifar10".into());
                if let Some(d) = dir {
                    put("data.dir", d.display().to_string());
                }
                put("data.validation", validation.to_string());
            }
            DataConfig::Synthetic { spec, validation } => {
                put("data.source", "synthetic".into());
                put("data.classes", spec.classes.to_string());
                put("data.samples", spec.samples.to_string());
                let [c, h, w] = spec.shape;
                put("data.shape", format!("{c}x{h}x{w}"));
                put("data.margin", spec.margin.to_string());
                put("data.noise", spec.noise.to_string());
                put("data.validation", validation.to_string());
            }
        }
        put("model.architecture", format_architecture(&self.architecture));
        for (name, phase) in [("train", &self.train), ("retrain", &self.retrain)] {
            put_sgd(&mut put, name, &phase.sgd);
            put(&format!("{name}.epochs"), phase.epochs.to_string());
        }
        put_sgd(&mut put, "prune", &self.prune.sgd);
        put("prune.max_increment", self.prune.schedule.max_increment.to_string());
        put("prune.flatness", self.prune.schedule.flatness.to_string());
        put("prune.interval", self.prune.schedule.interval.to_string());
        let list = |v: &[Option<f64>]| {
            v.iter()
                .map(|x| x.map_or("-".to_string(), |x| x.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        };
        match &self.prune.ratios {
            RatioSource::Fixed(r) => put("prune.ratio", list(&r.iter().map(|&x| Some(x)).collect::<Vec<_>>())),
            RatioSource::Speedup { target, proportions } => {
                put("prune.target_speedup", target.to_string());
                match proportions {
                    Proportions::Pca => put("prune.proportions", "pca".into()),
                    Proportions::Explicit(p) => put("prune.proportions", list(p)),
                }
            }
        }
        if let Some(m) = self.prune.max_iterations {
            put("prune.max_iterations", m.to_string());
        }
        put("prune.eval_every", self.prune.eval_every.to_string());
        put("prune.checkpoint_every", self.prune.checkpoint_every.to_string());
        put("eval.batch_size", self.eval_batch.to_string());
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.runs", self.bench.runs.to_string());
        put("bench.batch_size", self.bench.batch_size.to_string());
        out
    }
}

fn put_sgd(put: &mut impl FnMut(&str, String), section: &str, sgd: &SgdConfig) {
    put(&format!("{section}.learning_rate"), sgd.learning_rate.to_string());
    put(&format!("{section}.momentum"), sgd.momentum.to_string());
    put(&format!("{section}.weight_decay"), sgd.weight_decay.to_string());
    put(&format!("{section}.batch_size"), sgd.batch_size.to_string());
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{section}.{m}")),
        e => e,
    }
}

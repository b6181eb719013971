//! Flat key=value experiment configuration with strict parsing.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected. The
//! CLI applies its flag overrides after the file is read, so flags win.

use parexch::collectives::ExchangeStrategy;
use parexch::data::CropSpec;
use parexch::models::ModelKind;
use parexch::optim::CombineScheme;
use parexch::train::{DataSource, EasgdParams, ScheduleKind, TrainConfig, TrainMode};
use parexch::{Error, Result};
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Inproc,
    Tcp,
}

impl Backend {
    pub fn parse(s: &str) -> Option<Backend> {
        match s {
            "inproc" => Some(Backend::Inproc),
            "tcp" => Some(Backend::Tcp),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Inproc => "inproc",
            Backend::Tcp => "tcp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Full experiment description: the trainer config plus harness concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub backend: Backend,
    pub precision: Precision,
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            backend: Backend::Inproc,
            precision: Precision::F32,
            out: None,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::InvalidConfig(format!("bad value for {key}: {value:?}"))
}

impl ExperimentConfig {
    /// Parse the flat key=value format, starting from defaults. Unknown keys
    /// are errors; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut hidden: Option<usize> = None;
        let mut data_kind: Option<String> = None;
        let mut data_dir: Option<PathBuf> = None;
        let mut crop = CropSpec { h: 8, w: 8 };

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "mode" => {
                    cfg.train.mode = TrainMode::parse(value).ok_or_else(|| bad(key, value))?
                }
                "workers" => cfg.train.workers = value.parse().map_err(|_| bad(key, value))?,
                "batch_size" => {
                    cfg.train.per_worker_batch = value.parse().map_err(|_| bad(key, value))?
                }
                "scheme" => {
                    cfg.train.scheme = CombineScheme::parse(value).ok_or_else(|| bad(key, value))?
                }
                "strategy" => {
                    cfg.train.strategy =
                        ExchangeStrategy::parse(value).ok_or_else(|| bad(key, value))?
                }
                "schedule" => {
                    cfg.train.schedule =
                        ScheduleKind::parse(value).ok_or_else(|| bad(key, value))?
                }
                "lr" => cfg.train.lr = value.parse().map_err(|_| bad(key, value))?,
                "momentum" => cfg.train.momentum = value.parse().map_err(|_| bad(key, value))?,
                "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad(key, value))?,
                "max_iterations" => {
                    cfg.train.max_iterations =
                        Some(value.parse().map_err(|_| bad(key, value))?)
                }
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad(key, value))?,
                "alpha" => {
                    cfg.train.easgd.alpha = value.parse().map_err(|_| bad(key, value))?
                }
                "tau" => cfg.train.easgd.tau = value.parse().map_err(|_| bad(key, value))?,
                "model" => {
                    cfg.train.model = ModelKind::parse(value).ok_or_else(|| bad(key, value))?
                }
                "hidden" => hidden = Some(value.parse().map_err(|_| bad(key, value))?),
                "input_dim" => cfg.train.input_dim = value.parse().map_err(|_| bad(key, value))?,
                "classes" => cfg.train.classes = value.parse().map_err(|_| bad(key, value))?,
                "examples" => cfg.train.examples = value.parse().map_err(|_| bad(key, value))?,
                "difficulty" => {
                    cfg.train.difficulty = value.parse().map_err(|_| bad(key, value))?
                }
                "val_fraction" => {
                    cfg.train.val_fraction = value.parse().map_err(|_| bad(key, value))?
                }
                "hash_every" => {
                    cfg.train.hash_every = value.parse().map_err(|_| bad(key, value))?
                }
                "data" => data_kind = Some(value.to_string()),
                "data_dir" => data_dir = Some(PathBuf::from(value)),
                "crop_h" => crop.h = value.parse().map_err(|_| bad(key, value))?,
                "crop_w" => crop.w = value.parse().map_err(|_| bad(key, value))?,
                "backend" => cfg.backend = Backend::parse(value).ok_or_else(|| bad(key, value))?,
                "precision" => {
                    cfg.precision = Precision::parse(value).ok_or_else(|| bad(key, value))?
                }
                "out" => cfg.out = Some(value.to_string()),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown key {other:?} on line {}",
                        lineno + 1
                    )))
                }
            }
        }

        if let (ModelKind::Mlp { .. }, Some(h)) = (cfg.train.model, hidden) {
            cfg.train.model = ModelKind::Mlp { hidden: h };
        }
        match data_kind.as_deref() {
            None | Some("synthetic") => {}
            Some("files") => {
                let dir = data_dir.ok_or_else(|| {
                    Error::InvalidConfig("data=files requires data_dir".to_string())
                })?;
                cfg.train.source = DataSource::Files { dir, crop };
            }
            Some(other) => return Err(bad("data", other)),
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<ExperimentConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialize back to the key=value format. `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", t.mode.name());
        let _ = writeln!(s, "workers={}", t.workers);
        let _ = writeln!(s, "batch_size={}", t.per_worker_batch);
        let _ = writeln!(s, "scheme={}", t.scheme.name());
        let _ = writeln!(s, "strategy={}", t.strategy.name());
        let _ = writeln!(s, "schedule={}", t.schedule.name());
        let _ = writeln!(s, "lr={}", t.lr);
        let _ = writeln!(s, "momentum={}", t.momentum);
        let _ = writeln!(s, "epochs={}", t.epochs);
        if let Some(mi) = t.max_iterations {
            let _ = writeln!(s, "max_iterations={mi}");
        }
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "alpha={}", t.easgd.alpha);
        let _ = writeln!(s, "tau={}", t.easgd.tau);
        let _ = writeln!(s, "model={}", t.model.name());
        if let ModelKind::Mlp { hidden } = t.model {
            let _ = writeln!(s, "hidden={hidden}");
        }
        let _ = writeln!(s, "input_dim={}", t.input_dim);
        let _ = writeln!(s, "classes={}", t.classes);
        let _ = writeln!(s, "examples={}", t.examples);
        let _ = writeln!(s, "difficulty={}", t.difficulty);
        let _ = writeln!(s, "val_fraction={}", t.val_fraction);
        let _ = writeln!(s, "hash_every={}", t.hash_every);
        match &t.source {
            DataSource::Synthetic => {
                let _ = writeln!(s, "data=synthetic");
            }
            DataSource::Files { dir, crop } => {
                let _ = writeln!(s, "data=files");
                let _ = writeln!(s, "data_dir={}", dir.display());
                let _ = writeln!(s, "crop_h={}", crop.h);
                let _ = writeln!(s, "crop_w={}", crop.w);
            }
        }
        let _ = writeln!(s, "backend={}", self.backend.name());
        let _ = writeln!(s, "precision={}", self.precision.name());
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out={out}");
        }
        s
    }
}

/// `EasgdParams` defaults for documentation; re-exported so `--help` and the
/// README agree with the code.
pub fn default_easgd() -> EasgdParams {
    EasgdParams::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_default() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn round_trips_non_default() {
        let mut cfg = ExperimentConfig {
            backend: Backend::Tcp,
            precision: Precision::F64,
            out: Some("stats.csv".to_string()),
            ..ExperimentConfig::default()
        };
        cfg.train.mode = TrainMode::Easgd;
        cfg.train.workers = 4;
        cfg.train.model = ModelKind::Mlp { hidden: 24 };
        cfg.train.max_iterations = Some(500);
        cfg.train.easgd = EasgdParams {
            alpha: 0.25,
            tau: 4,
        };
        cfg.train.source = DataSource::Files {
            dir: PathBuf::from("/tmp/corpus"),
            crop: CropSpec { h: 6, w: 5 },
        };
        let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("workres=4\n").unwrap_err();
        assert!(err.to_string().contains("workres"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::parse("workers=minus-two\n").is_err());
        assert!(ExperimentConfig::parse("strategy=ring\n").is_err());
        assert!(ExperimentConfig::parse("alpha=1.5\n").is_err());
        assert!(ExperimentConfig::parse("data=files\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = ExperimentConfig::parse("# comment\n\nworkers=3\n").unwrap();
        assert_eq!(cfg.train.workers, 3);
    }
}

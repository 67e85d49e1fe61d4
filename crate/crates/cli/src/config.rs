//! Run configuration: built-in profiles, a JSON file layered on top, and
//! command-line overrides layered on top of that.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use afin::eval::EvalConfig;
use afin::network::ModelConfig;
use afin::simulator::SimulatorConfig;
use afin::training::TrainConfig;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Version of every JSON/CSV artifact the CLI writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "paper-default")]
    PaperDefault,
}

impl FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper-default" => Ok(Profile::PaperDefault),
            _ => bail!("unknown profile {s:?} (expected toy or paper-default)"),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::PaperDefault => "paper-default",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoint.afin`.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines task file read by `eval`.
    pub tasks: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("afin-out"),
            checkpoint: None,
            tasks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub profile: Profile,
    /// Master seed. Overrides `train.seed`.
    pub seed: u64,
    /// Worker thread cap (all cores when absent).
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub simulator: SimulatorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Toy)
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, simulator, train) = match profile {
            Profile::Toy => (
                ModelConfig::toy(),
                SimulatorConfig::conjugate(3, 8),
                TrainConfig {
                    steps: 5000,
                    micro_batch: 32,
                    accumulation: 4,
                    peak_lr: 1e-3,
                    warmup_frac: 0.02,
                    ..TrainConfig::default()
                },
            ),
            Profile::PaperDefault => (
                ModelConfig::paper_default(),
                SimulatorConfig::default(),
                TrainConfig::default(),
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            profile,
            seed: 0,
            threads: None,
            model,
            simulator,
            train,
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Profile defaults overlaid with `file` (fields it names replace the
    /// defaults, nested objects merge). `profile` wins over the file's own
    /// `profile` entry.
    pub fn load(file: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        let overlay = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        if !overlay.is_object() {
            bail!("config file must hold a JSON object");
        }
        let chosen = match (profile, overlay.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => {
                serde_json::from_value(v.clone()).context("config field `profile`")?
            }
            (None, None) => Profile::Toy,
        };
        let mut merged = serde_json::to_value(Self::profile(chosen))?;
        merge(&mut merged, overlay);
        merged["profile"] = serde_json::to_value(chosen)?;
        let cfg: Self = serde_json::from_value(merged).context("invalid configuration")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoint.afin"))
    }

    /// Checks every section and that the output directory is writable.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.simulator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        fs::create_dir_all(&self.paths.out_dir).with_context(|| {
            format!("creating output directory {}", self.paths.out_dir.display())
        })?;
        let probe = self.paths.out_dir.join(".afin-write-test");
        fs::write(&probe, b"")
            .with_context(|| format!("{} is not writable", self.paths.out_dir.display()))?;
        fs::remove_file(&probe)?;
        if let Some(ck) = &self.paths.checkpoint {
            if let Some(dir) = ck.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `overlay` replace.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn file_fields_override_profile_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"seed": 9, "model": {"channels": 12}, "train": {"steps": 7}}"#,
        );
        let cfg = RunConfig::load(Some(&p), None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.channels, 12);
        assert_eq!(cfg.model.hidden, ModelConfig::toy().hidden);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.micro_batch, 32);
    }

    #[test]
    fn profile_flag_beats_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"profile": "toy"}"#);
        let cfg = RunConfig::load(Some(&p), Some(Profile::PaperDefault)).unwrap();
        assert_eq!(cfg.profile, Profile::PaperDefault);
        assert_eq!(cfg.model, ModelConfig::paper_default());
        let p = write(dir.path(), r#"{"profile": "paper-default"}"#);
        assert_eq!(RunConfig::load(Some(&p), None).unwrap().model.channels, 40);
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"model": {"chanels": 3}}"#);
        assert!(RunConfig::load(Some(&p), None).is_err());
        let p = write(dir.path(), r#"{"schema_version": 99}"#);
        assert!(RunConfig::load(Some(&p), None).is_err());
        let p = write(dir.path(), "[1, 2]");
        assert!(RunConfig::load(Some(&p), None).is_err());
    }

    #[test]
    fn profiles_round_trip_through_json() {
        for p in [Profile::Toy, Profile::PaperDefault] {
            let cfg = RunConfig::profile(p);
            let back: RunConfig =
                serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(p.to_string().parse::<Profile>().unwrap(), p);
        }
    }

    #[test]
    fn validation_catches_bad_widths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out_dir = dir.path().join("out");
        cfg.validate().unwrap();
        cfg.model.channels = 0;
        assert!(cfg.validate().is_err());
    }
}

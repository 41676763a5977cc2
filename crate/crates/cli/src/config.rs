//! Fully resolved run configuration. Every command writes one of these next to
//! its outputs as `run.json`; passing it back through `--config` repeats the
//! run bit for bit.

use std::path::{Path, PathBuf};

use chamfer_align::align::{default_schedule, validate_schedule, StageSpec};
use chamfer_align::eval::EvalOptions;
use chamfer_align::loss::LossConfig;
use chamfer_align::simulate::PairSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "CHAMFER_ALIGN_DATA";
pub const DEFAULT_DATA_DIR: &str = "chamfer-align-data";
pub const DEFAULT_COUNT: usize = 100;

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub aligned: Option<PathBuf>,
    pub forward: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub results: Option<PathBuf>,
    /// Image whose distance field `dt` dumps.
    pub input: Option<PathBuf>,
    /// Output directory, or output file for `overlay` and `dt`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// First dataset seed; `simulate` emits `seed..seed + count`.
    pub seed: u64,
    pub count: usize,
    /// Template for simulated pairs. Its own `seed` is replaced per item.
    pub pair: PairSpec,
    /// IDX3 file of base digits; synthetic shapes when absent.
    pub mnist: Option<PathBuf>,
    pub loss: LossConfig,
    pub schedule: Vec<StageSpec>,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            count: DEFAULT_COUNT,
            pair: PairSpec::default(),
            mnist: None,
            loss: LossConfig::default(),
            schedule: default_schedule(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn for_command(command: &str) -> Self {
        Self { command: command.to_string(), ..Self::default() }
    }

    /// Load a config file written by an earlier run (or by hand). The command
    /// recorded in it must match the one being run.
    pub fn load(path: &Path, command: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        if cfg.command.is_empty() {
            cfg.command = command.to_string();
        } else if cfg.command != command {
            return Err(CliError::Usage(format!(
                "config {} is for `{}`, not `{command}`",
                path.display(),
                cfg.command
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks that only need the config itself.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: chamfer_align::Error| CliError::Usage(e.to_string());
        match self.command.as_str() {
            "simulate" => {
                PairSpec { seed: self.seed, ..self.pair.clone() }.validate().map_err(usage)?;
                if self.count == 0 {
                    return Err(CliError::Usage("count must be at least 1".into()));
                }
                self.seed
                    .checked_add(self.count as u64 - 1)
                    .ok_or_else(|| CliError::Usage("seed range overflows u64".into()))?;
            }
            "align" => {
                self.loss.validate().map_err(usage)?;
                validate_schedule(&self.schedule).map_err(usage)?;
                if self.loss.scale_weights.len() != self.schedule.len() {
                    return Err(CliError::Usage(format!(
                        "{} scale weights for {} stages",
                        self.loss.scale_weights.len(),
                        self.schedule.len()
                    )));
                }
            }
            "eval" => {
                if !(self.eval.z > 0.0 && self.eval.z.is_finite()) {
                    return Err(CliError::Usage(format!("z must be > 0, got {}", self.eval.z)));
                }
            }
            _ => {}
        }
        self.check_collisions()
    }

    /// The output path must not overwrite any input.
    fn check_collisions(&self) -> Result<(), CliError> {
        let p = &self.paths;
        let Some(out) = &p.out else { return Ok(()) };
        for input in [&p.source, &p.target, &p.aligned, &p.forward, &p.manifest, &p.results, &p.input, &self.mnist]
            .into_iter()
            .flatten()
        {
            if same_path(out, input) {
                return Err(CliError::Usage(format!("output {} is also an input", out.display())));
            }
        }
        Ok(())
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::for_command("align");
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.validate().is_ok());
        let partial: RunConfig = serde_json::from_str(r#"{"command":"simulate","count":3}"#).unwrap();
        assert_eq!(partial.count, 3);
        assert_eq!(partial.schedule, default_schedule());
        assert!(serde_json::from_str::<RunConfig>(r#"{"cuont":3}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = RunConfig::for_command("align");
        cfg.loss.scale_weights.pop();
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        let mut cfg = RunConfig::for_command("simulate");
        cfg.count = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::for_command("overlay");
        cfg.paths.source = Some("a.png".into());
        cfg.paths.out = Some("a.png".into());
        assert!(cfg.validate().is_err());
    }
}

//! Run configuration: a TOML file with `model`, `data`, `train`, `metrics` and `eval`
//! sections. Path values may reference environment variables as `${NAME}`.

use std::path::{Path, PathBuf};

use enformer::data::{DEFAULT_SPLIT_RATIO, DEFAULT_SPLIT_SEED, TEST_SETS};
use enformer::interpret::{Column, DEFAULT_COLUMNS};
use enformer::metrics::MetricConfig;
use enformer::models::assemble;
use enformer::training::TrainConfig;
use enformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    /// Seed of the random parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Holds `Kvasir/` and `CVC-ClinicDB/`, each with `images/` and `masks/`.
    pub train_root: PathBuf,
    /// Holds one directory per test set.
    pub test_root: PathBuf,
    pub split_seed: u64,
    pub split_ratio: f64,
    /// Defaults to `<out_dir>/split.csv`.
    pub split_manifest: Option<PathBuf>,
    pub test_sets: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_root: PathBuf::from("data/TrainDataset"),
            test_root: PathBuf::from("data/TestDataset"),
            split_seed: DEFAULT_SPLIT_SEED,
            split_ratio: DEFAULT_SPLIT_RATIO,
            split_manifest: None,
            test_sets: TEST_SETS.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Binarization threshold for predicted masks.
    pub threshold: f64,
    pub panel_columns: Vec<String>,
    /// Panels drawn per `visualize` call when no images are named.
    pub panel_limit: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            panel_columns: DEFAULT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            panel_limit: 4,
        }
    }
}

/// Replaces every `${NAME}` with the value of the environment variable `NAME`.
pub fn interpolate(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated `${{` in `{text}`")))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| Error::Config(format!("environment variable `{name}` is not set (used in `{text}`)")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_path(p: &Path) -> Result<PathBuf> {
    Ok(PathBuf::from(interpolate(&p.to_string_lossy())?))
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))
    }

    /// Reads, interpolates, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve(overrides)?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, overrides: &Overrides) -> Result<()> {
        self.out_dir = interpolate_path(&self.out_dir)?;
        self.data.train_root = interpolate_path(&self.data.train_root)?;
        self.data.test_root = interpolate_path(&self.data.test_root)?;
        if let Some(m) = &self.data.split_manifest {
            self.data.split_manifest = Some(interpolate_path(m)?);
        }
        if let Some(seed) = overrides.seed {
            self.model.init_seed = seed;
            self.data.split_seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.out_dir = out.clone();
        }
        self.validate()
    }

    /// Reports every problem at once; an unknown model name is reported on its own
    /// with the list of registered names.
    pub fn validate(&self) -> Result<()> {
        assemble(&self.model.name)?;
        let mut problems = self.train.problems();
        if let Err(Error::Config(m)) = self.metrics.validate() {
            problems.push(m);
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            problems.push(format!(
                "data.split_ratio must lie strictly between 0 and 1, got {}",
                self.data.split_ratio
            ));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            problems.push(format!(
                "eval.threshold must lie in (0, 1), got {}",
                self.eval.threshold
            ));
        }
        if self.eval.panel_columns.is_empty() {
            problems.push("eval.panel_columns must name at least one column".into());
        }
        for c in &self.eval.panel_columns {
            if let Err(e) = Column::parse(c) {
                problems.push(format!("eval.panel_columns: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn split_manifest_path(&self) -> PathBuf {
        self.data
            .split_manifest
            .clone()
            .unwrap_or_else(|| self.out_dir.join("split.csv"))
    }

    /// The configuration as a loadable file, headed by the command that used it.
    pub fn manifest(&self, command_line: &str) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        Ok(format!(
            "# resolved configuration\n\
             # command: {command_line}\n\
             # train.schedule (pct_start, div_factor, final_div_factor) holds library\n\
             # defaults for the one-cycle shape; only its peak learning rate is a\n\
             # published setting.\n\n{body}"
        ))
    }

    /// Writes [`RunConfig::manifest`] to `<out_dir>/<command>.resolved.toml`.
    pub fn write_manifest(&self, command: &str, command_line: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(format!("{command}.resolved.toml"));
        std::fs::write(&path, self.manifest(command_line)?)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nname = \"enformer-lite-mini-tiny\"\n";

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.metrics, MetricConfig::default());
        assert_eq!(cfg.data.test_sets.len(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            format!("{MINIMAL}colour = 1\n"),
            format!("{MINIMAL}[train]\nlearnign_rate = 0.1\n"),
            format!("{MINIMAL}[metrics]\nbeta = 0.3\n"),
            format!("{MINIMAL}[extra]\nx = 1\n"),
        ] {
            let err = RunConfig::parse(&text).unwrap_err();
            assert_eq!(err.category(), "config", "{text}");
        }
    }

    #[test]
    fn all_problems_are_listed_together() {
        let text = format!("{MINIMAL}[train]\nbatch_size = 0\nepochs = 0\n[eval]\nthreshold = 2.0\n");
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err().to_string();
        assert!(
            err.contains("batch_size") && err.contains("epochs") && err.contains("threshold"),
            "{err}"
        );
    }

    #[test]
    fn unknown_model_lists_registry() {
        let cfg = RunConfig::parse("[model]\nname = \"unet\"\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.category(), "model");
        assert!(err.to_string().contains("enformer-lite-mini"));
    }

    #[test]
    fn environment_variables_expand_in_paths() {
        std::env::set_var("ENFORMER_CFG_TEST_ROOT", "/srv/polyps");
        assert_eq!(
            interpolate("${ENFORMER_CFG_TEST_ROOT}/TrainDataset").unwrap(),
            "/srv/polyps/TrainDataset"
        );
        assert_eq!(interpolate("plain").unwrap(), "plain");
        assert!(interpolate("${ENFORMER_CFG_TEST_UNSET_VARIABLE}/x").is_err());
        assert!(interpolate("${OPEN").is_err());

        let text = format!("out_dir = \"${{ENFORMER_CFG_TEST_ROOT}}/runs\"\n{MINIMAL}[data]\ntrain_root = \"${{ENFORMER_CFG_TEST_ROOT}}/TrainDataset\"\n");
        let mut cfg = RunConfig::parse(&text).unwrap();
        cfg.resolve(&Overrides::default()).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/srv/polyps/runs"));
        assert_eq!(cfg.data.train_root, PathBuf::from("/srv/polyps/TrainDataset"));
    }

    #[test]
    fn overrides_win_and_manifest_reloads() {
        let mut cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.resolve(&Overrides {
            seed: Some(7),
            out: Some(PathBuf::from("elsewhere")),
        })
        .unwrap();
        assert_eq!((cfg.train.seed, cfg.data.split_seed, cfg.model.init_seed), (7, 7, 7));
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        let text = cfg.manifest("enformer train --config run.toml").unwrap();
        assert!(text.contains("library\n# defaults"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}

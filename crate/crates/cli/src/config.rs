use std::path::{Path, PathBuf};

use dialdesc::data::dataset::{BuildOptions, DedupScope};
use dialdesc::data::EncodeLimits;
use dialdesc::training::TrainConfig;
use dialdesc::{Error, ModelConfig, Result};
use serde::Deserialize;

pub const DEFAULT_SWEEP: [usize; 7] = [1, 2, 4, 5, 7, 9, 10];

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dialogue and caption source files, read by build-dataset.
    pub dialogues: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Dedup {
    #[default]
    PerImage,
    Global,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub max_references: usize,
    pub dedup: Dedup,
    pub max_utterance_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = BuildOptions::default();
        DataConfig {
            dev_fraction: b.dev_fraction,
            test_fraction: b.test_fraction,
            max_references: b.max_references,
            dedup: Dedup::PerImage,
            max_utterance_tokens: EncodeLimits::default().max_utterance_tokens,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_beam() -> usize {
    4
}

fn default_sweep() -> Vec<usize> {
    DEFAULT_SWEEP.to_vec()
}

/// Everything one run needs. `model.vocab_size` is the vocabulary cap; the trained
/// model uses the size of the vocabulary actually built.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_sweep")]
    pub sweep_beams: Vec<usize>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses and validates; relative paths are taken from the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for x in [&mut p.dialogues, &mut p.captions, &mut p.dev, &mut p.test].into_iter().flatten() {
            resolve(base, x);
        }
        for x in [&mut p.train, &mut p.checkpoint, &mut p.out_dir] {
            resolve(base, x);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        if raw.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(Error::Config("set the seed at the top level, not in [train]".into()));
        }
        let mut cfg: RunConfig = raw.try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.sweep_beams.is_empty() || self.sweep_beams.contains(&0) {
            return Err(Error::Config("sweep_beams must be a nonempty list of positive sizes".into()));
        }
        let d = &self.data;
        if !(0.0..1.0).contains(&d.dev_fraction) || !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("dev_fraction and test_fraction must lie in [0, 1)".into()));
        }
        if d.dev_fraction + d.test_fraction >= 1.0 {
            return Err(Error::Config("dev_fraction + test_fraction must be below 1".into()));
        }
        if d.max_utterance_tokens == 0 || d.max_references == 0 {
            return Err(Error::Config("max_utterance_tokens and max_references must be positive".into()));
        }
        Ok(())
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            seed: self.seed,
            dev_fraction: self.data.dev_fraction,
            test_fraction: self.data.test_fraction,
            max_references: self.data.max_references,
            dedup: match self.data.dedup {
                Dedup::PerImage => DedupScope::PerImage,
                Dedup::Global => DedupScope::Global,
            },
        }
    }

    pub fn limits(&self) -> EncodeLimits {
        EncodeLimits {
            max_utterance_tokens: self.data.max_utterance_tokens,
            max_target_tokens: self.model.decoder.max_target_len,
        }
    }

    pub fn require<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is required for this command")))
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[paths]\ntrain = \"t.jsonl\"\ncheckpoint = \"m.ckpt\"\nout_dir = \"out\"\n";

    #[test]
    fn defaults_and_seed() {
        let c = RunConfig::parse(&format!("seed = 9\n{MIN}")).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.beam, 4);
        assert_eq!(c.sweep_beams, DEFAULT_SWEEP);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_and_misplaced_keys() {
        for bad in [
            format!("{MIN}bogus = 1\n"),
            format!("{MIN}[model]\nd_modle = 8\n"),
            format!("{MIN}[train]\nseed = 3\n"),
            format!("beam = 0\n{MIN}"),
            format!("{MIN}[data]\ndev_fraction = 0.6\ntest_fraction = 0.5\n"),
            "[paths]\ntrain = \"t\"\n".to_string(),
        ] {
            let e = RunConfig::parse(&bad).unwrap_err();
            assert_eq!(e.kind(), dialdesc::ErrorKind::Config, "{bad}");
            assert!(!e.to_string().contains('\n'));
        }
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::parse(&format!(
            "{MIN}[model]\nd_model = 16\n[model.decoder]\nhead_count = 2\n[train.optimizer]\nkind = \"adagrad\"\n[train.batch]\nunit = \"examples\"\nsize = 4\n"
        ))
        .unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.decoder.head_count, 2);
        assert!(matches!(c.train.optimizer, dialdesc::training::OptimizerConfig::Adagrad(_)));
    }
}

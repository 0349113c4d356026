use std::fs;
use std::path::{Path, PathBuf};

use mmlir::datagen::DatagenConfig;
use mmlir::encoder::EncoderConfig;
use mmlir::eval::Experiment;
use mmlir::index::{IndexConfig, SearchParams};
use mmlir::synth::SynthConfig;
use mmlir::train::TrainConfig;
use mmlir::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub benchmark: String,
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = Experiment::default();
        Self {
            benchmark: e.benchmark,
            ks: e.ks,
        }
    }
}

/// Everything a run needs, read from a TOML file. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Applied to every component that draws random numbers.
    pub seed: u64,
    /// Precomputed backbone features; seeded stub features when absent.
    pub features: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub synth: SynthConfig,
    pub datagen: DatagenConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub search: SearchParams,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = Experiment::default();
        Self {
            seed: 0,
            features: None,
            encoder: e.encoder,
            synth: SynthConfig::default(),
            datagen: DatagenConfig {
                qualifier: SynthConfig::default().qualifier,
                ..DatagenConfig::default()
            },
            train: e.train,
            index: IndexConfig::default(),
            search: SearchParams::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the seed everywhere and validates every section.
    pub fn finalize(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.datagen.seed = self.seed;
        self.train.seed = self.seed;
        self.index.seed = self.seed;
        self.encoder.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and >= 1".into()));
        }
        if let Some(p) = &self.features {
            require_file(p)?;
        }
        Ok(self)
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            benchmark: self.eval.benchmark.clone(),
            encoder: self.encoder,
            train: self.train,
            init_seed: self.seed,
            ks: self.eval.ks.clone(),
        }
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input file {} does not exist", path.display())))
    }
}

/// The parent directory of an output file must already exist.
pub fn require_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("output directory {} does not exist", parent.display())))
    }
}

//! Campaign configuration: one TOML file describes the model, the tests,
//! their parameters, seeds, budget and output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use wmaudit::blackbox::http::HttpProviderConfig;
use wmaudit::blackbox::SimulatorConfig;
use wmaudit::detectors::{CacheTestConfig, RarefactionConfig, RedGreenTestConfig};
use wmaudit::estimators::{ContextSizeConfig, DeltaConfig, KeyLengthConfig};
use wmaudit::schemes::Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub repetitions: usize,
    /// Ceiling on transport queries over the whole campaign.
    pub budget: Option<u64>,
    pub out: PathBuf,
    /// Rejection level applied to the median p-value.
    pub level: f64,
    pub tests: Vec<Family>,
    pub model: ModelSpec,
    pub red_green: RedGreenTestConfig,
    pub fixed_sampling: RarefactionConfig,
    pub cache: CacheTestConfig,
    pub estimate: EstimateSettings,
    pub diversity: DiversitySettings,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 1,
            budget: None,
            out: PathBuf::from("wmaudit-out"),
            level: 0.05,
            tests: vec![Family::RedGreen, Family::FixedSampling, Family::CacheAugmented],
            model: ModelSpec::default(),
            red_green: RedGreenTestConfig::default(),
            fixed_sampling: RarefactionConfig::default(),
            cache: CacheTestConfig::default(),
            estimate: EstimateSettings::default(),
            diversity: DiversitySettings::default(),
        }
    }
}

/// Exactly one of the three sources; the simulator with no watermark when
/// none is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub simulator: Option<SimulatorConfig>,
    /// Provider file for an HTTP chat endpoint.
    pub provider: Option<PathBuf>,
    /// Directory of an earlier campaign whose transcripts are replayed.
    pub replay: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSettings {
    /// Cache repeats before settling on δ-reweight.
    pub k_repeats: usize,
    /// Also estimate the context size after a Red-Green rejection.
    pub context_size: bool,
    pub delta: DeltaConfig,
    pub key_length: KeyLengthConfig,
    pub context: ContextSizeConfig,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            k_repeats: 5,
            context_size: true,
            delta: DeltaConfig::default(),
            key_length: KeyLengthConfig::default(),
            context: ContextSizeConfig { robust: true, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySettings {
    pub t_grid: Vec<usize>,
    pub n: usize,
    pub temperatures: Vec<f64>,
    pub prompt_id: usize,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        Self { t_grid: (1..=10).map(|i| 5 * i).collect(), n: 1000, temperatures: vec![0.7, 1.0], prompt_id: 0 }
    }
}

/// Where queries go, with file references resolved.
#[derive(Clone, Debug)]
pub enum Source {
    Simulator(SimulatorConfig),
    Provider(HttpProviderConfig),
    Replay(PathBuf),
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub budget: Option<u64>,
    pub repetitions: Option<usize>,
    pub provider: Option<PathBuf>,
}

impl CampaignConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Loads `path` (or the defaults), applies overrides and resolves model
    /// file references relative to the config file.
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut c = Self::from_toml_str(&s).with_context(|| format!("invalid config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new(""));
                for f in [&mut c.model.provider, &mut c.model.replay].into_iter().flatten() {
                    if f.is_relative() {
                        *f = base.join(&*f);
                    }
                }
                c
            }
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(d) = &o.out {
            cfg.out = d.clone();
        }
        if let Some(b) = o.budget {
            cfg.budget = Some(b);
        }
        if let Some(r) = o.repetitions {
            cfg.repetitions = r;
        }
        if let Some(p) = &o.provider {
            cfg.model = ModelSpec { provider: Some(p.clone()), ..Default::default() };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            bail!("level must be in (0, 1)");
        }
        if self.tests.is_empty() {
            bail!("tests is empty");
        }
        let sources = [self.model.simulator.is_some(), self.model.provider.is_some(), self.model.replay.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            bail!("model: give only one of simulator, provider, replay");
        }
        self.red_green.validate()?;
        self.fixed_sampling.validate()?;
        self.cache.validate()?;
        if let Some(b) = self.budget {
            let need = self.min_queries();
            if b < need {
                bail!(
                    "budget {b} is below the {need} queries the requested tests need at minimum \
                     ({} repetitions)",
                    self.repetitions
                );
            }
        }
        Ok(())
    }

    /// Queries of one run of `family` with every response valid.
    pub fn min_queries_per_run(&self, family: Family) -> u64 {
        match family {
            Family::RedGreen => (self.red_green.n * self.red_green.m * self.red_green.k) as u64,
            Family::FixedSampling => self.fixed_sampling.n as u64,
            Family::CacheAugmented => (self.cache.q1 + self.cache.q2) as u64,
        }
    }

    pub fn min_queries(&self) -> u64 {
        self.tests.iter().map(|&f| self.min_queries_per_run(f)).sum::<u64>() * self.repetitions as u64
    }

    pub fn source(&self) -> Result<Source> {
        if let Some(p) = &self.model.provider {
            return Ok(Source::Provider(HttpProviderConfig::load(p)?));
        }
        if let Some(d) = &self.model.replay {
            return Ok(Source::Replay(d.clone()));
        }
        Ok(Source::Simulator(self.model.simulator.clone().unwrap_or_default()))
    }
}

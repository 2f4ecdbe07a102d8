//! Run configuration: a TOML document with `episodes`, `gradnet`, `solver`,
//! `train` and `eval` sections. Values resolve as preset, then config file,
//! then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use metanode::analysis::Protocol;
use metanode::episodes::{Mode, SynthConfig};
use metanode::metatrain::TrainConfig;
use metanode::odeflow::{Method, SolveConfig};
use metanode::GradNetConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Library defaults.
    Default,
    /// Wide layers and the long 50-epoch schedule.
    Full,
    /// Reduced widths and solver steps that train in minutes on one core.
    Desk,
}

/// Synthetic benchmark generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodesSection {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub min_angle: f64,
    pub seed: u64,
    /// Extra classes drawn after the base classes and written separately.
    pub novel_classes: usize,
}

impl Default for EpisodesSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            classes: 20,
            dim: s.dim,
            per_class: s.samples_per_class,
            noise: s.noise_sigma,
            min_angle: s.min_center_angle_deg,
            seed: s.seed,
            novel_classes: 0,
        }
    }
}

impl EpisodesSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.classes + self.novel_classes,
            dim: self.dim,
            samples_per_class: self.per_class,
            noise_sigma: self.noise,
            min_center_angle_deg: self.min_angle,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Mean,
    Gda,
    Metanode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    pub gamma: f64,
    pub method: MethodName,
    pub gda_eta: f64,
    pub gda_steps: usize,
    /// Integral times of the convergence report.
    pub times: Vec<f64>,
    /// Episode index of the trajectory report.
    pub trajectory_episode: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            n_way: p.n_way,
            k_shot: p.k_shot,
            m_query: p.m_query,
            mode: p.mode,
            episodes: p.episodes,
            seed: p.seed,
            gamma: p.gamma,
            method: MethodName::Metanode,
            gda_eta: 0.1,
            gda_steps: 20,
            times: vec![1.0, 5.0, 10.0, 20.0, 40.0],
            trajectory_episode: 0,
        }
    }
}

impl EvalSection {
    pub fn protocol(&self) -> Protocol {
        Protocol {
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            mode: self.mode,
            episodes: self.episodes,
            seed: self.seed,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub episodes: EpisodesSection,
    pub gradnet: GradNetConfig,
    /// Solver used at evaluation and analysis time.
    pub solver: SolveConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => Self::default(),
            Preset::Full => Self {
                gradnet: GradNetConfig::full_widths(GradNetConfig::default().feature_dim),
                train: TrainConfig::full(),
                ..Self::default()
            },
            Preset::Desk => Self::desk(),
        }
    }

    /// Reduced network and training cost; see `TrainConfig::desk`.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            gradnet: GradNetConfig::desk(d.gradnet.feature_dim),
            solver: SolveConfig { method: Method::Rk4, integral_time: 40.0, num_steps: 10, record_trajectory: false },
            train: TrainConfig::desk(),
            ..d
        }
    }

    /// Preset values overlaid with the keys present in `text`.
    pub fn from_toml(preset: Preset, text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::preset(preset)).context("serialising preset")?;
        let overlay: toml::Table = toml::from_str(text).context("parsing config")?;
        merge(&mut base, overlay);
        let cfg: Self = toml::Value::Table(base).try_into().context("invalid config")?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::preset(preset)),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(preset, &text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.gradnet.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        if self.episodes.classes < 2 {
            bail!("at least 2 classes are required");
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

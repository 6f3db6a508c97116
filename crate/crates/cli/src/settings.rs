//! Run settings from flags and an optional flat JSON config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use cmg::guidance::{AmateurMode, DecodeParams, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Greedy,
    TopP,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmateurKind {
    /// γ-masks at the selected layers.
    Gamma,
    /// Every image-related key removed at every layer.
    FullRemoval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// α = 0.3, γ = 0.5, τ = 0.5.
    Hallucination,
    /// α = 0.1, γ = 0.5, τ = 0.1.
    Mme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSize {
    Desk,
    Tiny,
}

impl ModelSize {
    pub fn config(self) -> cmg::model::ModelConfig {
        match self {
            ModelSize::Desk => cmg::model::ModelConfig::desk(),
            ModelSize::Tiny => cmg::model::ModelConfig::tiny(),
        }
    }
}

/// Every key of the config file mirrors the flag of the same name with `-`
/// replaced by `_`. Flags given on the command line win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Parameter preset applied before individual overrides.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Guidance strength.
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Fraction of each row's visual keys dropped in the amateur pass.
    #[arg(long)]
    pub gamma: Option<f32>,
    /// Fraction of layers selected for masking.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Cap on dropped positions per amateur forward.
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub top_p: Option<f32>,
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Beam width; implies `--sampler beam`.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Masked layers, comma separated; bypasses selection by tau.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Token that ends generation.
    #[arg(long)]
    pub eos: Option<u32>,
    #[arg(long, value_enum)]
    pub amateur: Option<AmateurKind>,
    /// Decode without guidance.
    #[arg(long)]
    #[serde(default)]
    pub baseline: bool,

    /// Weights file (`.cmgt`).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Random model shape when no weights file is given.
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
    /// Seed of the random model and its prompt.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Prompt token ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub prompt: Option<Vec<u32>>,
    /// Span lengths `system,image,question` of the prompt.
    #[arg(long, value_delimiter = ',')]
    pub layout: Option<Vec<usize>>,

    /// Expert trace of the final sequence.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Step log (generate) or report (other commands).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident; $($field:ident),*) => {
        RunSettings {
            $($field: $flags.$field.or($file.$field),)*
            baseline: $flags.baseline || $file.baseline,
        }
    };
}

impl RunSettings {
    /// Flags in `self` take precedence over values from `file`.
    pub fn overlay(self, file: RunSettings) -> RunSettings {
        let flags = self;
        overlay!(flags, file; profile, alpha, gamma, tau, n0, sampler, top_p, temperature, beam, seed,
            layers, max_new_tokens, eos, amateur, weights, model, model_seed, prompt, layout,
            trace_out, report_out)
    }

    /// Reads a flat JSON config and overlays the flags on it.
    pub fn resolve(self, config: Option<&Path>) -> anyhow::Result<RunSettings> {
        let Some(path) = config else { return Ok(self) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: RunSettings =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(self.overlay(file))
    }

    /// Decoding parameters; `base` supplies anything not set.
    pub fn params(&self, base: DecodeParams) -> anyhow::Result<DecodeParams> {
        let mut p = match self.profile {
            Some(Profile::Hallucination) => DecodeParams {
                max_new_tokens: base.max_new_tokens,
                ..DecodeParams::default()
            },
            Some(Profile::Mme) => DecodeParams {
                max_new_tokens: base.max_new_tokens,
                ..DecodeParams::mme_profile()
            },
            None => base,
        };
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.tau {
            p.tau = v;
        }
        if self.n0.is_some() {
            p.n0 = self.n0;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(v) = self.max_new_tokens {
            p.max_new_tokens = v;
        }
        if self.eos.is_some() {
            p.eos_token = self.eos;
        }
        if let Some(layers) = &self.layers {
            p.layers = Some(layers.iter().copied().collect::<BTreeSet<_>>());
        }
        if let Some(a) = self.amateur {
            p.amateur = match a {
                AmateurKind::Gamma => AmateurMode::Gamma,
                AmateurKind::FullRemoval => AmateurMode::FullRemoval,
            };
        }
        let kind = self.sampler.or(self.beam.map(|_| SamplerKind::Beam));
        p.sampler = match kind {
            None => p.sampler,
            Some(SamplerKind::Greedy) => Sampler::Greedy,
            Some(SamplerKind::TopP) => Sampler::TopP {
                top_p: self.top_p.unwrap_or(0.9),
                temperature: self.temperature.unwrap_or(1.0),
            },
            Some(SamplerKind::Beam) => match self.beam {
                Some(width) => Sampler::Beam { width },
                None => bail!("--sampler beam needs --beam WIDTH"),
            },
        };
        if kind != Some(SamplerKind::TopP) && (self.top_p.is_some() || self.temperature.is_some()) {
            bail!("--top-p and --temperature need --sampler top-p");
        }
        if kind != Some(SamplerKind::Beam) && self.beam.is_some() {
            bail!(
                "--beam conflicts with --sampler {:?}",
                kind.unwrap_or(SamplerKind::Greedy)
            );
        }
        Ok(p)
    }
}

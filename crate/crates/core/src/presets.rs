//! Bundled configurations: `desk` runs on a laptop in minutes, `paper`
//! carries the full-size settings.

use std::fmt;
use std::str::FromStr;

use crate::data::CorpusConfig;
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::models::ModelDims;
use crate::signal::StftConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Desk,
    Paper,
}

impl PresetName {
    pub fn key(self) -> &'static str {
        match self {
            PresetName::Desk => "desk",
            PresetName::Paper => "paper",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(PresetName::Desk),
            "paper" => Ok(PresetName::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub stft: StftConfig,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub corpus: CorpusConfig,
}

impl Preset {
    pub fn named(name: PresetName) -> Self {
        match name {
            PresetName::Desk => Self::desk(),
            PresetName::Paper => Self::paper(),
        }
    }

    /// 8 kHz, 256-point frames (F = 129), L = 4.
    pub fn desk() -> Self {
        Self {
            stft: StftConfig::with_frame_len(256, 8000),
            dims: ModelDims::desk(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                sequence_len: 50,
                patience: 40,
                max_epochs: 300,
                ..TrainConfig::default()
            },
            enhance: EnhanceConfig {
                em_iters: 30,
                estep_iters: 20,
                estep_lr: 1e-2,
                ..EnhanceConfig::default()
            },
            corpus: CorpusConfig::default(),
        }
    }

    /// 16 kHz, 1024-point frames (F = 513), L = 16, batch 128.
    pub fn paper() -> Self {
        Self {
            stft: StftConfig::with_frame_len(1024, 16000),
            dims: ModelDims::paper(),
            train: TrainConfig {
                batch_size: 128,
                max_epochs: 500,
                ..TrainConfig::default()
            },
            enhance: EnhanceConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.dims.freq_bins != self.stft.freq_bins() {
            return Err(Error::Config(format!(
                "model has {} frequency bins but the STFT yields {}",
                self.dims.freq_bins,
                self.stft.freq_bins()
            )));
        }
        self.train.validate()?;
        self.enhance.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        for name in [PresetName::Desk, PresetName::Paper] {
            let p = Preset::named(name);
            p.validate().unwrap();
            assert_eq!(name.key().parse::<PresetName>().unwrap(), name);
        }
        assert_eq!(Preset::desk().stft.freq_bins(), 129);
        assert_eq!(Preset::paper().stft.freq_bins(), 513);
        assert_eq!(Preset::paper().dims.latent_dim, 16);
        assert_eq!(Preset::paper().enhance.rank, 8);
        assert!("huge".parse::<PresetName>().is_err());
    }

    #[test]
    fn mismatched_bins_are_rejected() {
        let mut p = Preset::desk();
        p.stft = StftConfig::with_frame_len(512, 8000);
        assert!(p.validate().is_err());
    }
}

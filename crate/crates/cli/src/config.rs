use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avdkf::data::CorpusConfig;
use avdkf::enhance::EnhanceConfig;
use avdkf::models::{ModelDims, ModelKind};
use avdkf::presets::{Preset, PresetName};
use avdkf::signal::StftConfig;
use avdkf::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Fully resolved run configuration. A config file only needs the keys it
/// changes; everything else comes from the selected preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Copied into `train.seed` and `enhance.seed`, and seeds corpus
    /// synthesis.
    pub seed: u64,
    pub kind: ModelKind,
    pub stft: StftConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory written by `synth` and read by `train`.
    pub corpus: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    pub run: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_preset(name: PresetName) -> Self {
        let p = Preset::named(name);
        Self {
            preset: name.key().to_string(),
            seed: 0,
            kind: ModelKind::AvDkf,
            stft: p.stft,
            model: p.dims,
            train: p.train,
            enhance: p.enhance,
            corpus: p.corpus,
            paths: Paths::default(),
        }
    }

    /// Preset defaults overlaid with the TOML document `text`. The preset is
    /// `preset_override` if given, else the document's `preset` key, else
    /// `desk`.
    pub fn from_toml(text: &str, preset_override: Option<PresetName>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("parsing configuration")?;
        let name = match (preset_override, user.get("preset")) {
            (Some(n), _) => n,
            (None, Some(v)) => v
                .as_str()
                .context("`preset` must be a string")?
                .parse()?,
            (None, None) => PresetName::Desk,
        };
        let mut value = toml::Value::try_from(Self::from_preset(name)).context("serializing preset")?;
        merge(&mut value, toml::Value::Table(user));
        let mut cfg: RunConfig = value.try_into().context("invalid configuration")?;
        cfg.preset = name.key().to_string();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset_override: Option<PresetName>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text, preset_override).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(Self::from_preset(preset_override.unwrap_or(PresetName::Desk))),
        }
    }

    /// Propagates the seed and checks cross-section consistency.
    pub fn finalize(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.enhance.seed = self.seed;
        self.model = self.model.for_kind(self.kind);
        if self.kind.is_av() && self.model.visual_dim == 0 {
            bail!("{} needs model.visual_dim > 0", self.kind);
        }
        let preset = Preset {
            stft: self.stft,
            dims: self.model.clone(),
            train: self.train.clone(),
            enhance: self.enhance.clone(),
            corpus: self.corpus.clone(),
        };
        preset.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Logs the resolved configuration and writes it to `dir/config.toml`.
    pub fn record(&self, dir: &Path) -> Result<()> {
        let text = self.to_toml()?;
        log::info!("resolved configuration:\n{text}");
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

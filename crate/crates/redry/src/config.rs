//! Declarative TOML configuration with `defaults < file < flags` precedence.

use std::path::{Path, PathBuf};

use redry_core::denoiser::DenoiserConfig;
use redry_core::dsp::StftConfig;
use redry_core::losses::LossWeights;
use redry_core::train::TrainSchedule;
use redry_core::vocoder::VocoderConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Model-size preset. `Base` and `Large` force the denoiser depth and width;
/// `Custom` keeps whatever the file and flags say.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Base,
    #[default]
    Large,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_root: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_root: "corpus".into(),
            checkpoints_dir: "checkpoints".into(),
            reports_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub stft: StftConfig,
    pub denoiser: DenoiserConfig,
    pub vocoder: VocoderConfig,
    pub losses: LossWeights,
    pub schedule: TrainSchedule,
    pub paths: Paths,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            preset: Preset::default(),
            seed: 0,
            stft: StftConfig::default(),
            denoiser: DenoiserConfig::large(),
            vocoder: VocoderConfig::v1(),
            losses: LossWeights::default(),
            schedule: TrainSchedule::default(),
            paths: Paths::default(),
        }
    }
}

/// Command-line overrides, applied after the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    /// Dotted `key.path = value` assignments; values parse as TOML, falling back to strings.
    pub set: Vec<String>,
}

impl ToolkitConfig {
    /// Resolves defaults, then the optional file, then `overrides`, and validates.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::format(p, e))?
            }
            None => toml::Table::new(),
        };
        for assignment in &overrides.set {
            apply_assignment(&mut table, assignment)?;
        }
        if let Some(p) = overrides.preset {
            table.insert("preset".into(), Value::String(preset_name(p).into()));
        }
        if let Some(s) = overrides.seed {
            let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} exceeds the TOML integer range")))?;
            table.insert("seed".into(), Value::Integer(s));
        }
        let mut cfg: ToolkitConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_preset();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Forces the denoiser size implied by the preset.
    pub fn apply_preset(&mut self) {
        let (n, c) = match self.preset {
            Preset::Base => (8, 256),
            Preset::Large => (12, 384),
            Preset::Custom => return,
        };
        let sized = DenoiserConfig::with_size(n, c);
        self.denoiser.n_layers = sized.n_layers;
        self.denoiser.c_emb = sized.c_emb;
        self.denoiser.c_hidden = sized.c_hidden;
        self.denoiser.n_heads = sized.n_heads;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.stft.validate()?;
        self.denoiser.validate()?;
        self.vocoder.validate()?;
        self.losses.validate()?;
        self.schedule.validate()?;
        if self.denoiser.c_bin != self.stft.n_mels || self.vocoder.mel_bins != self.stft.n_mels {
            return Err(Error::Config(format!(
                "denoiser ({}) and vocoder ({}) Mel bins must equal stft.n_mels ({})",
                self.denoiser.c_bin, self.vocoder.mel_bins, self.stft.n_mels
            )));
        }
        if self.vocoder.hop_length != self.stft.hop_length {
            return Err(Error::Config(format!(
                "vocoder hop {} differs from stft hop {}",
                self.vocoder.hop_length, self.stft.hop_length
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Base => "base",
        Preset::Large => "large",
        Preset::Custom => "custom",
    }
}

fn apply_assignment(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("redry.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ToolkitConfig::default();
        cfg.validate().unwrap();
        let back: ToolkitConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(dir.path(), "seed = 7\n[schedule]\nbatch_size = 16\nlog_every = 3\n");
        let flags = Overrides {
            seed: Some(9),
            set: vec!["schedule.batch_size=4".into()],
            ..Default::default()
        };
        let d = ToolkitConfig::resolve(None, &Overrides::default()).unwrap();
        let f = ToolkitConfig::resolve(Some(&file), &Overrides::default()).unwrap();
        let c = ToolkitConfig::resolve(None, &flags).unwrap();
        let fc = ToolkitConfig::resolve(Some(&file), &flags).unwrap();
        let def = ToolkitConfig::default();
        assert_eq!((d.seed, d.schedule.batch_size, d.schedule.log_every), (0, 64, def.schedule.log_every));
        assert_eq!((f.seed, f.schedule.batch_size, f.schedule.log_every), (7, 16, 3));
        assert_eq!((c.seed, c.schedule.batch_size, c.schedule.log_every), (9, 4, def.schedule.log_every));
        assert_eq!((fc.seed, fc.schedule.batch_size, fc.schedule.log_every), (9, 4, 3));
    }

    #[test]
    fn presets_force_denoiser_size() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(dir.path(), "preset = \"base\"\n[denoiser]\nn_layers = 3\n");
        let base = ToolkitConfig::resolve(Some(&file), &Overrides::default()).unwrap();
        assert_eq!((base.denoiser.n_layers, base.denoiser.c_emb, base.denoiser.n_heads), (8, 256, 4));
        let large = ToolkitConfig::resolve(
            Some(&file),
            &Overrides {
                preset: Some(Preset::Large),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((large.denoiser.n_layers, large.denoiser.c_emb, large.denoiser.c_hidden), (12, 384, 1536));
        let custom = ToolkitConfig::resolve(
            Some(&file),
            &Overrides {
                preset: Some(Preset::Custom),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((custom.denoiser.n_layers, custom.denoiser.c_emb), (3, 384));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "version = 2\n",
            "unknown_key = 1\n",
            "[stft]\nhop_length = 500\n",
            "[vocoder]\nupsample_rates = [8, 8, 4]\n",
            "seed = \"x\"\n",
        ] {
            let file = write(dir.path(), text);
            let err = ToolkitConfig::resolve(Some(&file), &Overrides::default()).unwrap_err();
            assert_eq!(err.exit_code(), crate::exit_code::VALIDATION, "{text}: {err}");
        }
        let bad = Overrides {
            set: vec!["noequals".into()],
            ..Default::default()
        };
        assert!(ToolkitConfig::resolve(None, &bad).is_err());
        let file = write(dir.path(), "[[broken");
        let err = ToolkitConfig::resolve(Some(&file), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), crate::exit_code::FORMAT);
    }

    #[test]
    fn string_overrides_fall_back_to_strings() {
        let c = ToolkitConfig::resolve(
            None,
            &Overrides {
                set: vec!["paths.corpus_root=/data/gtr".into(), "denoiser.norm=post".into()],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.paths.corpus_root, PathBuf::from("/data/gtr"));
        assert_eq!(c.denoiser.norm, redry_core::denoiser::NormPlacement::Post);
    }
}

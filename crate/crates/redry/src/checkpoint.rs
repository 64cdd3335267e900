//! Checkpoint files: safetensors archives of `f32` arrays with JSON metadata.
//!
//! | tensor name                         | contents                                |
//! |-------------------------------------|-----------------------------------------|
//! | `denoiser.<param>`                  | Mel denoiser weights                    |
//! | `generator.<param>`                 | vocoder generator weights               |
//! | `discriminators.<param>`            | MPD + MSD weights                       |
//! | `optim.<model>.exp_avg.<param>`     | AdamW first moment for `<model>`        |
//! | `optim.<model>.exp_avg_sq.<param>`  | AdamW second moment for `<model>`       |
//!
//! Metadata keys: `format` (= [`FORMAT`]), `format_version`, `kind`,
//! `toolkit_version`, `step`, `epoch`, the JSON configs `stft`,
//! `denoiser_config` and `vocoder_config`, and per optimizer
//! `optim.<model>.step` and `optim.<model>.config`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use redry_core::denoiser::{Denoiser, DenoiserConfig};
use redry_core::dsp::StftConfig;
use redry_core::nn::{groups, ParamSpec, ParamStore};
use redry_core::optim::{AdamW, AdamWConfig};
use redry_core::vocoder::{Discriminators, Generator, VocoderConfig};
use redry_core::Tensor;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT: &str = "redry-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Denoiser,
    Vocoder,
    Pipeline,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Denoiser => "denoiser",
            Kind::Vocoder => "vocoder",
            Kind::Pipeline => "pipeline",
        }
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Untyped archive contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: Kind,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(kind: Kind) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        meta.insert("kind".into(), kind.as_str().into());
        meta.insert("toolkit_version".into(), crate::VERSION.into());
        Self {
            kind,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_json<V: Serialize>(&mut self, key: &str, value: &V) {
        self.meta
            .insert(key.into(), serde_json::to_string(value).expect("metadata serializes"));
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn put_optimizer(&mut self, model: &str, store: &ParamStore<f32>, opt: &AdamW<f32>) {
        self.set_json(&format!("optim.{model}.step"), &opt.steps());
        self.set_json(&format!("optim.{model}.config"), opt.config());
        for (((_, name, _), m), v) in store.iter().zip(opt.exp_avg()).zip(opt.exp_avg_sq()) {
            self.tensors.insert(format!("optim.{model}.exp_avg.{name}"), m.clone());
            self.tensors.insert(format!("optim.{model}.exp_avg_sq.{name}"), v.clone());
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: BTreeMap<&String, Vec<u8>> = self
            .tensors
            .iter()
            .map(|(k, t)| (k, t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = self
            .tensors
            .iter()
            .map(|(k, t)| {
                safetensors::tensor::TensorView::new(Dtype::F32, t.shape().to_vec(), &bytes[k])
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::format(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        let out = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::format(path, e))?;
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let meta: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::format(path, "not a redry checkpoint"));
        }
        if meta.get("format_version") != Some(&FORMAT_VERSION.to_string()) {
            return Err(Error::format(path, format!("unsupported checkpoint version {:?}", meta.get("format_version"))));
        }
        let kind = match meta.get("kind").map(String::as_str) {
            Some("denoiser") => Kind::Denoiser,
            Some("vocoder") => Kind::Vocoder,
            Some("pipeline") => Kind::Pipeline,
            other => return Err(Error::format(path, format!("unknown checkpoint kind {other:?}"))),
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(path, format!("{name}: dtype {:?} is not F32", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(view.shape(), data)?);
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn expect_kind(&self, kinds: &[Kind]) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "checkpoint is a {} checkpoint, expected one of {:?}",
                self.kind.as_str(),
                kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>()
            )))
        }
    }

    pub fn json<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::validation(format!("checkpoint metadata lacks `{key}`")))?;
        serde_json::from_str(raw).map_err(|e| Error::validation(format!("checkpoint metadata `{key}`: {e}")))
    }

    fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Rebuilds a store in declaration order, checking every shape.
    pub fn take_store(&self, prefix: &str, group: u32, specs: &[ParamSpec]) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new(group);
        for s in specs {
            let t = self.tensor(&format!("{prefix}.{}", s.name))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::validation(format!(
                    "checkpoint tensor {prefix}.{} has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            store.add(s.name.clone(), t);
        }
        Ok(store)
    }

    /// Restores the optimizer state for `store`, if the archive has one.
    pub fn take_optimizer(&self, model: &str, store: &ParamStore<f32>) -> Result<Option<AdamW<f32>>> {
        let key = format!("optim.{model}.step");
        if !self.meta.contains_key(&key) {
            return Ok(None);
        }
        let step: u64 = self.json(&key)?;
        let cfg: AdamWConfig = self.json(&format!("optim.{model}.config"))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, _) in store.iter() {
            m.push(self.tensor(&format!("optim.{model}.exp_avg.{name}"))?);
            v.push(self.tensor(&format!("optim.{model}.exp_avg_sq.{name}"))?);
        }
        Ok(Some(AdamW::from_state(store, cfg, step, m, v)?))
    }
}

/// Denoiser weights with optional optimizer state.
#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint {
    pub model: Denoiser<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub step: u64,
}

impl DenoiserCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(Kind::Denoiser);
        a.set_json("denoiser_config", self.model.config());
        a.set_json("step", &self.step);
        a.put_store("denoiser", self.model.params());
        if let Some(o) = &self.optimizer {
            a.put_optimizer("denoiser", self.model.params(), o);
        }
        a.save(path)
    }

    /// Loads a denoiser from a denoiser or pipeline checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(&[Kind::Denoiser, Kind::Pipeline])?;
        let cfg: DenoiserConfig = a.json("denoiser_config")?;
        cfg.validate()?;
        let store = a.take_store("denoiser", groups::DENOISER, &cfg.param_specs())?;
        let optimizer = a.take_optimizer("denoiser", &store)?;
        let step = if a.meta.contains_key("step") { a.json("step")? } else { 0 };
        Ok(Self {
            model: Denoiser::from_params(&cfg, store)?,
            optimizer,
            step,
        })
    }
}

/// Generator and discriminators with optional optimizer states.
#[derive(Debug, Clone)]
pub struct VocoderCheckpoint {
    pub generator: Generator<f32>,
    pub discriminators: Discriminators<f32>,
    pub opt_g: Option<AdamW<f32>>,
    pub opt_d: Option<AdamW<f32>>,
    pub step: u64,
    pub epoch: u64,
}

impl VocoderCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(Kind::Vocoder);
        a.set_json("vocoder_config", self.generator.config());
        a.set_json("step", &self.step);
        a.set_json("epoch", &self.epoch);
        a.put_store("generator", self.generator.params());
        a.put_store("discriminators", self.discriminators.params());
        if let Some(o) = &self.opt_g {
            a.put_optimizer("generator", self.generator.params(), o);
        }
        if let Some(o) = &self.opt_d {
            a.put_optimizer("discriminators", self.discriminators.params(), o);
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind(&[Kind::Vocoder])?;
        let cfg: VocoderConfig = a.json("vocoder_config")?;
        cfg.validate()?;
        let g = a.take_store("generator", groups::GENERATOR, &cfg.generator_specs())?;
        let d = a.take_store("discriminators", groups::DISCRIMINATORS, &cfg.discriminator.specs())?;
        let opt_g = a.take_optimizer("generator", &g)?;
        let opt_d = a.take_optimizer("discriminators", &d)?;
        Ok(Self {
            generator: Generator::from_params(&cfg, g)?,
            discriminators: Discriminators::from_params(&cfg.discriminator, d)?,
            opt_g,
            opt_d,
            step: a.json("step")?,
            epoch: a.json("epoch")?,
        })
    }
}

/// Everything `infer` needs: analysis config, denoiser and generator.
#[derive(Debug, Clone)]
pub struct PipelineCheckpoint {
    pub stft: StftConfig,
    pub denoiser: Denoiser<f32>,
    pub generator: Generator<f32>,
}

impl PipelineCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(Kind::Pipeline);
        a.set_json("stft", &self.stft);
        a.set_json("denoiser_config", self.denoiser.config());
        a.set_json("vocoder_config", self.generator.config());
        a.put_store("denoiser", self.denoiser.params());
        a.put_store("generator", self.generator.params());
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind(&[Kind::Pipeline])?;
        let stft: StftConfig = a.json("stft")?;
        stft.validate()?;
        let dcfg: DenoiserConfig = a.json("denoiser_config")?;
        let vcfg: VocoderConfig = a.json("vocoder_config")?;
        dcfg.validate()?;
        vcfg.validate()?;
        let d = a.take_store("denoiser", groups::DENOISER, &dcfg.param_specs())?;
        let g = a.take_store("generator", groups::GENERATOR, &vcfg.generator_specs())?;
        let p = Self {
            stft,
            denoiser: Denoiser::from_params(&dcfg, d)?,
            generator: Generator::from_params(&vcfg, g)?,
        };
        p.check()?;
        Ok(p)
    }

    /// Checks that the three configs agree on bins and hop.
    pub fn check(&self) -> Result<()> {
        let (d, g) = (self.denoiser.config(), self.generator.config());
        if d.c_bin != self.stft.n_mels || g.mel_bins != self.stft.n_mels || g.hop_length != self.stft.hop_length {
            return Err(Error::validation(format!(
                "pipeline mismatch: stft ({} bins, hop {}), denoiser {} bins, vocoder ({} bins, hop {})",
                self.stft.n_mels, self.stft.hop_length, d.c_bin, g.mel_bins, g.hop_length
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use redry_core::train::TrainSchedule;

    #[test]
    fn denoiser_round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.safetensors");
        let model = Denoiser::<f32>::new(&DenoiserConfig::tiny(), 4).unwrap();
        let mut opt = AdamW::new(model.params(), TrainSchedule::default().denoiser_adam()).unwrap();
        let grads: Vec<_> = model.params().iter().map(|(_, _, t)| Some(t.map(|v| v * 0.5))).collect();
        let mut model = model;
        opt.step(model.params_mut(), &grads, 1e-3).unwrap();
        let ck = DenoiserCheckpoint {
            model,
            optimizer: Some(opt),
            step: 1,
        };
        ck.save(&p).unwrap();
        assert!(!dir.path().join("d.safetensors.tmp").exists());
        let back = DenoiserCheckpoint::load(&p).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.step, 1);
    }

    #[test]
    fn wrong_kind_corrupt_and_mismatched_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.safetensors");
        let ck = DenoiserCheckpoint {
            model: Denoiser::<f32>::new(&DenoiserConfig::tiny(), 1).unwrap(),
            optimizer: None,
            step: 0,
        };
        ck.save(&p).unwrap();
        assert_eq!(VocoderCheckpoint::load(&p).unwrap_err().exit_code(), crate::exit_code::VALIDATION);
        let junk = dir.path().join("junk.safetensors");
        fs::write(&junk, b"not a checkpoint at all").unwrap();
        assert_eq!(DenoiserCheckpoint::load(&junk).unwrap_err().exit_code(), crate::exit_code::FORMAT);

        let mut a = Archive::load(&p).unwrap();
        a.set_json("denoiser_config", &DenoiserConfig::with_size(2, 64));
        a.save(&p).unwrap();
        assert_eq!(DenoiserCheckpoint::load(&p).unwrap_err().exit_code(), crate::exit_code::VALIDATION);
    }
}

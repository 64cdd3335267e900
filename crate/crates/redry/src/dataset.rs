//! Paired corpus layout, JSONL manifests, hop-aligned crops and batching.
//!
//! A corpus root holds `dry/*.wav`, `wet/*.wav` and [`MANIFEST_FILE`]. The
//! manifest's first line is a header with the schema version and master
//! seed; every following line is one [`ManifestEntry`].

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redry_core::audio::{stack_mels, stack_waves};
use redry_core::dsp::MelFrontend;
use redry_core::fx::EffectChainConfig;
use redry_core::{AudioClip, MelSpec, Tensor, SAMPLE_RATE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wav;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dry_path: PathBuf,
    pub wet_path: PathBuf,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect_config: Option<EffectChainConfig>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// SplitMix64 step; derives independent per-item seeds from a root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic split labels for `n` items, in item order.
pub fn assign_splits(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

fn wav_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_file() && name.to_ascii_lowercase().ends_with(".wav") {
            out.insert(name);
        }
    }
    Ok(out)
}

/// Sorted WAV file names in `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<String>> {
    Ok(wav_names(dir)?.into_iter().collect())
}

/// Pairs same-named WAVs in `dry_dir` and `wet_dir` and assigns splits.
pub fn build_manifest(dry_dir: &Path, wet_dir: &Path, ratios: (f64, f64, f64), master_seed: u64) -> Result<PairManifest> {
    let dry = wav_names(dry_dir)?;
    let wet = wav_names(wet_dir)?;
    let orphans: Vec<String> = dry
        .symmetric_difference(&wet)
        .map(|n| if dry.contains(n) { format!("dry/{n}") } else { format!("wet/{n}") })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::validation(format!("unpaired files: {}", orphans.join(", "))));
    }
    if dry.is_empty() {
        return Err(Error::validation(format!("no WAV pairs in {}", dry_dir.display())));
    }
    let splits = assign_splits(dry.len(), ratios, master_seed)?;
    let mut entries = Vec::with_capacity(dry.len());
    for (name, split) in dry.iter().zip(splits) {
        let (dp, wp) = (dry_dir.join(name), wet_dir.join(name));
        let (dr, _, dn) = wav::probe(&dp)?;
        let (wr, _, wn) = wav::probe(&wp)?;
        if dr != wr || dn != wn {
            return Err(Error::validation(format!(
                "pair {name}: dry is {dn} frames at {dr} Hz, wet is {wn} frames at {wr} Hz"
            )));
        }
        entries.push(ManifestEntry {
            id: name.trim_end_matches(".wav").trim_end_matches(".WAV").to_string(),
            dry_path: dp,
            wet_path: wp,
            duration_s: dn as f64 / dr as f64,
            effect_config: None,
            split,
        });
    }
    Ok(PairManifest { master_seed, entries })
}

impl PairManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Writes the manifest; paths under `root` are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new(""));
        let mut buf = Vec::new();
        let header = Header {
            schema_version: MANIFEST_SCHEMA_VERSION,
            master_seed: self.master_seed,
        };
        writeln!(buf, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
        for e in &self.entries {
            let mut e = e.clone();
            for p in [&mut e.dry_path, &mut e.wet_path] {
                if let Ok(rel) = p.strip_prefix(root) {
                    *p = rel.to_path_buf();
                }
            }
            writeln!(buf, "{}", serde_json::to_string(&e).expect("entry serializes")).expect("vec write");
        }
        crate::checkpoint::write_atomic(path, &buf)
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(""));
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("manifest schema {} is not {MANIFEST_SCHEMA_VERSION}", header.schema_version),
            ));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry =
                serde_json::from_str(&line).map_err(|err| Error::format(path, format!("line {}: {err}", i + 2)))?;
            for p in [&mut e.dry_path, &mut e.wet_path] {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
            entries.push(e);
        }
        Ok(Self {
            master_seed: header.master_seed,
            entries,
        })
    }
}

/// A dry/wet pair resident in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair {
    pub id: String,
    pub dry: AudioClip,
    pub wet: AudioClip,
}

impl LoadedPair {
    pub fn new(id: impl Into<String>, dry: AudioClip, wet: AudioClip) -> Result<Self> {
        let id = id.into();
        if dry.len() != wet.len() || dry.sample_rate() != wet.sample_rate() {
            return Err(Error::validation(format!("pair {id}: dry and wet differ in length or rate")));
        }
        Ok(Self { id, dry, wet })
    }

    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let dry = wav::load_audio(&entry.dry_path, SAMPLE_RATE)?;
        let wet = wav::load_audio(&entry.wet_path, SAMPLE_RATE)?;
        Self::new(entry.id.clone(), dry, wet)
    }
}

/// One cropped training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// `(frames - 1) · hop` samples starting at `offset_samples`.
    pub dry_wave: AudioClip,
    pub wet_mel: MelSpec,
    pub dry_mel: MelSpec,
    pub source_id: String,
    pub offset_samples: usize,
}

/// Crop length in samples: `crop_seconds` rounded down to whole hops.
pub fn crop_samples(crop_seconds: f64, sample_rate: u32, hop: usize) -> Result<usize> {
    let n = (crop_seconds * sample_rate as f64 / hop as f64).floor();
    if !(n >= 1.0) {
        return Err(Error::validation(format!("crop of {crop_seconds} s is shorter than one hop")));
    }
    Ok(n as usize * hop)
}

/// Crops both signals at the same random hop-aligned offset and computes their Mel.
pub fn make_example(
    pair: &LoadedPair,
    crop_seconds: f64,
    frontend: &MelFrontend,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let hop = frontend.config().hop_length;
    let len = crop_samples(crop_seconds, pair.dry.sample_rate(), hop)?;
    if len > pair.dry.len() {
        return Err(Error::validation(format!(
            "crop of {crop_seconds} s ({len} samples) exceeds pair {} of {} samples",
            pair.id,
            pair.dry.len()
        )));
    }
    let slots = (pair.dry.len() - len) / hop;
    let offset = hop * rng.gen_range(0..=slots);
    let dry_wave = pair.dry.segment(offset, len)?;
    let wet = pair.wet.segment(offset, len)?;
    Ok(TrainingExample {
        dry_mel: frontend.compute(&dry_wave)?,
        wet_mel: frontend.compute(&wet)?,
        dry_wave,
        source_id: pair.id.clone(),
        offset_samples: offset,
    })
}

/// Stacked examples: Mel `[B, F, bins]`, waves `[B, 1, (F - 1) · hop]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub wet_mel: Tensor<f32>,
    pub dry_mel: Tensor<f32>,
    pub dry_wave: Tensor<f32>,
    pub ids: Vec<String>,
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample]) -> Result<Self> {
        let wet: Vec<&MelSpec> = examples.iter().map(|e| &e.wet_mel).collect();
        let dry: Vec<&MelSpec> = examples.iter().map(|e| &e.dry_mel).collect();
        let waves: Vec<&AudioClip> = examples.iter().map(|e| &e.dry_wave).collect();
        Ok(Self {
            wet_mel: stack_mels(&wet)?,
            dry_mel: stack_mels(&dry)?,
            dry_wave: stack_waves(&waves)?,
            ids: examples.iter().map(|e| e.source_id.clone()).collect(),
            offsets: examples.iter().map(|e| e.offset_samples).collect(),
        })
    }
}

/// In-memory pairs of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<LoadedPair>,
}

impl Corpus {
    pub fn load(manifest: &PairManifest, split: Split) -> Result<Self> {
        let pairs = manifest.split(split).map(LoadedPair::load).collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Endless batch iterator. The order within epoch `e` depends only on
/// `(seed, e)`: pairs are visited in a seeded permutation and cropped with
/// a seeded generator.
#[derive(Debug)]
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    frontend: &'a MelFrontend,
    seed: u64,
    batch_size: usize,
    crop_seconds: f64,
    epoch: u64,
    index: usize,
    order: Vec<usize>,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a Corpus, frontend: &'a MelFrontend, seed: u64, batch_size: usize, crop_seconds: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::validation("cannot batch an empty split"));
        }
        if batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        let mut s = Self {
            corpus,
            frontend,
            seed,
            batch_size,
            crop_seconds,
            epoch: 0,
            index: 0,
            order: Vec::new(),
        };
        s.start_epoch(0);
        Ok(s)
    }

    /// Batches per epoch: whole batches of the split, at least one.
    pub fn batches_per_epoch(&self) -> usize {
        (self.corpus.len() / self.batch_size).max(1)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Repositions at the start of `epoch`.
    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.index = 0;
        self.order = (0..self.corpus.len()).collect();
        self.order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2 * epoch)));
    }

    /// Positions the stream so that the next batch is global batch `n`.
    pub fn seek(&mut self, n: u64) {
        let per = self.batches_per_epoch() as u64;
        self.start_epoch(n / per);
        self.index = (n % per) as usize;
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.index == self.batches_per_epoch() {
            self.start_epoch(self.epoch + 1);
        }
        let n = self.corpus.len();
        let start = self.index * self.batch_size;
        let crop_seed = derive_seed(derive_seed(self.seed, 2 * self.epoch + 1), self.index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
        let examples = (0..self.batch_size)
            .map(|j| {
                let pair = &self.corpus.pairs[self.order[(start + j) % n]];
                make_example(pair, self.crop_seconds, self.frontend, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        self.index += 1;
        Batch::from_examples(&examples)
    }
}

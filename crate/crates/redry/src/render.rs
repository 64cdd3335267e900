//! Builds a paired corpus from a directory of dry recordings.

use std::path::Path;

use redry_core::fx::{render_pair, sample_effect_config};
use redry_core::SAMPLE_RATE;

use crate::dataset::{assign_splits, derive_seed, list_wavs, ManifestEntry, PairManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::wav::{load_audio, save_audio};

/// Renders every WAV in `input_dir` with its own sampled effect chain and
/// writes `out_dir/dry`, `out_dir/wet` and the manifest. Clip `i` (in file
/// name order) uses the chain seed `derive_seed(master_seed, i)`.
pub fn render_corpus(input_dir: &Path, out_dir: &Path, master_seed: u64, ratios: (f64, f64, f64)) -> Result<PairManifest> {
    let names = list_wavs(input_dir)?;
    if names.is_empty() {
        return Err(Error::validation(format!("no WAV files in {}", input_dir.display())));
    }
    let splits = assign_splits(names.len(), ratios, master_seed)?;
    let (dry_dir, wet_dir) = (out_dir.join("dry"), out_dir.join("wet"));
    let mut entries = Vec::with_capacity(names.len());
    for (i, (name, split)) in names.iter().zip(splits).enumerate() {
        let clip = load_audio(&input_dir.join(name), SAMPLE_RATE)?;
        let cfg = sample_effect_config(derive_seed(master_seed, i as u64));
        let (dry, wet) = render_pair(&clip, &cfg)?;
        let (dp, wp) = (dry_dir.join(name), wet_dir.join(name));
        save_audio(&dry, &dp)?;
        save_audio(&wet, &wp)?;
        entries.push(ManifestEntry {
            id: name.trim_end_matches(".wav").trim_end_matches(".WAV").to_string(),
            dry_path: dp,
            wet_path: wp,
            duration_s: dry.duration_secs(),
            effect_config: Some(cfg),
            split,
        });
    }
    let manifest = PairManifest { master_seed, entries };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

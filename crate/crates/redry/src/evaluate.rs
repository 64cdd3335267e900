//! Corpus evaluation: per-pair ESR, SI-SDR and MR-STFT plus corpus FAD.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use redry_core::metrics::{frechet_distance, pair_metrics, EmbeddingSet, ReferenceExtractor, REFERENCE_EXTRACTOR_ID};
use redry_core::{AudioClip, SAMPLE_RATE};
use serde::{Deserialize, Serialize};

use crate::dataset::list_wavs;
use crate::error::{Error, Result};
use crate::wav::load_audio;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const COLUMNS: [&str; 4] = ["FAD", "ESR", "SISDR", "MR-STFT"];
/// Largest length difference, in samples, trimmed away before comparing a pair.
pub const LENGTH_TOLERANCE: usize = 512;

/// Source of the embeddings behind FAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Embedding {
    /// The built-in log-Mel statistics extractor.
    Reference,
    /// Precomputed embeddings in a JSON file (see [`ExternalEmbeddings`]).
    External(PathBuf),
}

impl FromStr for Embedding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "reference" => Ok(Self::Reference),
            Some(("external", p)) if !p.is_empty() => Ok(Self::External(p.into())),
            _ => Err(format!("expected `reference` or `external:<path>`, got `{s}`")),
        }
    }
}

/// Layout of an external embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEmbeddings {
    pub model_id: String,
    pub estimates: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id: String,
    pub esr: f64,
    pub si_sdr_db: f64,
    pub mr_stft: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    fn of(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

/// Corpus-level values in table order: FAD, ESR, SISDR, MR-STFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    /// `None` when FAD could not be computed; see `fad_note`.
    pub fad: Option<f64>,
    pub esr: Aggregate,
    pub si_sdr_db: Aggregate,
    pub mr_stft: Aggregate,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fad_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub embedding_model_id: String,
    pub columns: Vec<String>,
    pub corpus: CorpusRow,
    pub per_pair: Vec<PairRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with the corpus means.
    pub fn table(&self) -> String {
        let fad = self.corpus.fad.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        let mut s = format!("{:>10} {:>10} {:>10} {:>10}\n", COLUMNS[0], COLUMNS[1], COLUMNS[2], COLUMNS[3]);
        let _ = writeln!(
            s,
            "{:>10} {:>10.4} {:>10.3} {:>10.4}",
            fad, self.corpus.esr.mean, self.corpus.si_sdr_db.mean, self.corpus.mr_stft.mean
        );
        s
    }
}

/// Trims a pair to a common length if the two differ by at most [`LENGTH_TOLERANCE`].
pub fn align_pair(id: &str, est: AudioClip, reference: AudioClip) -> Result<(AudioClip, AudioClip)> {
    let (a, b) = (est.len(), reference.len());
    if a.abs_diff(b) > LENGTH_TOLERANCE {
        return Err(Error::validation(format!(
            "{id}: estimate has {a} samples, reference {b}; lengths differ by more than {LENGTH_TOLERANCE}"
        )));
    }
    let n = a.min(b);
    Ok((est.segment(0, n)?, reference.segment(0, n)?))
}

/// Computes the report for same-named WAVs in the two directories.
pub fn evaluate_corpus(estimates_dir: &Path, references_dir: &Path, embedding: &Embedding) -> Result<MetricsReport> {
    let est: BTreeSet<String> = list_wavs(estimates_dir)?.into_iter().collect();
    let refs: BTreeSet<String> = list_wavs(references_dir)?.into_iter().collect();
    let unmatched: Vec<&String> = est.symmetric_difference(&refs).collect();
    if !unmatched.is_empty() {
        return Err(Error::validation(format!(
            "unmatched files: {}",
            unmatched.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    if est.is_empty() {
        return Err(Error::validation(format!("no WAV files in {}", estimates_dir.display())));
    }
    let mut pairs = Vec::with_capacity(est.len());
    for name in &est {
        let e = load_audio(&estimates_dir.join(name), SAMPLE_RATE)?;
        let r = load_audio(&references_dir.join(name), SAMPLE_RATE)?;
        let id = name.trim_end_matches(".wav").trim_end_matches(".WAV").to_string();
        let (e, r) = align_pair(&id, e, r)?;
        pairs.push((id, e, r));
    }
    evaluate_pairs(&pairs, embedding)
}

/// Computes the report for in-memory `(id, estimate, reference)` triples.
pub fn evaluate_pairs(pairs: &[(String, AudioClip, AudioClip)], embedding: &Embedding) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::validation("cannot evaluate an empty corpus"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, e, r) in pairs {
        let m = pair_metrics(e, r).map_err(|err| Error::validation(format!("{id}: {err}")))?;
        rows.push(PairRow {
            id: id.clone(),
            esr: m.esr,
            si_sdr_db: m.si_sdr_db,
            mr_stft: m.mr_stft,
        });
    }
    let (est_set, ref_set) = match embedding {
        Embedding::Reference => {
            let x = ReferenceExtractor::default();
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (_, e, r) in pairs {
                a.extend(x.embed(e)?);
                b.extend(x.embed(r)?);
            }
            (EmbeddingSet::new(a, REFERENCE_EXTRACTOR_ID)?, EmbeddingSet::new(b, REFERENCE_EXTRACTOR_ID)?)
        }
        Embedding::External(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let ext: ExternalEmbeddings = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
            (
                EmbeddingSet::new(ext.estimates, ext.model_id.clone())?,
                EmbeddingSet::new(ext.references, ext.model_id)?,
            )
        }
    };
    let (fad, fad_note) = if est_set.len() < est_set.dim() + 1 || ref_set.len() < ref_set.dim() + 1 {
        (
            None,
            Some(format!(
                "insufficient embeddings: {} estimate and {} reference vectors, need at least {} each",
                est_set.len(),
                ref_set.len(),
                est_set.dim() + 1
            )),
        )
    } else {
        match frechet_distance(&est_set, &ref_set) {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let col = |f: fn(&PairRow) -> f64| Aggregate::of(rows.iter().map(f).collect());
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        toolkit_version: crate::VERSION.into(),
        embedding_model_id: est_set.model_id.clone(),
        columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
        corpus: CorpusRow {
            fad,
            esr: col(|r| r.esr),
            si_sdr_db: col(|r| r.si_sdr_db),
            mr_stft: col(|r| r.mr_stft),
            count: rows.len(),
            fad_note,
        },
        per_pair: rows,
    })
}

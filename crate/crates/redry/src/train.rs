//! Training loops for the three phases: batching, logging, validation,
//! early stopping, checkpoints and divergence dumps.
//!
//! Each phase writes into its output directory:
//!
//! | file | content |
//! |------|---------|
//! | `<phase>-log.jsonl` | one [`LogRecord`] per line |
//! | `<phase>-last.safetensors` | latest state, with optimizer moments |
//! | `<phase>-best.safetensors` | state at the best validation loss |
//! | `pipeline.safetensors` | finetune only: denoiser and best generator |
//! | `<phase>-divergence.json` / `.safetensors` | written when a loss turns non-finite |

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use redry_core::denoiser::Denoiser;
use redry_core::dsp::MelFrontend;
use redry_core::train::{DenoiserTrainer, EarlyStopper, Phase, Verdict, VocoderTrainer};
use redry_core::vocoder::{Discriminators, Generator};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{DenoiserCheckpoint, PipelineCheckpoint, VocoderCheckpoint};
use crate::config::ToolkitConfig;
use crate::dataset::{derive_seed, Batch, BatchStream, Corpus, PairManifest, Split};
use crate::error::{Error, Result};

const DATA_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const DENOISER_INIT: u64 = 4;
const GENERATOR_INIT: u64 = 5;
const DISCRIMINATOR_INIT: u64 = 6;
const RECENT_RECORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Train,
    Val,
}

/// One line of the training log. Train records hold the mean losses since
/// the previous train record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub wall_s: f64,
    pub losses: BTreeMap<String, f64>,
}

/// Train and validation splits of a manifest, held in memory.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
}

impl Splits {
    pub fn load(manifest: &PairManifest) -> Result<Self> {
        Ok(Self {
            train: Corpus::load(manifest, Split::Train)?,
            val: Corpus::load(manifest, Split::Val)?,
        })
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::validation("the train split is empty"));
        }
        if self.val.is_empty() {
            return Err(Error::validation("the validation split is empty"));
        }
        Ok(())
    }
}

/// Summary of one phase run.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub history: Vec<LogRecord>,
    pub final_step: u64,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutcome {
    pub checkpoint: DenoiserCheckpoint,
    pub report: PhaseOutcome,
}

#[derive(Debug, Clone)]
pub struct VocoderOutcome {
    pub checkpoint: VocoderCheckpoint,
    pub report: PhaseOutcome,
    /// Finetune only.
    pub pipeline: Option<PathBuf>,
}

fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Denoiser => "denoiser",
        Phase::Vocoder => "vocoder",
        Phase::Finetune => "finetune",
    }
}

/// Log file, history and timing shared by all phases.
struct Recorder {
    phase: Phase,
    dir: PathBuf,
    log: File,
    start: Instant,
    history: Vec<LogRecord>,
    sums: BTreeMap<String, f64>,
    count: u64,
}

impl Recorder {
    fn open(phase: Phase, dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}-log.jsonl", phase_name(phase)));
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            phase,
            dir: dir.to_path_buf(),
            log,
            start: Instant::now(),
            history: Vec::new(),
            sums: BTreeMap::new(),
            count: 0,
        })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}-{suffix}", phase_name(self.phase)))
    }

    fn accumulate(&mut self, losses: &[(&str, f64)]) {
        for &(k, v) in losses {
            *self.sums.entry(k.to_string()).or_insert(0.0) += v;
        }
        self.count += 1;
    }

    fn emit(&mut self, kind: RecordKind, step: u64, epoch: u64, lr: f64, losses: BTreeMap<String, f64>) -> Result<()> {
        let rec = LogRecord {
            phase: self.phase,
            kind,
            step,
            epoch,
            lr,
            wall_s: self.start.elapsed().as_secs_f64(),
            losses,
        };
        let line = serde_json::to_string(&rec).expect("log record serializes");
        let path = self.path("log.jsonl");
        writeln!(self.log, "{line}").map_err(|e| Error::io(&path, e))?;
        self.history.push(rec);
        Ok(())
    }

    fn flush_train(&mut self, step: u64, epoch: u64, lr: f64) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        let n = self.count as f64;
        let means = std::mem::take(&mut self.sums).into_iter().map(|(k, v)| (k, v / n)).collect();
        self.count = 0;
        self.emit(RecordKind::Train, step, epoch, lr, means)
    }

    fn validation(&mut self, step: u64, epoch: u64, lr: f64, name: &str, value: f64) -> Result<()> {
        self.emit(RecordKind::Val, step, epoch, lr, BTreeMap::from([(name.to_string(), value)]))
    }

    /// Writes the diagnostic dump and hands back the divergence error.
    fn diverged(&self, err: Error, save_state: impl FnOnce(&Path) -> Result<()>) -> Error {
        let Error::Core(redry_core::Error::Divergence { step, what, value }) = &err else {
            return err;
        };
        let state = self.path("divergence.safetensors");
        let recent = &self.history[self.history.len().saturating_sub(RECENT_RECORDS)..];
        let dump = serde_json::json!({
            "phase": self.phase,
            "step": step,
            "loss": what,
            "value": value.to_string(),
            "state": state,
            "recent": recent,
        });
        let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
        let written = save_state(&state)
            .and_then(|_| crate::checkpoint::write_atomic(&self.path("divergence.json"), text.as_bytes()));
        if let Err(e) = written {
            eprintln!("warning: could not write the divergence dump: {e}");
        }
        err
    }

    fn outcome(self, final_step: u64, stopper: &EarlyStopper, stopped_early: bool, have_best: bool) -> PhaseOutcome {
        PhaseOutcome {
            final_step,
            best_val: stopper.best(),
            stopped_early,
            last_checkpoint: self.path("last.safetensors"),
            best_checkpoint: have_best.then(|| self.path("best.safetensors")),
            history: self.history,
        }
    }
}

/// A fixed set of validation batches, identical across validations.
fn validation_batches(cfg: &ToolkitConfig, val: &Corpus, frontend: &MelFrontend) -> Result<Vec<Batch>> {
    let s = &cfg.schedule;
    let mut stream = BatchStream::new(val, frontend, derive_seed(cfg.seed, VAL_STREAM), s.batch_size, s.crop_seconds)?;
    (0..stream.batches_per_epoch()).map(|_| stream.next_batch()).collect()
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok(sum / n.max(1) as f64)
}

fn due(step: u64, every: u64) -> bool {
    every > 0 && step % every == 0
}

/// Trains the Mel denoiser on (wet Mel, dry Mel) pairs, starting from
/// `resume` when given.
pub fn train_denoiser(
    cfg: &ToolkitConfig,
    data: &Splits,
    resume: Option<DenoiserCheckpoint>,
    out_dir: &Path,
) -> Result<DenoiserOutcome> {
    cfg.validate()?;
    data.check()?;
    let s = &cfg.schedule;
    let frontend = MelFrontend::new(&cfg.stft)?;
    let seed = derive_seed(cfg.seed, DROPOUT_STREAM);
    let appending = resume.is_some();
    let mut trainer = match resume {
        Some(DenoiserCheckpoint {
            model,
            optimizer: Some(opt),
            ..
        }) => DenoiserTrainer::resume(model, opt, s, seed)?,
        Some(DenoiserCheckpoint { model, .. }) => DenoiserTrainer::new(model, s, seed)?,
        None => DenoiserTrainer::new(Denoiser::new(&cfg.denoiser, derive_seed(cfg.seed, DENOISER_INIT))?, s, seed)?,
    };
    if trainer.model.config().c_bin != cfg.stft.n_mels {
        return Err(Error::validation(format!(
            "denoiser expects {} Mel bins, the STFT config produces {}",
            trainer.model.config().c_bin,
            cfg.stft.n_mels
        )));
    }
    let val_batches = validation_batches(cfg, &data.val, &frontend)?;
    let mut stream = BatchStream::new(&data.train, &frontend, derive_seed(cfg.seed, DATA_STREAM), s.batch_size, s.crop_seconds)?;
    stream.seek(trainer.step());
    let mut rec = Recorder::open(Phase::Denoiser, out_dir, appending)?;
    let mut stopper = EarlyStopper::new(s.early_stop_patience, s.early_stopping);
    let max = s.max_steps(Phase::Denoiser);
    let snapshot = |t: &DenoiserTrainer<f32>| DenoiserCheckpoint {
        model: t.model.clone(),
        optimizer: Some(t.optimizer.clone()),
        step: t.step(),
    };
    let (mut stopped, mut have_best) = (false, false);

    while trainer.step() < max {
        let batch = stream.next_batch()?;
        let lr = trainer.current_lr();
        let loss = match trainer.train_step(&batch.wet_mel, &batch.dry_mel) {
            Ok(l) => l,
            Err(e) => return Err(rec.diverged(e.into(), |p| snapshot(&trainer).save(p))),
        };
        let step = trainer.step();
        rec.accumulate(&[("l1_mel", loss)]);
        if step == 1 || due(step, s.log_every) {
            rec.flush_train(step, stream.epoch(), lr)?;
        }
        if due(step, s.validate_every) || step == max {
            let v = mean(val_batches.iter().map(|b| Ok(trainer.eval_loss(&b.wet_mel, &b.dry_mel)?)))?;
            rec.validation(step, stream.epoch(), lr, "l1_mel", v)?;
            match stopper.observe(v) {
                Verdict::Improved => {
                    snapshot(&trainer).save(&rec.path("best.safetensors"))?;
                    have_best = true;
                }
                Verdict::NoImprovement => {}
                Verdict::Stop => stopped = true,
            }
        }
        if due(step, s.checkpoint_every) {
            snapshot(&trainer).save(&rec.path("last.safetensors"))?;
        }
        if stopped {
            break;
        }
    }
    rec.flush_train(trainer.step(), stream.epoch(), trainer.current_lr())?;
    let checkpoint = snapshot(&trainer);
    checkpoint.save(&rec.path("last.safetensors"))?;
    Ok(DenoiserOutcome {
        report: rec.outcome(trainer.step(), &stopper, stopped, have_best),
        checkpoint,
    })
}

/// Trains the vocoder on ground-truth dry Mel.
pub fn train_vocoder(
    cfg: &ToolkitConfig,
    data: &Splits,
    resume: Option<VocoderCheckpoint>,
    out_dir: &Path,
) -> Result<VocoderOutcome> {
    let appending = resume.is_some();
    let start = match resume {
        Some(ck) => ck,
        None => VocoderCheckpoint {
            generator: Generator::new(&cfg.vocoder, derive_seed(cfg.seed, GENERATOR_INIT))?,
            discriminators: Discriminators::new(&cfg.vocoder.discriminator, derive_seed(cfg.seed, DISCRIMINATOR_INIT))?,
            opt_g: None,
            opt_d: None,
            step: 0,
            epoch: 0,
        },
    };
    vocoder_phase(cfg, data, Phase::Vocoder, start, None, appending, out_dir)
}

/// Fine-tunes a trained vocoder on the outputs of the frozen `denoiser`.
/// A fresh run starts new optimizers from `vocoder`'s weights; with
/// `resume` set, `vocoder` is an earlier finetune checkpoint and its
/// optimizer state and step are kept.
pub fn finetune(
    cfg: &ToolkitConfig,
    data: &Splits,
    denoiser: &Denoiser<f32>,
    vocoder: VocoderCheckpoint,
    resume: bool,
    out_dir: &Path,
) -> Result<VocoderOutcome> {
    let start = if resume {
        vocoder
    } else {
        VocoderCheckpoint {
            opt_g: None,
            opt_d: None,
            step: 0,
            epoch: 0,
            ..vocoder
        }
    };
    vocoder_phase(cfg, data, Phase::Finetune, start, Some(denoiser), resume, out_dir)
}

fn vocoder_phase(
    cfg: &ToolkitConfig,
    data: &Splits,
    phase: Phase,
    start: VocoderCheckpoint,
    frozen: Option<&Denoiser<f32>>,
    appending: bool,
    out_dir: &Path,
) -> Result<VocoderOutcome> {
    cfg.validate()?;
    data.check()?;
    let s = &cfg.schedule;
    if let Some(d) = frozen {
        PipelineCheckpoint {
            stft: cfg.stft.clone(),
            denoiser: d.clone(),
            generator: start.generator.clone(),
        }
        .check()?;
    }
    let frontend = MelFrontend::new(&cfg.stft)?;
    let mut trainer = match (start.opt_g, start.opt_d) {
        (Some(og), Some(od)) => VocoderTrainer::resume(
            start.generator,
            start.discriminators,
            og,
            od,
            &cfg.stft,
            &cfg.losses,
            s,
            start.epoch,
        )?,
        _ => VocoderTrainer::new(start.generator, start.discriminators, &cfg.stft, &cfg.losses, s)?,
    };
    let val_batches = validation_batches(cfg, &data.val, &frontend)?;
    let mut stream = BatchStream::new(&data.train, &frontend, derive_seed(cfg.seed, DATA_STREAM), s.batch_size, s.crop_seconds)?;
    stream.seek(trainer.step());
    let mut rec = Recorder::open(phase, out_dir, appending)?;
    let mut stopper = EarlyStopper::new(s.early_stop_patience, s.early_stopping);
    let max = s.max_steps(phase);
    let snapshot = |t: &VocoderTrainer<f32>| VocoderCheckpoint {
        generator: t.generator.clone(),
        discriminators: t.discriminators.clone(),
        opt_g: Some(t.opt_g.clone()),
        opt_d: Some(t.opt_d.clone()),
        step: t.step(),
        epoch: t.epoch(),
    };
    let input = |b: &Batch| if frozen.is_some() { b.wet_mel.clone() } else { b.dry_mel.clone() };
    let mut best_generator = None;
    let mut stopped = false;

    while trainer.step() < max {
        let batch = stream.next_batch()?;
        trainer.set_epoch(stream.epoch());
        let lr = trainer.current_lr();
        let losses = match trainer.train_step(&input(&batch), &batch.dry_wave, &batch.dry_mel, frozen) {
            Ok(l) => l,
            Err(e) => return Err(rec.diverged(e.into(), |p| snapshot(&trainer).save(p))),
        };
        let step = trainer.step();
        let mut parts = vec![
            ("d_loss", losses.d_loss),
            ("g_adv", losses.g_adv),
            ("feature_matching", losses.feature_matching),
            ("mel_l1", losses.mel_l1),
            ("g_total", losses.g_total),
        ];
        if frozen.is_some() {
            parts.push(("denoiser_grad_sq_norm", losses.denoiser_grad_sq_norm));
        }
        rec.accumulate(&parts);
        if step == 1 || due(step, s.log_every) {
            rec.flush_train(step, stream.epoch(), lr)?;
        }
        if due(step, s.validate_every) || step == max {
            let v = mean(
                val_batches
                    .iter()
                    .map(|b| Ok(trainer.eval_mel_l1(&input(b), &b.dry_mel, frozen)?)),
            )?;
            rec.validation(step, stream.epoch(), lr, "mel_l1", v)?;
            match stopper.observe(v) {
                Verdict::Improved => {
                    snapshot(&trainer).save(&rec.path("best.safetensors"))?;
                    best_generator = Some(trainer.generator.clone());
                }
                Verdict::NoImprovement => {}
                Verdict::Stop => stopped = true,
            }
        }
        if due(step, s.checkpoint_every) {
            snapshot(&trainer).save(&rec.path("last.safetensors"))?;
        }
        if stopped {
            break;
        }
    }
    rec.flush_train(trainer.step(), stream.epoch(), trainer.current_lr())?;
    let checkpoint = snapshot(&trainer);
    checkpoint.save(&rec.path("last.safetensors"))?;
    let pipeline = match frozen {
        Some(d) => {
            let path = out_dir.join("pipeline.safetensors");
            PipelineCheckpoint {
                stft: cfg.stft.clone(),
                denoiser: d.clone(),
                generator: best_generator.clone().unwrap_or_else(|| trainer.generator.clone()),
            }
            .save(&path)?;
            Some(path)
        }
        None => None,
    };
    let have_best = best_generator.is_some();
    Ok(VocoderOutcome {
        report: rec.outcome(trainer.step(), &stopper, stopped, have_best),
        checkpoint,
        pipeline,
    })
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

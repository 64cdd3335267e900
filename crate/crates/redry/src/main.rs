use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use redry::checkpoint::{DenoiserCheckpoint, PipelineCheckpoint, VocoderCheckpoint};
use redry::config::{Overrides, Preset, ToolkitConfig};
use redry::dataset::{build_manifest, PairManifest, MANIFEST_FILE};
use redry::evaluate::{evaluate_corpus, Embedding};
use redry::infer::Pipeline;
use redry::moslab::{analyze, Dimension, RatingsTable};
use redry::render::render_corpus;
use redry::runrecord::{record_path, RunRecord, DEVICE_ENV};
use redry::train::{finetune, train_denoiser, train_vocoder, Splits};
use redry::wav::{load_audio, probe, save_audio};
use redry::{Error, Result};
use redry_core::denoiser::count_parameters;
use redry_core::SAMPLE_RATE;

/// Guitar distortion removal: corpus rendering, training, inference,
/// evaluation and listening-test analysis.
///
/// Exit codes: 0 success, 1 internal or numerical error, 2 invalid input or
/// configuration, 3 I/O error, 4 training divergence, 5 malformed file.
#[derive(Debug, Parser)]
#[command(name = "redry", version, after_help = format!("Environment: {DEVICE_ENV} selects the compute device (only `cpu` is available)."))]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model size preset; overrides the file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Root seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted override such as `schedule.batch_size=8`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render wet/dry pairs from a directory of dry recordings.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test fractions, comma separated.
        #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
        ratios: (f64, f64, f64),
    },
    /// Pair same-named files of two directories into a manifest.
    BuildManifest {
        #[arg(long)]
        dry: PathBuf,
        #[arg(long)]
        wet: PathBuf,
        /// Manifest path; defaults to `<corpus_root>/manifest.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
        ratios: (f64, f64, f64),
    },
    /// Train the Mel denoiser.
    TrainDenoiser {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a denoiser checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the vocoder on ground-truth Mel spectrograms.
    TrainVocoder {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the vocoder on denoiser outputs and write a pipeline checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        denoiser: PathBuf,
        /// Trained vocoder checkpoint, or an earlier finetune checkpoint with `--resume`.
        #[arg(long)]
        vocoder: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Restore one recording with a pipeline checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Keep the full vocoder output instead of trimming to the input length.
        #[arg(long)]
        keep_full_length: bool,
    },
    /// Score a directory of estimates against same-named references.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// `reference` or `external:<embeddings.json>`.
        #[arg(long, default_value = "reference")]
        embedding: Embedding,
        /// Report path; defaults to `<reports_dir>/metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize listening-test ratings with ANOVA, Tukey HSD and violin data.
    MosAnalyze {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        dimension: Dimension,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Report path; defaults to `<reports_dir>/mos-<dimension>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Manifest path; defaults to `<corpus_root>/manifest.jsonl`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to `<checkpoints_dir>/<phase>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn manifest(&self, cfg: &ToolkitConfig) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| cfg.paths.corpus_root.join(MANIFEST_FILE))
    }

    fn out(&self, cfg: &ToolkitConfig, phase: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.paths.checkpoints_dir.join(phase))
    }
}

fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated fractions, got {}", v.len())),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    redry::checkpoint::write_atomic(path, text.as_bytes())
}

fn load_splits(path: &Path) -> Result<Splits> {
    Splits::load(&PairManifest::load(path)?)
}

/// Runs the command and returns (name, inputs, primary output).
fn run(command: Command, cfg: &ToolkitConfig) -> Result<(&'static str, Vec<PathBuf>, PathBuf)> {
    match command {
        Command::Render { input, out, ratios } => {
            let m = render_corpus(&input, &out, cfg.seed, ratios)?;
            println!("rendered {} pairs into {}", m.entries.len(), out.display());
            Ok(("render", vec![input], out))
        }
        Command::BuildManifest { dry, wet, out, ratios } => {
            let out = out.unwrap_or_else(|| cfg.paths.corpus_root.join(MANIFEST_FILE));
            let m = build_manifest(&dry, &wet, ratios, cfg.seed)?;
            m.save(&out)?;
            println!("wrote {} entries to {}", m.entries.len(), out.display());
            Ok(("build-manifest", vec![dry, wet], out))
        }
        Command::TrainDenoiser { run, resume } => {
            let (manifest, out) = (run.manifest(cfg), run.out(cfg, "denoiser"));
            let data = load_splits(&manifest)?;
            let init = resume.as_deref().map(DenoiserCheckpoint::load).transpose()?;
            let size = init.as_ref().map_or(&cfg.denoiser, |c| c.model.config());
            println!("denoiser parameters: {}", count_parameters(size));
            let o = train_denoiser(cfg, &data, init, &out)?;
            report_phase("denoiser", &o.report);
            let mut inputs = vec![manifest];
            inputs.extend(resume);
            Ok(("train-denoiser", inputs, out))
        }
        Command::TrainVocoder { run, resume } => {
            let (manifest, out) = (run.manifest(cfg), run.out(cfg, "vocoder"));
            let data = load_splits(&manifest)?;
            let init = resume.as_deref().map(VocoderCheckpoint::load).transpose()?;
            let o = train_vocoder(cfg, &data, init, &out)?;
            report_phase("vocoder", &o.report);
            let mut inputs = vec![manifest];
            inputs.extend(resume);
            Ok(("train-vocoder", inputs, out))
        }
        Command::Finetune {
            run,
            denoiser,
            vocoder,
            resume,
        } => {
            let (manifest, out) = (run.manifest(cfg), run.out(cfg, "finetune"));
            let data = load_splits(&manifest)?;
            let den = DenoiserCheckpoint::load(&denoiser)?;
            let voc = VocoderCheckpoint::load(&vocoder)?;
            let o = finetune(cfg, &data, &den.model, voc, resume, &out)?;
            report_phase("finetune", &o.report);
            if let Some(p) = &o.pipeline {
                println!("pipeline checkpoint: {}", p.display());
            }
            Ok(("finetune", vec![manifest, denoiser, vocoder], out))
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            keep_full_length,
        } => {
            let pipeline = Pipeline::from_checkpoint(PipelineCheckpoint::load(&checkpoint)?)?;
            let (rate, _, _) = probe(&input)?;
            if rate != SAMPLE_RATE {
                eprintln!("warning: {} is {rate} Hz, resampling to {SAMPLE_RATE} Hz", input.display());
            }
            let wet = load_audio(&input, SAMPLE_RATE)?;
            let restored = pipeline.restore(&wet, keep_full_length)?;
            save_audio(&restored, &output)?;
            println!("wrote {} samples to {}", restored.len(), output.display());
            Ok(("infer", vec![checkpoint, input], output))
        }
        Command::Evaluate {
            estimates,
            references,
            embedding,
            out,
        } => {
            let out = out.unwrap_or_else(|| cfg.paths.reports_dir.join("metrics.json"));
            let report = evaluate_corpus(&estimates, &references, &embedding)?;
            write_text(&out, &report.to_json())?;
            print!("{}", report.table());
            let mut inputs = vec![estimates, references];
            if let Embedding::External(p) = embedding {
                inputs.push(p);
            }
            Ok(("evaluate", inputs, out))
        }
        Command::MosAnalyze {
            ratings,
            dimension,
            alpha,
            out,
        } => {
            let name = format!("mos-{}.json", format!("{dimension:?}").to_lowercase());
            let out = out.unwrap_or_else(|| cfg.paths.reports_dir.join(name));
            let report = analyze(&RatingsTable::load(&ratings)?, dimension, alpha)?;
            write_text(&out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            for s in &report.summary {
                println!("{:<16} {} (n = {})", s.system, s.display(), s.n);
            }
            if let Some(a) = &report.anova {
                println!("ANOVA F({}, {}) = {:.3}, p = {:.3e}", a.df_between, a.df_within, a.f, a.p);
            }
            for c in &report.tukey {
                println!(
                    "{} vs {}: diff {:+.3}, p = {:.3e} {}",
                    c.system_a,
                    c.system_b,
                    c.diff,
                    c.p_adj,
                    redry::moslab::significance_stars(c.p_adj)
                );
            }
            Ok(("mos-analyze", vec![ratings], out))
        }
    }
}

fn report_phase(name: &str, r: &redry::train::PhaseOutcome) {
    let best = r.best_val.map_or("n/a".to_string(), |v| format!("{v:.5}"));
    let stop = if r.stopped_early { " (early stop)" } else { "" };
    println!("{name}: {} steps{stop}, best validation loss {best}", r.final_step);
}

fn main_inner(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        preset: cli.common.preset,
        seed: cli.common.seed,
        set: cli.common.set,
    };
    let cfg = ToolkitConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let (name, inputs, output) = run(cli.command, &cfg)?;
    let mut input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    if let Some(c) = &cli.common.config {
        input_refs.push(c);
    }
    let record = RunRecord::new(name, cfg.seed, &cfg, &input_refs, &[&output])?;
    record.write(&record_path(&output))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

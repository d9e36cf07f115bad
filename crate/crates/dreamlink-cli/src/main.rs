//! Command-line surface: corpus synthesis, stage training, sampling, and
//! evaluation, all rooted in a working directory of checkpoints.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad arguments or
//! configuration), 1 on any other failure.  All file outputs are written
//! atomically (temp file + rename) and carry the configuration hash, either
//! embedded (JSON artifacts) or in a `.meta.json` sidecar (images).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dreamlink::config::{RegionMode, RegionTiming, RunConfig};
use dreamlink::container::{atomic_write, TensorStore};
use dreamlink::datagen::corpus::encode_png;
use dreamlink::error::{Error, Result};
use dreamlink::grid::{FmriVector, ImageGrid};
use dreamlink::pipeline::{Pipeline, TrainedBundle};
use dreamlink::sampler::{SampleSpec, TraceStep};

#[derive(Parser)]
#[command(
    name = "dreamlink",
    version,
    about = "Instruction-guided image decoding from simulated brain measurements"
)]
struct Cli {
    /// Working directory holding the corpus, checkpoints, and stage markers.
    #[arg(long, global = true, default_value = "run")]
    root: PathBuf,
    /// Run configuration file (TOML).  Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic corpus: images, captions, instructions, edits.
    Synth {
        /// Number of triplets (overrides the config).
        #[arg(long)]
        n: Option<usize>,
        /// Base seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the image codec and the contrastive embedding towers.
    TrainEncoders,
    /// Simulate measurements and train the measurement-to-embedding mapper.
    TrainMapper,
    /// Pretrain the denoiser backbones, then tune the feature adaptor.
    TrainAdaptor,
    /// Decode an image from a measurement vector.
    Reconstruct {
        #[command(flatten)]
        input: MeasurementInput,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Trace path (defaults to the output with a .trace.jsonl extension).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Apply a text instruction while decoding (dual-stream sampling).
    Instruct {
        /// Instruction text, e.g. "turn the circle red".
        #[arg(long)]
        text: String,
        #[command(flatten)]
        input: MeasurementInput,
        /// Stream lag in sampling steps (overrides the config).
        #[arg(long)]
        k: Option<usize>,
        /// Denoising steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale (overrides the config).
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Region proposer: builtin | external | all-ones.
        #[arg(long)]
        region_mode: Option<String>,
        /// Region timing: in-flight | two-pass.
        #[arg(long)]
        region_timing: Option<String>,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path for the edited image.
        #[arg(long)]
        out: PathBuf,
        /// Also write the reconstruction stream's image here.
        #[arg(long)]
        recon_out: Option<PathBuf>,
        /// Trace path (defaults to the output with a .trace.jsonl extension).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score validation-split reconstructions and edits.
    Evaluate {
        /// Cap on validation records (default: the whole split).
        #[arg(long)]
        n: Option<usize>,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the stream lag K and report the direction-agreement trend.
    Ablate {
        /// Comma-separated lag values.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 5, 15, 25, 35])]
        k_list: Vec<usize>,
        /// Comma-separated sampling seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Validation records per (K, seed) cell.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where a measurement vector comes from: a corpus record's stored mean, or
/// an entry in a tensor container directory.
#[derive(clap::Args)]
struct MeasurementInput {
    /// Corpus record index whose stored measurement to decode.
    #[arg(long)]
    record: Option<u64>,
    /// Tensor container directory holding the measurement.
    #[arg(long)]
    fmri: Option<PathBuf>,
    /// Entry name inside --fmri (defaults to the only entry).
    #[arg(long)]
    entry: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };

    match cli.cmd {
        Cmd::Synth { n, seed } => {
            if let Some(n) = n {
                cfg.data.n_triplets = n;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let corpus = pipe.ensure_corpus()?;
            println!(
                "corpus: {} records at {}",
                corpus.records.len(),
                pipe.corpus_dir().display()
            );
            println!("manifest_hash={}", corpus.manifest_hash()?);
            Ok(())
        }
        Cmd::TrainEncoders => {
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let corpus = pipe.ensure_corpus()?;
            pipe.ensure_encoders(&corpus)?;
            println!("encoders ready: {}", pipe.stage_stats("encoders"));
            Ok(())
        }
        Cmd::TrainMapper => {
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let corpus = pipe.ensure_corpus()?;
            let encoders = pipe.ensure_encoders(&corpus)?;
            pipe.ensure_measurements(&corpus, &encoders)?;
            pipe.ensure_mapper(&corpus, &encoders)?;
            println!("mapper ready: {}", pipe.stage_stats("mapper"));
            Ok(())
        }
        Cmd::TrainAdaptor => {
            let pipe = Pipeline::new(cfg, &cli.root)?;
            pipe.ensure_all()?;
            println!("backbone: {}", pipe.stage_stats("backbone"));
            println!("adaptor: {}", pipe.stage_stats("adaptor"));
            Ok(())
        }
        Cmd::Reconstruct {
            input,
            seed,
            steps,
            out,
            trace,
        } => {
            let mut effective = cfg.clone();
            if let Some(steps) = steps {
                effective.sampling.steps = steps;
            }
            effective.validate()?;
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let mut bundle = pipe.load_bundle()?;
            bundle.cfg = effective;
            let vector = resolve_measurement(&bundle, &input)?;
            let (cond, _) = bundle.cond_from_vector(&vector)?;
            let (outcome, image) = bundle.reconstruct_with(&cond, seed)?;
            write_image(&out, &image)?;
            let spec = bundle.spec(seed);
            write_meta(
                &out,
                &bundle,
                &spec,
                json!({ "command": "reconstruct", "trace_len": outcome.trace.len() }),
            )?;
            write_trace(trace_path(&trace, &out), &bundle, &spec, &outcome.trace)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Instruct {
            text,
            input,
            k,
            steps,
            cfg_scale,
            region_mode,
            region_timing,
            seed,
            out,
            recon_out,
            trace,
        } => {
            let mut effective = cfg.clone();
            if let Some(k) = k {
                effective.sampling.k = k;
            }
            if let Some(steps) = steps {
                effective.sampling.steps = steps;
            }
            if let Some(s) = cfg_scale {
                effective.sampling.cfg_scale = s;
            }
            if let Some(m) = &region_mode {
                effective.sampling.region_mode = parse_region_mode(m)?;
            }
            if let Some(t) = &region_timing {
                effective.sampling.region_timing = parse_region_timing(t)?;
            }
            effective.validate()?;
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let mut bundle = pipe.load_bundle()?;
            bundle.cfg = effective;
            let vector = resolve_measurement(&bundle, &input)?;
            let (cond_r, pair) = bundle.cond_from_vector(&vector)?;
            let result = bundle.instruct_with(&cond_r, &pair, &text, seed)?;
            write_image(&out, &result.edited_image)?;
            if let Some(rp) = &recon_out {
                write_image(rp, &result.recon_image)?;
            }
            let spec = bundle.spec(seed);
            write_meta(
                &out,
                &bundle,
                &spec,
                json!({
                    "command": "instruct",
                    "instruction": text,
                    "region": result.region,
                    "trace_len": result.outcome.trace.len(),
                }),
            )?;
            write_trace(trace_path(&trace, &out), &bundle, &spec, &result.outcome.trace)?;
            for w in &result.region.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Evaluate { n, seed, out } => {
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let bundle = pipe.load_bundle()?;
            let report = bundle.evaluate(n.unwrap_or(usize::MAX), seed)?;
            atomic_write(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
            println!(
                "evaluated {} records: pixcorr {:.4}, ssim {:.4}, emb_sim {:.4}, direction_sim {:.4}",
                report.n, report.pixcorr, report.ssim, report.emb_sim_vis, report.direction_sim
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Ablate {
            k_list,
            seeds,
            n,
            out,
        } => {
            let pipe = Pipeline::new(cfg, &cli.root)?;
            let bundle = pipe.load_bundle()?;
            for &k in &k_list {
                if k >= bundle.cfg.sampling.steps {
                    return Err(Error::Validation("K must be < steps".to_string()));
                }
            }
            let summary = bundle.ablate(&k_list, &seeds, n)?;
            let payload = json!({
                "config_hash": bundle.cfg.hash(),
                "corpus_hash": bundle.corpus.manifest_hash()?,
                "cells": summary.cells,
                "median_by_k": summary.median_by_k,
            });
            atomic_write(&out, serde_json::to_string_pretty(&payload)?.as_bytes())?;
            for (k, m) in &summary.median_by_k {
                println!("k={k}: median direction_sim {m:.4}");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn parse_region_mode(s: &str) -> Result<RegionMode> {
    match s.to_ascii_lowercase().as_str() {
        "builtin" => Ok(RegionMode::Builtin),
        "external" => Ok(RegionMode::External),
        "all-ones" | "all_ones" => Ok(RegionMode::AllOnes),
        other => Err(Error::Validation(format!(
            "unknown region mode '{other}' (expected builtin | external | all-ones)"
        ))),
    }
}

fn parse_region_timing(s: &str) -> Result<RegionTiming> {
    match s.to_ascii_lowercase().as_str() {
        "in-flight" | "in_flight" => Ok(RegionTiming::InFlight),
        "two-pass" | "two_pass" => Ok(RegionTiming::TwoPass),
        other => Err(Error::Validation(format!(
            "unknown region timing '{other}' (expected in-flight | two-pass)"
        ))),
    }
}

/// Load the measurement vector named by `--record` or `--fmri/--entry`.
fn resolve_measurement(bundle: &TrainedBundle, input: &MeasurementInput) -> Result<FmriVector> {
    match (&input.record, &input.fmri) {
        (Some(index), None) => {
            let rec = bundle
                .corpus
                .records
                .iter()
                .find(|r| r.index == *index)
                .ok_or_else(|| {
                    Error::Validation(format!("record {index} not found in the corpus"))
                })?;
            let store = bundle.corpus.fmri_store()?;
            let (_, mean) = dreamlink::fmri::load_fmri(&store, rec.index)?;
            Ok(mean)
        }
        (None, Some(dir)) => {
            let store = TensorStore::open(dir)?;
            let name = match &input.entry {
                Some(name) => name.clone(),
                None => {
                    let names = store.names();
                    if names.len() != 1 {
                        return Err(Error::Validation(format!(
                            "--fmri store holds {} entries; pick one with --entry",
                            names.len()
                        )));
                    }
                    names[0].clone()
                }
            };
            let t = store.load(&name)?;
            let data: Vec<f64> = match t.ndim() {
                1 => t.iter().copied().collect(),
                // Trials-then-mean layout: the last row is the mean.
                2 => t
                    .index_axis(ndarray::Axis(0), t.shape()[0] - 1)
                    .iter()
                    .copied()
                    .collect(),
                d => {
                    return Err(Error::Validation(format!(
                        "measurement entry '{name}' has rank {d}; expected 1 or 2"
                    )))
                }
            };
            Ok(FmriVector::new(data))
        }
        (Some(_), Some(_)) => Err(Error::Validation(
            "pass either --record or --fmri, not both".to_string(),
        )),
        (None, None) => Err(Error::Validation(
            "a measurement is required: --record <index> or --fmri <dir>".to_string(),
        )),
    }
}

fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    atomic_write(path, &encode_png(image)?)
}

fn trace_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out.with_extension("trace.jsonl"))
}

/// Sidecar `<out>.meta.json` carrying the configuration hash and command
/// details.
fn write_meta(
    out: &Path,
    bundle: &TrainedBundle,
    spec: &SampleSpec,
    extra: serde_json::Value,
) -> Result<()> {
    let mut meta = json!({
        "config_hash": bundle.cfg.hash(),
        "corpus_hash": bundle.corpus.manifest_hash()?,
        "sample_seed": spec.seed,
        "k": spec.k,
        "steps": spec.steps,
        "guidance": spec.guidance,
    });
    if let (Some(m), Some(e)) = (meta.as_object_mut(), extra.as_object()) {
        for (key, value) in e {
            m.insert(key.clone(), value.clone());
        }
    }
    atomic_write(
        &out.with_extension("meta.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

/// Step trace as JSON lines: a meta record first, then one record per
/// denoising step.
fn write_trace(
    path: PathBuf,
    bundle: &TrainedBundle,
    spec: &SampleSpec,
    trace: &[TraceStep],
) -> Result<()> {
    let mut lines = String::new();
    let meta = json!({
        "kind": "meta",
        "config_hash": bundle.cfg.hash(),
        "sample_seed": spec.seed,
        "k": spec.k,
        "steps": spec.steps,
        "guidance": spec.guidance,
    });
    lines.push_str(&serde_json::to_string(&meta)?);
    lines.push('\n');
    for step in trace {
        let mut v = serde_json::to_value(step)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("kind".to_string(), json!("step"));
        }
        lines.push_str(&serde_json::to_string(&v)?);
        lines.push('\n');
    }
    atomic_write(&path, lines.as_bytes())
}

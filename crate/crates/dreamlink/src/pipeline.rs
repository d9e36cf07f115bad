//! Run orchestration: builds the corpus, trains every component in
//! dependency order with resumable on-disk checkpoints, and wires the
//! trained pieces into record-level sampling and evaluation entry points.
//!
//! Each stage writes a marker file carrying a hash of exactly the
//! configuration it reads plus the hashes of the stages it consumes.  A
//! stage whose marker matches is loaded from its checkpoint; otherwise it
//! is retrained, along with everything downstream of it — and nothing
//! upstream: changing an adaptor hyperparameter retrains the adaptor alone.
//! Sampling parameters are excluded from the training hashes, so changing
//! guidance or step counts never retrains — only the adaptor folds in the
//! lag parameters it was tuned for.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RegionTiming, RunConfig};
use crate::container::{sha256_hex, TensorStore};
use crate::datagen::corpus::{build_corpus, Corpus, TripletRecord};
use crate::datagen::region::{propose_region, RegionProposal};
use crate::denoisers::{
    pair_context_rows, Adaptor, CondItem, InstructDenoiser, InterpretDenoiser,
};
use crate::encoders::{load_corpus_images, train_codec, train_towers, Encoders};
use crate::error::{Error, Result};
use crate::fmri::{attach_fmri_to_corpus, load_fmri, train_mapper, FmriForwardModel, Mapper};
use crate::grid::FmriVector;
use crate::grid::{EmbeddingPair, ImageGrid};
use crate::metrics::{direction_sim, emb_sim, median, pixcorr, ssim, EvalReport, PairScores};
use crate::sampler::{instruct_sample, reconstruct, DualOutcome, RegionSource, SampleSpec, SoloOutcome};
use crate::schedule::DiffusionSchedule;
use crate::seeding::{derive_seed, rng_for};
use crate::trainer::{raw_step_offset, train_adaptor, train_backbone};

/// Training stages in dependency order.
pub const STAGES: [&str; 6] = [
    "corpus",
    "encoders",
    "measurements",
    "mapper",
    "backbone",
    "adaptor",
];

/// A configured run rooted at a working directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

/// Everything needed to sample and evaluate: trained weights plus the data
/// and schedule they were trained against.
pub struct TrainedBundle {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub encoders: Encoders,
    pub mapper: Mapper,
    pub interp: InterpretDenoiser,
    pub instruct: InstructDenoiser,
    pub adaptor: Adaptor,
    pub schedule: DiffusionSchedule,
}

#[derive(Serialize, Deserialize)]
struct StageMarker {
    hash: String,
    stats: serde_json::Value,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(root)?;
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
        })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn marker_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    // ---- stage hashes -----------------------------------------------------
    //
    // Each stage hashes exactly the configuration it reads plus the hash of
    // the stages it consumes, so changing a hyperparameter retrains only the
    // stages downstream of it.  Sampling parameters stay out of every
    // training hash except the adaptor's, which is tuned for a specific lag.

    /// Corpus generation: the seed and the corpus shape.
    fn data_hash(&self) -> String {
        sha256_hex(
            json!({
                "seed": self.cfg.seed,
                "n_triplets": self.cfg.data.n_triplets,
                "instructions_per_image": self.cfg.data.instructions_per_image,
            })
            .to_string()
            .as_bytes(),
        )
    }

    /// Image codec and the two embedding towers.
    fn encoders_hash(&self) -> String {
        let t = &self.cfg.train;
        sha256_hex(
            json!({
                "corpus": self.data_hash(),
                "model": self.cfg.model,
                "codec": [t.codec_steps, t.codec_batch],
                "codec_lr": t.codec_lr,
                "towers": [t.tower_steps, t.tower_batch],
                "tower_lr": t.tower_lr,
            })
            .to_string()
            .as_bytes(),
        )
    }

    /// Simulated measurements attached to the corpus.
    fn measurements_hash(&self) -> String {
        sha256_hex(
            json!({
                "encoders": self.encoders_hash(),
                "trials": self.cfg.data.fmri_trials,
                "noise": self.cfg.data.fmri_noise,
            })
            .to_string()
            .as_bytes(),
        )
    }

    /// Measurement-to-embedding mapper.
    fn mapper_hash(&self) -> String {
        let t = &self.cfg.train;
        sha256_hex(
            json!({
                "measurements": self.measurements_hash(),
                "mapper": [t.mapper_steps, t.mapper_batch],
                "mapper_lr": t.mapper_lr,
                "prior_head": t.mapper_prior_head,
            })
            .to_string()
            .as_bytes(),
        )
    }

    /// Denoiser pretraining for both streams.
    fn backbone_hash(&self) -> String {
        let t = &self.cfg.train;
        sha256_hex(
            json!({
                "encoders": self.encoders_hash(),
                "schedule": self.cfg.schedule,
                "backbone": [t.backbone_steps, t.backbone_batch],
                "backbone_lr": t.backbone_lr,
                "cond_dropout": t.cond_dropout,
            })
            .to_string()
            .as_bytes(),
        )
    }

    /// Adaptor tuning, which additionally depends on the lag it targets.
    fn adaptor_hash(&self) -> String {
        let t = &self.cfg.train;
        sha256_hex(
            json!({
                "backbone": self.backbone_hash(),
                "adaptor": [t.adaptor_steps, t.adaptor_batch],
                "adaptor_lr": t.adaptor_lr,
                "cond_dropout": t.cond_dropout,
                "k": self.cfg.sampling.k,
                "steps": self.cfg.sampling.steps,
            })
            .to_string()
            .as_bytes(),
        )
    }

    fn stage_hash(&self, stage: &str) -> String {
        match stage {
            "corpus" => self.data_hash(),
            "encoders" => self.encoders_hash(),
            "measurements" => self.measurements_hash(),
            "mapper" => self.mapper_hash(),
            "backbone" => self.backbone_hash(),
            "adaptor" => self.adaptor_hash(),
            other => unreachable!("unknown stage {other}"),
        }
    }

    /// Whether a stage's checkpoint exists and matches the current config.
    pub fn stage_complete(&self, stage: &str) -> bool {
        let Ok(text) = std::fs::read_to_string(self.marker_path(stage)) else {
            return false;
        };
        serde_json::from_str::<StageMarker>(&text)
            .map(|m| m.hash == self.stage_hash(stage))
            .unwrap_or(false)
    }

    fn write_marker(&self, stage: &str, stats: serde_json::Value) -> Result<()> {
        let dir = self.root.join("stages");
        std::fs::create_dir_all(&dir)?;
        let marker = StageMarker {
            hash: self.stage_hash(stage),
            stats,
        };
        std::fs::write(
            self.marker_path(stage),
            serde_json::to_string_pretty(&marker)?,
        )?;
        Ok(())
    }

    /// Stage stats recorded at training time (empty object if absent).
    pub fn stage_stats(&self, stage: &str) -> serde_json::Value {
        std::fs::read_to_string(self.marker_path(stage))
            .ok()
            .and_then(|t| serde_json::from_str::<StageMarker>(&t).ok())
            .map(|m| m.stats)
            .unwrap_or_else(|| json!({}))
    }

    fn fresh_store(&self, name: &str) -> Result<TensorStore> {
        let dir = self.checkpoint_dir(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        TensorStore::create(&dir)
    }

    // ---- stages -----------------------------------------------------------

    pub fn ensure_corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        if !self.stage_complete("corpus") {
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            let records = build_corpus(
                self.cfg.seed,
                self.cfg.data.n_triplets as u64,
                self.cfg.data.instructions_per_image as u64,
                &dir,
            )?;
            self.write_marker("corpus", json!({ "records": records.len() }))?;
        }
        Corpus::load(&dir)
    }

    pub fn ensure_encoders(&self, corpus: &Corpus) -> Result<Encoders> {
        let mut encoders = Encoders::new(&self.cfg.model, derive_seed(self.cfg.seed, "encoders", 0));
        if self.stage_complete("encoders") {
            let store = TensorStore::open(&self.checkpoint_dir("encoders"))?;
            encoders.load(&store)?;
        } else {
            let images = load_corpus_images(corpus)?;
            let (codec, codec_stats) =
                train_codec(corpus, &images, &self.cfg.train, &self.cfg.model, self.cfg.seed)?;
            encoders.codec = codec;
            let (vision, text, tower_stats) =
                train_towers(corpus, &images, &self.cfg.train, &self.cfg.model, self.cfg.seed)?;
            encoders.vision = vision;
            encoders.text = text;
            let mut store = self.fresh_store("encoders")?;
            encoders.save(&mut store)?;
            self.write_marker(
                "encoders",
                json!({ "codec": codec_stats, "towers": tower_stats }),
            )?;
        }
        encoders.freeze();
        Ok(encoders)
    }

    pub fn ensure_measurements(&self, corpus: &Corpus, encoders: &Encoders) -> Result<()> {
        if self.stage_complete("measurements") {
            return Ok(());
        }
        let forward = FmriForwardModel::new(
            derive_seed(self.cfg.seed, "fmri-forward-model", 0),
            self.cfg.model.fmri_dim,
            self.cfg.model.embed_dim,
            self.cfg.data.fmri_noise,
        );
        attach_fmri_to_corpus(corpus, encoders, &forward, self.cfg.seed, self.cfg.data.fmri_trials)?;
        self.write_marker(
            "measurements",
            json!({ "n_trials": self.cfg.data.fmri_trials, "noise": self.cfg.data.fmri_noise }),
        )
    }

    pub fn ensure_mapper(&self, corpus: &Corpus, encoders: &Encoders) -> Result<Mapper> {
        if self.stage_complete("mapper") {
            let mapper = Mapper::new(
                &self.cfg.model,
                self.cfg.train.mapper_prior_head,
                &mut rng_for(self.cfg.seed, "mapper-load", 0),
            );
            let store = TensorStore::open(&self.checkpoint_dir("mapper"))?;
            mapper.load(&store, "mapper")?;
            mapper.freeze();
            return Ok(mapper);
        }
        let (mapper, stats) =
            train_mapper(corpus, encoders, &self.cfg.train, &self.cfg.model, self.cfg.seed)?;
        let mut store = self.fresh_store("mapper")?;
        mapper.save(&mut store, "mapper")?;
        self.write_marker("mapper", json!({ "mapper": stats }))?;
        Ok(mapper)
    }

    pub fn ensure_backbone(
        &self,
        corpus: &Corpus,
        encoders: &Encoders,
        schedule: &DiffusionSchedule,
    ) -> Result<(InterpretDenoiser, InstructDenoiser)> {
        if self.stage_complete("backbone") {
            let (interp, instruct) = self.fresh_denoisers();
            let store = TensorStore::open(&self.checkpoint_dir("backbone"))?;
            interp.load(&store, "interp")?;
            instruct.load(&store, "instruct")?;
            return Ok((interp, instruct));
        }
        let (interp, instruct, stats) = train_backbone(
            corpus,
            encoders,
            schedule,
            &self.cfg.train,
            &self.cfg.model,
            self.cfg.seed,
        )?;
        let mut store = self.fresh_store("backbone")?;
        interp.save(&mut store, "interp")?;
        instruct.save(&mut store, "instruct")?;
        self.write_marker("backbone", json!({ "backbone": stats }))?;
        Ok((interp, instruct))
    }

    /// Untrained denoiser pair with the architecture the checkpoints expect.
    pub fn fresh_denoisers(&self) -> (InterpretDenoiser, InstructDenoiser) {
        (
            InterpretDenoiser::new(&self.cfg.model, &mut rng_for(self.cfg.seed, "denoiser-load-r", 0)),
            InstructDenoiser::new(&self.cfg.model, &mut rng_for(self.cfg.seed, "denoiser-load-e", 0)),
        )
    }

    /// Train or load the adaptor.  Tuning also adjusts the instruction
    /// stream's input stem, so the tuned instruction weights are stored (and
    /// restored) alongside the adaptor itself.
    pub fn ensure_adaptor(
        &self,
        corpus: &Corpus,
        encoders: &Encoders,
        interp: &InterpretDenoiser,
        instruct: &InstructDenoiser,
        schedule: &DiffusionSchedule,
    ) -> Result<Adaptor> {
        if self.stage_complete("adaptor") {
            let adaptor = Adaptor::new(&self.cfg.model, &mut rng_for(self.cfg.seed, "adaptor-load", 0));
            let store = TensorStore::open(&self.checkpoint_dir("adaptor"))?;
            adaptor.load(&store, "adaptor")?;
            instruct.load(&store, "instruct-tuned")?;
            return Ok(adaptor);
        }
        let k_raw = raw_step_offset(
            self.cfg.schedule.train_steps,
            self.cfg.sampling.steps,
            self.cfg.sampling.k,
        );
        let (adaptor, stats) = train_adaptor(
            corpus,
            encoders,
            interp,
            instruct,
            schedule,
            &self.cfg.train,
            &self.cfg.model,
            k_raw,
            self.cfg.seed,
        )?;
        let mut store = self.fresh_store("adaptor")?;
        adaptor.save(&mut store, "adaptor")?;
        instruct.save(&mut store, "instruct-tuned")?;
        self.write_marker("adaptor", json!({ "adaptor": stats, "k_raw": k_raw }))?;
        Ok(adaptor)
    }

    /// Run every stage in order, training whatever is missing or stale.
    pub fn ensure_all(&self) -> Result<TrainedBundle> {
        let corpus = self.ensure_corpus()?;
        let encoders = self.ensure_encoders(&corpus)?;
        self.ensure_measurements(&corpus, &encoders)?;
        let mapper = self.ensure_mapper(&corpus, &encoders)?;
        let schedule = self.cfg.train_schedule()?;
        let (interp, instruct) = self.ensure_backbone(&corpus, &encoders, &schedule)?;
        let adaptor = self.ensure_adaptor(&corpus, &encoders, &interp, &instruct, &schedule)?;
        Ok(TrainedBundle {
            cfg: self.cfg.clone(),
            corpus,
            encoders,
            mapper,
            interp,
            instruct,
            adaptor,
            schedule,
        })
    }

    /// Load every stage, erroring on any that is missing or stale.
    pub fn load_bundle(&self) -> Result<TrainedBundle> {
        for stage in STAGES {
            if !self.stage_complete(stage) {
                return Err(Error::Untrained(format!(
                    "stage '{stage}' has no up-to-date checkpoint; run training first"
                )));
            }
        }
        self.ensure_all()
    }
}

/// Region proposal details captured during a dual-stream run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RegionInfo {
    pub phrase: Option<String>,
    pub warnings: Vec<String>,
    pub coverage: f64,
}

/// Result of one instruction-following run on a record.
pub struct EditResult {
    pub outcome: DualOutcome,
    pub edited_image: ImageGrid,
    pub recon_image: ImageGrid,
    pub region: RegionInfo,
}

impl TrainedBundle {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (
            self.cfg.model.latent_channels,
            self.cfg.model.latent_size,
            self.cfg.model.latent_size,
        )
    }

    /// Sampling parameters from the run config, carrying `sample_seed`.
    pub fn spec(&self, sample_seed: u64) -> SampleSpec {
        SampleSpec {
            steps: self.cfg.sampling.steps,
            k: self.cfg.sampling.k,
            guidance: self.cfg.sampling.cfg_scale,
            mode: self.cfg.sampling.masked_values,
            seed: sample_seed,
        }
    }

    /// Conditioning decoded from a measurement vector: mapped back into the
    /// embedding space and laid out as context rows.
    pub fn cond_from_vector(&self, v: &FmriVector) -> Result<(CondItem, EmbeddingPair)> {
        let pair = self.mapper.map(v)?;
        Ok((CondItem::unmasked(pair_context_rows(&pair)), pair))
    }

    /// Conditioning decoded from a record's stored measurement (the mean
    /// over trials).
    pub fn cond_for_record(&self, rec: &TripletRecord) -> Result<(CondItem, EmbeddingPair)> {
        let store = self.corpus.fmri_store()?;
        let (_, mean) = load_fmri(&store, rec.index)?;
        self.cond_from_vector(&mean)
    }

    /// Instruction-stream context rows from a decoded embedding pair: the
    /// decoded image embedding row plus the instruction's token rows, and
    /// the same layout with the instruction zeroed for the null variant.
    pub fn instruction_rows(
        &self,
        pair: &EmbeddingPair,
        instruction: &str,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let vis = pair.f_vis.clone();
        let instr = pair_context_rows(&EmbeddingPair::new(
            self.encoders.text.context_rows(instruction).into_dyn(),
            vis.clone(),
        )?);
        let null = pair_context_rows(&EmbeddingPair::new(
            self.encoders.text.context_rows("").into_dyn(),
            vis,
        )?);
        Ok((instr, null))
    }

    /// Reconstruct an image from prepared conditioning alone.
    pub fn reconstruct_with(
        &self,
        cond: &CondItem,
        sample_seed: u64,
    ) -> Result<(SoloOutcome, ImageGrid)> {
        let spec = self.spec(sample_seed);
        let outcome = reconstruct(&self.interp, &self.schedule, &spec, cond, self.latent_shape())?;
        let image = self.encoders.codec.decode(&outcome.latent);
        Ok((outcome, image))
    }

    /// Reconstruct a record's source image from its measurement alone.
    pub fn reconstruct_record(
        &self,
        rec: &TripletRecord,
        sample_seed: u64,
    ) -> Result<(SoloOutcome, ImageGrid)> {
        let (cond, _) = self.cond_for_record(rec)?;
        self.reconstruct_with(&cond, sample_seed)
    }

    /// Run the dual-stream sampler on a record with an instruction,
    /// proposing the edit region per the configured mode and timing.
    pub fn instruct_record(
        &self,
        rec: &TripletRecord,
        instruction: &str,
        sample_seed: u64,
    ) -> Result<EditResult> {
        let (cond_r, pair) = self.cond_for_record(rec)?;
        self.instruct_with(&cond_r, &pair, instruction, sample_seed)
    }

    /// Run the dual-stream sampler from prepared conditioning.
    pub fn instruct_with(
        &self,
        cond_r: &CondItem,
        pair: &EmbeddingPair,
        instruction: &str,
        sample_seed: u64,
    ) -> Result<EditResult> {
        let (instr_rows, null_rows) = self.instruction_rows(pair, instruction)?;
        let spec = self.spec(sample_seed);
        let shape = self.latent_shape();
        let mode = self.cfg.sampling.region_mode;
        let captured: RefCell<Option<RegionProposal>> = RefCell::new(None);

        let outcome = match self.cfg.sampling.region_timing {
            RegionTiming::InFlight => {
                // Propose from the interpretation stream's clean estimate the
                // first time both streams run together.
                let source = RegionSource::AtBoundary(Box::new(|z0r| {
                    let img = self.encoders.codec.decode(z0r);
                    let p = propose_region(instruction, &img, img.height(), img.width(), mode);
                    let mask = p.mask.clone();
                    *captured.borrow_mut() = Some(p);
                    Ok(mask)
                }));
                instruct_sample(
                    &self.interp,
                    &self.instruct,
                    &self.adaptor,
                    &self.schedule,
                    &spec,
                    &cond_r,
                    &instr_rows,
                    &null_rows,
                    source,
                    shape,
                )?
            }
            RegionTiming::TwoPass => {
                // Full reconstruction first, proposal from its final image,
                // then the dual run with the region fixed up front.
                let (solo, recon_img) = self.reconstruct_with(cond_r, sample_seed)?;
                drop(solo);
                let p = propose_region(
                    instruction,
                    &recon_img,
                    recon_img.height(),
                    recon_img.width(),
                    mode,
                );
                let mask = p.mask.clone();
                *captured.borrow_mut() = Some(p);
                instruct_sample(
                    &self.interp,
                    &self.instruct,
                    &self.adaptor,
                    &self.schedule,
                    &spec,
                    &cond_r,
                    &instr_rows,
                    &null_rows,
                    RegionSource::Fixed(mask),
                    shape,
                )?
            }
        };

        let proposal = captured.into_inner().expect("region proposal captured");
        let region = RegionInfo {
            phrase: proposal.phrase,
            warnings: proposal.warnings,
            coverage: outcome.mask.coverage(),
        };
        Ok(EditResult {
            edited_image: self.encoders.codec.decode(&outcome.edited),
            recon_image: self.encoders.codec.decode(&outcome.reconstruction),
            outcome,
            region,
        })
    }

    /// Per-record evaluation scores on up to `n_max` validation records:
    /// reconstruction quality against the source image, edit direction
    /// against the caption shift.
    pub fn score_validation(&self, n_max: usize, sample_seed: u64) -> Result<PairScores> {
        let records = self.validation_records(n_max)?;
        let mut scores = PairScores::new();
        for rec in records {
            let result = self.instruct_record(rec, &rec.instruction, derive_seed(sample_seed, "eval", rec.index))?;
            let src = self.corpus.load_image(rec)?;
            scores.pixcorr.push(pixcorr(&result.recon_image, &src)?);
            scores.ssim.push(ssim(&result.recon_image, &src)?);
            scores
                .emb_sim_vis
                .push(emb_sim(&self.encoders, &result.recon_image, &src));
            scores.direction_sim.push(direction_sim(
                &self.encoders,
                &src,
                &result.edited_image,
                &rec.caption,
                &rec.caption_edit,
            )?);
        }
        Ok(scores)
    }

    /// Mean evaluation report over up to `n_max` validation records.
    pub fn evaluate(&self, n_max: usize, sample_seed: u64) -> Result<EvalReport> {
        let scores = self.score_validation(n_max, sample_seed)?;
        Ok(scores.report(&self.cfg.hash(), &self.corpus.manifest_hash()?))
    }

    fn validation_records(&self, n_max: usize) -> Result<Vec<&TripletRecord>> {
        let records: Vec<&TripletRecord> =
            self.corpus.val_records().into_iter().take(n_max).collect();
        if records.is_empty() {
            return Err(Error::Validation(
                "no validation records to evaluate".to_string(),
            ));
        }
        Ok(records)
    }

    /// Median direction agreement per lag value `k`, pooled over sampling
    /// seeds, on up to `n_max` validation records each.
    pub fn ablate(
        &self,
        ks: &[usize],
        seeds: &[u64],
        n_max: usize,
    ) -> Result<AblationSummary> {
        let records = self.validation_records(n_max)?;
        let mut cells = Vec::new();
        let mut by_k = Vec::new();
        for &k in ks {
            let mut pooled = Vec::new();
            for &seed in seeds {
                let mut sims = Vec::new();
                for rec in &records {
                    let mut alt = TrainedBundleRef { bundle: self, k };
                    let sim = alt.direction_for(rec, seed)?;
                    sims.push(sim);
                }
                cells.push(AblationCell {
                    k,
                    seed,
                    median_direction_sim: median(&sims),
                    n: sims.len(),
                });
                pooled.extend(sims);
            }
            by_k.push((k, median(&pooled)));
        }
        Ok(AblationSummary {
            cells,
            median_by_k: by_k,
        })
    }
}

/// Helper for ablation runs: same bundle, overridden lag.
struct TrainedBundleRef<'a> {
    bundle: &'a TrainedBundle,
    k: usize,
}

impl TrainedBundleRef<'_> {
    fn direction_for(&mut self, rec: &TripletRecord, sample_seed: u64) -> Result<f64> {
        let b = self.bundle;
        let (cond_r, pair) = b.cond_for_record(rec)?;
        let (instr_rows, null_rows) = b.instruction_rows(&pair, &rec.instruction)?;
        let mut spec = b.spec(derive_seed(sample_seed, "ablate", rec.index));
        spec.k = self.k;
        let mode = b.cfg.sampling.region_mode;
        let source = RegionSource::AtBoundary(Box::new(|z0r: &crate::grid::LatentGrid| {
            let img = b.encoders.codec.decode(z0r);
            Ok(propose_region(&rec.instruction, &img, img.height(), img.width(), mode).mask)
        }));
        let outcome = instruct_sample(
            &b.interp,
            &b.instruct,
            &b.adaptor,
            &b.schedule,
            &spec,
            &cond_r,
            &instr_rows,
            &null_rows,
            source,
            b.latent_shape(),
        )?;
        let edited = b.encoders.codec.decode(&outcome.edited);
        let src = b.corpus.load_image(rec)?;
        direction_sim(&b.encoders, &src, &edited, &rec.caption, &rec.caption_edit)
    }
}

/// One (lag, seed) ablation measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub k: usize,
    pub seed: u64,
    pub median_direction_sim: f64,
    pub n: usize,
}

/// Full ablation sweep: per-cell medians and the per-lag median pooled over
/// seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub cells: Vec<AblationCell>,
    pub median_by_k: Vec<(usize, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use crate::config::{
        DataConfig, ModelConfig, RegionMode, SamplingConfig, ScheduleConfig, TrainConfig,
    };

    fn tiny_cfg(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            schedule: ScheduleConfig {
                train_steps: 40,
                ..ScheduleConfig::default()
            },
            model: ModelConfig {
                widths: [8, 16, 24],
                time_dim: 16,
                time_chan: 24,
                embed_dim: 16,
                fmri_dim: 128,
                ..ModelConfig::default()
            },
            sampling: SamplingConfig {
                k: 2,
                steps: 8,
                cfg_scale: 2.0,
                ..SamplingConfig::default()
            },
            train: TrainConfig {
                codec_steps: 30,
                codec_batch: 4,
                tower_steps: 30,
                tower_batch: 8,
                mapper_steps: 40,
                mapper_batch: 8,
                backbone_steps: 12,
                backbone_batch: 2,
                adaptor_steps: 6,
                adaptor_batch: 2,
                ..TrainConfig::default()
            },
            data: DataConfig {
                n_triplets: 20,
                instructions_per_image: 1,
                fmri_trials: 2,
                fmri_noise: 0.05,
            },
        }
    }

    #[test]
    fn full_pipeline_trains_samples_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = Pipeline::new(tiny_cfg(3131), dir.path()).unwrap();
        for stage in STAGES {
            assert!(!pipe.stage_complete(stage), "nothing trained yet");
        }
        let bundle = pipe.ensure_all().unwrap();
        for stage in STAGES {
            assert!(pipe.stage_complete(stage), "stage {stage} incomplete");
        }

        // Sampling entry points produce the right shapes, deterministically.
        let rec = bundle.corpus.val_records()[0];
        let (solo, recon_img) = bundle.reconstruct_record(rec, 77).unwrap();
        assert_eq!(solo.trace.len(), bundle.cfg.sampling.steps);
        assert_eq!(recon_img.data.shape(), &[3, 64, 64]);
        let e1 = bundle.instruct_record(rec, &rec.instruction, 78).unwrap();
        let e2 = bundle.instruct_record(rec, &rec.instruction, 78).unwrap();
        assert_eq!(e1.edited_image.data, e2.edited_image.data, "same seed, same image");
        let e3 = bundle.instruct_record(rec, &rec.instruction, 79).unwrap();
        assert_ne!(e1.edited_image.data, e3.edited_image.data, "new seed, new image");
        assert!(e1.region.coverage > 0.0);

        // A second pipeline over the same root loads rather than retrains:
        // tampering with a stored tensor shows up in the reloaded weights.
        let store = TensorStore::open(&pipe.checkpoint_dir("adaptor")).unwrap();
        let name = store
            .names()
            .into_iter()
            .find(|n| n.starts_with("adaptor"))
            .unwrap();
        let mut t = store.load(&name).unwrap();
        t.mapv_inplace(|v| v + 0.125);
        let mut store = TensorStore::open(&pipe.checkpoint_dir("adaptor")).unwrap();
        store.save(&name, &t).unwrap();
        let pipe2 = Pipeline::new(tiny_cfg(3131), dir.path()).unwrap();
        let bundle2 = pipe2.load_bundle().unwrap();
        let orig: Vec<ArrayD<f64>> = bundle.adaptor.params().iter().map(|p| p.value()).collect();
        let reloaded: Vec<ArrayD<f64>> = bundle2.adaptor.params().iter().map(|p| p.value()).collect();
        assert_ne!(orig, reloaded, "reload must reflect the stored tensors");

        // Evaluation produces a finite report tagged with both hashes.
        let report = bundle.evaluate(2, 99).unwrap();
        assert!(report.n >= 1);
        assert!(report.pixcorr.is_finite() && report.ssim.is_finite());
        assert_eq!(report.config_hash, bundle.cfg.hash());
        assert!(!report.corpus_hash.is_empty());
    }

    #[test]
    fn stale_stages_are_detected_per_dependency() {
        const STAGES: [&str; 6] = [
            "corpus",
            "encoders",
            "measurements",
            "mapper",
            "backbone",
            "adaptor",
        ];
        let dir = tempfile::tempdir().unwrap();
        let base = tiny_cfg(3232);
        // Cheap run: write markers for every stage without training, then
        // probe which ones a config change invalidates.
        let pipe = Pipeline::new(base.clone(), dir.path()).unwrap();
        pipe.ensure_corpus().unwrap();
        for stage in &STAGES[1..] {
            pipe.write_marker(stage, json!({})).unwrap();
        }
        for stage in STAGES {
            assert!(pipe.stage_complete(stage), "{stage} should start fresh");
        }

        let stale_after = |mutate: &dyn Fn(&mut RunConfig)| -> Vec<&'static str> {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            let probe = Pipeline::new(cfg, dir.path()).unwrap();
            STAGES
                .into_iter()
                .filter(|s| !probe.stage_complete(s))
                .collect()
        };

        // Each knob invalidates its own stage and everything downstream of
        // it — and nothing upstream.
        assert_eq!(
            stale_after(&|c| c.data.n_triplets += 1),
            ["corpus", "encoders", "measurements", "mapper", "backbone", "adaptor"]
        );
        assert_eq!(
            stale_after(&|c| c.train.tower_lr *= 2.0),
            ["encoders", "measurements", "mapper", "backbone", "adaptor"]
        );
        assert_eq!(
            stale_after(&|c| c.data.fmri_noise *= 2.0),
            ["measurements", "mapper"]
        );
        assert_eq!(stale_after(&|c| c.train.mapper_steps += 1), ["mapper"]);
        assert_eq!(
            stale_after(&|c| c.train.backbone_steps += 1),
            ["backbone", "adaptor"]
        );
        assert_eq!(stale_after(&|c| c.train.adaptor_steps += 1), ["adaptor"]);

        // Sampling parameters never retrain, except that the adaptor tracks
        // the lag it was tuned for.
        assert_eq!(stale_after(&|c| c.sampling.cfg_scale = 9.0), [""; 0]);
        assert_eq!(stale_after(&|c| c.sampling.k += 1), ["adaptor"]);
    }

    #[test]
    fn load_bundle_requires_training() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = Pipeline::new(tiny_cfg(3333), dir.path()).unwrap();
        let err = match pipe.load_bundle() {
            Err(e) => e,
            Ok(_) => panic!("expected an error from an untrained pipeline"),
        };
        assert!(
            err.to_string().contains("no up-to-date checkpoint"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn two_pass_region_timing_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(3434);
        cfg.sampling.region_timing = RegionTiming::TwoPass;
        cfg.sampling.region_mode = RegionMode::AllOnes;
        let pipe = Pipeline::new(cfg, dir.path()).unwrap();
        let bundle = pipe.ensure_all().unwrap();
        let rec = bundle.corpus.val_records()[0];
        let result = bundle.instruct_record(rec, &rec.instruction, 41).unwrap();
        assert_eq!(result.region.coverage, 1.0, "all-ones region covers everything");
        assert_eq!(result.edited_image.data.shape(), &[3, 64, 64]);
    }
}

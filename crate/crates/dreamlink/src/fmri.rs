//! Simulated brain measurements and the learned mapping back to embeddings.
//!
//! A fixed random linear forward model turns an image's vision embedding into
//! a long measurement vector, with independent Gaussian noise per repeated
//! trial (three presentations per image by default, which are averaged before
//! decoding).  A small mapper network is then trained to invert measurements
//! back into the embedding pair that conditions generation: a contrastive
//! alignment stage first, then plain regression onto the embedding targets.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, TrainConfig};
use crate::container::TensorStore;
use crate::datagen::corpus::{fmri_name, Corpus, Split};
use crate::datagen::grammar::encode_tokens;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::grid::{EmbeddingPair, FmriVector};
use crate::nn::{Adam, Linear, Tensor};
use crate::seeding::{derive_seed, rng_for};

/// Softmax temperature for the alignment stage.
const ALIGN_TEMPERATURE: f64 = 0.07;
/// Fraction of mapper steps spent on contrastive alignment before the
/// regression stage takes over.
const ALIGN_FRACTION: f64 = 0.4;

// ---------------------------------------------------------------------------
// Forward model
// ---------------------------------------------------------------------------

/// Fixed random linear map from embedding space to measurement space.
///
/// Measurements are `x = W e + eta` with `W` drawn once from `seed` and
/// `eta ~ N(0, noise_sigma^2)` fresh per trial.  The same seed always
/// reproduces the same `W`, so a corpus can be regenerated exactly.
pub struct FmriForwardModel {
    /// `[n_measurements, embed_dim]`.
    pub weights: Array2<f64>,
    pub noise_sigma: f64,
    /// Seed the weights were drawn from; recorded alongside stored data.
    pub seed: u64,
}

impl FmriForwardModel {
    pub fn new(seed: u64, n_measurements: usize, embed_dim: usize, noise_sigma: f64) -> Self {
        let mut rng = rng_for(seed, "fmri-forward", 0);
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let mut weights = Array2::zeros((n_measurements, embed_dim));
        for v in weights.iter_mut() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            *v = scale * draw;
        }
        Self {
            weights,
            noise_sigma,
            seed,
        }
    }

    pub fn n_measurements(&self) -> usize {
        self.weights.shape()[0]
    }

    /// One noisy measurement of an embedding.
    pub fn measure(
        &self,
        embed: &Array1<f64>,
        noise_rng: &mut ChaCha8Rng,
        subject_id: u32,
        trial_id: u32,
    ) -> FmriVector {
        let mut x = self.weights.dot(embed);
        if self.noise_sigma > 0.0 {
            for v in x.iter_mut() {
                let draw: f64 = StandardNormal.sample(noise_rng);
                *v += self.noise_sigma * draw;
            }
        }
        FmriVector::with_trial(x.to_vec(), subject_id, trial_id)
    }

    /// All trials for one stimulus plus their exact elementwise average.
    ///
    /// Trial noise derives from `(noise_seed, index, trial)`, so every
    /// stimulus and trial gets an independent, reproducible noise draw.
    pub fn simulate(
        &self,
        embed: &Array1<f64>,
        noise_seed: u64,
        index: u64,
        n_trials: usize,
    ) -> (Vec<FmriVector>, FmriVector) {
        assert!(n_trials >= 1, "need at least one trial");
        let per_stimulus = derive_seed(noise_seed, "fmri-noise", index);
        let mut trials = Vec::with_capacity(n_trials);
        for trial in 0..n_trials {
            let mut rng = rng_for(per_stimulus, "trial", trial as u64);
            trials.push(self.measure(embed, &mut rng, 1, trial as u32 + 1));
        }
        let mut mean = vec![0.0; self.n_measurements()];
        for t in &trials {
            for (m, v) in mean.iter_mut().zip(&t.data) {
                *m += *v;
            }
        }
        for m in &mut mean {
            *m /= n_trials as f64;
        }
        (trials, FmriVector::with_trial(mean, 1, 0))
    }
}

// ---------------------------------------------------------------------------
// Corpus attachment
// ---------------------------------------------------------------------------

/// Simulates measurements for every corpus record and writes them into the
/// corpus tensor store: one `[n_trials + 1, n_measurements]` tensor per
/// record, trials first and the trial average last.  The forward-model seed
/// and noise settings are recorded in the store metadata so the exact same
/// data can be regenerated.
pub fn attach_fmri_to_corpus(
    corpus: &Corpus,
    encoders: &Encoders,
    model: &FmriForwardModel,
    noise_seed: u64,
    n_trials: usize,
) -> Result<()> {
    let mut store = corpus.fmri_store()?;
    for rec in &corpus.records {
        let image = corpus.load_image(rec)?;
        let embed = encoders.embed_image(&image);
        let (trials, mean) = model.simulate(&embed, noise_seed, rec.index, n_trials);
        let n = model.n_measurements();
        let mut data = Array2::zeros((n_trials + 1, n));
        for (i, t) in trials.iter().enumerate() {
            for (j, v) in t.data.iter().enumerate() {
                data[[i, j]] = *v;
            }
        }
        for (j, v) in mean.data.iter().enumerate() {
            data[[n_trials, j]] = *v;
        }
        store.save(&fmri_name(rec.index), &data.into_dyn())?;
    }
    store.set_meta("forward_seed", &model.seed.to_string())?;
    store.set_meta("noise_seed", &noise_seed.to_string())?;
    store.set_meta("noise_sigma", &model.noise_sigma.to_string())?;
    store.set_meta("n_trials", &n_trials.to_string())?;
    Ok(())
}

/// Reads one record's stored trials and trial average back.
pub fn load_fmri(store: &TensorStore, index: u64) -> Result<(Vec<FmriVector>, FmriVector)> {
    let data = store.load(&fmri_name(index))?;
    let data = data
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::ShapeMismatch("stored measurement tensor must be 2-d".into()))?;
    let rows = data.shape()[0];
    if rows < 2 {
        return Err(Error::ShapeMismatch(
            "stored measurement tensor needs at least one trial plus the average".into(),
        ));
    }
    let mut trials = Vec::with_capacity(rows - 1);
    for i in 0..rows - 1 {
        trials.push(FmriVector::with_trial(
            data.row(i).to_vec(),
            1,
            i as u32 + 1,
        ));
    }
    let mean = FmriVector::with_trial(data.row(rows - 1).to_vec(), 1, 0);
    Ok((trials, mean))
}

// ---------------------------------------------------------------------------
// Mapper
// ---------------------------------------------------------------------------

/// Maps a measurement vector to the embedding pair used for conditioning.
///
/// Architecture: a linear trunk into a hidden width, an optional residual
/// MLP block, then two heads — a pooled vision vector (unit-normalized on
/// output) and a full grid of per-token text rows.  `linear_only` skips the
/// residual block so the map stays affine end to end.
pub struct Mapper {
    trunk: Linear,
    mlp1: Linear,
    mlp2: Linear,
    head_vis: Linear,
    head_text: Linear,
    /// Extra refinement block on the vision path (off by default).
    prior: Option<(Linear, Linear)>,
    pub linear_only: bool,
    n_measurements: usize,
    text_len: usize,
    embed_dim: usize,
}

impl Mapper {
    pub fn new(cfg: &ModelConfig, prior_head: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::build(cfg, prior_head, false, rng)
    }

    /// A mapper whose forward pass is affine end to end.
    pub fn new_linear_only(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::build(cfg, false, true, rng)
    }

    fn build(cfg: &ModelConfig, prior_head: bool, linear_only: bool, rng: &mut ChaCha8Rng) -> Self {
        let hidden = cfg.embed_dim * 4;
        let trunk = Linear::new(cfg.fmri_dim, hidden, rng);
        let mlp1 = Linear::new(hidden, hidden, rng);
        // Zero-init second halves so fresh residual blocks are identities.
        let mlp2 = Linear::new_zero(hidden, hidden);
        let head_vis = Linear::new(hidden, cfg.embed_dim, rng);
        let head_text = Linear::new(hidden, cfg.text_len * cfg.embed_dim, rng);
        let prior = if prior_head {
            Some((Linear::new(hidden, hidden, rng), Linear::new_zero(hidden, hidden)))
        } else {
            None
        };
        Self {
            trunk,
            mlp1,
            mlp2,
            head_vis,
            head_text,
            prior,
            linear_only,
            n_measurements: cfg.fmri_dim,
            text_len: cfg.text_len,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Batch forward: measurements `[n, n_measurements]` to raw vision
    /// vectors `[n, embed_dim]` and flattened text rows
    /// `[n, text_len * embed_dim]`.  The vision output is not yet normalized
    /// so it can serve as a regression target directly.
    pub fn forward_t(&self, x: &Tensor) -> (Tensor, Tensor) {
        let h0 = self.trunk.forward(x);
        let h = if self.linear_only {
            h0
        } else {
            let r = self.mlp2.forward(&self.mlp1.forward(&h0).silu());
            h0.add(&r)
        };
        let vis_in = match (&self.prior, self.linear_only) {
            (Some((p1, p2)), false) => {
                let r = p2.forward(&p1.forward(&h).silu());
                h.add(&r)
            }
            _ => h.clone(),
        };
        (self.head_vis.forward(&vis_in), self.head_text.forward(&h))
    }

    /// Decodes one measurement into an embedding pair.  The vision vector is
    /// renormalized to unit length; text rows keep their raw scale.
    pub fn map(&self, x: &FmriVector) -> Result<EmbeddingPair> {
        if x.data.len() != self.n_measurements {
            return Err(Error::ShapeMismatch(format!(
                "measurement length {} does not match mapper input {}",
                x.data.len(),
                self.n_measurements
            )));
        }
        let input = Tensor::constant(
            Array2::from_shape_vec((1, self.n_measurements), x.data.clone())
                .expect("row shape")
                .into_dyn(),
        );
        let (vis, text) = self.forward_t(&input);
        let vis = vis.l2norm_rows().value();
        let text = text.value();
        let mut f_vis = ArrayD::zeros(IxDyn(&[self.embed_dim]));
        for j in 0..self.embed_dim {
            f_vis[[j]] = vis[[0, j]];
        }
        let mut f_text = ArrayD::zeros(IxDyn(&[self.text_len, self.embed_dim]));
        for l in 0..self.text_len {
            for j in 0..self.embed_dim {
                f_text[[l, j]] = text[[0, l * self.embed_dim + j]];
            }
        }
        EmbeddingPair::new(f_text, f_vis)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.mlp1.params());
        p.extend(self.mlp2.params());
        p.extend(self.head_vis.params());
        p.extend(self.head_text.params());
        if let Some((p1, p2)) = &self.prior {
            p.extend(p1.params());
            p.extend(p2.params());
        }
        p
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.trunk.save(store, &format!("{prefix}.trunk"))?;
        self.mlp1.save(store, &format!("{prefix}.mlp1"))?;
        self.mlp2.save(store, &format!("{prefix}.mlp2"))?;
        self.head_vis.save(store, &format!("{prefix}.head_vis"))?;
        self.head_text.save(store, &format!("{prefix}.head_text"))?;
        if let Some((p1, p2)) = &self.prior {
            p1.save(store, &format!("{prefix}.prior1"))?;
            p2.save(store, &format!("{prefix}.prior2"))?;
        }
        Ok(())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.trunk.load(store, &format!("{prefix}.trunk"))?;
        self.mlp1.load(store, &format!("{prefix}.mlp1"))?;
        self.mlp2.load(store, &format!("{prefix}.mlp2"))?;
        self.head_vis.load(store, &format!("{prefix}.head_vis"))?;
        self.head_text.load(store, &format!("{prefix}.head_text"))?;
        if let Some((p1, p2)) = &self.prior {
            p1.load(store, &format!("{prefix}.prior1"))?;
            p2.load(store, &format!("{prefix}.prior2"))?;
        }
        Ok(())
    }

    pub fn freeze(&self) {
        crate::nn::set_trainable(&self.params(), false);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Summary statistics from mapper training.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MapperStats {
    /// Contrastive loss at the end of the alignment stage.
    pub align_loss: f64,
    /// Final regression MSE on the vision head (training batches).
    pub regress_mse_vis: f64,
    /// Final regression MSE on the text head (training batches).
    pub regress_mse_text: f64,
    /// Median cosine between mapped and true vision embeddings on held-out
    /// records.
    pub holdout_cosine: f64,
}

/// Per-record training arrays: measurements and their embedding targets.
pub struct MapperData {
    /// `[n, n_measurements]` trial-averaged measurements.
    pub xs: Array2<f64>,
    /// `[n, embed_dim]` unit vision embeddings of the source images.
    pub vis: Array2<f64>,
    /// `[n, text_len * embed_dim]` flattened per-token caption rows.
    pub text: Array2<f64>,
}

/// Collects measurements and targets for one corpus split.
pub fn collect_mapper_data(
    corpus: &Corpus,
    encoders: &Encoders,
    model_cfg: &ModelConfig,
    split: Split,
) -> Result<MapperData> {
    let store = corpus.fmri_store()?;
    let recs: Vec<_> = corpus
        .records
        .iter()
        .filter(|r| r.split == split)
        .collect();
    if recs.is_empty() {
        return Err(Error::Validation("corpus split is empty".into()));
    }
    let n = recs.len();
    let d = model_cfg.embed_dim;
    let l = model_cfg.text_len;
    let mut xs = Array2::zeros((n, model_cfg.fmri_dim));
    let mut vis = Array2::zeros((n, d));
    let mut text = Array2::zeros((n, l * d));
    for (row, rec) in recs.iter().enumerate() {
        if !store.contains(&fmri_name(rec.index)) {
            return Err(Error::Validation(
                "corpus has no stored measurements; attach them before training the mapper".into(),
            ));
        }
        let (_, mean) = load_fmri(&store, rec.index)?;
        if mean.data.len() != model_cfg.fmri_dim {
            return Err(Error::ShapeMismatch(format!(
                "stored measurement length {} does not match configured {}",
                mean.data.len(),
                model_cfg.fmri_dim
            )));
        }
        for (j, v) in mean.data.iter().enumerate() {
            xs[[row, j]] = *v;
        }
        let image = corpus.load_image(rec)?;
        let e = encoders.embed_image(&image);
        for j in 0..d {
            vis[[row, j]] = e[j];
        }
        let rows = encoders.text.context_rows(&rec.caption);
        for t in 0..l {
            for j in 0..d {
                text[[row, t * d + j]] = rows[[t, j]];
            }
        }
        // Captions always tokenize inside the closed vocabulary.
        debug_assert!(encode_tokens(&rec.caption).1 > 0);
    }
    Ok(MapperData { xs, vis, text })
}

fn batch_rows(src: &Array2<f64>, picks: &[usize]) -> Tensor {
    let cols = src.shape()[1];
    let mut out = Array2::zeros((picks.len(), cols));
    for (row, &i) in picks.iter().enumerate() {
        out.row_mut(row).assign(&src.row(i));
    }
    Tensor::constant(out.into_dyn())
}

/// Runs alignment then regression on prepared data.  Exposed separately from
/// [`train_mapper`] so callers can train on synthetic data directly.
pub fn fit_mapper(
    mapper: &Mapper,
    data: &MapperData,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64) {
    let n = data.xs.shape()[0];
    let mut opt = Adam::new(mapper.params(), lr);
    let steps_align = ((steps as f64) * ALIGN_FRACTION).round() as usize;
    let mut align_loss = f64::NAN;
    let mut mse_vis = f64::NAN;
    let mut mse_text = f64::NAN;
    for step in 0..steps {
        let picks: Vec<usize> = if step < steps_align {
            // Alignment contrasts records against each other, so a batch
            // must not contain the same record twice.
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(rng);
            pool.into_iter().take(batch.min(n)).collect()
        } else {
            (0..batch).map(|_| rng.gen_range(0..n)).collect()
        };
        let x = batch_rows(&data.xs, &picks);
        let (vis_pred, text_pred) = mapper.forward_t(&x);
        let loss = if step < steps_align {
            let vt = batch_rows(&data.vis, &picks);
            let tt = batch_rows(&data.text, &picks).l2norm_rows();
            let logits_v = vis_pred
                .l2norm_rows()
                .matmul(&vt.transpose2d())
                .mul_scalar(1.0 / ALIGN_TEMPERATURE);
            let logits_t = text_pred
                .l2norm_rows()
                .matmul(&tt.transpose2d())
                .mul_scalar(1.0 / ALIGN_TEMPERATURE);
            let ce = |l: &Tensor| {
                l.cross_entropy_diag()
                    .add(&l.transpose2d().cross_entropy_diag())
                    .mul_scalar(0.5)
            };
            let loss = ce(&logits_v).add(&ce(&logits_t)).mul_scalar(0.5);
            align_loss = loss.value()[[0]];
            loss
        } else {
            let vt = batch_rows(&data.vis, &picks);
            let tt = batch_rows(&data.text, &picks);
            let lv = vis_pred.sub(&vt).square().mean_all();
            let lt = text_pred.sub(&tt).square().mean_all();
            mse_vis = lv.value()[[0]];
            mse_text = lt.value()[[0]];
            lv.add(&lt)
        };
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    (align_loss, mse_vis, mse_text)
}

/// Trains the measurement-to-embedding mapper on a corpus with attached
/// measurements: contrastive alignment for the first stretch of steps, then
/// MSE regression onto the vision and text targets.  Deterministic for a
/// fixed seed.
pub fn train_mapper(
    corpus: &Corpus,
    encoders: &Encoders,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<(Mapper, MapperStats)> {
    let data = collect_mapper_data(corpus, encoders, model_cfg, Split::Train)?;
    if data.xs.shape()[0] < 2 {
        return Err(Error::Validation(
            "mapper training needs at least two records".into(),
        ));
    }
    let mut rng = rng_for(seed, "mapper-train", 0);
    let mapper = Mapper::new(model_cfg, cfg.mapper_prior_head, &mut rng);
    let (align_loss, regress_mse_vis, regress_mse_text) = fit_mapper(
        &mapper,
        &data,
        cfg.mapper_steps,
        cfg.mapper_batch,
        cfg.mapper_lr,
        &mut rng,
    );
    let holdout = collect_mapper_data(corpus, encoders, model_cfg, Split::Val)
        .or_else(|_| collect_mapper_data(corpus, encoders, model_cfg, Split::Train))?;
    let holdout_cosine = median_cosine(&mapper, &holdout)?;
    mapper.freeze();
    Ok((
        mapper,
        MapperStats {
            align_loss,
            regress_mse_vis,
            regress_mse_text,
            holdout_cosine,
        },
    ))
}

/// Median cosine between mapped vision vectors and their true embeddings.
pub fn median_cosine(mapper: &Mapper, data: &MapperData) -> Result<f64> {
    let n = data.xs.shape()[0];
    let mut cosines = Vec::with_capacity(n);
    for i in 0..n {
        let x = FmriVector::new(data.xs.row(i).to_vec());
        let pair = mapper.map(&x)?;
        let target = data.vis.row(i);
        let mut dot = 0.0;
        let mut nt = 0.0;
        for j in 0..target.len() {
            dot += pair.f_vis[[j]] * target[j];
            nt += target[j] * target[j];
        }
        // Mapped vectors are unit; targets are unit up to float error.
        cosines.push(dot / nt.sqrt().max(1e-12));
    }
    cosines.sort_by(|a, b| a.partial_cmp(b).expect("finite cosines"));
    Ok(cosines[n / 2])
}

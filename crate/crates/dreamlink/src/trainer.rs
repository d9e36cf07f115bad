//! Training loops for the two denoising streams and the feature adaptor.
//!
//! Training happens in two phases.  First both denoiser backbones learn
//! plain noise prediction on corpus latents ([`train_backbone`]): the
//! reconstruction stream conditions on image/caption embedding rows, the
//! instruction stream conditions on instruction rows plus the clean source
//! latent.  Second ([`train_adaptor`]), the adaptor and the instruction
//! stream's input stem are tuned with lagged teacher forcing: the source
//! latent is noised `k_raw` steps less than the edited latent, the frozen
//! reconstruction stream interprets it, and its decoder features are
//! injected into the instruction stream.  The adaptor phase adds a
//! directional penalty ([`style_loss`]) that pushes the shift in the decoded
//! image's embedding to line up with the shift between the source and edited
//! caption embeddings, weighted by the signal level `sqrt(alpha_bar_t)`.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{MaskedValues, ModelConfig, TrainConfig};
use crate::datagen::corpus::{Corpus, Split, TripletRecord};
use crate::denoisers::{
    pair_context_rows, Adaptor, CondItem, InstructDenoiser, InterpretDenoiser,
};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::grid::{EmbeddingPair, LatentGrid, RegionMask};
use crate::nn::{set_trainable, Adam, Tensor};
use crate::schedule::DiffusionSchedule;
use crate::seeding::rng_for;

// ---------------------------------------------------------------- losses

/// Mean squared error between two same-shape tensors.
pub fn loss_simple(pred: &Tensor, target: &Tensor) -> Tensor {
    pred.sub(target).square().mean_all()
}

/// `1 - mean_i cos(a_i, b_i)` over matching rows of two `[n, d]` tensors.
///
/// Row norms are smoothed inside [`Tensor::l2norm_rows`], so a zero row
/// contributes cosine 0 (loss 1) instead of NaN.  The mean cosine is
/// recovered from the elementwise product of the normalized rows:
/// `sum_i cos_i = sum_ij (a_hat * b_hat)_ij = mean_all * n * d`.
pub fn style_loss(delta_vis: &Tensor, delta_text: &Tensor) -> Tensor {
    assert_eq!(delta_vis.shape(), delta_text.shape(), "direction shapes");
    let d = delta_vis.shape()[1] as f64;
    delta_vis
        .l2norm_rows()
        .mul(&delta_text.l2norm_rows())
        .mean_all()
        .mul_scalar(-d)
        .add_scalar(1.0)
}

/// Directional agreement between an image-embedding shift and a
/// text-embedding shift: exactly `1 - style_loss` on the single row pair,
/// through the same code path the training loss uses.
pub fn direction_similarity(delta_vis: &Array1<f64>, delta_text: &Array1<f64>) -> f64 {
    let a = row_tensor(delta_vis);
    let b = row_tensor(delta_text);
    1.0 - style_loss(&a, &b).value()[[0]]
}

fn row_tensor(v: &Array1<f64>) -> Tensor {
    let d = v.len();
    Tensor::constant(
        ArrayD::from_shape_vec(IxDyn(&[1, d]), v.to_vec()).expect("row tensor"),
    )
}

/// Raw-schedule step count corresponding to a lag of `k` strided sampling
/// steps: with `sample_steps` strided steps over a `train_steps` schedule,
/// consecutive strided steps are `train_steps / sample_steps` raw steps
/// apart, so a `k`-step lag spans `k * train_steps / sample_steps` raw steps.
pub fn raw_step_offset(train_steps: usize, sample_steps: usize, k: usize) -> usize {
    k * train_steps / sample_steps
}

// ------------------------------------------------------ training material

/// Per-record material for reconstruction-stream pretraining.
pub struct ReconItem {
    /// Clean latent of the source image.
    pub z0: ArrayD<f64>,
    /// Conditioning rows: image embedding row then caption token rows.
    pub cond_rows: Array2<f64>,
}

/// Per-record material for instruction-stream pretraining and adaptor tuning.
pub struct EditItem {
    /// Clean latent of the source image.
    pub z0_src: ArrayD<f64>,
    /// Clean latent of the edited image.
    pub z0_edit: ArrayD<f64>,
    /// Conditioning rows for the reconstruction stream (source image/caption).
    pub src_cond_rows: Array2<f64>,
    /// Conditioning rows for the instruction stream: source-image embedding
    /// row then instruction token rows.
    pub instr_rows: Array2<f64>,
    /// Same layout with the instruction rows zeroed (guidance-free variant).
    pub null_rows: Array2<f64>,
    /// Ground-truth edit region.
    pub mask: RegionMask,
    /// Embedding of the source image (unit norm).
    pub f_vis_src: Array1<f64>,
    /// Caption-embedding shift: edited caption minus source caption.
    pub delta_text: Array1<f64>,
}

fn split_records(corpus: &Corpus, split: Split) -> Result<Vec<&TripletRecord>> {
    let recs = match split {
        Split::Train => corpus.train_records(),
        Split::Val => corpus.val_records(),
    };
    if recs.is_empty() {
        return Err(Error::Validation(format!("no {split:?} records in corpus")));
    }
    Ok(recs)
}

/// Conditioning rows for one image/text pair: embedding row, then token rows.
fn cond_rows_for(encoders: &Encoders, image_embed: &Array1<f64>, text: &str) -> Result<Array2<f64>> {
    let pair = EmbeddingPair::new(
        encoders.text.context_rows(text).into_dyn(),
        image_embed.clone().into_dyn(),
    )?;
    Ok(pair_context_rows(&pair))
}

/// Encode and embed every record of `split` for reconstruction pretraining.
pub fn collect_recon_items(
    corpus: &Corpus,
    encoders: &Encoders,
    split: Split,
) -> Result<Vec<ReconItem>> {
    let mut items = Vec::new();
    for rec in split_records(corpus, split)? {
        let img = corpus.load_image(rec)?;
        let z0 = encoders.codec.encode(&img).data;
        let f_vis = encoders.embed_image(&img);
        let cond_rows = cond_rows_for(encoders, &f_vis, &rec.caption)?;
        items.push(ReconItem { z0, cond_rows });
    }
    Ok(items)
}

/// Encode and embed every record of `split` for instruction training.
pub fn collect_edit_items(
    corpus: &Corpus,
    encoders: &Encoders,
    split: Split,
) -> Result<Vec<EditItem>> {
    let mut items = Vec::new();
    for rec in split_records(corpus, split)? {
        let src = corpus.load_image(rec)?;
        let edit = corpus.load_image_edit(rec)?;
        let f_vis_src = encoders.embed_image(&src);
        let src_cond_rows = cond_rows_for(encoders, &f_vis_src, &rec.caption)?;
        let instr_rows = cond_rows_for(encoders, &f_vis_src, &rec.instruction)?;
        let null_rows = cond_rows_for(encoders, &f_vis_src, "")?;
        let delta_text = &encoders.embed_text(&rec.caption_edit) - &encoders.embed_text(&rec.caption);
        items.push(EditItem {
            z0_src: encoders.codec.encode(&src).data,
            z0_edit: encoders.codec.encode(&edit).data,
            src_cond_rows,
            instr_rows,
            null_rows,
            mask: corpus.region_truth(rec)?,
            f_vis_src,
            delta_text,
        });
    }
    Ok(items)
}

// ------------------------------------------------------------ batch helpers

fn draw_eps(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("noise shape")
}

/// Diffuse `z0` to step `t`, returning the noisy latent and the noise drawn.
fn noised(
    schedule: &DiffusionSchedule,
    z0: &ArrayD<f64>,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let eps = draw_eps(z0.shape(), rng);
    let z_t = schedule.forward_diffuse(
        &LatentGrid::new(z0.clone(), 0)?,
        &LatentGrid::new(eps.clone(), 0)?,
        t,
    )?;
    Ok((z_t.data, eps))
}

/// Stack `[c,h,w]` arrays into an `[n,c,h,w]` constant tensor.
fn stack_latents(items: &[ArrayD<f64>]) -> Tensor {
    let s = items[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), s[0], s[1], s[2]]));
    for (i, a) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(a);
    }
    Tensor::constant(out)
}

/// Stack `[d]` rows into an `[n,d]` constant tensor.
fn stack_rows(rows: &[&Array1<f64>]) -> Tensor {
    let d = rows[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[rows.len(), d]));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Tensor::constant(out)
}

fn item_of(batch: &ArrayD<f64>, i: usize) -> ArrayD<f64> {
    batch.index_axis(Axis(0), i).to_owned()
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean loss over the first and last `w` recorded steps.
fn endpoints(history: &[f64]) -> (f64, f64) {
    let w = history.len().min(20).max(1);
    (mean_of(&history[..w]), mean_of(&history[history.len() - w..]))
}

// --------------------------------------------------------- backbone phase

/// Loss trajectory endpoints for both backbone streams (mean over the first
/// and last 20 recorded steps), plus the full per-step histories for
/// in-process inspection (not serialized into stage markers).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneStats {
    pub recon_loss_start: f64,
    pub recon_loss_end: f64,
    pub edit_loss_start: f64,
    pub edit_loss_end: f64,
    #[serde(skip)]
    pub recon_history: Vec<f64>,
    #[serde(skip)]
    pub edit_history: Vec<f64>,
}

/// Pretrain both denoiser backbones with noise-prediction loss at uniformly
/// drawn timesteps.  On the instruction stream, conditioning is dropped to
/// its null variant with probability `cfg.cond_dropout` per item, which
/// keeps the unconditional pathway calibrated for classifier-free guidance
/// at sampling time.  The reconstruction stream always runs unguided, so it
/// trains on full conditioning every step.
pub fn train_backbone(
    corpus: &Corpus,
    encoders: &Encoders,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<(InterpretDenoiser, InstructDenoiser, BackboneStats)> {
    let recon_items = collect_recon_items(corpus, encoders, Split::Train)?;
    let edit_items = collect_edit_items(corpus, encoders, Split::Train)?;

    let interp = InterpretDenoiser::new(model_cfg, &mut rng_for(seed, "backbone-init-r", 0));
    let instruct = InstructDenoiser::new(model_cfg, &mut rng_for(seed, "backbone-init-e", 0));

    let recon_history = fit_recon(
        &interp,
        &recon_items,
        schedule,
        cfg,
        &mut rng_for(seed, "backbone-recon", 0),
    )?;
    let edit_history = fit_edit(
        &instruct,
        &edit_items,
        schedule,
        cfg,
        &mut rng_for(seed, "backbone-edit", 0),
    )?;

    let (recon_loss_start, recon_loss_end) = endpoints(&recon_history);
    let (edit_loss_start, edit_loss_end) = endpoints(&edit_history);
    let stats = BackboneStats {
        recon_loss_start,
        recon_loss_end,
        edit_loss_start,
        edit_loss_end,
        recon_history,
        edit_history,
    };
    Ok((interp, instruct, stats))
}

fn fit_recon(
    net: &InterpretDenoiser,
    items: &[ReconItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(net.params(), cfg.backbone_lr);
    let mut history = Vec::with_capacity(cfg.backbone_steps);
    for _ in 0..cfg.backbone_steps {
        let mut zs = Vec::with_capacity(cfg.backbone_batch);
        let mut eps = Vec::with_capacity(cfg.backbone_batch);
        let mut ts = Vec::with_capacity(cfg.backbone_batch);
        let mut conds = Vec::with_capacity(cfg.backbone_batch);
        for _ in 0..cfg.backbone_batch {
            let item = &items[rng.gen_range(0..items.len())];
            let t = rng.gen_range(1..=schedule.len());
            let (z_t, e) = noised(schedule, &item.z0, t, rng)?;
            zs.push(z_t);
            eps.push(e);
            ts.push(t);
            conds.push(CondItem::unmasked(item.cond_rows.clone()));
        }
        let (eps_hat, _) = net.forward(&stack_latents(&zs), &ts, &conds);
        let loss = loss_simple(&eps_hat, &stack_latents(&eps));
        history.push(loss.value()[[0]]);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    Ok(history)
}

fn fit_edit(
    net: &InstructDenoiser,
    items: &[EditItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(net.params(), cfg.backbone_lr);
    let mut history = Vec::with_capacity(cfg.backbone_steps);
    for _ in 0..cfg.backbone_steps {
        let mut z0r = Vec::with_capacity(cfg.backbone_batch);
        let mut zs = Vec::with_capacity(cfg.backbone_batch);
        let mut eps = Vec::with_capacity(cfg.backbone_batch);
        let mut ts = Vec::with_capacity(cfg.backbone_batch);
        let mut conds = Vec::with_capacity(cfg.backbone_batch);
        for _ in 0..cfg.backbone_batch {
            let item = &items[rng.gen_range(0..items.len())];
            let t = rng.gen_range(1..=schedule.len());
            let (z_t, e) = noised(schedule, &item.z0_edit, t, rng)?;
            z0r.push(item.z0_src.clone());
            zs.push(z_t);
            eps.push(e);
            ts.push(t);
            let cond = CondItem::masked(
                item.instr_rows.clone(),
                item.null_rows.clone(),
                item.mask.clone(),
            );
            conds.push(if rng.gen::<f64>() < cfg.cond_dropout {
                cond.nulled()
            } else {
                cond
            });
        }
        let eps_hat = net.forward(
            &stack_latents(&zs),
            &stack_latents(&z0r),
            &ts,
            &conds,
            None,
            MaskedValues::NullValues,
        );
        let loss = loss_simple(&eps_hat, &stack_latents(&eps));
        history.push(loss.value()[[0]]);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    Ok(history)
}

// ---------------------------------------------------------- adaptor phase

/// One adaptor training step, as recorded: the drawn timestep, the lagged
/// timestep the frozen interpretation pass ran at, and the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptorStepRecord {
    /// Timestep of the edited latent.
    pub t: usize,
    /// Timestep of the lagged source latent (`t` minus the raw lag).
    pub t_lag: usize,
    /// Noise-prediction MSE term.
    pub simple: f64,
    /// Directional penalty term (unweighted).
    pub style: f64,
    /// Optimized total: `simple + sqrt(alpha_bar_t) * style`.
    pub total: f64,
}

/// Loss trajectory endpoints for adaptor tuning, with the final noise and
/// direction terms reported separately (means over the last 20 steps).
/// `steps` carries the full per-step audit trail; it is skipped when the
/// stats are serialized into stage markers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdaptorStats {
    pub loss_start: f64,
    pub loss_end: f64,
    pub simple_end: f64,
    pub style_end: f64,
    #[serde(skip)]
    pub steps: Vec<AdaptorStepRecord>,
}

/// Draw one training timestep uniformly from `{k_raw+1, ..., train_steps}`,
/// so the lagged step `t - k_raw` stays inside the schedule.
pub fn draw_timestep(rng: &mut ChaCha8Rng, k_raw: usize, train_steps: usize) -> usize {
    rng.gen_range(k_raw + 1..=train_steps)
}

/// Tune the feature adaptor and the instruction stream's input stem with
/// lagged teacher forcing.
///
/// Each step draws one timestep `t` uniformly from `{k_raw+1, ..., T}`.  The
/// source latent is diffused to `t - k_raw` and interpreted by the frozen
/// reconstruction stream, yielding the clean estimate fed to the instruction
/// stream and the decoder features injected through the adaptor.  The edited
/// latent is diffused to `t` and the instruction stream predicts its noise.
/// The loss is the noise MSE plus `sqrt(alpha_bar_t)` times the directional
/// penalty on the decoded clean estimate.
///
/// Everything except the adaptor and the instruction stream's input stem is
/// frozen (and left frozen on return; sampling never needs gradients).
pub fn train_adaptor(
    corpus: &Corpus,
    encoders: &Encoders,
    interp: &InterpretDenoiser,
    instruct: &InstructDenoiser,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    k_raw: usize,
    seed: u64,
) -> Result<(Adaptor, AdaptorStats)> {
    if k_raw >= schedule.len() {
        return Err(Error::Validation(format!(
            "lagged-step offset {k_raw} must be smaller than the schedule length {}",
            schedule.len()
        )));
    }
    let items = collect_edit_items(corpus, encoders, Split::Train)?;
    let adaptor = Adaptor::new(model_cfg, &mut rng_for(seed, "adaptor-init", 0));

    set_trainable(&interp.params(), false);
    set_trainable(&instruct.params(), false);
    set_trainable(&encoders.codec.params(), false);
    set_trainable(&encoders.vision.params(), false);
    set_trainable(&instruct.input_conv_params(), true);

    let mut trainable = adaptor.params();
    trainable.extend(instruct.input_conv_params());
    let mut opt = Adam::new(trainable, cfg.adaptor_lr);

    let rng = &mut rng_for(seed, "adaptor-train", 0);
    let mut history = Vec::with_capacity(cfg.adaptor_steps);
    let mut simple_hist = Vec::with_capacity(cfg.adaptor_steps);
    let mut style_hist = Vec::with_capacity(cfg.adaptor_steps);
    let mut step_records = Vec::with_capacity(cfg.adaptor_steps);
    for _ in 0..cfg.adaptor_steps {
        let t = draw_timestep(rng, k_raw, schedule.len());
        let tr = t - k_raw;
        let ab = schedule.alpha_bar_at(t)?;

        let mut zr = Vec::with_capacity(cfg.adaptor_batch);
        let mut ze = Vec::with_capacity(cfg.adaptor_batch);
        let mut eps_e = Vec::with_capacity(cfg.adaptor_batch);
        let mut conds_r = Vec::with_capacity(cfg.adaptor_batch);
        let mut conds_e = Vec::with_capacity(cfg.adaptor_batch);
        let mut f_vis = Vec::with_capacity(cfg.adaptor_batch);
        let mut d_text = Vec::with_capacity(cfg.adaptor_batch);
        let mut picks = Vec::with_capacity(cfg.adaptor_batch);
        for _ in 0..cfg.adaptor_batch {
            let idx = rng.gen_range(0..items.len());
            let item = &items[idx];
            picks.push(idx);
            let (z_r, _) = noised(schedule, &item.z0_src, tr, rng)?;
            let (z_e, e) = noised(schedule, &item.z0_edit, t, rng)?;
            zr.push(z_r);
            ze.push(z_e);
            eps_e.push(e);
            conds_r.push(CondItem::unmasked(item.src_cond_rows.clone()));
            let cond = CondItem::masked(
                item.instr_rows.clone(),
                item.null_rows.clone(),
                item.mask.clone(),
            );
            conds_e.push(if rng.gen::<f64>() < cfg.cond_dropout {
                cond.nulled()
            } else {
                cond
            });
            f_vis.push(&item.f_vis_src);
            d_text.push(&item.delta_text);
        }

        // Frozen interpretation pass at the lagged step: clean estimates for
        // the instruction stream's input and features for the adaptor.
        let zr_batch = stack_latents(&zr);
        let ts_r = vec![tr; cfg.adaptor_batch];
        let (eps_r, feats) = interp.forward(&zr_batch, &ts_r, &conds_r);
        let eps_r_val = eps_r.value();
        let mut z0r = Vec::with_capacity(cfg.adaptor_batch);
        for i in 0..cfg.adaptor_batch {
            let est = schedule.estimate_clean(
                &LatentGrid::new(zr[i].clone(), tr)?,
                &LatentGrid::new(item_of(&eps_r_val, i), tr)?,
                tr,
            )?;
            z0r.push(est.data);
        }
        let injected = adaptor.forward(&feats);

        let ze_batch = stack_latents(&ze);
        let ts_e = vec![t; cfg.adaptor_batch];
        let eps_hat = instruct.forward(
            &ze_batch,
            &stack_latents(&z0r),
            &ts_e,
            &conds_e,
            Some(&injected),
            MaskedValues::NullValues,
        );
        let simple = loss_simple(&eps_hat, &stack_latents(&eps_e));

        // Differentiable clean estimate of the edited latent, decoded and
        // embedded so the direction term can reach the adaptor.
        let z0e_hat = ze_batch
            .sub(&eps_hat.mul_scalar((1.0 - ab).sqrt()))
            .mul_scalar(1.0 / ab.sqrt());
        let y_hat = encoders.codec.decode_t(&z0e_hat);
        let delta_vis = encoders.vision.forward_t(&y_hat).sub(&stack_rows(&f_vis));
        let style = style_loss(&delta_vis, &stack_rows(&d_text));

        let loss = simple.add(&style.mul_scalar(ab.sqrt()));
        history.push(loss.value()[[0]]);
        simple_hist.push(simple.value()[[0]]);
        style_hist.push(style.value()[[0]]);
        step_records.push(AdaptorStepRecord {
            t,
            t_lag: tr,
            simple: simple.value()[[0]],
            style: style.value()[[0]],
            total: loss.value()[[0]],
        });
        opt.zero_grad();
        loss.backward();
        opt.step();
    }

    let (loss_start, loss_end) = endpoints(&history);
    let stats = AdaptorStats {
        loss_start,
        loss_end,
        simple_end: endpoints(&simple_hist).1,
        style_end: endpoints(&style_hist).1,
        steps: step_records,
    };
    Ok((adaptor, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::SigmaMode;
    use crate::datagen::corpus::build_corpus;
    use crate::schedule::make_schedule;
    use ndarray::array;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            latent_channels: 2,
            latent_size: 16,
            widths: [8, 16, 24],
            time_dim: 16,
            time_chan: 24,
            embed_dim: 16,
            text_len: 16,
            fmri_dim: 64,
        }
    }

    fn tiny_train(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            backbone_steps: steps,
            backbone_batch: batch,
            backbone_lr: 1e-3,
            adaptor_steps: steps,
            adaptor_batch: batch,
            adaptor_lr: 1e-3,
            cond_dropout: 0.1,
            ..TrainConfig::default()
        }
    }

    fn short_schedule() -> DiffusionSchedule {
        make_schedule(40, 1e-4, 0.02, SigmaMode::Posterior).unwrap()
    }

    fn rows(data: Vec<Vec<f64>>) -> Tensor {
        let n = data.len();
        let d = data[0].len();
        let flat: Vec<f64> = data.into_iter().flatten().collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n, d]), flat).unwrap())
    }

    #[test]
    fn style_loss_hand_values() {
        // Parallel rows: cosine 1, loss 0.
        let l = style_loss(&rows(vec![vec![2.0, 0.0]]), &rows(vec![vec![5.0, 0.0]]));
        assert!((l.value()[[0]] - 0.0).abs() < 1e-9, "parallel: {}", l.value()[[0]]);
        // Orthogonal rows: cosine 0, loss 1.
        let l = style_loss(&rows(vec![vec![1.0, 0.0]]), &rows(vec![vec![0.0, 3.0]]));
        assert!((l.value()[[0]] - 1.0).abs() < 1e-9);
        // Opposite rows: cosine -1, loss 2.
        let l = style_loss(&rows(vec![vec![1.0, 1.0]]), &rows(vec![vec![-2.0, -2.0]]));
        assert!((l.value()[[0]] - 2.0).abs() < 1e-9);
        // Batch mean over the three cases above.
        let a = rows(vec![vec![2.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        let b = rows(vec![vec![5.0, 0.0], vec![0.0, 3.0], vec![-2.0, -2.0]]);
        assert!((style_loss(&a, &b).value()[[0]] - 1.0).abs() < 1e-9);
        // 45-degree case: cosine 1/sqrt(2).
        let l = style_loss(&rows(vec![vec![1.0, 0.0]]), &rows(vec![vec![1.0, 1.0]]));
        assert!((l.value()[[0]] - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn direction_similarity_complements_style_loss() {
        let mut rng = rng_for(11, "dirsim", 0);
        for _ in 0..10 {
            let a: Array1<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let b: Array1<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let loss = style_loss(&row_tensor(&a), &row_tensor(&b)).value()[[0]];
            // Same code path, so the complement holds bitwise.
            assert_eq!(direction_similarity(&a, &b), 1.0 - loss);
        }
    }

    #[test]
    fn style_loss_gradient_matches_finite_difference() {
        let mut rng = rng_for(12, "style-fd", 0);
        let a0 = draw_eps(&[2, 4], &mut rng);
        let b = Tensor::constant(draw_eps(&[2, 4], &mut rng));
        let a = Tensor::param(a0.clone());
        let loss = style_loss(&a, &b);
        loss.backward();
        let grad = a.grad().expect("grad present");
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut plus = a0.clone();
                plus[[i, j]] += h;
                let mut minus = a0.clone();
                minus[[i, j]] -= h;
                let lp = style_loss(&Tensor::constant(plus), &b).value()[[0]];
                let lm = style_loss(&Tensor::constant(minus), &b).value()[[0]];
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (grad[[i, j]] - fd).abs() < 1e-5,
                    "grad[{i},{j}] {} vs fd {}",
                    grad[[i, j]],
                    fd
                );
            }
        }
    }

    #[test]
    fn loss_simple_is_mean_squared_error() {
        let a = Tensor::constant(array![[1.0, 2.0], [3.0, 5.0]].into_dyn());
        let b = Tensor::constant(array![[1.0, 4.0], [0.0, 5.0]].into_dyn());
        // Squared errors 0, 4, 9, 0 -> mean 3.25.
        assert!((loss_simple(&a, &b).value()[[0]] - 3.25).abs() < 1e-12);
    }

    #[test]
    fn raw_step_offset_values() {
        assert_eq!(raw_step_offset(1000, 50, 15), 300);
        assert_eq!(raw_step_offset(1000, 50, 0), 0);
        assert_eq!(raw_step_offset(1000, 25, 15), 600);
        assert_eq!(raw_step_offset(1000, 10, 3), 300);
        assert_eq!(raw_step_offset(500, 50, 15), 150);
    }

    // One tiny corpus + encoder set shared by the slow tests below.
    fn tiny_fixture(dir: &std::path::Path) -> (Corpus, Encoders) {
        build_corpus(902, 10, 1, dir).unwrap();
        let corpus = Corpus::load(dir).unwrap();
        let encoders = Encoders::new(&tiny_model(), 903);
        (corpus, encoders)
    }

    #[test]
    fn backbone_training_reduces_noise_prediction_error() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, encoders) = tiny_fixture(dir.path());
        let schedule = short_schedule();
        let cfg = tiny_train(40, 4);
        let (_, _, stats) =
            train_backbone(&corpus, &encoders, &schedule, &cfg, &tiny_model(), 904).unwrap();
        assert!(
            stats.recon_loss_end < stats.recon_loss_start,
            "reconstruction stream: {} -> {}",
            stats.recon_loss_start,
            stats.recon_loss_end
        );
        assert!(
            stats.edit_loss_end < stats.edit_loss_start,
            "instruction stream: {} -> {}",
            stats.edit_loss_start,
            stats.edit_loss_end
        );
        assert!(stats.recon_loss_end.is_finite() && stats.edit_loss_end.is_finite());
    }

    #[test]
    fn adaptor_training_updates_only_adaptor_and_input_stem() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, encoders) = tiny_fixture(dir.path());
        let schedule = short_schedule();
        let model = tiny_model();
        let interp = InterpretDenoiser::new(&model, &mut rng_for(905, "r", 0));
        let instruct = InstructDenoiser::new(&model, &mut rng_for(905, "e", 0));
        let before: Vec<ArrayD<f64>> = interp
            .params()
            .iter()
            .chain(instruct.params().iter())
            .chain(encoders.codec.params().iter())
            .chain(encoders.vision.params().iter())
            .map(|p| p.value())
            .collect();

        let cfg = tiny_train(3, 2);
        let (adaptor, stats) = train_adaptor(
            &corpus, &encoders, &interp, &instruct, &schedule, &cfg, &model, 10, 906,
        )
        .unwrap();
        assert!(stats.loss_end.is_finite());

        // Frozen parameters are bitwise unchanged; the trainable set moved.
        let all: Vec<Tensor> = interp
            .params()
            .into_iter()
            .chain(instruct.params())
            .chain(encoders.codec.params())
            .chain(encoders.vision.params())
            .collect();
        let mut changed_frozen = 0;
        let mut changed_trainable = 0;
        for (p, b) in all.iter().zip(&before) {
            let same = p.value() == *b;
            if p.needs_grad() {
                if !same {
                    changed_trainable += 1;
                }
            } else if !same {
                changed_frozen += 1;
            }
        }
        assert_eq!(changed_frozen, 0, "frozen parameters moved");
        assert_eq!(
            changed_trainable,
            instruct.input_conv_params().len(),
            "input stem did not move"
        );
        assert!(
            adaptor.params().iter().any(|p| p.value().iter().any(|v| *v != 0.0)),
            "adaptor left its zero initialization"
        );
    }

    #[test]
    fn adaptor_training_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, encoders) = tiny_fixture(dir.path());
        let schedule = short_schedule();
        let model = tiny_model();
        let cfg = tiny_train(3, 2);
        let run = || {
            let interp = InterpretDenoiser::new(&model, &mut rng_for(907, "r", 0));
            let instruct = InstructDenoiser::new(&model, &mut rng_for(907, "e", 0));
            set_trainable(&interp.params(), true);
            set_trainable(&instruct.params(), true);
            let (adaptor, _) = train_adaptor(
                &corpus, &encoders, &interp, &instruct, &schedule, &cfg, &model, 10, 908,
            )
            .unwrap();
            adaptor.params().iter().map(|p| p.value()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run(), "adaptor weights differ between identical runs");
    }

    #[test]
    fn train_adaptor_rejects_offset_beyond_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, encoders) = tiny_fixture(dir.path());
        let schedule = short_schedule();
        let model = tiny_model();
        let interp = InterpretDenoiser::new(&model, &mut rng_for(909, "r", 0));
        let instruct = InstructDenoiser::new(&model, &mut rng_for(909, "e", 0));
        let err = train_adaptor(
            &corpus,
            &encoders,
            &interp,
            &instruct,
            &schedule,
            &tiny_train(1, 1),
            &model,
            40,
            910,
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("must be smaller than the schedule length"),
            "unexpected error: {err}"
        );
    }
}

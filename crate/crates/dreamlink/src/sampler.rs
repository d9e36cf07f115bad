//! Asynchronous dual-stream sampling.
//!
//! One denoising run drives two latents at once.  The interpretation stream
//! reconstructs what the decoded measurements describe; the instruction
//! stream, offset `K` sub-steps behind in denoising progress, produces the
//! edited result.  Sampling proceeds in three phases:
//!
//! 1. **Warmup** — the interpretation stream runs alone for `K` steps, so
//!    its content estimate has taken shape before editing begins.
//! 2. **Joint** — both streams advance together.  Each iteration runs one
//!    interpretation forward pass whose outputs serve double duty: they
//!    update the interpretation latent *and* hand the instruction stream a
//!    current clean estimate plus decoder features (through the adaptor).
//!    The instruction stream applies classifier-free guidance against its
//!    null-instruction context.
//! 3. **Tail** — the reconstruction is finished; the instruction stream
//!    completes its remaining `K` steps against the fixed final
//!    reconstruction, with adaptor features computed once and cached.
//!
//! The region mask is resolved at the warmup/joint boundary: either a fixed
//! mask supplied up front, or a callback invoked with the first clean
//! estimate of the run (so a proposer can look at a preliminary
//! reconstruction).  Every latent update appends one trace entry; the trace
//! fully describes the interleaving and is cheap to audit.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::MaskedValues;
use crate::denoisers::{Adaptor, CondItem, FeatureStack, InstructDenoiser, InterpretDenoiser};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, RegionMask};
use crate::nn::Tensor;
use crate::schedule::DiffusionSchedule;
use crate::seeding::rng_for;

// ---------------------------------------------------------------------------
// Model abstractions (the trace logic is tested with mock models)
// ---------------------------------------------------------------------------

pub trait InterpretModel {
    fn forward(&self, z: &Tensor, ts: &[usize], cond: &[CondItem]) -> (Tensor, FeatureStack);
}

pub trait InstructModel {
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        z_e: &Tensor,
        z0r: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        injected: Option<&FeatureStack>,
        mode: MaskedValues,
    ) -> Tensor;
}

pub trait AdaptorModel {
    fn forward(&self, feats: &FeatureStack) -> FeatureStack;
}

impl InterpretModel for InterpretDenoiser {
    fn forward(&self, z: &Tensor, ts: &[usize], cond: &[CondItem]) -> (Tensor, FeatureStack) {
        InterpretDenoiser::forward(self, z, ts, cond)
    }
}

impl InstructModel for InstructDenoiser {
    fn forward(
        &self,
        z_e: &Tensor,
        z0r: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        injected: Option<&FeatureStack>,
        mode: MaskedValues,
    ) -> Tensor {
        InstructDenoiser::forward(self, z_e, z0r, ts, cond, injected, mode)
    }
}

impl AdaptorModel for Adaptor {
    fn forward(&self, feats: &FeatureStack) -> FeatureStack {
        Adaptor::forward(self, feats)
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Single-stream reconstruction (no instruction stream at all).
    Solo,
    Warmup,
    Joint,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    Interpret,
    Instruct,
}

/// One latent update.  `t_in` is the sub-schedule level before the update,
/// `t_out = t_in - 1` after it; `raw_t` is the training-schedule timestep
/// the model embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub phase: Phase,
    pub stream: StreamId,
    pub t_in: usize,
    pub t_out: usize,
    pub raw_t: usize,
    pub noise_zeroed: bool,
    pub cfg_applied: bool,
}

// ---------------------------------------------------------------------------
// Specs and outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleSpec {
    /// Inference sub-schedule length.
    pub steps: usize,
    /// Instruction-stream offset (sub-steps it trails behind).
    pub k: usize,
    /// Classifier-free guidance scale for the instruction stream; `1.0`
    /// disables the extra unconditional pass.
    pub guidance: f64,
    pub mode: MaskedValues,
    pub seed: u64,
}

/// Where the instruction stream's region mask comes from.
pub enum RegionSource<'a> {
    /// Use this mask as is.
    Fixed(RegionMask),
    /// Invoke once at the warmup/joint boundary with the current clean
    /// estimate of the reconstruction.
    AtBoundary(Box<dyn FnMut(&LatentGrid) -> Result<RegionMask> + 'a>),
}

#[derive(Debug)]
pub struct SoloOutcome {
    pub latent: LatentGrid,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug)]
pub struct DualOutcome {
    /// Final instruction-stream latent (the edited result).
    pub edited: LatentGrid,
    /// Final interpretation-stream latent (the reconstruction).
    pub reconstruction: LatentGrid,
    /// The region mask the run actually used.
    pub mask: RegionMask,
    pub trace: Vec<TraceStep>,
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn latent_tensor(z: &LatentGrid) -> Tensor {
    let s = z.data.shape();
    let mut out = ArrayD::zeros(IxDyn(&[1, s[0], s[1], s[2]]));
    for c in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                out[[0, c, y, x]] = z.data[[c, y, x]];
            }
        }
    }
    Tensor::constant(out)
}

fn tensor_latent(t: &Tensor, tag: usize) -> LatentGrid {
    let v = t.value();
    let s = v.shape().to_vec();
    assert_eq!(s[0], 1, "single-sample tensor expected");
    let mut out = ArrayD::zeros(IxDyn(&[s[1], s[2], s[3]]));
    for c in 0..s[1] {
        for y in 0..s[2] {
            for x in 0..s[3] {
                out[[c, y, x]] = v[[0, c, y, x]];
            }
        }
    }
    LatentGrid::new(out, tag).expect("latent shape")
}

fn draw_latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, tag: usize) -> LatentGrid {
    let mut data = ArrayD::zeros(IxDyn(&[c, h, w]));
    for v in data.iter_mut() {
        let draw: f64 = StandardNormal.sample(rng);
        *v = draw;
    }
    LatentGrid::new(data, tag).expect("latent shape")
}

fn validate_spec(spec: &SampleSpec, train_len: usize) -> Result<()> {
    if spec.steps == 0 {
        return Err(Error::Validation("steps must be >= 1".into()));
    }
    if spec.steps > train_len {
        return Err(Error::Validation(format!(
            "steps ({}) cannot exceed the training schedule length ({train_len})",
            spec.steps
        )));
    }
    if spec.k >= spec.steps {
        return Err(Error::Validation("K must be < steps".into()));
    }
    if !spec.guidance.is_finite() || spec.guidance < 0.0 {
        return Err(Error::Validation(
            "guidance scale must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single-stream reconstruction
// ---------------------------------------------------------------------------

/// Plain ancestral sampling of the interpretation stream alone.
pub fn reconstruct<I: InterpretModel>(
    interp: &I,
    train: &DiffusionSchedule,
    spec: &SampleSpec,
    cond: &CondItem,
    shape: (usize, usize, usize),
) -> Result<SoloOutcome> {
    validate_spec(spec, train.len())?;
    let sub = train.strided(spec.steps)?;
    let (c, h, w) = shape;
    let mut init_rng = rng_for(spec.seed, "sample-init-r", 0);
    let mut z = draw_latent(&mut init_rng, c, h, w, spec.steps);
    let mut noise_rng = rng_for(spec.seed, "sample-noise-r", 0);
    let mut trace = Vec::with_capacity(spec.steps);
    for t in (1..=spec.steps).rev() {
        let raw_t = sub.raw_t(t)?;
        let (eps_t, _) = interp.forward(&latent_tensor(&z), &[raw_t], std::slice::from_ref(cond));
        let eps = tensor_latent(&eps_t, t);
        let noise = if t == 1 {
            LatentGrid::zeros(c, h, w)
        } else {
            draw_latent(&mut noise_rng, c, h, w, t)
        };
        z = sub.ancestral_step(&z, &eps, &noise, t)?;
        trace.push(TraceStep {
            phase: Phase::Solo,
            stream: StreamId::Interpret,
            t_in: t,
            t_out: t - 1,
            raw_t,
            noise_zeroed: t == 1,
            cfg_applied: false,
        });
    }
    Ok(SoloOutcome { latent: z, trace })
}

// ---------------------------------------------------------------------------
// Dual-stream instruction sampling
// ---------------------------------------------------------------------------

/// Runs the full asynchronous dual-stream sampler.
///
/// `cond_r` conditions the interpretation stream; the instruction stream's
/// context is assembled from `instr_rows`/`null_rows` plus the resolved
/// region mask.  `shape` is the latent `(channels, height, width)`.
#[allow(clippy::too_many_arguments)]
pub fn instruct_sample<I, E, A>(
    interp: &I,
    instruct: &E,
    adaptor: &A,
    train: &DiffusionSchedule,
    spec: &SampleSpec,
    cond_r: &CondItem,
    instr_rows: &Array2<f64>,
    null_rows: &Array2<f64>,
    mut region: RegionSource<'_>,
    shape: (usize, usize, usize),
) -> Result<DualOutcome>
where
    I: InterpretModel,
    E: InstructModel,
    A: AdaptorModel,
{
    validate_spec(spec, train.len())?;
    let sub = train.strided(spec.steps)?;
    let (c, h, w) = shape;
    let n = spec.steps;
    let k = spec.k;

    let mut init_r = rng_for(spec.seed, "sample-init-r", 0);
    let mut init_e = rng_for(spec.seed, "sample-init-e", 0);
    let mut z_r = draw_latent(&mut init_r, c, h, w, n);
    let mut z_e = draw_latent(&mut init_e, c, h, w, n);
    let mut noise_r = rng_for(spec.seed, "sample-noise-r", 0);
    let mut noise_e = rng_for(spec.seed, "sample-noise-e", 0);
    let mut trace = Vec::with_capacity(2 * n);

    let step_interpret = |z_r: &mut LatentGrid,
                              eps: &LatentGrid,
                              t: usize,
                              raw_t: usize,
                              phase: Phase,
                              noise_rng: &mut ChaCha8Rng,
                              trace: &mut Vec<TraceStep>|
     -> Result<()> {
        let noise = if t == 1 {
            LatentGrid::zeros(c, h, w)
        } else {
            draw_latent(noise_rng, c, h, w, t)
        };
        *z_r = sub.ancestral_step(z_r, eps, &noise, t)?;
        trace.push(TraceStep {
            phase,
            stream: StreamId::Interpret,
            t_in: t,
            t_out: t - 1,
            raw_t,
            noise_zeroed: t == 1,
            cfg_applied: false,
        });
        Ok(())
    };

    // Phase 1: warmup — the interpretation stream runs alone.
    for t in ((n - k + 1)..=n).rev() {
        let raw_t = sub.raw_t(t)?;
        let (eps_t, _) = interp.forward(&latent_tensor(&z_r), &[raw_t], std::slice::from_ref(cond_r));
        let eps = tensor_latent(&eps_t, t);
        step_interpret(
            &mut z_r,
            &eps,
            t,
            raw_t,
            Phase::Warmup,
            &mut noise_r,
            &mut trace,
        )?;
    }

    let mut cond_e: Option<CondItem> = None;
    let mut resolved_mask: Option<RegionMask> = None;
    let cfg_active = spec.guidance != 1.0;

    let step_instruct = |z_e: &mut LatentGrid,
                         z0r: &LatentGrid,
                         te: usize,
                         phase: Phase,
                         injected: &FeatureStack,
                         ce: &CondItem,
                         noise_rng: &mut ChaCha8Rng,
                         trace: &mut Vec<TraceStep>|
     -> Result<()> {
        let raw_e = sub.raw_t(te)?;
        let ze_t = latent_tensor(z_e);
        let z0r_t = latent_tensor(z0r);
        let eps_c = instruct.forward(
            &ze_t,
            &z0r_t,
            &[raw_e],
            std::slice::from_ref(ce),
            Some(injected),
            spec.mode,
        );
        let eps = if cfg_active {
            let un = ce.nulled();
            let eps_u = instruct.forward(
                &ze_t,
                &z0r_t,
                &[raw_e],
                std::slice::from_ref(&un),
                Some(injected),
                spec.mode,
            );
            eps_c.sub(&eps_u).mul_scalar(spec.guidance).add(&eps_u)
        } else {
            eps_c
        };
        let eps = tensor_latent(&eps, te);
        let noise = if te == 1 {
            LatentGrid::zeros(c, h, w)
        } else {
            draw_latent(noise_rng, c, h, w, te)
        };
        *z_e = sub.ancestral_step(z_e, &eps, &noise, te)?;
        trace.push(TraceStep {
            phase,
            stream: StreamId::Instruct,
            t_in: te,
            t_out: te - 1,
            raw_t: raw_e,
            noise_zeroed: te == 1,
            cfg_applied: cfg_active,
        });
        Ok(())
    };

    // Phase 2: joint — one interpretation forward serves both streams.
    for te in ((k + 1)..=n).rev() {
        let tr = te - k;
        let raw_r = sub.raw_t(tr)?;
        let (eps_t, feats) =
            interp.forward(&latent_tensor(&z_r), &[raw_r], std::slice::from_ref(cond_r));
        let eps_r = tensor_latent(&eps_t, tr);
        let z0r = sub.estimate_clean(&z_r, &eps_r, tr)?;
        if cond_e.is_none() {
            let mask = match &mut region {
                RegionSource::Fixed(m) => m.clone(),
                RegionSource::AtBoundary(f) => f(&z0r)?,
            };
            cond_e = Some(CondItem::masked(
                instr_rows.clone(),
                null_rows.clone(),
                mask.clone(),
            ));
            resolved_mask = Some(mask);
        }
        let injected = adaptor.forward(&feats);
        step_interpret(
            &mut z_r,
            &eps_r,
            tr,
            raw_r,
            Phase::Joint,
            &mut noise_r,
            &mut trace,
        )?;
        step_instruct(
            &mut z_e,
            &z0r,
            te,
            Phase::Joint,
            &injected,
            cond_e.as_ref().expect("mask resolved above"),
            &mut noise_e,
            &mut trace,
        )?;
    }

    // Phase 3: tail — the reconstruction is final; features are computed
    // once from it and reused for the remaining instruction steps.
    if k > 0 {
        let raw_final = sub.raw_t(1)?;
        let (_, feats) =
            interp.forward(&latent_tensor(&z_r), &[raw_final], std::slice::from_ref(cond_r));
        let injected = adaptor.forward(&feats).detached();
        let ce = cond_e.as_ref().expect("joint phase ran");
        for te in (1..=k).rev() {
            step_instruct(
                &mut z_e,
                &z_r,
                te,
                Phase::Tail,
                &injected,
                ce,
                &mut noise_e,
                &mut trace,
            )?;
        }
    }

    Ok(DualOutcome {
        edited: z_e,
        reconstruction: z_r,
        mask: resolved_mask.expect("joint phase resolves the mask"),
        trace,
    })
}

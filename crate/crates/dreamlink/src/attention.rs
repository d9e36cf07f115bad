//! Masked cross-attention: feature-map tokens attend over a conditioning
//! context, with a spatial mask choosing per token between the
//! instruction-conditioned result and the null-conditioned result.
//!
//! Two complete attention passes run — one with the instruction context,
//! one with the null context — and the mask blends them row-wise. Binary
//! mask entries select rows bitwise; fractional entries interpolate.
//! Two blend conventions are supported: blending the attended values of
//! both passes (the default), or blending the attention weights while
//! always reading instruction values.

use crate::config::MaskedValues;
use crate::container::TensorStore;
use crate::error::Result;
use crate::grid::RegionMask;
use crate::nn::{Linear, Tensor};
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

/// Conditioning for one attention pass: the full context and its
/// instruction-free counterpart (same visual rows, null instruction rows).
#[derive(Clone)]
pub struct AttnContext {
    /// `[rows, d_ctx]` instruction-bearing context.
    pub instr: Tensor,
    /// `[rows, d_ctx]` null context.
    pub null: Tensor,
}

impl AttnContext {
    /// A context whose instruction branch is already the null branch
    /// (used for classifier-free unconditional passes).
    pub fn nulled(&self) -> AttnContext {
        AttnContext {
            instr: self.null.clone(),
            null: self.null.clone(),
        }
    }
}

/// Cross-attention over context rows with spatial masking.
pub struct MaskedCrossAttention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    d_model: usize,
}

impl MaskedCrossAttention {
    /// `d_model` is the feature-map channel width, `d_ctx` the context row
    /// width. The output projection starts small but non-zero: a fresh
    /// block barely perturbs its input, yet the conditioning pathway
    /// carries gradient from the first step.
    pub fn new(d_model: usize, d_ctx: usize, rng: &mut ChaCha8Rng) -> Self {
        MaskedCrossAttention {
            to_q: Linear::new(d_model, d_model, rng),
            to_k: Linear::new(d_ctx, d_model, rng),
            to_v: Linear::new(d_ctx, d_model, rng),
            to_out: Linear::new_scaled(d_model, d_model, 0.1, rng),
            d_model,
        }
    }

    /// One attended value matrix `[tokens, d_model]` for a given context.
    fn attend(&self, q: &Tensor, ctx: &Tensor, values_from: &Tensor) -> Tensor {
        let k = self.to_k.forward(ctx);
        let v = self.to_v.forward(values_from);
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let logits = q.matmul(&k.transpose2d()).mul_scalar(scale);
        logits.softmax_rows().matmul(&v)
    }

    /// Apply masked cross-attention to a `[c, h, w]` feature map and add
    /// the result residually. The mask is resampled to `(h, w)` if needed;
    /// mask value 1 means "instruction applies here".
    pub fn forward(
        &self,
        x: &Tensor,
        ctx: &AttnContext,
        mask: &RegionMask,
        mode: MaskedValues,
    ) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "expected [c, h, w], got {shape:?}");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let tokens = x.tokens_from_chw();
        let q = self.to_q.forward(&tokens);
        let instr_branch = self.attend(&q, &ctx.instr, &ctx.instr);
        let null_branch = match mode {
            MaskedValues::NullValues => self.attend(&q, &ctx.null, &ctx.null),
            MaskedValues::InstrValues => self.attend(&q, &ctx.null, &ctx.instr),
        };
        let m = if mask.height() == h && mask.width() == w {
            mask.clone()
        } else {
            mask.resample(h, w)
        };
        let flat: Array1<f64> = Array1::from_iter(m.data.iter().copied());
        let blended = Tensor::blend_rows(&flat, &instr_branch, &null_branch);
        let out = self.to_out.forward(&blended);
        x.add(&out.chw_from_tokens(c, h, w))
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.to_q.params();
        p.extend(self.to_k.params());
        p.extend(self.to_v.params());
        p.extend(self.to_out.params());
        p
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.to_q.save(store, &format!("{prefix}.to_q"))?;
        self.to_k.save(store, &format!("{prefix}.to_k"))?;
        self.to_v.save(store, &format!("{prefix}.to_v"))?;
        self.to_out.save(store, &format!("{prefix}.to_out"))
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.to_q.load(store, &format!("{prefix}.to_q"))?;
        self.to_k.load(store, &format!("{prefix}.to_k"))?;
        self.to_v.load(store, &format!("{prefix}.to_v"))?;
        self.to_out.load(store, &format!("{prefix}.to_out"))
    }
}

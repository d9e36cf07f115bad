//! The two denoising networks and the feature adaptor connecting them.
//!
//! The interpretation stream denoises a latent conditioned on embeddings
//! decoded from brain measurements and, alongside its noise estimate,
//! exposes a stack of decoder features describing the content it sees.  The
//! instruction stream denoises the edited latent: it takes the current
//! clean-image estimate of the interpretation stream as extra input
//! channels, receives the interpretation features additively through a
//! zero-initialized adaptor, and applies its instruction conditioning
//! through masked cross-attention so edits stay inside the requested
//! region.
//!
//! Both streams share one U-Net core; injection is strictly additive, so a
//! freshly initialized adaptor leaves the instruction stream bit-for-bit
//! unchanged.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnContext, MaskedCrossAttention};
use crate::config::{MaskedValues, ModelConfig};
use crate::container::TensorStore;
use crate::error::Result;
use crate::grid::{EmbeddingPair, RegionMask};
use crate::nn::{timestep_features, Conv2d, GroupNorm, Linear, Tensor};

const NORM_GROUPS: usize = 8;

/// Conditioning for one batch item: attention context plus region mask.
#[derive(Clone)]
pub struct CondItem {
    pub ctx: AttnContext,
    pub mask: RegionMask,
}

impl CondItem {
    /// Conditioning with no spatial restriction and no null alternative:
    /// the whole map attends to `rows`.
    pub fn unmasked(rows: Array2<f64>) -> Self {
        let t = Tensor::constant(rows.into_dyn());
        CondItem {
            ctx: AttnContext {
                instr: t.clone(),
                null: t,
            },
            mask: full_mask(),
        }
    }

    /// Masked conditioning: `instr` rows where the mask is 1, `null` rows
    /// where it is 0.
    pub fn masked(instr: Array2<f64>, null: Array2<f64>, mask: RegionMask) -> Self {
        CondItem {
            ctx: AttnContext {
                instr: Tensor::constant(instr.into_dyn()),
                null: Tensor::constant(null.into_dyn()),
            },
            mask,
        }
    }

    /// The classifier-free unconditional variant: the null context plays
    /// both roles, the mask stays.
    pub fn nulled(&self) -> Self {
        CondItem {
            ctx: self.ctx.nulled(),
            mask: self.mask.clone(),
        }
    }
}

/// An all-ones 1x1 mask; attention resamples it to any resolution.
pub fn full_mask() -> RegionMask {
    RegionMask::new(ArrayD::from_elem(IxDyn(&[1, 1]), 1.0)).expect("constant mask")
}

/// Context rows for embedding-pair conditioning: the pooled vision vector
/// as the first row, then every text row.
pub fn pair_context_rows(pair: &EmbeddingPair) -> Array2<f64> {
    let d = pair.dim();
    let l = pair.f_text.shape()[0];
    let mut rows = Array2::zeros((1 + l, d));
    for j in 0..d {
        rows[[0, j]] = pair.f_vis[[j]];
    }
    for i in 0..l {
        for j in 0..d {
            rows[[1 + i, j]] = pair.f_text[[i, j]];
        }
    }
    rows
}

/// Decoder features captured from the interpretation stream, coarse level
/// first: `feats[0]` is `[n, w1, 8, 8]`, `feats[1]` is `[n, w0, 16, 16]`
/// (for the default 16x16 latent).
pub struct FeatureStack {
    pub feats: Vec<Tensor>,
}

impl FeatureStack {
    /// Detached copy: values survive, gradient history does not.  The
    /// sampling loop caches feature stacks across steps with this.
    pub fn detached(&self) -> FeatureStack {
        FeatureStack {
            feats: self
                .feats
                .iter()
                .map(|f| Tensor::constant(f.value()))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, time_chan: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(in_c, NORM_GROUPS),
            conv1: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            time_proj: Linear::new(time_chan, out_c, rng),
            norm2: GroupNorm::new(out_c, NORM_GROUPS),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            skip: (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, 1, 0, rng)),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let h = h.add_chan_map(&self.time_proj.forward(temb));
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        let s = match &self.skip {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        s.add(&h)
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.norm1.params();
        p.extend(self.conv1.params());
        p.extend(self.time_proj.params());
        p.extend(self.norm2.params());
        p.extend(self.conv2.params());
        if let Some(c) = &self.skip {
            p.extend(c.params());
        }
        p
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.norm1.save(store, &format!("{prefix}.norm1"))?;
        self.conv1.save(store, &format!("{prefix}.conv1"))?;
        self.time_proj.save(store, &format!("{prefix}.time"))?;
        self.norm2.save(store, &format!("{prefix}.norm2"))?;
        self.conv2.save(store, &format!("{prefix}.conv2"))?;
        if let Some(c) = &self.skip {
            c.save(store, &format!("{prefix}.skip"))?;
        }
        Ok(())
    }

    fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.norm1.load(store, &format!("{prefix}.norm1"))?;
        self.conv1.load(store, &format!("{prefix}.conv1"))?;
        self.time_proj.load(store, &format!("{prefix}.time"))?;
        self.norm2.load(store, &format!("{prefix}.norm2"))?;
        self.conv2.load(store, &format!("{prefix}.conv2"))?;
        if let Some(c) = &self.skip {
            c.load(store, &format!("{prefix}.skip"))?;
        }
        Ok(())
    }
}

/// Applies one attention block per batch item, each with its own context
/// and mask, and restacks the results.
fn attend_batch(
    attn: &MaskedCrossAttention,
    x: &Tensor,
    cond: &[CondItem],
    mode: MaskedValues,
) -> Tensor {
    let n = x.shape()[0];
    assert_eq!(n, cond.len(), "one conditioning item per batch element");
    let items: Vec<Tensor> = (0..n)
        .map(|i| attn.forward(&x.select_item(i), &cond[i].ctx, &cond[i].mask, mode))
        .collect();
    Tensor::stack_items(&items)
}

// ---------------------------------------------------------------------------
// U-Net core
// ---------------------------------------------------------------------------

/// Shared denoiser body: conv stem, two downsampling levels with residual
/// blocks and cross-attention, a middle block, and a skip-connected decoder.
/// The decoder residual-block outputs are returned for feature injection.
struct UNetCore {
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    enc0: ResBlock,
    attn_enc0: MaskedCrossAttention,
    down0: Conv2d,
    enc1: ResBlock,
    attn_enc1: MaskedCrossAttention,
    down1: Conv2d,
    mid: ResBlock,
    attn_mid: MaskedCrossAttention,
    up1: Conv2d,
    dec1: ResBlock,
    attn_dec1: MaskedCrossAttention,
    up0: Conv2d,
    dec0: ResBlock,
    attn_dec0: MaskedCrossAttention,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    time_dim: usize,
    in_channels: usize,
}

impl UNetCore {
    fn new(in_channels: usize, out_channels: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(cfg.widths.len(), 3, "the denoiser uses three widths");
        let (w0, w1, w2) = (cfg.widths[0], cfg.widths[1], cfg.widths[2]);
        let (td, tc, d) = (cfg.time_dim, cfg.time_chan, cfg.embed_dim);
        UNetCore {
            conv_in: Conv2d::new(in_channels, w0, 3, 1, 1, rng),
            time1: Linear::new(td, tc, rng),
            time2: Linear::new(tc, tc, rng),
            enc0: ResBlock::new(w0, w0, tc, rng),
            attn_enc0: MaskedCrossAttention::new(w0, d, rng),
            down0: Conv2d::new(w0, w1, 3, 2, 1, rng),
            enc1: ResBlock::new(w1, w1, tc, rng),
            attn_enc1: MaskedCrossAttention::new(w1, d, rng),
            down1: Conv2d::new(w1, w2, 3, 2, 1, rng),
            mid: ResBlock::new(w2, w2, tc, rng),
            attn_mid: MaskedCrossAttention::new(w2, d, rng),
            up1: Conv2d::new(w2, w1, 3, 1, 1, rng),
            dec1: ResBlock::new(2 * w1, w1, tc, rng),
            attn_dec1: MaskedCrossAttention::new(w1, d, rng),
            up0: Conv2d::new(w1, w0, 3, 1, 1, rng),
            dec0: ResBlock::new(2 * w0, w0, tc, rng),
            attn_dec0: MaskedCrossAttention::new(w0, d, rng),
            out_norm: GroupNorm::new(w0, NORM_GROUPS),
            out_conv: Conv2d::new(w0, out_channels, 3, 1, 1, rng),
            time_dim: td,
            in_channels,
        }
    }

    fn time_embedding(&self, ts: &[usize]) -> Tensor {
        let mut rows = Array2::zeros((ts.len(), self.time_dim));
        for (i, &t) in ts.iter().enumerate() {
            for (j, v) in timestep_features(t, self.time_dim).into_iter().enumerate() {
                rows[[i, j]] = v;
            }
        }
        let base = Tensor::constant(rows.into_dyn());
        self.time2.forward(&self.time1.forward(&base).silu())
    }

    /// Full pass.  `injected` features are added to the decoder residual
    /// block outputs (coarse level first) before their attention blocks.
    /// Returns the noise estimate and the (pre-injection) decoder features.
    fn forward(
        &self,
        z: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        injected: Option<&FeatureStack>,
        mode: MaskedValues,
    ) -> (Tensor, FeatureStack) {
        assert_eq!(
            z.shape()[1],
            self.in_channels,
            "latent channels disagree with the input conv"
        );
        let temb = self.time_embedding(ts);
        let x = self.conv_in.forward(z);
        let e0 = attend_batch(&self.attn_enc0, &self.enc0.forward(&x, &temb), cond, mode);
        let e1 = attend_batch(
            &self.attn_enc1,
            &self.enc1.forward(&self.down0.forward(&e0), &temb),
            cond,
            mode,
        );
        let m = attend_batch(
            &self.attn_mid,
            &self.mid.forward(&self.down1.forward(&e1), &temb),
            cond,
            mode,
        );
        let u1 = self.up1.forward(&m.upsample2x());
        let d1 = self.dec1.forward(&u1.concat_chan(&e1), &temb);
        let d1_in = match injected {
            Some(f) => d1.add(&f.feats[0]),
            None => d1.clone(),
        };
        let d1a = attend_batch(&self.attn_dec1, &d1_in, cond, mode);
        let u0 = self.up0.forward(&d1a.upsample2x());
        let d0 = self.dec0.forward(&u0.concat_chan(&e0), &temb);
        let d0_in = match injected {
            Some(f) => d0.add(&f.feats[1]),
            None => d0.clone(),
        };
        let d0a = attend_batch(&self.attn_dec0, &d0_in, cond, mode);
        let eps = self.out_conv.forward(&self.out_norm.forward(&d0a).silu());
        (eps, FeatureStack {
            feats: vec![d1, d0],
        })
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.conv_in.params();
        p.extend(self.time1.params());
        p.extend(self.time2.params());
        p.extend(self.enc0.params());
        p.extend(self.attn_enc0.params());
        p.extend(self.down0.params());
        p.extend(self.enc1.params());
        p.extend(self.attn_enc1.params());
        p.extend(self.down1.params());
        p.extend(self.mid.params());
        p.extend(self.attn_mid.params());
        p.extend(self.up1.params());
        p.extend(self.dec1.params());
        p.extend(self.attn_dec1.params());
        p.extend(self.up0.params());
        p.extend(self.dec0.params());
        p.extend(self.attn_dec0.params());
        p.extend(self.out_norm.params());
        p.extend(self.out_conv.params());
        p
    }

    fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.conv_in.save(store, &format!("{prefix}.conv_in"))?;
        self.time1.save(store, &format!("{prefix}.time1"))?;
        self.time2.save(store, &format!("{prefix}.time2"))?;
        self.enc0.save(store, &format!("{prefix}.enc0"))?;
        self.attn_enc0.save(store, &format!("{prefix}.attn_enc0"))?;
        self.down0.save(store, &format!("{prefix}.down0"))?;
        self.enc1.save(store, &format!("{prefix}.enc1"))?;
        self.attn_enc1.save(store, &format!("{prefix}.attn_enc1"))?;
        self.down1.save(store, &format!("{prefix}.down1"))?;
        self.mid.save(store, &format!("{prefix}.mid"))?;
        self.attn_mid.save(store, &format!("{prefix}.attn_mid"))?;
        self.up1.save(store, &format!("{prefix}.up1"))?;
        self.dec1.save(store, &format!("{prefix}.dec1"))?;
        self.attn_dec1.save(store, &format!("{prefix}.attn_dec1"))?;
        self.up0.save(store, &format!("{prefix}.up0"))?;
        self.dec0.save(store, &format!("{prefix}.dec0"))?;
        self.attn_dec0.save(store, &format!("{prefix}.attn_dec0"))?;
        self.out_norm.save(store, &format!("{prefix}.out_norm"))?;
        self.out_conv.save(store, &format!("{prefix}.out_conv"))?;
        Ok(())
    }

    fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.conv_in.load(store, &format!("{prefix}.conv_in"))?;
        self.time1.load(store, &format!("{prefix}.time1"))?;
        self.time2.load(store, &format!("{prefix}.time2"))?;
        self.enc0.load(store, &format!("{prefix}.enc0"))?;
        self.attn_enc0.load(store, &format!("{prefix}.attn_enc0"))?;
        self.down0.load(store, &format!("{prefix}.down0"))?;
        self.enc1.load(store, &format!("{prefix}.enc1"))?;
        self.attn_enc1.load(store, &format!("{prefix}.attn_enc1"))?;
        self.down1.load(store, &format!("{prefix}.down1"))?;
        self.mid.load(store, &format!("{prefix}.mid"))?;
        self.attn_mid.load(store, &format!("{prefix}.attn_mid"))?;
        self.up1.load(store, &format!("{prefix}.up1"))?;
        self.dec1.load(store, &format!("{prefix}.dec1"))?;
        self.attn_dec1.load(store, &format!("{prefix}.attn_dec1"))?;
        self.up0.load(store, &format!("{prefix}.up0"))?;
        self.dec0.load(store, &format!("{prefix}.dec0"))?;
        self.attn_dec0.load(store, &format!("{prefix}.attn_dec0"))?;
        self.out_norm.load(store, &format!("{prefix}.out_norm"))?;
        self.out_conv.load(store, &format!("{prefix}.out_conv"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Public denoisers
// ---------------------------------------------------------------------------

/// The interpretation-stream denoiser: denoises the reconstruction latent
/// conditioned on decoded embeddings and exposes its decoder features.
pub struct InterpretDenoiser {
    core: UNetCore,
}

impl InterpretDenoiser {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        InterpretDenoiser {
            core: UNetCore::new(cfg.latent_channels, cfg.latent_channels, cfg, rng),
        }
    }

    /// Noise estimate plus decoder feature stack for `z [n, c, h, w]` at
    /// per-item raw timesteps `ts`.
    pub fn forward(&self, z: &Tensor, ts: &[usize], cond: &[CondItem]) -> (Tensor, FeatureStack) {
        self.core
            .forward(z, ts, cond, None, MaskedValues::NullValues)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.core.params()
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.core.save(store, prefix)
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.core.load(store, prefix)
    }
}

/// The instruction-stream denoiser: denoises the edited latent given the
/// interpretation stream's clean estimate (as extra input channels), its
/// features (injected through the adaptor), and a masked instruction
/// context.
pub struct InstructDenoiser {
    core: UNetCore,
    latent_channels: usize,
}

impl InstructDenoiser {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        // Input contract: edited latent and clean-estimate channels side
        // by side.
        let in_ch = 2 * cfg.latent_channels;
        let core = UNetCore::new(in_ch, cfg.latent_channels, cfg, rng);
        assert_eq!(core.conv_in.weight.shape()[1], in_ch);
        InstructDenoiser {
            core,
            latent_channels: cfg.latent_channels,
        }
    }

    /// Noise estimate for the edited latent `z_e` given the clean estimate
    /// `z0r` from the interpretation stream.
    pub fn forward(
        &self,
        z_e: &Tensor,
        z0r: &Tensor,
        ts: &[usize],
        cond: &[CondItem],
        injected: Option<&FeatureStack>,
        mode: MaskedValues,
    ) -> Tensor {
        assert_eq!(z_e.shape()[1], self.latent_channels, "edited-latent channels");
        assert_eq!(z0r.shape()[1], self.latent_channels, "clean-estimate channels");
        let joint = z_e.concat_chan(z0r);
        self.core.forward(&joint, ts, cond, injected, mode).0
    }

    /// Parameters of the input stem alone; these stay trainable during
    /// adaptor tuning while the rest of the network is frozen.
    pub fn input_conv_params(&self) -> Vec<Tensor> {
        self.core.conv_in.params()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.core.params()
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        self.core.save(store, prefix)
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.core.load(store, prefix)
    }
}

/// Per-level adaptor: a small conv block ending in a zero-initialized 1x1
/// projection, so a fresh adaptor injects exactly zero.
#[derive(Debug)]
pub struct Adaptor {
    blocks: Vec<(Conv2d, Conv2d)>,
}

impl Adaptor {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w0, w1) = (cfg.widths[0], cfg.widths[1]);
        // One block per injected level, coarse first to match the stack.
        let blocks = vec![
            (
                Conv2d::new(w1, w1, 3, 1, 1, rng),
                Conv2d::new_zero(w1, w1, 1, 1, 0),
            ),
            (
                Conv2d::new(w0, w0, 3, 1, 1, rng),
                Conv2d::new_zero(w0, w0, 1, 1, 0),
            ),
        ];
        Adaptor { blocks }
    }

    pub fn forward(&self, feats: &FeatureStack) -> FeatureStack {
        assert_eq!(feats.feats.len(), self.blocks.len(), "one block per level");
        let out = self
            .blocks
            .iter()
            .zip(&feats.feats)
            .map(|((c3, c1), f)| c1.forward(&c3.forward(f).silu()))
            .collect();
        FeatureStack { feats: out }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.blocks
            .iter()
            .flat_map(|(a, b)| {
                let mut p = a.params();
                p.extend(b.params());
                p
            })
            .collect()
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.save(store, &format!("{prefix}.b{i}.conv"))?;
            b.save(store, &format!("{prefix}.b{i}.proj"))?;
        }
        Ok(())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.load(store, &format!("{prefix}.b{i}.conv"))?;
            b.load(store, &format!("{prefix}.b{i}.proj"))?;
        }
        Ok(())
    }
}

//! Frozen perception stack: an image codec mapping pictures to a compact
//! latent grid and back, and a contrastive two-tower embedding model
//! aligning images with captions in a shared unit-norm space.
//!
//! Both are trained once on the corpus, then frozen; the diffusion model
//! operates entirely in the codec's latent space and conditions on tower
//! embeddings.

use crate::config::{ModelConfig, TrainConfig};
use crate::container::TensorStore;
use crate::datagen::corpus::Corpus;
use crate::datagen::grammar::{encode_tokens, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::nn::{set_trainable, Adam, Conv2d, Embedding, Linear, Tensor};
use crate::seeding::rng_for;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Pack images into a `[n, 3, h, w]` input tensor scaled to [-1, 1].
pub fn image_batch_tensor(images: &[&ImageGrid]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = ArrayD::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.height(), h);
        assert_eq!(img.width(), w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[[i, c, y, x]] = img.data[[c, y, x]] * 2.0 - 1.0;
                }
            }
        }
    }
    Tensor::constant(data)
}

/// Pack latent grids into a `[n, c, h, w]` tensor.
pub fn latent_batch_tensor(latents: &[&LatentGrid]) -> Tensor {
    assert!(!latents.is_empty());
    let (c, h, w) = (
        latents[0].channels(),
        latents[0].height(),
        latents[0].width(),
    );
    let mut data = ArrayD::zeros(IxDyn(&[latents.len(), c, h, w]));
    for (i, z) in latents.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[[i, ci, y, x]] = z.data[[ci, y, x]];
                }
            }
        }
    }
    Tensor::constant(data)
}

/// Convolutional autoencoder with a 4x spatial reduction.
pub struct ImageCodec {
    pub e1: Conv2d,
    pub e2: Conv2d,
    pub e3: Conv2d,
    pub d1: Conv2d,
    pub d2: Conv2d,
    pub d3: Conv2d,
    pub d4: Conv2d,
    pub latent_channels: usize,
}

impl ImageCodec {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let lc = cfg.latent_channels;
        ImageCodec {
            e1: Conv2d::new(3, 16, 3, 2, 1, rng),
            e2: Conv2d::new(16, 32, 3, 2, 1, rng),
            e3: Conv2d::new(32, lc, 3, 1, 1, rng),
            d1: Conv2d::new(lc, 32, 3, 1, 1, rng),
            d2: Conv2d::new(32, 16, 3, 1, 1, rng),
            d3: Conv2d::new(16, 16, 3, 1, 1, rng),
            d4: Conv2d::new(16, 3, 3, 1, 1, rng),
            latent_channels: lc,
        }
    }

    /// `[n, 3, h, w]` (in [-1,1]) -> `[n, lc, h/4, w/4]`.
    pub fn encode_t(&self, x: &Tensor) -> Tensor {
        let h = self.e1.forward(x).silu();
        let h = self.e2.forward(&h).silu();
        self.e3.forward(&h)
    }

    /// `[n, lc, h, w]` -> `[n, 3, 4h, 4w]` (in [-1,1], unclamped).
    pub fn decode_t(&self, z: &Tensor) -> Tensor {
        let h = self.d1.forward(z).silu();
        let h = self.d2.forward(&h.upsample2x()).silu();
        let h = self.d3.forward(&h.upsample2x()).silu();
        self.d4.forward(&h)
    }

    /// Detached single-image encode.
    pub fn encode(&self, image: &ImageGrid) -> LatentGrid {
        let x = image_batch_tensor(&[image]);
        let z = self.encode_t(&x);
        let v = z.value();
        let s = v.shape().to_vec();
        let mut out = ArrayD::zeros(IxDyn(&[s[1], s[2], s[3]]));
        for c in 0..s[1] {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    out[[c, y, x]] = v[[0, c, y, x]];
                }
            }
        }
        LatentGrid::new(out, 0).expect("codec latent shape")
    }

    /// Detached single-latent decode, clamped to [0, 1] image range.
    pub fn decode(&self, latent: &LatentGrid) -> ImageGrid {
        let z = latent_batch_tensor(&[latent]);
        let y = self.decode_t(&z);
        let v = y.value();
        let s = v.shape().to_vec();
        let mut img = ImageGrid::zeros(s[2], s[3]);
        for c in 0..3 {
            for yy in 0..s[2] {
                for xx in 0..s[3] {
                    img.data[[c, yy, xx]] = ((v[[0, c, yy, xx]] + 1.0) / 2.0).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Rescale so latents have unit global standard deviation: the encoder
    /// head and decoder input absorb the factor, keeping decode(encode(x))
    /// unchanged.
    pub fn fold_latent_scale(&self, sigma: f64) {
        assert!(sigma.is_finite() && sigma > 0.0, "bad latent sigma {sigma}");
        let scale_tensor = |t: &Tensor, s: f64| {
            let v = t.value().mapv(|x| x * s);
            t.set_value(v);
        };
        for p in self.e3.params() {
            scale_tensor(&p, 1.0 / sigma);
        }
        // Only the decoder input weight (not bias) compensates: the bias
        // acts after the matmul and is unaffected by input scaling.
        scale_tensor(&self.d1.params()[0], sigma);
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for layer in [&self.e1, &self.e2, &self.e3, &self.d1, &self.d2, &self.d3, &self.d4] {
            p.extend(layer.params());
        }
        p
    }

    pub fn save(&self, store: &mut TensorStore) -> Result<()> {
        for (name, layer) in self.layers() {
            layer.save(store, name)?;
        }
        Ok(())
    }

    pub fn load(&self, store: &TensorStore) -> Result<()> {
        for (name, layer) in self.layers() {
            layer.load(store, name)?;
        }
        Ok(())
    }

    fn layers(&self) -> Vec<(&'static str, &Conv2d)> {
        vec![
            ("codec.e1", &self.e1),
            ("codec.e2", &self.e2),
            ("codec.e3", &self.e3),
            ("codec.d1", &self.d1),
            ("codec.d2", &self.d2),
            ("codec.d3", &self.d3),
            ("codec.d4", &self.d4),
        ]
    }
}

/// Image half of the contrastive embedding model.
pub struct VisionTower {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub proj: Linear,
}

impl VisionTower {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        VisionTower {
            c1: Conv2d::new(3, 16, 3, 2, 1, rng),
            c2: Conv2d::new(16, 32, 3, 2, 1, rng),
            c3: Conv2d::new(32, 64, 3, 2, 1, rng),
            proj: Linear::new(64, cfg.embed_dim, rng),
        }
    }

    /// `[n, 3, h, w]` -> `[n, d]`, unit rows.
    pub fn forward_t(&self, x: &Tensor) -> Tensor {
        let h = self.c1.forward(x).silu();
        let h = self.c2.forward(&h).silu();
        let h = self.c3.forward(&h).silu();
        self.proj.forward(&h.global_avg_pool()).l2norm_rows()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p.extend(self.c3.params());
        p.extend(self.proj.params());
        p
    }

    pub fn save(&self, store: &mut TensorStore) -> Result<()> {
        self.c1.save(store, "vision.c1")?;
        self.c2.save(store, "vision.c2")?;
        self.c3.save(store, "vision.c3")?;
        self.proj.save(store, "vision.proj")
    }

    pub fn load(&self, store: &TensorStore) -> Result<()> {
        self.c1.load(store, "vision.c1")?;
        self.c2.load(store, "vision.c2")?;
        self.c3.load(store, "vision.c3")?;
        self.proj.load(store, "vision.proj")
    }
}

/// Text half: token + positional embeddings, one self-attention block,
/// masked mean pooling, projection to the shared space.
///
/// The empty string tokenizes to nothing, pools to zeros, and lands on the
/// projection bias — giving a learnable null embedding for free.
pub struct TextTower {
    pub tok: Embedding,
    pub pos: Tensor,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub proj: Linear,
    pub d: usize,
}

impl TextTower {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let vocab = crate::datagen::grammar::vocab_size();
        let mut pos_init = ArrayD::zeros(IxDyn(&[MAX_TOKENS, d]));
        for v in pos_init.iter_mut() {
            let draw: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            *v = 0.02 * draw;
        }
        let proj = Linear::new(d, d, rng);
        // A nonzero projection bias makes the empty string (which pools to
        // zeros) land on a well-defined unit direction from the start.
        {
            let bias = &proj.params()[1];
            let mut b = bias.value();
            for v in b.iter_mut() {
                let draw: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                *v = 0.02 * draw;
            }
            bias.set_value(b);
        }
        TextTower {
            tok: Embedding::new(vocab, d, rng),
            pos: Tensor::param(pos_init),
            to_q: Linear::new(d, d, rng),
            to_k: Linear::new(d, d, rng),
            to_v: Linear::new(d, d, rng),
            to_out: Linear::new_zero(d, d),
            proj,
            d,
        }
    }

    /// Token features `[n, L, d]` after embedding + attention, with padded
    /// positions zeroed.
    fn token_features(&self, idx: &Array2<usize>, lens: &[usize]) -> Tensor {
        let (n, l) = idx.dim();
        let emb = self.tok.forward(idx).add_tok_bias(&self.pos);
        // Zero out padded positions so they contribute nothing downstream.
        let mut maskdata = ArrayD::zeros(IxDyn(&[n, l, self.d]));
        for (i, &len) in lens.iter().enumerate() {
            for li in 0..len.min(l) {
                for di in 0..self.d {
                    maskdata[[i, li, di]] = 1.0;
                }
            }
        }
        let pad_mask = Tensor::constant(maskdata);
        let emb = emb.mul(&pad_mask);
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let rows = emb.select_item(i);
            let q = self.to_q.forward(&rows);
            let k = self.to_k.forward(&rows);
            let v = self.to_v.forward(&rows);
            let logits = q
                .matmul(&k.transpose2d())
                .mul_scalar(1.0 / (self.d as f64).sqrt());
            let att = logits.softmax_rows().matmul(&v);
            items.push(rows.add(&self.to_out.forward(&att)));
        }
        Tensor::stack_items(&items).mul(&pad_mask)
    }

    /// `[n, L]` token ids -> `[n, d]` unit-norm embeddings.
    pub fn forward_t(&self, idx: &Array2<usize>, lens: &[usize]) -> Tensor {
        let feats = self.token_features(idx, lens);
        self.proj.forward(&feats.masked_mean_rows(lens)).l2norm_rows()
    }

    /// Detached per-token context rows `[L, d]` for one string; rows past
    /// the text's length are zero, and the empty string is all zeros.
    pub fn context_rows(&self, text: &str) -> Array2<f64> {
        let (ids, len) = encode_tokens(text);
        if len == 0 {
            return Array2::zeros((MAX_TOKENS, self.d));
        }
        let idx = Array2::from_shape_vec((1, MAX_TOKENS), ids).expect("ids shape");
        let feats = self.token_features(&idx, &[len]);
        let v = feats.value();
        let mut out = Array2::zeros((MAX_TOKENS, self.d));
        for li in 0..MAX_TOKENS {
            for di in 0..self.d {
                out[[li, di]] = v[[0, li, di]];
            }
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.tok.params();
        p.push(self.pos.clone());
        p.extend(self.to_q.params());
        p.extend(self.to_k.params());
        p.extend(self.to_v.params());
        p.extend(self.to_out.params());
        p.extend(self.proj.params());
        p
    }

    pub fn save(&self, store: &mut TensorStore) -> Result<()> {
        self.tok.save(store, "text.tok")?;
        store.save("text.pos", &self.pos.value())?;
        self.to_q.save(store, "text.to_q")?;
        self.to_k.save(store, "text.to_k")?;
        self.to_v.save(store, "text.to_v")?;
        self.to_out.save(store, "text.to_out")?;
        self.proj.save(store, "text.proj")
    }

    pub fn load(&self, store: &TensorStore) -> Result<()> {
        self.tok.load(store, "text.tok")?;
        let pos = store.load("text.pos")?;
        if pos.shape() != self.pos.shape() {
            return Err(Error::ShapeMismatch(format!(
                "text.pos: stored {:?}, expected {:?}",
                pos.shape(),
                self.pos.shape()
            )));
        }
        self.pos.set_value(pos);
        self.to_q.load(store, "text.to_q")?;
        self.to_k.load(store, "text.to_k")?;
        self.to_v.load(store, "text.to_v")?;
        self.to_out.load(store, "text.to_out")?;
        self.proj.load(store, "text.proj")
    }
}

/// The trained perception stack as one unit.
pub struct Encoders {
    pub codec: ImageCodec,
    pub vision: VisionTower,
    pub text: TextTower,
}

impl Encoders {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Encoders {
            codec: ImageCodec::new(cfg, &mut rng_for(seed, "codec-init", 0)),
            vision: VisionTower::new(cfg, &mut rng_for(seed, "vision-init", 0)),
            text: TextTower::new(cfg, &mut rng_for(seed, "text-init", 0)),
        }
    }

    /// Detached unit-norm image embedding.
    pub fn embed_image(&self, image: &ImageGrid) -> Array1<f64> {
        let x = image_batch_tensor(&[image]);
        let e = self.vision.forward_t(&x);
        let v = e.value();
        Array1::from_iter((0..v.shape()[1]).map(|i| v[[0, i]]))
    }

    /// Detached unit-norm text embedding (the empty string gives the
    /// learned null embedding).
    pub fn embed_text(&self, text: &str) -> Array1<f64> {
        let (ids, len) = encode_tokens(text);
        let idx = Array2::from_shape_vec((1, MAX_TOKENS), ids).expect("ids shape");
        let e = self.text.forward_t(&idx, &[len]);
        let v = e.value();
        Array1::from_iter((0..v.shape()[1]).map(|i| v[[0, i]]))
    }

    pub fn null_text_embedding(&self) -> Array1<f64> {
        self.embed_text("")
    }

    pub fn save(&self, store: &mut TensorStore) -> Result<()> {
        self.codec.save(store)?;
        self.vision.save(store)?;
        self.text.save(store)
    }

    pub fn load(&self, store: &TensorStore) -> Result<()> {
        self.codec.load(store)?;
        self.vision.load(store)?;
        self.text.load(store)
    }

    pub fn freeze(&self) {
        set_trainable(&self.codec.params(), false);
        set_trainable(&self.vision.params(), false);
        set_trainable(&self.text.params(), false);
    }
}

/// Summary statistics from codec training.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecStats {
    pub final_loss: f64,
    pub latent_sigma: f64,
    pub psnr_db: f64,
}

/// Mean squared error between a decode and its target, per element.
fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).square().mean_all()
}

/// Train the codec on corpus images (both source and edited), then fold
/// the global latent scale so latents are unit-std, and freeze.
pub fn train_codec(
    corpus: &Corpus,
    images: &[ImageGrid],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<(ImageCodec, CodecStats)> {
    let train: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == crate::datagen::corpus::Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    let mut rng = rng_for(seed, "codec-train", 0);
    let codec = ImageCodec::new(model_cfg, &mut rng);
    let params = codec.params();
    let mut opt = Adam::new(params.clone(), cfg.codec_lr);
    let mut final_loss = f64::NAN;
    for _step in 0..cfg.codec_steps {
        let mut batch: Vec<&ImageGrid> = Vec::with_capacity(cfg.codec_batch);
        for _ in 0..cfg.codec_batch {
            let i = *train.choose(&mut rng).expect("non-empty");
            batch.push(&images[i]);
        }
        let x = image_batch_tensor(&batch);
        let z = codec.encode_t(&x);
        let y = codec.decode_t(&z);
        let loss = mse(&y, &x);
        final_loss = loss.value()[[0]];
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    // Global latent std over a sample of training images.
    let mut sq_sum = 0.0;
    let mut mean_sum = 0.0;
    let mut count = 0.0;
    for &i in train.iter().take(64) {
        let z = codec.encode(&images[i]);
        for &v in z.data.iter() {
            sq_sum += v * v;
            mean_sum += v;
            count += 1.0;
        }
    }
    let mean = mean_sum / count;
    let sigma = (sq_sum / count - mean * mean).max(1e-12).sqrt();
    codec.fold_latent_scale(sigma);
    // PSNR over a held-out sample (pixel space, [0,1] range).
    let val: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == crate::datagen::corpus::Split::Val)
        .map(|(i, _)| i)
        .collect();
    let eval_set = if val.is_empty() { &train } else { &val };
    let mut mse_px = 0.0;
    let mut n_px = 0.0;
    for &i in eval_set.iter().take(16) {
        let rec = codec.decode(&codec.encode(&images[i]));
        for (a, b) in rec.data.iter().zip(images[i].data.iter()) {
            mse_px += (a - b) * (a - b);
            n_px += 1.0;
        }
    }
    let psnr_db = -10.0 * (mse_px / n_px).max(1e-12).log10();
    set_trainable(&codec.params(), false);
    Ok((
        codec,
        CodecStats {
            final_loss,
            latent_sigma: sigma,
            psnr_db,
        },
    ))
}

/// Summary statistics from tower training.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TowerStats {
    pub final_loss: f64,
    /// Fraction of a probe batch where the matching caption is ranked first.
    pub retrieval_at_1: f64,
}

/// Contrastive temperature for the tower loss.
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.07;

/// Train both towers with a symmetric contrastive objective on
/// (image, caption) pairs, then freeze.
pub fn train_towers(
    corpus: &Corpus,
    images: &[ImageGrid],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<(VisionTower, TextTower, TowerStats)> {
    let train: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == crate::datagen::corpus::Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.len() < 2 {
        return Err(Error::Validation(
            "contrastive training needs at least two records".into(),
        ));
    }
    let mut rng = rng_for(seed, "tower-train", 0);
    let vision = VisionTower::new(model_cfg, &mut rng);
    let text = TextTower::new(model_cfg, &mut rng);
    let mut params = vision.params();
    params.extend(text.params());
    let mut opt = Adam::new(params, cfg.tower_lr);
    let mut final_loss = f64::NAN;
    for _step in 0..cfg.tower_steps {
        let mut picks: Vec<usize> = Vec::with_capacity(cfg.tower_batch);
        // Distinct records per batch: duplicate captions would make the
        // contrastive targets ambiguous.
        let mut pool = train.clone();
        pool.shuffle(&mut rng);
        picks.extend(pool.into_iter().take(cfg.tower_batch));
        let imgs: Vec<&ImageGrid> = picks.iter().map(|&i| &images[i]).collect();
        let mut ids = Array2::zeros((picks.len(), MAX_TOKENS));
        let mut lens = Vec::with_capacity(picks.len());
        for (row, &i) in picks.iter().enumerate() {
            let (tok, len) = encode_tokens(&corpus.records[i].caption);
            for (col, t) in tok.into_iter().enumerate() {
                ids[[row, col]] = t;
            }
            lens.push(len);
        }
        let fi = vision.forward_t(&image_batch_tensor(&imgs));
        let ft = text.forward_t(&ids, &lens);
        let logits = fi
            .matmul(&ft.transpose2d())
            .mul_scalar(1.0 / CONTRASTIVE_TEMPERATURE);
        let loss_a = logits.cross_entropy_diag();
        let loss_b = logits.transpose2d().cross_entropy_diag();
        let loss = loss_a.add(&loss_b).mul_scalar(0.5);
        final_loss = loss.value()[[0]];
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    // Retrieval probe on up to 32 validation (or train) records.
    let val: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == crate::datagen::corpus::Split::Val)
        .map(|(i, _)| i)
        .collect();
    let probe: Vec<usize> = if val.len() >= 8 { val } else { train }
        .into_iter()
        .take(32)
        .collect();
    let imgs: Vec<&ImageGrid> = probe.iter().map(|&i| &images[i]).collect();
    let mut ids = Array2::zeros((probe.len(), MAX_TOKENS));
    let mut lens = Vec::new();
    for (row, &i) in probe.iter().enumerate() {
        let (tok, len) = encode_tokens(&corpus.records[i].caption);
        for (col, t) in tok.into_iter().enumerate() {
            ids[[row, col]] = t;
        }
        lens.push(len);
    }
    let fi = vision.forward_t(&image_batch_tensor(&imgs)).value();
    let ft = text.forward_t(&ids, &lens).value();
    let n = probe.len();
    let d = model_cfg.embed_dim;
    let mut hits = 0;
    for i in 0..n {
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..d {
                dot += fi[[i, k]] * ft[[j, k]];
            }
            if dot > best.0 {
                best = (dot, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    let retrieval_at_1 = hits as f64 / n as f64;
    set_trainable(&vision.params(), false);
    set_trainable(&text.params(), false);
    Ok((
        vision,
        text,
        TowerStats {
            final_loss,
            retrieval_at_1,
        },
    ))
}

/// Load all corpus source images into memory, indexed like `corpus.records`.
pub fn load_corpus_images(corpus: &Corpus) -> Result<Vec<ImageGrid>> {
    corpus
        .records
        .iter()
        .map(|r| corpus.load_image(r))
        .collect()
}

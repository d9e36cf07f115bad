//! Image- and embedding-space evaluation metrics and the report they roll
//! into.
//!
//! Pixel-level quality is measured by Pearson correlation ([`pixcorr`]) and
//! structural similarity ([`ssim`]); embedding-level quality by the vision
//! tower's cosine ([`emb_sim`]) and by the directional agreement between an
//! image-embedding shift and a caption-embedding shift ([`direction_sim`]),
//! which is exactly the complement of the training-time direction penalty.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::trainer::direction_similarity;

/// Side length of the uniform box window used by [`ssim`].
pub const SSIM_WINDOW: usize = 8;
/// Luminance stabilizer `(0.01)^2` for a `[0, 1]` data range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// Contrast stabilizer `(0.03)^2` for a `[0, 1]` data range.
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes {:?} and {:?} differ",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Ok(())
}

/// Pearson correlation of the flattened pixel values of two images.
///
/// Computed from single-pass accumulated sums; a constant input has no
/// correlation and is rejected.
pub fn pixcorr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::Degenerate(
            "pixel correlation of a zero-variance image".to_string(),
        ));
    }
    Ok((sxy - sx * sy / n) / (vx.sqrt() * vy.sqrt()))
}

/// Mean local structural similarity over all fully contained
/// [`SSIM_WINDOW`]-sized box windows of every channel.
///
/// Window statistics are population moments over the 64 pixels of each box;
/// the per-window score is the standard two-factor form with stabilizers
/// [`SSIM_C1`] and [`SSIM_C2`].
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} similarity window"
        )));
    }
    let win_n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..3 {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let x = a.data[[c, y0 + dy, x0 + dx]];
                        let y = b.data[[c, y0 + dy, x0 + dx]];
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                }
                let mx = sx / win_n;
                let my = sy / win_n;
                let vx = sxx / win_n - mx * mx;
                let vy = syy / win_n - my * my;
                let cov = sxy / win_n - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Cosine similarity of the vision-tower embeddings of two images.
pub fn emb_sim(encoders: &Encoders, a: &ImageGrid, b: &ImageGrid) -> f64 {
    let ea = encoders.embed_image(a);
    let eb = encoders.embed_image(b);
    cosine(&ea, &eb)
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Directional agreement between an image edit and a caption edit: the
/// cosine between `embed(y_edit) - embed(y_src)` and
/// `embed_text(t_edit) - embed_text(t_src)`.
///
/// Shares its code path with the training-time direction penalty, so
/// `direction_sim + style_loss = 1` on the same arguments.
pub fn direction_sim(
    encoders: &Encoders,
    y_src: &ImageGrid,
    y_edit: &ImageGrid,
    t_src: &str,
    t_edit: &str,
) -> Result<f64> {
    let dv = &encoders.embed_image(y_edit) - &encoders.embed_image(y_src);
    let dt = &encoders.embed_text(t_edit) - &encoders.embed_text(t_src);
    if dv.dot(&dv) == 0.0 || dt.dot(&dt) == 0.0 {
        return Err(Error::Degenerate(
            "zero-norm edit direction".to_string(),
        ));
    }
    Ok(direction_similarity(&dv, &dt))
}

/// Mean of a non-empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of an empty slice");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median of a non-empty slice (midpoint average for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregated evaluation over a set of sample pairs: each metric field is
/// the mean over the `n` pairs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub pixcorr: f64,
    pub ssim: f64,
    pub emb_sim_vis: f64,
    pub direction_sim: f64,
    pub n: usize,
    pub config_hash: String,
    pub corpus_hash: String,
}

/// Per-pair metric values, rolled up into an [`EvalReport`].
#[derive(Debug, Clone, Default)]
pub struct PairScores {
    pub pixcorr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub emb_sim_vis: Vec<f64>,
    pub direction_sim: Vec<f64>,
}

impl PairScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pixcorr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixcorr.is_empty()
    }

    /// Mean the per-pair values into a report.  All four metric vectors
    /// must hold one value per pair.
    pub fn report(&self, config_hash: &str, corpus_hash: &str) -> EvalReport {
        let n = self.len();
        assert!(
            n > 0
                && self.ssim.len() == n
                && self.emb_sim_vis.len() == n
                && self.direction_sim.len() == n,
            "per-pair metric vectors disagree"
        );
        EvalReport {
            pixcorr: mean(&self.pixcorr),
            ssim: mean(&self.ssim),
            emb_sim_vis: mean(&self.emb_sim_vis),
            direction_sim: mean(&self.direction_sim),
            n,
            config_hash: config_hash.to_string(),
            corpus_hash: corpus_hash.to_string(),
        }
    }
}

//! Core value types passed between pipeline stages: images, latents,
//! embeddings, simulated brain-signal vectors, and spatial region masks.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// An RGB image held as `[3, h, w]` f64 with values in `[0, 1]`.
///
/// Values are clamped only at IO boundaries (PNG encode/decode); internal
/// arithmetic may transiently leave the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub data: ArrayD<f64>,
}

impl ImageGrid {
    pub fn new(data: ArrayD<f64>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image must be [3, h, w], got {shape:?}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: ArrayD::zeros(IxDyn(&[3, h, w])),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Clamp all channel values into `[0, 1]`, returning a new image.
    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }
}

/// A latent-space tensor `[c, h, w]` tagged with the raw timestep it sits at.
///
/// `timestep_tag = 0` means a clean (fully denoised) latent; `t >= 1` means
/// the latent carries noise at training-schedule step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: ArrayD<f64>,
    pub timestep_tag: usize,
}

impl LatentGrid {
    pub fn new(data: ArrayD<f64>, timestep_tag: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "latent must be [c, h, w], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, timestep_tag })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            data: ArrayD::zeros(IxDyn(&[c, h, w])),
            timestep_tag: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Paired text/vision embeddings for one stimulus.
///
/// `f_text` is a per-token matrix `[l, d]` (padded rows are zero), `f_vis`
/// a single pooled vector `[d]`. Both live on the unit sphere per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub f_text: ArrayD<f64>,
    pub f_vis: ArrayD<f64>,
}

impl EmbeddingPair {
    pub fn new(f_text: ArrayD<f64>, f_vis: ArrayD<f64>) -> Result<Self> {
        if f_text.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "f_text must be [l, d], got {:?}",
                f_text.shape()
            )));
        }
        if f_vis.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "f_vis must be [d], got {:?}",
                f_vis.shape()
            )));
        }
        if f_text.shape()[1] != f_vis.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "embedding dims disagree: text d={}, vis d={}",
                f_text.shape()[1],
                f_vis.shape()[0]
            )));
        }
        Ok(Self { f_text, f_vis })
    }

    pub fn dim(&self) -> usize {
        self.f_vis.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.f_text.shape()[0]
    }
}

/// A simulated brain-signal measurement: a flat feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmriVector {
    pub data: Vec<f64>,
    /// Which simulated subject produced this response (a single subject, id 1,
    /// is used throughout; the field exists so multi-subject corpora stay
    /// representable).
    pub subject_id: u32,
    /// Trial number within the repeated presentations of one image; trials
    /// are numbered from 1, and 0 marks a trial-averaged vector.
    pub trial_id: u32,
}

impl FmriVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self {
            data,
            subject_id: 1,
            trial_id: 0,
        }
    }

    pub fn with_trial(data: Vec<f64>, subject_id: u32, trial_id: u32) -> Self {
        Self {
            data,
            subject_id,
            trial_id,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A soft spatial mask `[h, w]` with values in `[0, 1]`.
///
/// `1` marks pixels the instruction should change, `0` pixels to preserve.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub data: ArrayD<f64>,
}

impl RegionMask {
    pub fn new(data: ArrayD<f64>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "mask must be [h, w], got {:?}",
                data.shape()
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite()) {
            return Err(Error::Validation(
                "mask values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// All-ones mask: every pixel is editable.
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            data: ArrayD::from_elem(IxDyn(&[h, w]), 1.0),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// True when every value is exactly 0 or exactly 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Resample to `(h, w)` by nearest-neighbor lookup.
    ///
    /// Each target cell reads the source cell its center falls into, so
    /// binary masks stay binary and no new values are invented.
    pub fn resample(&self, h: usize, w: usize) -> Self {
        let (sh, sw) = (self.height(), self.width());
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            // Map target center to source coordinates, then floor.
            let sy = (((y as f64 + 0.5) * sh as f64 / h as f64).floor() as usize).min(sh - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * sw as f64 / w as f64).floor() as usize).min(sw - 1);
                out[[y, x]] = self.data[[sy, sx]];
            }
        }
        Self { data: out }
    }

    /// Fraction of mask mass: mean value over all cells.
    pub fn coverage(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        self.data.sum() / n as f64
    }

    /// Intersection-over-union against another mask after thresholding both
    /// at 0.5. Returns 1.0 when both masks are empty.
    pub fn iou(&self, other: &RegionMask) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mask shapes disagree: {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let a = a >= 0.5;
            let b = b >= 0.5;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union == 0 {
            Ok(1.0)
        } else {
            Ok(inter as f64 / union as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_wrong_rank() {
        let bad = ArrayD::zeros(IxDyn(&[4, 8, 8]));
        assert!(ImageGrid::new(bad).is_err(), "non-RGB channel count must fail");
    }

    #[test]
    fn clamp_bounds_values() {
        let mut img = ImageGrid::zeros(2, 2);
        img.data[[0, 0, 0]] = 1.5;
        img.data[[1, 0, 0]] = -0.25;
        let c = img.clamped();
        assert_eq!(c.data[[0, 0, 0]], 1.0);
        assert_eq!(c.data[[1, 0, 0]], 0.0);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        let bad = ArrayD::from_elem(IxDyn(&[2, 2]), 1.5);
        assert!(RegionMask::new(bad).is_err());
    }

    #[test]
    fn mask_resample_preserves_binary() {
        // 4x4 mask with a 2x2 hot corner, downsampled to 2x2.
        let mut data = ArrayD::zeros(IxDyn(&[4, 4]));
        for y in 0..2 {
            for x in 0..2 {
                data[[y, x]] = 1.0;
            }
        }
        let m = RegionMask::new(data).unwrap();
        let small = m.resample(2, 2);
        assert!(small.is_binary(), "nearest-neighbor must not invent values");
        assert_eq!(small.data[[0, 0]], 1.0);
        assert_eq!(small.data[[1, 1]], 0.0);
        let big = m.resample(8, 8);
        assert!(big.is_binary());
        assert_eq!(big.data[[0, 0]], 1.0);
        assert_eq!(big.data[[7, 7]], 0.0);
    }

    #[test]
    fn mask_resample_identity() {
        let mut data = ArrayD::zeros(IxDyn(&[3, 5]));
        data[[1, 2]] = 1.0;
        data[[2, 4]] = 0.5;
        let m = RegionMask::new(data).unwrap();
        let same = m.resample(3, 5);
        assert_eq!(same.data, m.data, "identity resample must be exact");
    }

    #[test]
    fn iou_basic() {
        let mut a = ArrayD::zeros(IxDyn(&[2, 2]));
        a[[0, 0]] = 1.0;
        a[[0, 1]] = 1.0;
        let mut b = ArrayD::zeros(IxDyn(&[2, 2]));
        b[[0, 1]] = 1.0;
        b[[1, 0]] = 1.0;
        let a = RegionMask::new(a).unwrap();
        let b = RegionMask::new(b).unwrap();
        // intersection 1 cell, union 3 cells
        assert!((a.iou(&b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // both empty -> 1.0
        let e1 = RegionMask::new(ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        let e2 = RegionMask::new(ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        assert_eq!(e1.iou(&e2).unwrap(), 1.0);
    }

    #[test]
    fn embedding_pair_checks_dims() {
        let t = ArrayD::zeros(IxDyn(&[4, 8]));
        let v = ArrayD::zeros(IxDyn(&[8]));
        assert!(EmbeddingPair::new(t.clone(), v).is_ok());
        let v_bad = ArrayD::zeros(IxDyn(&[7]));
        assert!(EmbeddingPair::new(t, v_bad).is_err());
    }
}

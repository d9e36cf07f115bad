//! Layer building blocks: thin parameter containers whose `forward` methods
//! compose tape operations. Initialization draws from a caller-supplied RNG
//! so model construction is deterministic given a seed.

use super::tape::Tensor;
use crate::container::TensorStore;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

/// Restore a parameter tensor from a store, validating its shape.
fn load_param(store: &TensorStore, name: &str, into: &Tensor) -> Result<()> {
    let data = store.load(name)?;
    if data.shape() != into.shape().as_slice() {
        return Err(Error::Container(format!(
            "{name}: stored shape {:?} does not match model shape {:?}",
            data.shape(),
            into.shape()
        )));
    }
    into.set_value(data);
    Ok(())
}

/// 2-D convolution layer with bias.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized convolution (suits the SiLU activations used here).
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        Self {
            weight: Tensor::param(normal(&[out_c, in_c, k, k], (2.0 / fan_in).sqrt(), rng)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[out_c]))),
            stride,
            pad,
        }
    }

    /// All-zero initialization: the layer's output starts at exactly zero,
    /// so additive injections begin as no-ops.
    pub fn new_zero(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::param(ArrayD::zeros(IxDyn(&[out_c, in_c, k, k]))),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[out_c]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, self.stride, self.pad)
            .add_bias_chan(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.save(&format!("{prefix}.weight"), &self.weight.value())?;
        store.save(&format!("{prefix}.bias"), &self.bias.value())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        load_param(store, &format!("{prefix}.weight"), &self.weight)?;
        load_param(store, &format!("{prefix}.bias"), &self.bias)
    }
}

/// Fully connected layer.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::param(normal(&[d_in, d_out], (2.0 / d_in as f64).sqrt(), rng)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[d_out]))),
        }
    }

    pub fn new_zero(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::param(ArrayD::zeros(IxDyn(&[d_in, d_out]))),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[d_out]))),
        }
    }

    /// Random init with the weight magnitude damped by `gain` — for layers
    /// that should start with a small but non-zero contribution.
    pub fn new_scaled(d_in: usize, d_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::param(normal(&[d_in, d_out], gain * (2.0 / d_in as f64).sqrt(), rng)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[d_out]))),
        }
    }

    /// `[m, in] → [m, out]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_bias_row(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.save(&format!("{prefix}.weight"), &self.weight.value())?;
        store.save(&format!("{prefix}.bias"), &self.bias.value())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        load_param(store, &format!("{prefix}.weight"), &self.weight)?;
        load_param(store, &format!("{prefix}.bias"), &self.bias)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        Self {
            gamma: Tensor::param(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(&self.gamma, &self.beta, self.groups)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.save(&format!("{prefix}.gamma"), &self.gamma.value())?;
        store.save(&format!("{prefix}.beta"), &self.beta.value())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        load_param(store, &format!("{prefix}.gamma"), &self.gamma)?;
        load_param(store, &format!("{prefix}.beta"), &self.beta)
    }
}

/// Token-embedding table.
#[derive(Debug)]
pub struct Embedding {
    pub table: Tensor, // [vocab, d]
}

impl Embedding {
    pub fn new(vocab: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Tensor::param(normal(&[vocab, d], 0.02, rng)),
        }
    }

    /// `idx [n, l] → [n, l, d]`.
    pub fn forward(&self, idx: &ndarray::Array2<usize>) -> Tensor {
        Tensor::gather_rows(&self.table, idx)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.table.clone()]
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.save(&format!("{prefix}.table"), &self.table.value())
    }

    pub fn load(&self, store: &TensorStore, prefix: &str) -> Result<()> {
        load_param(store, &format!("{prefix}.table"), &self.table)
    }
}

/// Flip gradient tracking for a whole parameter set (freeze/unfreeze).
pub fn set_trainable(params: &[Tensor], trainable: bool) {
    for p in params {
        p.set_needs_grad(trainable);
    }
}

/// Sinusoidal position features for a raw timestep value, dimension `dim`
/// (even): interleaved sin/cos over geometrically spaced frequencies.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "timestep feature dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Conv2d::new(3, 8, 3, 1, 1, &mut r1);
        let b = Conv2d::new(3, 8, 3, 1, 1, &mut r2);
        assert_eq!(a.weight.value(), b.weight.value());
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::constant(normal(&[1, 4, 5, 5], 1.0, &mut rng));
        let conv = Conv2d::new_zero(4, 6, 1, 1, 0);
        let y = conv.forward(&x);
        assert!(y.value().iter().all(|&v| v == 0.0), "zero init ⇒ zero output");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TensorStore::create(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(4, 3, &mut rng);
        lin.save(&mut store, "proj").unwrap();

        let lin2 = Linear::new_zero(4, 3);
        lin2.load(&store, "proj").unwrap();
        // f32 storage: values agree to f32 precision.
        for (a, b) in lin.weight.value().iter().zip(lin2.weight.value().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let wrong = Linear::new_zero(3, 4);
        assert!(wrong.load(&store, "proj").is_err(), "shape mismatch must fail");
    }

    #[test]
    fn timestep_features_distinguish_and_bound() {
        let a = timestep_features(1, 64);
        let b = timestep_features(999, 64);
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_features(5, 64), timestep_features(5, 64));
        // t = 0 gives sin=0, cos=1 at every frequency.
        let z = timestep_features(0, 8);
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn set_trainable_flips_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(2, 2, &mut rng);
        assert!(lin.weight.needs_grad());
        set_trainable(&lin.params(), false);
        assert!(!lin.weight.needs_grad() && !lin.bias.needs_grad());
        set_trainable(&lin.params(), true);
        assert!(lin.weight.needs_grad());
    }
}

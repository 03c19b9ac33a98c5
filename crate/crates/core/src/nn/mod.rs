//! Minimal reverse-mode machinery for the two small convolutional networks.
//!
//! Networks are written against [`Graph`], a tape of operations whose
//! backward rules live next to their forward definitions. Everything is
//! generic over [`Scalar`] so that finite-difference checks can run the
//! exact same code path in `f64`.

mod adam;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;

/// Sinusoidal embedding of integer steps; `dim` must be even.
pub fn timestep_embedding<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0 && dim > 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::from_f64_lossy));
    }
    Tensor::from_vec(vec![steps.len(), dim], data)
}

/// Gaussian weights with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<f32> {
    let std = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Tensor::from_vec(shape, data)
}

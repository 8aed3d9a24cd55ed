//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CPU: Device = Device::Cpu;

/// Uniform `[-1, 1)` values as an `f64` tensor.
pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &CPU).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &CPU).unwrap()
}

/// Relative error norm between the autodiff gradient of `f` w.r.t. `var`
/// and central differences with step `eps`, on up to `probes` entries.
pub fn grad_error(var: &Var, probes: usize, eps: f64, f: impl Fn() -> Tensor) -> f64 {
    let grads = f().backward().unwrap();
    let analytic = flat(grads.get(var).expect("gradient"));
    let base = flat(var.as_tensor());
    let shape = var.dims().to_vec();
    let stride = (base.len() / probes).max(1);
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..base.len()).step_by(stride) {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        var.set(&tensor(v.clone(), &shape)).unwrap();
        let up = scalar(&f());
        v[i] = base[i] - eps;
        var.set(&tensor(v, &shape)).unwrap();
        let down = scalar(&f());
        let fd = (up - down) / (2.0 * eps);
        num += (analytic[i] - fd).powi(2);
        den += fd.powi(2);
    }
    var.set(&tensor(base, &shape)).unwrap();
    (num / den.max(1e-24)).sqrt()
}

/// `sum_k <t_k, w_k>` as a scalar tensor.
pub fn weighted_sum(ts: &[(&Tensor, &Tensor)]) -> Tensor {
    let mut acc = Tensor::new(0f64, &CPU).unwrap();
    for (t, w) in ts {
        acc = (acc + (*t * *w).unwrap().sum_all().unwrap()).unwrap();
    }
    acc
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlight::nets::{Layer, ParamStore};
use vlight::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Moves every trainable scalar off its initial value so that no branch is
/// trivially zero (e.g. a zero-initialized normalization scale).
pub fn jitter_params(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for e in p.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in &mut e.value {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub param_rel: f64,
    pub input_rel: f64,
    pub checked: usize,
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Central differences of `L = sum(w * layer(x))` (training-mode forward)
/// against the analytic backward pass, on up to `per_array` random
/// coordinates of every trainable array and of the input.
/// Errors are `|a - n| / (|a| + |n|)` in the 2-norm over sampled coordinates.
pub fn grad_check(
    layer: &mut dyn Layer<f64>,
    p: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    per_array: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let y = layer.forward(p, x).unwrap();
    let w = random_tensor(y.shape(), rng);
    p.zero_grads();
    let gx = layer.backward(p, &w).unwrap();
    let h = 1e-6;

    let loss = |layer: &mut dyn Layer<f64>, p: &mut ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let y = layer.forward(p, x).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let (mut pa, mut pn) = (Vec::new(), Vec::new());
    for idx in 0..p.entries().len() {
        if !p.entries()[idx].trainable {
            continue;
        }
        let len = p.entries()[idx].value.len();
        for _ in 0..per_array.min(len) {
            let i = rng.random_range(0..len);
            let orig = p.entries()[idx].value[i];
            p.entries_mut()[idx].value[i] = orig + h;
            let up = loss(layer, p, x);
            p.entries_mut()[idx].value[i] = orig - h;
            let down = loss(layer, p, x);
            p.entries_mut()[idx].value[i] = orig;
            pn.push((up - down) / (2.0 * h));
            pa.push(p.entries()[idx].grad[i]);
        }
    }

    let (mut ia, mut inum) = (Vec::new(), Vec::new());
    let mut xp = x.clone();
    for _ in 0..per_array.min(x.len()) {
        let i = rng.random_range(0..x.len());
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = loss(layer, p, &xp);
        xp.data_mut()[i] = orig - h;
        let down = loss(layer, p, &xp);
        xp.data_mut()[i] = orig;
        inum.push((up - down) / (2.0 * h));
        ia.push(gx.data()[i]);
    }

    GradCheck {
        param_rel: rel(&pa, &pn),
        input_rel: rel(&ia, &inum),
        checked: pa.len() + ia.len(),
    }
}

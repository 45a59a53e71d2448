//! Shared helpers for integration tests: finite differences, random
//! instances and small configurations.

#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use dualteach::RunConfig;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// vectors are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn softmax(z: &Array3<f64>) -> Array3<f64> {
    dualteach::nn::softmax_channels(z)
}

pub fn random_logits(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0))
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..255.0))
}

/// A small network that trains in well under a second per step.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data_classes = 2;
    c.data_image_size = 32;
    c.aug_crop = 32;
    c.model_widths = vec![8, 8, 8, 8, 16, 16];
    c.model_seg_hidden = 8;
    c.train_batch = 2;
    c.train_iters = 10;
    c.pwm_period = 4;
    c.pwm_tau = 2.0;
    c.crf_n_iters = 3;
    c.train_lr = 0.01;
    c
}

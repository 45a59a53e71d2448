//! Segmentation branch shared by the seg-teacher and the student: two 3x3
//! dilated convolutions and a per-pixel softmax over `C + 1` channels.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, softmax_channels, softmax_channels_backward, Conv2d, ConvCache, Module};

/// Per-pixel class distributions, `(C + 1, h, w)`, channel 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps {
    pub p: Array3<f64>,
}

impl ProbMaps {
    /// Validates non-negativity and per-pixel sums within `1e-6`.
    pub fn new(p: Array3<f64>) -> Result<Self> {
        let maps = Self { p };
        maps.check_simplex(1e-6)?;
        Ok(maps)
    }

    /// Wraps `p` without checking that it is a distribution.
    pub fn new_unchecked(p: Array3<f64>) -> Self {
        Self { p }
    }

    pub fn channels(&self) -> usize {
        self.p.dim().0
    }

    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.p.dim();
        (h, w)
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let (c, h, w) = self.p.dim();
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..c {
                    let v = self.p[[k, y, x]];
                    if !(v >= 0.0) {
                        return Err(Error::Invalid(format!("negative or NaN probability at ({y}, {x})")));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > tol {
                    return Err(Error::Invalid(format!("probabilities at ({y}, {x}) sum to {s}")));
                }
            }
        }
        Ok(())
    }

    /// Renormalises each pixel to sum to one.
    pub fn renormalized(mut self) -> Self {
        let (c, h, w) = self.p.dim();
        for y in 0..h {
            for x in 0..w {
                let z: f64 = (0..c).map(|k| self.p[[k, y, x]]).sum();
                if z > 0.0 {
                    for k in 0..c {
                        self.p[[k, y, x]] /= z;
                    }
                } else {
                    self.p[[0, y, x]] = 1.0;
                }
            }
        }
        self
    }

    /// Zeroes foreground channels whose tag bit is clear, then renormalises.
    pub fn restrict_to_tags(mut self, tags: &[bool]) -> Self {
        for (k, &t) in tags.iter().enumerate() {
            if !t && k + 1 < self.channels() {
                self.p.index_axis_mut(Axis(0), k + 1).fill(0.0);
            }
        }
        self.renormalized()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegHeadConfig {
    pub hidden: usize,
    pub dilation: usize,
}

impl SegHeadConfig {
    /// Dilation 12 once feature maps are large enough to use it (crops of
    /// 128 px and up at stride 4), 4 below that.
    pub fn for_feature_size(side: usize, hidden: usize) -> Self {
        Self {
            hidden,
            dilation: if side > 16 { 12 } else { 4 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct SegCache {
    c1: ConvCache,
    c2: ConvCache,
    hidden: Array4<f64>,
    probs: Vec<Array3<f64>>,
}

impl SegHead {
    pub fn new(in_channels: usize, num_classes: usize, cfg: &SegHeadConfig) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, cfg.hidden, 3, 1, cfg.dilation),
            conv2: Conv2d::new(cfg.hidden, num_classes + 1, 3, 1, cfg.dilation),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.conv1.init(rng);
        self.conv2.init(rng);
        // small logits at start: near-uniform predictions
        self.conv2.weight.mapv_inplace(|v| v * 0.1);
    }

    pub fn channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    pub fn forward(&self, features: &Array4<f64>) -> Result<(Vec<ProbMaps>, SegCache)> {
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("segmentation head input".into()));
        }
        let (z1, c1) = self.conv1.forward(features)?;
        let hidden = relu(&z1);
        let (z2, c2) = self.conv2.forward(&hidden)?;
        let probs: Vec<Array3<f64>> = z2.outer_iter().map(|l| softmax_channels(&l.to_owned())).collect();
        let out = probs.iter().cloned().map(ProbMaps::new_unchecked).collect();
        Ok((out, SegCache { c1, c2, hidden, probs }))
    }

    /// Takes `dL/dP` per image, accumulates into `grads`, returns `dL/dF`.
    pub fn backward(&self, cache: &SegCache, d_probs: &[Array3<f64>], grads: &mut SegHead) -> Array4<f64> {
        let (n, _, h, w) = cache.hidden.dim();
        let mut dz2 = Array4::zeros((n, self.channels(), h, w));
        for (i, (p, dp)) in cache.probs.iter().zip(d_probs).enumerate() {
            dz2.index_axis_mut(Axis(0), i)
                .assign(&softmax_channels_backward(p, dp));
        }
        let dh = self.conv2.backward(&cache.c2, &dz2, &mut grads.conv2);
        let dz1 = relu_backward(&cache.hidden, &dh);
        self.conv1.backward(&cache.c1, &dz1, &mut grads.conv1)
    }
}

impl Module for SegHead {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v
    }
}

/// Single-image forward: conv, rectify, conv, softmax.
pub fn seg_forward(features: &FeatureMap, params: &SegHead) -> Result<ProbMaps> {
    let x = features.values.clone().insert_axis(Axis(0));
    let (mut probs, _) = params.forward(&x)?;
    Ok(probs.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SegHeadConfig {
        SegHeadConfig { hidden: 5, dilation: 2 }
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = SegHead::new(4, 3, &cfg());
        let f = FeatureMap {
            values: Array3::from_elem((4, 5, 5), 0.3),
            stride: 4,
        };
        let p = seg_forward(&f, &head).unwrap();
        assert!(p.p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn random_output_is_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = SegHead::new(4, 3, &cfg());
        head.init(&mut rng);
        head.conv2.weight.mapv_inplace(|v| v * 30.0);
        let f = FeatureMap {
            values: Array3::from_shape_fn((4, 6, 7), |_| rng.gen_range(-2.0..2.0)),
            stride: 4,
        };
        let p = seg_forward(&f, &head).unwrap();
        p.check_simplex(1e-6).unwrap();
    }

    #[test]
    fn teacher_and_student_are_the_same_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut a = SegHead::new(4, 2, &cfg());
        let mut b = SegHead::new(4, 2, &cfg());
        a.init(&mut rng);
        b.init(&mut rng);
        let f = FeatureMap {
            values: Array3::from_shape_fn((4, 5, 5), |_| rng.gen_range(-1.0..1.0)),
            stride: 4,
        };
        let pa = seg_forward(&f, &a).unwrap();
        let pb = seg_forward(&f, &b).unwrap();
        assert_ne!(pa, pb);
        std::mem::swap(&mut a, &mut b);
        assert_eq!(seg_forward(&f, &b).unwrap(), pa);
        assert_eq!(seg_forward(&f, &a).unwrap(), pb);
    }

    #[test]
    fn restrict_to_tags_zeroes_absent() {
        let p = ProbMaps::new(Array3::from_elem((3, 2, 2), 1.0 / 3.0)).unwrap();
        let r = p.restrict_to_tags(&[false, true]);
        assert!(r.p.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
        assert!(r.p.index_axis(Axis(0), 2).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn simplex_validation() {
        assert!(ProbMaps::new(Array3::from_elem((2, 1, 1), 0.6)).is_err());
        assert!(ProbMaps::new(Array3::from_elem((2, 1, 1), 0.5)).is_ok());
    }
}

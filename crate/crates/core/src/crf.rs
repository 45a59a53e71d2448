//! Fully connected CRF with Gaussian appearance and smoothness kernels,
//! solved by mean-field iteration with a Potts compatibility.
//!
//! Pairwise sums are exact. Up to [`DENSE_MAX_PIXELS`] pixels the kernel
//! matrix is materialised once and every iteration is a matrix product;
//! larger images recompute kernel rows on the fly.

use ndarray::{Array2, Array3};

use crate::class_teacher::HardLabelMap;
use crate::error::{Error, Result};
use crate::seg_head::ProbMaps;

pub const DENSE_MAX_PIXELS: usize = 64 * 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub n_iters: usize,
    pub w_appearance: f64,
    pub w_smoothness: f64,
    /// Appearance kernel spatial bandwidth, image pixels.
    pub theta_alpha: f64,
    /// Appearance kernel colour bandwidth, 8-bit intensity levels.
    pub theta_beta: f64,
    /// Smoothness kernel spatial bandwidth, image pixels.
    pub theta_gamma: f64,
    /// Potts penalty for disagreeing labels.
    pub compat: f64,
    /// Image pixels per grid cell of the maps being refined.
    pub pixel_spacing: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            n_iters: 10,
            w_appearance: 4.0,
            w_smoothness: 3.0,
            theta_alpha: 80.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
            compat: 1.0,
            pixel_spacing: 1.0,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("crf.theta_alpha", self.theta_alpha),
            ("crf.theta_beta", self.theta_beta),
            ("crf.theta_gamma", self.theta_gamma),
            ("crf.compat", self.compat),
            ("crf.pixel_spacing", self.pixel_spacing),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("crf.w_appearance", self.w_appearance), ("crf.w_smoothness", self.w_smoothness)] {
            if !(v >= 0.0) {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn has_pairwise(&self) -> bool {
        self.n_iters > 0 && (self.w_appearance != 0.0 || self.w_smoothness != 0.0)
    }
}

/// Pairwise kernel over one image; reusable across probability maps.
pub struct DenseCrf {
    params: CrfParams,
    h: usize,
    w: usize,
    /// Pixel-major colours.
    colors: Vec<[f64; 3]>,
    matrix: Option<Array2<f64>>,
}

impl DenseCrf {
    /// `image` is `(3, h, w)` in 8-bit intensity units.
    pub fn new(image: &Array3<f64>, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("CRF guide image needs 3 channels, got {c}")));
        }
        let colors: Vec<[f64; 3]> = (0..h * w)
            .map(|i| [0, 1, 2].map(|ch| image[[ch, i / w, i % w]]))
            .collect();
        let mut crf = Self {
            params: params.clone(),
            h,
            w,
            colors,
            matrix: None,
        };
        let n = h * w;
        if params.has_pairwise() && n <= DENSE_MAX_PIXELS {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                for j in (i + 1)..n {
                    let k = crf.kernel(i, j);
                    m[[i, j]] = k;
                    m[[j, i]] = k;
                }
            }
            crf.matrix = Some(m);
        }
        Ok(crf)
    }

    fn kernel(&self, i: usize, j: usize) -> f64 {
        let s = self.params.pixel_spacing;
        let dy = ((i / self.w) as f64 - (j / self.w) as f64) * s;
        let dx = ((i % self.w) as f64 - (j % self.w) as f64) * s;
        let d2 = dy * dy + dx * dx;
        let (a, b) = (&self.colors[i], &self.colors[j]);
        let c2 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
        let p = &self.params;
        p.w_appearance
            * (-d2 / (2.0 * p.theta_alpha * p.theta_alpha) - c2 / (2.0 * p.theta_beta * p.theta_beta)).exp()
            + p.w_smoothness * (-d2 / (2.0 * p.theta_gamma * p.theta_gamma)).exp()
    }

    fn messages(&self, q: &Array2<f64>) -> Array2<f64> {
        match &self.matrix {
            Some(m) => m.dot(q),
            None => {
                let (n, l) = q.dim();
                let mut out = Array2::zeros((n, l));
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            let k = self.kernel(i, j);
                            for c in 0..l {
                                out[[i, c]] += k * q[[j, c]];
                            }
                        }
                    }
                }
                out
            }
        }
    }

    pub fn refine(&self, probs: &ProbMaps) -> Result<ProbMaps> {
        self.refine_with(probs, |_, _| {})
    }

    /// Runs mean-field, calling `observe(iteration, q)` after every update.
    pub fn refine_with<F: FnMut(usize, &ProbMaps)>(&self, probs: &ProbMaps, mut observe: F) -> Result<ProbMaps> {
        let (l, h, w) = probs.p.dim();
        if (h, w) != (self.h, self.w) {
            return Err(Error::Shape(format!(
                "probabilities {:?} not aligned with CRF image {:?}",
                (h, w),
                (self.h, self.w)
            )));
        }
        if !self.params.has_pairwise() {
            return Ok(probs.clone());
        }
        let n = h * w;
        let unary = Array2::from_shape_fn((n, l), |(i, c)| probs.p[[c, i / w, i % w]]);
        let mut q = unary.clone();
        for it in 0..self.params.n_iters {
            let m = self.messages(&q);
            for i in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..l {
                    if unary[[i, c]] > 0.0 {
                        mx = mx.max(self.params.compat * m[[i, c]]);
                    }
                }
                let mut z = 0.0;
                for c in 0..l {
                    let u = unary[[i, c]];
                    let v = if u > 0.0 {
                        u * (self.params.compat * m[[i, c]] - mx).exp()
                    } else {
                        0.0
                    };
                    q[[i, c]] = v;
                    z += v;
                }
                for c in 0..l {
                    q[[i, c]] /= z;
                }
            }
            observe(it, &to_maps(&q, h, w));
        }
        Ok(to_maps(&q, h, w))
    }
}

fn to_maps(q: &Array2<f64>, h: usize, w: usize) -> ProbMaps {
    let (_, l) = q.dim();
    ProbMaps::new_unchecked(Array3::from_shape_fn((l, h, w), |(c, y, x)| q[[y * w + x, c]]))
}

/// Mean-field refinement of `probs` guided by `image` (`(3, h, w)`, 8-bit
/// intensity units).
pub fn crf_refine(probs: &ProbMaps, image: &Array3<f64>, params: &CrfParams) -> Result<ProbMaps> {
    let (h, w) = probs.dim();
    if image.dim() != (3, h, w) {
        return Err(Error::Shape(format!(
            "probabilities {:?} not aligned with image {:?}",
            (h, w),
            image.dim()
        )));
    }
    DenseCrf::new(image, params)?.refine(probs)
}

/// Per-pixel argmax; ties go to the lower channel index.
pub fn harden(probs: &ProbMaps) -> HardLabelMap {
    let (c, h, w) = probs.p.dim();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs.p[[k, y, x]] > probs.p[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    HardLabelMap { labels, channels: c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> ProbMaps {
        let raw = Array3::from_shape_fn((l, h, w), |_| rng.gen_range(0.05..1.0));
        ProbMaps::new_unchecked(raw).renormalized()
    }

    #[test]
    fn zero_pairwise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_probs(&mut rng, 3, 6, 5);
        let img = Array3::from_shape_fn((3, 6, 5), |_| rng.gen_range(0.0..255.0));
        let params = CrfParams {
            w_appearance: 0.0,
            w_smoothness: 0.0,
            n_iters: 7,
            ..Default::default()
        };
        assert_eq!(crf_refine(&p, &img, &params).unwrap(), p);
        let params = CrfParams {
            n_iters: 0,
            ..Default::default()
        };
        assert_eq!(crf_refine(&p, &img, &params).unwrap(), p);
    }

    #[test]
    fn every_iteration_is_a_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_probs(&mut rng, 4, 8, 8);
        let img = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..255.0));
        let crf = DenseCrf::new(&img, &CrfParams::default()).unwrap();
        let mut seen = 0;
        crf.refine_with(&p, |_, q| {
            q.check_simplex(1e-6).unwrap();
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn zero_channels_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_probs(&mut rng, 3, 5, 5);
        let mut raw = p.p.clone();
        raw.index_axis_mut(Axis(0), 2).fill(0.0);
        let p = ProbMaps::new_unchecked(raw).renormalized();
        let img = Array3::from_shape_fn((3, 5, 5), |_| rng.gen_range(0.0..255.0));
        let q = crf_refine(&p, &img, &CrfParams::default()).unwrap();
        assert!(q.p.index_axis(Axis(0), 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn misaligned_is_rejected() {
        let p = ProbMaps::new(Array3::from_elem((2, 3, 3), 0.5)).unwrap();
        assert!(crf_refine(&p, &Array3::zeros((3, 4, 3)), &CrfParams::default()).is_err());
    }

    #[test]
    fn harden_tie_and_idempotence() {
        let u = ProbMaps::new(Array3::from_elem((3, 2, 2), 1.0 / 3.0)).unwrap();
        assert!(harden(&u).labels.iter().all(|&l| l == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_probs(&mut rng, 4, 5, 5);
        let b = harden(&p);
        assert_eq!(harden(&b.to_probs()), b);
    }

    #[test]
    fn label_permutation_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_probs(&mut rng, 3, 6, 6);
        let img = Array3::from_shape_fn((3, 6, 6), |_| rng.gen_range(0.0..255.0));
        let perm = [2usize, 0, 1];
        let permuted = ProbMaps::new_unchecked(Array3::from_shape_fn((3, 6, 6), |(c, y, x)| p.p[[perm[c], y, x]]));
        let a = crf_refine(&p, &img, &CrfParams::default()).unwrap();
        let b = crf_refine(&permuted, &img, &CrfParams::default()).unwrap();
        for ((c, y, x), v) in b.p.indexed_iter() {
            assert!((v - a.p[[perm[c], y, x]]).abs() < 1e-12);
        }
    }
}

//! Hard-label distillation cross-entropies and the pairwise structural
//! energy. Every loss returns its value together with `dL/dP`.

use ndarray::Array3;

use crate::class_teacher::{HardLabelMap, ReliabilityMask};
use crate::error::{Error, Result};
use crate::seg_head::ProbMaps;

const LOG_EPS: f64 = 1e-7;

/// Bilateral affinity used by the structural energy.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseKernelConfig {
    /// Spatial bandwidth in image pixels.
    pub sigma_d: f64,
    /// Colour bandwidth in 8-bit intensity levels.
    pub sigma_i: f64,
    /// Half-width of the square neighbourhood, in grid cells.
    pub radius: usize,
    /// Image pixels per grid cell (the backbone stride when evaluated on
    /// feature-resolution maps).
    pub pixel_spacing: f64,
}

impl Default for PairwiseKernelConfig {
    fn default() -> Self {
        Self {
            sigma_d: 15.0,
            sigma_i: 100.0,
            radius: 5,
            pixel_spacing: 1.0,
        }
    }
}

impl PairwiseKernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0 && self.sigma_i > 0.0 && self.radius > 0 && self.pixel_spacing > 0.0) {
            return Err(Error::config("losses", "sigma_d, sigma_i, radius and spacing must be positive"));
        }
        Ok(())
    }

    /// `W(i, j)` for a grid offset and a colour difference.
    pub fn affinity(&self, dy: f64, dx: f64, color_sq: f64) -> f64 {
        let d2 = (dy * dy + dx * dx) * self.pixel_spacing * self.pixel_spacing;
        (-d2 / (2.0 * self.sigma_d * self.sigma_d) - color_sq / (2.0 * self.sigma_i * self.sigma_i)).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `dL/dP`, same shape as the probability maps.
    pub grad: Array3<f64>,
    /// Set when no pixel contributed to a masked loss.
    pub empty: bool,
}

/// Reliability-masked hard-label cross-entropy, averaged over contributing
/// pixels.
///
/// A pixel contributes when it is reliable and its label is background or
/// one of `present` (1-based). Probabilities are clamped at `1e-7` in the
/// value. The gradient is `-1/p` without the clamp: through a softmax it
/// becomes `p - onehot`, so saturated outputs keep learning.
pub fn masked_hard_ce(
    probs: &ProbMaps,
    labels: &HardLabelMap,
    reliability: &ReliabilityMask,
    present: &[usize],
) -> Result<LossValue> {
    let (c, h, w) = probs.p.dim();
    if labels.dim() != (h, w) || reliability.r.dim() != (h, w) || labels.channels != c {
        return Err(Error::Shape(format!(
            "probabilities {:?}, labels {:?} over {} channels, reliability {:?}",
            (c, h, w),
            labels.dim(),
            labels.channels,
            reliability.r.dim()
        )));
    }
    let mut admitted = vec![false; c];
    admitted[0] = true;
    for &k in present {
        if k < c {
            admitted[k] = true;
        }
    }
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for ((y, x), &l) in labels.labels.indexed_iter() {
        let l = l as usize;
        if !reliability.r[[y, x]] || l >= c || !admitted[l] {
            continue;
        }
        count += 1;
        let p = probs.p[[l, y, x]];
        sum -= p.max(LOG_EPS).ln();
        grad[[l, y, x]] = -1.0 / p.max(f64::MIN_POSITIVE);
    }
    if count == 0 {
        log::warn!("masked cross-entropy over an all-unreliable map");
        return Ok(LossValue {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let n = count as f64;
    grad /= n;
    Ok(LossValue {
        value: sum / n,
        grad,
        empty: false,
    })
}

/// Pairwise energy `Σ_i Σ_{j∈N(i)} W(i,j) Σ_c p_ci (1 - p_cj)` over ordered
/// pairs in a square window, divided by the pixel count.
///
/// `image` is `(3, h, w)` aligned with `probs`, in 8-bit intensity units.
pub fn structural_energy(probs: &ProbMaps, image: &Array3<f64>, cfg: &PairwiseKernelConfig) -> Result<LossValue> {
    let (c, h, w) = probs.p.dim();
    if image.dim() != (3, h, w) {
        return Err(Error::Shape(format!(
            "image {:?} not aligned with probabilities {:?}",
            image.dim(),
            (c, h, w)
        )));
    }
    cfg.validate()?;
    let r = cfg.radius as isize;
    let p = probs.p.as_standard_layout();
    let ps = p.as_slice().expect("standard layout");
    let img = image.as_standard_layout();
    let is = img.as_slice().expect("standard layout");
    let plane = h * w;
    let mut grad = vec![0.0; c * plane];
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            for dy in -r..=r {
                let yj = y + dy;
                if yj < 0 || yj >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xj = x + dx;
                    if (dy == 0 && dx == 0) || xj < 0 || xj >= w as isize {
                        continue;
                    }
                    let j = (yj as usize) * w + xj as usize;
                    let mut color = 0.0;
                    for ch in 0..3 {
                        let d = is[ch * plane + i] - is[ch * plane + j];
                        color += d * d;
                    }
                    let wij = cfg.affinity(dy as f64, dx as f64, color);
                    for k in 0..c {
                        let (pi, pj) = (ps[k * plane + i], ps[k * plane + j]);
                        total += wij * pi * (1.0 - pj);
                        grad[k * plane + i] += wij * (1.0 - pj);
                        grad[k * plane + j] -= wij * pi;
                    }
                }
            }
        }
    }
    let n = plane as f64;
    let grad = Array3::from_shape_vec((c, h, w), grad.into_iter().map(|g| g / n).collect())
        .expect("sized above");
    Ok(LossValue {
        value: total / n,
        grad,
        empty: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_str: f64,
    pub kernel: PairwiseKernelConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_str: 0.1,
            kernel: PairwiseKernelConfig::default(),
        }
    }
}

/// Masked cross-entropy plus `lambda_str` times the structural energy.
pub fn distillation_loss(
    probs: &ProbMaps,
    labels: &HardLabelMap,
    reliability: &ReliabilityMask,
    present: &[usize],
    image: &Array3<f64>,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    let mut ce = masked_hard_ce(probs, labels, reliability, present)?;
    if cfg.lambda_str != 0.0 {
        let st = structural_energy(probs, image, &cfg.kernel)?;
        ce.value += cfg.lambda_str * st.value;
        ce.grad.scaled_add(cfg.lambda_str, &st.grad);
    }
    Ok(ce)
}

/// Class-teacher labels into the seg-teacher.
pub fn loss_ct_to_st(
    p_st: &ProbMaps,
    b_ct: &HardLabelMap,
    r_ct: &ReliabilityMask,
    present: &[usize],
    image: &Array3<f64>,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    distillation_loss(p_st, b_ct, r_ct, present, image, cfg)
}

/// Class-teacher labels into the student.
pub fn loss_ct_to_s(
    p_s: &ProbMaps,
    b_ct: &HardLabelMap,
    r_ct: &ReliabilityMask,
    present: &[usize],
    image: &Array3<f64>,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    distillation_loss(p_s, b_ct, r_ct, present, image, cfg)
}

/// Seg-teacher labels into the student; every pixel is trusted.
pub fn loss_st_to_s(
    p_s: &ProbMaps,
    b_st: &HardLabelMap,
    present: &[usize],
    image: &Array3<f64>,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    let (h, w) = b_st.dim();
    distillation_loss(p_s, b_st, &ReliabilityMask::all(h, w), present, image, cfg)
}

/// Unnormalised pairwise energy of one ordered pair, for diagnostics.
pub fn pair_energy(p_i: &[f64], p_j: &[f64]) -> f64 {
    p_i.iter().zip(p_j).map(|(a, b)| a * (1.0 - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_teacher::UNLABELED;
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn onehot_probs(labels: &Array2<u8>, c: usize) -> ProbMaps {
        HardLabelMap {
            labels: labels.clone(),
            channels: c,
        }
        .to_probs()
    }

    #[test]
    fn perfect_match_is_zero() {
        let labels = Array2::from_shape_vec((2, 2), vec![0u8, 1, 2, 1]).unwrap();
        let b = HardLabelMap {
            labels: labels.clone(),
            channels: 3,
        };
        let l = masked_hard_ce(&onehot_probs(&labels, 3), &b, &ReliabilityMask::all(2, 2), &[1, 2]).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn single_pixel_ln2() {
        let p = ProbMaps::new(Array3::from_elem((2, 1, 1), 0.5)).unwrap();
        let b = HardLabelMap {
            labels: Array2::from_elem((1, 1), 1),
            channels: 2,
        };
        let l = masked_hard_ce(&p, &b, &ReliabilityMask::all(1, 1), &[1]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_unreliable_flags_empty() {
        let p = ProbMaps::new(Array3::from_elem((2, 2, 2), 0.5)).unwrap();
        let b = HardLabelMap {
            labels: Array2::from_elem((2, 2), UNLABELED),
            channels: 2,
        };
        let r = ReliabilityMask {
            r: Array2::from_elem((2, 2), false),
        };
        let l = masked_hard_ce(&p, &b, &r, &[1]).unwrap();
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn absent_class_labels_do_not_contribute() {
        let p = ProbMaps::new(Array3::from_elem((3, 1, 2), 1.0 / 3.0)).unwrap();
        let b = HardLabelMap {
            labels: Array2::from_shape_vec((1, 2), vec![2u8, 1]).unwrap(),
            channels: 3,
        };
        let l = masked_hard_ce(&p, &b, &ReliabilityMask::all(1, 2), &[1]).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
        assert!(l.grad.index_axis(Axis(0), 2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_onehot_field_has_zero_energy() {
        let labels = Array2::from_elem((5, 5), 1u8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array3::from_shape_fn((3, 5, 5), |_| rng.gen_range(0.0..255.0));
        let e = structural_energy(&onehot_probs(&labels, 3), &img, &PairwiseKernelConfig::default()).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn opposite_pair_energy_is_two() {
        let labels = Array2::from_shape_vec((1, 2), vec![0u8, 1]).unwrap();
        let img = Array3::from_elem((3, 1, 2), 40.0);
        let cfg = PairwiseKernelConfig {
            sigma_d: 1e12,
            sigma_i: 1e12,
            radius: 1,
            pixel_spacing: 1.0,
        };
        let e = structural_energy(&onehot_probs(&labels, 2), &img, &cfg).unwrap();
        // two pixels: per-pixel normalisation halves the pair energy
        assert!((e.value * 2.0 - 2.0).abs() < 1e-12);
        assert_eq!(pair_energy(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn misaligned_image_is_rejected() {
        let p = ProbMaps::new(Array3::from_elem((2, 3, 3), 0.5)).unwrap();
        assert!(structural_energy(&p, &Array3::zeros((3, 2, 3)), &PairwiseKernelConfig::default()).is_err());
    }

    #[test]
    fn zero_lambda_reduces_to_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ProbMaps::new(Array3::from_elem((3, 4, 4), 1.0 / 3.0)).unwrap();
        let b = HardLabelMap {
            labels: Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..3u8)),
            channels: 3,
        };
        let img = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.0..255.0));
        let cfg = DistillConfig {
            lambda_str: 0.0,
            ..Default::default()
        };
        let a = loss_st_to_s(&p, &b, &[1, 2], &img, &cfg).unwrap();
        let c = masked_hard_ce(&p, &b, &ReliabilityMask::all(4, 4), &[1, 2]).unwrap();
        assert_eq!(a, c);
    }
}

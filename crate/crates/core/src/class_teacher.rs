//! Classification branch: pooled multi-label classifier, class activation
//! maps and the two-threshold pseudo labels derived from them.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::backbone::{backbone_forward, Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, slice_of, slice_of_mut, Module};
use crate::resample;
use crate::seg_head::ProbMaps;

/// Label value for pixels that carry no pseudo label.
pub const UNLABELED: u8 = 255;

const LOG_EPS: f64 = 1e-7;

/// Fully connected head over globally pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead {
    /// `(C, C_f)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassHead {
    pub fn new(num_classes: usize, feature_channels: usize) -> Self {
        Self {
            weight: Array2::zeros((num_classes, feature_channels)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.weight.ncols() as f64).sqrt();
        self.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
        self.bias.fill(0.0);
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.weight.nrows(), self.weight.ncols())
    }

    /// Accumulates parameter gradients for one image given `dL/dŷ` and
    /// returns `dL/dF`.
    pub fn backward(
        &self,
        features: &Array3<f64>,
        scores: &ClassScores,
        d_scores: &[f64],
        grads: &mut ClassHead,
    ) -> Array3<f64> {
        let (cf, h, w) = features.dim();
        let pooled = global_average_pool(features);
        let d_logits: Array1<f64> = scores
            .0
            .iter()
            .zip(d_scores)
            .map(|(&y, &d)| d * y * (1.0 - y))
            .collect();
        for (c, &dl) in d_logits.iter().enumerate() {
            grads.bias[c] += dl;
            for k in 0..cf {
                grads.weight[[c, k]] += dl * pooled[k];
            }
        }
        let d_pooled = self.weight.t().dot(&d_logits);
        let area = (h * w) as f64;
        let mut df = Array3::zeros((cf, h, w));
        for (k, mut plane) in df.outer_iter_mut().enumerate() {
            plane.fill(d_pooled[k] / area);
        }
        df
    }
}

impl Module for ClassHead {
    fn params(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.weight), slice_of(&self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_of_mut(&mut self.weight), slice_of_mut(&mut self.bias)]
    }
}

/// Per-class probabilities in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

/// Per-class heat maps, each min-max normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMapStack {
    /// `(C, h, w)`
    pub maps: Array3<f64>,
}

/// One label per pixel over `C + 1` channels (0 is background), or
/// [`UNLABELED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardLabelMap {
    pub labels: Array2<u8>,
    pub channels: usize,
}

impl HardLabelMap {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// `(C + 1, h, w)` indicator tensor; unlabeled pixels are all zero.
    pub fn onehot(&self) -> Array3<f64> {
        let (h, w) = self.labels.dim();
        let mut out = Array3::zeros((self.channels, h, w));
        for ((y, x), &l) in self.labels.indexed_iter() {
            if (l as usize) < self.channels {
                out[[l as usize, y, x]] = 1.0;
            }
        }
        out
    }

    /// The one-hot map viewed as probabilities (unlabeled pixels become
    /// background).
    pub fn to_probs(&self) -> ProbMaps {
        let mut p = self.onehot();
        for ((y, x), &l) in self.labels.indexed_iter() {
            if l == UNLABELED {
                p[[0, y, x]] = 1.0;
            }
        }
        ProbMaps::new_unchecked(p)
    }
}

/// Per-pixel trust flags for a [`HardLabelMap`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReliabilityMask {
    pub r: Array2<bool>,
}

impl ReliabilityMask {
    pub fn all(h: usize, w: usize) -> Self {
        Self {
            r: Array2::from_elem((h, w), true),
        }
    }

    pub fn count(&self) -> usize {
        self.r.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamThresholds {
    /// Minimum normalised activation to claim a foreground label.
    pub fg: f64,
    /// Maximum normalised activation for a confident background label.
    pub bg: f64,
}

impl Default for CamThresholds {
    fn default() -> Self {
        Self { fg: 0.30, bg: 0.05 }
    }
}

pub fn global_average_pool(f: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = f.dim();
    f.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

fn check_channels(f: &Array3<f64>, head: &ClassHead) -> Result<()> {
    if f.dim().0 != head.weight.ncols() {
        return Err(Error::Shape(format!(
            "class head expects {} feature channels, got {}",
            head.weight.ncols(),
            f.dim().0
        )));
    }
    Ok(())
}

/// `ŷ = sigmoid(W · GAP(F) + b)`, independently per class.
pub fn class_forward(features: &FeatureMap, head: &ClassHead) -> Result<ClassScores> {
    class_forward_raw(&features.values, head)
}

pub fn class_forward_raw(f: &Array3<f64>, head: &ClassHead) -> Result<ClassScores> {
    check_channels(f, head)?;
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("class head input".into()));
    }
    let logits = head.weight.dot(&global_average_pool(f)) + &head.bias;
    Ok(ClassScores(logits.iter().map(|&z| sigmoid(z)).collect()))
}

/// Multi-label binary cross-entropy summed over classes; scores are clamped
/// to `[1e-7, 1 - 1e-7]` before taking logs.
pub fn classification_loss(scores: &ClassScores, tags: &[bool]) -> f64 {
    scores
        .0
        .iter()
        .zip(tags)
        .map(|(&p, &y)| {
            let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// `dL/dŷ` of [`classification_loss`] taken without the clamp, so that
/// through the sigmoid it stays `ŷ - y` for saturated scores.
pub fn classification_loss_grad(scores: &ClassScores, tags: &[bool]) -> Vec<f64> {
    scores
        .0
        .iter()
        .zip(tags)
        .map(|(&p, &y)| {
            if y {
                -1.0 / p.max(f64::MIN_POSITIVE)
            } else {
                1.0 / (1.0 - p).max(f64::MIN_POSITIVE)
            }
        })
        .collect()
}

/// Rectify then min-max normalise a single map; constant maps become zero.
fn normalize_map(mut m: ndarray::ArrayViewMut2<f64>) {
    m.mapv_inplace(|v| v.max(0.0));
    let (lo, hi) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range > 1e-12 * hi.abs().max(1.0) {
        m.mapv_inplace(|v| (v - lo) / range);
    } else {
        m.fill(0.0);
    }
}

/// Class activation maps `H_c = Σ_k w_ck F_k`, rectified and normalised.
/// Classes not in `present_classes` (1-based) are zero.
pub fn compute_cams(features: &FeatureMap, head: &ClassHead, present_classes: &[usize]) -> Result<HeatMapStack> {
    compute_cams_raw(&features.values, head, present_classes)
}

pub fn compute_cams_raw(f: &Array3<f64>, head: &ClassHead, present_classes: &[usize]) -> Result<HeatMapStack> {
    check_channels(f, head)?;
    let (cf, h, w) = f.dim();
    let flat = f.view().into_shape_with_order((cf, h * w)).map_err(|e| Error::Shape(e.to_string()))?;
    let raw = head.weight.dot(&flat);
    let c = head.num_classes();
    let mut maps = raw
        .into_shape_with_order((c, h, w))
        .map_err(|e| Error::Shape(e.to_string()))?;
    for (k, plane) in maps.outer_iter_mut().enumerate() {
        let mut plane = plane;
        if present_classes.contains(&(k + 1)) {
            normalize_map(plane);
        } else {
            plane.fill(0.0);
        }
    }
    Ok(HeatMapStack { maps })
}

/// CAMs averaged over rescaled (and optionally mirrored) copies of `input`
/// and renormalised, at the feature resolution of the unscaled input.
pub fn multiscale_cams(
    input: &Array3<f64>,
    backbone: &Backbone,
    head: &ClassHead,
    present_classes: &[usize],
    scales: &[f64],
    flip: bool,
) -> Result<HeatMapStack> {
    if scales.is_empty() {
        return Err(Error::Invalid("multiscale_cams needs at least one scale".into()));
    }
    let (_, h, w) = input.dim();
    let s = backbone.stride();
    let (bh, bw) = (h.div_ceil(s), w.div_ceil(s));
    let mut acc = Array3::<f64>::zeros((head.num_classes(), bh, bw));
    let mut views = 0usize;
    for &scale in scales {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = resample::resize_bilinear(input, sh, sw);
        let mut variants = vec![(scaled.clone(), false)];
        if flip {
            variants.push((resample::flip_horizontal(&scaled), true));
        }
        for (img, flipped) in variants {
            let f = backbone_forward(&img, backbone)?;
            let mut cams = compute_cams(&f, head, present_classes)?.maps;
            if flipped {
                cams = resample::flip_horizontal(&cams);
            }
            acc += &resample::resize_bilinear(&cams, bh, bw);
            views += 1;
        }
    }
    acc /= views as f64;
    for (k, plane) in acc.outer_iter_mut().enumerate() {
        if present_classes.contains(&(k + 1)) {
            normalize_map(plane);
        }
    }
    Ok(HeatMapStack { maps: acc })
}

/// Two-threshold rule over tagged classes: confident foreground takes the
/// argmax class, confident background takes 0, the dead zone is unreliable.
pub fn cams_to_pseudolabels(
    cams: &HeatMapStack,
    tags: &[bool],
    thresholds: CamThresholds,
) -> (HardLabelMap, ReliabilityMask) {
    let (c, h, w) = cams.maps.dim();
    let mut labels = Array2::from_elem((h, w), UNLABELED);
    let mut r = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = 0.0;
            for k in 0..c {
                if tags.get(k).copied().unwrap_or(false) {
                    let v = cams.maps[[k, y, x]];
                    if best == 0 || v > best_v {
                        best = k + 1;
                        best_v = v;
                    }
                }
            }
            if best != 0 && best_v >= thresholds.fg {
                labels[[y, x]] = best as u8;
                r[[y, x]] = true;
            } else if best == 0 || best_v <= thresholds.bg {
                labels[[y, x]] = 0;
                r[[y, x]] = true;
            }
        }
    }
    (HardLabelMap { labels, channels: c + 1 }, ReliabilityMask { r })
}

/// CAMs as per-pixel distributions: tagged classes keep their activation,
/// background gets `1 - max_c H_c`, then each pixel is renormalised.
pub fn cam_to_probmaps(cams: &HeatMapStack, tags: &[bool]) -> ProbMaps {
    let (c, h, w) = cams.maps.dim();
    let mut p = Array3::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mx: f64 = 0.0;
            for k in 0..c {
                if tags.get(k).copied().unwrap_or(false) {
                    let v = cams.maps[[k, y, x]].clamp(0.0, 1.0);
                    p[[k + 1, y, x]] = v;
                    mx = mx.max(v);
                }
            }
            p[[0, y, x]] = 1.0 - mx;
            let z: f64 = (0..=c).map(|k| p[[k, y, x]]).sum();
            for k in 0..=c {
                p[[k, y, x]] /= z;
            }
        }
    }
    ProbMaps::new_unchecked(p)
}

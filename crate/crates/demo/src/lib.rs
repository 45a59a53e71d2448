//! Browser demo: the teacher-selection signal, synthetic scenes and dense
//! CRF refinement of noisy label maps.

use dualteach::crf::{crf_refine, harden, CrfParams};
use dualteach::eval::{miou, ConfusionMatrix};
use dualteach::nn::softmax_channels;
use dualteach::synthdata::{generate_shapes_dataset, ImageSample};
use dualteach::{PwmSchedule, ProbMaps, Teacher};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Dense CRF cost grows with the square of the pixel count.
pub const MAX_SIDE: u32 = 48;

const PALETTE: [[u8; 3]; 6] = [
    [30, 30, 36],
    [230, 80, 70],
    [80, 190, 110],
    [70, 130, 230],
    [240, 200, 60],
    [190, 90, 210],
];

/// One entry per step: 1 while the class-teacher supervises, 0 otherwise.
pub fn schedule_signal(period: u32, tau: f64, steps: u32) -> dualteach::Result<Vec<u8>> {
    let s = PwmSchedule::new(period as u64, tau)?;
    Ok((0..steps as u64)
        .map(|t| (s.select_teacher(t) == Teacher::ClassTeacher) as u8)
        .collect())
}

pub fn scene(seed: u32, classes: u32, size: u32) -> dualteach::Result<ImageSample> {
    if size > MAX_SIDE {
        return Err(dualteach::Error::config("size", format!("at most {MAX_SIDE} pixels in the demo")));
    }
    let mut ds = generate_shapes_dataset(1, classes as usize, size as usize, seed as u64)?;
    Ok(ds.samples.remove(0))
}

pub fn image_rgba(image: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = image.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

pub fn labels_rgba(labels: &Array2<u8>) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = PALETTE.get(l as usize).copied().unwrap_or([255, 255, 255]);
            [r, g, b, 255]
        })
        .collect()
}

/// Ground truth corrupted into soft scores: the true label gets `margin`,
/// every channel gets uniform noise of amplitude `noise`, absent classes
/// are dropped.
pub fn noisy_probs(sample: &ImageSample, noise: f64, seed: u32) -> ProbMaps {
    let gt = sample.gt_mask.as_ref().expect("generated samples carry masks");
    let c = sample.tags.len() + 1;
    let (h, w) = gt.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0xdead_beef);
    let logits = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let hit = if gt[[y, x]] as usize == k { 1.0 } else { 0.0 };
        hit + noise * rng.gen_range(-1.0..1.0)
    });
    ProbMaps::new_unchecked(softmax_channels(&(logits * 4.0))).restrict_to_tags(&sample.tags)
}

pub struct Refinement {
    pub before: Array2<u8>,
    pub after: Array2<u8>,
    pub miou_before: f64,
    pub miou_after: f64,
}

pub fn refine(sample: &ImageSample, probs: &ProbMaps, params: &CrfParams) -> dualteach::Result<Refinement> {
    let gt = sample.gt_mask.as_ref().expect("generated samples carry masks");
    let refined = crf_refine(probs, &sample.image.mapv(|v| v * 255.0), params)?;
    let before = harden(probs).labels;
    let after = harden(&refined).labels;
    let score = |pred: &Array2<u8>| -> dualteach::Result<f64> {
        let mut cm = ConfusionMatrix::new(probs.channels());
        cm.accumulate(pred, gt)?;
        Ok(miou(&cm)?.miou)
    };
    Ok(Refinement {
        miou_before: score(&before)?,
        miou_after: score(&after)?,
        before,
        after,
    })
}

fn js(e: dualteach::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Teacher signal for the first `steps` iterations.
#[wasm_bindgen(js_name = pwmSignal)]
pub fn pwm_signal(period: u32, tau: f64, steps: u32) -> Result<Vec<u8>, JsError> {
    schedule_signal(period, tau, steps).map_err(js)
}

#[wasm_bindgen]
pub struct Scene {
    size: u32,
    image: Vec<u8>,
    mask: Vec<u8>,
    tags: Vec<u8>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> u32 {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// One byte per foreground class.
    #[wasm_bindgen(getter)]
    pub fn tags(&self) -> Vec<u8> {
        self.tags.clone()
    }
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene(seed: u32, classes: u32, size: u32) -> Result<Scene, JsError> {
    let s = scene(seed, classes, size).map_err(js)?;
    Ok(Scene {
        size,
        image: image_rgba(&s.image),
        mask: labels_rgba(s.gt_mask.as_ref().expect("generated samples carry masks")),
        tags: s.tags.iter().map(|&t| t as u8).collect(),
    })
}

#[wasm_bindgen]
pub struct CrfResult {
    before: Vec<u8>,
    after: Vec<u8>,
    pub miou_before: f64,
    pub miou_after: f64,
}

#[wasm_bindgen]
impl CrfResult {
    #[wasm_bindgen(getter)]
    pub fn before(&self) -> Vec<u8> {
        self.before.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn after(&self) -> Vec<u8> {
        self.after.clone()
    }
}

/// Corrupts the scene's ground truth and cleans it with the dense CRF.
#[wasm_bindgen(js_name = refineScene)]
#[allow(clippy::too_many_arguments)]
pub fn refine_scene(
    seed: u32,
    classes: u32,
    size: u32,
    noise: f64,
    n_iters: u32,
    w_appearance: f64,
    w_smoothness: f64,
) -> Result<CrfResult, JsError> {
    let s = scene(seed, classes, size).map_err(js)?;
    let params = CrfParams {
        n_iters: n_iters as usize,
        w_appearance,
        w_smoothness,
        ..CrfParams::default()
    };
    let r = refine(&s, &noisy_probs(&s, noise, seed), &params).map_err(js)?;
    Ok(CrfResult {
        before: labels_rgba(&r.before),
        after: labels_rgba(&r.after),
        miou_before: r.miou_before,
        miou_after: r.miou_after,
    })
}

//! Randomised property checks shared by the unit-level suites and the
//! acceptance runner. Each returns a one-line summary or the first failure.

use super::{numeric_grad, oracles, rel_error, softmax};
use dualteach::backbone::FeatureMap;
use dualteach::class_teacher::{
    class_forward, classification_loss, classification_loss_grad, compute_cams_raw, ClassHead,
};
use dualteach::crf::{crf_refine, CrfParams, DenseCrf};
use dualteach::eval::{miou, ConfusionMatrix};
use dualteach::losses::{masked_hard_ce, structural_energy, PairwiseKernelConfig};
use dualteach::nn::Module;
use dualteach::pipeline::fuse_max;
use dualteach::seg_head::{seg_forward, SegHead, SegHeadConfig};
use dualteach::{HardLabelMap, ProbMaps, PwmSchedule, ReliabilityMask, Teacher, IGNORE, UNLABELED};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;
pub const ENERGY_ORACLE_TOL: f64 = 1e-8;
pub const CRF_ORACLE_TOL: f64 = 1e-6;
pub const SIMPLEX_TOL: f64 = 1e-6;
pub const GRAD_INSTANCES: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_probs(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMaps {
    ProbMaps::new(softmax(&Array3::from_shape_fn((c, h, w), |_| r.gen_range(-2.0..2.0)))).unwrap()
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((3, h, w), |_| r.gen_range(0.0..255.0))
}

fn flat(a: &Array3<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn worst(errors: &[f64]) -> f64 {
    errors.iter().cloned().fold(0.0, f64::max)
}

// --- schedule ---------------------------------------------------------------

pub fn pwm_exactness() -> Check {
    let sched = PwmSchedule::new(150, 5.0).map_err(|e| e.to_string())?;
    let mut high = 0u64;
    for t in 0..150 * 10 {
        let expected = if t % 150 < 30 {
            Teacher::ClassTeacher
        } else {
            Teacher::SegTeacher
        };
        let got = dualteach::select_teacher(t, &sched);
        if got != expected {
            return Err(format!("step {t}: {got:?}, expected {expected:?}"));
        }
        high += (got == Teacher::ClassTeacher) as u64;
    }
    let duty = high as f64 / 1500.0;
    if duty != 1.0 / 5.0 {
        return Err(format!("duty cycle {duty}, expected exactly 0.2"));
    }
    Ok(format!("1500 steps exact, duty cycle {duty}"))
}

// --- gradients --------------------------------------------------------------

pub fn grad_masked_hard_ce(instances: u64) -> Check {
    let mut errs = Vec::new();
    for seed in 0..instances {
        let mut r = rng(seed);
        let (c, h, w) = (3, 4, 5);
        let p = random_probs(&mut r, c, h, w);
        let labels = HardLabelMap {
            labels: Array2::from_shape_fn((h, w), |_| {
                if r.gen_bool(0.1) {
                    UNLABELED
                } else {
                    r.gen_range(0..c) as u8
                }
            }),
            channels: c,
        };
        let rel = ReliabilityMask {
            r: Array2::from_shape_fn((h, w), |_| r.gen_bool(0.7)),
        };
        let present = if seed % 2 == 0 { vec![1, 2] } else { vec![2] };
        let analytic = masked_hard_ce(&p, &labels, &rel, &present).map_err(|e| e.to_string())?;
        let num = numeric_grad(&flat(&p.p), 1e-6, |v| {
            let q = ProbMaps::new_unchecked(Array3::from_shape_vec((c, h, w), v.to_vec()).unwrap());
            masked_hard_ce(&q, &labels, &rel, &present).unwrap().value
        });
        errs.push(rel_error(&flat(&analytic.grad), &num));
    }
    summarise("masked cross-entropy", &errs, GRAD_TOL)
}

pub fn grad_structural_energy(instances: u64) -> Check {
    let mut errs = Vec::new();
    for seed in 0..instances {
        let mut r = rng(100 + seed);
        let (c, h, w) = (3, 5, 6);
        let p = random_probs(&mut r, c, h, w);
        let img = random_image(&mut r, h, w);
        let cfg = PairwiseKernelConfig {
            sigma_d: r.gen_range(1.0..4.0),
            sigma_i: r.gen_range(30.0..120.0),
            radius: r.gen_range(1..4),
            pixel_spacing: [1.0, 2.0, 4.0][seed as usize % 3],
        };
        let analytic = structural_energy(&p, &img, &cfg).map_err(|e| e.to_string())?;
        let num = numeric_grad(&flat(&p.p), 1e-6, |v| {
            let q = ProbMaps::new_unchecked(Array3::from_shape_vec((c, h, w), v.to_vec()).unwrap());
            structural_energy(&q, &img, &cfg).unwrap().value
        });
        errs.push(rel_error(&flat(&analytic.grad), &num));
    }
    summarise("structural energy", &errs, GRAD_TOL)
}

fn set_flat<M: Module>(m: &mut M, values: &[f64]) {
    let mut off = 0;
    for s in m.params_mut() {
        let n = s.len();
        s.copy_from_slice(&values[off..off + n]);
        off += n;
    }
}

/// Gradient of the tag cross-entropy through the classification head, with
/// respect to its parameters and its input features.
pub fn grad_class_forward(instances: u64) -> Check {
    let mut errs = Vec::new();
    for seed in 0..instances {
        let mut r = rng(200 + seed);
        let (classes, cf, h, w) = (3, 5, 3, 4);
        let mut head = ClassHead::new(classes, cf);
        head.init(&mut r);
        let feats = Array3::from_shape_fn((cf, h, w), |_| r.gen_range(0.0..2.0));
        let tags: Vec<bool> = (0..classes).map(|_| r.gen_bool(0.5)).collect();
        let fm = |v: Array3<f64>| FeatureMap { values: v, stride: 1 };
        let loss = |head: &ClassHead, f: &Array3<f64>| {
            classification_loss(&class_forward(&fm(f.clone()), head).unwrap(), &tags)
        };
        let scores = class_forward(&fm(feats.clone()), &head).map_err(|e| e.to_string())?;
        let mut grads = head.zeros_like();
        let df = head.backward(&feats, &scores, &classification_loss_grad(&scores, &tags), &mut grads);
        let theta = head.params().concat();
        let mut probe = head.clone();
        let num = numeric_grad(&theta, 1e-6, |t| {
            set_flat(&mut probe, t);
            loss(&probe, &feats)
        });
        errs.push(rel_error(&grads.params().concat(), &num));
        let num_f = numeric_grad(&flat(&feats), 1e-6, |v| {
            loss(&head, &Array3::from_shape_vec(feats.raw_dim(), v.to_vec()).unwrap())
        });
        errs.push(rel_error(&flat(&df), &num_f));
    }
    summarise("classification head", &errs, GRAD_TOL)
}

/// Gradient of a random linear functional of the segmentation output, with
/// respect to head parameters and input features.
pub fn grad_seg_forward(instances: u64) -> Check {
    let mut errs = Vec::new();
    for seed in 0..instances {
        let mut r = rng(300 + seed);
        let (cf, classes, h, w) = (4, 2, 5, 5);
        let cfg = SegHeadConfig {
            hidden: 3,
            dilation: 1 + seed as usize % 2,
        };
        let mut head = SegHead::new(cf, classes, &cfg);
        head.init(&mut r);
        // keep pre-activations away from the rectifier kink
        let theta: Vec<f64> = head.params().concat().iter().map(|v| v + r.gen_range(-0.2..0.2)).collect();
        set_flat(&mut head, &theta);
        let feats = Array3::from_shape_fn((cf, h, w), |_| r.gen_range(-1.0..1.0));
        let weights = Array3::from_shape_fn((classes + 1, h, w), |_| r.gen_range(-1.0..1.0));
        let loss = |head: &SegHead, f: &Array3<f64>| {
            let p = seg_forward(&FeatureMap { values: f.clone(), stride: 1 }, head).unwrap();
            (&p.p * &weights).sum()
        };
        let x4: Array4<f64> = feats.clone().insert_axis(Axis(0));
        let (_, cache) = head.forward(&x4).map_err(|e| e.to_string())?;
        let mut grads = head.zeros_like();
        let df = head.backward(&cache, std::slice::from_ref(&weights), &mut grads);
        let mut probe = head.clone();
        let num = numeric_grad(&theta, 1e-6, |t| {
            set_flat(&mut probe, t);
            loss(&probe, &feats)
        });
        errs.push(rel_error(&grads.params().concat(), &num));
        let num_f = numeric_grad(&flat(&feats), 1e-6, |v| {
            loss(&head, &Array3::from_shape_vec(feats.raw_dim(), v.to_vec()).unwrap())
        });
        errs.push(rel_error(&df.iter().copied().collect::<Vec<_>>(), &num_f));
    }
    summarise("segmentation head", &errs, GRAD_TOL)
}

fn summarise(what: &str, errs: &[f64], tol: f64) -> Check {
    let w = worst(errs);
    if w < tol && w.is_finite() {
        Ok(format!("{what}: worst relative error {w:.2e} over {} checks", errs.len()))
    } else {
        Err(format!("{what}: worst relative error {w:.2e} exceeds {tol:.0e}"))
    }
}

// --- oracles ----------------------------------------------------------------

pub fn oracle_structural_energy(instances: u64) -> Check {
    let mut worst_err: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(400 + seed);
        let (c, h, w) = (r.gen_range(2..5), r.gen_range(3..9), r.gen_range(3..9));
        let p = random_probs(&mut r, c, h, w);
        let img = random_image(&mut r, h, w);
        let cfg = PairwiseKernelConfig {
            sigma_d: r.gen_range(1.0..20.0),
            sigma_i: r.gen_range(10.0..150.0),
            radius: r.gen_range(1..6),
            pixel_spacing: r.gen_range(0.5..4.0),
        };
        let fast = structural_energy(&p, &img, &cfg).map_err(|e| e.to_string())?.value;
        let slow = oracles::structural_energy(&p.p, &img, &cfg);
        worst_err = worst_err.max((fast - slow).abs());
    }
    if worst_err <= ENERGY_ORACLE_TOL {
        Ok(format!("structural energy: max deviation {worst_err:.1e}"))
    } else {
        Err(format!("structural energy deviates by {worst_err:.2e}"))
    }
}

pub fn random_crf_params(r: &mut ChaCha8Rng) -> CrfParams {
    CrfParams {
        n_iters: r.gen_range(1..8),
        w_appearance: r.gen_range(0.5..5.0),
        w_smoothness: r.gen_range(0.5..4.0),
        theta_alpha: r.gen_range(2.0..20.0),
        theta_beta: r.gen_range(5.0..40.0),
        theta_gamma: r.gen_range(0.5..3.0),
        compat: r.gen_range(0.2..1.5),
        pixel_spacing: 1.0,
    }
}

pub fn oracle_crf(instances: u64) -> Check {
    let mut worst_err: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(500 + seed);
        let p = random_probs(&mut r, 2, 8, 8);
        let img = random_image(&mut r, 8, 8);
        let params = random_crf_params(&mut r);
        let fast = crf_refine(&p, &img, &params).map_err(|e| e.to_string())?;
        let slow = oracles::dense_crf(&p.p, &img, &params);
        let dev = (&fast.p - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst_err = worst_err.max(dev);
    }
    if worst_err <= CRF_ORACLE_TOL {
        Ok(format!("dense CRF 8x8x2: max deviation {worst_err:.1e}"))
    } else {
        Err(format!("dense CRF deviates by {worst_err:.2e}"))
    }
}

pub fn oracle_miou(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(600 + seed);
        let classes = r.gen_range(2..5);
        let n_images = r.gen_range(1..4);
        let gen = |r: &mut ChaCha8Rng, allow_ignore: bool| {
            Array2::from_shape_fn((4, 4), |_| {
                if allow_ignore && r.gen_bool(0.15) {
                    IGNORE
                } else {
                    r.gen_range(0..classes) as u8
                }
            })
        };
        let preds: Vec<_> = (0..n_images).map(|_| gen(&mut r, false)).collect();
        let gts: Vec<_> = (0..n_images).map(|_| gen(&mut r, true)).collect();
        let mut cm = ConfusionMatrix::new(classes);
        for (p, g) in preds.iter().zip(&gts) {
            cm.accumulate(p, g).map_err(|e| e.to_string())?;
        }
        let Ok(report) = miou(&cm) else {
            continue; // every ground-truth pixel ignored
        };
        let expected = oracles::miou(&preds, &gts, classes, IGNORE);
        if report.miou != expected {
            return Err(format!("seed {seed}: mIoU {} vs counted {expected}", report.miou));
        }
    }
    Ok(format!("mIoU equals pixel counting on {instances} random 4x4 sets"))
}

// --- identities and invariances ---------------------------------------------

pub fn crf_zero_pairwise_identity(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(700 + seed);
        let p = random_probs(&mut r, 3, 6, 7);
        let img = random_image(&mut r, 6, 7);
        let mut params = random_crf_params(&mut r);
        params.w_appearance = 0.0;
        params.w_smoothness = 0.0;
        let out = crf_refine(&p, &img, &params).map_err(|e| e.to_string())?;
        if out != p {
            return Err(format!("seed {seed}: zero-pairwise CRF changed its input"));
        }
    }
    Ok("zero-pairwise CRF returns its input".into())
}

pub fn simplex_preserved(instances: u64) -> Check {
    let mut worst_dev: f64 = 0.0;
    let mut track = |q: &ProbMaps| {
        for s in q.p.sum_axis(Axis(0)).iter() {
            worst_dev = worst_dev.max((s - 1.0).abs());
        }
        if q.p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            worst_dev = f64::INFINITY;
        }
    };
    for seed in 0..instances {
        let mut r = rng(800 + seed);
        let p = random_probs(&mut r, 3, 8, 8);
        let img = random_image(&mut r, 8, 8);
        let params = random_crf_params(&mut r);
        let crf = DenseCrf::new(&img, &params).map_err(|e| e.to_string())?;
        crf.refine_with(&p, |_, q| track(q)).map_err(|e| e.to_string())?;

        let mut head = SegHead::new(4, 3, &SegHeadConfig { hidden: 5, dilation: 2 });
        head.init(&mut r);
        let f = Array3::from_shape_fn((4, 6, 6), |_| r.gen_range(-30.0..30.0));
        track(&seg_forward(&FeatureMap { values: f, stride: 1 }, &head).map_err(|e| e.to_string())?);
    }
    if worst_dev <= SIMPLEX_TOL {
        Ok(format!("simplex kept by mean-field steps and seg heads, max deviation {worst_dev:.1e}"))
    } else {
        Err(format!("simplex deviation {worst_dev:.2e}"))
    }
}

fn argmax_map(p: &Array3<f64>) -> Array2<usize> {
    let (c, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).fold(0, |best, k| if p[[k, y, x]] > p[[best, y, x]] { k } else { best })
    })
}

pub fn fusion_symmetry(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(900 + seed);
        let a = random_probs(&mut r, 4, 5, 5);
        let b = random_probs(&mut r, 4, 5, 5);
        let ab = fuse_max(&a, &b).map_err(|e| e.to_string())?;
        if ab != fuse_max(&b, &a).map_err(|e| e.to_string())? {
            return Err(format!("seed {seed}: max fusion is not commutative"));
        }
        let mut raw = a.p.clone();
        raw.zip_mut_with(&b.p, |x, &y| *x = x.max(y));
        if argmax_map(&raw) != argmax_map(&ab.p) {
            return Err(format!("seed {seed}: renormalisation moved the argmax"));
        }
        if fuse_max(&a, &a).map_err(|e| e.to_string())?.p.iter().zip(a.p.iter()).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(format!("seed {seed}: fusing a map with itself changed it"));
        }
    }
    Ok("max fusion commutative, idempotent, argmax-preserving".into())
}

pub fn cam_scale_invariance(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let mut head = ClassHead::new(3, 6);
        head.init(&mut r);
        let f = Array3::from_shape_fn((6, 5, 7), |_| r.gen_range(0.0..3.0));
        let present = [1, 3];
        let base = compute_cams_raw(&f, &head, &present).map_err(|e| e.to_string())?;
        let alpha = r.gen_range(0.01..100.0);
        let mut scaled = head.clone();
        scaled.weight.mapv_inplace(|v| v * alpha);
        let other = compute_cams_raw(&f, &scaled, &present).map_err(|e| e.to_string())?;
        let dev = (&base.maps - &other.maps).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > 1e-10 {
            return Err(format!("seed {seed}: CAMs moved by {dev:.2e} under scale {alpha}"));
        }
    }
    Ok("CAMs unchanged by positive weight scaling".into())
}

pub fn unreliable_pixels_ignored(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(1100 + seed);
        let (c, h, w) = (3, 5, 5);
        let p = random_probs(&mut r, c, h, w);
        let labels = HardLabelMap {
            labels: Array2::from_shape_fn((h, w), |_| r.gen_range(0..c) as u8),
            channels: c,
        };
        let rel = ReliabilityMask {
            r: Array2::from_shape_fn((h, w), |_| r.gen_bool(0.5)),
        };
        let base = masked_hard_ce(&p, &labels, &rel, &[1, 2]).map_err(|e| e.to_string())?.value;
        let other_p = random_probs(&mut r, c, h, w);
        let mut mixed = p.p.clone();
        let mut other_labels = labels.clone();
        for ((y, x), &keep) in rel.r.indexed_iter() {
            if !keep {
                for k in 0..c {
                    mixed[[k, y, x]] = other_p.p[[k, y, x]];
                }
                other_labels.labels[[y, x]] = r.gen_range(0..c) as u8;
            }
        }
        let moved = masked_hard_ce(&ProbMaps::new_unchecked(mixed), &other_labels, &rel, &[1, 2])
            .map_err(|e| e.to_string())?
            .value;
        if moved != base {
            return Err(format!("seed {seed}: loss changed from {base} to {moved}"));
        }
    }
    Ok("masked loss blind to unreliable pixels".into())
}

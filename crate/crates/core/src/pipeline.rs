//! Joint stage-one training of the class-teacher, seg-teacher and student
//! over a shared backbone, pseudo-mask generation, stage-two retraining and
//! the ablation and sweep drivers.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, Backbone, FeatureMap};
use crate::class_teacher::{
    cam_to_probmaps, cams_to_pseudolabels, class_forward_raw, classification_loss, classification_loss_grad,
    compute_cams_raw, ClassHead, HardLabelMap, ReliabilityMask,
};
use crate::config::RunConfig;
use crate::crf::{harden, DenseCrf};
use crate::error::{Error, Result};
use crate::eval::{miou, ConfusionMatrix, IouReport};
use crate::losses::{loss_ct_to_s, loss_ct_to_st, loss_st_to_s, masked_hard_ce, LossValue};
use crate::nn::{BnStats, Module, NormMode};
use crate::pwm::{PwmSchedule, Teacher};
use crate::resample::{downsample_area, resize_bilinear, resize_nearest};
use crate::seg_head::{seg_forward, ProbMaps, SegHead};
use crate::synthdata::{
    augment, batch_indices, normalize, save_index_png, AugmentedSample, DatasetManifest, ImageSample,
    ManifestRecord, IGNORE,
};

/// Distillation strategy for the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Class-teacher labels only; no seg-teacher.
    I,
    /// Seg-teacher labels only.
    II,
    /// CRF-hardened element-wise max of CAM and seg-teacher distributions.
    III,
    /// CRF-hardened mean of CAM and seg-teacher distributions.
    IV,
    /// Alternation between the teachers on the pulse-width schedule.
    V,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [Self::I, Self::II, Self::III, Self::IV, Self::V];

    pub fn uses_seg_teacher(self) -> bool {
        self != Self::I
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
            Self::V => "V",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            "IV" | "4" => Ok(Self::IV),
            "V" | "5" => Ok(Self::V),
            other => Err(format!("unknown mode `{other}`, expected one of I, II, III, IV, V")),
        }
    }
}

/// The three branches and their shared backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub class_head: ClassHead,
    pub seg_teacher: SegHead,
    pub student: SegHead,
}

impl Model {
    /// All-zero parameters with the architecture named by `cfg`.
    pub fn new(cfg: &RunConfig) -> Self {
        let backbone = Backbone::new(cfg.backbone_config());
        let cf = backbone.out_channels();
        let c = cfg.data_classes;
        let seg = cfg.seg_head_config();
        Self {
            class_head: ClassHead::new(c, cf),
            seg_teacher: SegHead::new(cf, c, &seg),
            student: SegHead::new(cf, c, &seg),
            backbone,
        }
    }

    pub fn init(cfg: &RunConfig, seed: u64) -> Self {
        let mut m = Self::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.backbone.init(&mut rng);
        m.class_head.init(&mut rng);
        m.seg_teacher.init(&mut rng);
        m.student.init(&mut rng);
        m
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for s in g.state_mut() {
            s.fill(0.0);
        }
        g
    }

    pub fn num_classes(&self) -> usize {
        self.class_head.num_classes()
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.params();
        v.extend(self.class_head.params());
        v.extend(self.seg_teacher.params());
        v.extend(self.student.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.params_mut();
        v.extend(self.class_head.params_mut());
        v.extend(self.seg_teacher.params_mut());
        v.extend(self.student.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.backbone.buffers()
    }

    fn state_mut(&mut self) -> Vec<&mut [f64]> {
        let n = self.backbone.params().len();
        let mut v = self.backbone.state_mut();
        let buffers = v.split_off(n);
        v.extend(self.class_head.params_mut());
        v.extend(self.seg_teacher.params_mut());
        v.extend(self.student.params_mut());
        v.extend(buffers);
        v
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- m v + g + wd θ`, `θ <- θ - lr v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<M: Module>(&self, params: &mut M, grads: &M, velocity: &mut M) {
        if self.lr == 0.0 {
            // keep the null update exact even with weight decay
            for (v, g) in velocity.params_mut().into_iter().zip(grads.params()) {
                for (v, g) in v.iter_mut().zip(g) {
                    *v = self.momentum * *v + g;
                }
            }
            return;
        }
        for ((p, g), v) in params.params_mut().into_iter().zip(grads.params()).zip(velocity.params_mut()) {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Everything needed to continue a stage-one run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers; only the parameter slices are used.
    pub velocity: Model,
    /// Optimizer steps taken so far.
    pub iter: u64,
    pub config: RunConfig,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config, config.seed);
        Ok(Self {
            velocity: model.zeros_like(),
            model,
            iter: 0,
            config: config.clone(),
        })
    }

    pub fn schedule(&self) -> Result<PwmSchedule> {
        self.config.pwm_schedule()
    }

    pub fn optimizer(&self) -> Sgd {
        Sgd {
            lr: self.config.train_lr,
            momentum: self.config.train_momentum,
            weight_decay: self.config.train_weight_decay,
        }
    }
}

/// Which loss terms contribute gradients; all of them in normal training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepTerms {
    pub classification: bool,
    pub ct_to_st: bool,
    pub student: bool,
}

impl Default for StepTerms {
    fn default() -> Self {
        Self {
            classification: true,
            ct_to_st: true,
            student: true,
        }
    }
}

/// Batch-averaged losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub total: f64,
    pub classification: f64,
    pub ct_to_st: f64,
    pub student: f64,
    /// Which teacher supervised the student (alternating mode only).
    pub teacher: Option<Teacher>,
    /// Images whose masked loss had no contributing pixel.
    pub empty_masks: usize,
}

/// Pseudo-label targets for one image at feature resolution. They are plain
/// label maps and carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub ct_labels: HardLabelMap,
    pub ct_reliability: ReliabilityMask,
    /// Student labels when they do not come from the class-teacher.
    pub student_labels: Option<HardLabelMap>,
}

fn sample_seed(seed: u64, iter: u64, slot: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    rng.set_stream(iter);
    rng.set_word_pos(slot as u128 * 2);
    rng.gen()
}

/// Augments a batch with seeds drawn from `(seed, iter, slot)`.
pub fn prepare_batch(batch: &[ImageSample], cfg: &RunConfig, iter: u64) -> Result<Vec<AugmentedSample>> {
    let aug = cfg.augment_config();
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| augment(s, sample_seed(cfg.seed, iter, i), &aug))
        .collect()
}

/// Colour guide image at feature resolution in 8-bit units.
pub fn guide_image(image: &Array3<f64>, stride: usize) -> Array3<f64> {
    downsample_area(&image.mapv(|v| v * 255.0), stride)
}

/// Element-wise max of two distributions, renormalised per pixel.
pub fn fuse_max(a: &ProbMaps, b: &ProbMaps) -> Result<ProbMaps> {
    check_same(a, b)?;
    let mut p = a.p.clone();
    p.zip_mut_with(&b.p, |x, &y| *x = x.max(y));
    Ok(ProbMaps::new_unchecked(p).renormalized())
}

/// Element-wise mean of two distributions.
pub fn fuse_mean(a: &ProbMaps, b: &ProbMaps) -> Result<ProbMaps> {
    check_same(a, b)?;
    let mut p = a.p.clone();
    p.zip_mut_with(&b.p, |x, &y| *x = 0.5 * (*x + y));
    Ok(ProbMaps::new_unchecked(p).renormalized())
}

fn check_same(a: &ProbMaps, b: &ProbMaps) -> Result<()> {
    if a.p.dim() != b.p.dim() {
        return Err(Error::Shape(format!("fusing {:?} with {:?}", a.p.dim(), b.p.dim())));
    }
    Ok(())
}

fn crf_hard(probs: &ProbMaps, guide: &Array3<f64>, cfg: &RunConfig, spacing: f64) -> Result<HardLabelMap> {
    let crf = DenseCrf::new(guide, &cfg.crf_params(spacing))?;
    Ok(harden(&crf.refine(probs)?))
}

/// Builds the detached targets of one image for the configured mode.
#[allow(clippy::too_many_arguments)]
pub fn build_targets(
    features: &Array3<f64>,
    head: &ClassHead,
    p_st: Option<&ProbMaps>,
    tags: &[bool],
    guide: &Array3<f64>,
    cfg: &RunConfig,
    teacher: Option<Teacher>,
    spacing: f64,
) -> Result<Targets> {
    let present = crate::synthdata::present_from_tags(tags);
    let cams = compute_cams_raw(features, head, &present)?;
    let (ct_labels, ct_reliability) = cams_to_pseudolabels(&cams, tags, cfg.cam_thresholds());
    let seg = || p_st.ok_or_else(|| Error::Invalid("mode needs seg-teacher output".into()));
    let student_labels = match (cfg.train_mode, teacher) {
        (AblationMode::I, _) | (AblationMode::V, Some(Teacher::ClassTeacher)) => None,
        (AblationMode::II, _) | (AblationMode::V, _) => {
            let p = seg()?.clone().restrict_to_tags(tags);
            Some(crf_hard(&p, guide, cfg, spacing)?)
        }
        (AblationMode::III, _) | (AblationMode::IV, _) => {
            let p_ct = cam_to_probmaps(&cams, tags);
            let fused = if cfg.train_mode == AblationMode::III {
                fuse_max(&p_ct, seg()?)?
            } else {
                fuse_mean(&p_ct, seg()?)?
            };
            Some(crf_hard(&fused.restrict_to_tags(tags), guide, cfg, spacing)?)
        }
    };
    Ok(Targets {
        ct_labels,
        ct_reliability,
        student_labels,
    })
}

/// Forward and backward over one augmented batch. Returns parameter
/// gradients (batch-averaged), the loss report and the norm-layer batch
/// statistics.
pub fn compute_gradients(
    model: &Model,
    cfg: &RunConfig,
    iter: u64,
    batch: &[AugmentedSample],
    terms: StepTerms,
) -> Result<(Model, StepReport, Vec<BnStats>)> {
    compute_gradients_with(model, cfg, iter, batch, terms, |_, t| t)
}

/// As [`compute_gradients`], with a hook that may replace each image's
/// targets before the losses are taken.
pub fn compute_gradients_with<F>(
    model: &Model,
    cfg: &RunConfig,
    iter: u64,
    batch: &[AugmentedSample],
    terms: StepTerms,
    mut edit_targets: F,
) -> Result<(Model, StepReport, Vec<BnStats>)>
where
    F: FnMut(usize, Targets) -> Targets,
{
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.len();
    let (_, hc, wc) = batch[0].input.dim();
    let mut x = Array4::zeros((n, 3, hc, wc));
    for (i, s) in batch.iter().enumerate() {
        if s.input.dim() != (3, hc, wc) {
            return Err(Error::Shape(format!("batch image {} has shape {:?}", s.raw.id, s.input.dim())));
        }
        x.index_axis_mut(Axis(0), i).assign(&s.input);
    }
    let (f, bb_cache, stats) = model.backbone.forward(&x, NormMode::Train)?;
    let stride = model.backbone.stride();
    let spacing = stride as f64;
    let distill = cfg.distill_config(spacing);
    let mode = cfg.train_mode;
    let teacher = (mode == AblationMode::V).then(|| cfg.pwm_schedule().map(|s| s.select_teacher(iter))).transpose()?;

    let st = if mode.uses_seg_teacher() {
        Some(model.seg_teacher.forward(&f)?)
    } else {
        None
    };
    let (p_s, s_cache) = model.student.forward(&f)?;
    let channels = model.student.channels();
    let (_, _, fh, fw) = f.dim();
    let zero = Array3::<f64>::zeros((channels, fh, fw));
    let mut d_st = vec![zero.clone(); n];
    let mut d_s = vec![zero; n];
    let mut grads = model.zeros_like();
    let mut d_f = Array4::<f64>::zeros(f.raw_dim());
    let inv_n = 1.0 / n as f64;
    let mut report = StepReport {
        iter,
        total: 0.0,
        classification: 0.0,
        ct_to_st: 0.0,
        student: 0.0,
        teacher,
        empty_masks: 0,
    };

    for (i, s) in batch.iter().enumerate() {
        let tags = &s.raw.tags;
        let present = s.raw.present_classes();
        let fi = f.index_axis(Axis(0), i).to_owned();
        let guide = guide_image(&s.raw.image, stride);

        let scores = class_forward_raw(&fi, &model.class_head)?;
        report.classification += inv_n * classification_loss(&scores, tags);
        if terms.classification {
            let g: Vec<f64> = classification_loss_grad(&scores, tags).iter().map(|g| g * inv_n).collect();
            let dfi = model.class_head.backward(&fi, &scores, &g, &mut grads.class_head);
            let mut slot = d_f.index_axis_mut(Axis(0), i);
            slot += &dfi;
        }

        let p_st = st.as_ref().map(|(p, _)| &p[i]);
        let targets = build_targets(&fi, &model.class_head, p_st, tags, &guide, cfg, teacher, spacing)?;
        let targets = edit_targets(i, targets);

        if let Some(p_st) = p_st {
            let l = loss_ct_to_st(p_st, &targets.ct_labels, &targets.ct_reliability, &present, &guide, &distill)?;
            report.ct_to_st += inv_n * l.value;
            report.empty_masks += l.empty as usize;
            if terms.ct_to_st {
                d_st[i] = l.grad * inv_n;
            }
        }

        let l: LossValue = match &targets.student_labels {
            None => loss_ct_to_s(&p_s[i], &targets.ct_labels, &targets.ct_reliability, &present, &guide, &distill)?,
            Some(b) => loss_st_to_s(&p_s[i], b, &present, &guide, &distill)?,
        };
        report.student += inv_n * l.value;
        report.empty_masks += l.empty as usize;
        if terms.student {
            d_s[i] = l.grad * inv_n;
        }
    }
    report.total = report.classification + report.ct_to_st + report.student;
    if !report.total.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.raw.id.as_str()).collect();
        return Err(Error::Diverged {
            iter,
            batch_ids: ids.join(","),
        });
    }

    if let Some((_, cache)) = &st {
        d_f += &model.seg_teacher.backward(cache, &d_st, &mut grads.seg_teacher);
    }
    d_f += &model.student.backward(&s_cache, &d_s, &mut grads.student);
    model.backbone.backward(&bb_cache, &d_f, &mut grads.backbone);
    if grads.params().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        let ids: Vec<&str> = batch.iter().map(|s| s.raw.id.as_str()).collect();
        return Err(Error::Diverged {
            iter,
            batch_ids: ids.join(","),
        });
    }
    Ok((grads, report, stats))
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[ImageSample]) -> Result<StepReport> {
    let aug = prepare_batch(batch, &state.config, state.iter)?;
    let (grads, report, stats) = compute_gradients(&state.model, &state.config, state.iter, &aug, StepTerms::default())?;
    state.optimizer().step(&mut state.model, &grads, &mut state.velocity);
    state.model.backbone.apply_stats(&stats);
    state.iter += 1;
    Ok(report)
}

/// Total stage-one steps for `n` training images.
pub fn total_steps(cfg: &RunConfig, n: usize) -> u64 {
    if cfg.train_iters > 0 {
        cfg.train_iters
    } else {
        cfg.train_epochs as u64 * n.div_ceil(cfg.train_batch.min(n).max(1)) as u64
    }
}

/// Runs stage one from `state.iter` to the configured length. The batch
/// order is a pure function of `(seed, iter)`, so resuming from a
/// checkpoint continues the same stream.
pub fn train<F: FnMut(&StepReport)>(state: &mut TrainState, samples: &[ImageSample], mut on_step: F) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training images".into()));
    }
    let n = samples.len();
    let batch = state.config.train_batch.min(n);
    let per_epoch = n.div_ceil(batch) as u64;
    let total = total_steps(&state.config, n);
    let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.iter < total {
        let epoch = state.iter / per_epoch;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached = Some((epoch, batch_indices(n, batch, state.config.seed, epoch)));
        }
        let idx = &cached.as_ref().expect("set above").1[(state.iter % per_epoch) as usize];
        let items: Vec<ImageSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let report = train_step(state, &items)?;
        log::debug!(
            "iter {} loss {:.5} (cls {:.4}, ct->st {:.4}, student {:.4})",
            report.iter,
            report.total,
            report.classification,
            report.ct_to_st,
            report.student
        );
        on_step(&report);
    }
    Ok(())
}

/// Seg-branch outputs for one full image at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub seg_teacher: ProbMaps,
    pub student: ProbMaps,
}

pub fn branch_outputs(model: &Model, cfg: &RunConfig, image: &Array3<f64>) -> Result<BranchOutputs> {
    let f: FeatureMap = backbone_forward(&normalize(image, &cfg.augment_config()), &model.backbone)?;
    Ok(BranchOutputs {
        seg_teacher: seg_forward(&f, &model.seg_teacher)?,
        student: seg_forward(&f, &model.student)?,
    })
}

/// Restricts to the image tags, upsamples to image resolution, refines with
/// `crf` when given and hardens.
pub fn finalize_probs(
    probs: &ProbMaps,
    tags: &[bool],
    crf: Option<&DenseCrf>,
    h: usize,
    w: usize,
) -> Result<HardLabelMap> {
    let p = probs.clone().restrict_to_tags(tags);
    let up = ProbMaps::new_unchecked(resize_bilinear(&p.p, h, w)).renormalized();
    Ok(match crf {
        Some(crf) => harden(&crf.refine(&up)?),
        None => harden(&up),
    })
}

fn full_res_crf(sample: &ImageSample, cfg: &RunConfig) -> Result<DenseCrf> {
    DenseCrf::new(&sample.image.mapv(|v| v * 255.0), &cfg.crf_params(1.0))
}

/// Pseudo mask for one training image: fused seg branches, upsampled,
/// CRF-refined and hardened.
pub fn generate_psm(state: &TrainState, sample: &ImageSample) -> Result<HardLabelMap> {
    let out = branch_outputs(&state.model, &state.config, &sample.image)?;
    let fused = fuse_max(&out.seg_teacher, &out.student)?;
    let crf = full_res_crf(sample, &state.config)?;
    finalize_probs(&fused, &sample.tags, Some(&crf), sample.height(), sample.width())
}

/// Validation mIoU of the seg-teacher and the student (tag-restricted
/// argmax, no CRF) and of the pseudo masks built from their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchReport {
    pub seg_teacher: IouReport,
    pub student: IouReport,
    pub fused: IouReport,
}

pub fn evaluate_branches(state: &TrainState, samples: &[ImageSample]) -> Result<BranchReport> {
    Ok(evaluate_branches_with_psms(state, samples)?.0)
}

/// As [`evaluate_branches`], also returning the pseudo mask of every sample.
pub fn evaluate_branches_with_psms(
    state: &TrainState,
    samples: &[ImageSample],
) -> Result<(BranchReport, Vec<HardLabelMap>)> {
    let n = state.model.student.channels();
    let mut cms = [ConfusionMatrix::new(n), ConfusionMatrix::new(n), ConfusionMatrix::new(n)];
    let mut psms = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no ground-truth mask", s.id)))?;
        let out = branch_outputs(&state.model, &state.config, &s.image)?;
        let (h, w) = (s.height(), s.width());
        cms[0].accumulate(&finalize_probs(&out.seg_teacher, &s.tags, None, h, w)?.labels, gt)?;
        cms[1].accumulate(&finalize_probs(&out.student, &s.tags, None, h, w)?.labels, gt)?;
        let fused = fuse_max(&out.seg_teacher, &out.student)?;
        let psm = finalize_probs(&fused, &s.tags, Some(&full_res_crf(s, &state.config)?), h, w)?;
        cms[2].accumulate(&psm.labels, gt)?;
        psms.push(psm);
    }
    let report = BranchReport {
        seg_teacher: miou(&cms[0])?,
        student: miou(&cms[1])?,
        fused: miou(&cms[2])?,
    };
    Ok((report, psms))
}

/// Writes one index PNG per sample plus a manifest whose masks are the
/// pseudo masks.
pub fn export_psms(
    state: &TrainState,
    samples: &[ImageSample],
    source: &DatasetManifest,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mask_dir = out_dir.join("psm");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (s, rec) in samples.iter().zip(&source.records) {
        let psm = generate_psm(state, s)?;
        let rel = Path::new("psm").join(format!("{}.png", s.id));
        save_index_png(&out_dir.join(&rel), &psm.labels)?;
        let image_path = if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            std::path::absolute(source.base_dir.join(&rec.image_path)).map_err(|e| Error::io(&rec.image_path, e))?
        };
        records.push(ManifestRecord {
            image_path,
            tags: rec.tags.clone(),
            mask_path: Some(rel),
        });
    }
    let manifest = DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        class_names: source.class_names.clone(),
        records,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Backbone plus a single segmentation head, trained on pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: SegHead,
}

impl Module for SegModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.backbone.buffers()
    }

    fn state_mut(&mut self) -> Vec<&mut [f64]> {
        let n = self.backbone.params().len();
        let mut v = self.backbone.state_mut();
        let buffers = v.split_off(n);
        v.extend(self.head.params_mut());
        v.extend(buffers);
        v
    }
}

impl SegModel {
    pub fn init(cfg: &RunConfig, seed: u64) -> Self {
        let m = Model::init(cfg, seed);
        Self {
            backbone: m.backbone,
            head: m.student,
        }
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for s in g.state_mut() {
            s.fill(0.0);
        }
        g
    }

    /// Hard prediction at image resolution; `crf` refines when given.
    pub fn predict(&self, cfg: &RunConfig, sample: &ImageSample, crf: Option<&DenseCrf>) -> Result<HardLabelMap> {
        let f = backbone_forward(&normalize(&sample.image, &cfg.augment_config()), &self.backbone)?;
        let p = seg_forward(&f, &self.head)?;
        let (h, w) = (sample.height(), sample.width());
        let up = ProbMaps::new_unchecked(resize_bilinear(&p.p, h, w)).renormalized();
        Ok(match crf {
            Some(crf) => harden(&crf.refine(&up)?),
            None => harden(&up),
        })
    }
}

/// Pixel cross-entropy over labelled pixels of one batch; labels are masks
/// at crop resolution, reduced to feature resolution by nearest sampling.
pub fn segmentation_gradients(
    model: &SegModel,
    batch: &[AugmentedSample],
) -> Result<(SegModel, f64, Vec<BnStats>)> {
    let n = batch.len();
    let (_, hc, wc) = batch[0].input.dim();
    let mut x = Array4::zeros((n, 3, hc, wc));
    for (i, s) in batch.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&s.input);
    }
    let (f, cache, stats) = model.backbone.forward(&x, NormMode::Train)?;
    let (p, head_cache) = model.head.forward(&f)?;
    let channels = model.head.channels();
    let all: Vec<usize> = (1..channels).collect();
    let mut grads = model.zeros_like();
    let mut d_p = Vec::with_capacity(n);
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let mask = s
            .raw
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no mask", s.raw.id)))?;
        let (fh, fw) = p[i].dim();
        let labels = resize_nearest(mask, fh, fw);
        let r = ReliabilityMask {
            r: labels.mapv(|l| l != IGNORE),
        };
        let b = HardLabelMap { labels, channels };
        let l = masked_hard_ce(&p[i], &b, &r, &all)?;
        loss += l.value / n as f64;
        d_p.push(l.grad / n as f64);
    }
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.raw.id.as_str()).collect();
        return Err(Error::Diverged {
            iter: 0,
            batch_ids: ids.join(","),
        });
    }
    let d_f = model.head.backward(&head_cache, &d_p, &mut grads.head);
    model.backbone.backward(&cache, &d_f, &mut grads.backbone);
    Ok((grads, loss, stats))
}

/// Stage two: a fresh network trained on pseudo masks (carried in
/// `gt_mask`) with polynomial learning-rate decay.
pub fn retrain_on_psms<F: FnMut(u64, f64)>(
    cfg: &RunConfig,
    samples: &[ImageSample],
    mut on_step: F,
) -> Result<SegModel> {
    if samples.is_empty() {
        return Err(Error::Invalid("no pseudo masks to train on".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.gt_mask.is_none()) {
        return Err(Error::Invalid(format!("sample {} has no pseudo mask", s.id)));
    }
    let mut model = SegModel::init(cfg, cfg.seed ^ 0x2);
    let mut velocity = model.zeros_like();
    let n = samples.len();
    let batch = cfg.retrain_batch.min(n);
    let per_epoch = n.div_ceil(batch) as u64;
    let total = cfg.retrain_iters.max(1);
    let aug = cfg.augment_config();
    for it in 0..total {
        let epoch = it / per_epoch;
        let order = batch_indices(n, batch, cfg.seed ^ 0x2, epoch);
        let items: Result<Vec<AugmentedSample>> = order[(it % per_epoch) as usize]
            .iter()
            .enumerate()
            .map(|(slot, &i)| augment(&samples[i], sample_seed(cfg.seed ^ 0x2, it, slot), &aug))
            .collect();
        let (grads, loss, stats) = segmentation_gradients(&model, &items?)?;
        let lr = cfg.retrain_lr * (1.0 - it as f64 / total as f64).powf(cfg.retrain_power);
        Sgd {
            lr,
            momentum: cfg.retrain_momentum,
            weight_decay: cfg.retrain_weight_decay,
        }
        .step(&mut model, &grads, &mut velocity);
        model.backbone.apply_stats(&stats);
        on_step(it, loss);
    }
    Ok(model)
}

pub fn evaluate_seg_model(model: &SegModel, cfg: &RunConfig, samples: &[ImageSample], use_crf: bool) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(model.head.channels());
    for s in samples {
        let gt = s
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no ground-truth mask", s.id)))?;
        let crf = if use_crf { Some(full_res_crf(s, cfg)?) } else { None };
        let pred = model.predict(cfg, s, crf.as_ref())?;
        cm.accumulate(&pred.labels, gt)?;
    }
    miou(&cm)
}

/// Outcome of one stage-one variant.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub mode: AblationMode,
    pub report: BranchReport,
    pub losses: Vec<f64>,
    /// Pseudo masks of the validation samples, in order.
    pub psms: Vec<HardLabelMap>,
    pub state: TrainState,
}

pub fn ablation_run(
    mode: AblationMode,
    cfg: &RunConfig,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
) -> Result<AblationResult> {
    let mut cfg = cfg.clone();
    cfg.train_mode = mode;
    let mut state = TrainState::new(&cfg)?;
    let mut losses = Vec::new();
    train(&mut state, train_set, |r| losses.push(r.total))?;
    let (report, psms) = evaluate_branches_with_psms(&state, val_set)?;
    Ok(AblationResult {
        mode,
        report,
        losses,
        psms,
        state,
    })
}

/// Schedule parameter varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Period,
    Tau,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "T" => Ok(Self::Period),
            "tau" => Ok(Self::Tau),
            other => Err(format!("unknown sweep parameter `{other}`, expected T or tau")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Period => "T",
            Self::Tau => "tau",
        })
    }
}

/// Trains the alternating variant once per value and reports branch mIoUs.
pub fn sweep<F: FnMut(f64, &AblationResult)>(
    param: SweepParam,
    values: &[f64],
    cfg: &RunConfig,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    mut on_result: F,
) -> Result<Vec<(f64, BranchReport)>> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::Period => {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(Error::config("pwm.T", format!("sweep value {v} is not a whole number")));
                }
                c.pwm_period = v as u64;
            }
            SweepParam::Tau => c.pwm_tau = v,
        }
        c.validate()?;
        let r = ablation_run(AblationMode::V, &c, train_set, val_set)?;
        on_result(v, &r);
        out.push((v, r.report));
    }
    Ok(out)
}

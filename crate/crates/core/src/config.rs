//! Run configuration as flat `key = value` text with dotted keys.
//!
//! Every key has a default; files and command-line overrides only list what
//! they change. [`RunConfig::to_text`] writes every key in a fixed order so
//! that a snapshot reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::class_teacher::CamThresholds;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, PairwiseKernelConfig};
use crate::pipeline::AblationMode;
use crate::pwm::PwmSchedule;
use crate::seg_head::SegHeadConfig;
use crate::synthdata::AugmentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_root: Option<PathBuf>,
    pub data_classes: usize,
    pub data_image_size: usize,
    pub data_n_train: usize,
    pub data_n_val: usize,

    pub aug_crop: usize,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub aug_flip_prob: f64,

    pub model_widths: Vec<usize>,
    pub model_seg_hidden: usize,
    /// 0 picks from the feature-map size.
    pub model_seg_dilation: usize,

    pub pwm_period: u64,
    pub pwm_tau: f64,

    pub cam_fg: f64,
    pub cam_bg: f64,
    pub cam_scales: Vec<f64>,
    pub cam_flip: bool,

    pub losses_sigma_d: f64,
    pub losses_sigma_i: f64,
    pub losses_lambda_str: f64,
    pub losses_radius: usize,

    pub crf_n_iters: usize,
    pub crf_w_appearance: f64,
    pub crf_w_smoothness: f64,
    pub crf_theta_alpha: f64,
    pub crf_theta_beta: f64,
    pub crf_theta_gamma: f64,
    pub crf_compat: f64,

    pub train_mode: AblationMode,
    pub train_lr: f64,
    pub train_momentum: f64,
    pub train_weight_decay: f64,
    pub train_epochs: usize,
    pub train_batch: usize,
    /// Overrides `epochs` when non-zero.
    pub train_iters: u64,

    pub retrain_lr: f64,
    pub retrain_momentum: f64,
    pub retrain_weight_decay: f64,
    pub retrain_power: f64,
    pub retrain_iters: u64,
    pub retrain_batch: usize,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            data_classes: 3,
            data_image_size: 64,
            data_n_train: 500,
            data_n_val: 100,
            aug_crop: 64,
            aug_scale_min: 0.7,
            aug_scale_max: 1.3,
            aug_flip_prob: 0.5,
            model_widths: vec![32, 32, 64, 64, 128, 128],
            model_seg_hidden: 64,
            model_seg_dilation: 0,
            pwm_period: 150,
            pwm_tau: 5.0,
            cam_fg: 0.30,
            cam_bg: 0.05,
            cam_scales: vec![0.5, 1.0, 1.5, 2.0],
            cam_flip: true,
            losses_sigma_d: 15.0,
            losses_sigma_i: 100.0,
            losses_lambda_str: 0.1,
            losses_radius: 5,
            crf_n_iters: 10,
            crf_w_appearance: 4.0,
            crf_w_smoothness: 3.0,
            crf_theta_alpha: 80.0,
            crf_theta_beta: 13.0,
            crf_theta_gamma: 3.0,
            crf_compat: 1.0,
            train_mode: AblationMode::V,
            train_lr: 7e-4,
            train_momentum: 0.9,
            train_weight_decay: 1e-5,
            train_epochs: 8,
            train_batch: 4,
            train_iters: 0,
            retrain_lr: 2.5e-3,
            retrain_momentum: 0.9,
            retrain_weight_decay: 5e-4,
            retrain_power: 0.9,
            retrain_iters: 2000,
            retrain_batch: 10,
            out_dir: PathBuf::from("runs"),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u64, usize, f64, bool);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.to_string_lossy().into_owned()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for AblationMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident),* $(,)?) => {
        impl RunConfig {
            /// Every key, in snapshot order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$field = ConfigValue::parse_value(value)
                            .map_err(|m| Error::config(key, m))?;
                    })*
                    _ => return Err(Error::config(key, "unknown configuration key")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "data.root" => data_root,
    "data.classes" => data_classes,
    "data.image_size" => data_image_size,
    "data.n_train" => data_n_train,
    "data.n_val" => data_n_val,
    "aug.crop" => aug_crop,
    "aug.scale_min" => aug_scale_min,
    "aug.scale_max" => aug_scale_max,
    "aug.flip_prob" => aug_flip_prob,
    "model.widths" => model_widths,
    "model.seg_hidden" => model_seg_hidden,
    "model.seg_dilation" => model_seg_dilation,
    "pwm.T" => pwm_period,
    "pwm.tau" => pwm_tau,
    "cam.fg" => cam_fg,
    "cam.bg" => cam_bg,
    "cam.scales" => cam_scales,
    "cam.flip" => cam_flip,
    "losses.sigma_D" => losses_sigma_d,
    "losses.sigma_I" => losses_sigma_i,
    "losses.lambda_str" => losses_lambda_str,
    "losses.radius" => losses_radius,
    "crf.n_iters" => crf_n_iters,
    "crf.w_appearance" => crf_w_appearance,
    "crf.w_smoothness" => crf_w_smoothness,
    "crf.theta_alpha" => crf_theta_alpha,
    "crf.theta_beta" => crf_theta_beta,
    "crf.theta_gamma" => crf_theta_gamma,
    "crf.compat" => crf_compat,
    "train.mode" => train_mode,
    "train.lr" => train_lr,
    "train.momentum" => train_momentum,
    "train.weight_decay" => train_weight_decay,
    "train.epochs" => train_epochs,
    "train.batch" => train_batch,
    "train.iters" => train_iters,
    "retrain.lr" => retrain_lr,
    "retrain.momentum" => retrain_momentum,
    "retrain.weight_decay" => retrain_weight_decay,
    "retrain.power" => retrain_power,
    "retrain.iters" => retrain_iters,
    "retrain.batch" => retrain_batch,
    "out.dir" => out_dir,
}

impl RunConfig {
    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// `key=value` for every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        PwmSchedule::new(self.pwm_period, self.pwm_tau)?;
        if self.data_classes < 2 || self.data_classes > 6 {
            return Err(Error::config("data.classes", "must be between 2 and 6"));
        }
        if self.model_widths.len() != 6 || self.model_widths.contains(&0) {
            return Err(Error::config("model.widths", "needs six positive widths"));
        }
        if self.model_seg_hidden == 0 {
            return Err(Error::config("model.seg_hidden", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cam_bg) || !(0.0..=1.0).contains(&self.cam_fg) || self.cam_bg >= self.cam_fg {
            return Err(Error::config("cam.fg", "need 0 <= cam.bg < cam.fg <= 1"));
        }
        if self.cam_scales.is_empty() || self.cam_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("cam.scales", "need at least one positive scale"));
        }
        if !(self.aug_scale_min > 0.0 && self.aug_scale_min < self.aug_scale_max) {
            return Err(Error::config("aug.scale_min", "need 0 < scale_min < scale_max"));
        }
        if !(0.0..=1.0).contains(&self.aug_flip_prob) {
            return Err(Error::config("aug.flip_prob", "must be a probability"));
        }
        if self.aug_crop < 8 {
            return Err(Error::config("aug.crop", "must be at least 8"));
        }
        if self.crf_n_iters == 0 {
            return Err(Error::config("crf.n_iters", "must be at least 1"));
        }
        self.crf_params(1.0).validate()?;
        self.kernel_config(1.0).validate()?;
        if !(self.losses_lambda_str >= 0.0) {
            return Err(Error::config("losses.lambda_str", "must be non-negative"));
        }
        if self.train_batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.train_lr >= 0.0) {
            return Err(Error::config("train.lr", "must be non-negative"));
        }
        if self.train_epochs == 0 && self.train_iters == 0 {
            return Err(Error::config("train.epochs", "either train.epochs or train.iters must be positive"));
        }
        if self.retrain_batch == 0 {
            return Err(Error::config("retrain.batch", "must be positive"));
        }
        Ok(())
    }

    pub fn pwm_schedule(&self) -> Result<PwmSchedule> {
        PwmSchedule::new(self.pwm_period, self.pwm_tau)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let mut w = [0usize; 6];
        for (dst, &src) in w.iter_mut().zip(&self.model_widths) {
            *dst = src;
        }
        BackboneConfig::with_widths(w)
    }

    pub fn seg_head_config(&self) -> SegHeadConfig {
        let side = self.aug_crop.div_ceil(self.backbone_config().stride());
        let mut c = SegHeadConfig::for_feature_size(side, self.model_seg_hidden);
        if self.model_seg_dilation > 0 {
            c.dilation = self.model_seg_dilation;
        }
        c
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop: self.aug_crop,
            scale_min: self.aug_scale_min,
            scale_max: self.aug_scale_max,
            flip_prob: self.aug_flip_prob,
            ..AugmentConfig::default()
        }
    }

    pub fn cam_thresholds(&self) -> CamThresholds {
        CamThresholds {
            fg: self.cam_fg,
            bg: self.cam_bg,
        }
    }

    pub fn kernel_config(&self, pixel_spacing: f64) -> PairwiseKernelConfig {
        PairwiseKernelConfig {
            sigma_d: self.losses_sigma_d,
            sigma_i: self.losses_sigma_i,
            radius: self.losses_radius,
            pixel_spacing,
        }
    }

    pub fn distill_config(&self, pixel_spacing: f64) -> DistillConfig {
        DistillConfig {
            lambda_str: self.losses_lambda_str,
            kernel: self.kernel_config(pixel_spacing),
        }
    }

    pub fn crf_params(&self, pixel_spacing: f64) -> CrfParams {
        CrfParams {
            n_iters: self.crf_n_iters,
            w_appearance: self.crf_w_appearance,
            w_smoothness: self.crf_w_smoothness,
            theta_alpha: self.crf_theta_alpha,
            theta_beta: self.crf_theta_beta,
            theta_gamma: self.crf_theta_gamma,
            compat: self.crf_compat,
            pixel_spacing,
        }
    }
}

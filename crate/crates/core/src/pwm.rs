//! Rectangular teacher-selection signal.
//!
//! Each period of `T` optimizer steps opens with `T_h = round(T / tau)` steps
//! of class-teacher supervision followed by `T_l = T - T_h` steps of
//! seg-teacher supervision.

use ndarray::Array3;

use crate::class_teacher::{HardLabelMap, ReliabilityMask};
use crate::error::{Error, Result};
use crate::losses::{loss_ct_to_s, loss_st_to_s, DistillConfig, LossValue};
use crate::seg_head::ProbMaps;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Teacher {
    ClassTeacher,
    SegTeacher,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PwmSchedule {
    period: u64,
    tau: f64,
    high: u64,
}

impl PwmSchedule {
    pub fn new(period: u64, tau: f64) -> Result<Self> {
        if period < 2 {
            return Err(Error::config("pwm.T", format!("period must be at least 2, got {period}")));
        }
        if !(tau > 1.0) || !tau.is_finite() {
            return Err(Error::config("pwm.tau", format!("tau must be a finite value > 1, got {tau}")));
        }
        let high = ((period as f64 / tau).round() as u64).clamp(1, period - 1);
        Ok(Self { period, tau, high })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Steps per period supervised by the class-teacher.
    pub fn high_len(&self) -> u64 {
        self.high
    }

    /// Steps per period supervised by the seg-teacher.
    pub fn low_len(&self) -> u64 {
        self.period - self.high
    }

    pub fn select_teacher(&self, t: u64) -> Teacher {
        if t % self.period < self.high {
            Teacher::ClassTeacher
        } else {
            Teacher::SegTeacher
        }
    }

    /// True on the first step of a seg-teacher phase.
    pub fn is_low_onset(&self, t: u64) -> bool {
        t % self.period == self.high
    }
}

impl Default for PwmSchedule {
    fn default() -> Self {
        Self::new(150, 5.0).expect("valid defaults")
    }
}

pub fn select_teacher(t: u64, sched: &PwmSchedule) -> Teacher {
    sched.select_teacher(t)
}

/// The student's loss at step `t`: exactly one teacher's distillation loss,
/// never a blend.
#[allow(clippy::too_many_arguments)]
pub fn alternate_distillation_loss(
    t: u64,
    sched: &PwmSchedule,
    p_s: &ProbMaps,
    ct_labels: (&HardLabelMap, &ReliabilityMask),
    st_labels: &HardLabelMap,
    present: &[usize],
    image: &Array3<f64>,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    match sched.select_teacher(t) {
        Teacher::ClassTeacher => loss_ct_to_s(p_s, ct_labels.0, ct_labels.1, present, image, cfg),
        Teacher::SegTeacher => loss_st_to_s(p_s, st_labels, present, image, cfg),
    }
}

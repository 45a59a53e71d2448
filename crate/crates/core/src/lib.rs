//! Weakly supervised semantic segmentation from image-level tags with two
//! alternating teachers.
//!
//! A shared convolutional backbone feeds three branches: a classification
//! head whose activation maps give sparse, reliable labels (the
//! class-teacher), a segmentation head trained on those labels (the
//! seg-teacher) and a second segmentation head, the student, which learns
//! from one teacher at a time on a rectangular pulse-width schedule. The
//! fused branch outputs, refined by a dense CRF, become pseudo masks for a
//! second, fully supervised training stage.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod class_teacher;
pub mod config;
pub mod crf;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pwm;
pub mod resample;
pub mod seg_head;
pub mod synthdata;

pub use class_teacher::{HardLabelMap, ReliabilityMask, UNLABELED};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::{AblationMode, Model, TrainState};
pub use pwm::{select_teacher, PwmSchedule, Teacher};
pub use seg_head::ProbMaps;
pub use synthdata::{ImageSample, IGNORE};

//! Joint-space exoskeleton teleoperation for a dual-arm robot.
//!
//! Encoder ticks from a wearable exoskeleton are mapped to robot joint
//! angles with a single-pose calibration, streamed to a kinematic simulator
//! at a fixed control rate, recorded as demonstrations and replayed by a
//! nearest-neighbour policy with action chunking.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod control;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod recorder;
pub mod scripted;
pub mod sim;

pub use error::{Error, Result};

/// Creates the directories above `path` so a save can target a fresh tree.
pub(crate) fn ensure_parent(path: &std::path::Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/joint-mapping.md")]
    mod joint_mapping {}
    #[doc = include_str!("../../../book/src/control-loop.md")]
    mod control_loop {}
    #[doc = include_str!("../../../book/src/demonstrations.md")]
    mod demonstrations {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}

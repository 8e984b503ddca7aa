//! Shipped default configuration.
//!
//! None of these numbers describe a real robot: joint limits, link lengths
//! and task geometry are illustrative and can be replaced by files of the
//! same shape.

use std::path::Path;

use serde::Deserialize;

use crate::calibration::CaptureDefaults;
use crate::error::Result;
use crate::kinematics::{DualChainConfig, KinematicChain};
use crate::model::{ArmDescriptor, ArmId};

pub const DEFAULT_CHAINS: &str = include_str!("../config/chains.json");
pub const DEFAULT_ARMS: &str = include_str!("../config/arms.json");
pub const DEFAULT_CAPTURE: &str = include_str!("../config/calibration_defaults.json");
pub const DEFAULT_GATHER_WORLD: &str = include_str!("../config/world_gather.json");
pub const DEFAULT_SHELF_WORLD: &str = include_str!("../config/world_shelf.json");

#[derive(Deserialize)]
struct ArmsFile {
    left: ArmDescriptor,
    right: ArmDescriptor,
}

/// Both arm descriptors, left first.
pub fn parse_arms(text: &str) -> Result<[ArmDescriptor; 2]> {
    let f: ArmsFile = serde_json::from_str(text)?;
    f.left.validate()?;
    f.right.validate()?;
    Ok([f.left, f.right])
}

pub fn default_arms() -> [ArmDescriptor; 2] {
    parse_arms(DEFAULT_ARMS).expect("shipped arms.json is valid")
}

pub fn default_chain_config() -> DualChainConfig {
    serde_json::from_str(DEFAULT_CHAINS).expect("shipped chains.json is valid")
}

pub fn default_capture() -> CaptureDefaults {
    serde_json::from_str(DEFAULT_CAPTURE).expect("shipped calibration_defaults.json is valid")
}

/// Robot chains for both arms.
#[derive(Debug, Clone)]
pub struct DualChain {
    pub left: KinematicChain,
    pub right: KinematicChain,
}

impl DualChain {
    pub fn new(cfg: &DualChainConfig) -> Result<Self> {
        Ok(Self {
            left: KinematicChain::new(cfg.left.clone())?,
            right: KinematicChain::new(cfg.right.clone())?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(&DualChainConfig::load(path)?)
    }

    pub fn arm(&self, arm: ArmId) -> &KinematicChain {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    pub fn config(&self) -> DualChainConfig {
        DualChainConfig { left: self.left.config().clone(), right: self.right.config().clone() }
    }
}

impl Default for DualChain {
    fn default() -> Self {
        Self::new(&default_chain_config()).expect("shipped chains are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_parse() {
        let arms = default_arms();
        assert_eq!(arms[0].dof, 8);
        assert_eq!(arms[1].gripper_width_range, (0.0, 0.085));
        let chains = DualChain::default();
        chains.left.check_arm(&arms[0]).unwrap();
        chains.right.check_arm(&arms[1]).unwrap();
        let cap = default_capture();
        assert_eq!(cap.k_left.len(), 8);
        assert!(cap.k_left.iter().chain(&cap.k_right).all(|k| k.abs() == 1.0));
    }
}

//! Nearest-neighbor imitation policy with action chunks and temporal
//! ensembling.
//!
//! Every frame of every demonstration becomes one database entry: a
//! normalized feature of the observed state and the next `H` actions. At run
//! time the live state is featurized, the `k` nearest entries are blended by
//! inverse distance, and the resulting chunk joins an exponential ensemble
//! of earlier chunks to give the command for the current tick.

mod ensemble;
mod knn;

use std::borrow::Borrow;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use ensemble::{fuse, EnsembleBuffer, EnsembleConfig, DEFAULT_K_ENS};
pub use knn::{
    blend_chunks, knn_predict, knn_predict_with_eps, nearest, nearest_with_eps, squared_distance, weigh, Neighbor, KERNEL_EPS,
};

use crate::config::DualChain;
use crate::control::{run_loop, Clock, Commander, Intent, LoopConfig, Observation, RobotBackend, SessionOutcome};
use crate::error::{invalid, schema, Error, Result};
use crate::model::{ArmId, ARM_JOINTS};
use crate::recorder::{resample, DemoFrame, DemoHeader, Demonstration, Dims, Domain, RecordingMeta, TickRecorder, DEMO_SCHEMA};
use crate::sim::{DualArmCommand, SimState};

pub const DB_SCHEMA: &str = "airexo-nndb/1";
pub const DEFAULT_CHUNK: usize = 20;
pub const DEFAULT_DOMAIN_WEIGHT: f64 = 3.0;
/// Floor on per-dimension feature std.
pub const STD_FLOOR: f64 = 1e-8;

/// Maps a frame or a live observation to an unnormalized feature vector.
pub trait Featurizer: Sync {
    fn id(&self) -> &'static str;
    #[allow(clippy::wrong_self_convention)]
    fn from_frame(&self, frame: &DemoFrame) -> Vec<f64>;
    #[allow(clippy::wrong_self_convention)]
    fn from_observation(&self, obs: &Observation) -> Vec<f64>;
}

/// 14 joint positions followed by the two gripper widths.
pub struct JointsGripper;

impl Featurizer for JointsGripper {
    fn id(&self) -> &'static str {
        "joints_gripper"
    }

    fn from_frame(&self, frame: &DemoFrame) -> Vec<f64> {
        let mut v = frame.joint_pos.to_vec();
        v.extend(frame.gripper_widths());
        v
    }

    fn from_observation(&self, obs: &Observation) -> Vec<f64> {
        let mut v = Vec::with_capacity(16);
        for arm in ArmId::BOTH {
            v.extend_from_slice(&obs.joints.arm(arm)[..ARM_JOINTS]);
        }
        for arm in ArmId::BOTH {
            v.push(obs.joints.arm(arm)[ARM_JOINTS]);
        }
        v
    }
}

/// Joint positions only.
pub struct Joints;

impl Featurizer for Joints {
    fn id(&self) -> &'static str {
        "joints"
    }

    fn from_frame(&self, frame: &DemoFrame) -> Vec<f64> {
        frame.joint_pos.to_vec()
    }

    fn from_observation(&self, obs: &Observation) -> Vec<f64> {
        ArmId::BOTH.iter().flat_map(|&a| obs.joints.arm(a)[..ARM_JOINTS].to_vec()).collect()
    }
}

pub const DEFAULT_FEATURIZER: &str = "joints_gripper";

static FEATURIZERS: [&dyn Featurizer; 2] = [&JointsGripper, &Joints];

pub fn featurizer(id: &str) -> Result<&'static dyn Featurizer> {
    FEATURIZERS
        .iter()
        .copied()
        .find(|f| f.id() == id)
        .ok_or_else(|| Error::Config(format!("unknown featurizer '{id}'")))
}

pub fn featurizer_ids() -> Vec<&'static str> {
    FEATURIZERS.iter().map(|f| f.id()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub feature: Vec<f64>,
    /// `H` rows of actions following the frame.
    pub chunk: Vec<Vec<f64>>,
    /// Set when the chunk ran past the demonstration and was padded with
    /// its final action.
    pub padded: bool,
    pub domain: Domain,
    pub demo_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDatabase {
    pub schema: String,
    pub featurizer: String,
    pub feature_dim: usize,
    pub horizon: usize,
    /// Frame rate of the demonstrations the chunks were cut from.
    pub hz: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub entries: Vec<Entry>,
}

impl NeighborDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.feature_dim {
            return Err(schema(format!("feature dim {} != {}", raw.len(), self.feature_dim)));
        }
        Ok(raw.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }

    /// Normalized feature of a live observation.
    pub fn featurize(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.normalize(&featurizer(&self.featurizer)?.from_observation(obs))
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.entries.iter().filter(|e| e.domain == domain).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let db: Self = serde_json::from_str(text)?;
        if db.schema != DB_SCHEMA {
            return Err(schema(format!("unknown database schema '{}'", db.schema)));
        }
        featurizer(&db.featurizer)?;
        if db.mean.len() != db.feature_dim || db.std.len() != db.feature_dim {
            return Err(schema("normalization statistics do not match feature_dim"));
        }
        for e in &db.entries {
            if e.feature.len() != db.feature_dim || e.chunk.len() != db.horizon {
                return Err(schema(format!("entry {}#{} has the wrong shape", e.demo_id, e.frame_index)));
            }
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::ensure_parent(path.as_ref())?;
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// In-the-wild demonstrations for the first stage and teleoperated ones for
/// the second; teleoperated neighbors weigh `domain_weight` times more.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetAssembly {
    pub pretrain: Vec<Demonstration>,
    pub finetune: Vec<Demonstration>,
    pub domain_weight: f64,
}

impl DatasetAssembly {
    pub fn new(pretrain: Vec<Demonstration>, finetune: Vec<Demonstration>) -> Self {
        Self { pretrain, finetune, domain_weight: DEFAULT_DOMAIN_WEIGHT }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain.is_empty() && self.finetune.is_empty() {
            return Err(Error::Config("dataset assembly has no demonstrations".into()));
        }
        for (list, want) in [(&self.pretrain, Domain::InTheWild), (&self.finetune, Domain::Teleoperated)] {
            if let Some(d) = list.iter().find(|d| d.domain() != want) {
                return Err(schema(format!("demonstration {} is {} in the {} set", d.id(), d.domain().as_str(), want.as_str())));
            }
        }
        if !(self.domain_weight > 0.0) {
            return Err(invalid(format!("domain weight must be > 0, got {}", self.domain_weight)));
        }
        Ok(())
    }
}

/// True when every frame gap is exactly the grid spacing for `hz`.
fn on_grid(demo: &Demonstration, hz: f64) -> bool {
    let step = (1e9 / hz).round() as u64;
    demo.frames.windows(2).all(|w| w[1].t - w[0].t == step)
}

pub fn build_database(assembly: &DatasetAssembly, featurizer_id: &str, target_hz: f64, horizon: usize) -> Result<NeighborDatabase> {
    assembly.validate()?;
    let feat = featurizer(featurizer_id)?;
    if horizon == 0 {
        return Err(invalid("chunk horizon must be >= 1"));
    }
    let mut raw = Vec::new();
    let mut entries = Vec::new();
    for demo in assembly.pretrain.iter().chain(&assembly.finetune) {
        let resampled;
        let demo = if on_grid(demo, target_hz) {
            demo
        } else {
            resampled = resample(demo, target_hz)?;
            &resampled
        };
        let actions: Vec<Vec<f64>> = demo.frames.iter().map(DemoFrame::action).collect();
        let n = actions.len();
        for (i, frame) in demo.frames.iter().enumerate() {
            let chunk: Vec<Vec<f64>> = (1..=horizon).map(|j| actions[(i + j).min(n - 1)].clone()).collect();
            raw.push(feat.from_frame(frame));
            entries.push(Entry {
                feature: Vec::new(),
                chunk,
                padded: i + horizon > n - 1,
                domain: demo.domain(),
                demo_id: demo.id().to_owned(),
                frame_index: i,
            });
        }
    }
    let dim = raw[0].len();
    if let Some(r) = raw.iter().find(|r| r.len() != dim) {
        return Err(schema(format!("feature dim {} != {dim}", r.len())));
    }
    let count = raw.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| raw.iter().map(|r| r[d]).sum::<f64>() / count).collect();
    let std: Vec<f64> = (0..dim)
        .map(|d| {
            let var = raw.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / count;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    let mut db = NeighborDatabase {
        schema: DB_SCHEMA.into(),
        featurizer: featurizer_id.into(),
        feature_dim: dim,
        horizon,
        hz: target_hz,
        mean,
        std,
        entries,
    };
    for (e, r) in db.entries.iter_mut().zip(&raw) {
        e.feature = r.iter().zip(&db.mean).zip(&db.std).map(|((x, m), s)| (x - m) / s).collect();
    }
    Ok(db)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub k: usize,
    pub domain_weight: f64,
    pub k_ens: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { k: 20, domain_weight: DEFAULT_DOMAIN_WEIGHT, k_ens: DEFAULT_K_ENS }
    }
}

/// Database frames per control tick.
pub fn stride(db_hz: f64, control_hz: f64) -> usize {
    ((db_hz / control_hz).round() as usize).max(1)
}

/// Closed-loop commander over a database held as `&NeighborDatabase`,
/// `Arc<NeighborDatabase>` or any other borrow of one.
pub struct PolicyCommander<D: Borrow<NeighborDatabase>> {
    db: D,
    k: usize,
    domain_weight: f64,
    buffer: EnsembleBuffer,
}

impl<D: Borrow<NeighborDatabase>> PolicyCommander<D> {
    pub fn new(db: D, cfg: &PolicyConfig, control_hz: f64) -> Result<Self> {
        let store = db.borrow();
        if store.is_empty() {
            return Err(Error::State("neighbor database is empty".into()));
        }
        let k = cfg.k.min(store.len());
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        let stride = stride(store.hz, control_hz);
        if stride > store.horizon {
            return Err(Error::Config(format!("database at {} Hz needs a chunk longer than {}", store.hz, store.horizon)));
        }
        let buffer = EnsembleBuffer::new(EnsembleConfig { k_ens: cfg.k_ens, stride })?;
        Ok(Self { db, k, domain_weight: cfg.domain_weight, buffer })
    }

    pub fn act(&mut self, obs: &Observation) -> Result<DualArmCommand> {
        let db = self.db.borrow();
        let q = db.featurize(obs)?;
        let chunk = knn_predict(db, &q, self.k, self.domain_weight)?;
        DualArmCommand::from_flat(&self.buffer.step(chunk)?)
    }
}

impl<D: Borrow<NeighborDatabase>> Commander for PolicyCommander<D> {
    fn next(&mut self, _now_ns: u64, obs: &Observation) -> Result<Intent> {
        Ok(Intent::Command(self.act(obs)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEpisode {
    /// Executed ticks as a demonstration; absent when fewer than 2 ticks ran.
    pub demo: Option<Demonstration>,
    pub outcome: SessionOutcome,
    pub final_state: Option<SimState>,
}

/// Closed-loop rollout of the policy for `duration_s`.
#[allow(clippy::too_many_arguments)]
pub fn run_policy(
    db: &NeighborDatabase,
    backend: &mut dyn RobotBackend,
    chains: &DualChain,
    cfg: &LoopConfig,
    policy: &PolicyConfig,
    duration_s: f64,
    clock: &mut dyn Clock,
    meta: &RecordingMeta,
) -> Result<PolicyEpisode> {
    let mut commander = PolicyCommander::new(db, policy, cfg.control_rate_hz)?;
    let mut rec = TickRecorder::new(chains);
    let outcome = run_loop(&mut commander, backend, cfg, duration_s, clock, &mut |t, b| rec.observe(t, b))?;
    if let Some(e) = rec.error {
        return Err(e);
    }
    let mut metadata = meta.metadata.clone();
    metadata.insert("source".into(), json!("policy"));
    metadata.insert("policy".into(), serde_json::to_value(policy)?);
    let demo = (rec.frames.len() >= 2)
        .then(|| {
            Demonstration::new(
                DemoHeader {
                    schema: DEMO_SCHEMA.into(),
                    id: meta.id.clone(),
                    domain: Domain::Teleoperated,
                    task_id: meta.task_id.clone(),
                    calibration_ref: None,
                    dims: Dims::new(2, 0),
                    start_t: 0,
                    metadata,
                },
                rec.frames,
            )
        })
        .transpose()?;
    Ok(PolicyEpisode { demo, outcome, final_state: backend.sim_state().cloned() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recorder::GripperObs;
    use std::collections::BTreeMap;

    fn demo(id: &str, domain: Domain, values: &[f64]) -> Demonstration {
        let frames = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut tcp = [0.0; 14];
                tcp[6] = 1.0;
                tcp[13] = 1.0;
                DemoFrame {
                    t: (i as u64 + 1) * 200_000_000,
                    joint_pos: [v; 14],
                    joint_vel: [0.0; 14],
                    tcp_pos: tcp,
                    tcp_vel: [0.0; 12],
                    base_ft: [0.0; 12],
                    tcp_ft: [0.0; 12],
                    gripper: vec![GripperObs { width: 0.08, last_cmd_width: 0.08, ..Default::default() }; 2],
                    encoder: [0; 16],
                    image_refs: vec![],
                }
            })
            .collect();
        Demonstration::new(
            DemoHeader {
                schema: DEMO_SCHEMA.into(),
                id: id.into(),
                domain,
                task_id: "t".into(),
                calibration_ref: Some("cal-0".into()),
                dims: Dims::new(2, 0),
                start_t: 0,
                metadata: BTreeMap::new(),
            },
            frames,
        )
        .unwrap()
    }

    #[test]
    fn short_demo_is_padded() {
        let a = DatasetAssembly::new(vec![], vec![demo("a", Domain::Teleoperated, &[0.0, 1.0])]);
        let db = build_database(&a, DEFAULT_FEATURIZER, 5.0, 20).unwrap();
        assert_eq!(db.len(), 2);
        assert!(db.entries.iter().all(|e| e.padded && e.chunk.len() == 20));
        assert!(db.entries[0].chunk.iter().all(|r| r[0] == 1.0));
        // Constant gripper width: std floor, feature 0.
        assert!(db.entries.iter().all(|e| e.feature[14] == 0.0));
    }

    #[test]
    fn assembly_checks_tags() {
        let td = demo("a", Domain::Teleoperated, &[0.0, 1.0]);
        assert!(matches!(
            build_database(&DatasetAssembly::new(vec![], vec![]), DEFAULT_FEATURIZER, 5.0, 20),
            Err(Error::Config(_))
        ));
        assert!(DatasetAssembly::new(vec![td.clone()], vec![]).validate().is_err());
        assert!(matches!(
            build_database(&DatasetAssembly::new(vec![], vec![td]), "resnet", 5.0, 20),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverse_distance_example() {
        let entry = |x: f64, a: f64| Entry {
            feature: vec![x],
            chunk: vec![vec![a]],
            padded: false,
            domain: Domain::InTheWild,
            demo_id: "d".into(),
            frame_index: 0,
        };
        let db = NeighborDatabase {
            schema: DB_SCHEMA.into(),
            featurizer: DEFAULT_FEATURIZER.into(),
            feature_dim: 1,
            horizon: 1,
            hz: 5.0,
            mean: vec![0.0],
            std: vec![1.0],
            entries: vec![entry(1.0, 0.0), entry(-3.0, 4.0), entry(10.0, 100.0)],
        };
        let exact = knn_predict_with_eps(&db, &[0.0], 2, 1.0, 0.0).unwrap()[0][0];
        assert!((exact - 1.0).abs() < 1e-12);
        let got = knn_predict(&db, &[0.0], 2, 1.0).unwrap()[0][0];
        assert!((got - 1.0).abs() < 1e-8);
        assert!(matches!(
            knn_predict(&NeighborDatabase { entries: vec![], ..db }, &[0.0], 1, 1.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn database_json_round_trip() {
        let a = DatasetAssembly::new(vec![], vec![demo("a", Domain::Teleoperated, &[0.0, 0.3, 0.7])]);
        let db = build_database(&a, DEFAULT_FEATURIZER, 5.0, 4).unwrap();
        let text = db.to_json().unwrap();
        let back = NeighborDatabase::from_json(&text).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_json().unwrap(), text);
    }
}

mod common;

use exo_core::calibration::map_frame;
use exo_core::config::{default_chain_config, DualChain};
use exo_core::control::{Clock, LoopConfig, SimulatedEncoderSource, VirtualClock};
use exo_core::error::Error;
use exo_core::model::{ArmId, EncoderFrame};
use exo_core::recorder::{
    check_domain_integrity, record_in_the_wild, recorded_world, replay, resample, DemoFile, Demonstration, Domain,
    RecordingMeta,
};
use exo_core::scripted::{gather_demo, record_scripted_in_the_wild, GatherScript};
use exo_core::sim::{DualArmCommand, SimBackend, Simulator, WorldConfig};

use common::{calibration, teleop_demos};

fn gather_traj() -> exo_core::scripted::Trajectory {
    gather_demo(&WorldConfig::default_gather(), &default_chain_config(), &GatherScript::default()).unwrap()
}

#[test]
fn full_length_session_records_300_frames() {
    let world = WorldConfig::default_gather();
    let cal = calibration();
    let home = world.home.clone();
    let ticks = exo_core::calibration::ticks_for_pose(&cal, [&home.left, &home.right], cal_res());
    let mut source = SimulatedEncoderSource::generator(30.0, 61.0, cal_res(), move |_| ticks.clone()).unwrap();
    let mut backend = SimBackend::new(Simulator::with_defaults(world.clone()).unwrap());
    let (demo, out) = exo_core::recorder::record_teleop(
        &mut source,
        &cal,
        None,
        &mut backend,
        &DualChain::default(),
        &LoopConfig::default(),
        60.0,
        &mut VirtualClock::new(),
        &RecordingMeta::new("d", "gather_balls"),
    )
    .unwrap();
    assert_eq!(out.stats.ticks_executed, 300);
    assert_eq!(demo.frames.len(), 300);
    assert_eq!(demo.domain(), Domain::Teleoperated);
    assert_eq!(demo.frames[0].t, 200_000_000);
    assert!((demo.mean_hz() - 5.0).abs() < 1e-9);
    assert_eq!(demo.header.calibration_ref.as_deref(), Some(cal.id().as_str()));
}

fn cal_res() -> f64 {
    exo_core::model::default_resolution_rad()
}

#[test]
fn file_round_trip_and_seek() {
    let world = WorldConfig::default_gather();
    let (demo, _) = teleop_demos(&world, &gather_traj(), [1]).remove(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.demo");
    demo.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Demonstration::load(&path).unwrap();
    loaded.save(dir.path().join("b.demo")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("b.demo")).unwrap(), first);
    let mut f = DemoFile::open(&path).unwrap();
    assert_eq!(f.frame_count() as usize, demo.frames.len());
    assert_eq!(f.frame(40).unwrap(), demo.frames[40]);
    let (w, seed) = recorded_world(&loaded).unwrap();
    assert_eq!((w.kind(), seed), ("gather_balls", 1));
}

#[test]
fn in_the_wild_joints_come_from_the_calibration() {
    let world = WorldConfig::default_gather();
    let cal = calibration();
    let demo = record_scripted_in_the_wild(&world, &gather_traj(), &cal, "itw").unwrap();
    assert_eq!(demo.domain(), Domain::InTheWild);
    check_domain_integrity(&demo, &cal).unwrap();
    let chains = DualChain::default();
    for f in demo.frames.iter().step_by(7) {
        let enc = EncoderFrame::dual_arm(f.encoder.to_vec(), f.t).unwrap();
        let m = DualArmCommand::from(&map_frame(&cal, &enc, None).unwrap());
        for arm in ArmId::BOTH {
            assert_eq!(f.arm_joints(arm), &m.arm(arm)[..7]);
            let tcp = chains.arm(arm).tcp(f.arm_joints(arm)).unwrap().to_array();
            assert_eq!(&f.tcp_pos[arm.index() * 7..][..7], &tcp);
        }
    }
    let mut tampered = demo.clone();
    tampered.frames[3].joint_pos[2] += 1e-6;
    assert!(check_domain_integrity(&tampered, &cal).is_err());
    // Resampled copies hold interpolated joints and are not checked.
    check_domain_integrity(&resample(&tampered, 4.0).unwrap(), &cal).unwrap();
}

#[test]
fn in_the_wild_needs_a_calibration() {
    let mut source = SimulatedEncoderSource::from_frames(vec![]).unwrap();
    let r = record_in_the_wild(
        &mut source,
        None,
        None,
        &DualChain::default(),
        &LoopConfig::default(),
        10.0,
        &mut VirtualClock::new(),
        &RecordingMeta::new("x", "gather_balls"),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn zero_frame_session_is_rejected() {
    let mut source = SimulatedEncoderSource::from_frames(vec![]).unwrap();
    let r = record_in_the_wild(
        &mut source,
        Some(&calibration()),
        None,
        &DualChain::default(),
        &LoopConfig::default(),
        10.0,
        &mut VirtualClock::new(),
        &RecordingMeta::new("x", "gather_balls"),
    );
    assert!(matches!(r, Err(Error::Schema(_))));
}

#[test]
fn replay_into_the_wrong_world_fails() {
    let (demo, _) = teleop_demos(&WorldConfig::default_gather(), &gather_traj(), [0]).remove(0);
    let mut backend = SimBackend::new(Simulator::with_defaults(WorldConfig::default_shelf()).unwrap());
    let r = replay(&demo, &mut backend, 1.0, &mut VirtualClock::new());
    assert!(matches!(r, Err(Error::WorldType { .. })));
}

#[test]
fn rate_scale_halves_the_duration() {
    let (demo, _) = teleop_demos(&WorldConfig::default_gather(), &gather_traj(), [0]).remove(0);
    let world = WorldConfig::default_gather();
    let mut elapsed = Vec::new();
    let mut states = Vec::new();
    for scale in [1.0, 2.0] {
        let mut backend = SimBackend::new(Simulator::with_defaults(world.clone()).unwrap());
        let mut clock = VirtualClock::new();
        replay(&demo, &mut backend, scale, &mut clock).unwrap();
        elapsed.push(clock.now_ns());
        states.push(backend.into_state());
    }
    assert_eq!(elapsed[0], demo.frames.last().unwrap().t);
    assert_eq!(elapsed[1], elapsed[0] / 2);
    assert_eq!(states[0], states[1]);
}

#[test]
fn replay_clamps_out_of_range_joints() {
    let (mut demo, _) = teleop_demos(&WorldConfig::default_gather(), &gather_traj(), [0]).remove(0);
    demo.frames[5].joint_pos[0] = 100.0;
    let mut backend = SimBackend::new(Simulator::with_defaults(WorldConfig::default_gather()).unwrap());
    let out = replay(&demo, &mut backend, 1.0, &mut VirtualClock::new()).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert_eq!((out.warnings[0].frame, out.warnings[0].arm, out.warnings[0].joint), (5, ArmId::Left, 0));
}

#[test]
fn resample_grid_from_irregular_source() {
    // Frames at an irregular ~12.3 Hz average, resampled to 10 Hz.
    let (demo, _) = teleop_demos(&WorldConfig::default_gather(), &gather_traj(), [0]).remove(0);
    let mut irregular = demo.clone();
    let mut t = 0u64;
    for (i, f) in irregular.frames.iter_mut().enumerate() {
        t += if i % 3 == 0 { 70_000_000 } else { 85_000_000 };
        f.t = t;
    }
    let span = (irregular.frames.last().unwrap().t - irregular.frames[0].t) as f64 / 1e9;
    let r = resample(&irregular, 10.0).unwrap();
    assert_eq!(r.frames.len(), (span * 10.0).floor() as usize + 1);
    assert!(r.frames.windows(2).all(|w| w[1].t - w[0].t == 100_000_000));

    let own = resample(&demo, 5.0).unwrap();
    for (a, b) in own.frames.iter().zip(&demo.frames) {
        assert_eq!(a.t, b.t);
        for (x, y) in a.joint_pos.iter().zip(&b.joint_pos) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

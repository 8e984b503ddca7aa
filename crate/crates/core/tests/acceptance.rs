//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use exo_core::calibration::{map_encoder_to_joint, JointCalibration, JointConstraint};
use exo_core::config::default_chain_config;
use exo_core::control::{run_teleop_session, LoopConfig, SimulatedEncoderSource, VirtualClock};
use exo_core::metrics::{aggregate, ball_credit, score_gather_world, score_stage_flags, EDGE_TOLERANCE};
use exo_core::model::{default_resolution_rad, ArmId};
use exo_core::policy::{build_database, fuse, knn_predict, knn_predict_with_eps, nearest, DatasetAssembly, PolicyConfig, DEFAULT_FEATURIZER};
use exo_core::recorder::{replay, Demonstration, Domain};
use exo_core::scripted::{gather_demo, record_scripted_in_the_wild, shelf_demo, GatherScript};
use exo_core::sim::collision::{capsule_distance, Capsule};
use exo_core::sim::{Ball, CurtainedShelfWorld, GatherBallsWorld, SimBackend, Simulator, StageFlags, WorldConfig};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, budget_s: f64) -> Result<Duration, String> {
    let e = start.elapsed();
    check(e.as_secs_f64() < budget_s, format!("took {:.2} s, budget {budget_s} s", e.as_secs_f64()))?;
    Ok(e)
}

fn joint_mapping() -> Outcome {
    let start = Instant::now();
    let res = default_resolution_rad();
    let hand = map_encoder_to_joint(&JointCalibration::new(0.0, 0, 1.0, -3.0, 3.0).unwrap(), 500, res, None);
    check((hand - 500.0 * 0.08f64.to_radians()).abs() < 1e-12, format!("500 ticks mapped to {hand}"))?;
    check((hand - 0.6981317).abs() < 1e-7, format!("500 ticks mapped to {hand}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10_000 {
        let lo = rng.gen_range(-3.0..0.0);
        let hi = rng.gen_range(0.0..3.0);
        let q_c = rng.gen_range(lo..=hi);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let k = sign * rng.gen_range(0.5..2.0);
        let p_c = rng.gen_range(-100_000..100_000);
        let cal = JointCalibration::new(q_c, p_c, k, lo, hi).unwrap();
        let constraint = rng.gen_bool(0.5).then(|| {
            let a = rng.gen_range(lo..hi);
            let b = rng.gen_range(a..=hi);
            JointConstraint { q_min: a, q_max: b, k: rng.gen_bool(0.3).then(|| sign * rng.gen_range(0.5..2.0)) }
        });
        let (alo, ahi, ak) = match &constraint {
            Some(c) => (c.q_min, c.q_max, c.k.unwrap_or(k)),
            None => (lo, hi, k),
        };
        let p = rng.gen_range(-200_000..200_000);
        let q = map_encoder_to_joint(&cal, p, res, constraint.as_ref());
        check(q >= alo && q <= ahi, format!("case {case}: {q} outside [{alo}, {ahi}]"))?;
        let want = eq_joint(q_c, p_c, ak, p, res, alo, ahi);
        check(q == want, format!("case {case}: {q} != oracle {want}"))?;
        let q2 = map_encoder_to_joint(&cal, p + rng.gen_range(1..500), res, constraint.as_ref());
        let monotone = if ak > 0.0 { q2 >= q } else { q2 <= q };
        check(monotone, format!("case {case}: not monotone for k={ak}"))?;
    }
    let e = within(start, 5.0)?;
    Ok(format!("10000 fuzzed cases, 500 ticks -> {hand:.10} rad, {:.2} s", e.as_secs_f64()))
}

fn protocol_cadence() -> Outcome {
    let cal = calibration();
    let world = WorldConfig::default_gather();
    let mut backend = SimBackend::new(Simulator::with_defaults(world.clone()).unwrap());
    let home = world.home.clone();
    let ticks = exo_core::calibration::ticks_for_pose(&cal, [&home.left, &home.right], default_resolution_rad());
    let mut source =
        SimulatedEncoderSource::generator(30.0, 61.0, default_resolution_rad(), move |_| ticks.clone()).unwrap();
    let out = run_teleop_session(
        &mut source,
        &cal,
        None,
        &mut backend,
        &LoopConfig::default(),
        world.protocol.time_limit_s,
        &mut VirtualClock::new(),
        &mut |_, _| {},
    )
    .map_err(|e| e.to_string())?;
    check(out.stats.ticks_executed == 300, format!("gather session ran {} ticks", out.stats.ticks_executed))?;

    let shelf = WorldConfig::default_shelf();
    let sim = Simulator::with_defaults(shelf.clone()).unwrap();
    let object = sim.reset().world.shelf().unwrap().object_pose.position;
    let traj = shelf_demo(&shelf, &default_chain_config(), object).unwrap();
    let demos: Vec<Demonstration> = teleop_demos(&shelf, &traj, [0]).into_iter().map(|d| d.0).collect();
    let db = build_database(&DatasetAssembly::new(vec![], demos), DEFAULT_FEATURIZER, 5.0, 20).unwrap();
    let (trial, steps) = policy_trial(&db, &shelf, 0, &PolicyConfig::default());
    check(steps <= 400, format!("shelf policy ran {steps} steps"))?;
    Ok(format!(
        "gather 60 s -> 300 ticks; shelf 120 s -> {steps} policy steps (stages reached {})",
        trial.stage_flags.map_or(0, |f| f.reached())
    ))
}

fn record_replay() -> Outcome {
    let start = Instant::now();
    let world = WorldConfig::default_gather();
    let traj = gather_demo(&world, &default_chain_config(), &GatherScript::default()).unwrap();
    let (demo, recorded) = teleop_demos(&world, &traj, [3]).remove(0);
    let bytes = demo.to_bytes().map_err(|e| e.to_string())?;
    let back = Demonstration::from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(back.to_bytes().unwrap() == bytes, "file rewrite differs")?;
    check(back == demo, "decoded demonstration differs")?;

    let mut finals = Vec::new();
    for _ in 0..2 {
        let mut backend = SimBackend::with_seed(Simulator::with_defaults(world.clone()).unwrap(), 3);
        let out = replay(&back, &mut backend, 1.0, &mut VirtualClock::new()).map_err(|e| e.to_string())?;
        check(out.warnings.is_empty(), format!("{} clamping warnings", out.warnings.len()))?;
        finals.push(backend.into_state());
    }
    let exact = |a: &exo_core::sim::SimState| serde_json::to_string(a).unwrap();
    check(finals[0] == recorded && exact(&finals[0]) == exact(&recorded), "replayed final state differs from the recording")?;
    check(exact(&finals[1]) == exact(&finals[0]), "two replays differ")?;
    let e = within(start, 10.0)?;
    Ok(format!("{} frames, {} bytes, final state identical, {:.2} s", demo.frames.len(), bytes.len(), e.as_secs_f64()))
}

fn metrics_conformance() -> Outcome {
    let tri = WorldConfig::default_gather().gather().unwrap().triangle;
    let world = |balls: Vec<Ball>| GatherBallsWorld {
        balls,
        triangle: tri,
        table: exo_core::sim::Rect { x: [0.0, 2.0], y: [-1.0, 1.0] },
        table_z: 0.0,
        ball_radius: 0.015,
    };
    let inside = [0.5, 0.0];
    let outside = [1.5, 0.5];
    let on_line = [tri[0][0], -0.1];
    let mut balls = Vec::new();
    for i in 0..40 {
        balls.push(Ball { position: if i < 35 { inside } else { outside }, cluster: ArmId::Left });
    }
    for i in 0..40 {
        let position = match i {
            0..=19 => inside,
            20 => on_line,
            _ => outside,
        };
        balls.push(Ball { position, cluster: ArmId::Right });
    }
    let r = score_gather_world(&world(balls.clone()), false, 60.0, false);
    check(r.completion_left == 35.0 / 40.0, format!("left {}", r.completion_left))?;
    check(r.completion_right == 20.5 / 40.0, format!("right {}", r.completion_right))?;
    check(r.completion_overall == (35.0 + 20.5) / 80.0, format!("overall {}", r.completion_overall))?;
    check(r.success(0.4) && r.success(0.6) && !r.success(0.8), "thresholds at 69.375%")?;

    let all_in = score_gather_world(&world(balls.iter().map(|b| Ball { position: inside, ..b.clone() }).collect()), false, 60.0, false);
    check(all_in.completion_overall == 1.0 && all_in.success(0.8), "full completion")?;
    let fresh = Simulator::with_defaults(WorldConfig::default_gather()).unwrap().reset();
    let untouched = exo_core::metrics::score_gather_balls(&fresh, 0.0, false).unwrap();
    check(untouched.completion_overall == 0.0 && !untouched.success(0.4), "reset world scores 0")?;
    let nudged = [on_line[0] + 2.0 * EDGE_TOLERANCE, on_line[1]];
    check(ball_credit(on_line, &tri) == 0.5 && ball_credit(nudged, &tri) == 1.0, "half-ball nudge")?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shelf_cfg = WorldConfig::default_shelf();
    let mut stage_trials = Vec::new();
    for n in 0..1000 {
        let balls: Vec<Ball> = (0..80)
            .map(|i| {
                let cluster = if i < 40 { ArmId::Left } else { ArmId::Right };
                let position = if rng.gen_bool(0.1) {
                    let e = rng.gen_range(0..3);
                    let (a, b) = (tri[e], tri[(e + 1) % 3]);
                    let s = rng.gen_range(0.0..1.0);
                    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
                } else {
                    [rng.gen_range(0.1..1.2), rng.gen_range(-0.6..0.6)]
                };
                Ball { position, cluster }
            })
            .collect();
        let w = world(balls.clone());
        let t = score_gather_world(&w, rng.gen_bool(0.1), 60.0, false);
        let credit = |c: ArmId| balls.iter().filter(|b| b.cluster == c).map(|b| triangle_credit(b.position, &tri, EDGE_TOLERANCE)).sum::<f64>();
        let (l, rr) = (credit(ArmId::Left), credit(ArmId::Right));
        check(t.completion_overall == (l + rr) / 80.0, format!("trial {n}: overall {} vs oracle {}", t.completion_overall, (l + rr) / 80.0))?;
        check((0.0..=1.0).contains(&t.completion_left) && (0.0..=1.0).contains(&t.completion_right), "side range")?;
        check(t.success(0.4) >= t.success(0.6) && t.success(0.6) >= t.success(0.8), format!("trial {n}: thresholds not monotone"))?;

        let mut shelf = CurtainedShelfWorld::reset(shelf_cfg.shelf().unwrap(), n as u64);
        for _ in 0..rng.gen_range(0..12) {
            shelf.latch(std::array::from_fn(|_| rng.gen_bool(0.5)));
        }
        check(shelf.stage_flags.is_monotone(), format!("trial {n}: flags not monotone"))?;
        stage_trials.push(score_stage_flags(shelf.stage_flags, false, 120.0, false));
    }
    for batch in stage_trials.chunks(50) {
        let report = aggregate(batch).map_err(|e| e.to_string())?;
        let rates: Vec<f64> = report.stage_success.iter().map(|s| s.1).collect();
        check(rates.windows(2).all(|w| w[0] >= w[1]), format!("stage rates not monotone: {rates:?}"))?;
    }
    let flags = StageFlags::from_array([true, true, true, false, false]);
    check(score_stage_flags(flags, false, 1.0, false).stage_flags.unwrap().reached() == 3, "TTTFF")?;
    Ok("69.375% example exact, success at 40/60 only; 1000 fuzzed trials monotone".into())
}

fn knn_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.gen_range(20..=1000);
        let dim = rng.gen_range(1..=16);
        let h = rng.gen_range(1..=4);
        let adim = rng.gen_range(1..=3);
        let mut entries: Vec<_> = (0..n)
            .map(|_| {
                let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let c: Vec<Vec<f64>> = (0..h).map(|_| (0..adim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
                let d = if rng.gen_bool(0.5) { Domain::Teleoperated } else { Domain::InTheWild };
                entry(f, c, d)
            })
            .collect();
        // Duplicated features exercise the tie rule.
        for _ in 0..rng.gen_range(0..10) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            entries[b].feature = entries[a].feature.clone();
        }
        let db = database(entries);
        for k in [1, 5, 20] {
            let query: Vec<f64> = if rng.gen_bool(0.2) {
                db.entries[rng.gen_range(0..n)].feature.clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let w = rng.gen_range(1.0..5.0);
            let got = knn_predict(&db, &query, k, w).unwrap();
            let idx: Vec<usize> = nearest(&db, &query, k, w).unwrap().iter().map(|n| n.index).collect();
            let (want_idx, want) = knn_oracle(&db, &query, k, w, exo_core::policy::KERNEL_EPS);
            check(idx == want_idx, format!("case {case} k={k}: neighbors differ"))?;
            check(got == want, format!("case {case} k={k}: prediction differs"))?;
        }
    }
    let db = database(vec![
        entry(vec![1.0], vec![vec![0.0]], Domain::InTheWild),
        entry(vec![-3.0], vec![vec![4.0]], Domain::InTheWild),
    ]);
    let v = knn_predict_with_eps(&db, &[0.0], 2, 1.0, 0.0).unwrap()[0][0];
    check((v - 1.0).abs() < 1e-12, format!("inverse-distance example gave {v}"))?;
    Ok(format!("100 random databases x k in {{1,5,20}} exact; example -> {v}"))
}

fn temporal_ensemble() -> Outcome {
    let v = fuse(&[(0, &[1.0]), (1, &[2.0]), (2, &[3.0])], 0.01).unwrap()[0];
    check((v - 1.99333).abs() < 1e-5, format!("3-chunk example gave {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10_000 {
        let n = rng.gen_range(1..=20);
        let dim = rng.gen_range(1..=16);
        let mut ages: Vec<u32> = (0..40).collect();
        for i in (1..ages.len()).rev() {
            ages.swap(i, rng.gen_range(0..=i));
        }
        let preds: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let input: Vec<(u32, &[f64])> = preds.iter().enumerate().map(|(i, p)| (ages[i], p.as_slice())).collect();
        let k = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) };
        let out = fuse(&input, k).unwrap();
        for d in 0..dim {
            let lo = preds.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = preds.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            check(out[d] >= lo && out[d] <= hi, format!("case {case}: {} outside [{lo}, {hi}]", out[d]))?;
        }
        let flat = fuse(&input, 0.0).unwrap();
        for d in 0..dim {
            let mean = preds.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            check(flat[d] == mean, format!("case {case}: k=0 gave {} vs mean {mean}", flat[d]))?;
        }
    }
    Ok(format!("example -> {v:.6}; 10000 fuzzed buffers convex; k=0 is the mean"))
}

fn self_imitation() -> Outcome {
    let start = Instant::now();
    let world = WorldConfig::default_gather();
    let traj = gather_demo(&world, &default_chain_config(), &GatherScript::default()).unwrap();
    let demos = teleop_demos(&world, &traj, 0..5);
    let own: Vec<f64> = demos
        .iter()
        .map(|(_, s)| exo_core::metrics::score_gather_balls(s, 60.0, false).unwrap().completion_overall)
        .collect();
    let own_mean = own.iter().sum::<f64>() / own.len() as f64;
    let db = build_database(
        &DatasetAssembly::new(vec![], demos.into_iter().map(|d| d.0).collect()),
        DEFAULT_FEATURIZER,
        5.0,
        20,
    )
    .unwrap();
    let policy = PolicyConfig { k: 5, ..PolicyConfig::default() };
    let trials: Vec<_> = (0..10).map(|i| policy_trial(&db, &world, i % 5, &policy).0).collect();
    let mean = trials.iter().map(|t| t.completion_overall).sum::<f64>() / trials.len() as f64;
    check(trials.iter().all(|t| !t.collided), "policy collided")?;
    check(mean >= 0.9 * own_mean, format!("policy {mean:.4} < 90% of scripted {own_mean:.4}"))?;
    let e = within(start, 60.0)?;
    Ok(format!("scripted {own_mean:.4}, policy {mean:.4} over 10 trials, no collisions, {:.2} s", e.as_secs_f64()))
}

fn two_stage_benefit() -> Outcome {
    let world = WorldConfig::default_gather();
    let chains = default_chain_config();
    let cal = calibration();
    let in_the_wild: Vec<Demonstration> = (0..20)
        .map(|i| {
            let s = GatherScript { sweep_speed: 0.4 + 0.01 * i as f64, sweep_height: 0.05 + 0.0005 * i as f64, ..Default::default() };
            record_scripted_in_the_wild(&world, &gather_demo(&world, &chains, &s).unwrap(), &cal, &format!("itw-{i}")).unwrap()
        })
        .collect();
    let policy = PolicyConfig::default();
    let mean_completion = |pretrain: Vec<Demonstration>, finetune: Vec<Demonstration>| {
        let db = build_database(&DatasetAssembly::new(pretrain, finetune), DEFAULT_FEATURIZER, 5.0, 20).unwrap();
        (100..110).map(|seed| policy_trial(&db, &world, seed, &policy).0.completion_overall).sum::<f64>() / 10.0
    };
    let mut lines = Vec::new();
    for (label, script) in [("both arms", GatherScript::default()), ("left arm only", GatherScript { right: false, ..Default::default() })] {
        let traj = gather_demo(&world, &chains, &script).unwrap();
        let tds: Vec<Demonstration> = teleop_demos(&world, &traj, 0..2).into_iter().map(|d| d.0).collect();
        let alone = mean_completion(vec![], tds.clone());
        let mixed = mean_completion(in_the_wild.clone(), tds);
        if script.right {
            check(mixed >= alone, format!("{label}: {mixed:.4} < {alone:.4}"))?;
        } else {
            check(mixed > alone, format!("{label}: {mixed:.4} <= {alone:.4}"))?;
        }
        lines.push(format!("{label} {alone:.4} -> {mixed:.4}"));
    }
    Ok(lines.join("; "))
}

fn collision_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut p = || [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        let (a1, b1, a2, b2) = (p(), p(), p(), p());
        let c1 = Capsule { a: a1, b: b1, radius: rng.gen_range(0.01..0.1) };
        let c2 = Capsule { a: a2, b: b2, radius: rng.gen_range(0.01..0.1) };
        let exact = capsule_distance(&c1, &c2);
        let sampled = capsule_distance_oracle(&c1, &c2);
        worst = worst.max((exact - sampled).abs());
        check((exact - sampled).abs() <= 1e-6, format!("case {case}: analytic {exact} vs sampled {sampled}"))?;
        if exact.abs() > 1e-6 {
            check(exact.signum() == sampled.signum(), format!("case {case}: sign differs"))?;
        }
    }
    Ok(format!("100 random pairs, max |analytic - sampled| = {worst:.2e} m"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("joint mapping conformance", joint_mapping),
        ("protocol cadence", protocol_cadence),
        ("record/replay determinism", record_replay),
        ("metrics conformance", metrics_conformance),
        ("k-NN oracle equivalence", knn_oracle_equivalence),
        ("temporal ensemble", temporal_ensemble),
        ("self-imitation regression", self_imitation),
        ("two-stage benefit", two_stage_benefit),
        ("collision oracle", collision_oracle),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

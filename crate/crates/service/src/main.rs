use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exo_core::calibration::{load_task_constraints, CalibrationRecord, TaskConstraint};
use exo_core::config::{default_arms, default_capture, DualChain};
use exo_core::control::{run_teleop_session, Clock, LoopConfig, SimulatedEncoderSource, VirtualClock, WallClock, DEFAULT_SOURCE_HZ};
use exo_core::kinematics::DualChainConfig;
use exo_core::metrics::{aggregate, score_state, Episode};
use exo_core::model::EncoderFrame;
use exo_core::policy::{build_database, run_policy, DatasetAssembly, NeighborDatabase, DEFAULT_FEATURIZER};
use exo_core::recorder::{record_in_the_wild, record_teleop, recorded_world, replay, resample, Demonstration, RecordingMeta};
use exo_core::scripted::{scripted_calibration, scripted_operator};
use exo_core::sim::{SimBackend, Simulator, WorldConfig};

use exo_service::error::{Result, ServiceError};
use exo_service::server::{bind, serve};
use exo_service::session::{ServiceCore, SessionSetup};
use exo_service::settings::Settings;

#[derive(Parser)]
#[command(name = "exo", version, about = "Dual-arm exoskeleton teleoperation toolkit")]
struct Cli {
    /// TOML settings shared by every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a calibration captured at the all-zero pose.
    Calibrate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        base_tick: i64,
    },
    /// Drive the simulator from an encoder stream.
    Teleop(TeleopArgs),
    /// Record a demonstration to a file.
    Record(RecordArgs),
    /// Play a demonstration back into the simulator.
    Replay {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        rate_scale: f64,
        /// World to replay into; defaults to the one stored in the file.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        virtual_time: bool,
    },
    /// Inspect or resample demonstration files.
    Demo {
        #[command(subcommand)]
        command: DemoCommand,
    },
    /// Build neighbor databases.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Run the nearest-neighbor policy.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Score stored episodes and print the report table.
    Eval {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Serve live sessions over WebSocket.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        cal: PathBuf,
        #[arg(long)]
        task_constraint: Option<String>,
        #[arg(long)]
        virtual_time: bool,
    },
}

#[derive(Args)]
struct TeleopArgs {
    #[arg(long)]
    cal: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long)]
    virtual_time: bool,
    #[arg(long)]
    task_constraint: Option<String>,
    /// JSON list of encoder frames; the scripted operator when absent.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    session: TeleopArgs,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    id: Option<String>,
    /// Exoskeleton only: joints come from the calibration, no robot.
    #[arg(long)]
    in_the_wild: bool,
}

#[derive(Subcommand)]
enum DemoCommand {
    Info { file: PathBuf },
    Resample {
        file: PathBuf,
        #[arg(long)]
        hz: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build {
        /// Directory of in-the-wild demonstrations.
        #[arg(long)]
        pretrain: Option<PathBuf>,
        /// Directory of teleoperated demonstrations.
        #[arg(long)]
        finetune: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        hz: f64,
        #[arg(long, default_value_t = 20)]
        chunk: usize,
        #[arg(long, default_value = DEFAULT_FEATURIZER)]
        featurizer: String,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    Run {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        trials: u64,
        /// First trial seed; trial i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write each trial's episode here for `exo eval`.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Gather,
    Shelf,
}

impl Task {
    fn id(self) -> &'static str {
        match self {
            Task::Gather => "gather_balls",
            Task::Shelf => "curtained_shelf",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("exo: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::from_process(cli.config.as_deref())?;
    match cli.command {
        Command::Calibrate { out, base_tick } => {
            let cal = scripted_calibration(&default_arms(), &default_capture(), base_tick)?;
            cal.save(&out)?;
            println!("{} -> {}", cal.id(), out.display());
        }
        Command::Teleop(args) => teleop(&settings, &args)?,
        Command::Record(args) => record(&settings, &args)?,
        Command::Replay { demo, rate_scale, world, virtual_time } => {
            let demo = Demonstration::load(&demo)?;
            let (world, seed) = match world {
                Some(p) => {
                    let w = WorldConfig::load(p)?;
                    let seed = recorded_world(&demo).map_or(w.seed, |(_, s)| s);
                    (w, seed)
                }
                None => recorded_world(&demo)?,
            };
            let mut backend = SimBackend::with_seed(simulator(&settings, &world)?, seed);
            let out = replay(&demo, &mut backend, rate_scale, clock(virtual_time).as_mut())?;
            for w in &out.warnings {
                eprintln!("frame {}: {} joint {} clamped from {}", w.frame, w.arm, w.joint, w.value);
            }
            println!("replayed {} frames ({} clamped)", out.stats.ticks_executed, out.warnings.len());
            let duration = out.stats.ticks_executed as f64 / settings.control.control_rate_hz;
            print_json(&score_state(backend.state(), duration, false)?)?;
        }
        Command::Demo { command } => match command {
            DemoCommand::Info { file } => {
                let d = Demonstration::load(&file)?;
                print_json(&serde_json::json!({
                    "header": d.header,
                    "frames": d.frames.len(),
                    "duration_s": d.duration_s(),
                    "mean_hz": d.mean_hz(),
                    "frame_stride_bytes": d.header.dims.stride,
                }))?;
            }
            DemoCommand::Resample { file, hz, out } => {
                let r = resample(&Demonstration::load(&file)?, hz)?;
                r.save(&out)?;
                println!("{} frames at {hz} Hz -> {}", r.frames.len(), out.display());
            }
        },
        Command::Dataset { command: DatasetCommand::Build { pretrain, finetune, hz, chunk, featurizer, out } } => {
            if pretrain.is_none() && finetune.is_none() {
                return Err(ServiceError::Config("give --pretrain, --finetune or both".into()));
            }
            let load = |d: &Option<PathBuf>| d.as_deref().map_or(Ok(Vec::new()), load_demos);
            let mut assembly = DatasetAssembly::new(load(&pretrain)?, load(&finetune)?);
            assembly.domain_weight = settings.policy.domain_weight;
            let db = build_database(&assembly, &featurizer, hz, chunk)?;
            db.save(&out)?;
            println!("{} entries ({} teleoperated) -> {}", db.len(), db.count(exo_core::recorder::Domain::Teleoperated), out.display());
        }
        Command::Policy { command: PolicyCommand::Run { db, world, k, trials, seed, episodes } } => {
            let db = NeighborDatabase::load(&db)?;
            let world = WorldConfig::load(&world)?;
            let mut policy = settings.policy.clone();
            if let Some(k) = k {
                policy.k = k;
            }
            let cfg = LoopConfig { max_steps: world.protocol.max_steps, ..settings.control.clone() };
            let chains = chains(&settings)?;
            if let Some(dir) = &episodes {
                std::fs::create_dir_all(dir)?;
            }
            let mut results = Vec::new();
            for s in seed..seed + trials {
                let mut backend = SimBackend::with_seed(simulator(&settings, &world)?, s);
                let meta = RecordingMeta::new(format!("policy-{s}"), world.kind()).with_world(&world, s);
                let ep = run_policy(&db, &mut backend, &chains, &cfg, &policy, world.protocol.time_limit_s, &mut VirtualClock::new(), &meta)?;
                let episode = Episode {
                    task_id: world.kind().into(),
                    seed: s,
                    duration_s: ep.outcome.stats.ticks_executed as f64 / cfg.control_rate_hz,
                    aborted: ep.outcome.aborted.is_some(),
                    final_state: backend.into_state(),
                };
                if let Some(dir) = &episodes {
                    std::fs::write(dir.join(format!("episode-{s}.json")), serde_json::to_string(&episode)?)?;
                }
                results.push(episode.score()?);
            }
            println!("{}", aggregate(&results)?.table());
        }
        Command::Eval { episodes, task, out } => {
            let mut trials = Vec::new();
            for path in sorted_files(&episodes, "json")? {
                let ep: Episode = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                if ep.task_id != task.id() {
                    return Err(ServiceError::Config(format!("{} is a {} episode, not {}", path.display(), ep.task_id, task.id())));
                }
                trials.push(ep.score()?);
            }
            let report = aggregate(&trials)?;
            std::fs::write(&out, report.to_json()?)?;
            println!("{}", report.table());
        }
        Command::Serve { port, host, world, cal, task_constraint, virtual_time } => {
            let mut setup = SessionSetup::new(WorldConfig::load(world)?, CalibrationRecord::load(cal)?, &settings.service.data_dir);
            setup.constraint = constraint(&settings, task_constraint.as_deref())?;
            setup.chains = chains(&settings)?;
            setup.control = settings.control.clone();
            setup.state_decimation = settings.service.state_decimation;
            setup.virtual_time = virtual_time;
            let core = ServiceCore::new(setup)?;
            let port = port.unwrap_or(settings.service.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = bind(&host, port).await?;
                println!("exo: serving {} on ws://{}", exo_service::WIRE_SCHEMA, listener.local_addr()?);
                serve(listener, core, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
    }
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn clock(virtual_time: bool) -> Box<dyn Clock> {
    if virtual_time {
        Box::new(VirtualClock::new())
    } else {
        Box::new(WallClock::new())
    }
}

fn chains(settings: &Settings) -> Result<DualChain> {
    Ok(match &settings.chains {
        Some(p) => DualChain::new(&DualChainConfig::load(p)?)?,
        None => DualChain::default(),
    })
}

fn simulator(settings: &Settings, world: &WorldConfig) -> Result<Simulator> {
    Ok(Simulator::new(default_arms(), chains(settings)?, world.clone())?)
}

fn constraint(settings: &Settings, id: Option<&str>) -> Result<Option<TaskConstraint>> {
    let Some(id) = id.or(settings.control.task_constraint.as_deref()) else {
        return Ok(None);
    };
    let Some(path) = &settings.constraints else {
        return Err(ServiceError::Config(format!("task constraint '{id}' given but no constraints file is configured")));
    };
    let mut table = load_task_constraints(&std::fs::read_to_string(path)?)?;
    table.remove(id).map(Some).ok_or_else(|| ServiceError::Config(format!("no task constraint '{id}' in {}", path.display())))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn load_demos(dir: &Path) -> Result<Vec<Demonstration>> {
    sorted_files(dir, "demo")?.iter().map(|p| Ok(Demonstration::load(p)?)).collect()
}

fn session_parts(settings: &Settings, args: &TeleopArgs) -> Result<(CalibrationRecord, WorldConfig, LoopConfig, SimulatedEncoderSource)> {
    let cal = CalibrationRecord::load(&args.cal)?;
    let world = WorldConfig::load(&args.world)?;
    let mut cfg = settings.control.clone();
    if let Some(rate) = args.rate {
        cfg.control_rate_hz = rate;
    }
    if args.task_constraint.is_some() {
        cfg.task_constraint = args.task_constraint.clone();
    }
    let frames = match &args.script {
        Some(p) => serde_json::from_str::<Vec<EncoderFrame>>(&std::fs::read_to_string(p)?)?,
        None => {
            let seed = args.seed.unwrap_or(world.seed);
            scripted_operator(&world, &chains(settings)?.config(), seed)?.encoder_script(&cal, DEFAULT_SOURCE_HZ)?
        }
    };
    Ok((cal, world, cfg, SimulatedEncoderSource::from_frames(frames)?))
}

fn teleop(settings: &Settings, args: &TeleopArgs) -> Result<()> {
    let (cal, world, cfg, mut source) = session_parts(settings, args)?;
    let constraint = constraint(settings, cfg.task_constraint.as_deref())?;
    let seed = args.seed.unwrap_or(world.seed);
    let mut backend = SimBackend::with_seed(simulator(settings, &world)?, seed);
    let out = run_teleop_session(
        &mut source,
        &cal,
        constraint.as_ref(),
        &mut backend,
        &cfg,
        args.duration,
        clock(args.virtual_time).as_mut(),
        &mut |_, _| {},
    )?;
    println!(
        "{}: {} ticks, {} stale, {} clamped, p99 period error {:.3} ms",
        out.session_id,
        out.stats.ticks_executed,
        out.stats.dropped_frames,
        out.stats.clamped_commands,
        out.stats.p99_period_error_ms
    );
    let duration = out.stats.ticks_executed as f64 / cfg.control_rate_hz;
    print_json(&score_state(backend.state(), duration, out.aborted.is_some())?)
}

fn record(settings: &Settings, args: &RecordArgs) -> Result<()> {
    let s = &args.session;
    let (cal, world, cfg, mut source) = session_parts(settings, s)?;
    let constraint = constraint(settings, cfg.task_constraint.as_deref())?;
    let seed = s.seed.unwrap_or(world.seed);
    let id = args.id.clone().unwrap_or_else(|| {
        args.out.file_stem().map_or("demo".into(), |f| f.to_string_lossy().into_owned())
    });
    let chains = chains(settings)?;
    let mut clock = clock(s.virtual_time);
    let demo = if args.in_the_wild {
        let meta = RecordingMeta::new(id, world.kind());
        record_in_the_wild(&mut source, Some(&cal), constraint.as_ref(), &chains, &cfg, s.duration, clock.as_mut(), &meta)?
    } else {
        let meta = RecordingMeta::new(id, world.kind()).with_world(&world, seed);
        let mut backend = SimBackend::with_seed(simulator(settings, &world)?, seed);
        let cfg = LoopConfig { max_steps: cfg.max_steps.or(world.protocol.max_steps), ..cfg };
        record_teleop(&mut source, &cal, constraint.as_ref(), &mut backend, &chains, &cfg, s.duration, clock.as_mut(), &meta)?.0
    };
    demo.save(&args.out)?;
    println!("{} ({}): {} frames over {:.2} s -> {}", demo.id(), demo.domain().as_str(), demo.frames.len(), demo.duration_s(), args.out.display());
    Ok(())
}

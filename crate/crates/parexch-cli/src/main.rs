//! `parexch` — run data-parallel SGD experiments, benchmark exchange
//! strategies, generate batch-file corpora, and probe collectives across
//! backends.

use clap::{Args, Parser, Subcommand};
use parexch::collectives::ExchangeStrategy;
use parexch::data::{
    mean_of_batches, write_mean_file, write_synthetic_batches, CropSpec, SyntheticFilesSpec,
};
use parexch::models::ModelKind;
use parexch::optim::CombineScheme;
use parexch::scalar::Scalar;
use parexch::train::{run_inproc, train_entry, DataSource, ScheduleKind, TrainMode, TrainOutcome};
use parexch::transport::{spawn_world, tcp};
use parexch::util::hash_values;
use parexch::{Error, Result};
use parexch_cli::bench::{bench_exchange, preset_param_count, render_row};
use parexch_cli::probe::{render_case, run_probe};
use parexch_cli::stats::{emit_stats, summary_json};
use parexch_cli::{Backend, ExperimentConfig, Precision};
use std::path::PathBuf;
use std::time::Duration;

#[derive(Parser)]
#[command(
    name = "parexch",
    version,
    about = "Data-parallel SGD with instrumented parameter exchange"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment (one process for inproc, one rank for tcp)
    Run(RunArgs),
    /// Spawn a local TCP world: one OS process per rank, then wait
    Launch(RunArgs),
    /// Time exchange strategies and report exact per-rank payload bytes
    Bench(BenchArgs),
    /// Generate a synthetic batch-file corpus (train, val, labels, mean)
    GenData(GenDataArgs),
    /// Run the collective case matrix and print result fingerprints
    ProbeCollectives(ProbeArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config file (key=value); the flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// bsp | easgd
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// subgd | awagd
    #[arg(long)]
    scheme: Option<String>,
    /// ar | asa | asa16
    #[arg(long)]
    strategy: Option<String>,
    /// constant | step | poly
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long = "max-iterations")]
    max_iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// EASGD moving rate
    #[arg(long)]
    alpha: Option<f64>,
    /// EASGD averaging period
    #[arg(long)]
    tau: Option<u64>,
    /// linear | logistic | mlp
    #[arg(long)]
    model: Option<String>,
    /// hidden units when --model mlp
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "input-dim")]
    input_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    difficulty: Option<f64>,
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    #[arg(long = "hash-every")]
    hash_every: Option<u64>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    /// inproc | tcp
    #[arg(long)]
    backend: Option<String>,
    /// train from batch files in this directory instead of synthetic data
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    #[arg(long = "crop-h")]
    crop_h: Option<usize>,
    #[arg(long = "crop-w")]
    crop_w: Option<usize>,
    /// stats CSV path; "{rank}" in the path expands per rank
    #[arg(long)]
    out: Option<String>,
    /// tcp mode: this process's rank
    #[arg(long)]
    rank: Option<usize>,
    /// tcp mode: rendezvous host:port (defaults to $PAREXCH_RENDEZVOUS)
    #[arg(long)]
    rendezvous: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// buffer length P
    #[arg(long = "param-count")]
    param_count: Option<usize>,
    /// alexnet | googlenet | vggnet
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// ar | asa | asa16; all three when omitted
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "train-batches", default_value_t = 16)]
    train_batches: usize,
    #[arg(long = "val-batches", default_value_t = 4)]
    val_batches: usize,
    #[arg(long = "per-batch", default_value_t = 32)]
    per_batch: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    difficulty: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// inproc | tcp
    #[arg(long, default_value = "inproc")]
    backend: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    rendezvous: Option<String>,
}

fn apply_overrides(mut cfg: ExperimentConfig, a: &RunArgs) -> Result<ExperimentConfig> {
    let bad = |key: &str, value: &str| Error::InvalidConfig(format!("bad --{key}: {value:?}"));
    if let Some(v) = &a.mode {
        cfg.train.mode = TrainMode::parse(v).ok_or_else(|| bad("mode", v))?;
    }
    if let Some(v) = a.workers {
        cfg.train.workers = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.per_worker_batch = v;
    }
    if let Some(v) = &a.scheme {
        cfg.train.scheme = CombineScheme::parse(v).ok_or_else(|| bad("scheme", v))?;
    }
    if let Some(v) = &a.strategy {
        cfg.train.strategy = ExchangeStrategy::parse(v).ok_or_else(|| bad("strategy", v))?;
    }
    if let Some(v) = &a.schedule {
        cfg.train.schedule = ScheduleKind::parse(v).ok_or_else(|| bad("schedule", v))?;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.train.momentum = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.max_iterations {
        cfg.train.max_iterations = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.alpha {
        cfg.train.easgd.alpha = v;
    }
    if let Some(v) = a.tau {
        cfg.train.easgd.tau = v;
    }
    if let Some(v) = &a.model {
        cfg.train.model = ModelKind::parse(v).ok_or_else(|| bad("model", v))?;
    }
    if let (ModelKind::Mlp { .. }, Some(h)) = (cfg.train.model, a.hidden) {
        cfg.train.model = ModelKind::Mlp { hidden: h };
    }
    if let Some(v) = a.input_dim {
        cfg.train.input_dim = v;
    }
    if let Some(v) = a.classes {
        cfg.train.classes = v;
    }
    if let Some(v) = a.examples {
        cfg.train.examples = v;
    }
    if let Some(v) = a.difficulty {
        cfg.train.difficulty = v;
    }
    if let Some(v) = a.val_fraction {
        cfg.train.val_fraction = v;
    }
    if let Some(v) = a.hash_every {
        cfg.train.hash_every = v;
    }
    if let Some(v) = &a.precision {
        cfg.precision = Precision::parse(v).ok_or_else(|| bad("precision", v))?;
    }
    if let Some(v) = &a.backend {
        cfg.backend = Backend::parse(v).ok_or_else(|| bad("backend", v))?;
    }
    if let Some(dir) = &a.data_dir {
        let crop = CropSpec {
            h: a.crop_h.unwrap_or(8),
            w: a.crop_w.unwrap_or(8),
        };
        cfg.train.source = DataSource::Files {
            dir: dir.clone(),
            crop,
        };
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let base = match &a.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(base, a)
}

fn report_outcome<T: Scalar>(cfg: &ExperimentConfig, outcome: &TrainOutcome<T>) -> Result<()> {
    let hash = hash_values(outcome.final_weights.as_slice());
    println!("{}", summary_json(&outcome.stats, hash));
    if let Some(out) = &cfg.out {
        let wants_all_ranks = out.contains("{rank}");
        if wants_all_ranks || outcome.stats.rank == 0 {
            emit_stats(&outcome.stats, std::path::Path::new(out), hash)?;
        }
    }
    Ok(())
}

fn run_world<T: Scalar>(cfg: &ExperimentConfig, a: &RunArgs) -> Result<()> {
    match cfg.backend {
        Backend::Inproc => {
            let outcomes = run_inproc::<T>(&cfg.train)?;
            for outcome in &outcomes {
                report_outcome(cfg, outcome)?;
            }
        }
        Backend::Tcp => {
            let rank = a
                .rank
                .ok_or_else(|| Error::InvalidConfig("tcp backend needs --rank".to_string()))?;
            let rendezvous = a
                .rendezvous
                .clone()
                .or_else(tcp::rendezvous_from_env)
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "tcp backend needs --rendezvous or $PAREXCH_RENDEZVOUS".to_string(),
                    )
                })?;
            let comm = tcp::connect(
                &rendezvous,
                rank,
                cfg.train.world_size(),
                Duration::from_secs(30),
            )?;
            let outcome = train_entry::<T>(&cfg.train, comm)?;
            report_outcome(cfg, &outcome)?;
        }
    }
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?;
    match cfg.precision {
        Precision::F32 => run_world::<f32>(&cfg, a),
        Precision::F64 => run_world::<f64>(&cfg, a),
    }
}

fn free_port() -> Result<u16> {
    let listener = std::net::TcpListener::bind(("127.0.0.1", 0))?;
    Ok(listener.local_addr()?.port())
}

fn cmd_launch(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a)?;
    cfg.backend = Backend::Tcp;
    let world = cfg.train.world_size();
    let rendezvous = format!("127.0.0.1:{}", free_port()?);

    let config_path = std::env::temp_dir().join(format!("parexch-launch-{}.cfg", std::process::id()));
    std::fs::write(&config_path, cfg.serialize())?;

    let exe = std::env::current_exe()?;
    let mut children = Vec::with_capacity(world);
    for rank in 0..world {
        let child = std::process::Command::new(&exe)
            .arg("run")
            .arg("--config")
            .arg(&config_path)
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--rendezvous")
            .arg(&rendezvous)
            .spawn()?;
        children.push((rank, child));
    }

    let mut failed = Vec::new();
    for (rank, mut child) in children {
        let status = child.wait()?;
        if !status.success() {
            failed.push(rank);
        }
    }
    let _ = std::fs::remove_file(&config_path);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::WorkerPanic {
            rank: failed[0],
            message: format!("ranks {failed:?} exited nonzero"),
        })
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let p = match (&a.preset, a.param_count) {
        (Some(name), _) => preset_param_count(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {name:?}")))?,
        (None, Some(p)) => p,
        (None, None) => 1 << 20,
    };
    let strategies: Vec<ExchangeStrategy> = match &a.strategy {
        Some(s) => vec![ExchangeStrategy::parse(s)
            .ok_or_else(|| Error::InvalidConfig(format!("bad --strategy {s:?}")))?],
        None => vec![
            ExchangeStrategy::Ar,
            ExchangeStrategy::Asa,
            ExchangeStrategy::Asa16,
        ],
    };
    for strategy in strategies {
        let row = bench_exchange(p, a.workers, strategy, a.reps)?;
        println!("{}", render_row(&row));
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let spec = SyntheticFilesSpec {
        batches: a.train_batches,
        per_batch: a.per_batch,
        c: a.channels,
        h: a.height,
        w: a.width,
        classes: a.classes,
        difficulty: a.difficulty,
        seed: a.seed,
    };
    let train_files = write_synthetic_batches(&a.out, "batch", &spec)?;
    let val_spec = SyntheticFilesSpec {
        batches: a.val_batches,
        seed: a.seed.wrapping_add(1),
        ..spec.clone()
    };
    if a.val_batches > 0 {
        write_synthetic_batches(&a.out, "val", &val_spec)?;
    }
    let train_paths: Vec<PathBuf> = train_files.iter().map(|f| a.out.join(f)).collect();
    let mean = mean_of_batches(&train_paths)?;
    write_mean_file(&a.out.join("mean.pxm"), &mean)?;
    println!(
        "wrote {} train and {} val batches of {} examples ({}x{}x{}) to {}",
        a.train_batches,
        a.val_batches,
        a.per_batch,
        a.channels,
        a.height,
        a.width,
        a.out.display()
    );
    Ok(())
}

fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    match a.backend.as_str() {
        "inproc" => {
            let seed = a.seed;
            let results = spawn_world(a.workers, move |comm| run_probe(comm, seed))?;
            for (rank, cases) in results.iter().enumerate() {
                println!("# rank {rank}");
                for case in cases {
                    println!("{}", render_case(case));
                }
            }
        }
        "tcp" => {
            let rank = a
                .rank
                .ok_or_else(|| Error::InvalidConfig("tcp probe needs --rank".to_string()))?;
            let rendezvous = a
                .rendezvous
                .clone()
                .or_else(tcp::rendezvous_from_env)
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "tcp probe needs --rendezvous or $PAREXCH_RENDEZVOUS".to_string(),
                    )
                })?;
            let comm = tcp::connect(&rendezvous, rank, a.workers, Duration::from_secs(30))?;
            for case in run_probe(comm, a.seed)? {
                println!("{}", render_case(&case));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "bad --backend {other:?} (inproc|tcp)"
            )))
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Launch(a) => cmd_launch(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::ProbeCollectives(a) => cmd_probe(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

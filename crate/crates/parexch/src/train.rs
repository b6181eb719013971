//! Training loops: synchronous BSP and asynchronous elastic averaging.
//!
//! BSP: every rank takes a minibatch from its shard, runs an SGD step, then
//! merges with the world through the configured combine scheme and exchange
//! strategy — every iteration, in lockstep. After each combine all ranks
//! hold identical weights; with `hash_every` set, that is verified by a
//! cross-rank fingerprint.
//!
//! EASGD: k workers plus one server rank holding the center variable. Each
//! worker runs SGD independently and every tau local iterations trades
//! parameter vectors with the server in a paired exchange, then both sides
//! apply the elastic update with moving rate alpha, each using the values
//! the other sent. Workers never synchronize with each other, and the
//! server services them in arrival order.

use crate::buffer::ParamBuffer;
use crate::collectives::{Exchanger, ExchangeStrategy};
use crate::data::{
    pipelined_epoch, read_label_file, read_mean_file, spawn_loader, CropSpec, LabelIndex,
    LoaderConfig, Phase, PreparedBatch,
};
use crate::error::{Error, Result};
use crate::models::{make_synthetic, Batch, Model, ModelKind};
use crate::optim::{awagd_combine, scale_lr_for_workers, subgd_combine, CombineScheme, Schedule, SgdState};
use crate::scalar::Scalar;
use crate::transport::Communicator;
use crate::util::hash_values;
use std::path::PathBuf;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Bsp,
    Easgd,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<TrainMode> {
        match s {
            "bsp" => Some(TrainMode::Bsp),
            "easgd" => Some(TrainMode::Easgd),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Bsp => "bsp",
            TrainMode::Easgd => "easgd",
        }
    }
}

/// Elastic-averaging knobs: moving rate and averaging period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EasgdParams {
    pub alpha: f64,
    pub tau: u64,
}

impl Default for EasgdParams {
    fn default() -> Self {
        EasgdParams {
            alpha: 0.5,
            tau: 1,
        }
    }
}

/// Which learning-rate schedule to build from the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Poly,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<ScheduleKind> {
        match s {
            "constant" => Some(ScheduleKind::Constant),
            "step" => Some(ScheduleKind::Step),
            "poly" => Some(ScheduleKind::Poly),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Step => "step",
            ScheduleKind::Poly => "poly",
        }
    }
}

/// Where training batches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Seeded in-memory Gaussian-blob dataset.
    Synthetic,
    /// Directory of batch files (prefix `batch`), labels and mean alongside,
    /// streamed through the parallel loading pipeline. Validation files use
    /// prefix `val` when present.
    Files { dir: PathBuf, crop: CropSpec },
}

/// Everything a training run needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Worker count k. EASGD adds one server rank on top.
    pub workers: usize,
    pub per_worker_batch: usize,
    pub scheme: CombineScheme,
    pub strategy: ExchangeStrategy,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: u64,
    /// Optional hard cap on total iterations per worker; also the horizon
    /// of the poly schedule. Defaults to epochs * iterations-per-epoch.
    pub max_iterations: Option<u64>,
    pub seed: u64,
    pub easgd: EasgdParams,
    pub model: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
    pub examples: usize,
    pub difficulty: f64,
    pub val_fraction: f64,
    pub source: DataSource,
    /// Verify cross-rank weight hashes every this many iterations (0 = off).
    pub hash_every: u64,
    /// Record the post-combine weight vector each iteration (tests only;
    /// memory scales with P * iterations).
    pub trace_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Bsp,
            workers: 1,
            per_worker_batch: 32,
            scheme: CombineScheme::Subgd,
            strategy: ExchangeStrategy::Asa,
            schedule: ScheduleKind::Constant,
            lr: 0.05,
            momentum: 0.0,
            epochs: 1,
            max_iterations: None,
            seed: 42,
            easgd: EasgdParams::default(),
            model: ModelKind::Logistic,
            input_dim: 8,
            classes: 3,
            examples: 512,
            difficulty: 1.0,
            val_fraction: 0.2,
            source: DataSource::Synthetic,
            hash_every: 0,
            trace_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::InvalidConfig("workers must be >= 1".to_string()));
        }
        if self.per_worker_batch < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".to_string()));
        }
        if self.easgd.tau < 1 {
            return Err(Error::InvalidConfig("tau must be >= 1".to_string()));
        }
        if !(self.easgd.alpha > 0.0 && self.easgd.alpha <= 1.0) {
            return Err(Error::InvalidConfig("alpha must be in (0,1]".to_string()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".to_string()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(
                "val_fraction must be in [0,1)".to_string(),
            ));
        }
        Ok(())
    }

    /// World size the transport must provide: workers, plus the EASGD server.
    pub fn world_size(&self) -> usize {
        match self.mode {
            TrainMode::Bsp => self.workers,
            TrainMode::Easgd => self.workers + 1,
        }
    }

    fn build_schedule(&self, base_lr: f64, default_horizon: u64) -> Schedule {
        match self.schedule {
            ScheduleKind::Constant => Schedule::Constant { base_lr },
            ScheduleKind::Step => Schedule::step_decay(base_lr),
            ScheduleKind::Poly => {
                Schedule::poly_decay(base_lr, self.max_iterations.unwrap_or(default_horizon).max(1))
            }
        }
    }
}

/// One training iteration's worth of measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: f64,
    pub compute_seconds: f64,
    pub exchange_seconds: f64,
    pub bytes_sent: u64,
}

/// Per-rank run log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunStats {
    pub rank: usize,
    pub records: Vec<IterationRecord>,
    pub final_val_loss: Option<f64>,
    pub final_val_error: Option<f64>,
    pub wall_seconds: f64,
    /// Parameter-vector payload messages this rank sent (EASGD exchanges).
    pub exchange_messages: u64,
}

/// What a rank hands back when its part of the run ends.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub stats: RunStats,
    pub final_weights: ParamBuffer<T>,
    pub weight_trace: Vec<Vec<T>>,
}

/// Example indices assigned to `rank`: every k-th example starting at rank.
/// Shards are disjoint, cover the dataset, and differ in size by at most 1.
pub fn shard_indices(n: usize, k: usize, rank: usize) -> Vec<usize> {
    (rank..n).step_by(k).collect()
}

/// Rank 0's buffer becomes everyone's; used to start all ranks from
/// identical weights.
pub fn broadcast_init<T: Scalar>(
    ex: &mut Exchanger,
    params: ParamBuffer<T>,
) -> Result<ParamBuffer<T>> {
    ex.broadcast(0, &params)
}

fn lockstep_check<T: Scalar>(ex: &mut Exchanger, weights: &ParamBuffer<T>) -> Result<()> {
    let k = ex.world_size();
    if k == 1 {
        return Ok(());
    }
    let mine = hash_values(weights.as_slice());
    if ex.rank() == 0 {
        let mut divergent: Option<(usize, u64)> = None;
        for peer in 1..k {
            let bytes = ex.comm_mut().recv(peer)?;
            let theirs = u64::from_le_bytes(bytes.try_into().map_err(|_| {
                Error::ProtocolViolation("malformed lockstep hash".to_string())
            })?);
            if theirs != mine && divergent.is_none() {
                divergent = Some((peer, theirs));
            }
        }
        let verdict = [u8::from(divergent.is_none())];
        for peer in 1..k {
            ex.comm_mut().send(peer, &verdict)?;
        }
        if let Some((peer, theirs)) = divergent {
            return Err(Error::CollectiveMismatch {
                peer,
                expected: format!("weight hash {mine:016x}"),
                got: format!("{theirs:016x}"),
            });
        }
    } else {
        let bytes = mine.to_le_bytes();
        ex.comm_mut().send(0, &bytes)?;
        let verdict = ex.comm_mut().recv(0)?;
        if verdict != [1] {
            return Err(Error::CollectiveMismatch {
                peer: 0,
                expected: "lockstep weights".to_string(),
                got: "cross-rank divergence".to_string(),
            });
        }
    }
    Ok(())
}

/// Shared per-iteration body of the BSP loop, independent of where the
/// batch came from.
struct BspLoop<'a, T: Scalar> {
    cfg: &'a TrainConfig,
    model: Model,
    ex: Exchanger,
    state: SgdState<T>,
    schedule: Schedule,
    iters_per_epoch: u64,
    total_iterations: u64,
    global_iter: u64,
    stats: RunStats,
    trace: Vec<Vec<T>>,
}

impl<'a, T: Scalar> BspLoop<'a, T> {
    fn done(&self) -> bool {
        self.global_iter >= self.total_iterations
    }

    fn iterate(&mut self, batch: &Batch<T>) -> Result<()> {
        let epoch = self.global_iter / self.iters_per_epoch;
        self.state.epoch = epoch;
        self.state.lr = T::of_f64(self.schedule.lr_at(epoch, self.global_iter));

        let bytes_before = self.ex.comm().total_bytes_sent();

        let compute_started = Instant::now();
        let (loss, grad) = self.model.forward_backward(&self.state.weights, batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.global_iter,
            });
        }
        let before = self.state.weights.clone();
        let v_before = self.state.velocity.clone();
        self.state.step(&grad)?;
        let compute_seconds = compute_started.elapsed().as_secs_f64();

        let exchange_started = Instant::now();
        match self.cfg.scheme {
            CombineScheme::Subgd => {
                self.state.weights = subgd_combine(
                    &mut self.ex,
                    self.cfg.strategy,
                    &before,
                    &self.state.weights,
                )?;
                // momentum buffers merge exactly like the weights they drive
                self.state.velocity = subgd_combine(
                    &mut self.ex,
                    self.cfg.strategy,
                    &v_before,
                    &self.state.velocity,
                )?;
            }
            CombineScheme::Awagd => {
                self.state.weights =
                    awagd_combine(&mut self.ex, self.cfg.strategy, &self.state.weights)?;
                self.state.velocity =
                    awagd_combine(&mut self.ex, self.cfg.strategy, &self.state.velocity)?;
            }
        }
        let exchange_seconds = exchange_started.elapsed().as_secs_f64();

        if self.cfg.hash_every > 0 && (self.global_iter + 1) % self.cfg.hash_every == 0 {
            lockstep_check(&mut self.ex, &self.state.weights)?;
        }

        self.stats.records.push(IterationRecord {
            iteration: self.global_iter,
            epoch,
            loss: loss.into_f64(),
            compute_seconds,
            exchange_seconds,
            bytes_sent: self.ex.comm().total_bytes_sent() - bytes_before,
        });
        if self.cfg.trace_weights {
            self.trace.push(self.state.weights.as_slice().to_vec());
        }
        self.global_iter += 1;
        Ok(())
    }
}

/// The synchronous data-parallel loop. Call once per rank with that rank's
/// communicator; world size must equal the configured worker count.
pub fn train_bsp<T: Scalar>(cfg: &TrainConfig, comm: Communicator) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if comm.world_size() != cfg.workers {
        return Err(Error::InvalidConfig(format!(
            "BSP world size {} != workers {}",
            comm.world_size(),
            cfg.workers
        )));
    }
    match &cfg.source {
        DataSource::Synthetic => train_bsp_synthetic(cfg, comm),
        DataSource::Files { dir, crop } => train_bsp_files(cfg, comm, dir.clone(), *crop),
    }
}

fn bsp_loop_setup<'a, T: Scalar>(
    cfg: &'a TrainConfig,
    comm: Communicator,
    model: Model,
    iters_per_epoch: u64,
) -> Result<BspLoop<'a, T>> {
    if iters_per_epoch == 0 {
        return Err(Error::InvalidConfig(
            "shard too small for one batch per epoch".to_string(),
        ));
    }
    let rank = comm.rank();
    let mut ex = Exchanger::new(comm);

    // identical initialization everywhere: rank 0's draw wins
    let init = if rank == 0 {
        model.init_params::<T>(cfg.seed ^ 0x1157)
    } else {
        ParamBuffer::zeros(model.param_count())
    };
    let params = broadcast_init(&mut ex, init)?;

    let base_lr = scale_lr_for_workers(cfg.lr, cfg.workers, cfg.scheme);
    let default_horizon = cfg.epochs * iters_per_epoch;
    let schedule = cfg.build_schedule(base_lr, default_horizon);
    let total_iterations = default_horizon.min(cfg.max_iterations.unwrap_or(u64::MAX));

    let state = SgdState::new(
        params,
        T::of_f64(schedule.lr_at(0, 0).max(f64::MIN_POSITIVE)),
        T::of_f64(cfg.momentum),
    )?;

    Ok(BspLoop {
        cfg,
        model,
        ex,
        state,
        schedule,
        iters_per_epoch,
        total_iterations,
        global_iter: 0,
        stats: RunStats {
            rank,
            ..RunStats::default()
        },
        trace: Vec::new(),
    })
}

fn train_bsp_synthetic<T: Scalar>(
    cfg: &TrainConfig,
    comm: Communicator,
) -> Result<TrainOutcome<T>> {
    let rank = comm.rank();
    let started = Instant::now();

    let dataset = make_synthetic::<T>(
        cfg.seed,
        cfg.examples,
        cfg.input_dim,
        cfg.classes,
        cfg.difficulty,
    );
    let (train_set, val_set) = dataset.split_val(cfg.val_fraction);
    let model = Model::new(cfg.model, cfg.input_dim, cfg.classes);

    // Every rank runs the same iteration count: truncate shards to the
    // minimum shard size so uneven splits cannot desynchronize collectives.
    let shard = shard_indices(train_set.n, cfg.workers, rank);
    let per_rank = train_set.n / cfg.workers;
    let iters_per_epoch = (per_rank as u64).div_ceil(cfg.per_worker_batch as u64);

    let mut bsp = bsp_loop_setup::<T>(cfg, comm, model, iters_per_epoch)?;

    'epochs: for _epoch in 0..cfg.epochs {
        for step in 0..iters_per_epoch as usize {
            if bsp.done() {
                break 'epochs;
            }
            let lo = step * cfg.per_worker_batch;
            let hi = ((step + 1) * cfg.per_worker_batch).min(per_rank);
            let batch = train_set.gather(&shard[lo..hi]);
            bsp.iterate(&batch)?;
        }
        if rank == 0 && val_set.n > 0 {
            let eval = model.evaluate(&bsp.state.weights, &val_set)?;
            bsp.stats.final_val_loss = Some(eval.loss);
            bsp.stats.final_val_error = Some(eval.error_rate);
        }
    }

    bsp.stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        stats: bsp.stats,
        final_weights: bsp.state.weights,
        weight_trace: bsp.trace,
    })
}

fn sorted_batch_files(dir: &std::path::Path, prefix: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with(&format!("{prefix}_")) && name.ends_with(".pxb") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn prepared_to_batch<T: Scalar>(pb: &PreparedBatch, labels: &LabelIndex) -> Result<Batch<T>> {
    let idx = pb.batch_index as usize;
    let batch_labels = labels
        .per_batch
        .get(idx)
        .ok_or_else(|| Error::ProtocolViolation(format!("no labels for batch {idx}")))?;
    if batch_labels.len() != pb.n {
        return Err(Error::ShapeMismatch(format!(
            "batch {idx}: {} labels for {} examples",
            batch_labels.len(),
            pb.n
        )));
    }
    Ok(Batch {
        x: pb.x.iter().map(|&v| T::of_f64(v as f64)).collect(),
        labels: batch_labels.clone(),
        n: pb.n,
        dim: pb.dim,
    })
}

fn train_bsp_files<T: Scalar>(
    cfg: &TrainConfig,
    comm: Communicator,
    dir: PathBuf,
    crop: CropSpec,
) -> Result<TrainOutcome<T>> {
    let rank = comm.rank();
    let started = Instant::now();

    let mean = read_mean_file(&dir.join("mean.pxm"))?;
    let labels = read_label_file(&dir.join("batch_labels.pxl"))?;
    let input_dim = mean.c * crop.h * crop.w;
    let model = Model::new(cfg.model, input_dim, cfg.classes);

    let all_files = sorted_batch_files(&dir, "batch")?;
    if all_files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no batch files under {}",
            dir.display()
        )));
    }
    // round-robin shard by batch index, truncated for lockstep
    let files_per_rank = all_files.len() / cfg.workers;
    let my_files: Vec<String> = all_files
        .iter()
        .skip(rank)
        .step_by(cfg.workers)
        .take(files_per_rank)
        .cloned()
        .collect();
    let iters_per_epoch = files_per_rank as u64;

    let mut bsp = bsp_loop_setup::<T>(cfg, comm, model, iters_per_epoch)?;

    let loader = spawn_loader(
        dir.clone(),
        LoaderConfig {
            mean,
            crop,
            base_seed: cfg.seed,
            load_delay: Duration::ZERO,
        },
    );

    let val_files = sorted_batch_files(&dir, "val")?;
    let val_labels = if val_files.is_empty() {
        None
    } else {
        Some(read_label_file(&dir.join("val_labels.pxl"))?)
    };

    let run = (|| -> Result<()> {
        'epochs: for _epoch in 0..cfg.epochs {
            if bsp.done() {
                break 'epochs;
            }
            let labels_ref = &labels;
            let bsp_ref = &mut bsp;
            pipelined_epoch(&loader, Phase::Train, &my_files, |pb| {
                if bsp_ref.done() {
                    return Ok(());
                }
                let batch = prepared_to_batch::<T>(&pb, labels_ref)?;
                bsp_ref.iterate(&batch)
            })?;

            if rank == 0 {
                if let Some(vl) = &val_labels {
                    let weights = bsp.state.weights.clone();
                    let model = bsp.model;
                    let mut loss_sum = 0.0;
                    let mut wrong = 0usize;
                    let mut total = 0usize;
                    pipelined_epoch(&loader, Phase::Val, &val_files, |pb| {
                        let batch = prepared_to_batch::<T>(&pb, vl)?;
                        let eval = model.evaluate_batch(&weights, &batch)?;
                        loss_sum += eval.loss * batch.n as f64;
                        wrong += (eval.error_rate * batch.n as f64).round() as usize;
                        total += batch.n;
                        Ok(())
                    })?;
                    if total > 0 {
                        bsp.stats.final_val_loss = Some(loss_sum / total as f64);
                        bsp.stats.final_val_error = Some(wrong as f64 / total as f64);
                    }
                }
            }
        }
        Ok(())
    })();
    let stopped = loader.stop();
    run?;
    stopped?;

    bsp.stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        stats: bsp.stats,
        final_weights: bsp.state.weights,
        weight_trace: bsp.trace,
    })
}

const EASGD_TAG_PARAMS: u8 = 0;
const EASGD_TAG_DONE: u8 = 1;

/// The asynchronous elastic loop. Ranks 0..k are workers, rank k is the
/// server holding the center variable; world size must be workers + 1.
pub fn train_easgd<T: Scalar>(cfg: &TrainConfig, comm: Communicator) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if comm.world_size() != cfg.workers + 1 {
        return Err(Error::InvalidConfig(format!(
            "EASGD world size {} != workers {} + server",
            comm.world_size(),
            cfg.workers
        )));
    }
    if !matches!(cfg.source, DataSource::Synthetic) {
        return Err(Error::InvalidConfig(
            "EASGD supports the synthetic source only".to_string(),
        ));
    }
    if comm.rank() == cfg.workers {
        easgd_server(cfg, comm)
    } else {
        easgd_worker(cfg, comm)
    }
}

fn easgd_total_iterations(cfg: &TrainConfig, iters_per_epoch: u64) -> u64 {
    (cfg.epochs * iters_per_epoch).min(cfg.max_iterations.unwrap_or(u64::MAX))
}

fn easgd_worker<T: Scalar>(cfg: &TrainConfig, comm: Communicator) -> Result<TrainOutcome<T>> {
    let rank = comm.rank();
    let server = cfg.workers;
    let started = Instant::now();

    let dataset = make_synthetic::<T>(
        cfg.seed,
        cfg.examples,
        cfg.input_dim,
        cfg.classes,
        cfg.difficulty,
    );
    let (train_set, _val) = dataset.split_val(cfg.val_fraction);
    let model = Model::new(cfg.model, cfg.input_dim, cfg.classes);

    let shard = shard_indices(train_set.n, cfg.workers, rank);
    let per_rank = train_set.n / cfg.workers;
    let iters_per_epoch = (per_rank as u64).div_ceil(cfg.per_worker_batch as u64);
    if iters_per_epoch == 0 {
        return Err(Error::InvalidConfig(
            "shard too small for one batch per epoch".to_string(),
        ));
    }
    let total = easgd_total_iterations(cfg, iters_per_epoch);

    let mut ex = Exchanger::new(comm);
    let init = if rank == 0 {
        model.init_params::<T>(cfg.seed ^ 0x1157)
    } else {
        ParamBuffer::zeros(model.param_count())
    };
    let params = broadcast_init(&mut ex, init)?;

    let schedule = cfg.build_schedule(cfg.lr, total);
    let mut state = SgdState::new(
        params,
        T::of_f64(schedule.lr_at(0, 0).max(f64::MIN_POSITIVE)),
        T::of_f64(cfg.momentum),
    )?;
    let alpha = T::of_f64(cfg.easgd.alpha);

    let mut stats = RunStats {
        rank,
        ..RunStats::default()
    };
    let mut trace = Vec::new();
    let comm = ex.comm_mut();

    for iter in 0..total {
        let epoch = iter / iters_per_epoch;
        let step = (iter % iters_per_epoch) as usize;
        state.epoch = epoch;
        state.lr = T::of_f64(schedule.lr_at(epoch, iter));

        let lo = step * cfg.per_worker_batch;
        let hi = ((step + 1) * cfg.per_worker_batch).min(per_rank);
        let batch = train_set.gather(&shard[lo..hi]);

        let bytes_before = comm.total_bytes_sent();
        let compute_started = Instant::now();
        let (loss, grad) = model.forward_backward(&state.weights, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        state.step(&grad)?;
        let compute_seconds = compute_started.elapsed().as_secs_f64();

        let exchange_started = Instant::now();
        let mut exchange_seconds = 0.0;
        if (iter + 1) % cfg.easgd.tau == 0 {
            // paired exchange: my weights out, the center as the server saw
            // it comes back; both sides update from the exchanged values
            let mut payload = Vec::with_capacity(1 + state.weights.len() * T::SIZE);
            payload.push(EASGD_TAG_PARAMS);
            payload.extend_from_slice(&crate::scalar::encode(state.weights.as_slice()));
            let reply = comm.sendrecv(server, &payload)?;
            stats.exchange_messages += 1;
            if reply.first() != Some(&EASGD_TAG_PARAMS) {
                return Err(Error::ProtocolViolation(
                    "unexpected server reply tag".to_string(),
                ));
            }
            let center: Vec<T> = crate::scalar::decode(&reply[1..]);
            if center.len() != state.weights.len() {
                return Err(Error::LengthMismatch {
                    left: state.weights.len(),
                    right: center.len(),
                });
            }
            for (w, c) in state.weights.as_mut_slice().iter_mut().zip(&center) {
                *w = *w - alpha * (*w - *c);
            }
            exchange_seconds = exchange_started.elapsed().as_secs_f64();
        }

        stats.records.push(IterationRecord {
            iteration: iter,
            epoch,
            loss: loss.into_f64(),
            compute_seconds,
            exchange_seconds,
            bytes_sent: comm.total_bytes_sent() - bytes_before,
        });
        if cfg.trace_weights {
            trace.push(state.weights.as_slice().to_vec());
        }
    }

    comm.send(server, &[EASGD_TAG_DONE])?;
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        stats,
        final_weights: state.weights,
        weight_trace: trace,
    })
}

fn easgd_server<T: Scalar>(cfg: &TrainConfig, comm: Communicator) -> Result<TrainOutcome<T>> {
    let rank = comm.rank();
    let started = Instant::now();

    let dataset = make_synthetic::<T>(
        cfg.seed,
        cfg.examples,
        cfg.input_dim,
        cfg.classes,
        cfg.difficulty,
    );
    let (_train, val_set) = dataset.split_val(cfg.val_fraction);
    let model = Model::new(cfg.model, cfg.input_dim, cfg.classes);

    let mut ex = Exchanger::new(comm);
    let center = broadcast_init(&mut ex, ParamBuffer::<T>::zeros(model.param_count()))?;
    let mut center = center;
    let alpha = T::of_f64(cfg.easgd.alpha);

    let mut stats = RunStats {
        rank,
        ..RunStats::default()
    };
    let comm = ex.comm_mut();
    let mut done = 0usize;
    while done < cfg.workers {
        let (peer, msg) = comm.recv_any()?;
        match msg.first() {
            Some(&EASGD_TAG_DONE) => done += 1,
            Some(&EASGD_TAG_PARAMS) => {
                // reply with the pre-update center, then pull it toward the
                // worker's sent weights
                let mut reply = Vec::with_capacity(1 + center.len() * T::SIZE);
                reply.push(EASGD_TAG_PARAMS);
                reply.extend_from_slice(&crate::scalar::encode(center.as_slice()));
                comm.send(peer, &reply)?;
                stats.exchange_messages += 1;

                let worker: Vec<T> = crate::scalar::decode(&msg[1..]);
                if worker.len() != center.len() {
                    return Err(Error::LengthMismatch {
                        left: center.len(),
                        right: worker.len(),
                    });
                }
                for (c, w) in center.as_mut_slice().iter_mut().zip(&worker) {
                    *c = *c + alpha * (*w - *c);
                }
            }
            _ => {
                return Err(Error::ProtocolViolation(format!(
                    "unexpected EASGD message from rank {peer}"
                )))
            }
        }
    }

    if val_set.n > 0 {
        let eval = model.evaluate(&center, &val_set)?;
        stats.final_val_loss = Some(eval.loss);
        stats.final_val_error = Some(eval.error_rate);
    }
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        stats,
        final_weights: center,
        weight_trace: Vec::new(),
    })
}

/// Dispatch a rank into whichever loop the config calls for.
pub fn train_entry<T: Scalar>(cfg: &TrainConfig, comm: Communicator) -> Result<TrainOutcome<T>> {
    match cfg.mode {
        TrainMode::Bsp => train_bsp(cfg, comm),
        TrainMode::Easgd => train_easgd(cfg, comm),
    }
}

/// Run the whole world in this process over the in-process backend.
pub fn run_inproc<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<TrainOutcome<T>>> {
    crate::transport::spawn_world(cfg.world_size(), |comm| train_entry(cfg, comm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_are_disjoint_and_cover() {
        let n = 10;
        let k = 4;
        let mut seen = vec![false; n];
        let mut sizes = Vec::new();
        for rank in 0..k {
            let shard = shard_indices(n, k, rank);
            sizes.push(shard.len());
            for i in shard {
                assert!(!seen[i], "index {i} in two shards");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(sizes, vec![3, 3, 2, 2]);

        let whole = shard_indices(7, 1, 0);
        assert_eq!(whole, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.workers = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.easgd.alpha = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.easgd.tau = 0;
        assert!(cfg.validate().is_err());

        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn single_worker_bsp_runs() {
        let cfg = TrainConfig {
            examples: 64,
            epochs: 2,
            per_worker_batch: 8,
            ..TrainConfig::default()
        };
        let outcomes = run_inproc::<f32>(&cfg).unwrap();
        assert_eq!(outcomes.len(), 1);
        let stats = &outcomes[0].stats;
        // 64 examples, 20% val -> 52 train, 52/8 -> 7 iters/epoch, 2 epochs
        assert_eq!(stats.records.len(), 14);
        assert!(stats.final_val_loss.is_some());
    }

    #[test]
    fn bsp_weights_identical_across_ranks() {
        let cfg = TrainConfig {
            workers: 4,
            examples: 256,
            epochs: 1,
            per_worker_batch: 8,
            hash_every: 1,
            ..TrainConfig::default()
        };
        let outcomes = run_inproc::<f32>(&cfg).unwrap();
        let h0 = hash_values(outcomes[0].final_weights.as_slice());
        for o in &outcomes[1..] {
            assert_eq!(hash_values(o.final_weights.as_slice()), h0);
        }
    }

    #[test]
    fn easgd_elastic_update_rule() {
        // alpha=0.5, x=2, center=0 -> both meet at 1 after one exchange
        let cfg = TrainConfig {
            mode: TrainMode::Easgd,
            workers: 1,
            ..TrainConfig::default()
        };
        // drive the update arithmetic directly
        let alpha = cfg.easgd.alpha as f32;
        let (mut x, mut c) = (2.0f32, 0.0f32);
        let (xs, cs) = (x, c);
        x = x - alpha * (xs - cs);
        c = c + alpha * (xs - cs);
        assert_eq!(x, 1.0);
        assert_eq!(c, 1.0);
    }

    #[test]
    fn easgd_world_runs_and_counts_messages() {
        let cfg = TrainConfig {
            mode: TrainMode::Easgd,
            workers: 2,
            examples: 64,
            epochs: 2,
            per_worker_batch: 8,
            max_iterations: Some(6),
            ..TrainConfig::default()
        };
        let outcomes = run_inproc::<f32>(&cfg).unwrap();
        assert_eq!(outcomes.len(), 3);
        // tau=1: each worker exchanges every iteration; server echoes each
        let total_msgs: u64 = outcomes.iter().map(|o| o.stats.exchange_messages).sum();
        assert_eq!(total_msgs, 2 * 2 * 6);
    }
}

//! The three-stage training loop.
//!
//! Stage 1 loads and deduplicates global batches, stage 2 moves embedding
//! parameters to where stage 3 will read them, and stage 3 runs the BSP
//! worker step. In pipelined mode the stages are separate threads connected
//! by bounded queues of depth `L`; in sequential mode one thread runs them in
//! turn.
//!
//! Both modes make the same decisions. When preparing batch `t` the manager
//! first waits until batch `t - L - 1` has finished training and treats
//! batches `t - L .. t - 1` as in flight whether or not they are still
//! training. The state the manager reads therefore depends only on the step
//! index, and with it every eviction, byte count and (for the host and cache
//! strategies) every parameter value.

use std::collections::VecDeque;
use std::sync::mpsc::{channel, sync_channel, Receiver};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use fnv::{FnvHashMap, FnvHashSet};
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::comm::{allreduce_bytes, param_state_bytes, plain_bytes, LedgerSnapshot, TransferLedger};
use crate::config::{DataSource, Mode, SimConfig, Strategy};
use crate::dataio::{generate_batch, virtual_sparse_id, CriteoFile, DedupBatch, RawBatch};
use crate::error::{Error, Result};
use crate::hostmgr::{
    gather_cache, gather_host, manager_get, owned_by, pull_parameters_to_host,
    push_parameters_to_cache, shard_owner, CacheBuffer, HostStore, ParamState,
};
use crate::ids::FeatureId;
use crate::report::{RunReport, StepRecord};
use crate::worker::{
    forward_embeddings, gather_instances, grad_synchronize, segment_sum, update_sparse, DeepFmLite,
    DenseAdam,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Load,
    Manage,
    Train,
}

impl Stage {
    fn index(self) -> usize {
        match self {
            Stage::Load => 0,
            Stage::Manage => 1,
            Stage::Train => 2,
        }
    }
}

/// Configured simulator, optionally with artificial per-stage delays.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    delays: [Duration; 3],
}

/// A finished run together with the final model state.
#[derive(Debug, Clone)]
pub struct Execution {
    pub report: RunReport,
    /// Host table after all buffers were flushed back.
    pub host: HostStore,
    /// Dense parameters of every worker replica.
    pub dense: Vec<Array1<f64>>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            delays: [Duration::ZERO; 3],
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Makes `stage` sleep for `delay` on every step, on top of its work.
    pub fn inject_stage_delay(&mut self, stage: Stage, delay: Duration) -> &mut Self {
        self.delays[stage.index()] = delay;
        self
    }

    pub fn run(&self, num_steps: u64) -> Result<RunReport> {
        Ok(self.execute(num_steps)?.report)
    }

    pub fn execute(&self, num_steps: u64) -> Result<Execution> {
        let config = &self.config;
        let source = BatchSource::open(config)?;
        if config.strategy == Strategy::Cache {
            check_capacity(config, &source)?;
        }
        log::info!(
            "running {num_steps} steps: strategy {}, mode {}, {} workers",
            config.strategy,
            config.mode,
            config.num_workers
        );

        let shared = Shared {
            host: Mutex::new(HostStore::new(config.embedding_dim, config.seed)),
            buffers: Mutex::new(
                (0..config.num_workers)
                    .map(|w| CacheBuffer::new(w, config.cache_capacity))
                    .collect(),
            ),
        };
        let ledger = TransferLedger::new();
        let loader = Loader {
            source,
            workers: config.num_workers,
            next: 0,
            delay: self.delays[Stage::Load.index()],
        };
        let manager = Manager::new(config, &shared, &ledger, num_steps, self.delays[Stage::Manage.index()]);
        let mut trainer = Trainer::new(config, &shared, &ledger, self.delays[Stage::Train.index()]);

        let start = Instant::now();
        let records = match config.mode {
            Mode::Sequential => run_sequential(loader, manager, &mut trainer, num_steps)?,
            Mode::Pipelined => run_pipelined(loader, manager, &mut trainer, num_steps, config.lookahead_depth)?,
        };
        let wall = start.elapsed().as_secs_f64();
        let dense: Vec<Array1<f64>> = trainer.models.iter().map(|m| m.params().clone()).collect();
        drop(trainer);

        let mut host = shared.host.into_inner().expect("host lock poisoned");
        for buf in shared.buffers.into_inner().expect("buffer lock poisoned").iter_mut() {
            for (f, state) in buf.drain() {
                host.restore(f, buf.worker(), state);
            }
        }
        debug_assert_eq!(host.lent_count(), 0);
        let ledger_total = ledger.snapshot();
        let report = RunReport::new(config.clone(), records, wall);
        debug_assert_eq!(report.summary.totals, ledger_total);
        log::info!(
            "finished in {wall:.2}s, final loss {:?}",
            report.summary.final_loss
        );
        Ok(Execution {
            report,
            host,
            dense,
        })
    }
}

/// Runs `num_steps` steps of `config` without delays.
pub fn run(config: &SimConfig, num_steps: u64) -> Result<RunReport> {
    Simulator::new(config.clone())?.run(num_steps)
}

/// Rejects cache capacities that cannot hold a worker's share of the first
/// batches the manager has to prepare.
fn check_capacity(config: &SimConfig, source: &BatchSource) -> Result<()> {
    let workers = config.num_workers;
    let unique = (0..=config.lookahead_depth as u64)
        .map(|t| virtual_sparse_id(&source.raw(t), workers).num_unique())
        .max()
        .unwrap_or(0);
    let required = unique.div_ceil(workers);
    if config.cache_capacity < required {
        return Err(Error::CapacityPrecondition {
            capacity: config.cache_capacity,
            required,
            unique,
            workers,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum BatchSource {
    Synthetic(SimConfig),
    Criteo { file: Arc<CriteoFile>, rows: usize },
}

impl BatchSource {
    fn open(config: &SimConfig) -> Result<Self> {
        Ok(match &config.data {
            DataSource::Synthetic => BatchSource::Synthetic(config.clone()),
            DataSource::Criteo(path) => BatchSource::Criteo {
                file: Arc::new(CriteoFile::open(path, config.vocabulary_size)?),
                rows: config.global_batch_size(),
            },
        })
    }

    fn raw(&self, step: u64) -> RawBatch {
        match self {
            BatchSource::Synthetic(config) => generate_batch(config, step),
            BatchSource::Criteo { file, rows } => file.batch(step, *rows),
        }
    }
}

struct Shared {
    host: Mutex<HostStore>,
    buffers: Mutex<Vec<CacheBuffer>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().expect("a pipeline stage panicked while holding a lock")
}

struct Loaded {
    step: u64,
    batch: DedupBatch,
    load_secs: f64,
}

struct Loader {
    source: BatchSource,
    workers: usize,
    next: u64,
    delay: Duration,
}

impl Loader {
    fn load(&mut self) -> Result<Loaded> {
        let start = Instant::now();
        let step = self.next;
        self.next += 1;
        let batch = virtual_sparse_id(&self.source.raw(step), self.workers);
        sleep(self.delay);
        Ok(Loaded {
            step,
            batch,
            load_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Issued by the manager once every owned feature of the batch is resident
/// in its worker's buffer; training may start without waiting on a transfer.
#[derive(Debug)]
struct ReadinessToken {
    step: u64,
}

/// Message from the manager to the trainer.
struct Prepared {
    step: u64,
    batch: DedupBatch,
    load_secs: f64,
    manage_secs: f64,
    traffic: LedgerSnapshot,
    no_vsi: Option<LedgerSnapshot>,
    /// Prefetch strategy: per-worker copies of the owned parameters.
    copies: Option<Vec<FnvHashMap<FeatureId, ParamState>>>,
    ready: Option<ReadinessToken>,
}

/// Message from the trainer back to the manager.
struct Ack {
    step: u64,
    /// Prefetch strategy: updated copies to write over the host table.
    writeback: Option<Vec<FnvHashMap<FeatureId, ParamState>>>,
}

/// What the manager reads from the other stages.
trait Inbox {
    fn next_batch(&mut self) -> Result<Loaded>;
    fn next_ack(&mut self) -> Result<Ack>;
}

struct ChannelInbox {
    batches: Receiver<Result<Loaded>>,
    acks: Receiver<Ack>,
}

impl Inbox for ChannelInbox {
    fn next_batch(&mut self) -> Result<Loaded> {
        self.batches.recv().map_err(|_| Error::StageDisconnected("load"))?
    }

    fn next_ack(&mut self) -> Result<Ack> {
        self.acks.recv().map_err(|_| Error::StageDisconnected("train"))
    }
}

struct LocalInbox {
    loader: Loader,
    acks: VecDeque<Ack>,
}

impl Inbox for LocalInbox {
    fn next_batch(&mut self) -> Result<Loaded> {
        self.loader.load()
    }

    fn next_ack(&mut self) -> Result<Ack> {
        Ok(self
            .acks
            .pop_front()
            .expect("sequential mode trains every batch before the manager needs its ack"))
    }
}

struct Manager<'s> {
    config: &'s SimConfig,
    shared: &'s Shared,
    ledger: &'s TransferLedger,
    num_steps: u64,
    delay: Duration,
    /// Batches `t ..= t + L` while preparing `t`.
    window: VecDeque<Loaded>,
    in_flight: VecDeque<(u64, FnvHashSet<FeatureId>)>,
    /// Number of acks received so far; acks arrive in step order.
    acked: u64,
    /// Time spent blocked on other stages during the current step.
    blocked: Duration,
}

impl<'s> Manager<'s> {
    fn new(
        config: &'s SimConfig,
        shared: &'s Shared,
        ledger: &'s TransferLedger,
        num_steps: u64,
        delay: Duration,
    ) -> Self {
        Self {
            config,
            shared,
            ledger,
            num_steps,
            delay,
            window: VecDeque::new(),
            in_flight: VecDeque::new(),
            acked: 0,
            blocked: Duration::ZERO,
        }
    }

    fn prepare(&mut self, step: u64, inbox: &mut dyn Inbox) -> Result<Prepared> {
        let wanted = (self.config.lookahead_depth as u64 + 1).min(self.num_steps - step) as usize;
        while self.window.len() < wanted {
            let loaded = inbox.next_batch()?;
            debug_assert_eq!(loaded.step, step + self.window.len() as u64);
            self.window.push_back(loaded);
        }
        let start = Instant::now();
        self.blocked = Duration::ZERO;
        while self.in_flight.len() > self.config.lookahead_depth {
            self.release_oldest(inbox)?;
        }

        let mut traffic = LedgerSnapshot::default();
        let mut no_vsi = self.config.track_no_vsi.then(LedgerSnapshot::default);
        let mut copies = None;
        let mut ready = None;
        match self.config.strategy {
            Strategy::Host => {}
            Strategy::Cache => {
                ready = Some(self.prepare_cache(step, inbox, &mut traffic, no_vsi.as_mut())?);
            }
            Strategy::Prefetch => {
                copies = Some(self.prepare_prefetch(&mut traffic, no_vsi.as_mut()));
            }
        }
        self.ledger.charge(&traffic);

        let loaded = self.window.pop_front().expect("window holds the current batch");
        self.in_flight
            .push_back((step, loaded.batch.global_ids.iter().copied().collect()));
        sleep(self.delay);
        let manage_secs = start.elapsed().saturating_sub(self.blocked).as_secs_f64();
        Ok(Prepared {
            step,
            batch: loaded.batch,
            load_secs: loaded.load_secs,
            manage_secs,
            traffic,
            no_vsi,
            copies,
            ready,
        })
    }

    fn prepare_cache(
        &mut self,
        step: u64,
        inbox: &mut dyn Inbox,
        traffic: &mut LedgerSnapshot,
        no_vsi: Option<&mut LedgerSnapshot>,
    ) -> Result<ReadinessToken> {
        let workers = self.config.num_workers;
        let admissions = loop {
            let in_flight: FnvHashSet<FeatureId> =
                self.in_flight.iter().flat_map(|(_, s)| s.iter().copied()).collect();
            let current = &self.window[0].batch.global_ids;
            let lookahead: Vec<&[FeatureId]> =
                self.window.iter().skip(1).map(|l| l.batch.global_ids.as_slice()).collect();
            let mut bufs = lock(&self.shared.buffers);
            match manager_get(&mut bufs, current, &lookahead, &in_flight) {
                Ok(a) => break a,
                Err(short) if self.in_flight.is_empty() => {
                    let b = &bufs[short.worker];
                    return Err(Error::CapacityDeadlock {
                        step,
                        worker: short.worker,
                        capacity: b.capacity(),
                        occupied: b.occupied(),
                        pinned: b.pinned_count(),
                        needed_soon: b.needed_soon_count(),
                        shortfall: short.missing,
                    });
                }
                Err(short) => {
                    drop(bufs);
                    log::debug!(
                        "step {step}: worker {} short by {} slots, waiting for batch {}",
                        short.worker,
                        short.missing,
                        self.in_flight[0].0
                    );
                    self.release_oldest(inbox)?;
                }
            }
        };

        let batch = &self.window[0].batch;
        let occurrences: Option<FnvHashMap<FeatureId, u32>> = no_vsi.is_some().then(|| {
            batch.global_ids.iter().copied().zip(batch.occurrences()).collect()
        });
        let mut host = lock(&self.shared.host);
        let mut bufs = lock(&self.shared.buffers);
        let mut shadow = LedgerSnapshot::default();
        for (buf, adm) in bufs.iter_mut().zip(&admissions) {
            let pulled = pull_parameters_to_host(&mut host, buf, &adm.noworking);
            let pushed = push_parameters_to_cache(&mut host, buf, &adm.working).map_err(|e| match e {
                Error::CapacityDeadlock { .. } => with_step(e, step),
                e => e,
            })?;
            *traffic += pulled;
            *traffic += pushed;
            if let Some(occ) = &occurrences {
                let entries: u64 = adm.working.iter().map(|f| u64::from(occ[f])).sum();
                shadow.host_to_worker_bytes += param_state_bytes(entries, self.config.embedding_dim);
                shadow += pulled;
            }
            for f in owned_by(&batch.global_ids, buf.worker(), workers) {
                buf.pin(f);
                buf.touch(f);
            }
        }
        if traffic.swap_events > 0 {
            log::trace!("step {step}: {} evictions", traffic.swap_events);
        }
        if let Some(n) = no_vsi {
            *n += shadow;
        }
        let ready = batch
            .global_ids
            .iter()
            .all(|&f| bufs[shard_owner(f, workers)].is_resident(f));
        assert!(ready, "step {step}: owned feature missing after admission");
        Ok(ReadinessToken { step })
    }

    fn prepare_prefetch(
        &mut self,
        traffic: &mut LedgerSnapshot,
        no_vsi: Option<&mut LedgerSnapshot>,
    ) -> Vec<FnvHashMap<FeatureId, ParamState>> {
        let workers = self.config.num_workers;
        let dim = self.config.embedding_dim;
        let batch = &self.window[0].batch;
        let mut host = lock(&self.shared.host);
        let mut copies = vec![FnvHashMap::default(); workers];
        for &f in &batch.global_ids {
            copies[shard_owner(f, workers)].insert(f, host.copy_of(f));
        }
        traffic.host_to_worker_bytes += param_state_bytes(batch.num_unique() as u64, dim);
        if let Some(n) = no_vsi {
            n.host_to_worker_bytes += param_state_bytes(batch.num_entries() as u64, dim);
        }
        copies
    }

    /// Waits for the oldest in-flight batch to finish training and stops
    /// protecting its features.
    fn release_oldest(&mut self, inbox: &mut dyn Inbox) -> Result<()> {
        let (step, _) = self.in_flight.pop_front().expect("release with nothing in flight");
        self.wait_for_ack(step, inbox)
    }

    fn release_all(&mut self, inbox: &mut dyn Inbox) -> Result<()> {
        while !self.in_flight.is_empty() {
            self.release_oldest(inbox)?;
        }
        Ok(())
    }

    fn wait_for_ack(&mut self, step: u64, inbox: &mut dyn Inbox) -> Result<()> {
        while self.acked <= step {
            let waited = Instant::now();
            let ack = inbox.next_ack()?;
            self.blocked += waited.elapsed();
            assert_eq!(ack.step, self.acked, "acks arrive in step order");
            self.acked += 1;
            if let Some(writeback) = ack.writeback {
                let mut host = lock(&self.shared.host);
                for copies in writeback {
                    for (f, state) in copies {
                        *host.state_mut(f) = state;
                    }
                }
            }
        }
        Ok(())
    }
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::CapacityDeadlock {
            worker,
            capacity,
            occupied,
            pinned,
            needed_soon,
            shortfall,
            ..
        } => Error::CapacityDeadlock {
            step,
            worker,
            capacity,
            occupied,
            pinned,
            needed_soon,
            shortfall,
        },
        e => e,
    }
}

struct Trainer<'s> {
    config: &'s SimConfig,
    shared: &'s Shared,
    ledger: &'s TransferLedger,
    delay: Duration,
    models: Vec<DeepFmLite>,
    optimizers: Vec<DenseAdam>,
}

impl<'s> Trainer<'s> {
    fn new(config: &'s SimConfig, shared: &'s Shared, ledger: &'s TransferLedger, delay: Duration) -> Self {
        let model = DeepFmLite::init(config.seed, config.num_fields, config.embedding_dim, config.hidden_units);
        let n = model.params().len();
        Self {
            config,
            shared,
            ledger,
            delay,
            models: vec![model; config.num_workers],
            optimizers: vec![DenseAdam::new(n); config.num_workers],
        }
    }

    fn train(&mut self, msg: Prepared) -> Result<(StepRecord, Ack)> {
        let start = Instant::now();
        let cfg = self.config;
        let workers = cfg.num_workers;
        let dim = cfg.embedding_dim;
        let batch = &msg.batch;
        let ids = &batch.global_ids;
        let unique = batch.num_unique();
        let mut traffic = LedgerSnapshot::default();
        let mut no_vsi = msg.no_vsi;
        let mut copies = msg.copies;

        let locals: Vec<Array2<f64>> = match cfg.strategy {
            Strategy::Cache => {
                let token = msg.ready.as_ref().expect("cache batches carry a readiness token");
                debug_assert_eq!(token.step, msg.step);
                let bufs = lock(&self.shared.buffers);
                bufs.par_iter()
                    .map(|b| gather_cache(b, ids, workers, dim))
                    .collect::<Result<_>>()?
            }
            Strategy::Host => {
                let mut host = lock(&self.shared.host);
                (0..workers)
                    .map(|w| {
                        let (m, charge) = gather_host(&mut host, w, ids, workers);
                        traffic += charge;
                        m
                    })
                    .collect()
            }
            Strategy::Prefetch => copies
                .as_ref()
                .expect("prefetch batches carry parameter copies")
                .iter()
                .map(|c| gather_copies(c, ids, dim))
                .collect(),
        };

        let (global, forward) = forward_embeddings(&locals);
        traffic += forward;
        let scale = 1.0 / workers as f64;
        let outputs: Vec<(f64, Array2<f64>, Array1<f64>)> = self
            .models
            .par_iter()
            .enumerate()
            .map(|(w, model)| {
                let embeds = gather_instances(global.view(), batch, w);
                let out = model.forward_backward(embeds.view(), batch.worker_labels(w));
                let mut grads = out.embedding_grads;
                grads *= scale;
                let local = segment_sum(grads.view(), batch.worker_virtual_ids(w), unique);
                (out.loss, local, out.dense_grads)
            })
            .collect();
        let loss = outputs.iter().map(|o| o.0).sum::<f64>() / workers as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: msg.step });
        }
        let (local_grads, dense_grads): (Vec<_>, Vec<_>) = outputs.into_iter().map(|(_, l, d)| (l, d)).unzip();
        let (global_grads, dense_mean, backward) = grad_synchronize(&local_grads, &dense_grads);
        traffic += backward;

        let mut writeback = None;
        match cfg.strategy {
            Strategy::Cache => {
                let mut bufs = lock(&self.shared.buffers);
                bufs.par_iter_mut()
                    .enumerate()
                    .map(|(w, b)| update_sparse(b, w, workers, ids, global_grads.view(), &cfg.adam))
                    .collect::<Result<Vec<_>>>()?;
            }
            Strategy::Host => {
                let mut host = lock(&self.shared.host);
                for w in 0..workers {
                    update_sparse(&mut *host, w, workers, ids, global_grads.view(), &cfg.adam)?;
                }
                traffic.worker_to_host_bytes += plain_bytes((unique * dim) as u64);
            }
            Strategy::Prefetch => {
                let mut c = copies.take().expect("prefetch batches carry parameter copies");
                for (w, copy) in c.iter_mut().enumerate() {
                    update_sparse(copy, w, workers, ids, global_grads.view(), &cfg.adam)?;
                }
                traffic.worker_to_host_bytes += param_state_bytes(unique as u64, dim);
                writeback = Some(c);
            }
        }
        for (model, opt) in self.models.iter_mut().zip(&mut self.optimizers) {
            opt.step(&cfg.adam, model.params_mut(), &dense_mean);
        }
        self.ledger.charge(&traffic);

        if let Some(n) = no_vsi.as_mut() {
            *n += self.no_vsi_charges(batch);
        }
        let mut total = msg.traffic;
        total += traffic;
        sleep(self.delay);
        let record = StepRecord {
            step: msg.step,
            loss,
            host_to_worker_bytes: total.host_to_worker_bytes,
            worker_to_host_bytes: total.worker_to_host_bytes,
            interworker_bytes: total.interworker_bytes,
            swap_events: total.swap_events,
            raw_features: batch.num_entries() as u64,
            unique_features: unique as u64,
            no_vsi,
            load_secs: msg.load_secs,
            manage_secs: msg.manage_secs,
            train_secs: start.elapsed().as_secs_f64(),
        };
        log::debug!("step {}: loss {loss:.6}", msg.step);
        Ok((record, Ack { step: msg.step, writeback }))
    }

    /// Trainer-side traffic of this step had every feature entry been sent
    /// on its own.
    fn no_vsi_charges(&self, batch: &DedupBatch) -> LedgerSnapshot {
        let cfg = self.config;
        let workers = cfg.num_workers;
        let entries = batch.num_entries() as u64;
        let payload = plain_bytes(entries * cfg.embedding_dim as u64);
        let dense = plain_bytes(self.models[0].params().len() as u64);
        let mut n = LedgerSnapshot {
            interworker_bytes: workers as u64
                * (2 * allreduce_bytes(payload, workers) + allreduce_bytes(dense, workers)),
            ..Default::default()
        };
        match cfg.strategy {
            Strategy::Cache => {}
            Strategy::Host => {
                n.host_to_worker_bytes = payload;
                n.worker_to_host_bytes = payload;
            }
            Strategy::Prefetch => {
                n.worker_to_host_bytes = param_state_bytes(entries, cfg.embedding_dim);
            }
        }
        n
    }
}

/// Local common embedding built from prefetched copies, which hold exactly
/// the worker's owned features of the batch.
fn gather_copies(copies: &FnvHashMap<FeatureId, ParamState>, ids: &[FeatureId], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), dim));
    for (k, f) in ids.iter().enumerate() {
        if let Some(s) = copies.get(f) {
            out.row_mut(k).assign(&ndarray::aview1(&s.embedding));
        }
    }
    out
}

fn sleep(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

fn run_sequential(
    loader: Loader,
    mut manager: Manager<'_>,
    trainer: &mut Trainer<'_>,
    num_steps: u64,
) -> Result<Vec<StepRecord>> {
    let mut inbox = LocalInbox {
        loader,
        acks: VecDeque::new(),
    };
    let mut records = Vec::with_capacity(num_steps as usize);
    for step in 0..num_steps {
        let prepared = manager.prepare(step, &mut inbox)?;
        let (record, ack) = trainer.train(prepared)?;
        inbox.acks.push_back(ack);
        records.push(record);
    }
    manager.release_all(&mut inbox)?;
    Ok(records)
}

fn run_pipelined(
    mut loader: Loader,
    mut manager: Manager<'_>,
    trainer: &mut Trainer<'_>,
    num_steps: u64,
    depth: usize,
) -> Result<Vec<StepRecord>> {
    let (batch_tx, batch_rx) = sync_channel::<Result<Loaded>>(depth);
    let (prep_tx, prep_rx) = sync_channel::<Prepared>(depth);
    let (ack_tx, ack_rx) = channel::<Ack>();

    thread::scope(|s| {
        let load_lane = s.spawn(move || {
            for _ in 0..num_steps {
                let loaded = loader.load();
                let failed = loaded.is_err();
                if batch_tx.send(loaded).is_err() || failed {
                    break;
                }
            }
        });
        let manage_lane = s.spawn(move || -> Result<()> {
            let mut inbox = ChannelInbox {
                batches: batch_rx,
                acks: ack_rx,
            };
            for step in 0..num_steps {
                let prepared = manager.prepare(step, &mut inbox)?;
                prep_tx
                    .send(prepared)
                    .map_err(|_| Error::StageDisconnected("train"))?;
            }
            drop(prep_tx);
            manager.release_all(&mut inbox)
        });

        let mut records = Vec::with_capacity(num_steps as usize);
        let mut train_err = None;
        for prepared in prep_rx.iter() {
            match trainer.train(prepared) {
                Ok((record, ack)) => {
                    records.push(record);
                    // The manager stops listening once it has prepared and
                    // released every batch.
                    let _ = ack_tx.send(ack);
                }
                Err(e) => {
                    train_err = Some(e);
                    break;
                }
            }
        }
        drop(prep_rx);
        drop(ack_tx);

        let manage_result = manage_lane
            .join()
            .unwrap_or_else(|p| std::panic::resume_unwind(p));
        load_lane.join().unwrap_or_else(|p| std::panic::resume_unwind(p));

        let errors: Vec<Error> = train_err.into_iter().chain(manage_result.err()).collect();
        if let Some(e) = pick_error(errors) {
            return Err(e);
        }
        assert_eq!(records.len() as u64, num_steps, "pipeline ended early without an error");
        Ok(records)
    })
}

/// The root cause among stage errors: a stage that merely saw its
/// neighbour disappear is reported only if nothing else went wrong.
fn pick_error(errors: Vec<Error>) -> Option<Error> {
    let (disconnects, causes): (Vec<_>, Vec<_>) = errors
        .into_iter()
        .partition(|e| matches!(e, Error::StageDisconnected(_)));
    causes.into_iter().next().or_else(|| disconnects.into_iter().next())
}

//! Single-worker and chunk-parallel training epochs, early stopping and
//! checkpoints.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_link_prediction_in_place, EvalMode};
use crate::graph::{BatchCursor, NegativePool, Split, TemporalGraph};
use crate::memory::DualMemory;
use crate::model::{Model, StepOutput};
use crate::params::{Adam, AdamConfig, Grads, ParamGroup, ParamStore};
use crate::restarter::reinitialize;
use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub workers: usize,
    pub batches: usize,
    /// Mean per-event link loss over all worker batches.
    pub mean_l1: f64,
    /// Mean distillation loss over batches that had one.
    pub mean_l2: Option<f64>,
    pub restarts: usize,
    pub wall_clock_s: f64,
    /// Loss of every worker batch in order (worker-major within a step).
    pub l1_curve: Vec<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub distill_loss: Option<f64>,
    pub ap: Option<f64>,
    pub restarts: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    pub val_ap: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
}

/// A worker's private state: its memory and random stream.
#[derive(Clone, Debug)]
pub struct WorkerState {
    pub mem: DualMemory,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    pub model: Model,
    pub model_opt: Adam,
    pub restarter_opt: Adam,
    /// Random stream `k` belongs to worker `k`; single-worker training uses stream 0.
    pub rngs: Vec<ChaCha8Rng>,
    /// Memory at the end of the most recent pass (training or validation).
    pub mem: DualMemory,
    /// Every worker's final memory from the last parallel epoch.
    pub worker_memories: Vec<DualMemory>,
    pub epoch: usize,
}

/// Splits `range` into `n` contiguous chunks of (near) equal length.
pub fn chunk_ranges(range: Range<usize>, n: usize) -> Vec<Range<usize>> {
    let len = range.len();
    (0..n).map(|k| range.start + k * len / n..range.start + (k + 1) * len / n).collect()
}

impl Trainer {
    pub fn new(model: Model, g: &TemporalGraph) -> Self {
        let adam = AdamConfig { lr: model.config.learning_rate, ..Default::default() };
        let model_opt = Adam::new(adam, ParamGroup::Model, &model.store);
        let restarter_opt = Adam::new(adam, ParamGroup::Restarter, &model.store);
        let mem = model.new_memory(g);
        Self { model, model_opt, restarter_opt, rngs: Vec::new(), mem, worker_memories: Vec::new(), epoch: 0 }
    }

    fn rng(&mut self, k: usize) -> ChaCha8Rng {
        while self.rngs.len() <= k {
            let mut r = ChaCha8Rng::seed_from_u64(self.model.config.seed);
            r.set_stream(self.rngs.len() as u64);
            self.rngs.push(r);
        }
        self.rngs[k].clone()
    }

    fn apply(&mut self, model_grads: &Grads, restarter_grads: Option<&Grads>) {
        self.model_opt.step(&mut self.model.store, model_grads);
        if let Some(g) = restarter_grads {
            self.restarter_opt.step(&mut self.model.store, g);
        }
    }

    /// One pass over `range` with a single worker: restart draw, batch,
    /// link-loss step, distillation step, per batch.
    pub fn train_epoch(&mut self, g: &TemporalGraph, range: Range<usize>) -> Result<EpochMetrics> {
        let start = Instant::now();
        let pool = NegativePool::for_graph(g, self.model.config.negative_pool)?;
        let mut w = WorkerState { mem: self.model.new_memory(g), rng: self.rng(0) };
        let mut cursor = BatchCursor::new(range, self.model.config.batch_size);
        let mut acc = Accumulator::default();
        while let Some((step, restarted)) = worker_step(&self.model, &mut w, g, &pool, &mut cursor)? {
            self.apply(&step.model_grads, step.restarter_grads.as_ref());
            acc.add(&step, restarted);
        }
        self.rngs[0] = w.rng;
        self.mem = w.mem;
        self.epoch += 1;
        Ok(acc.finish(self.epoch, 1, start))
    }

    /// One pass with `workers` chunk workers in lockstep. Worker `k` trains on
    /// chunk `k`, starting from memory re-initialised over everything before
    /// its chunk. Each step averages the workers' gradients (exhausted workers
    /// count as zero) and applies one shared update.
    pub fn train_parallel(&mut self, g: &TemporalGraph, range: Range<usize>, workers: usize) -> Result<EpochMetrics> {
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let start = Instant::now();
        let pool = NegativePool::for_graph(g, self.model.config.negative_pool)?;
        let chunks = chunk_ranges(range, workers);
        let mut states = Vec::with_capacity(workers);
        for (k, c) in chunks.iter().enumerate() {
            let mut mem = self.model.new_memory(g);
            if k > 0 {
                reinitialize(&mut mem, self.model.restarter.as_ref(), &self.model.store, g, 0..c.start)?;
            }
            states.push(WorkerState { mem, rng: self.rng(k) });
        }
        let mut cursors: Vec<BatchCursor> =
            chunks.iter().map(|c| BatchCursor::new(c.clone(), self.model.config.batch_size)).collect();
        let mut acc = Accumulator::default();
        loop {
            let results = run_workers(&self.model, &mut states, g, &pool, &mut cursors)?;
            if results.iter().all(Option::is_none) {
                break;
            }
            let empty = Grads::zeros_like(&self.model.store);
            let model_parts: Vec<Grads> =
                results.iter().map(|r| r.as_ref().map_or_else(|| empty.clone(), |(s, _)| s.model_grads.clone())).collect();
            let has_restarter = results.iter().flatten().any(|(s, _)| s.restarter_grads.is_some());
            let restarter_avg = has_restarter.then(|| {
                let parts: Vec<Grads> = results
                    .iter()
                    .map(|r| r.as_ref().and_then(|(s, _)| s.restarter_grads.clone()).unwrap_or_else(|| empty.clone()))
                    .collect();
                Grads::average(&parts)
            });
            let model_avg = Grads::average(&model_parts);
            self.apply(&model_avg, restarter_avg.as_ref());
            for (s, restarted) in results.iter().flatten() {
                acc.add(s, *restarted);
            }
        }
        for (k, s) in states.iter().enumerate() {
            self.rngs[k] = s.rng.clone();
        }
        self.worker_memories = states.into_iter().map(|s| s.mem).collect();
        self.mem = self.worker_memories.last().expect("at least one worker").clone();
        self.epoch += 1;
        Ok(acc.finish(self.epoch, workers, start))
    }

    /// Trains with early stopping on validation AP. After each epoch the
    /// validation split is streamed from the end-of-training memory. The best
    /// epoch's parameters and post-validation memory are restored at the end.
    pub fn fit(
        &mut self,
        g: &TemporalGraph,
        train: Range<usize>,
        mut log: impl FnMut(&EpochRecord),
    ) -> Result<FitReport> {
        let cfg = self.model.config.clone();
        let mut epochs = Vec::new();
        let mut val_ap = Vec::new();
        let mut best: Option<(usize, f64, ParamStore, DualMemory)> = None;
        let mut stale = 0;
        for _ in 0..cfg.epochs {
            let m = if cfg.workers == 1 {
                self.train_epoch(g, train.clone())?
            } else {
                self.train_parallel(g, train.clone(), cfg.workers)?
            };
            log(&EpochRecord {
                epoch: m.epoch,
                split: "train".into(),
                loss: m.mean_l1,
                distill_loss: m.mean_l2,
                ap: None,
                restarts: m.restarts,
                wall_clock_s: m.wall_clock_s,
            });
            let snap = self.mem.snapshot();
            let report = eval_link_prediction_in_place(&self.model, &mut self.mem, g, Split::Val, EvalMode::Transductive, &[])?;
            let after_val = self.mem.clone();
            self.mem.restore(&snap)?;
            log(&EpochRecord {
                epoch: m.epoch,
                split: "val".into(),
                loss: f64::NAN,
                distill_loss: None,
                ap: Some(report.value),
                restarts: 0,
                wall_clock_s: report.wall_clock_s,
            });
            val_ap.push(report.value);
            epochs.push(m);
            if best.as_ref().is_none_or(|b| report.value > b.1) {
                best = Some((self.epoch, report.value, self.model.store.clone(), after_val));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        let (best_epoch, best_val_ap, store, mem) = best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
        self.model.store = store;
        self.mem = mem;
        Ok(FitReport { epochs, val_ap, best_epoch, best_val_ap })
    }
}

/// Draws the restart coin, restarts if it comes up, then trains one batch.
/// `None` once the worker's cursor is exhausted.
fn worker_step(
    model: &Model,
    w: &mut WorkerState,
    g: &TemporalGraph,
    pool: &NegativePool,
    cursor: &mut BatchCursor,
) -> Result<Option<(StepOutput, bool)>> {
    if cursor.pos >= cursor.end {
        return Ok(None);
    }
    let u: f64 = w.rng.random();
    let mut restarted = false;
    if u < model.config.restart_prob {
        if let Some(r) = &model.restarter {
            reinitialize(&mut w.mem, Some(r), &model.store, g, 0..cursor.pos)?;
            restarted = true;
        }
    }
    let batch = cursor.next_batch(pool, &mut w.rng).expect("cursor checked above");
    let step = model.train_batch(&mut w.mem, g, &batch, &mut w.rng)?;
    Ok(Some((step, restarted)))
}

type WorkerResult = Option<(StepOutput, bool)>;

fn run_workers(
    model: &Model,
    states: &mut [WorkerState],
    g: &TemporalGraph,
    pool: &NegativePool,
    cursors: &mut [BatchCursor],
) -> Result<Vec<WorkerResult>> {
    if states.len() == 1 {
        return Ok(vec![worker_step(model, &mut states[0], g, pool, &mut cursors[0])?]);
    }
    let outcomes: Vec<std::thread::Result<Result<WorkerResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = states
            .iter_mut()
            .zip(cursors.iter_mut())
            .map(|(w, c)| s.spawn(move || worker_step(model, w, g, pool, c)))
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });
    outcomes
        .into_iter()
        .enumerate()
        .map(|(k, o)| match o {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => Err(Error::Worker { worker: k, message: e.to_string() }),
            Err(_) => Err(Error::Worker { worker: k, message: "panicked".into() }),
        })
        .collect()
}

#[derive(Default)]
struct Accumulator {
    l1: Vec<f64>,
    l2: Vec<f64>,
    restarts: usize,
}

impl Accumulator {
    fn add(&mut self, s: &StepOutput, restarted: bool) {
        self.l1.push(s.l1);
        self.l2.extend(s.l2);
        self.restarts += restarted as usize;
    }

    fn finish(self, epoch: usize, workers: usize, start: Instant) -> EpochMetrics {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        EpochMetrics {
            epoch,
            workers,
            batches: self.l1.len(),
            mean_l1: mean(&self.l1),
            mean_l2: (!self.l2.is_empty()).then(|| mean(&self.l2)),
            restarts: self.restarts,
            wall_clock_s: start.elapsed().as_secs_f64(),
            l1_curve: self.l1,
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TIGC";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a trained model.
///
/// Layout (little endian): magic `TIGC`, version u32, then length-prefixed
/// (u32) UTF-8 strings for the config JSON, config hash and data fingerprint,
/// epoch u64, parameter count u64 and per parameter `name, rows u64, cols
/// u64, f64 data`; then for each of the two optimizers `step u64` and per
/// parameter two moment slots (`u8` present flag then f64 data); finally the
/// memory block written by [`DualMemory::write_to`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub epoch: u64,
    pub params: Vec<(String, Mat)>,
    pub optimizers: [(u64, Vec<Option<Mat>>, Vec<Option<Mat>>); 2],
    pub memory: DualMemory,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> Result<()> {
    w.write_u64::<LittleEndian>(m.rows() as u64)?;
    w.write_u64::<LittleEndian>(m.cols() as u64)?;
    for &v in m.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R) -> Result<Mat> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Ok(Mat::from_vec(rows, cols, data))
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, g: &TemporalGraph) -> Self {
        let store = &trainer.model.store;
        let opt = |a: &Adam| (a.step, a.first.clone(), a.second.clone());
        Self {
            config: trainer.model.config.clone(),
            config_hash: trainer.model.config.hash(),
            data_fingerprint: g.fingerprint(),
            epoch: trainer.epoch as u64,
            params: store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect(),
            optimizers: [opt(&trainer.model_opt), opt(&trainer.restarter_opt)],
            memory: trainer.mem.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_str(w, &serde_json::to_string(&self.config)?)?;
        write_str(w, &self.config_hash)?;
        write_str(w, &self.data_fingerprint)?;
        w.write_u64::<LittleEndian>(self.epoch)?;
        w.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for (name, m) in &self.params {
            write_str(w, name)?;
            write_mat(w, m)?;
        }
        for (step, first, second) in &self.optimizers {
            w.write_u64::<LittleEndian>(*step)?;
            for slot in first.iter().chain(second) {
                match slot {
                    Some(m) => {
                        w.write_u8(1)?;
                        write_mat(w, m)?;
                    }
                    None => w.write_u8(0)?,
                }
            }
        }
        self.memory.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config: TrainConfig = serde_json::from_str(&read_str(r)?)?;
        let config_hash = read_str(r)?;
        if config.hash() != config_hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let data_fingerprint = read_str(r)?;
        let epoch = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            params.push((name, read_mat(r)?));
        }
        let read_opt = |r: &mut R| -> Result<(u64, Vec<Option<Mat>>, Vec<Option<Mat>>)> {
            let step = r.read_u64::<LittleEndian>()?;
            let mut slots = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                slots.push(if r.read_u8()? == 1 { Some(read_mat(r)?) } else { None });
            }
            let second = slots.split_off(n);
            Ok((step, slots, second))
        };
        let optimizers = [read_opt(r)?, read_opt(r)?];
        let memory = DualMemory::read_from(r)?;
        Ok(Self { config, config_hash, data_fingerprint, epoch, params, optimizers, memory })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    /// Rebuilds a trainer for `g`. Refuses data whose fingerprint differs and
    /// parameters whose names or shapes disagree with the stored config.
    pub fn restore(&self, g: &TemporalGraph) -> Result<Trainer> {
        if self.data_fingerprint != g.fingerprint() {
            return Err(Error::Checkpoint("checkpoint was trained on different data".into()));
        }
        let model = Model::new(&self.config, g)?;
        let mut trainer = Trainer::new(model, g);
        let store = &mut trainer.model.store;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", store.len(), self.params.len())));
        }
        for (id, (name, m)) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            if store.name(id) != name || store.get(id).shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not fit {} {:?}",
                    m.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = m.clone();
        }
        if self.memory.num_nodes() != g.num_nodes() || self.memory.dim() != trainer.model.dim {
            return Err(Error::Checkpoint("memory shape does not fit the model".into()));
        }
        for (opt, (step, first, second)) in [&mut trainer.model_opt, &mut trainer.restarter_opt].into_iter().zip(&self.optimizers) {
            opt.step = *step;
            opt.first = first.clone();
            opt.second = second.clone();
        }
        trainer.mem = self.memory.clone();
        trainer.epoch = self.epoch as usize;
        Ok(trainer)
    }

    /// Refuses to pair this checkpoint with a different configuration.
    pub fn check_config(&self, config: &TrainConfig) -> Result<()> {
        if config.hash() != self.config_hash {
            return Err(Error::Checkpoint("configuration differs from the one the checkpoint was trained with".into()));
        }
        Ok(())
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tig_core::eval::{eval_link_prediction, eval_link_prediction_in_place, eval_node_classification, eval_with_restart, stream_split, ClassifierConfig};
use tig_core::{Checkpoint, Error, EvalMode, FitReport, Model, NodeId, RestartInit, RestarterKind, Split, SynthConfig, TemporalGraph, TrainConfig, Trainer};

use crate::config::{RunConfig, Source};
use crate::error::{io, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub const CACHE_EXT: &str = "tigg";

/// Reads the dataset (through the binary cache for CSV input), applies the
/// chronological split and, in inductive mode, withholds the unseen nodes'
/// training events. Returns the graph and the unseen nodes.
pub fn load_graph(cfg: &RunConfig) -> Result<(TemporalGraph, Vec<NodeId>)> {
    let path = cfg.dataset.as_ref().ok_or_else(|| CliError::User("no dataset: pass --dataset or set `dataset` in the config".into()))?;
    if !path.exists() {
        return Err(CliError::User(format!("dataset {} does not exist", path.display())));
    }
    let g = if path.extension().is_some_and(|e| e == CACHE_EXT) {
        read_cache(path)?
    } else {
        let cache = cache_path(&cfg.cache_dir, path);
        let fresh = match (std::fs::metadata(&cache).and_then(|m| m.modified()), std::fs::metadata(path).and_then(|m| m.modified())) {
            (Ok(c), Ok(d)) => c >= d,
            _ => false,
        };
        if fresh {
            log::info!("reading cache {}", cache.display());
            read_cache(&cache)?
        } else {
            ingest(path, cfg.header, &cache)?
        }
    };
    let g = g.chronological_split(cfg.train.train_split, cfg.train.val_split)?;
    match cfg.mode {
        EvalMode::Transductive => Ok((g, Vec::new())),
        EvalMode::Inductive => {
            let unseen = g.pick_unseen_nodes(cfg.train.unseen_frac, cfg.train.seed);
            log::info!("withholding {} unseen nodes from training", unseen.len());
            Ok((g.mask_training_events(&unseen)?, unseen))
        }
    }
}

fn cache_path(dir: &Path, dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    dir.join(format!("{stem}.{CACHE_EXT}"))
}

fn read_cache(path: &Path) -> Result<TemporalGraph> {
    let f = File::open(path).map_err(|e| CliError::User(format!("cannot open {}: {e}", path.display())))?;
    Ok(TemporalGraph::read_cache(std::io::BufReader::new(f))?)
}

fn ingest(csv: &Path, header: bool, cache: &Path) -> Result<TemporalGraph> {
    let start = Instant::now();
    let g = TemporalGraph::ingest_csv(csv, header)?;
    log::info!("ingested {} events over {} nodes in {:.1}s", g.num_events(), g.num_nodes(), start.elapsed().as_secs_f64());
    if let Some(dir) = cache.parent() {
        std::fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    }
    let f = File::create(cache).map_err(io(format!("creating {}", cache.display())))?;
    g.write_cache(BufWriter::new(f))?;
    Ok(g)
}

/// An output directory: a resolved config file plus a line-delimited record
/// log. Every record carries the config hash.
pub struct Run {
    pub dir: PathBuf,
    log: BufWriter<File>,
    hash: String,
}

impl Run {
    pub fn create(dir: &Path, log_name: &str, cfg: &RunConfig, train: &TrainConfig, g: &TemporalGraph) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
        let hash = train.hash();
        #[derive(Serialize)]
        struct Resolved<'a> {
            config_hash: &'a str,
            data_fingerprint: String,
            config: &'a RunConfig,
            effective: &'a TrainConfig,
        }
        let resolved = Resolved { config_hash: &hash, data_fingerprint: g.fingerprint(), config: cfg, effective: train };
        let json = serde_json::to_string_pretty(&resolved).expect("config serializes");
        std::fs::write(dir.join("config.json"), json + "\n").map_err(io("writing config.json"))?;
        let path = dir.join(log_name);
        let log = BufWriter::new(File::create(&path).map_err(io(format!("creating {}", path.display())))?);
        Ok(Self { dir: dir.to_path_buf(), log, hash })
    }

    /// Appends one record to the log and echoes it on stdout.
    pub fn emit(&mut self, record: &impl Serialize) -> Result<()> {
        let mut value = serde_json::to_value(record).expect("record serializes");
        if let serde_json::Value::Object(m) = &mut value {
            m.entry("config_hash").or_insert_with(|| self.hash.clone().into());
        }
        let line = value.to_string();
        println!("{line}");
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(io("writing the record log"))
    }
}

/// Fits a fresh model, logging epochs to `run`. On divergence the last finite
/// state is saved to `checkpoint.diverged.tigc` before the error is returned.
fn fit_and_save(run: &mut Run, train: &TrainConfig, g: &TemporalGraph) -> Result<(Trainer, FitReport)> {
    let mut trainer = Trainer::new(Model::new(train, g)?, g);
    let mut write_err = None;
    let fitted = trainer.fit(g, train.training_range(g), |r| {
        if let Err(e) = run.emit(r) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    match fitted {
        Ok(report) => {
            log::info!("best epoch {} with validation AP {:.4}", report.best_epoch, report.best_val_ap);
            Checkpoint::capture(&trainer, g).save(&run.dir.join("checkpoint.tigc"))?;
            Ok((trainer, report))
        }
        Err(e @ Error::Diverged { .. }) => {
            let path = run.dir.join("checkpoint.diverged.tigc");
            Checkpoint::capture(&trainer, g).save(&path)?;
            log::error!("saved the last finite state to {}", path.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct IngestRecord {
    cache: PathBuf,
    events: usize,
    nodes: usize,
    edge_dim: usize,
    data_fingerprint: String,
}

pub fn run_ingest(cfg: &RunConfig) -> Result<()> {
    let path = cfg.dataset.as_ref().ok_or_else(|| CliError::User("ingest needs --dataset".into()))?;
    if !path.exists() {
        return Err(CliError::User(format!("dataset {} does not exist", path.display())));
    }
    let cache = cache_path(&cfg.cache_dir, path);
    let g = ingest(path, cfg.header, &cache)?;
    let record = IngestRecord { cache, events: g.num_events(), nodes: g.num_nodes(), edge_dim: g.edge_dim(), data_fingerprint: g.fingerprint() };
    println!("{}", serde_json::to_string(&record).expect("record serializes"));
    Ok(())
}

/// `train` (single process) and `train-parallel`.
pub fn run_train(cfg: &RunConfig, parallel: bool) -> Result<()> {
    let (g, unseen) = load_graph(cfg)?;
    let mut train = cfg.train.clone();
    if !parallel && train.workers != 1 {
        log::warn!("train is single-process; ignoring workers = {} (use train-parallel)", train.workers);
        train.workers = 1;
    }
    let mut run = Run::create(&cfg.out, "metrics.jsonl", cfg, &train, &g)?;
    let (trainer, _) = fit_and_save(&mut run, &train, &g)?;
    let report = eval_link_prediction(&trainer.model, &trainer.mem, &g, Split::Test, cfg.mode, &unseen)?;
    run.emit(&report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Link,
    Node,
    All,
}

/// Loads a checkpoint for the configured dataset. Training keys the user set
/// explicitly must agree with the checkpoint's configuration.
fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(RunConfig, TemporalGraph, Vec<NodeId>, Trainer)> {
    let ck = Checkpoint::load(path)?;
    let (serde_json::Value::Object(mine), serde_json::Value::Object(theirs)) =
        (serde_json::to_value(&cfg.train).expect("config serializes"), serde_json::to_value(&ck.config).expect("config serializes"))
    else {
        unreachable!("configs serialize to objects")
    };
    let clashes: Vec<String> = cfg
        .provenance
        .iter()
        .filter(|(k, s)| matches!(s, Source::File | Source::Flag) && mine.contains_key(*k) && mine[*k] != theirs[*k])
        .map(|(k, _)| format!("{k} = {} (checkpoint has {})", mine[k], theirs[k]))
        .collect();
    if !clashes.is_empty() {
        return Err(CliError::User(format!("checkpoint was trained with a different configuration: {}", clashes.join(", "))));
    }
    let resolved = RunConfig { train: ck.config.clone(), ..cfg.clone() };
    let (g, unseen) = load_graph(&resolved)?;
    let trainer = ck.restore(&g)?;
    Ok((resolved, g, unseen, trainer))
}

/// Link prediction streams the whole history from zero memory with frozen
/// parameters, scoring validation and then test.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, task: Task) -> Result<()> {
    let (cfg, g, unseen, trainer) = load_checkpoint(cfg, checkpoint)?;
    let mut run = Run::create(&cfg.out, "eval.jsonl", &cfg, &cfg.train, &g)?;
    if matches!(task, Task::Link | Task::All) {
        let mut mem = trainer.model.new_memory(&g);
        stream_split(&trainer.model, &mut mem, &g, Split::Train)?;
        for split in [Split::Val, Split::Test] {
            let report = eval_link_prediction_in_place(&trainer.model, &mut mem, &g, split, cfg.mode, &unseen)?;
            run.emit(&report)?;
        }
    }
    if matches!(task, Task::Node | Task::All) {
        let clf = ClassifierConfig { seed: cfg.train.seed, ..ClassifierConfig::default() };
        run.emit(&eval_node_classification(&trainer.model, &g, clf)?)?;
    }
    Ok(())
}

/// Warm restart at the validation boundary, against zero re-initialisation.
/// Trains first unless a checkpoint is given.
pub fn run_restart_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    if cfg.mode == EvalMode::Inductive {
        return Err(CliError::User("restart-eval runs the transductive protocol only".into()));
    }
    let (cfg, g, trainer, mut run) = match checkpoint {
        Some(path) => {
            let (cfg, g, _, trainer) = load_checkpoint(cfg, path)?;
            let run = Run::create(&cfg.out, "restart.jsonl", &cfg, &cfg.train, &g)?;
            (cfg, g, trainer, run)
        }
        None => {
            if cfg.train.restarter == RestarterKind::None {
                return Err(CliError::User("restart-eval needs a restarter (static or transformer)".into()));
            }
            let (g, _) = load_graph(cfg)?;
            let mut run = Run::create(&cfg.out, "restart.jsonl", cfg, &cfg.train, &g)?;
            let (trainer, _) = fit_and_save(&mut run, &cfg.train, &g)?;
            (cfg.clone(), g, trainer, run)
        }
    };
    if cfg.train.restarter == RestarterKind::None {
        return Err(CliError::User("the checkpoint has no restarter to warm-start from".into()));
    }
    for init in [RestartInit::Restarter, RestartInit::Zero] {
        let (val, test) = eval_with_restart(&trainer.model, &g, init)?;
        run.emit(&val)?;
        run.emit(&test)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    RestartProb,
    TrainFrac,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::RestartProb => "restart-prob",
            Grid::TrainFrac => "train-frac",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Grid::RestartProb => vec![0.001, 0.01, 0.1],
            Grid::TrainFrac => (1..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    grid: &'static str,
    value: f64,
    config_hash: String,
    best_epoch: usize,
    val_ap: f64,
    test_ap: f64,
    /// Test AP after zero re-initialisation at the boundary (train-frac grid).
    zero_init_test_ap: Option<f64>,
    wall_clock_s: f64,
}

/// One fresh training run per grid value; writes `sweep-<grid>.csv`.
pub fn run_sweep(cfg: &RunConfig, grid: Grid, values: &[f64]) -> Result<()> {
    if grid == Grid::TrainFrac && cfg.train.restarter == RestarterKind::None {
        return Err(CliError::User("the train-frac sweep evaluates with a restart and needs a restarter".into()));
    }
    let (g, unseen) = load_graph(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(io(format!("creating {}", cfg.out.display())))?;
    let csv_path = cfg.out.join(format!("sweep-{}.csv", grid.name()));
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Internal(format!("creating {}: {e}", csv_path.display())))?;
    for &value in values {
        let mut train = cfg.train.clone();
        match grid {
            Grid::RestartProb => train.restart_prob = value,
            Grid::TrainFrac => train.train_subset = value,
        }
        train.validate()?;
        let start = Instant::now();
        let dir = cfg.out.join(format!("sweep-{}", grid.name())).join(value.to_string());
        let mut run = Run::create(&dir, "metrics.jsonl", cfg, &train, &g)?;
        let (trainer, fit) = fit_and_save(&mut run, &train, &g)?;
        let (val_ap, test_ap, zero) = match grid {
            Grid::RestartProb => {
                let mut mem = trainer.mem.clone();
                let test = eval_link_prediction_in_place(&trainer.model, &mut mem, &g, Split::Test, cfg.mode, &unseen)?;
                run.emit(&test)?;
                (fit.best_val_ap, test.value, None)
            }
            Grid::TrainFrac => {
                let (val, test) = eval_with_restart(&trainer.model, &g, RestartInit::Restarter)?;
                let (_, zero) = eval_with_restart(&trainer.model, &g, RestartInit::Zero)?;
                for r in [&val, &test, &zero] {
                    run.emit(r)?;
                }
                (val.value, test.value, Some(zero.value))
            }
        };
        let row = SweepRow {
            grid: grid.name(),
            value,
            config_hash: train.hash(),
            best_epoch: fit.best_epoch,
            val_ap,
            test_ap,
            zero_init_test_ap: zero,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        csv.serialize(&row).and_then(|_| csv.flush().map_err(Into::into)).map_err(|e| CliError::Internal(format!("writing {}: {e}", csv_path.display())))?;
        log::info!("{} = {value}: test AP {test_ap:.4}", grid.name());
    }
    Ok(())
}

/// Writes a synthetic stream as a JODIE-style CSV.
pub fn run_synth(synth: &SynthConfig, out: &Path) -> Result<()> {
    let g = synth.generate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    }
    let fail = |e: csv::Error| CliError::Internal(format!("writing {}: {e}", out.display()));
    let mut w = csv::Writer::from_path(out).map_err(fail)?;
    let mut header = vec!["user_id".to_string(), "item_id".into(), "timestamp".into(), "state_label".into()];
    header.extend((0..g.edge_dim()).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(fail)?;
    let ids = g.id_map();
    for e in g.events() {
        let mut rec = vec![
            ids.users[e.src].clone(),
            ids.items[e.dst - synth.users].clone(),
            e.t.to_string(),
            u8::from(e.label == Some(true)).to_string(),
        ];
        rec.extend(g.edge_feat(e.idx).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(fail)?;
    }
    w.flush().map_err(io(format!("writing {}", out.display())))?;
    log::info!("wrote {} events to {}", g.num_events(), out.display());
    Ok(())
}

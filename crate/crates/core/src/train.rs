//! Training and evaluation loops, metrics CSV output and checkpointing.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use pmp_autodiff::{AutodiffError, ParamGrads, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{RunConfig, TaskSpec};
use crate::error::{PmpError, Result};
use crate::model::{InstanceView, Model};
use crate::optim::Adam;
use crate::tasks::cora::load_cora;
use crate::tasks::dataset::Dataset;
use crate::tasks::metrics::{argmax_rows, greedy_assignment, kendall_tau};
use crate::tasks::{GraphInstance, TEST, TRAIN, VAL};

pub const METRICS_HEADER: &str = "epoch,split,nll,kl,accuracy,kendall_tau,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Worker pool sized by `PMP_THREADS` when set, else by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PMP_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            PmpError::Config(format!("PMP_THREADS must be a positive integer, got {v:?}"))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| PmpError::InvalidArgument(format!("thread pool: {e}")))
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub nll: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub kendall_tau: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let tau = self
            .kendall_tau
            .map(|t| format!("{t:.6}"))
            .unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{}",
            self.epoch, self.split, self.nll, self.kl, self.accuracy, tau, self.wall_ms
        )
    }
}

/// Aggregate scores of a model on a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub instances: usize,
    pub nodes: usize,
    pub nll: f64,
    pub accuracy: f64,
    pub kendall_tau: Option<f64>,
}

/// Seeds sample `m` of instance `i` independently of evaluation order.
pub fn eval_rng(seed: u64, instance: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((instance as u64) << 20) ^ sample as u64);
    rng
}

fn puzzle_tau(probs: &Tensor<f64>, targets: &[usize]) -> Result<f64> {
    let order = greedy_assignment(probs)?;
    kendall_tau(&order, targets)
}

/// Scores `model` on the nodes flagged with `bit`, averaging class
/// probabilities over `samples` prior rollouts per instance.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f32>,
    instances: &[GraphInstance],
    bit: u8,
    samples: usize,
    seed: u64,
    puzzle: bool,
    pool: &rayon::ThreadPool,
) -> Result<EvalReport> {
    let per: Vec<Result<Option<(f64, usize, usize, Option<f64>)>>> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let mask = g.mask(bit);
                if mask.is_empty() {
                    return Ok(None);
                }
                let probs = model.predict(store, &g.features, &g.topology, samples, |m| {
                    eval_rng(seed, i, m)
                })?;
                let pred = argmax_rows(&probs);
                let mut nll = 0.0;
                let mut correct = 0;
                for &n in &mask {
                    nll -= probs.get(n, g.targets[n]).max(1e-300).ln();
                    correct += usize::from(pred[n] == g.targets[n]);
                }
                let tau = if puzzle {
                    Some(puzzle_tau(&probs, &g.targets)?)
                } else {
                    None
                };
                Ok(Some((nll, correct, mask.len(), tau)))
            })
            .collect()
    });
    let mut nll = 0.0;
    let (mut correct, mut nodes, mut scored) = (0usize, 0usize, 0usize);
    let mut tau_sum = 0.0;
    for r in per {
        if let Some((l, c, n, tau)) = r? {
            nll += l;
            correct += c;
            nodes += n;
            scored += 1;
            tau_sum += tau.unwrap_or(0.0);
        }
    }
    if nodes == 0 {
        return Err(PmpError::EmptyMask);
    }
    Ok(EvalReport {
        instances: scored,
        nodes,
        nll: nll / nodes as f64,
        accuracy: correct as f64 / nodes as f64,
        kendall_tau: puzzle.then(|| tau_sum / scored as f64),
    })
}

/// Loads a checkpoint's model and scores it on the test-flagged nodes.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    instances: &[GraphInstance],
    samples: usize,
) -> Result<EvalReport> {
    let cfg = ckpt.config()?;
    if let Some(g) = instances.first() {
        if g.feature_dim() != ckpt.feature_dim || g.n_classes != ckpt.n_classes {
            return Err(PmpError::Shape(format!(
                "dataset has {} features and {} classes, checkpoint expects {} and {}",
                g.feature_dim(),
                g.n_classes,
                ckpt.feature_dim,
                ckpt.n_classes
            )));
        }
    }
    let (model, store) = build_model(&cfg, ckpt.feature_dim, ckpt.n_classes);
    let mut store = store;
    ckpt.load_params(&mut store)?;
    let pool = thread_pool()?;
    let puzzle = matches!(cfg.task, TaskSpec::Puzzle { .. });
    evaluate_model(
        &model,
        &store,
        instances,
        TEST,
        samples,
        cfg.schedule.seed,
        puzzle,
        &pool,
    )
}

/// Model and freshly initialized parameters for `cfg`.
pub fn build_model(
    cfg: &RunConfig,
    feature_dim: usize,
    n_classes: usize,
) -> (Model, ParamStore<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg, feature_dim, n_classes, &mut rng);
    (model, store)
}

/// Gradient and statistics from one training instance.
struct InstanceResult {
    grads: ParamGrads<f32>,
    nll: f64,
    kl: f64,
    total: f64,
    correct: usize,
    nodes: usize,
    tau: Option<f64>,
}

/// Outcome of a finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub history: Vec<MetricsRow>,
}

impl TrainSummary {
    pub fn rows(&self, split: &str) -> impl Iterator<Item = &MetricsRow> {
        let split = split.to_string();
        self.history.iter().filter(move |r| r.split == split)
    }
}

/// Stateful training loop over an in-memory dataset.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    train: Vec<GraphInstance>,
    val: Vec<GraphInstance>,
    feature_dim: usize,
    n_classes: usize,
    pool: rayon::ThreadPool,
    out_dir: Option<PathBuf>,
    /// Mean training loss of each finished epoch.
    pub losses: Vec<f64>,
    /// Parameters at the best validation epoch seen by this trainer.
    best_params: Option<Vec<Tensor<f32>>>,
}

/// Splits off the validation instances. A single instance serves both
/// splits through its node flags.
pub fn split_instances(
    instances: &[GraphInstance],
    val_fraction: f64,
) -> (Vec<GraphInstance>, Vec<GraphInstance>) {
    if instances.len() < 2 || val_fraction <= 0.0 {
        return (instances.to_vec(), instances.to_vec());
    }
    let n_val =
        ((instances.len() as f64 * val_fraction).round() as usize).clamp(1, instances.len() - 1);
    let cut = instances.len() - n_val;
    (instances[..cut].to_vec(), instances[cut..].to_vec())
}

impl Trainer {
    pub fn new(
        cfg: RunConfig,
        instances: &[GraphInstance],
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        let first = instances
            .first()
            .ok_or_else(|| PmpError::InvalidArgument("dataset has no instances".into()))?;
        let (feature_dim, n_classes) = (first.feature_dim(), first.n_classes);
        for (i, g) in instances.iter().enumerate() {
            g.validate()?;
            if g.feature_dim() != feature_dim || g.n_classes != n_classes {
                return Err(PmpError::Shape(format!(
                    "instance {i} has {} features and {} classes, instance 0 has {feature_dim} and {n_classes}",
                    g.feature_dim(),
                    g.n_classes
                )));
            }
        }
        let (train, val) = split_instances(instances, cfg.schedule.val_fraction);
        let (model, store) = build_model(&cfg, feature_dim, n_classes);
        let adam = Adam::new(&cfg.optimizer, &store);
        // Separate stream from the one used for initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
        rng.set_stream(1);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| PmpError::io(format!("creating {}", dir.display()), e))?;
        }
        Ok(Self {
            cfg,
            model,
            store,
            adam,
            rng,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
            train,
            val,
            feature_dim,
            n_classes,
            pool: thread_pool()?,
            out_dir: out_dir.map(Path::to_path_buf),
            losses: Vec::new(),
            best_params: None,
        })
    }

    /// Continues from `ckpt`; its config hash must match `cfg`.
    pub fn resume(
        cfg: RunConfig,
        instances: &[GraphInstance],
        out_dir: Option<&Path>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(PmpError::ConfigHashMismatch {
                expected: cfg.hash(),
                found: ckpt.config_hash,
            });
        }
        let mut t = Self::new(cfg, instances, out_dir)?;
        if ckpt.feature_dim != t.feature_dim || ckpt.n_classes != t.n_classes {
            return Err(PmpError::Shape(
                "checkpoint shapes do not match the dataset".into(),
            ));
        }
        ckpt.load_params(&mut t.store)?;
        if let Some((m, v)) = &ckpt.moments {
            t.adam.m = m.clone();
            t.adam.v = v.clone();
        }
        t.adam.step = ckpt.step;
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch as usize;
        t.best_val = ckpt.best_val;
        t.best_epoch = ckpt.best_epoch as usize;
        t.stale_epochs = ckpt.stale_epochs as usize;
        Ok(t)
    }

    fn is_puzzle(&self) -> bool {
        matches!(self.cfg.task, TaskSpec::Puzzle { .. })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_json: self.cfg.to_json(),
            config_hash: self.cfg.hash(),
            epoch: self.epoch as u64,
            step: self.adam.step,
            rng: RngState::capture(&self.rng),
            feature_dim: self.feature_dim,
            n_classes: self.n_classes,
            best_val: self.best_val,
            best_epoch: self.best_epoch as u64,
            stale_epochs: self.stale_epochs as u64,
            params: self
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    fn instance_result(&self, g: &GraphInstance, seed: u64) -> Result<Option<InstanceResult>> {
        let mask = g.mask(TRAIN);
        if mask.is_empty() {
            return Ok(None);
        }
        let visible = g.visible(TRAIN);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_switch = rng.random_range(0..=self.cfg.max_t_switch());
        let view = InstanceView {
            features: &g.features,
            topo: &g.topology,
            targets: &g.targets,
            mask: &mask,
            visible: &visible,
        };
        let mut tape = Tape::new();
        let report = self
            .model
            .loss(&mut tape, &self.store, &view, t_switch, true, &mut rng)?;
        let loss = tape.item(report.loss)?;
        if !loss.is_finite() {
            return Err(AutodiffError::NonFinite { op: "loss" }.into());
        }
        let grads = tape.backward(report.loss, &self.store)?;
        let probs = tape
            .value(report.final_log_probs)
            .map(|x| x.exp())
            .cast::<f64>();
        let pred = argmax_rows(&probs);
        let correct = mask.iter().filter(|&&n| pred[n] == g.targets[n]).count();
        let tau = if self.is_puzzle() {
            Some(puzzle_tau(&probs, &g.targets)?)
        } else {
            None
        };
        Ok(Some(InstanceResult {
            grads,
            nll: report.final_nll(),
            kl: report.kl,
            total: report.total,
            correct,
            nodes: mask.len(),
            tau,
        }))
    }

    fn dump_non_finite(&self, detail: &str) -> PmpError {
        let dump = self
            .out_dir
            .as_ref()
            .map(|d| d.join(NAN_DUMP))
            .unwrap_or_else(|| PathBuf::from(NAN_DUMP));
        let body = serde_json::json!({
            "epoch": self.epoch + 1,
            "detail": detail,
            "recent_epoch_losses": self.losses.iter().rev().take(5).collect::<Vec<_>>(),
        });
        if self.out_dir.is_some() {
            // The run is already failing; a dump write error must not mask it.
            let _ = std::fs::write(&dump, body.to_string());
        }
        PmpError::NonFiniteLoss {
            epoch: self.epoch + 1,
            dump,
        }
    }

    /// One pass over the training instances followed by validation.
    pub fn run_epoch(&mut self) -> Result<(MetricsRow, MetricsRow)> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let batch = self.cfg.schedule.batch_size;
        let (mut nll, mut kl, mut total, mut tau) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut nodes, mut seen) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(batch) {
            let seeds: Vec<u64> = chunk.iter().map(|_| self.rng.next_u64()).collect();
            let this = &*self;
            let results: Vec<Result<Option<InstanceResult>>> = self.pool.install(|| {
                chunk
                    .par_iter()
                    .zip(&seeds)
                    .map(|(&i, &s)| this.instance_result(&this.train[i], s))
                    .collect()
            });
            let mut acc = ParamGrads::zeros_like(&self.store);
            let mut used = 0usize;
            for r in results {
                let r = match r {
                    Ok(r) => r,
                    Err(PmpError::Autodiff(e @ AutodiffError::NonFinite { .. })) => {
                        return Err(self.dump_non_finite(&e.to_string()))
                    }
                    Err(e) => return Err(e),
                };
                let Some(r) = r else { continue };
                acc.add_assign(&r.grads);
                used += 1;
                nll += r.nll;
                kl += r.kl;
                total += r.total;
                correct += r.correct;
                nodes += r.nodes;
                tau += r.tau.unwrap_or(0.0);
            }
            if used == 0 {
                continue;
            }
            seen += used;
            acc.scale(1.0 / used as f32);
            if !acc.is_finite() {
                return Err(self.dump_non_finite("non-finite gradient"));
            }
            acc.clip_norm(self.cfg.optimizer.clip_norm as f32);
            self.adam.apply(&mut self.store, &acc)?;
        }
        if seen == 0 {
            return Err(PmpError::EmptyMask);
        }
        self.epoch += 1;
        self.losses.push(total / seen as f64);
        let train_ms = start.elapsed().as_millis() as u64;
        let wall = |ms: u64| {
            if self.cfg.schedule.record_wall_time {
                ms
            } else {
                0
            }
        };
        let puzzle = self.is_puzzle();
        let train_row = MetricsRow {
            epoch: self.epoch,
            split: "train".into(),
            nll: nll / seen as f64,
            kl: kl / seen as f64,
            accuracy: correct as f64 / nodes.max(1) as f64,
            kendall_tau: puzzle.then(|| tau / seen as f64),
            wall_ms: wall(train_ms),
        };
        let val_start = Instant::now();
        let report = evaluate_model(
            &self.model,
            &self.store,
            &self.val,
            VAL,
            self.cfg.model.samples,
            self.cfg.schedule.seed,
            puzzle,
            &self.pool,
        )?;
        let val_row = MetricsRow {
            epoch: self.epoch,
            split: "val".into(),
            nll: report.nll,
            kl: 0.0,
            accuracy: report.accuracy,
            kendall_tau: report.kendall_tau,
            wall_ms: wall(val_start.elapsed().as_millis() as u64),
        };
        if report.accuracy > self.best_val {
            self.best_val = report.accuracy;
            self.best_epoch = self.epoch;
            self.stale_epochs = 0;
            self.best_params = Some(
                self.store
                    .entries()
                    .iter()
                    .map(|e| e.value.clone())
                    .collect(),
            );
        } else {
            self.stale_epochs += 1;
        }
        Ok((train_row, val_row))
    }

    /// Trains until the epoch budget or early stopping, writing metrics and
    /// checkpoints when an output directory was given.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let mut history = Vec::new();
        let metrics_path = self.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
        if let Some(p) = &metrics_path {
            if self.epoch == 0 || !p.exists() {
                std::fs::write(p, format!("{METRICS_HEADER}\n"))
                    .map_err(|e| PmpError::io(format!("writing {}", p.display()), e))?;
            }
        }
        let mut stopped_early = false;
        while self.epoch < self.cfg.schedule.epochs {
            if self.stale_epochs >= self.cfg.schedule.patience && self.epoch > 0 {
                stopped_early = true;
                break;
            }
            let (train_row, val_row) = self.run_epoch()?;
            info!(
                "epoch {} train nll {:.4} acc {:.3} | val nll {:.4} acc {:.3}",
                self.epoch, train_row.nll, train_row.accuracy, val_row.nll, val_row.accuracy
            );
            if let (Some(dir), Some(p)) = (&self.out_dir, &metrics_path) {
                let mut text = String::new();
                writeln!(text, "{}", train_row.to_csv()).expect("string write");
                writeln!(text, "{}", val_row.to_csv()).expect("string write");
                let mut f = std::fs::OpenOptions::new()
                    .append(true)
                    .open(p)
                    .map_err(|e| PmpError::io(format!("opening {}", p.display()), e))?;
                f.write_all(text.as_bytes())
                    .map_err(|e| PmpError::io(format!("writing {}", p.display()), e))?;
                let ck = self.checkpoint();
                if self.best_epoch == self.epoch {
                    ck.save(&dir.join(BEST_CKPT))?;
                }
                ck.save(&dir.join(LAST_CKPT))?;
            }
            history.push(train_row);
            history.push(val_row);
        }
        Ok(TrainSummary {
            epochs_run: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            stopped_early,
            history,
        })
    }

    /// Parameters of the best validation epoch: kept in memory when it
    /// happened in this process, else read back from `best.ckpt`, else the
    /// current ones.
    pub fn best_store(&self) -> Result<ParamStore<f32>> {
        let mut store = self.store.clone();
        if let Some(best) = &self.best_params {
            store.load_values(best.clone())?;
        } else if let Some(dir) = &self.out_dir {
            let p = dir.join(BEST_CKPT);
            if p.exists() {
                Checkpoint::load(&p)?.load_params(&mut store)?;
            }
        }
        Ok(store)
    }

    pub fn pool(&self) -> &rayon::ThreadPool {
        &self.pool
    }
}

/// Reads the instances a run trains on. For the citation task `data_path`
/// is a directory holding `cora.content` and `cora.cites`, and the
/// configured fraction of noise edges is added; otherwise it is a `PMPD`
/// file whose task must match the config.
pub fn load_instances(cfg: &RunConfig, data_path: &Path) -> Result<Vec<GraphInstance>> {
    if let TaskSpec::Cora { noise_ratio } = cfg.task {
        let data = load_cora(
            &data_path.join("cora.content"),
            &data_path.join("cora.cites"),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
        rng.set_stream(2);
        let noisy = data
            .instance
            .topology
            .add_noise_edges(noise_ratio, &mut rng)?;
        return Ok(vec![data.instance.with_topology(noisy)?]);
    }
    let data = Dataset::load(data_path)?;
    if data.task != cfg.task.name() {
        return Err(PmpError::Config(format!(
            "config is for task {} but the dataset holds {}",
            cfg.task.name(),
            data.task
        )));
    }
    Ok(data.instances)
}

/// `pmp train`: reads the data, trains and writes `metrics.csv`,
/// `best.ckpt` and `last.ckpt` into `out_dir`.
pub fn train(
    cfg: RunConfig,
    data_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let instances = load_instances(&cfg, data_path)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &instances, Some(out_dir), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg, &instances, Some(out_dir))?,
    };
    trainer.run()
}

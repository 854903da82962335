//! Training loop, evaluation and dataset assembly.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::batch::{bucketed_batches, TrainBatch};
use super::checkpoint::Checkpoint;
use super::config::{DataTask, RunConfig};
use crate::datagen::{self, Dataset, Instance, TaskTag};
use crate::decoder::{self, LossConfig};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::Set2Seq;
use crate::numerics::{adamw_step, grad_check, AdamwState, GradCheckConfig, GradCheckReport, Graph, Matrix, ParameterStore, SeededRng};
use crate::permutation::Permutation;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const DROPOUT_SALT: u64 = 0x5_eedd_20b0;
const TEST_SEED_OFFSET: u64 = 0x7e57_0000;

/// Worker threads from `SET2SEQ_THREADS` (1 when unset or invalid).
pub fn thread_count() -> usize {
    std::env::var("SET2SEQ_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Order-preserving map over `0..n`, parallel when more than one thread is
/// configured. Each item is computed independently, so results do not
/// depend on the thread count.
fn map_items<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if thread_count() > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates or loads the data described by `cfg.data`. The validation set
/// is a seeded fraction of the training data.
pub fn build_data(cfg: &RunConfig) -> Result<Splits> {
    let (train, test) = generate_data(cfg)?;
    let (train, val) = split_validation(train, cfg.data.val_fraction, cfg.seed);
    Ok(Splits { train, val, test })
}

/// Unsplit `(train, test)` data; generated test sets use a seed disjoint
/// from the training generator.
pub fn generate_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let test_seed = |s: u64| s.wrapping_add(TEST_SEED_OFFSET);
    let (train, test) = match d.task {
        DataTask::Tsp => {
            let test = datagen::TspConfig { count: d.test_count, seed: test_seed(d.tsp.seed), ..d.tsp.clone() };
            (datagen::gen_tsp(&d.tsp)?, datagen::gen_tsp(&test)?)
        }
        DataTask::Grammar => {
            let test = datagen::GrammarConfig { count: d.test_count, seed: test_seed(d.grammar.seed), ..d.grammar.clone() };
            (datagen::gen_grammar(&d.grammar)?, datagen::gen_grammar(&test)?)
        }
        DataTask::Ruleset => {
            let test = datagen::RulesetConfig { count: d.test_count, seed: test_seed(d.ruleset.seed), ..d.ruleset.clone() };
            (datagen::gen_ruleset(&d.ruleset)?, datagen::gen_ruleset(&test)?)
        }
        DataTask::File => {
            if d.train_path.is_empty() {
                return Err(Error::Config("data.task = \"file\" needs data.train_path".into()));
            }
            let train = datagen::load_dataset(Path::new(&d.train_path))?;
            let test = if d.test_path.is_empty() { Vec::new() } else { datagen::load_dataset(Path::new(&d.test_path))? };
            (train, test)
        }
    };
    Ok((train, test))
}

fn split_validation(data: Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n_val = ((data.len() as f64) * fraction).round() as usize;
    if n_val == 0 || n_val >= data.len() {
        return (data, Vec::new());
    }
    let order = SeededRng::derive(seed, SPLIT_STREAM).permutation(data.len());
    let mut is_val = vec![false; data.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (inst, v) in data.into_iter().zip(is_val) {
        if v {
            val.push(inst);
        } else {
            train.push(inst);
        }
    }
    (train, val)
}

/// Finite-difference check of the full training loss (dropout off) on a
/// random `n`-element instance with a random target. The pointer vector is
/// initialized randomly: with a zero pointer every other gradient vanishes.
pub fn model_grad_check(cfg: &RunConfig, d_input: usize, n: usize, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::derive(cfg.seed, INIT_STREAM);
    let mut model_cfg = cfg.model_config(d_input);
    model_cfg.decoder.zero_init_pointer = false;
    let model = Set2Seq::new(&mut store, model_cfg, &mut rng)?;
    let x = Matrix::from_vec(n, d_input, (0..n * d_input).map(|_| rng.uniform_range(-3.0, 3.0)).collect())?;
    let y = Permutation::new(rng.permutation(n))?;
    let loss = cfg.loss();
    let mask = vec![true; n];
    grad_check(
        &mut store,
        |g| {
            let (l, _) = model.instance_graph(g, &x, &mask, &y, &loss, &mut Dropout::off())?;
            decoder::instance_loss(g, &l, &loss)
        },
        check,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub l_s: f64,
    pub grad_norm: f64,
}

/// Model, parameters, optimizer and RNG state of one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Set2Seq,
    pub store: ParameterStore,
    pub opt: AdamwState,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_score: f64,
    pub best_epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, d_input: usize) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let model = Set2Seq::new(&mut store, cfg.model_config(d_input), &mut SeededRng::derive(cfg.seed, INIT_STREAM))?;
        Ok(Self {
            cfg: cfg.clone(),
            opt: AdamwState::new(&store),
            model,
            store,
            rng: SeededRng::derive(cfg.seed, SHUFFLE_STREAM),
            epoch: 0,
            step: 0,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = ParameterStore::new();
        let model = Set2Seq::new(&mut store, ckpt.model.clone(), &mut SeededRng::new(0))?;
        if store.len() != ckpt.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                ckpt.values.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for ((id, name), (saved, value)) in ids.into_iter().zip(ckpt.names.iter().zip(&ckpt.values)) {
            if &name != saved {
                return Err(Error::Checkpoint(format!("parameter `{saved}` found where `{name}` was expected")));
            }
            store.set_value(id, value.clone())?;
        }
        Ok(Self {
            cfg: ckpt.config.clone(),
            model,
            store,
            opt: AdamwState { step: ckpt.opt_step, m: ckpt.opt_m.clone(), v: ckpt.opt_v.clone() },
            rng: SeededRng::from_state(ckpt.rng),
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_score: ckpt.best_score,
            best_epoch: ckpt.best_epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.state(),
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            names: self.store.iter().map(|(_, p)| p.name.clone()).collect(),
            values: self.store.iter().map(|(_, p)| p.value.clone()).collect(),
            opt_step: self.opt.step,
            opt_m: self.opt.m.clone(),
            opt_v: self.opt.v.clone(),
        }
    }

    pub fn param_values(&self) -> Vec<Matrix> {
        self.store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    /// One AdamW step on the mean loss of `batch`. `batch_index` only labels
    /// divergence errors.
    pub fn train_step(&mut self, batch: &TrainBatch, batch_index: usize) -> Result<StepStats> {
        let loss_cfg = self.cfg.loss();
        let rate = self.cfg.optim.dropout;
        let salt = self.cfg.seed ^ DROPOUT_SALT;
        let step = self.step;
        let (model, store) = (&self.model, &self.store);
        let item = |i: usize| -> Result<(f64, f64, f64, Vec<Matrix>)> {
            let mut rng = SeededRng::derive(salt, (step << 16) | i as u64);
            let mut dropout = Dropout { rate, rng: Some(&mut rng) };
            let mut g = Graph::new(store);
            let (l, _) =
                model.instance_graph(&mut g, &batch.elements[i], &batch.pad_mask[i], &batch.targets[i], &loss_cfg, &mut dropout)?;
            let total = decoder::instance_loss(&mut g, &l, &loss_cfg)?;
            let grads = g.backward(total)?;
            Ok((g.scalar(total), g.scalar(l.nll), g.scalar(l.l_s), grads))
        };
        let results = map_items(batch.len(), item);

        let diverged = || Error::Diverged { epoch: self.epoch + 1, batch: batch_index };
        let mut sum = store.zeros_like();
        let mut stats = StepStats::default();
        for r in results {
            let (loss, nll, l_s, grads) = r?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            stats.loss += loss;
            stats.nll += nll;
            stats.l_s += l_s;
            for (s, g) in sum.iter_mut().zip(&grads) {
                s.axpy(1.0, g);
            }
        }
        let b = batch.len() as f64;
        stats.loss /= b;
        stats.nll /= b;
        stats.l_s /= b;

        self.store.zero_grads();
        self.store.accumulate(&sum, 1.0 / b);
        stats.grad_norm = self.store.clip_grad_norm(self.cfg.optim.clip_norm);
        if !stats.grad_norm.is_finite() {
            return Err(diverged());
        }
        adamw_step(&mut self.store, &mut self.opt, &self.cfg.adamw())?;
        self.step += 1;
        Ok(stats)
    }

    /// One pass over `train` in bucketed, shuffled batches. Returns the mean
    /// batch statistics.
    pub fn run_epoch(&mut self, train: &[Instance]) -> Result<StepStats> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let order = self.rng.permutation(train.len());
        let batches = bucketed_batches(train, &order, self.cfg.optim.batch_size, &mut self.rng);
        let mut mean = StepStats::default();
        for (bi, idx) in batches.iter().enumerate() {
            let items: Vec<&Instance> = idx.iter().map(|&i| &train[i]).collect();
            let s = self.train_step(&TrainBatch::new(&items)?, bi)?;
            mean.loss += s.loss;
            mean.nll += s.nll;
            mean.l_s += s.l_s;
            mean.grad_norm += s.grad_norm;
        }
        let k = batches.len() as f64;
        mean.loss /= k;
        mean.nll /= k;
        mean.l_s /= k;
        mean.grad_norm /= k;
        self.epoch += 1;
        Ok(mean)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Also emit rows per set size (`task/n=K`).
    pub by_cardinality: bool,
    /// Restrict to these metric names (all applicable when `None`).
    pub metrics: Option<Vec<String>>,
    /// Task label replacing the instance task tag.
    pub label: Option<String>,
}

const METRICS: [&str; 7] = ["nll", "pmr", "kendall_tau", "validity", "tour_length", "optimal_length", "tour_ratio"];

struct Scored {
    nll: Option<f64>,
    pred: Permutation,
}

/// Greedy-decodes every instance and summarizes per task label. Does not
/// touch the parameters or any RNG.
pub fn evaluate(
    model: &Set2Seq,
    store: &ParameterStore,
    loss: &LossConfig,
    data: &[Instance],
    config_hash: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(list) = &opts.metrics {
        if let Some(bad) = list.iter().find(|m| !METRICS.contains(&m.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown metric `{bad}`; known: {}", METRICS.join(", "))));
        }
    }
    if let Some(inst) = data.iter().find(|i| i.d_raw() != model.cfg.d_input) {
        return Err(Error::Shape(format!(
            "dataset elements have {} features but the model expects d_input = {}",
            inst.d_raw(),
            model.cfg.d_input
        )));
    }
    let scored = map_items(data.len(), |i| -> Result<Scored> {
        let inst = &data[i];
        let mask = vec![true; inst.len()];
        let pred = model.predict(store, &inst.elements, &mask)?;
        let nll = match &inst.target {
            Some(t) => Some(model.score(store, &inst.elements, &mask, t, loss)?.0),
            None => None,
        };
        Ok(Scored { nll, pred })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |label: String, i: usize| match groups.iter_mut().find(|(l, _)| *l == label) {
        Some((_, v)) => v.push(i),
        None => groups.push((label, vec![i])),
    };
    for (i, inst) in data.iter().enumerate() {
        let label = opts.label.clone().unwrap_or_else(|| inst.task.to_string());
        if opts.by_cardinality {
            add(format!("{label}/n={}", inst.len()), i);
        }
        add(label, i);
    }
    groups.sort_by_key(|a| a.0.contains("/n="));

    let wanted = |m: &str| opts.metrics.as_ref().is_none_or(|l| l.iter().any(|x| x == m));
    let mut report = EvalReport::default();
    for (label, idx) in &groups {
        let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for &i in idx {
            let (inst, s) = (&data[i], &scored[i]);
            if let (Some(t), Some(nll)) = (&inst.target, s.nll) {
                let pred = metrics::canonical_prediction(inst, &s.pred)?;
                cols.entry("nll").or_default().push(nll);
                cols.entry("pmr").or_default().push(if &pred == t { 100.0 } else { 0.0 });
                if inst.len() >= 2 {
                    cols.entry("kendall_tau").or_default().push(metrics::kendall_tau(&pred, t)?);
                }
            }
            match inst.task {
                TaskTag::Grammar(_) | TaskTag::Ruleset => {
                    let ok = metrics::task_checker(inst, &s.pred)?;
                    cols.entry("validity").or_default().push(if ok { 100.0 } else { 0.0 });
                }
                TaskTag::Tsp => {
                    let closed = inst.meta_field::<bool>("closed").unwrap_or(true);
                    let len = datagen::tour_length(&inst.elements, &s.pred, closed)?;
                    cols.entry("tour_length").or_default().push(len);
                    if let Ok(opt) = inst.meta_field::<f64>("optimal_length") {
                        cols.entry("optimal_length").or_default().push(opt);
                        if opt > 0.0 {
                            cols.entry("tour_ratio").or_default().push(len / opt);
                        }
                    }
                }
                TaskTag::Embedded => {}
            }
        }
        for m in METRICS {
            if let Some(v) = cols.get(m).filter(|v| !v.is_empty()) {
                if wanted(m) {
                    report.push(label, m, v, config_hash);
                }
            }
        }
    }
    Ok(report)
}

/// Model-selection score, higher is better: validity when available, then
/// negative tour ratio or length, then Kendall's tau, then negative NLL;
/// averaged over task labels (cardinality rows are ignored).
pub fn selection_score(report: &EvalReport) -> f64 {
    let mut labels: Vec<&str> = report.rows.iter().map(|r| r.task.as_str()).filter(|t| !t.contains("/n=")).collect();
    labels.dedup();
    let scores: Vec<f64> = labels
        .iter()
        .filter_map(|t| {
            let get = |m: &str| report.get(t, m).map(|r| r.mean);
            get("validity")
                .or_else(|| get("tour_ratio").map(|v| -v))
                .or_else(|| get("tour_length").map(|v| -v))
                .or_else(|| get("kendall_tau"))
                .or_else(|| get("nll").map(|v| -v))
        })
        .collect();
    if scores.is_empty() {
        f64::NEG_INFINITY
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_ls: f64,
    pub grad_norm: f64,
    /// `task/metric -> mean` on the validation set (empty when not validated).
    pub val: BTreeMap<String, f64>,
    pub score: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `metrics.jsonl`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    /// State after the last completed epoch.
    pub trainer: Trainer,
    /// Parameters of the best validated epoch.
    pub best_values: Vec<Matrix>,
    pub history: Vec<EpochRecord>,
    pub config_hash: String,
}

impl TrainOutcome {
    pub fn best_store(&self) -> Result<ParameterStore> {
        let mut store = self.trainer.store.clone();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, v) in ids.into_iter().zip(&self.best_values) {
            store.set_value(id, v.clone())?;
        }
        Ok(store)
    }
}

fn open_log(out: &Path, append: bool, cfg: &RunConfig, hash: &str) -> Result<BufWriter<File>> {
    let path = out.join("metrics.jsonl");
    if append && path.exists() {
        return Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &json!({ "config_hash": hash, "config": cfg }))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(w)
}

/// Trains on `splits.train`, validating on `splits.val`. With `resume`,
/// continues from the checkpoint (whose model must match `cfg`) up to
/// `cfg.optim.epochs`.
pub fn train(cfg: &RunConfig, splits: &Splits, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d_input = splits
        .train
        .first()
        .map(Instance::d_raw)
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let hash = cfg.hash();
    let resumed = opts.resume.is_some();
    let mut trainer = match &opts.resume {
        Some(ckpt) => {
            let expected = cfg.model_config(d_input);
            if ckpt.model != expected {
                return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(cfg, d_input)?,
    };
    let mut best_values = match opts.out_dir.map(|d| d.join("best.ckpt")).filter(|p| resumed && p.exists()) {
        Some(p) => Checkpoint::load(&p)?.values,
        None => trainer.param_values(),
    };
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match opts.out_dir {
        Some(dir) => Some(open_log(dir, resumed, cfg, &hash)?),
        None => None,
    };

    let mut history = Vec::new();
    let loss_cfg = cfg.loss();
    while trainer.epoch < cfg.optim.epochs {
        let stats = trainer.run_epoch(&splits.train)?;
        let epoch = trainer.epoch;
        let validate = epoch % cfg.eval_every == 0 || epoch == cfg.optim.epochs;
        let mut val = BTreeMap::new();
        let score = if !validate {
            None
        } else if splits.val.is_empty() {
            Some(-stats.loss)
        } else {
            let report = evaluate(&trainer.model, &trainer.store, &loss_cfg, &splits.val, &hash, &EvalOptions::default())?;
            for r in &report.rows {
                val.insert(format!("{}/{}", r.task, r.metric), r.mean);
            }
            Some(selection_score(&report))
        };
        if let Some(s) = score {
            if s > trainer.best_score {
                trainer.best_score = s;
                trainer.best_epoch = epoch;
                best_values = trainer.param_values();
                if let Some(dir) = opts.out_dir {
                    trainer.checkpoint().save(&dir.join("best.ckpt"))?;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            step: trainer.step,
            train_loss: stats.loss,
            train_nll: stats.nll,
            train_ls: stats.l_s,
            grad_norm: stats.grad_norm,
            val,
            score,
            best_epoch: trainer.best_epoch,
        };
        if let (Some(w), Some(dir)) = (log.as_mut(), opts.out_dir) {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
            trainer.checkpoint().save(&dir.join("last.ckpt"))?;
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  loss {:.4}  nll {:.4}  l_s {:.4}  score {}",
                stats.loss,
                stats.nll,
                stats.l_s,
                score.map_or("-".into(), |s| format!("{s:.4}"))
            );
        }
        history.push(record);
        let target = cfg.optim.early_stop_score;
        if target != 0.0 && score.is_some_and(|s| s >= target) {
            break;
        }
    }
    Ok(TrainOutcome { trainer, best_values, history, config_hash: hash })
}

//! Optimization loop, evaluation, checkpoints and the ablation ladder.

mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{Checkpoint, CheckpointHeader, ManifestEntry, TAG as CHECKPOINT_TAG};
pub use config::RunConfig;
pub use optim::{Adam, AdamConfig, Plateau};

use crate::error::{Error, Result};
use crate::metrics::{metrics, MetricsReport};
use crate::model::{forward_with, inverse_frequency_weights, task_loss_terms, total_loss, AblationMode, Dropout, LossBreakdown, Model};
use crate::moa::{load_balance_term, PairKey, RouteStats};
use crate::par::Parallelism;
use crate::params::Ctx;
use crate::synth::{generate, read_corpus, split, Dialogue};
use crate::tensor::{Tape, Var};
use crate::Modality;

/// Model outputs over a split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub routes: RouteStats,
}

pub fn evaluate(model: &Model, dialogues: &[Dialogue], par: Parallelism) -> Result<Evaluation> {
    if dialogues.is_empty() {
        return Err(Error::Training("cannot evaluate an empty split".into()));
    }
    let results = par.map(dialogues, |d| model.infer(d));
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut routes = RouteStats::default();
    for (d, r) in dialogues.iter().zip(results) {
        let r = r?;
        pred.extend(r.predictions);
        truth.extend(&d.labels);
        routes.merge(&r.routes);
    }
    Ok(Evaluation { metrics: metrics(&pred, &truth, model.config.classes)?, routes })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used for this epoch's steps.
    pub lr: f64,
    /// Step-averaged losses; absent for the initial evaluation.
    pub train: Option<LossBreakdown>,
    pub dev_accuracy: f64,
    pub dev_weighted_f1: f64,
    /// Per-router mean routing weights over this epoch's training utterances.
    pub usage: BTreeMap<String, Vec<f64>>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub struct TrainOutcome {
    /// Best-dev snapshot (epoch 0 is the initialization).
    pub best: Checkpoint,
    pub last: Model,
    pub log: Vec<EpochLog>,
    /// Training-time routing usage of the final epoch.
    pub final_routes: RouteStats,
}

pub struct Data {
    pub config: RunConfig,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Loads or generates the corpus, checks it against the model widths, splits it,
/// and resolves class weights.
pub fn prepare(config: &RunConfig) -> Result<Data> {
    config.validate()?;
    let mut config = config.clone();
    let dialogues = match &config.corpus {
        Some(path) => {
            let corpus = read_corpus(path)?;
            let h = &corpus.header;
            let m = &config.model;
            if (h.dims.t, h.dims.a, h.dims.v, h.classes) != (m.dim_t, m.dim_a, m.dim_v, m.classes) {
                return Err(Error::Config(format!(
                    "corpus has dims T={} A={} V={} and {} classes but the config expects T={} A={} V={} and {} classes",
                    h.dims.t, h.dims.a, h.dims.v, h.classes, m.dim_t, m.dim_a, m.dim_v, m.classes
                )));
            }
            corpus.dialogues
        }
        None => generate(&config.synth_spec(), config.parallelism)?,
    };
    let (train, dev, test) = split(&dialogues, config.split, config.seed)?;
    if config.balance_classes {
        config.model.class_weights = Some(inverse_frequency_weights(&train, config.model.classes));
    }
    Ok(Data { config, train, dev, test })
}

/// Runs `prepare` then `train_on`, writing `metrics.jsonl` and `best.ckpt` under `out_dir` when set.
pub fn train(config: &RunConfig, log: &mut dyn Write) -> Result<(Data, TrainOutcome)> {
    let data = prepare(config)?;
    let outcome = match &data.config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut file = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
            let mut tee = Tee(log, &mut file);
            let outcome = train_on(&data.config, &data.train, &data.dev, &mut tee)?;
            file.flush()?;
            outcome.best.save(dir.join("best.ckpt"))?;
            outcome
        }
        None => train_on(&data.config, &data.train, &data.dev, log)?,
    };
    Ok((data, outcome))
}

struct Tee<'a>(&'a mut dyn Write, &'a mut dyn Write);

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

/// Forward, backward and one Adam update over `batch`.
fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&Dialogue], lr: f64, dropout: &mut Dropout, routes: &mut RouteStats) -> Result<LossBreakdown> {
    let config = model.config.clone();
    // the tape holds parameter handles, so it must be gone before the update
    let (grads, loss) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store);
        let mut task_sum: Option<Var> = None;
        let mut weight = 0.0;
        let mut pis: BTreeMap<PairKey, Vec<Var>> = BTreeMap::new();
        for d in batch {
            let out = forward_with(&ctx, &model.params, &model.config, d, Some(dropout))?;
            let (s, w) = task_loss_terms(out.logits, &d.labels, config.class_weights.as_deref())?;
            task_sum = Some(match task_sum {
                Some(acc) => acc.add(s)?,
                None => s,
            });
            weight += w;
            if let Some(moa) = &out.moa {
                for (key, a) in &moa.alignments {
                    pis.entry(*key).or_default().push(a.weights);
                    routes.record(*key, &a.decisions);
                }
            }
        }
        if weight <= 0.0 {
            return Err(Error::Training("batch class weights sum to zero".into()));
        }
        let task = task_sum.ok_or_else(|| Error::Training("empty batch".into()))?.scale(1.0 / weight)?;
        let (total, lb) = if config.ablation.uses_moa() {
            let per_router = pis.values().map(|v| tape.concat(v, 0)).collect::<Result<Vec<_>>>()?;
            let lb = load_balance_term(&per_router)?;
            (task.add(lb.scale(config.lambda)?)?, lb.value().item())
        } else {
            (task, 0.0)
        };
        let loss = total_loss(task.value().item(), lb, config.lambda, config.ablation.uses_moa());
        if !loss.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss (task={}, load_balance={})", loss.task, loss.load_balance)));
        }
        let grads = ctx.gradients(&tape.backward(total)?);
        (grads, loss)
    };
    adam.step(&mut model.store, &grads, lr)?;
    Ok(loss)
}

pub fn train_on(config: &RunConfig, train: &[Dialogue], dev: &[Dialogue], log: &mut dyn Write) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut schedule = Plateau::new(config.lr, config.patience, config.lr_factor, config.min_lr);
    let mut entries = Vec::with_capacity(config.epochs + 1);

    let initial = evaluate(&model, dev, config.parallelism)?;
    let mut best_acc = initial.metrics.accuracy;
    let mut best = Checkpoint::new(model.clone(), config.clone(), 0, Some(initial.metrics.clone()));
    let entry = EpochLog {
        epoch: 0,
        lr: schedule.lr,
        train: None,
        dev_accuracy: initial.metrics.accuracy,
        dev_weighted_f1: initial.metrics.weighted_f1,
        usage: BTreeMap::new(),
    };
    writeln!(log, "{}", entry.to_json_line())?;
    entries.push(entry);

    let mut final_routes = RouteStats::default();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut routes = RouteStats::default();
        let mut dropout = Dropout::new(config.dropout, config.seed, (1 << 32) | epoch as u64)?;
        let (mut task, mut lb, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.dialogues_per_step) {
            let batch: Vec<&Dialogue> = chunk.iter().map(|&i| &train[i]).collect();
            let step = train_step(&mut model, &mut adam, &batch, lr, &mut dropout, &mut routes).map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            task += step.task;
            lb += step.load_balance;
            total += step.total;
            steps += 1;
        }
        let n = steps as f64;
        let eval = evaluate(&model, dev, config.parallelism)?;
        let entry = EpochLog {
            epoch,
            lr,
            train: Some(LossBreakdown { task: task / n, load_balance: lb / n, lambda: config.model.lambda, total: total / n }),
            dev_accuracy: eval.metrics.accuracy,
            dev_weighted_f1: eval.metrics.weighted_f1,
            usage: routes.pairs.iter().map(|(k, acc)| (k.clone(), acc.usage())).collect(),
        };
        writeln!(log, "{}", entry.to_json_line())?;
        entries.push(entry);
        schedule.observe(eval.metrics.accuracy);
        if eval.metrics.accuracy > best_acc {
            best_acc = eval.metrics.accuracy;
            best = Checkpoint::new(model.clone(), config.clone(), epoch, Some(eval.metrics));
        }
        final_routes = routes;
    }
    log.flush()?;
    Ok(TrainOutcome { best, last: model, log: entries, final_routes })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub test: MetricsReport,
    /// `max_e |u_e − 1/E|` over routers in the final epoch (0 without routing).
    pub final_imbalance: f64,
}

/// Trains every `(seed, mode)` on the same corpus per seed; `seed` drives both
/// the data generator and the run.
pub fn ablation_ladder(config: &RunConfig, seeds: &[u64], modes: &[AblationMode], par: Parallelism) -> Result<Vec<LadderRun>> {
    let jobs: Vec<(u64, AblationMode)> = seeds.iter().flat_map(|&s| modes.iter().map(move |&m| (s, m))).collect();
    par.map(&jobs, |&(seed, mode)| {
        let mut c = config.clone();
        c.seed = seed;
        c.data_seed = seed;
        c.model.ablation = mode;
        c.out_dir = None;
        c.parallelism = Parallelism::Sequential;
        let data = prepare(&c)?;
        let outcome = train_on(&data.config, &data.train, &data.dev, &mut std::io::sink())?;
        let test = evaluate(&outcome.best.model, &data.test, Parallelism::Sequential)?;
        let dev_accuracy = outcome.best.header.dev_metrics.as_ref().map_or(0.0, |m| m.accuracy);
        Ok(LadderRun { mode, seed, best_epoch: outcome.best.header.epoch, dev_accuracy, test: test.metrics, final_imbalance: outcome.final_routes.max_imbalance() })
    })
    .into_iter()
    .collect()
}

/// Seed-averaged `(mode, accuracy, w-F1)` in ladder order.
pub fn ladder_means(runs: &[LadderRun]) -> Vec<(AblationMode, f64, f64)> {
    AblationMode::LADDER
        .iter()
        .filter_map(|&mode| {
            let rs: Vec<&LadderRun> = runs.iter().filter(|r| r.mode == mode).collect();
            (!rs.is_empty()).then(|| {
                let n = rs.len() as f64;
                (mode, rs.iter().map(|r| r.test.accuracy).sum::<f64>() / n, rs.iter().map(|r| r.test.weighted_f1).sum::<f64>() / n)
            })
        })
        .collect()
}

pub fn ladder_table(runs: &[LadderRun]) -> String {
    let mut out = format!("{:<10} {:>8} {:>8}\n", "mode", "acc", "w-F1");
    for (mode, acc, f1) in ladder_means(runs) {
        out.push_str(&format!("{:<10} {:>8.2} {:>8.2}\n", mode.name(), 100.0 * acc, 100.0 * f1));
    }
    out
}

/// Per-pair usage from a forward pass over `dialogues`, as JSON.
pub fn route_stats(model: &Model, dialogues: &[Dialogue], par: Parallelism) -> Result<serde_json::Value> {
    if !model.config.ablation.uses_moa() {
        return Err(Error::Model(format!("{} models have no router", model.config.ablation)));
    }
    let eval = evaluate(model, dialogues, par)?;
    Ok(serde_json::json!({
        "experts": model.config.experts,
        "top_k": model.config.top_k,
        "load_balance": eval.routes.load_balance()?,
        "pairs": eval.routes.to_json(),
        "modalities": Modality::ALL,
    }))
}

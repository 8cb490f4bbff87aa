//! Minibatch training with per-step CSV logs and per-epoch checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use stra_core::losses::{cross_entropy, diversity_loss};
use stra_core::network::{build_network, Model};
use stra_core::{Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_parts_dataset, PartsDataset, Split};
use crate::error::{io_at, HarnessError, Result};
use crate::eval::{evaluate, EvalMetrics};
use crate::optim::Optimizer;

pub const LOG_HEADER: &str = "epoch,step,ce,ld,total,train_acc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// One-based.
    pub epoch: usize,
    /// Optimizer steps taken so far, including this one.
    pub step: u64,
    pub ce: f64,
    /// Diversity loss summed over mode-attention blocks.
    pub ld: f64,
    pub total: f64,
    /// Accuracy on this minibatch.
    pub train_acc: f64,
}

impl LogRow {
    /// CSV line; floats use the shortest text that parses back exactly.
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.ce, self.ld, self.total, self.train_acc)
    }
}

/// Loss terms and gradients of one minibatch, without updating anything.
pub struct BatchGradients {
    pub ce: f64,
    pub ld: f64,
    pub total: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Cross-entropy plus `lambda_d` times the diversity loss of every mode block.
/// Returns the cache so batch statistics can be committed.
pub fn batch_gradients(model: &Model, x: &Tensor, labels: &[usize], lambda_d: f64) -> Result<(BatchGradients, stra_core::network::ModelCache)> {
    let cache = model.forward(x, true)?;
    let (ce, g_logits) = cross_entropy(&cache.logits, labels)?;
    let mut ld = 0.0;
    let mut grad_masks = Vec::new();
    for st in cache.mode_states() {
        let (l, g) = diversity_loss(&st.masks)?;
        ld += l;
        grad_masks.push((lambda_d > 0.0).then(|| g.scale(lambda_d)));
    }
    let total = ce + lambda_d * ld;
    if !total.is_finite() {
        return Err(HarnessError::Numerical(format!("non-finite loss (ce {ce}, ld {ld})")));
    }
    let (grads, _) = model.backward(&cache, &g_logits, &grad_masks)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = model.params().get(i).map_or_else(String::new, |(n, _)| n.clone());
        return Err(HarnessError::Numerical(format!("non-finite gradient for {name}")));
    }
    let correct = argmax_rows(&cache.logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((
        BatchGradients {
            ce,
            ld,
            total,
            correct,
            grads,
        },
        cache,
    ))
}

/// Norm of the gradient of the diversity loss alone with respect to all
/// parameters, or `None` for a model without mode attention.
pub fn diversity_gradient_norm(model: &Model, x: &Tensor) -> Result<Option<f64>> {
    if model.mode_block_count() == 0 {
        return Ok(None);
    }
    let cache = model.forward(x, true)?;
    let grad_masks = cache
        .mode_states()
        .iter()
        .map(|st| Ok(Some(diversity_loss(&st.masks)?.1)))
        .collect::<stra_core::Result<Vec<_>>>()?;
    let zero = Tensor::zeros(cache.logits.shape().to_vec());
    let (grads, _) = model.backward(&cache, &zero, &grad_masks)?;
    Ok(Some(grads.iter().map(|g| g.dot(g)).sum::<stra_core::Result<f64>>()?.sqrt()))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Drives minibatch order.
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub train: PartsDataset,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let model = build_network(&config.arch, &mut rng.fork())?;
        let shapes: Vec<&[usize]> = model.params().into_iter().map(|(_, t)| t.shape()).collect();
        let optimizer = Optimizer::new(config.optimizer, &shapes);
        let train = generate_parts_dataset(&config.data, Split::Train)?;
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            train,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let r = ck.restore()?;
        let train = generate_parts_dataset(&r.config.data, Split::Train)?;
        Ok(Self {
            config: r.config,
            model: r.model,
            optimizer: r.optimizer,
            rng: r.rng,
            epoch: r.epoch,
            train,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, &self.optimizer, &self.rng, self.epoch)
    }

    /// One pass over the training set in a freshly shuffled order.
    pub fn run_epoch(&mut self) -> Result<Vec<LogRow>> {
        let lr = self.config.schedule.lr(self.config.optimizer.lr, self.epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut rows = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = self.train.batch(chunk);
            let (b, cache) = batch_gradients(&self.model, &x, &labels, self.config.lambda_d)?;
            self.optimizer.step(self.model.params_mut(), &b.grads, lr)?;
            self.model.commit_stats(&cache);
            rows.push(LogRow {
                epoch: self.epoch + 1,
                step: self.optimizer.steps,
                ce: b.ce,
                ld: b.ld,
                total: b.total,
                train_acc: b.correct as f64 / chunk.len() as f64,
            });
        }
        self.epoch += 1;
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    /// Mean minibatch accuracy over the last epoch.
    pub train_accuracy: f64,
    pub test: EvalMetrics,
}

pub fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch-{epoch:03}.stra"))
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let fresh = !append || !path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOG_HEADER}").map_err(io_at(path))?;
    }
    Ok(w)
}

/// Train `trainer` up to its configured epoch count, writing `log.csv`,
/// `epoch-NNN.stra` and `last.stra` into `out`. A non-finite loss stops the
/// run after saving `diverged.stra`.
pub fn run(mut trainer: Trainer, out: &Path, append_log: bool) -> Result<TrainSummary> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let log_path = out.join("log.csv");
    let mut log = open_log(&log_path, append_log)?;
    let last = out.join("last.stra");
    let mut train_accuracy = f64::NAN;
    while trainer.epoch < trainer.config.epochs {
        let rows = match trainer.run_epoch() {
            Ok(rows) => rows,
            Err(e) if e.exit_code() == 2 => {
                let path = out.join("diverged.stra");
                trainer.checkpoint().save(&path)?;
                log::error!("{e}; diagnostic checkpoint written to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        for r in &rows {
            writeln!(log, "{}", r.to_csv()).map_err(io_at(&log_path))?;
        }
        log.flush().map_err(io_at(&log_path))?;
        let n = rows.len() as f64;
        train_accuracy = rows.iter().map(|r| r.train_acc).sum::<f64>() / n;
        info!(
            "epoch {}: ce {:.4} ld {:.4} acc {:.3}",
            trainer.epoch,
            rows.iter().map(|r| r.ce).sum::<f64>() / n,
            rows.iter().map(|r| r.ld).sum::<f64>() / n,
            train_accuracy
        );
        let ck = trainer.checkpoint();
        ck.save(&epoch_checkpoint_path(out, trainer.epoch))?;
        ck.save(&last)?;
    }
    let test = generate_parts_dataset(&trainer.config.data, Split::Test)?;
    let metrics = evaluate(&trainer.model, &test, trainer.config.batch_size)?;
    info!("test accuracy {:.4}", metrics.accuracy);
    Ok(TrainSummary {
        epochs: trainer.epoch,
        log: log_path,
        checkpoint: last,
        train_accuracy,
        test: metrics,
    })
}

/// Fresh run from `config`, or a continuation of `resume`.
pub fn train(config: RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    match resume {
        Some(path) => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            info!("resuming {} at epoch {}", path.display(), trainer.epoch);
            run(trainer, out, true)
        }
        None => run(Trainer::new(config)?, out, false),
    }
}

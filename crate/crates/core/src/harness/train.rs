//! Teacher-forced training with Adam, warmup and step decay, gradient-norm
//! clipping and best-validation checkpointing.
//!
//! Per-instance gradients are computed on independent tapes and summed in
//! batch order, so results do not depend on the worker count.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::edge_tensors_allocated;
use crate::m4c::Model;
use crate::objectives::example_loss_on_tape;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tape;

use super::eval::{evaluate, write_logs, InstanceLog, ModelDecoder};
use super::{parallel_map, Dataset, Example, ExperimentConfig, HarnessError};

const BATCH_STREAM: u64 = 0x6261_7463_6865_7321;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Updates completed when the evaluation ran.
    pub step: usize,
    pub val_accuracy: f64,
    /// Mean batch loss over the updates since the previous evaluation.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: String,
    pub source_revision: String,
    pub n_params: usize,
    pub evals: Vec<EvalPoint>,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_step: usize,
    pub final_train_loss: f64,
    /// Edge tensors built during training and evaluation.
    pub edge_tensors_allocated: u64,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// The report with wall time, revision and the echoed config text
    /// cleared; two runs with the same config hash produce equal views.
    pub fn reproducible_view(&self) -> RunReport {
        RunReport {
            config: String::new(),
            source_revision: String::new(),
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// Weights after the last update.
    pub model: Model,
    /// Weights with the best validation accuracy.
    pub best: ParamStore,
    /// Decode logs of the best evaluation.
    pub best_logs: Vec<InstanceLog>,
}

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: store.zeros_like().0,
            v: store.zeros_like().0,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in store.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

struct InstancePass {
    loss: f64,
    grads: Gradients,
    edges: u64,
}

fn instance_pass(model: &Model, ex: &Example, scale: f64) -> Result<InstancePass, HarnessError> {
    let before = edge_tensors_allocated();
    let edges = model.edge_tensor(&ex.input, ex.targets.n_steps())?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape)?;
    let logits = model.forward(&mut tape, &bound, &ex.input, edges.as_ref(), &ex.targets.teacher)?;
    let loss = example_loss_on_tape(&mut tape, logits, &ex.targets)?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;
    let mut grads = model.store.zeros_like();
    grads.accumulate(&tape, &bound, scale);
    Ok(InstancePass {
        loss: value,
        grads,
        edges: edge_tensors_allocated() - before,
    })
}

/// Mean teacher-forced loss and its gradient over `batch`, plus the
/// per-instance losses and the number of edge tensors built.
pub fn batch_gradients(model: &Model, batch: &[&Example], workers: usize) -> Result<(f64, Gradients, Vec<f64>, u64), HarnessError> {
    let scale = 1.0 / batch.len() as f64;
    let passes = parallel_map(batch, workers, |ex| instance_pass(model, ex, scale));
    let mut total = model.store.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    let mut edges = 0;
    for p in passes {
        let p = p?;
        total.add_assign(&p.grads);
        losses.push(p.loss);
        edges += p.edges;
    }
    let mean = losses.iter().sum::<f64>() * scale;
    Ok((mean, total, losses, edges))
}

pub fn source_revision() -> String {
    let rev = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    format!("{}@{}", env!("CARGO_PKG_VERSION"), rev.unwrap_or_else(|| "unknown".into()))
}

/// Model, optimizer and batch stream for one run.
pub struct Trainer<'d> {
    pub cfg: ExperimentConfig,
    pub data: &'d Dataset,
    pub model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub updates: usize,
    pub edges_allocated: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &ExperimentConfig, data: &'d Dataset) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(HarnessError::Config("train and val splits must be non-empty".into()));
        }
        let model = Model::new(cfg.model_config(data.question_vocab.len(), data.answer_vocab.len()), cfg.seed)?;
        let adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM),
            order: Vec::new(),
            cursor: 0,
            updates: 0,
            edges_allocated: 0,
        })
    }

    /// Indices of the next batch; the training set is reshuffled each epoch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.data.train.len();
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimizer update on `batch`; returns the pre-update mean loss.
    pub fn update(&mut self, batch: &[&Example]) -> Result<f64, HarnessError> {
        let (loss, mut grads, losses, edges) = batch_gradients(&self.model, batch, self.cfg.workers)?;
        self.edges_allocated += edges;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(self.non_finite(batch, &losses));
        }
        let norm = grads.norm();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            grads.scale(self.cfg.grad_clip / norm);
        }
        let lr = self.cfg.learning_rate(self.updates);
        self.adam.step(&mut self.model.store, &grads, lr);
        self.updates += 1;
        if !self.model.store.all_finite() {
            return Err(self.non_finite(batch, &losses));
        }
        Ok(loss)
    }

    fn non_finite(&self, batch: &[&Example], losses: &[f64]) -> HarnessError {
        let dump = serde_json::json!({
            "update": self.updates,
            "config_hash": self.cfg.hash(),
            "instances": batch.iter().zip(losses).map(|(ex, l)| serde_json::json!({
                "id": ex.id,
                "question": ex.question,
                "loss": if l.is_finite() { serde_json::json!(l) } else { serde_json::json!(l.to_string()) },
            })).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
        let dump = match &self.cfg.output_dir {
            Some(dir) if std::fs::create_dir_all(dir).is_ok() && std::fs::write(dir.join("nan_dump.json"), &text).is_ok() => {
                dir.join("nan_dump.json").display().to_string()
            }
            _ => text,
        };
        HarnessError::NonFinite { step: self.updates, dump }
    }
}

/// Trains from `cfg` on `data`. When `cfg.output_dir` is set, the config,
/// report, best checkpoint and best decode logs are written there.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome, HarnessError> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg, data)?;
    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut best_store = t.model.store.clone();
    let mut best_logs = Vec::new();
    let mut window = Vec::new();
    while t.updates < cfg.max_updates {
        let batch: Vec<&Example> = t.next_batch().into_iter().map(|i| &data.train[i]).collect();
        window.push(t.update(&batch)?);
        if t.updates % cfg.eval_every == 0 || t.updates == cfg.max_updates {
            let result = evaluate(
                &ModelDecoder {
                    model: &t.model,
                    vocab: &data.answer_vocab,
                },
                &data.val,
                cfg.workers,
            )?;
            t.edges_allocated += result.edge_tensors;
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log::info!("update {} loss {train_loss:.5} val {:.4}", t.updates, result.accuracy);
            evals.push(EvalPoint {
                step: t.updates,
                val_accuracy: result.accuracy,
                train_loss,
            });
            if result.accuracy > best.0 {
                best = (result.accuracy, t.updates);
                best_store = t.model.store.clone();
                best_logs = result.logs;
            }
        }
    }
    let last = evals.last().expect("final update is always evaluated");
    let report = RunReport {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        source_revision: source_revision(),
        n_params: t.model.store.num_values(),
        final_val_accuracy: last.val_accuracy,
        final_train_loss: last.train_loss,
        best_val_accuracy: best.0,
        best_step: best.1,
        evals,
        edge_tensors_allocated: t.edges_allocated,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &cfg.output_dir {
        write_run(dir, &report, &best_store, &best_logs, data)?;
    }
    Ok(TrainOutcome {
        report,
        model: t.model,
        best: best_store,
        best_logs,
    })
}

fn write_run(dir: &Path, report: &RunReport, best: &ParamStore, logs: &[InstanceLog], data: &Dataset) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), &report.config)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    best.save(&dir.join("best.ckpt"))?;
    data.answer_vocab.save(&dir.join("answer_vocab.txt"))?;
    write_logs(&dir.join("val_decodes.jsonl"), logs)?;
    Ok(())
}

//! Greedy-decode evaluation with per-instance logs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edge::edge_tensors_allocated;
use crate::m4c::{Model, Vocab};
use crate::objectives::{vqa_accuracy, AnswerSet};

use super::{parallel_map, Dataset, Example, ExperimentConfig, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    /// `vocab(v)` or `ocr(p)` per emitted token.
    pub sources: Vec<String>,
}

pub trait Decoder: Sync {
    fn decode(&self, example: &Example) -> Result<Prediction, HarnessError>;
}

pub struct ModelDecoder<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
}

impl Decoder for ModelDecoder<'_> {
    fn decode(&self, example: &Example) -> Result<Prediction, HarnessError> {
        let r = self.model.decode(&example.input, self.vocab)?;
        Ok(Prediction {
            answer: r.answer(),
            sources: r.sources.iter().map(ToString::to_string).collect(),
        })
    }
}

/// Emits the ground-truth tokens.
pub struct OracleDecoder;

impl Decoder for OracleDecoder {
    fn decode(&self, example: &Example) -> Result<Prediction, HarnessError> {
        Ok(Prediction {
            answer: example.gt_tokens.join(" "),
            sources: vec!["oracle".into(); example.gt_tokens.len()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLog {
    pub id: String,
    pub question: String,
    pub prediction: String,
    pub sources: Vec<String>,
    pub ground_truth: String,
    pub answers: Vec<String>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub logs: Vec<InstanceLog>,
    /// Edge tensors built while decoding.
    pub edge_tensors: u64,
}

/// Mean VQA accuracy recomputed from logged predictions and answers.
pub fn accuracy_from_logs(logs: &[InstanceLog]) -> Result<f64, HarnessError> {
    if logs.is_empty() {
        return Err(HarnessError::Config("no logged instances".into()));
    }
    let mut total = 0.0;
    for l in logs {
        total += vqa_accuracy(&l.prediction, &AnswerSet::new(l.answers.clone())?);
    }
    Ok(total / logs.len() as f64)
}

pub fn evaluate(decoder: &dyn Decoder, examples: &[Example], workers: usize) -> Result<EvalResult, HarnessError> {
    if examples.is_empty() {
        return Err(HarnessError::Config("empty evaluation split".into()));
    }
    let preds = parallel_map(examples, workers, |ex| {
        let before = edge_tensors_allocated();
        decoder.decode(ex).map(|p| (p, edge_tensors_allocated() - before))
    });
    let mut logs = Vec::with_capacity(examples.len());
    let mut total = 0.0;
    let mut edge_tensors = 0;
    for (ex, pred) in examples.iter().zip(preds) {
        let (pred, edges) = pred?;
        edge_tensors += edges;
        let accuracy = vqa_accuracy(&pred.answer, &ex.answers);
        total += accuracy;
        logs.push(InstanceLog {
            id: ex.id.clone(),
            question: ex.question.clone(),
            prediction: pred.answer,
            sources: pred.sources,
            ground_truth: ex.gt_tokens.join(" "),
            answers: ex.answers.answers().to_vec(),
            accuracy,
        });
    }
    Ok(EvalResult {
        accuracy: total / examples.len() as f64,
        logs,
        edge_tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

impl SplitName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            _ => None,
        }
    }
}

/// Loads `checkpoint` into a model built from `cfg` and evaluates a split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, data: &Dataset, split: SplitName) -> Result<EvalResult, HarnessError> {
    let model = Model::from_checkpoint(cfg.model_config(data.question_vocab.len(), data.answer_vocab.len()), checkpoint)?;
    let examples = match split {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
    };
    evaluate(
        &ModelDecoder {
            model: &model,
            vocab: &data.answer_vocab,
        },
        examples,
        cfg.workers,
    )
}

/// One JSON object per line.
pub fn write_logs(path: &Path, logs: &[InstanceLog]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in logs {
        serde_json::to_writer(&mut f, l)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_logs(path: &Path) -> Result<Vec<InstanceLog>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

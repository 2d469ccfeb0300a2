//! Scenes converted into model inputs, loss targets and answer sets.

use crate::m4c::{AnswerSpace, ModelInput, Vocab};
use crate::objectives::{build_targets, AnswerSet, TokenTargets};
use crate::synth::{answer_vocab, generate_split, question_vocab, read_scenes, SceneInstance};

use super::{ExperimentConfig, HarnessError};

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub input: ModelInput,
    pub targets: TokenTargets,
    pub answers: AnswerSet,
    pub gt_tokens: Vec<String>,
}

impl Example {
    pub fn from_scene(scene: &SceneInstance, question_vocab: &Vocab, answer_vocab: &Vocab) -> Result<Self, HarnessError> {
        let input = scene.to_model_input(question_vocab)?;
        let texts = scene.ocr_texts();
        let targets = build_targets(&scene.gt_tokens, AnswerSpace::new(answer_vocab, &texts))?;
        Ok(Self {
            id: scene.id.clone(),
            question: scene.question.join(" "),
            input,
            targets,
            answers: AnswerSet::new(scene.answers.clone())?,
            gt_tokens: scene.gt_tokens.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub question_vocab: Vocab,
    pub answer_vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl Dataset {
    pub fn from_scenes(train: &[SceneInstance], val: &[SceneInstance]) -> Result<Self, HarnessError> {
        let (qv, av) = (question_vocab(), answer_vocab());
        let convert = |s: &[SceneInstance]| s.iter().map(|x| Example::from_scene(x, &qv, &av)).collect::<Result<Vec<_>, _>>();
        let (train, val) = (convert(train)?, convert(val)?);
        Ok(Self {
            question_vocab: qv,
            answer_vocab: av,
            train,
            val,
        })
    }

    /// Reads the configured scene files, or generates the split from
    /// `data_seed` when none are given.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        match (&cfg.train_data, &cfg.val_data) {
            (Some(t), Some(v)) => Self::from_scenes(&read_scenes(t)?, &read_scenes(v)?),
            _ => {
                let split = generate_split(cfg.data_seed, (cfg.train_size, cfg.val_size), &cfg.gen)?;
                Self::from_scenes(&split.train, &split.val)
            }
        }
    }
}

//! Multi-token sigmoid loss, target construction and the VQA accuracy metric.

use crate::m4c::{AnswerSpace, TokenSource, EOS};
use crate::tensor::{NodeId, Tape, TensorError};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before the log.
pub const PROB_CLIP: f64 = 1e-7;
pub const ANSWERS_PER_QUESTION: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("answer token {token:?} is neither in the vocabulary nor among the OCR tokens")]
    Unrepresentable { token: String },
    #[error("answer set needs {ANSWERS_PER_QUESTION} entries, got {0}")]
    AnswerCount(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Binary targets for one example: `steps[j][c]` is 1 when candidate `c` is
/// a correct choice at decode step `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTargets {
    pub steps: Vec<Vec<f64>>,
    /// Token fed to the decoder after each non-final step.
    pub teacher: Vec<TokenSource>,
}

impl TokenTargets {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.steps.concat()
    }
}

/// One step per answer token plus a final end-of-answer step. A token is
/// positive at its vocabulary index and at every OCR position with the same
/// text; the teacher-forced input is the vocabulary entry when one exists,
/// else the first matching OCR position.
pub fn build_targets(gt_tokens: &[String], space: AnswerSpace<'_>) -> Result<TokenTargets, ObjectiveError> {
    let width = space.len();
    let mut steps = Vec::with_capacity(gt_tokens.len() + 1);
    let mut teacher = Vec::with_capacity(gt_tokens.len());
    for token in gt_tokens {
        let mut row = vec![0.0; width];
        let mut first = None;
        if let Some(v) = space.vocab.get(token).filter(|&v| v != EOS) {
            row[v] = 1.0;
            first = Some(TokenSource::Vocab(v));
        }
        for (p, text) in space.ocr.iter().enumerate() {
            if text == token {
                row[space.vocab.len() + p] = 1.0;
                first.get_or_insert(TokenSource::OcrCopy(p));
            }
        }
        let source = first.ok_or_else(|| ObjectiveError::Unrepresentable { token: token.clone() })?;
        steps.push(row);
        teacher.push(source);
    }
    let mut eos = vec![0.0; width];
    eos[EOS] = 1.0;
    steps.push(eos);
    Ok(TokenTargets { steps, teacher })
}

fn clipped_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Loss of one example: BCE averaged over candidates within a step, then
/// over steps.
pub fn example_loss(predictions: &[Vec<f64>], targets: &TokenTargets) -> Result<f64, ObjectiveError> {
    if predictions.len() != targets.steps.len() || targets.steps.is_empty() {
        return Err(ObjectiveError::Shape(format!("{} prediction steps for {} target steps", predictions.len(), targets.steps.len())));
    }
    let mut total = 0.0;
    for (j, (p, y)) in predictions.iter().zip(&targets.steps).enumerate() {
        if p.len() != y.len() || p.is_empty() {
            return Err(ObjectiveError::Shape(format!("step {j}: {} predictions for {} targets", p.len(), y.len())));
        }
        total += p.iter().zip(y).map(|(&p, &y)| clipped_bce(p, y)).sum::<f64>() / p.len() as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Mean of [`example_loss`] over examples; `predictions[i][j]` holds the
/// sigmoid activations of example `i`, step `j`.
pub fn bce_multi_token(predictions: &[Vec<Vec<f64>>], targets: &[TokenTargets]) -> Result<f64, ObjectiveError> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(ObjectiveError::Shape(format!("{} predicted examples for {} targets", predictions.len(), targets.len())));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        total += example_loss(p, t)?;
    }
    Ok(total / targets.len() as f64)
}

/// [`example_loss`] on the tape for logits shaped `[steps, candidates]`.
pub fn example_loss_on_tape(tape: &mut Tape<'_>, logits: NodeId, targets: &TokenTargets) -> Result<NodeId, ObjectiveError> {
    let shape = tape.shape(logits).to_vec();
    if shape != [targets.n_steps(), targets.n_candidates()] {
        return Err(ObjectiveError::Shape(format!("logits {shape:?} for targets [{}, {}]", targets.n_steps(), targets.n_candidates())));
    }
    let probs = tape.sigmoid(logits)?;
    Ok(tape.bce(probs, &targets.flat(), PROB_CLIP)?)
}

/// Lowercases, collapses internal whitespace and strips leading and
/// trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
}

/// Ten human answers to one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSet([String; ANSWERS_PER_QUESTION]);

impl AnswerSet {
    pub fn new(answers: Vec<String>) -> Result<Self, ObjectiveError> {
        let n = answers.len();
        answers.try_into().map(Self).map_err(|_| ObjectiveError::AnswerCount(n))
    }

    /// Cycles `answers` up to ten entries; the flag is `true` when padding
    /// happened.
    pub fn padded(answers: &[String]) -> Result<(Self, bool), ObjectiveError> {
        if answers.is_empty() || answers.len() > ANSWERS_PER_QUESTION {
            return Err(ObjectiveError::AnswerCount(answers.len()));
        }
        let filled = answers.iter().cycle().take(ANSWERS_PER_QUESTION).cloned().collect();
        Ok((Self::new(filled)?, answers.len() < ANSWERS_PER_QUESTION))
    }

    pub fn answers(&self) -> &[String] {
        &self.0
    }
}

/// `min(matches / 3, 1)` averaged over the ten leave-one-out subsets.
pub fn vqa_accuracy(answer: &str, humans: &AnswerSet) -> f64 {
    let a = normalize_answer(answer);
    let total = humans.answers().iter().filter(|h| normalize_answer(h) == a).count();
    // Matching left-outs are summed first so the result is independent of
    // answer order down to the last bit.
    let mut sum = 0.0;
    for left_out in 0..ANSWERS_PER_QUESTION {
        let kept = total - usize::from(left_out < total);
        sum += (kept as f64 / 3.0).min(1.0);
    }
    sum / ANSWERS_PER_QUESTION as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m4c::Vocab;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn humans(answer: &str, matches: usize) -> AnswerSet {
        let mut v = vec![answer.to_string(); matches];
        v.extend((matches..10).map(|i| format!("other{i}")));
        AnswerSet::new(v).unwrap()
    }

    /// Enumerates every 9-answer subset by index.
    fn enumerate_accuracy(matches: usize) -> f64 {
        let flags: Vec<bool> = (0..10).map(|i| i < matches).collect();
        let mut sum = 0.0;
        for left_out in 0..10 {
            let count = (0..10).filter(|&k| k != left_out && flags[k]).count();
            sum += f64::min(count as f64 / 3.0, 1.0);
        }
        sum / 10.0
    }

    #[test]
    fn accuracy_table_matches_enumeration() {
        for m in 0..=10 {
            assert_eq!(vqa_accuracy("ans", &humans("ans", m)), enumerate_accuracy(m), "count {m}");
        }
        assert_eq!(vqa_accuracy("x", &humans("ans", 0)), 0.0);
        assert!((vqa_accuracy("ans", &humans("ans", 2)) - 0.6).abs() < 1e-15);
        assert_eq!(vqa_accuracy("ans", &humans("ans", 4)), 1.0);
        let table: Vec<f64> = (0..=10).map(|m| vqa_accuracy("ans", &humans("ans", m))).collect();
        assert!(table.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  Hello   World!! "), "hello world");
        assert_eq!(normalize_answer("\"13.\""), "13");
        assert_eq!(normalize_answer("a.b"), "a.b");
        assert_eq!(vqa_accuracy(" COKE ", &humans("coke.", 4)), 1.0);
    }

    #[test]
    fn answer_set_size_is_enforced() {
        assert_eq!(AnswerSet::new(strings(&["a"; 9])), Err(ObjectiveError::AnswerCount(9)));
        let (set, flagged) = AnswerSet::padded(&strings(&["a", "b"])).unwrap();
        assert!(flagged);
        assert_eq!(set.answers()[9], "b");
        assert!(!AnswerSet::padded(&strings(&["a"; 10])).unwrap().1);
    }

    #[test]
    fn loss_examples() {
        let t = TokenTargets {
            steps: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]],
            teacher: vec![TokenSource::Vocab(0)],
        };
        assert!(example_loss(&t.steps, &t).unwrap() <= 1e-6);
        let half = vec![vec![0.5; 3]; 2];
        assert!((example_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let p1 = vec![vec![0.9, 0.2, 0.1], vec![0.3, 0.6, 0.7]];
        let p2 = vec![vec![0.4, 0.5, 0.2], vec![0.2, 0.9, 0.1]];
        let a = example_loss(&p1, &t).unwrap();
        let b = example_loss(&p2, &t).unwrap();
        let both = bce_multi_token(&[p1, p2], &[t.clone(), t.clone()]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
        assert!(matches!(example_loss(&[vec![0.5; 2]], &t), Err(ObjectiveError::Shape(_))));
    }

    #[test]
    fn targets_examples() {
        let vocab = Vocab::from_words(["yes", "13"]).unwrap();
        let ocr = strings(&["a", "b", "c", "d", "13", "e", "f", "13"]);
        let space = AnswerSpace::new(&vocab, &ocr);
        let t = build_targets(&strings(&["yes"]), space).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].iter().sum::<f64>(), 1.0);
        assert_eq!(t.steps[0][1], 1.0);
        assert_eq!(t.steps[1][EOS], 1.0);

        let t = build_targets(&strings(&["13"]), space).unwrap();
        let pos: Vec<usize> = (0..space.len()).filter(|&c| t.steps[0][c] == 1.0).collect();
        assert_eq!(pos, vec![2, 3 + 4, 3 + 7]);
        assert_eq!(t.teacher, vec![TokenSource::Vocab(2)]);

        let t = build_targets(&strings(&["c"]), space).unwrap();
        assert_eq!(t.teacher, vec![TokenSource::OcrCopy(2)]);

        let t = build_targets(&[], space).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0][EOS], 1.0);
        assert!(t.teacher.is_empty());

        assert_eq!(
            build_targets(&strings(&["zzz"]), space),
            Err(ObjectiveError::Unrepresentable { token: "zzz".into() })
        );
    }

    #[test]
    fn tape_loss_matches_standalone_and_finite_differences() {
        let t = TokenTargets {
            steps: vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
            teacher: vec![TokenSource::OcrCopy(0)],
        };
        let logits = vec![vec![0.3, -1.2, 2.0, 0.1, -0.4, 0.8, 1.5, -2.2]];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let standalone = |l: &[Vec<f64>]| {
            let p: Vec<Vec<f64>> = l[0].chunks(4).map(|c| c.iter().map(|&x| sig(x)).collect()).collect();
            example_loss(&p, &t).unwrap()
        };
        let on_tape = |l: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&[2, 4], l[0].clone()).unwrap();
            let loss = example_loss_on_tape(&mut tape, x, &t).unwrap();
            let v = tape.value(loss)[0];
            tape.backward(loss).unwrap();
            (v, tape.grad(x).unwrap().to_vec())
        };
        assert!((on_tape(&logits).0 - standalone(&logits)).abs() < 1e-14);
        let report = check_gradients(&logits, standalone, |l| vec![on_tape(l).1], 1e-5);
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_shrinks_toward_targets(
            probs in proptest::collection::vec(0.01f64..0.99, 6),
            bits in proptest::collection::vec(any::<bool>(), 6),
            k in 0usize..6,
        ) {
            let y: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let t = TokenTargets { steps: vec![y[..3].to_vec(), y[3..].to_vec()], teacher: vec![] };
            let p = vec![probs[..3].to_vec(), probs[3..].to_vec()];
            let base = example_loss(&p, &t).unwrap();
            prop_assert!(base >= 0.0);
            let mut moved = probs.clone();
            moved[k] += 0.5 * (y[k] - moved[k]);
            let q = vec![moved[..3].to_vec(), moved[3..].to_vec()];
            prop_assert!(example_loss(&q, &t).unwrap() < base);
        }

        #[test]
        fn accuracy_depends_only_on_normalized_multiset(
            matches in 0usize..=10,
            seed in any::<u64>(),
            upper in any::<bool>(),
        ) {
            let base = humans("Red Car", matches);
            let mut shuffled: Vec<String> = base.answers().to_vec();
            let len = shuffled.len();
            shuffled.rotate_left((seed % len as u64) as usize);
            if upper {
                shuffled.iter_mut().for_each(|s| *s = format!("  {}! ", s.to_uppercase()));
            }
            let other = AnswerSet::new(shuffled).unwrap();
            prop_assert_eq!(vqa_accuracy("red car", &base), vqa_accuracy("RED  car.", &other));
            prop_assert_eq!(vqa_accuracy("red car", &base), enumerate_accuracy(matches));
        }
    }
}

//! Synthetic scenes whose questions are answerable only through pairwise
//! spatial or appearance relations between objects and OCR tokens.
//!
//! Every scene is a pure function of its seed and [`GenParams`]. Ground
//! truth comes from a per-template answer rule that reads only the scene
//! geometry; [`answer_oracle`] re-derives it independently of generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edge::{spatial_interaction, BoundingBox, SpatialInteraction};
use crate::m4c::{FeatureDims, ModelInput, ObjectFeatures, OcrFeatures, Vocab};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
/// Answer words that also live in the fixed answer vocabulary.
pub const VOCAB_ANSWERS: [&str; 13] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "stop", "open", "sale"];
const WORDS: [&str; 8] = ["exit", "stop", "sale", "open", "cafe", "bar", "inn", "taxi"];
const QUESTION_WORDS: [&str; 17] = [
    "what", "is", "the", "token", "rightmost", "leftmost", "topmost", "bottommost", "inside", "nearest", "shares", "a", "line", "with",
    "which", "of", "to",
];
const MIN_COUNT: usize = 2;
const MAX_COUNT: usize = 16;
const TOKEN_HEIGHT: f64 = 0.04;
const EXTREMAL_MARGIN: f64 = 0.04;
const NEAREST_MARGIN: f64 = 0.05;
const LINE_SEPARATION: f64 = 0.05;
const MAX_ATTEMPTS: usize = 200;
pub const ANSWER_NOISE_MAX: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("generation parameters: {0}")]
    Config(String),
    #[error("no valid scene after {MAX_ATTEMPTS} attempts for seed {0}")]
    Infeasible(u64),
    #[error("scene {id}: {msg}")]
    Scene { id: String, msg: String },
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pool of OCR strings: the numbers 0..40 and a few words.
pub fn text_pool() -> Vec<String> {
    (0..40).map(|i| i.to_string()).chain(WORDS.iter().map(|w| w.to_string())).collect()
}

/// Question vocabulary; index 0 is reserved and never used by a question.
pub fn question_vocab() -> Vocab {
    let mut words: Vec<String> = QUESTION_WORDS.iter().map(|s| s.to_string()).collect();
    words.extend(COLORS.iter().chain(&SHAPES).map(|s| s.to_string()));
    words.extend(text_pool());
    Vocab::from_words(words).expect("static question vocabulary")
}

pub fn answer_vocab() -> Vocab {
    Vocab::from_words(VOCAB_ANSWERS).expect("static answer vocabulary")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Rightmost,
    Leftmost,
    Topmost,
    Bottommost,
    InsideObject,
    NearestObject,
    SameLine,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Self::Rightmost,
        Self::Leftmost,
        Self::Topmost,
        Self::Bottommost,
        Self::InsideObject,
        Self::NearestObject,
        Self::SameLine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rightmost => "rightmost",
            Self::Leftmost => "leftmost",
            Self::Topmost => "topmost",
            Self::Bottommost => "bottommost",
            Self::InsideObject => "inside_object",
            Self::NearestObject => "nearest_object",
            Self::SameLine => "same_line",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s.trim())
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative template frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix(pub Vec<(Template, f64)>);

impl Default for TemplateMix {
    fn default() -> Self {
        Self(vec![
            (Template::Rightmost, 0.075),
            (Template::Leftmost, 0.075),
            (Template::Topmost, 0.075),
            (Template::Bottommost, 0.075),
            (Template::InsideObject, 0.3),
            (Template::NearestObject, 0.25),
            (Template::SameLine, 0.15),
        ])
    }
}

impl TemplateMix {
    /// Parses `name:weight` pairs separated by commas.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, weight) = part.split_once(':').ok_or_else(|| SynthError::Config(format!("expected name:weight, got {part:?}")))?;
            let t = Template::parse(name).ok_or_else(|| SynthError::Config(format!("unknown template {name:?}")))?;
            let w: f64 = weight.trim().parse().map_err(|_| SynthError::Config(format!("bad weight {weight:?}")))?;
            out.push((t, w));
        }
        let mix = Self(out);
        mix.validate()?;
        Ok(mix)
    }

    pub fn describe(&self) -> String {
        self.0.iter().map(|(t, w)| format!("{t}:{w}")).collect::<Vec<_>>().join(",")
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.0.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) || self.0.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(SynthError::Config("template weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Template {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut u = rng.gen_range(0.0..total);
        for &(t, w) in &self.0 {
            if u < w {
                return t;
            }
            u -= w;
        }
        self.0.iter().rev().find(|(_, w)| *w > 0.0).expect("positive weight").0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Inclusive range of visual objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of OCR tokens per scene.
    pub ocr: (usize, usize),
    pub dims: FeatureDims,
    pub mix: TemplateMix,
    /// Number of the ten answers replaced by distractors.
    pub answer_noise: usize,
    /// Spread of appearance vectors around their line or attribute prototype.
    pub appearance_noise: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            objects: (3, 5),
            ocr: (4, 8),
            dims: FeatureDims::default(),
            mix: TemplateMix::default(),
            answer_noise: 0,
            appearance_noise: 0.15,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, (lo, hi)) in [("objects", self.objects), ("ocr", self.ocr)] {
            if lo < MIN_COUNT || hi > MAX_COUNT || lo > hi {
                return Err(SynthError::Config(format!("{name} range {lo}..={hi} outside {MIN_COUNT}..={MAX_COUNT}")));
            }
        }
        if self.answer_noise > ANSWER_NOISE_MAX {
            return Err(SynthError::Config(format!("answer_noise {} exceeds {ANSWER_NOISE_MAX}", self.answer_noise)));
        }
        if !(0.0..=10.0).contains(&self.appearance_noise) {
            return Err(SynthError::Config("appearance_noise must lie in [0, 10]".into()));
        }
        let d = self.dims;
        if d.d_fr == 0 || d.d_ft == 0 || d.d_p == 0 {
            return Err(SynthError::Config("feature widths must be positive".into()));
        }
        self.mix.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BoundingBox,
    pub appearance: Vec<f64>,
    pub color: String,
    pub shape: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOcr {
    pub text: String,
    pub bbox: BoundingBox,
    pub word_vector: Vec<f64>,
    pub appearance: Vec<f64>,
    pub char_vector: Vec<f64>,
    /// Tokens sharing a line share a y-extent and an appearance prototype.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: String,
    pub seed: u64,
    pub template: Template,
    pub objects: Vec<SceneObject>,
    pub ocr: Vec<SceneOcr>,
    pub question: Vec<String>,
    pub answers: Vec<String>,
    pub gt_tokens: Vec<String>,
}

impl SceneInstance {
    pub fn ocr_texts(&self) -> Vec<String> {
        self.ocr.iter().map(|o| o.text.clone()).collect()
    }

    pub fn to_model_input(&self, question_vocab: &Vocab) -> Result<ModelInput, SynthError> {
        let question = self
            .question
            .iter()
            .map(|w| {
                question_vocab.get(w).ok_or_else(|| SynthError::Scene {
                    id: self.id.clone(),
                    msg: format!("question word {w:?} not in vocabulary"),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(ModelInput {
            question,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectFeatures {
                    x_fr: o.appearance.clone(),
                    bbox: o.bbox,
                })
                .collect(),
            ocr: self
                .ocr
                .iter()
                .map(|o| OcrFeatures {
                    text: o.text.clone(),
                    x_ft: o.word_vector.clone(),
                    x_fr: o.appearance.clone(),
                    x_p: o.char_vector.clone(),
                    bbox: o.bbox,
                })
                .collect(),
        })
    }
}

/// Seeded standard-normal vector scaled to unit expected norm.
fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| { let z: f64 = StandardNormal.sample(rng); s * z }).collect()
}

fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Fixed vector derived from `text` and `salt`; identical across scenes.
fn text_vector(text: &str, salt: &str, d: usize) -> Vec<f64> {
    gaussian(&mut ChaCha8Rng::seed_from_u64(stable_seed(&[salt.as_bytes(), text.as_bytes()])), d)
}

fn attribute_prototype(kind: &str, name: &str, d: usize) -> Vec<f64> {
    text_vector(name, kind, d)
}

fn jitter(proto: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = gaussian(rng, proto.len());
    proto.iter().zip(n).map(|(p, e)| p + noise * e).collect()
}

fn expand(b: &BoundingBox, gap: f64) -> BoundingBox {
    BoundingBox {
        x_min: b.x_min - gap,
        y_min: b.y_min - gap,
        x_max: b.x_max + gap,
        y_max: b.y_max + gap,
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

struct Layout {
    objects: Vec<BoundingBox>,
    /// `(box, line, inside_object)` per OCR token.
    tokens: Vec<(BoundingBox, usize, Option<usize>)>,
    n_lines: usize,
}

fn place_objects(rng: &mut impl Rng, n: usize) -> Option<Vec<BoundingBox>> {
    let s = (0.6 / (n as f64).sqrt()).min(0.3);
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..100).find_map(|_| {
            let (w, h) = (rng.gen_range(0.6 * s..s), rng.gen_range(0.6 * s..s));
            let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
            let b = BoundingBox::new(x, y, x + w, y + h).ok()?;
            (!boxes.iter().any(|o| overlaps(&expand(o, 0.02), &b))).then_some(b)
        })?;
        boxes.push(placed);
    }
    Some(boxes)
}

/// Places OCR tokens: one per object listed in `inside`, the rest on free
/// lines of one or two tokens that avoid every object.
fn place_tokens(rng: &mut impl Rng, objects: &[BoundingBox], inside: &[usize], n_ocr: usize, want_pair: bool) -> Option<Layout> {
    let mut tokens: Vec<(BoundingBox, usize, Option<usize>)> = Vec::with_capacity(n_ocr);
    let mut line_centers: Vec<f64> = Vec::new();
    for &o in inside {
        let ob = objects[o];
        let w = (0.6 * ob.width()).min(rng.gen_range(0.05..0.08));
        let h = TOKEN_HEIGHT.min(0.6 * ob.height());
        let m = 0.01f64.min((ob.width() - w) / 2.0).min((ob.height() - h) / 2.0);
        let x = rng.gen_range(ob.x_min + m..=ob.x_max - m - w);
        let y = rng.gen_range(ob.y_min + m..=ob.y_max - m - h);
        let b = BoundingBox::new(x, y, x + w, y + h).ok()?;
        line_centers.push(b.center().1);
        tokens.push((b, line_centers.len() - 1, Some(o)));
    }
    let mut remaining = n_ocr - inside.len();
    let mut first_free_line = true;
    while remaining > 0 {
        let size = if remaining >= 2 && ((want_pair && first_free_line) || rng.gen_bool(0.5)) { 2 } else { 1 };
        first_free_line = false;
        let placed = (0..60).find_map(|_| {
            let widths: Vec<f64> = (0..size).map(|_| rng.gen_range(0.05..0.08)).collect();
            let gap = rng.gen_range(0.03..0.15);
            let total: f64 = widths.iter().sum::<f64>() + gap * (size - 1) as f64;
            if total >= 1.0 {
                return None;
            }
            let x0 = rng.gen_range(0.0..1.0 - total);
            let y0 = rng.gen_range(0.0..1.0 - TOKEN_HEIGHT);
            let cy = y0 + TOKEN_HEIGHT / 2.0;
            if line_centers.iter().any(|&c| (c - cy).abs() < LINE_SEPARATION) {
                return None;
            }
            let mut x = x0;
            let mut boxes = Vec::with_capacity(size);
            for w in &widths {
                let b = BoundingBox::new(x, y0, x + w, y0 + TOKEN_HEIGHT).ok()?;
                if objects.iter().any(|o| overlaps(&expand(o, 0.01), &b)) || tokens.iter().any(|(t, _, _)| overlaps(&expand(t, 0.01), &b)) {
                    return None;
                }
                boxes.push(b);
                x += w + gap;
            }
            Some((boxes, cy))
        })?;
        line_centers.push(placed.1);
        for b in placed.0 {
            tokens.push((b, line_centers.len() - 1, None));
        }
        remaining -= size;
    }
    Some(Layout {
        objects: objects.to_vec(),
        tokens,
        n_lines: line_centers.len(),
    })
}

/// Index of the unique best token under `key` (larger is better), provided
/// it beats the runner-up by at least `margin`.
fn unique_best(keys: &[f64], margin: f64) -> Option<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    match order.as_slice() {
        [best] => Some(*best),
        [best, second, ..] => (keys[*best] - keys[*second] >= margin).then_some(*best),
        [] => None,
    }
}

fn extremal_key(t: Template, b: &BoundingBox) -> f64 {
    let (cx, cy) = b.center();
    match t {
        Template::Rightmost => cx,
        Template::Leftmost => -cx,
        Template::Topmost => -cy,
        Template::Bottommost => cy,
        _ => unreachable!("not an extremal template"),
    }
}

fn object_phrase(o: &SceneObject) -> [String; 2] {
    [o.color.clone(), o.shape.clone()]
}

fn question_for(t: Template, slot: &[String]) -> Vec<String> {
    let words: Vec<&str> = match t {
        Template::Rightmost | Template::Leftmost | Template::Topmost | Template::Bottommost => {
            vec!["what", "is", "the", t.name(), "token"]
        }
        Template::InsideObject => vec!["what", "token", "is", "inside", "the"],
        Template::NearestObject => vec!["what", "token", "is", "nearest", "the"],
        Template::SameLine => vec!["what", "token", "shares", "a", "line", "with"],
    };
    words.into_iter().map(String::from).chain(slot.iter().cloned()).collect()
}

pub fn generate_scene(seed: u64, params: &GenParams) -> Result<SceneInstance, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = text_pool();
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_scene(&mut rng, seed, params, &pool) {
            return Ok(scene);
        }
    }
    Err(SynthError::Infeasible(seed))
}

fn try_scene(rng: &mut ChaCha8Rng, seed: u64, params: &GenParams, pool: &[String]) -> Option<SceneInstance> {
    let dims = params.dims;
    let template = params.mix.sample(rng);
    let n_obj = rng.gen_range(params.objects.0..=params.objects.1);
    let n_ocr = rng.gen_range(params.ocr.0..=params.ocr.1);
    let boxes = place_objects(rng, n_obj)?;

    let mut combos: Vec<(usize, usize)> = (0..COLORS.len()).flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s))).collect();
    combos.shuffle(rng);
    let attrs: Vec<(usize, usize)> = (0..n_obj).map(|i| combos[i % combos.len()]).collect();
    let unique: Vec<usize> = (0..n_obj).filter(|&i| attrs.iter().filter(|&&a| a == attrs[i]).count() == 1).collect();
    let target = *unique.choose(rng)?;

    let p_inside = if template == Template::InsideObject { 0.5 } else { 0.3 };
    let max_inside = if template == Template::SameLine { n_ocr.saturating_sub(2) } else { n_ocr };
    let mut inside: Vec<usize> = Vec::new();
    if template == Template::InsideObject {
        inside.push(target);
    }
    for o in 0..n_obj {
        let excluded = o == target && matches!(template, Template::InsideObject | Template::NearestObject);
        if !excluded && inside.len() < max_inside && rng.gen_bool(p_inside) {
            inside.push(o);
        }
    }
    if template == Template::InsideObject && inside.len() > n_ocr {
        return None;
    }
    let layout = place_tokens(rng, &boxes, &inside, n_ocr, template == Template::SameLine)?;

    let mut texts: Vec<String> = pool.choose_multiple(rng, n_ocr).cloned().collect();
    texts.shuffle(rng);
    let line_protos: Vec<Vec<f64>> = (0..layout.n_lines).map(|_| gaussian(rng, dims.d_fr)).collect();
    let mut order: Vec<usize> = (0..n_ocr).collect();
    order.shuffle(rng);
    let ocr: Vec<SceneOcr> = order
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (bbox, line, _) = layout.tokens[t];
            SceneOcr {
                text: texts[k].clone(),
                bbox,
                word_vector: text_vector(&texts[k], "word", dims.d_ft),
                appearance: jitter(&line_protos[line], params.appearance_noise, rng),
                char_vector: text_vector(&texts[k], "chars", dims.d_p),
                line,
            }
        })
        .collect();
    let objects: Vec<SceneObject> = layout
        .objects
        .iter()
        .zip(&attrs)
        .map(|(&bbox, &(c, s))| {
            let cp = attribute_prototype("color", COLORS[c], dims.d_fr);
            let sp = attribute_prototype("shape", SHAPES[s], dims.d_fr);
            let proto: Vec<f64> = cp.iter().zip(&sp).map(|(a, b)| a + b).collect();
            SceneObject {
                bbox,
                appearance: jitter(&proto, params.appearance_noise, rng),
                color: COLORS[c].to_string(),
                shape: SHAPES[s].to_string(),
            }
        })
        .collect();

    let (question, answer) = match template {
        Template::Rightmost | Template::Leftmost | Template::Topmost | Template::Bottommost => {
            let keys: Vec<f64> = ocr.iter().map(|o| extremal_key(template, &o.bbox)).collect();
            let best = unique_best(&keys, EXTREMAL_MARGIN)?;
            (question_for(template, &[]), ocr[best].text.clone())
        }
        Template::InsideObject => {
            let inner: Vec<&SceneOcr> = ocr
                .iter()
                .filter(|o| spatial_interaction(&objects[target].bbox, &o.bbox, false) == SpatialInteraction::IsContains)
                .collect();
            let [only] = inner.as_slice() else { return None };
            (question_for(template, &object_phrase(&objects[target])), only.text.clone())
        }
        Template::NearestObject => {
            let c = objects[target].bbox.center();
            let keys: Vec<f64> = ocr.iter().map(|o| -distance(c, o.bbox.center())).collect();
            let best = unique_best(&keys, NEAREST_MARGIN)?;
            (question_for(template, &object_phrase(&objects[target])), ocr[best].text.clone())
        }
        Template::SameLine => {
            let paired: Vec<usize> = (0..ocr.len()).filter(|&i| ocr.iter().filter(|o| o.line == ocr[i].line).count() == 2).collect();
            let anchor = *paired.choose(rng)?;
            let partner = (0..ocr.len()).find(|&j| j != anchor && ocr[j].line == ocr[anchor].line)?;
            (question_for(template, &[ocr[anchor].text.clone()]), ocr[partner].text.clone())
        }
    };

    let mut answers = vec![answer.clone(); 10];
    let distractors: Vec<&String> = texts.iter().filter(|t| **t != answer).collect();
    for slot in answers.iter_mut().rev().take(params.answer_noise) {
        *slot = (*distractors.choose(rng)?).clone();
    }
    Some(SceneInstance {
        id: format!("scene-{seed:016x}"),
        seed,
        template,
        objects,
        ocr,
        question,
        answers,
        gt_tokens: vec![answer],
    })
}

/// Recomputes the answer from the question words and scene geometry alone.
pub fn answer_oracle(scene: &SceneInstance) -> Result<String, SynthError> {
    let err = |msg: &str| SynthError::Scene {
        id: scene.id.clone(),
        msg: msg.to_string(),
    };
    let q: Vec<&str> = scene.question.iter().map(String::as_str).collect();
    let find_object = |color: &str, shape: &str| {
        let hits: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.color == color && o.shape == shape).collect();
        match hits.as_slice() {
            [o] => Ok(*o),
            _ => Err(err("object phrase does not name exactly one object")),
        }
    };
    match q.as_slice() {
        ["what", "is", "the", dir, "token"] => {
            let t = Template::parse(dir).ok_or_else(|| err("unknown direction"))?;
            let keys: Vec<f64> = scene.ocr.iter().map(|o| extremal_key(t, &o.bbox)).collect();
            let best = unique_best(&keys, 0.0).ok_or_else(|| err("no ocr tokens"))?;
            Ok(scene.ocr[best].text.clone())
        }
        ["what", "token", "is", "inside", "the", color, shape] => {
            let o = find_object(color, shape)?;
            let inner: Vec<&SceneOcr> = scene
                .ocr
                .iter()
                .filter(|t| spatial_interaction(&o.bbox, &t.bbox, false) == SpatialInteraction::IsContains)
                .collect();
            match inner.as_slice() {
                [t] => Ok(t.text.clone()),
                _ => Err(err("object does not contain exactly one token")),
            }
        }
        ["what", "token", "is", "nearest", "the", color, shape] => {
            let c = find_object(color, shape)?.bbox.center();
            let best = scene
                .ocr
                .iter()
                .min_by(|a, b| distance(c, a.bbox.center()).total_cmp(&distance(c, b.bbox.center())))
                .ok_or_else(|| err("no ocr tokens"))?;
            Ok(best.text.clone())
        }
        ["what", "token", "shares", "a", "line", "with", anchor] => {
            let a = scene.ocr.iter().find(|o| o.text == *anchor).ok_or_else(|| err("anchor token missing"))?;
            let (ay0, ay1) = (a.bbox.y_min, a.bbox.y_max);
            let mates: Vec<&SceneOcr> = scene.ocr.iter().filter(|o| o.text != *anchor && o.bbox.y_min == ay0 && o.bbox.y_max == ay1).collect();
            match mates.as_slice() {
                [m] => Ok(m.text.clone()),
                _ => Err(err("anchor line does not hold exactly one other token")),
            }
        }
        _ => Err(err("question matches no template")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub params: GenParams,
    pub template_counts: BTreeMap<String, BTreeMap<Template, usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SceneInstance>,
    pub val: Vec<SceneInstance>,
    pub manifest: SplitManifest,
}

pub fn template_counts(scenes: &[SceneInstance]) -> BTreeMap<Template, usize> {
    let mut m = BTreeMap::new();
    for s in scenes {
        *m.entry(s.template).or_insert(0) += 1;
    }
    m
}

/// Train and validation scenes with per-split instance seeds derived from
/// `seed`; no instance seed is used twice.
pub fn generate_split(seed: u64, sizes: (usize, usize), params: &GenParams) -> Result<Split, SynthError> {
    if sizes.0 == 0 || sizes.1 == 0 {
        return Err(SynthError::Config("split sizes must be at least 1".into()));
    }
    params.validate()?;
    let mut used = HashSet::new();
    let mut make = |tag: &str, n: usize| -> Result<Vec<SceneInstance>, SynthError> {
        (0..n)
            .map(|i| {
                let mut salt = 0u64;
                let s = loop {
                    let s = stable_seed(&[&seed.to_le_bytes(), tag.as_bytes(), &(i as u64).to_le_bytes(), &salt.to_le_bytes()]);
                    if used.insert(s) {
                        break s;
                    }
                    salt += 1;
                };
                let mut scene = generate_scene(s, params)?;
                scene.id = format!("{tag}-{i:05}");
                Ok(scene)
            })
            .collect()
    };
    let train = make("train", sizes.0)?;
    let val = make("val", sizes.1)?;
    let mut template_counts_map = BTreeMap::new();
    template_counts_map.insert("train".to_string(), template_counts(&train));
    template_counts_map.insert("val".to_string(), template_counts(&val));
    let manifest = SplitManifest {
        seed,
        train_size: sizes.0,
        val_size: sizes.1,
        params: params.clone(),
        template_counts: template_counts_map,
    };
    Ok(Split { train, val, manifest })
}

pub fn scenes_to_json(scenes: &[SceneInstance]) -> Result<String, SynthError> {
    Ok(serde_json::to_string(scenes)?)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneInstance>, SynthError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest, SynthError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Writes `train.json`, `val.json` and `manifest.json` into `dir`.
pub fn write_split(dir: &Path, split: &Split) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.json"), scenes_to_json(&split.train)?)?;
    std::fs::write(dir.join("val.json"), scenes_to_json(&split.val)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&split.manifest)?)?;
    Ok(())
}

//! Pairwise edge features between Transformer inputs.
//!
//! Each ordered pair `(i, j)` of image-origin inputs (visual objects and OCR
//! tokens) gets a vector `e_ij` describing the relation from `i` ("self") to
//! `j` ("other"): appearance similarity, centre translation, a spatial
//! interaction label and a modality pair label. Pairs touching a question
//! token or a decoded answer slot are all-zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vectors with a smaller norm have undefined direction; their cosine
/// similarity is reported as 0.
pub const MIN_NORM: f64 = 1e-12;

thread_local! {
    static ALLOCATED: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of edge tensors allocated on the current thread so far.
pub fn edge_tensors_allocated() -> u64 {
    ALLOCATED.with(|c| c.get())
}

fn note_allocation() {
    ALLOCATED.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdgeError {
    #[error("input {index}: image-origin input has no bounding box")]
    MissingBox { index: usize },
    #[error("input {index}: appearance similarity is enabled but the input has no embedding")]
    MissingEmbedding { index: usize },
    #[error("input {index}: embedding has {got} entries, expected {expected}")]
    EmbeddingWidth { index: usize, expected: usize, got: usize },
    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),
}

/// Axis-aligned box in normalised image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, EdgeError> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, EdgeError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn validate(&self) -> Result<(), EdgeError> {
        let a = self.to_array();
        let in_unit = a.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(EdgeError::InvalidBox(a));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Closed-interval containment of `other` in `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min && other.x_max <= self.x_max && self.y_min <= other.y_min && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Question,
    VisualObject,
    OcrToken,
    DecodedAnswer,
}

impl Modality {
    pub fn is_image_origin(self) -> bool {
        matches!(self, Modality::VisualObject | Modality::OcrToken)
    }
}

/// Mutually exclusive spatial relation of `j` relative to `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialInteraction {
    IsSelf,
    IsContains,
    IsIn,
    IsOverlap,
    NotOverlap,
}

impl SpatialInteraction {
    pub const ALL: [SpatialInteraction; 5] = [
        SpatialInteraction::IsSelf,
        SpatialInteraction::IsContains,
        SpatialInteraction::IsIn,
        SpatialInteraction::IsOverlap,
        SpatialInteraction::NotOverlap,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityPair {
    ObjToObj,
    ObjToOcr,
    OcrToObj,
    OcrToOcr,
}

impl ModalityPair {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// How the centre translation is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TranslationNorm {
    /// Offsets in image coordinates; always within `[-1, 1]`.
    #[default]
    Image,
    /// Offsets divided by the width/height of the "self" box, clamped to
    /// `[-1, 1]`.
    ObjectSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeFeature {
    #[serde(rename = "appearance_similarity")]
    Appearance,
    #[serde(rename = "translation")]
    Translation,
    #[serde(rename = "interaction")]
    Interaction,
    #[serde(rename = "modality_pair")]
    ModalityPair,
}

impl EdgeFeature {
    pub const ALL: [EdgeFeature; 4] = [
        EdgeFeature::Appearance,
        EdgeFeature::Translation,
        EdgeFeature::Interaction,
        EdgeFeature::ModalityPair,
    ];

    pub fn width(self) -> usize {
        match self {
            EdgeFeature::Appearance => 1,
            EdgeFeature::Translation => 2,
            EdgeFeature::Interaction => 5,
            EdgeFeature::ModalityPair => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeFeature::Appearance => "appearance_similarity",
            EdgeFeature::Translation => "translation",
            EdgeFeature::Interaction => "interaction",
            EdgeFeature::ModalityPair => "modality_pair",
        }
    }

    pub fn parse(s: &str) -> Option<EdgeFeature> {
        match s.trim() {
            "appearance" | "appearance_similarity" => Some(EdgeFeature::Appearance),
            "translation" | "spatial_translation" => Some(EdgeFeature::Translation),
            "interaction" | "spatial_interaction" => Some(EdgeFeature::Interaction),
            "modality" | "modality_pair" => Some(EdgeFeature::ModalityPair),
            _ => None,
        }
    }
}

/// Per-feature enable flags. Disabled features are dropped from the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub appearance: bool,
    pub translation: bool,
    pub interaction: bool,
    pub modality_pair: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub feature: EdgeFeature,
    pub start: usize,
    pub width: usize,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        appearance: true,
        translation: true,
        interaction: true,
        modality_pair: true,
    };

    pub fn enabled(&self, f: EdgeFeature) -> bool {
        match f {
            EdgeFeature::Appearance => self.appearance,
            EdgeFeature::Translation => self.translation,
            EdgeFeature::Interaction => self.interaction,
            EdgeFeature::ModalityPair => self.modality_pair,
        }
    }

    pub fn without(mut self, f: EdgeFeature) -> Self {
        match f {
            EdgeFeature::Appearance => self.appearance = false,
            EdgeFeature::Translation => self.translation = false,
            EdgeFeature::Interaction => self.interaction = false,
            EdgeFeature::ModalityPair => self.modality_pair = false,
        }
        self
    }

    pub fn slot_map(&self) -> Vec<Slot> {
        let mut start = 0;
        EdgeFeature::ALL
            .iter()
            .filter(|f| self.enabled(**f))
            .map(|&feature| {
                let slot = Slot {
                    feature,
                    start,
                    width: feature.width(),
                };
                start += slot.width;
                slot
            })
            .collect()
    }

    pub fn d_e(&self) -> usize {
        EdgeFeature::ALL.iter().filter(|f| self.enabled(**f)).map(|f| f.width()).sum()
    }

    pub fn slot(&self, f: EdgeFeature) -> Option<Slot> {
        self.slot_map().into_iter().find(|s| s.feature == f)
    }

    /// Comma-separated names of the enabled features, `none` when empty.
    pub fn describe(&self) -> String {
        let names: Vec<&str> = self.slot_map().iter().map(|s| s.feature.name()).collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    }

    /// Parses the output of [`FeatureMask::describe`] (short names accepted).
    pub fn parse(s: &str) -> Option<FeatureMask> {
        let mut mask = FeatureMask {
            appearance: false,
            translation: false,
            interaction: false,
            modality_pair: false,
        };
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Some(mask);
        }
        if s == "all" {
            return Some(FeatureMask::ALL);
        }
        for part in s.split(',') {
            match EdgeFeature::parse(part)? {
                EdgeFeature::Appearance => mask.appearance = true,
                EdgeFeature::Translation => mask.translation = true,
                EdgeFeature::Interaction => mask.interaction = true,
                EdgeFeature::ModalityPair => mask.modality_pair = true,
            }
        }
        Some(mask)
    }
}

/// Cosine similarity of two embeddings; 0 when either is (numerically) zero.
pub fn appearance_similarity(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "appearance_similarity: embedding widths differ");
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    cosine_with_norms(u, v, nu, nv)
}

fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    if nu < MIN_NORM || nv < MIN_NORM {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Offset from the centre of `box_i` to the centre of `box_j` in image
/// coordinates.
pub fn spatial_translation(box_i: &BoundingBox, box_j: &BoundingBox) -> (f64, f64) {
    spatial_translation_with(box_i, box_j, TranslationNorm::Image)
}

pub fn spatial_translation_with(box_i: &BoundingBox, box_j: &BoundingBox, norm: TranslationNorm) -> (f64, f64) {
    let (xi, yi) = box_i.center();
    let (xj, yj) = box_j.center();
    let (dx, dy) = (xj - xi, yj - yi);
    match norm {
        TranslationNorm::Image => (dx, dy),
        TranslationNorm::ObjectSize => (scaled(dx, box_i.width()), scaled(dy, box_i.height())),
    }
}

fn scaled(d: f64, extent: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else if extent <= 0.0 {
        d.signum()
    } else {
        (d / extent).clamp(-1.0, 1.0)
    }
}

/// First matching label in the order self, contains, in, overlap, none.
pub fn spatial_interaction(box_i: &BoundingBox, box_j: &BoundingBox, same_object: bool) -> SpatialInteraction {
    if same_object {
        SpatialInteraction::IsSelf
    } else if box_i.contains(box_j) {
        SpatialInteraction::IsContains
    } else if box_j.contains(box_i) {
        SpatialInteraction::IsIn
    } else if box_i.intersection_area(box_j) > 0.0 {
        SpatialInteraction::IsOverlap
    } else {
        SpatialInteraction::NotOverlap
    }
}

pub fn modality_pair(m_i: Modality, m_j: Modality) -> Option<ModalityPair> {
    use Modality::*;
    match (m_i, m_j) {
        (VisualObject, VisualObject) => Some(ModalityPair::ObjToObj),
        (VisualObject, OcrToken) => Some(ModalityPair::ObjToOcr),
        (OcrToken, VisualObject) => Some(ModalityPair::OcrToObj),
        (OcrToken, OcrToken) => Some(ModalityPair::OcrToOcr),
        _ => None,
    }
}

/// One Transformer input as seen by the edge-feature extractor.
#[derive(Debug, Clone, Copy)]
pub struct EdgeInput<'a> {
    pub modality: Modality,
    pub bbox: Option<BoundingBox>,
    /// Raw detector appearance embedding.
    pub embedding: Option<&'a [f64]>,
}

impl<'a> EdgeInput<'a> {
    pub fn question() -> Self {
        EdgeInput {
            modality: Modality::Question,
            bbox: None,
            embedding: None,
        }
    }

    pub fn answer_slot() -> Self {
        EdgeInput {
            modality: Modality::DecodedAnswer,
            bbox: None,
            embedding: None,
        }
    }

    pub fn image(modality: Modality, bbox: BoundingBox, embedding: &'a [f64]) -> Self {
        EdgeInput {
            modality,
            bbox: Some(bbox),
            embedding: Some(embedding),
        }
    }
}

/// Dense `n x n x d_e` edge features; `E[i, j]` is the edge from `i` to `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTensor {
    n_obj: usize,
    mask: FeatureMask,
    d_e: usize,
    values: Vec<f64>,
}

impl EdgeTensor {
    pub fn zeros(n_obj: usize, mask: FeatureMask) -> Self {
        note_allocation();
        let d_e = mask.d_e();
        EdgeTensor {
            n_obj,
            mask,
            d_e,
            values: vec![0.0; n_obj * n_obj * d_e],
        }
    }

    /// Wraps raw values laid out as `[n_obj, n_obj, d_e]`.
    pub fn from_values(n_obj: usize, d_e: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_obj * n_obj * d_e, "edge tensor value count");
        note_allocation();
        EdgeTensor {
            n_obj,
            mask: FeatureMask::ALL,
            d_e,
            values,
        }
    }

    pub fn n_obj(&self) -> usize {
        self.n_obj
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn mask(&self) -> FeatureMask {
        self.mask
    }

    pub fn slot_map(&self) -> Vec<Slot> {
        self.mask.slot_map()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n_obj + j) * self.d_e;
        &self.values[o..o + self.d_e]
    }

    /// `E_i`: the `n x d_e` block of edges with `i` as the "self" input.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_obj * self.d_e;
        &self.values[i * w..(i + 1) * w]
    }

    fn edge_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.n_obj + j) * self.d_e;
        &mut self.values[o..o + self.d_e]
    }

    /// Reorders inputs: entry `(a, b)` of the result is entry
    /// `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> EdgeTensor {
        assert_eq!(perm.len(), self.n_obj);
        note_allocation();
        let mut out = EdgeTensor {
            values: vec![0.0; self.values.len()],
            ..*self
        };
        for (a, &pa) in perm.iter().enumerate() {
            for (b, &pb) in perm.iter().enumerate() {
                out.edge_mut(a, b).copy_from_slice(self.edge(pa, pb));
            }
        }
        out
    }

    pub fn to_debug_json(&self) -> serde_json::Value {
        let values: Vec<Vec<Vec<f64>>> = (0..self.n_obj)
            .map(|i| (0..self.n_obj).map(|j| self.edge(i, j).to_vec()).collect())
            .collect();
        serde_json::to_value(EdgeTensorJson {
            n_obj: self.n_obj,
            d_e: self.d_e,
            slot_map: self.slot_map(),
            values,
        })
        .expect("edge tensor json")
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeTensorJson {
    n_obj: usize,
    d_e: usize,
    slot_map: Vec<Slot>,
    values: Vec<Vec<Vec<f64>>>,
}

pub fn build_edge_tensor(inputs: &[EdgeInput<'_>], mask: FeatureMask) -> Result<EdgeTensor, EdgeError> {
    build_edge_tensor_with(inputs, mask, TranslationNorm::Image)
}

pub fn build_edge_tensor_with(
    inputs: &[EdgeInput<'_>],
    mask: FeatureMask,
    norm: TranslationNorm,
) -> Result<EdgeTensor, EdgeError> {
    let mut emb_width = None;
    let mut norms = vec![0.0; inputs.len()];
    for (index, input) in inputs.iter().enumerate() {
        if !input.modality.is_image_origin() {
            continue;
        }
        let bbox = input.bbox.ok_or(EdgeError::MissingBox { index })?;
        bbox.validate()?;
        if mask.appearance {
            let e = input.embedding.ok_or(EdgeError::MissingEmbedding { index })?;
            let expected = *emb_width.get_or_insert(e.len());
            if e.len() != expected {
                return Err(EdgeError::EmbeddingWidth {
                    index,
                    expected,
                    got: e.len(),
                });
            }
            norms[index] = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }

    let slots = |f| mask.slot(f).map(|s: Slot| s.start);
    let (s_app, s_tr, s_int, s_mod) = (
        slots(EdgeFeature::Appearance),
        slots(EdgeFeature::Translation),
        slots(EdgeFeature::Interaction),
        slots(EdgeFeature::ModalityPair),
    );

    let n = inputs.len();
    let mut e = EdgeTensor::zeros(n, mask);
    for i in 0..n {
        let a = &inputs[i];
        if !a.modality.is_image_origin() {
            continue;
        }
        let bi = a.bbox.expect("validated above");
        for j in 0..n {
            let b = &inputs[j];
            let Some(pair) = modality_pair(a.modality, b.modality) else {
                continue;
            };
            let bj = b.bbox.expect("validated above");
            let edge = e.edge_mut(i, j);
            if let Some(s) = s_app {
                let (u, v) = (a.embedding.unwrap(), b.embedding.unwrap());
                edge[s] = cosine_with_norms(u, v, norms[i], norms[j]);
            }
            if let Some(s) = s_tr {
                let (dx, dy) = spatial_translation_with(&bi, &bj, norm);
                edge[s] = dx;
                edge[s + 1] = dy;
            }
            if let Some(s) = s_int {
                edge[s + spatial_interaction(&bi, &bj, i == j).index()] = 1.0;
            }
            if let Some(s) = s_mod {
                edge[s + pair.index()] = 1.0;
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.0, 2.0];
        assert!((appearance_similarity(&u, &u) - 1.0).abs() < 1e-15);
        assert_eq!(appearance_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((appearance_similarity(&u, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(appearance_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn translation_examples() {
        let a = bx(0.1, 0.2, 0.3, 0.5);
        assert_eq!(spatial_translation(&a, &a), (0.0, 0.0));
        let c0 = bx(0.0, 0.0, 0.0, 0.0);
        let c1 = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(spatial_translation(&c0, &c1), (1.0, 1.0));
        let b = bx(0.6, 0.1, 0.9, 0.2);
        let (dx, dy) = spatial_translation(&a, &b);
        let (rx, ry) = spatial_translation(&b, &a);
        assert_eq!((dx, dy), (-rx, -ry));
    }

    #[test]
    fn object_size_translation_is_clamped() {
        let small = bx(0.1, 0.1, 0.12, 0.12);
        let far = bx(0.8, 0.0, 0.9, 0.05);
        let (dx, dy) = spatial_translation_with(&small, &far, TranslationNorm::ObjectSize);
        assert_eq!((dx, dy), (1.0, -1.0));
        let big = bx(0.0, 0.0, 1.0, 1.0);
        let (dx, _) = spatial_translation_with(&big, &far, TranslationNorm::ObjectSize);
        assert!((dx - 0.35).abs() < 1e-12);
        let point = bx(0.5, 0.5, 0.5, 0.5);
        assert_eq!(spatial_translation_with(&point, &point, TranslationNorm::ObjectSize), (0.0, 0.0));
    }

    #[test]
    fn interaction_examples() {
        let outer = bx(0.0, 0.0, 1.0, 1.0);
        let inner = bx(0.25, 0.25, 0.5, 0.5);
        assert_eq!(spatial_interaction(&outer, &outer, true), SpatialInteraction::IsSelf);
        assert_eq!(spatial_interaction(&outer, &inner, false), SpatialInteraction::IsContains);
        assert_eq!(spatial_interaction(&inner, &outer, false), SpatialInteraction::IsIn);
        assert_eq!(spatial_interaction(&inner, &inner, false), SpatialInteraction::IsContains);
        let side = bx(0.4, 0.4, 0.7, 0.7);
        assert_eq!(spatial_interaction(&inner, &side, false), SpatialInteraction::IsOverlap);
        let touching = bx(0.5, 0.25, 0.7, 0.5);
        assert_eq!(spatial_interaction(&inner, &touching, false), SpatialInteraction::NotOverlap);
    }

    #[test]
    fn modality_pair_examples() {
        use Modality::*;
        assert_eq!(modality_pair(VisualObject, OcrToken), Some(ModalityPair::ObjToOcr));
        assert_eq!(modality_pair(OcrToken, VisualObject), Some(ModalityPair::OcrToObj));
        assert_eq!(modality_pair(OcrToken, OcrToken), Some(ModalityPair::OcrToOcr));
        assert_eq!(modality_pair(Question, OcrToken), None);
        assert_eq!(modality_pair(VisualObject, DecodedAnswer), None);
    }

    #[test]
    fn all_question_inputs_give_zero_tensor() {
        let inputs = vec![EdgeInput::question(); 4];
        let e = build_edge_tensor(&inputs, FeatureMask::ALL).unwrap();
        assert_eq!(e.d_e(), 12);
        assert_eq!(e.values().len(), 4 * 4 * 12);
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_visual_object_self_edge() {
        let emb = [0.5, -0.25, 1.0];
        let inputs = [EdgeInput::image(Modality::VisualObject, bx(0.1, 0.1, 0.4, 0.3), &emb)];
        let e = build_edge_tensor(&inputs, FeatureMask::ALL).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(e.edge(0, 0).len(), 12);
        for (g, w) in e.edge(0, 0).iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn disabling_appearance_shifts_slots() {
        let mask = FeatureMask::ALL.without(EdgeFeature::Appearance);
        assert_eq!(mask.d_e(), 11);
        let map = mask.slot_map();
        assert_eq!(map[0].feature, EdgeFeature::Translation);
        assert_eq!(map[0].start, 0);
        assert_eq!(map[1].start, 2);
        assert_eq!(map[2].start, 7);
        let inputs = [EdgeInput {
            modality: Modality::OcrToken,
            bbox: Some(bx(0.0, 0.0, 0.2, 0.2)),
            embedding: None,
        }];
        let e = build_edge_tensor(&inputs, mask).unwrap();
        assert_eq!(e.edge(0, 0), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_data_names_the_input() {
        let emb = [1.0];
        let inputs = [
            EdgeInput::question(),
            EdgeInput::image(Modality::OcrToken, bx(0.0, 0.0, 0.1, 0.1), &emb),
            EdgeInput {
                modality: Modality::VisualObject,
                bbox: None,
                embedding: Some(&emb),
            },
        ];
        assert_eq!(
            build_edge_tensor(&inputs, FeatureMask::ALL),
            Err(EdgeError::MissingBox { index: 2 })
        );
        let inputs = [EdgeInput {
            modality: Modality::OcrToken,
            bbox: Some(bx(0.0, 0.0, 0.1, 0.1)),
            embedding: None,
        }];
        assert_eq!(
            build_edge_tensor(&inputs, FeatureMask::ALL),
            Err(EdgeError::MissingEmbedding { index: 0 })
        );
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }

    #[test]
    fn debug_json_layout() {
        let emb = [1.0, 0.0];
        let inputs = [
            EdgeInput::image(Modality::VisualObject, bx(0.0, 0.0, 0.5, 0.5), &emb),
            EdgeInput::question(),
        ];
        let e = build_edge_tensor(&inputs, FeatureMask::ALL).unwrap();
        let j = e.to_debug_json();
        assert_eq!(j["n_obj"], 2);
        assert_eq!(j["d_e"], 12);
        assert_eq!(j["slot_map"][1]["feature"], "translation");
        assert_eq!(j["slot_map"][1]["start"], 1);
        assert_eq!(j["values"][0][0][0], 1.0);
        assert_eq!(j["values"][1].as_array().unwrap().len(), 2);
    }

    /// Pixel-grid rasterisation at 512x512; a pixel belongs to a box when its
    /// centre lies inside the closed box.
    fn pixel_range(lo: f64, hi: f64) -> (i64, i64) {
        let first = (lo * 512.0 - 0.5).ceil() as i64;
        let last = (hi * 512.0 - 0.5).floor() as i64;
        (first.max(0), last.min(511))
    }

    fn raster_relation(a: &BoundingBox, b: &BoundingBox) -> SpatialInteraction {
        let (ax, ay) = (pixel_range(a.x_min, a.x_max), pixel_range(a.y_min, a.y_max));
        let (bxr, byr) = (pixel_range(b.x_min, b.x_max), pixel_range(b.y_min, b.y_max));
        let mut a_px = std::collections::HashSet::new();
        for x in ax.0..=ax.1 {
            for y in ay.0..=ay.1 {
                a_px.insert((x, y));
            }
        }
        let mut b_px = std::collections::HashSet::new();
        for x in bxr.0..=bxr.1 {
            for y in byr.0..=byr.1 {
                b_px.insert((x, y));
            }
        }
        if b_px.is_subset(&a_px) {
            SpatialInteraction::IsContains
        } else if a_px.is_subset(&b_px) {
            SpatialInteraction::IsIn
        } else if !a_px.is_disjoint(&b_px) {
            SpatialInteraction::IsOverlap
        } else {
            SpatialInteraction::NotOverlap
        }
    }

    fn near_boundary(a: &BoundingBox, b: &BoundingBox) -> bool {
        let tol = 2.0 / 512.0;
        let xs_a = [a.x_min, a.x_max];
        let xs_b = [b.x_min, b.x_max];
        let ys_a = [a.y_min, a.y_max];
        let ys_b = [b.y_min, b.y_max];
        xs_a.iter().any(|p| xs_b.iter().any(|q| (p - q).abs() < tol))
            || ys_a.iter().any(|p| ys_b.iter().any(|q| (p - q).abs() < tol))
    }

    #[test]
    fn interaction_matches_pixel_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut compared = 0;
        let random_box = |rng: &mut ChaCha8Rng| {
            let (x0, x1): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (y0, y1): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            bx(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
        };
        for _ in 0..200 {
            let a = random_box(&mut rng);
            // nest some pairs so every label shows up
            let b = if rng.gen_bool(0.3) {
                let x0 = rng.gen_range(a.x_min..=a.x_max);
                let y0 = rng.gen_range(a.y_min..=a.y_max);
                bx(x0, y0, rng.gen_range(x0..=a.x_max), rng.gen_range(y0..=a.y_max))
            } else {
                random_box(&mut rng)
            };
            if near_boundary(&a, &b) || a.width() < 2.0 / 512.0 || b.width() < 2.0 / 512.0 {
                continue;
            }
            if a.height() < 2.0 / 512.0 || b.height() < 2.0 / 512.0 {
                continue;
            }
            compared += 1;
            assert_eq!(spatial_interaction(&a, &b, false), raster_relation(&a, &b), "{a:?} {b:?}");
        }
        assert!(compared > 100);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
            .prop_map(|(a, b, c, d)| bx(a.min(c), b.min(d), a.max(c), b.max(d)))
    }

    proptest! {
        #[test]
        fn contains_is_dual_to_in(a in arb_box(), b in arb_box()) {
            let ab = spatial_interaction(&a, &b, false);
            let ba = spatial_interaction(&b, &a, false);
            if a != b {
                prop_assert_eq!(ab == SpatialInteraction::IsContains, ba == SpatialInteraction::IsIn);
            }
            if ab == SpatialInteraction::IsOverlap { prop_assert_eq!(ba, SpatialInteraction::IsOverlap); }
            if ab == SpatialInteraction::NotOverlap { prop_assert_eq!(ba, SpatialInteraction::NotOverlap); }
        }

        #[test]
        fn translation_is_antisymmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (dx, dy) = spatial_translation(&a, &b);
            let (rx, ry) = spatial_translation(&b, &a);
            prop_assert_eq!((dx, dy), (-rx, -ry));
            prop_assert!((-1.0..=1.0).contains(&dx) && (-1.0..=1.0).contains(&dy));
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(u in prop::collection::vec(-5.0..5.0f64, 6), v in prop::collection::vec(-5.0..5.0f64, 6)) {
            let s = appearance_similarity(&u, &v);
            prop_assert_eq!(s, appearance_similarity(&v, &u));
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn zero_rule_and_one_hot(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let embs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mods: Vec<Modality> = (0..n).map(|_| match rng.gen_range(0..4) {
                0 => Modality::Question, 1 => Modality::VisualObject, 2 => Modality::OcrToken, _ => Modality::DecodedAnswer,
            }).collect();
            let boxes: Vec<BoundingBox> = (0..n).map(|_| {
                let (a, b, c, d): (f64, f64, f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                bx(a.min(c), b.min(d), a.max(c), b.max(d))
            }).collect();
            let inputs: Vec<EdgeInput> = (0..n).map(|i| EdgeInput { modality: mods[i], bbox: Some(boxes[i]), embedding: Some(&embs[i]) }).collect();
            let e = build_edge_tensor(&inputs, FeatureMask::ALL).unwrap();
            for p in 0..n {
                if !mods[p].is_image_origin() {
                    for q in 0..n {
                        prop_assert!(e.edge(p, q).iter().all(|&v| v == 0.0));
                        prop_assert!(e.edge(q, p).iter().all(|&v| v == 0.0));
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let edge = e.edge(i, j);
                    let inter: f64 = edge[3..8].iter().sum();
                    let pair: f64 = edge[8..12].iter().sum();
                    prop_assert!(inter == 0.0 || inter == 1.0);
                    prop_assert!(pair == 0.0 || pair == 1.0);
                    prop_assert!(edge[3..12].iter().all(|&v| v == 0.0 || v == 1.0));
                    if mods[i].is_image_origin() && mods[j].is_image_origin() {
                        prop_assert_eq!(inter, 1.0);
                        prop_assert_eq!(pair, 1.0);
                        // directionality
                        let back = e.edge(j, i);
                        prop_assert_eq!(edge[1], -back[1]);
                        prop_assert_eq!(edge[2], -back[2]);
                        if i != j && edge[4] == 1.0 && boxes[i] != boxes[j] { prop_assert_eq!(back[5], 1.0); }
                    }
                }
            }
            // permutation consistency
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() { perm.swap(k, rng.gen_range(0..=k)); }
            let permuted: Vec<EdgeInput> = perm.iter().map(|&p| inputs[p]).collect();
            let ep = build_edge_tensor(&permuted, FeatureMask::ALL).unwrap();
            prop_assert_eq!(ep, e.permuted(&perm));
        }
    }
}

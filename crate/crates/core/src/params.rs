//! Named parameter storage and its binding onto a tape.

use std::io::{Read, Write};
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{NodeId, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the first and last dimension.
    XavierUniform,
    Normal(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let len: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::XavierUniform => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.last().copied().unwrap_or(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                use rand_distr::{Distribution, Normal};
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Registers every parameter on `tape` as a borrowed, differentiable leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Result<BoundParams, TensorError> {
        let ids = self
            .params
            .iter()
            .map(|p| tape.param(&p.shape, &p.values))
            .collect::<Result<_, _>>()?;
        Ok(BoundParams(ids))
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| vec![0.0; p.values.len()]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }
}

/// Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
/// header listing `{name, shape}` per parameter in storage order, then every
/// parameter's values as little-endian `f64`, concatenated in the same order.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
}

const CHECKPOINT_FORMAT: &str = "grt-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    params: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            params: self
                .params
                .iter()
                .map(|p| HeaderEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.num_values() * 8);
        for v in self.params.iter().flat_map(|p| &p.values) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| CheckpointError::Format("header length overflow".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format {:?}", header.format)));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let count: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; count * 8];
            r.read_exact(&mut raw)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(Param {
                name: entry.name,
                shape: entry.shape,
                values,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }

    /// Copies values from `other` by name; every parameter of `self` must be
    /// present there with the same shape.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        for p in &self.params {
            let id = other.find(&p.name).ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            let q = other.get(id);
            if q.shape != p.shape {
                return Err(CheckpointError::Shape {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: q.shape.clone(),
                });
            }
        }
        for p in &mut self.params {
            let q = other.get(other.find(&p.name).expect("checked above"));
            p.values.clone_from(&q.values);
        }
        Ok(())
    }
}

/// Tape node for each parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<NodeId>);

impl Index<ParamId> for BoundParams {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

/// Per-parameter gradient buffers matching a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    /// Adds `scale` times the gradients a backward pass left on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, bound: &BoundParams, scale: f64) {
        for (buf, &node) in self.0.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(node) {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += scale * v;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_borrows_and_collects_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", &[2, 3], Init::XavierUniform, &mut rng);
        let b = store.add("b", &[3], Init::Ones, &mut rng);
        assert_eq!(store.num_values(), 9);
        let bound_limit = (6.0f64 / 5.0).sqrt();
        assert!(store.get(w).values.iter().all(|v| v.abs() <= bound_limit));

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let s = tape.sum(bound[w]).unwrap();
        let s2 = tape.sum(bound[b]).unwrap();
        let l = tape.add(s, s2).unwrap();
        tape.backward(l).unwrap();
        let mut g = store.zeros_like();
        g.accumulate(&tape, &bound, 0.5);
        assert_eq!(g.0[0], vec![0.5; 6]);
        assert_eq!(g.0[1], vec![0.5; 3]);
        assert!((g.norm() - (9.0f64 * 0.25).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a", &[2, 2], Init::Normal(1.0), &mut rng);
        store.add("b", &[3], Init::XavierUniform, &mut rng);
        store.get_mut(ParamId(1)).values[0] = f64::MIN_POSITIVE;
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + len + 7 * 8);
        let back = ParamStore::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, store);

        let mut other = ParamStore::new();
        other.add("a", &[4], Init::Zeros, &mut rng);
        other.add("b", &[3], Init::Zeros, &mut rng);
        assert!(matches!(other.assign_from(&store), Err(CheckpointError::Shape { .. })));
        let mut same = ParamStore::new();
        same.add("b", &[3], Init::Zeros, &mut rng);
        same.assign_from(&store).unwrap();
        assert_eq!(same.get(ParamId(0)).values, store.get(ParamId(1)).values);

        bytes.push(0);
        assert!(matches!(ParamStore::read_checkpoint(&bytes[..]), Err(CheckpointError::Format(_))));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", &[1], Init::Zeros, &mut rng);
        store.add("w", &[1], Init::Zeros, &mut rng);
    }
}

//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every forward computation is recorded on a [`Tape`]; the tape owns the
//! resulting [`DiffTensor`]s and addresses them through [`NodeId`] handles.
//! A tape is single-threaded and lives for one forward/backward pass.
//! Parameters are registered with [`Tape::param`], which borrows their
//! storage instead of copying it.
//!
//! ```
//! use grt::tensor::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
//! let loss = tape.sum(w).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[1.0; 4]);
//! ```

use std::borrow::Cow;

use thiserror::Error;

pub mod gradcheck;
mod kernels;
mod tape;

pub(crate) use tape::softmax_in_place;
pub use tape::{CustomBackward, Tape};

/// Default epsilon for [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{len} values cannot fill shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// A tensor recorded on a tape: row-major values, shape, and the gradient
/// populated by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct DiffTensor<'p> {
    shape: Vec<usize>,
    values: Cow<'p, [f64]>,
    grad: Option<Vec<f64>>,
    node: NodeId,
}

impl DiffTensor<'_> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheck};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[17.0, 39.0]);

        let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(&[2, 2], vec![0.3, -1.2, 7.0, 2.5]).unwrap();
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p), t.value(m));

        let z = t.constant(&[3, 4], vec![0.0; 12]).unwrap();
        let any = t.constant(&[4, 2], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let zz = t.matmul(z, any).unwrap();
        assert_eq!(t.shape(zz), &[3, 2]);
        assert!(t.value(zz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![2.0, 2.0, 2.0, 1000.0, 0.0, -5.0]).unwrap();
        let s = t.row_softmax(a).unwrap();
        let v = t.value(s);
        for x in &v[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15);
        assert!(v[4] >= 0.0 && v[4] < 1e-300);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 12);
        let mut t = Tape::new();
        let a = t.constant(&[3, 4], x.clone()).unwrap();
        let b = t.constant(&[3, 4], x.iter().map(|v| v + 17.25).collect()).unwrap();
        let sa = t.row_softmax(a).unwrap();
        let sb = t.row_softmax(b).unwrap();
        for (p, q) in t.value(sa).iter().zip(t.value(sb)) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let a = t.constant(&[2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap();
        let y = t.layer_norm(a, g, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 1.0, -1.0]);

        let g0 = t.constant(&[3], vec![0.0; 3]).unwrap();
        let bb = t.constant(&[3], vec![0.5, -2.0, 4.0]).unwrap();
        let x = t.constant(&[2, 3], vec![1.0, 5.0, -3.0, 0.2, 0.1, 9.0]).unwrap();
        let y = t.layer_norm(x, g0, bb, LAYER_NORM_EPS).unwrap();
        assert_eq!(t.value(y), &[0.5, -2.0, 4.0, 0.5, -2.0, 4.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.constant(&[5, 7], random(&mut rng, 35)).unwrap();
        let g = t.constant(&[7], vec![1.0; 7]).unwrap();
        let b = t.constant(&[7], vec![0.0; 7]).unwrap();
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        for row in t.value(y).chunks(7) {
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![4.0]).unwrap();
        let e = t.constant(&[0], vec![]).unwrap();
        let c = t.concat_last(x, e).unwrap();
        assert_eq!(t.value(c), &[4.0]);

        let a = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[1], vec![3.0]).unwrap();
        let c = t.concat_last(a, b).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);

        let a = t.constant(&[5, 768], vec![0.0; 5 * 768]).unwrap();
        let b = t.constant(&[5, 4], vec![0.0; 20]).unwrap();
        let c = t.concat_last(a, b).unwrap();
        assert_eq!(t.shape(c), &[5, 772]);

        let bad = t.constant(&[4, 4], vec![0.0; 16]).unwrap();
        assert!(matches!(t.concat_last(a, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.leaf(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![0.1, -0.2, 0.3, 2.0, 0.5, -0.6]).unwrap();
        let sm = t.row_softmax(x).unwrap();
        let s = t.sum(sm).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.backward(w), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn every_reachable_node_gets_a_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.leaf(&[2, 2], vec![0.5, 0.1, -0.3, 0.2]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let d = t.gelu(c).unwrap();
        let l = t.mean(d).unwrap();
        t.backward(l).unwrap();
        for id in [a, b, c, d, l] {
            let tensor = t.tensor(id);
            assert_eq!(tensor.grad().unwrap().len(), tensor.len());
        }
    }

    #[test]
    fn aliased_inputs_accumulate() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.matmul(a, a).unwrap();
        let l = t.sum(c).unwrap();
        t.backward(l).unwrap();
        // d sum(A·A) / dA[p][q] = rowsum(A)[q] + colsum(A)[p]
        let want = [3.0 + 4.0, 7.0 + 4.0, 3.0 + 6.0, 7.0 + 6.0];
        for (g, w) in t.grad(a).unwrap().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    /// Builds a loss exercising every built-in op from three parameter
    /// tensors; used for the finite-difference sweep.
    fn composite(params: &[Vec<f64>], tape: &mut Tape) -> (Vec<NodeId>, NodeId) {
        let x = tape.leaf(&[3, 4], params[0].clone()).unwrap();
        let w = tape.leaf(&[4, 4], params[1].clone()).unwrap();
        let v = tape.leaf(&[4], params[2].clone()).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_bias(h, v).unwrap();
        let gain = tape.reshape(v, &[4]).unwrap();
        let h = tape.layer_norm(h, gain, v, LAYER_NORM_EPS).unwrap();
        let h = tape.gelu(h).unwrap();
        let s = tape.row_softmax(h).unwrap();
        let m = tape.mul(s, h).unwrap();
        let m = tape.scale(m, 1.7).unwrap();
        let c = tape.concat_last(m, x).unwrap();
        let r = tape.slice_cols(c, 2, 5).unwrap();
        let top = tape.slice_rows(r, 0, 2).unwrap();
        let g = tape.gather_rows(r, &[2, 0, 2]).unwrap();
        let stacked = tape.concat_rows(&[top, g]).unwrap();
        let xt = tape.matmul_t(stacked, r).unwrap();
        let one = tape.slice_cols(xt, 0, 1).unwrap();
        let one = tape.slice_rows(one, 1, 1).unwrap();
        let one = tape.reshape(one, &[1]).unwrap();
        let shifted = tape.add_scalar(xt, one).unwrap();
        let sg = tape.sigmoid(shifted).unwrap();
        let targets: Vec<f64> = (0..15).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let bce = tape.bce(sg, &targets, 1e-7).unwrap();
        let s2 = tape.sum(xt).unwrap();
        let s2 = tape.scale(s2, 0.01).unwrap();
        let loss = tape.add(bce, s2).unwrap();
        (vec![x, w, v], loss)
    }

    fn gradcheck_composite(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![random(&mut rng, 12), random(&mut rng, 16), random(&mut rng, 4)];
        check_gradients(
            &params,
            |p| {
                let mut tape = Tape::new();
                let (_, loss) = composite(p, &mut tape);
                tape.value(loss)[0]
            },
            |p| {
                let mut tape = Tape::new();
                let (ids, loss) = composite(p, &mut tape);
                tape.backward(loss).unwrap();
                ids.iter().map(|&i| tape.grad(i).unwrap().to_vec()).collect()
            },
            1e-5,
        )
    }

    #[test]
    fn builtin_ops_match_finite_differences() {
        for seed in 0..20 {
            let report = gradcheck_composite(seed);
            assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (m, k, l, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
            let mut t = Tape::new();
            let a = t.constant(&[m, k], random(&mut rng, m * k)).unwrap();
            let b = t.constant(&[k, l], random(&mut rng, k * l)).unwrap();
            let c = t.constant(&[l, n], random(&mut rng, l * n)).unwrap();
            let ab = t.matmul(a, b).unwrap();
            let left = t.matmul(ab, c).unwrap();
            let bc = t.matmul(b, c).unwrap();
            let right = t.matmul(a, bc).unwrap();
            for (x, y) in t.value(left).iter().zip(t.value(right)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let params = vec![random(&mut rng, 12), random(&mut rng, 16), random(&mut rng, 4)];
            let mut tape = Tape::new();
            let (_, loss) = composite(&params, &mut tape);
            tape.value(loss)[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let vals: Vec<f64> = random(&mut rng, rows * cols).into_iter().map(|v| v * scale).collect();
                let mut t = Tape::new();
                let a = t.constant(&[rows, cols], vals).unwrap();
                let s = t.row_softmax(a).unwrap();
                for row in t.value(s).chunks(cols) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }

            #[test]
            fn matmul_grad_matches_finite_differences(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = vec![random(&mut rng, m * k), random(&mut rng, k * n)];
                let weights = random(&mut rng, m * n);
                let forward = |p: &[Vec<f64>], tape: &mut Tape| {
                    let a = tape.leaf(&[m, k], p[0].clone()).unwrap();
                    let b = tape.leaf(&[k, n], p[1].clone()).unwrap();
                    let w = tape.constant(&[m, n], weights.clone()).unwrap();
                    let c = tape.matmul(a, b).unwrap();
                    let c = tape.mul(c, w).unwrap();
                    let l = tape.sum(c).unwrap();
                    (a, b, l)
                };
                let report = check_gradients(
                    &params,
                    |p| { let mut t = Tape::new(); let (_, _, l) = forward(p, &mut t); t.value(l)[0] },
                    |p| {
                        let mut t = Tape::new();
                        let (a, b, l) = forward(p, &mut t);
                        t.backward(l).unwrap();
                        vec![t.grad(a).unwrap().to_vec(), t.grad(b).unwrap().to_vec()]
                    },
                    1e-5,
                );
                prop_assert!(report.max_rel_err <= 1e-4);
            }
        }
    }
}

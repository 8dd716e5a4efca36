//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the tape's leaves.
//! Leaf gradients persist across repeated `backward` calls (they add up) until
//! [`Tape::reset_grads`] is called. Interior gradients are discarded after
//! each sweep.
//!
//! Tapes are not shared between threads; each training step confines its tape
//! to one thread. No value may become NaN/Inf: every operation checks its
//! output and panics naming the operation if it produced a non-finite value.

use std::cell::RefCell;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires: bool,
    /// Caller-supplied tag for parameter leaves (see [`Tape::leaf_tagged`]).
    tag: Option<usize>,
}

/// Records a computation graph; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to one value on a tape. Cheap to copy; all math methods record a
/// new node and return its handle.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn check_finite(op: &str, t: &Tensor) {
    assert!(
        t.all_finite(),
        "op `{op}` produced a non-finite value (shape {:?})",
        t.shape()
    );
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.leaf_grads.borrow_mut().push(None);
        nodes.len() - 1
    }

    /// A differentiable leaf: gradients accumulate here.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        check_finite("leaf", &value);
        let id = self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires: true,
            tag: None,
        });
        Var { tape: self, id }
    }

    /// A differentiable leaf carrying a caller-defined tag, used to route
    /// gradients back to named parameters.
    pub fn leaf_tagged(&self, value: Tensor, tag: usize) -> Var<'_> {
        let v = self.leaf(value);
        self.nodes.borrow_mut()[v.id].tag = Some(tag);
        v
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        check_finite("constant", &value);
        let id = self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires: false,
            tag: None,
        });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires
    }

    fn record(&self, value: Tensor, parents: Vec<usize>, backward: BackFn) -> Var<'_> {
        let requires = parents.iter().any(|&p| self.requires(p));
        let id = self.push(Node {
            value,
            parents,
            backward: Some(backward),
            requires,
            tag: None,
        });
        Var { tape: self, id }
    }

    /// Concatenate along `axis`.
    pub fn concat<'t>(&'t self, axis: usize, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero vars");
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "concat of vars from another tape");
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = Tensor::concat(axis, &refs);
        check_finite("concat", &out);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids = parts.iter().map(|p| p.id).collect();
        self.record(
            out,
            ids,
            Box::new(move |g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let piece = g.narrow(axis, offset, len);
                        offset += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Reverse sweep from `loss`, accumulating gradients into leaves.
    ///
    /// Repeated calls without [`Tape::reset_grads`] add up, which is how
    /// per-sample losses accumulate over a batch.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TapeError> {
        assert!(std::ptr::eq(loss.tape, self), "loss var from another tape");
        let loss_shape = self.nodes.borrow()[loss.id].value.shape().to_vec();
        if self.nodes.borrow()[loss.id].value.numel() != 1 {
            return Err(TapeError::NonScalarLoss { shape: loss_shape });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(&loss_shape));
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires {
                continue;
            }
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].requires {
                        continue;
                    }
                    check_finite("backward", &pg);
                    match &mut grads[p] {
                        Some(acc) => acc.add_scaled(&pg, 1.0),
                        slot => *slot = Some(pg),
                    }
                }
            } else {
                // Leaf: fold into the persistent accumulator.
                let mut store = self.leaf_grads.borrow_mut();
                match &mut store[i] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow()[v.id].clone()
    }

    /// Clears all accumulated leaf gradients.
    pub fn reset_grads(&self) {
        for g in self.leaf_grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Accumulated gradients of tagged leaves, as (tag, grad) pairs.
    pub fn tagged_grads(&self) -> Vec<(usize, Tensor)> {
        let nodes = self.nodes.borrow();
        let grads = self.leaf_grads.borrow();
        nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (n.tag, &grads[i]) {
                (Some(tag), Some(g)) => Some((tag, g.clone())),
                _ => None,
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands come from different tapes"
        );
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let out = self.value().add(&rhs.value());
        check_finite("add", &out);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(|g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let out = self.value().sub(&rhs.value());
        check_finite("sub", &out);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(|g| vec![g.clone(), g.scale(-1.0)]),
        )
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.mul(&b);
        check_finite("mul", &out);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(move |g| vec![g.mul(&b), g.mul(&a)]),
        )
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.div(&b);
        check_finite("div", &out);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(move |g| {
                let ga = g.div(&b);
                let gb = g.mul(&a).div(&b).div(&b).scale(-1.0);
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b);
        check_finite("matmul", &out);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(move |g| {
                let ga = g.matmul(&b.transpose2());
                let gb = a.transpose2().matmul(g);
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose2();
        self.tape
            .record(out, vec![self.id], Box::new(|g| vec![g.transpose2()]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let src_shape = self.shape();
        let out = self.value().reshape(shape);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.reshape(&src_shape)]),
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let src_shape = self.shape();
        let out = self.value().narrow(axis, start, len);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.narrow_embed(&src_shape, axis, start)]),
        )
    }

    pub fn broadcast_to(self, target: &[usize]) -> Var<'t> {
        let src_shape = self.shape();
        let out = self.value().broadcast_to(target);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.reduce_to(&src_shape)]),
        )
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        check_finite("exp", &out);
        let y = out.clone();
        self.tape
            .record(out, vec![self.id], Box::new(move |g| vec![g.mul(&y)]))
    }

    pub fn log(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::ln);
        check_finite("log", &out);
        self.tape
            .record(out, vec![self.id], Box::new(move |g| vec![g.div(&x)]))
    }

    pub fn sqrt(self) -> Var<'t> {
        let out = self.value().map(f64::sqrt);
        check_finite("sqrt", &out);
        let y = out.clone();
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.zip_map(&y, |gi, yi| gi * 0.5 / yi)]),
        )
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.zip_map(&x, |gi, xi| gi * sign0(xi))]),
        )
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn maximum(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_map(&b, f64::max);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(move |g| {
                let ga = g.zip_map(&a.zip_map(&b, |x, y| f64::from(x >= y)), |gi, m| gi * m);
                let gb = g.zip_map(&a.zip_map(&b, |x, y| f64::from(x < y)), |gi, m| gi * m);
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise minimum; on ties the gradient goes to `self`.
    pub fn minimum(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_map(&b, f64::min);
        self.tape.record(
            out,
            vec![self.id, rhs.id],
            Box::new(move |g| {
                let ga = g.zip_map(&a.zip_map(&b, |x, y| f64::from(x <= y)), |gi, m| gi * m);
                let gb = g.zip_map(&a.zip_map(&b, |x, y| f64::from(x > y)), |gi, m| gi * m);
                vec![ga, gb]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        check_finite("sigmoid", &out);
        let y = out.clone();
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.zip_map(&y, |gi, yi| gi * yi * (1.0 - yi))]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(gelu);
        check_finite("gelu", &out);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.zip_map(&x, |gi, xi| gi * gelu_grad(xi))]),
        )
    }

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let last = *x.shape().last().expect("softmax on rank-0 tensor");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        check_finite("softmax", &out);
        let y = out.clone();
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| {
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let last = *x.shape().last().expect("layer norm on rank-0 tensor");
        let n = last as f64;
        let mut out = x.clone();
        let mut rstds = Vec::with_capacity(x.numel() / last);
        for row in out.data_mut().chunks_mut(last) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        check_finite("layer_norm", &out);
        let y = out.clone();
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| {
                let mut gx = g.clone();
                for ((grow, yrow), &rstd) in gx
                    .data_mut()
                    .chunks_mut(last)
                    .zip(y.data().chunks(last))
                    .zip(&rstds)
                {
                    let mean_g: f64 = grow.iter().sum::<f64>() / n;
                    let mean_gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = rstd * (*gi - mean_g - yi * mean_gy);
                    }
                }
                vec![gx]
            }),
        )
    }

    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let src_shape = self.shape();
        let axes = axes.to_vec();
        let out = self.value().sum_axes(&axes);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.unreduce(&src_shape, &axes, 1.0)]),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let src_shape = self.shape();
        let axes = axes.to_vec();
        let count: usize = axes.iter().map(|&a| src_shape[a]).product();
        let out = self.value().mean_axes(&axes);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![g.unreduce(&src_shape, &axes, 1.0 / count as f64)]),
        )
    }

    /// Mean over the rows of a 2-D tensor (axis 0), summing each column in
    /// value-sorted order. The sort makes the result bitwise independent of
    /// row order, so pooling over tokens is exactly permutation-invariant.
    /// The gradient is the usual uniform 1/N per row.
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "mean_rows expects a 2-D tensor");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        assert!(n > 0, "mean_rows over zero rows");
        let mut out = vec![0.0; d];
        let mut col = vec![0.0; n];
        for (j, out_j) in out.iter_mut().enumerate() {
            for i in 0..n {
                col[i] = x.at(&[i, j]);
            }
            col.sort_by(f64::total_cmp);
            *out_j = col.iter().sum::<f64>() / n as f64;
        }
        let out = Tensor::new(vec![1, d], out);
        check_finite("mean_rows", &out);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    for j in 0..d {
                        gx.set(&[i, j], g.at(&[0, j]) / n as f64);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let src_shape = self.shape();
        let out = Tensor::scalar(self.value().sum_all());
        check_finite("sum_all", &out);
        self.tape.record(
            out,
            vec![self.id],
            Box::new(move |g| vec![Tensor::full(&src_shape, g.item())]),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        check_finite("scale", &out);
        self.tape
            .record(out, vec![self.id], Box::new(move |g| vec![g.scale(c)]))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        check_finite("shift", &out);
        self.tape
            .record(out, vec![self.id], Box::new(|g| vec![g.clone()]))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `x^a` for strictly positive `x`, via `exp(a * ln x)`.
    pub fn pow_scalar(self, a: f64) -> Var<'t> {
        self.log().scale(a).exp()
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let loss = x.mul(x).sum_all();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.reset_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarLoss { .. }));
    }

    #[test]
    fn softmax_of_uniform_input_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = x.softmax_last().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_of_constant_vector_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[5], 3.7));
        let y = x.layer_norm_last(1e-5).value();
        // zero variance: (x - mean) = 0 exactly, so 0 / sqrt(eps) = 0
        assert_eq!(y.data(), &[0.0; 5]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = x.mul(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 5.0);
        assert!(tape.grad(c).is_none());
    }
}

//! Dense row-major `f64` tensors.
//!
//! This is the plain value type used everywhere in the crate. Differentiable
//! computation lives in [`crate::tape`]; the functions here are the forward
//! kernels it records. Shapes are validated eagerly and violations panic with
//! messages naming both shapes involved.

use rand::Rng;

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            numel_of(&shape) == data.len(),
            "tensor shape {:?} implies {} elements but {} were given",
            shape,
            numel_of(&shape),
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform values in `[-limit, limit)` drawn from `rng`.
    pub fn rand_uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert!(
            index.len() == self.shape.len(),
            "index {:?} has wrong rank for shape {:?}",
            index,
            self.shape
        );
        let strides = strides_of(&self.shape);
        index
            .iter()
            .zip(&self.shape)
            .zip(&strides)
            .map(|((&i, &dim), &s)| {
                assert!(i < dim, "index {:?} out of bounds for shape {:?}", index, self.shape);
                i * s
            })
            .sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert!(
            numel_of(shape) == self.data.len(),
            "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
            self.shape,
            self.data.len(),
            shape,
            numel_of(shape)
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(
            self.shape == other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place `self += other * c`.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) {
        assert!(
            self.shape == other.shape,
            "accumulate on mismatched shapes {:?} vs {:?}",
            self.shape,
            other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
    }

    /// 2-D matrix product. `self` is (m,k), `rhs` is (k,n).
    ///
    /// The accumulation over k runs in increasing index order for every
    /// output cell, so results are bit-identical to a naive triple loop.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert!(
            self.rank() == 2 && rhs.rank() == 2,
            "matmul needs 2-D operands, got {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        assert!(
            k == k2,
            "matmul inner dimensions differ: {:?} vs {:?}",
            self.shape,
            rhs.shape
        );
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &rhs.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Tensor {
        assert!(
            self.rank() == 2,
            "transpose needs a 2-D tensor, got {:?}",
            self.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Concatenate along `axis`. All parts must agree on the other axes.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].rank();
        assert!(axis < rank, "concat axis {} out of range for rank {}", axis, rank);
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            let mut expect = p.shape.clone();
            assert!(p.rank() == rank, "concat rank mismatch: {:?} vs {:?}", parts[0].shape, p.shape);
            expect[axis] = 0;
            let mut base = parts[0].shape.clone();
            base[axis] = 0;
            assert!(
                expect == base,
                "concat shapes differ off-axis: {:?} vs {:?}",
                parts[0].shape,
                p.shape
            );
            out_shape[axis] += p.shape[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let span = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * span..(o + 1) * span]);
            }
        }
        Tensor {
            shape: out_shape,
            data,
        }
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(axis < self.rank(), "narrow axis {} out of range for shape {:?}", axis, self.shape);
        assert!(
            start + len <= self.shape[axis],
            "narrow {}..{} exceeds axis {} of shape {:?}",
            start,
            start + len,
            axis,
            self.shape
        );
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let src_span = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = o * src_span + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor {
            shape: out_shape,
            data,
        }
    }

    /// Scatter `self` back into a zero tensor of shape `full_shape` at the
    /// given narrow position. Adjoint of [`Tensor::narrow`].
    pub fn narrow_embed(&self, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
        let mut out = Tensor::zeros(full_shape);
        let outer: usize = full_shape[..axis].iter().product();
        let inner: usize = full_shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let dst_span = full_shape[axis] * inner;
        for o in 0..outer {
            let dst = o * dst_span + start * inner;
            let src = o * len * inner;
            out.data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        out
    }

    /// Broadcast to `target` shape, numpy-style: shapes are aligned on the
    /// trailing axes and size-1 axes repeat.
    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        assert!(
            self.rank() <= target.len(),
            "cannot broadcast {:?} to lower-rank {:?}",
            self.shape,
            target
        );
        let pad = target.len() - self.rank();
        for (i, &t) in target.iter().enumerate() {
            if i >= pad {
                let s = self.shape[i - pad];
                assert!(
                    s == t || s == 1,
                    "cannot broadcast {:?} to {:?} (axis {})",
                    self.shape,
                    target,
                    i
                );
            }
        }
        let src_strides = strides_of(&self.shape);
        let mut eff = vec![0usize; target.len()];
        for i in 0..self.rank() {
            eff[pad + i] = if self.shape[i] == 1 { 0 } else { src_strides[i] };
        }
        let mut data = Vec::with_capacity(numel_of(target));
        let mut index = vec![0usize; target.len()];
        for _ in 0..numel_of(target) {
            let src: usize = index.iter().zip(&eff).map(|(&i, &s)| i * s).sum();
            data.push(self.data[src]);
            for d in (0..target.len()).rev() {
                index[d] += 1;
                if index[d] < target[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        Tensor {
            shape: target.to_vec(),
            data,
        }
    }

    /// Sum the broadcast adjoint back to `src_shape`. Adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn reduce_to(&self, src_shape: &[usize]) -> Tensor {
        let pad = self.rank() - src_shape.len();
        let mut out = Tensor::zeros(src_shape);
        let src_strides = strides_of(src_shape);
        let mut eff = vec![0usize; self.rank()];
        for i in 0..src_shape.len() {
            eff[pad + i] = if src_shape[i] == 1 { 0 } else { src_strides[i] };
        }
        let mut index = vec![0usize; self.rank()];
        for &v in &self.data {
            let dst: usize = index.iter().zip(&eff).map(|(&i, &s)| i * s).sum();
            out.data[dst] += v;
            for d in (0..self.rank()).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        out
    }

    /// Sum over the given axes; the reduced axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let (out_shape, map) = self.reduction_map(axes);
        let mut out = Tensor::zeros(&out_shape);
        for (i, &v) in self.data.iter().enumerate() {
            out.data[map[i]] += v;
        }
        out
    }

    /// Mean over the given axes; the reduced axes are removed from the shape.
    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per input element, the flat output index of a reduction over `axes`.
    fn reduction_map(&self, axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
        for &a in axes {
            assert!(a < self.rank(), "reduce axis {} out of range for shape {:?}", a, self.shape);
        }
        let keep: Vec<usize> = (0..self.rank()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| self.shape[d]).collect();
        let out_strides = strides_of(&out_shape);
        let mut map = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; self.rank()];
        for _ in 0..self.numel() {
            let flat: usize = keep
                .iter()
                .enumerate()
                .map(|(o, &d)| index[d] * out_strides[o])
                .sum();
            map.push(flat);
            for d in (0..self.rank()).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        (out_shape, map)
    }

    /// Expand a reduced-shape adjoint back over the reduced axes.
    pub fn unreduce(&self, full_shape: &[usize], axes: &[usize], scale: f64) -> Tensor {
        let full = Tensor::zeros(full_shape);
        let (_, map) = full.reduction_map(axes);
        let mut out = full;
        for (i, &m) in map.iter().enumerate() {
            out.data[i] = self.data[m] * scale;
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(
            self.shape == other.shape,
            "comparing tensors of shapes {:?} vs {:?}",
            self.shape,
            other.shape
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

//! Dense multilinear primitives.
//!
//! [`DenseTensor`] is a plain row-major N-dimensional array used for the
//! explicit (materialized) side of every fusion identity: outer products of
//! modality vectors and the full projection tensors `W_h` and `W_t`.
//! [`CpFactorSet`] holds the rank-indexed factor matrices from which those
//! tensors are reconstructed.

use ndarray::Array2;
use rand::Rng;

use crate::error::{invalid, Result};

/// N-dimensional real tensor, row-major, last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid("tensor order must be at least 1"));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("zero extent in shape {shape:?}")));
        }
        let len = checked_numel(&shape)?;
        if len != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = checked_numel(&shape)?;
        Self::new(shape, vec![0.0; len])
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (r, c) = m.dim();
        Self {
            shape: vec![r, c],
            data: m.iter().copied().collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        Self::new(vec![v.len()], v.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// View an order-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            &[r, c] => Ok(Array2::from_shape_vec((r, c), self.data.clone())
                .expect("shape checked at construction")),
            s => Err(invalid(format!("expected an order-2 tensor, got shape {s:?}"))),
        }
    }

    /// Reorders modes so that output mode `i` is input mode `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.order();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("{axes:?} is not a permutation of 0..{n}")));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let old_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            advance(&mut idx, &new_shape);
        }
        Self::new(new_shape, data)
    }

    /// Moves the last mode to the front, e.g. `(l1, l2, d_t)` -> `(d_t, l1, l2)`.
    pub fn last_mode_first(&self) -> Self {
        let n = self.order();
        let axes: Vec<usize> = std::iter::once(n - 1).chain(0..n - 1).collect();
        self.permute(&axes).expect("rotation is a valid permutation")
    }

    /// Largest absolute entry difference relative to the largest entry of `reference`.
    pub fn max_rel_diff(&self, reference: &Self) -> f64 {
        rel_diff(&self.data, &reference.data)
    }
}

/// `max |a - b| / max(max |b|, tiny)`, the norm-wise relative error used by every
/// equivalence check in this crate.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_diff on different lengths");
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| invalid(format!("shape {shape:?} overflows usize")))
}

/// Odometer increment over a row-major index.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Rank-indexed CP factors, one stack of `rank` matrices (`out_dim x dims[m]`)
/// per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactorSet {
    rank: usize,
    out_dim: usize,
    dims: Vec<usize>,
    /// `factors[m][r]` has shape `out_dim x dims[m]`.
    factors: Vec<Vec<Array2<f64>>>,
}

impl CpFactorSet {
    pub fn new(factors: Vec<Vec<Array2<f64>>>) -> Result<Self> {
        let first = factors
            .first()
            .and_then(|stack| stack.first())
            .ok_or_else(|| invalid("factor set needs at least one modality and rank >= 1"))?;
        let rank = factors[0].len();
        let out_dim = first.nrows();
        let mut dims = Vec::with_capacity(factors.len());
        for (m, stack) in factors.iter().enumerate() {
            if stack.len() != rank {
                return Err(invalid(format!(
                    "modality {m} has {} factors, expected rank {rank}",
                    stack.len()
                )));
            }
            let d = stack[0].ncols();
            for (r, f) in stack.iter().enumerate() {
                if f.dim() != (out_dim, d) || d == 0 || out_dim == 0 {
                    return Err(invalid(format!(
                        "factor [{m}][{r}] has shape {:?}, expected ({out_dim}, {d})",
                        f.dim()
                    )));
                }
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(format!("factor [{m}][{r}] has non-finite entries")));
                }
            }
            dims.push(d);
        }
        Ok(Self {
            rank,
            out_dim,
            dims,
            factors,
        })
    }

    pub fn zeros(rank: usize, out_dim: usize, dims: &[usize]) -> Result<Self> {
        Self::from_fn(rank, out_dim, dims, |_, _, _, _| 0.0)
    }

    /// Builds a factor set entry by entry: `f(m, r, row, col)`.
    pub fn from_fn(
        rank: usize,
        out_dim: usize,
        dims: &[usize],
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        if rank == 0 || out_dim == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(invalid(format!(
                "invalid factor set geometry: rank {rank}, out_dim {out_dim}, dims {dims:?}"
            )));
        }
        let factors = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                (0..rank)
                    .map(|r| Array2::from_shape_fn((out_dim, d), |(i, j)| f(m, r, i, j)))
                    .collect()
            })
            .collect();
        Self::new(factors)
    }

    /// I.i.d. uniform entries in `[-scale, scale]`.
    pub fn random_uniform(
        rank: usize,
        out_dim: usize,
        dims: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::from_fn(rank, out_dim, dims, |_, _, _, _| {
            rng.random_range(-1.0..=1.0) * scale
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn factor(&self, m: usize, r: usize) -> &Array2<f64> {
        &self.factors[m][r]
    }

    pub fn factor_mut(&mut self, m: usize, r: usize) -> &mut Array2<f64> {
        &mut self.factors[m][r]
    }

    pub fn stack(&self, m: usize) -> &[Array2<f64>] {
        &self.factors[m]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Array2<f64>)> {
        self.factors
            .iter()
            .enumerate()
            .flat_map(|(m, s)| s.iter().enumerate().map(move |(r, f)| (m, r, f)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.factors.iter_mut().flatten()
    }

    /// Total scalar count, `rank * out_dim * sum(dims)`.
    pub fn num_params(&self) -> usize {
        self.rank * self.out_dim * self.dims.iter().sum::<usize>()
    }

    pub fn scale_modality(&mut self, m: usize, alpha: f64) {
        for f in &mut self.factors[m] {
            f.mapv_inplace(|x| x * alpha);
        }
    }

    /// Sum of all factor matrices of modality `m` over the rank index.
    pub fn rank_sum(&self, m: usize) -> Array2<f64> {
        let mut acc = Array2::zeros((self.out_dim, self.dims[m]));
        for f in &self.factors[m] {
            acc += f;
        }
        acc
    }
}

/// `H = h_1 ⊗ h_2 ⊗ ... ⊗ h_M`, shape `(d_1, ..., d_M)`.
pub fn outer_product<V: AsRef<[f64]>>(vectors: &[V]) -> Result<DenseTensor> {
    if vectors.is_empty() {
        return Err(invalid("outer product of an empty vector list"));
    }
    if let Some(m) = vectors.iter().position(|v| v.as_ref().is_empty()) {
        return Err(invalid(format!("vector {m} is empty")));
    }
    let shape: Vec<usize> = vectors.iter().map(|v| v.as_ref().len()).collect();
    checked_numel(&shape)?;
    let mut data = vectors[0].as_ref().to_vec();
    for v in &vectors[1..] {
        let v = v.as_ref();
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            next.extend(v.iter().map(|&b| a * b));
        }
        data = next;
    }
    DenseTensor::new(shape, data)
}

/// Reconstructs the full tensor of a factor set with the output mode last:
/// `T[i_1, ..., i_M, k] = sum_r prod_m factors[m][r][k, i_m]`.
pub fn cp_reconstruct(f: &CpFactorSet) -> DenseTensor {
    let mut shape = f.dims().to_vec();
    shape.push(f.out_dim());
    let mut out = DenseTensor::zeros(shape).expect("factor set geometry is valid");
    let k_dim = f.out_dim();
    for r in 0..f.rank() {
        for k in 0..k_dim {
            let rows: Vec<Vec<f64>> = (0..f.modalities())
                .map(|m| f.factor(m, r).row(k).to_vec())
                .collect();
            let slice = outer_product(&rows).expect("non-empty rows");
            // slice entry j lands at j * k_dim + k
            for (j, v) in slice.data().iter().enumerate() {
                out.data[j * k_dim + k] += v;
            }
        }
    }
    out
}

/// Entry-wise product of equally shaped matrices.
pub fn hadamard(matrices: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = matrices
        .first()
        .ok_or_else(|| invalid("hadamard of an empty list"))?;
    let mut acc = first.clone();
    for (i, m) in matrices.iter().enumerate().skip(1) {
        if m.dim() != acc.dim() {
            return Err(invalid(format!(
                "hadamard shape mismatch: matrix {i} is {:?}, expected {:?}",
                m.dim(),
                acc.dim()
            )));
        }
        acc *= m;
    }
    Ok(acc)
}

/// Contracts the trailing `arity` modes of `t` with the leading `arity` modes
/// of `w`. The result has shape `t.shape[..n-arity] ++ w.shape[arity..]`; a
/// full contraction to a scalar yields shape `[1]`.
pub fn contract_last_modes(t: &DenseTensor, w: &DenseTensor, arity: usize) -> Result<DenseTensor> {
    if arity == 0 || arity > t.order() || arity > w.order() {
        return Err(invalid(format!(
            "contraction arity {arity} invalid for orders {} and {}",
            t.order(),
            w.order()
        )));
    }
    let t_keep = &t.shape()[..t.order() - arity];
    let t_tail = &t.shape()[t.order() - arity..];
    let w_head = &w.shape()[..arity];
    let w_keep = &w.shape()[arity..];
    if t_tail != w_head {
        return Err(invalid(format!(
            "mode mismatch: trailing modes {t_tail:?} vs leading modes {w_head:?}"
        )));
    }
    let rows: usize = t_keep.iter().product();
    let inner: usize = t_tail.iter().product();
    let cols: usize = w_keep.iter().product();
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        let t_row = &t.data()[i * inner..(i + 1) * inner];
        let out_row = &mut data[i * cols..(i + 1) * cols];
        for (k, &a) in t_row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let w_row = &w.data()[k * cols..(k + 1) * cols];
            for (o, &b) in out_row.iter_mut().zip(w_row) {
                *o += a * b;
            }
        }
    }
    let mut shape: Vec<usize> = t_keep.iter().chain(w_keep).copied().collect();
    if shape.is_empty() {
        shape.push(1);
    }
    DenseTensor::new(shape, data)
}

//! Outer-product multimodal fusion in three forms.
//!
//! * `SF-OP` ([`sequence_fusion_oracle`]): materializes the outer product of
//!   every cross-modal token tuple, projects it with an explicit `W_h`, then
//!   projects the resulting `(l_1 x ... x l_M x d_h)` tensor with an explicit
//!   `W_t`.
//! * `SF-VF` ([`sequence_fusion_vf`]): low-rank vector fusion on every token
//!   tuple, followed by the explicit `W_t` projection.
//! * `SF` ([`sequence_fusion_lowrank`]): both projections CP-factorized; each
//!   `(r_t, r_h)` term is a Hadamard product over modalities of
//!   `w_t[m][r_t] . h_m . w_h[m][r_h]^T`, and no cross-modal tensor is ever
//!   formed.
//!
//! With [`Ordering::Exact`] the low-rank paths equal the oracle on
//! `cp_reconstruct`-ed weights up to rounding. [`Ordering::Literal`]
//! moves the rank sums inside the Hadamard product; it is kept for ablation
//! and generally disagrees with the oracle once a rank exceeds one.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{contract_last_modes, outer_product, CpFactorSet, DenseTensor};

/// Default ceiling on materialized `H_t` entries for the explicit paths.
pub const DEFAULT_ORACLE_LIMIT: u128 = 100_000_000;

/// Where the rank sums sit relative to the cross-modal Hadamard product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Sums outside the Hadamard product; identical to the explicit oracle.
    #[default]
    Exact,
    /// Sums inside the Hadamard product, as the fusion formula is usually
    /// written. Not equal to the oracle for rank > 1.
    #[serde(rename = "paper-literal")]
    Literal,
}

impl std::str::FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "paper-literal" => Ok(Self::Literal),
            other => Err(invalid(format!("unknown ordering {other:?}"))),
        }
    }
}

/// Serial or rayon-parallel kernel execution. Both produce bit-identical
/// results: partial sums are always reduced in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Serial,
    Parallel,
}

/// One sample's per-modality sequences, entry `m` of shape `l_m x d_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    sequences: Vec<Array2<f64>>,
}

impl ModalityBatch {
    pub fn new(sequences: Vec<Array2<f64>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(invalid("a modality batch needs at least one modality"));
        }
        for (m, s) in sequences.iter().enumerate() {
            if s.nrows() == 0 || s.ncols() == 0 {
                return Err(invalid(format!("modality {m} has an empty extent {:?}", s.dim())));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("modality {m} has non-finite entries")));
            }
        }
        Ok(Self { sequences })
    }

    pub fn modalities(&self) -> usize {
        self.sequences.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.nrows()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.ncols()).collect()
    }

    pub fn sequence(&self, m: usize) -> &Array2<f64> {
        &self.sequences[m]
    }

    pub fn sequences(&self) -> &[Array2<f64>] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<Array2<f64>> {
        self.sequences
    }

    /// Token `i` of every modality, one vector per modality.
    pub fn tuple(&self, index: &[usize]) -> Vec<Array1<f64>> {
        self.sequences
            .iter()
            .zip(index)
            .map(|(s, &i)| s.row(i).to_owned())
            .collect()
    }

    pub fn scale_modality(&mut self, m: usize, alpha: f64) {
        self.sequences[m].mapv_inplace(|x| x * alpha);
    }
}

/// Geometry and ranks of one fusion problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dims: Vec<usize>,
    pub lengths: Vec<usize>,
    pub d_h: usize,
    pub d_t: usize,
    pub r_h: usize,
    pub r_t: usize,
    #[serde(default)]
    pub ordering: Ordering,
}

impl FusionConfig {
    /// Uniform config with the default rank 8 for both projections.
    pub fn uniform(modalities: usize, length: usize, dim: usize, d_h: usize, d_t: usize) -> Self {
        Self {
            dims: vec![dim; modalities],
            lengths: vec![length; modalities],
            d_h,
            d_t,
            r_h: 8,
            r_t: 8,
            ordering: Ordering::Exact,
        }
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.lengths.len() {
            return Err(Error::InvalidConfiguration(format!(
                "dims {:?} and lengths {:?} must be non-empty and of equal length",
                self.dims, self.lengths
            )));
        }
        let all = self
            .dims
            .iter()
            .chain(&self.lengths)
            .chain([&self.d_h, &self.d_t, &self.r_h, &self.r_t]);
        if all.into_iter().any(|&x| x == 0) {
            return Err(Error::InvalidConfiguration(format!(
                "all extents and ranks must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_vector_inputs(h: &[Array1<f64>], dims: &[usize], what: &str) -> Result<()> {
    if h.len() != dims.len() {
        return Err(invalid(format!(
            "{what}: {} input vectors for {} modalities",
            h.len(),
            dims.len()
        )));
    }
    for (m, (v, &d)) in h.iter().zip(dims).enumerate() {
        if v.len() != d {
            return Err(invalid(format!(
                "{what}: modality {m} has dim {}, expected {d}",
                v.len()
            )));
        }
    }
    Ok(())
}

/// `W_h . (h_1 ⊗ ... ⊗ h_M) + b` with the outer product materialized.
/// `w_h` has shape `(d_1, ..., d_M, d_h)`.
pub fn vector_fusion_oracle(h: &[Array1<f64>], w_h: &DenseTensor, b: &[f64]) -> Result<Array1<f64>> {
    let m = h.len();
    if m == 0 || w_h.order() != m + 1 {
        return Err(invalid(format!(
            "W_h of order {} does not match {m} modalities",
            w_h.order()
        )));
    }
    check_vector_inputs(h, &w_h.shape()[..m], "vector_fusion_oracle")?;
    let d_h = w_h.shape()[m];
    if b.len() != d_h {
        return Err(invalid(format!("bias has length {}, expected {d_h}", b.len())));
    }
    let slices: Vec<&[f64]> = h
        .iter()
        .map(|v| v.as_slice().expect("owned vectors are contiguous"))
        .collect();
    let outer = outer_product(&slices)?;
    let projected = contract_last_modes(&outer, w_h, m)?;
    Ok(Array1::from_iter(projected.data().iter().zip(b).map(|(x, y)| x + y)))
}

/// Low-rank vector fusion. `f` has `out_dim = d_h` and per-modality dims `d_m`.
pub fn vector_fusion_lowrank(
    h: &[Array1<f64>],
    f: &CpFactorSet,
    b: &[f64],
    ordering: Ordering,
) -> Result<Array1<f64>> {
    check_vector_inputs(h, f.dims(), "vector_fusion_lowrank")?;
    if b.len() != f.out_dim() {
        return Err(invalid(format!(
            "bias has length {}, expected {}",
            b.len(),
            f.out_dim()
        )));
    }
    let mut out = vector_fusion_lowrank_nobias(h, f, ordering);
    out += &Array1::from_vec(b.to_vec());
    Ok(out)
}

/// Unchecked, bias-free core of [`vector_fusion_lowrank`].
pub(crate) fn vector_fusion_lowrank_nobias(
    h: &[Array1<f64>],
    f: &CpFactorSet,
    ordering: Ordering,
) -> Array1<f64> {
    match ordering {
        Ordering::Exact => {
            let mut acc: Option<Array1<f64>> = None;
            for r in 0..f.rank() {
                let mut term = f.factor(0, r).dot(&h[0]);
                for (m, hm) in h.iter().enumerate().skip(1) {
                    term *= &f.factor(m, r).dot(hm);
                }
                acc = Some(match acc {
                    None => term,
                    Some(a) => a + term,
                });
            }
            acc.expect("rank >= 1")
        }
        Ordering::Literal => {
            let mut out: Option<Array1<f64>> = None;
            for (m, hm) in h.iter().enumerate() {
                let mut sum = f.factor(m, 0).dot(hm);
                for r in 1..f.rank() {
                    sum += &f.factor(m, r).dot(hm);
                }
                out = Some(match out {
                    None => sum,
                    Some(o) => o * sum,
                });
            }
            out.expect("at least one modality")
        }
    }
}

fn check_batch(h: &ModalityBatch, dims: &[usize], lengths: Option<&[usize]>, what: &str) -> Result<()> {
    if h.modalities() != dims.len() {
        return Err(invalid(format!(
            "{what}: batch has {} modalities, weights expect {}",
            h.modalities(),
            dims.len()
        )));
    }
    if h.dims() != dims {
        return Err(invalid(format!(
            "{what}: feature dims {:?} do not match weights {dims:?}",
            h.dims()
        )));
    }
    if let Some(lengths) = lengths {
        if h.lengths() != lengths {
            return Err(invalid(format!(
                "{what}: sequence lengths {:?} do not match weights {lengths:?}",
                h.lengths()
            )));
        }
    }
    Ok(())
}

fn check_limit(what: &'static str, lengths: &[usize], d_h: usize, limit: u128) -> Result<usize> {
    let requested = lengths.iter().fold(d_h as u128, |acc, &l| acc * l as u128);
    if requested > limit {
        return Err(Error::ResourceLimit {
            what,
            requested,
            limit,
        });
    }
    Ok(requested as usize)
}

/// Fills `H_t` (`l_1 x ... x l_M x d_h`) by applying `fuse` to every token tuple.
fn materialize_tuples<F>(h: &ModalityBatch, d_h: usize, exec: Exec, fuse: F) -> Result<DenseTensor>
where
    F: Fn(&[Array1<f64>]) -> Result<Array1<f64>> + Sync,
{
    let lengths = h.lengths();
    let tuples: usize = lengths.iter().product();
    let fuse_one = |t: usize| -> Result<Array1<f64>> {
        let mut idx = vec![0usize; lengths.len()];
        let mut rem = t;
        for k in (0..lengths.len()).rev() {
            idx[k] = rem % lengths[k];
            rem /= lengths[k];
        }
        fuse(&h.tuple(&idx))
    };
    let rows: Vec<Array1<f64>> = match exec {
        Exec::Serial => (0..tuples).map(fuse_one).collect::<Result<_>>()?,
        Exec::Parallel => (0..tuples).into_par_iter().map(fuse_one).collect::<Result<_>>()?,
    };
    let mut data = Vec::with_capacity(tuples * d_h);
    for r in rows {
        data.extend(r.iter().copied());
    }
    let mut shape = lengths;
    shape.push(d_h);
    DenseTensor::new(shape, data)
}

fn check_w_t(w_t: &DenseTensor, h: &ModalityBatch) -> Result<usize> {
    let m = h.modalities();
    if w_t.order() != m + 1 || w_t.shape()[1..] != h.lengths()[..] {
        return Err(invalid(format!(
            "W_t shape {:?} does not match (d_t, {:?})",
            w_t.shape(),
            h.lengths()
        )));
    }
    Ok(w_t.shape()[0])
}

/// The explicit SF-OP path with the default materialization ceiling.
pub fn sequence_fusion_oracle(
    h: &ModalityBatch,
    w_h: &DenseTensor,
    w_t: &DenseTensor,
) -> Result<Array2<f64>> {
    sequence_fusion_oracle_with(h, w_h, w_t, DEFAULT_ORACLE_LIMIT, Exec::Serial)
}

/// SF-OP: `W_t . ((⊗_m h_m) . W_h)`, bias-free, everything materialized.
/// `w_h` is `(d_1, ..., d_M, d_h)` and `w_t` is `(d_t, l_1, ..., l_M)`.
pub fn sequence_fusion_oracle_with(
    h: &ModalityBatch,
    w_h: &DenseTensor,
    w_t: &DenseTensor,
    limit: u128,
    exec: Exec,
) -> Result<Array2<f64>> {
    let m = h.modalities();
    if w_h.order() != m + 1 {
        return Err(invalid(format!(
            "W_h of order {} does not match {m} modalities",
            w_h.order()
        )));
    }
    check_batch(h, &w_h.shape()[..m], None, "sequence_fusion_oracle")?;
    let d_t = check_w_t(w_t, h)?;
    let d_h = w_h.shape()[m];
    check_limit("sequence_fusion_oracle H_t", &h.lengths(), d_h, limit)?;
    let zero_bias = vec![0.0; d_h];
    let h_t = materialize_tuples(h, d_h, exec, |tuple| {
        vector_fusion_oracle(tuple, w_h, &zero_bias)
    })?;
    let out = contract_last_modes(w_t, &h_t, m)?;
    Ok(Array2::from_shape_vec((d_t, d_h), out.into_data()).expect("contraction shape"))
}

/// SF-VF with the default materialization ceiling.
pub fn sequence_fusion_vf(
    h: &ModalityBatch,
    f_h: &CpFactorSet,
    w_t: &DenseTensor,
    ordering: Ordering,
) -> Result<Array2<f64>> {
    sequence_fusion_vf_with(h, f_h, w_t, ordering, DEFAULT_ORACLE_LIMIT, Exec::Serial)
}

/// SF-VF: low-rank vector fusion over all token tuples, explicit `W_t`.
pub fn sequence_fusion_vf_with(
    h: &ModalityBatch,
    f_h: &CpFactorSet,
    w_t: &DenseTensor,
    ordering: Ordering,
    limit: u128,
    exec: Exec,
) -> Result<Array2<f64>> {
    check_batch(h, f_h.dims(), None, "sequence_fusion_vf")?;
    let d_t = check_w_t(w_t, h)?;
    let d_h = f_h.out_dim();
    check_limit("sequence_fusion_vf H_t", &h.lengths(), d_h, limit)?;
    let h_t = materialize_tuples(h, d_h, exec, |tuple| {
        Ok(vector_fusion_lowrank_nobias(tuple, f_h, ordering))
    })?;
    let out = contract_last_modes(w_t, &h_t, h.modalities())?;
    Ok(Array2::from_shape_vec((d_t, d_h), out.into_data()).expect("contraction shape"))
}

/// SF: fully low-rank sequence fusion, serial.
pub fn sequence_fusion_lowrank(
    h: &ModalityBatch,
    f_h: &CpFactorSet,
    f_t: &CpFactorSet,
    ordering: Ordering,
) -> Result<Array2<f64>> {
    sequence_fusion_lowrank_with(h, f_h, f_t, ordering, Exec::Serial)
}

pub fn sequence_fusion_lowrank_with(
    h: &ModalityBatch,
    f_h: &CpFactorSet,
    f_t: &CpFactorSet,
    ordering: Ordering,
    exec: Exec,
) -> Result<Array2<f64>> {
    check_lowrank(h, f_h, f_t)?;
    Ok(lowrank_forward(h.sequences(), f_h, f_t, ordering, exec).output)
}

fn check_lowrank(h: &ModalityBatch, f_h: &CpFactorSet, f_t: &CpFactorSet) -> Result<()> {
    check_batch(h, f_h.dims(), Some(f_t.dims()), "sequence_fusion_lowrank")
}

/// Per-modality intermediates of the low-rank forward pass, kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct LowRankCache {
    /// `proj[m][r_t] = w_t[m][r_t] . h_m`, shape `d_t x d_m`.
    pub proj: Vec<Vec<Array2<f64>>>,
    /// `terms[m][r_t]` is `d_t x (R_h * d_h)`; column block `r_h` holds
    /// `w_t[m][r_t] . h_m . w_h[m][r_h]^T`.
    pub terms: Vec<Vec<Array2<f64>>>,
    pub output: Array2<f64>,
}

/// `R_h*d_h x d_m` vertical stack of modality `m`'s `W_h` factors.
pub(crate) fn stacked_factors(f: &CpFactorSet, m: usize) -> Array2<f64> {
    let views: Vec<_> = f.stack(m).iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("factors of one modality share a shape")
}

pub(crate) fn lowrank_forward(
    h: &[Array2<f64>],
    f_h: &CpFactorSet,
    f_t: &CpFactorSet,
    ordering: Ordering,
    exec: Exec,
) -> LowRankCache {
    let (r_t, r_h) = (f_t.rank(), f_h.rank());
    let (d_t, d_h) = (f_t.out_dim(), f_h.out_dim());
    let mut proj = Vec::with_capacity(h.len());
    let mut terms = Vec::with_capacity(h.len());
    for (m, hm) in h.iter().enumerate() {
        let stacked_t = stacked_factors(f_h, m).reversed_axes();
        let p: Vec<Array2<f64>> = f_t.stack(m).iter().map(|w| w.dot(hm)).collect();
        let q: Vec<Array2<f64>> = p.iter().map(|pm| pm.dot(&stacked_t)).collect();
        proj.push(p);
        terms.push(q);
    }
    let block = |a: &Array2<f64>, rh: usize| a.slice(s![.., rh * d_h..(rh + 1) * d_h]).to_owned();
    let output = match ordering {
        Ordering::Exact => {
            // partial[rt] = sum_rh prod_m terms, reduced in rt order
            let partial = |rt: usize| -> Array2<f64> {
                let mut acc: Option<Array2<f64>> = None;
                for rh in 0..r_h {
                    let mut t = block(&terms[0][rt], rh);
                    for tm in &terms[1..] {
                        t *= &tm[rt].slice(s![.., rh * d_h..(rh + 1) * d_h]);
                    }
                    acc = Some(match acc {
                        None => t,
                        Some(a) => a + t,
                    });
                }
                acc.expect("R_h >= 1")
            };
            let partials: Vec<Array2<f64>> = match exec {
                Exec::Serial => (0..r_t).map(partial).collect(),
                Exec::Parallel => (0..r_t).into_par_iter().map(partial).collect(),
            };
            let mut it = partials.into_iter();
            let first = it.next().expect("R_t >= 1");
            it.fold(first, |a, p| a + p)
        }
        Ordering::Literal => {
            let mut out: Option<Array2<f64>> = None;
            for tm in &terms {
                let mut sum: Option<Array2<f64>> = None;
                for q in tm.iter().take(r_t) {
                    for rh in 0..r_h {
                        let b = block(q, rh);
                        sum = Some(match sum {
                            None => b,
                            Some(s) => s + b,
                        });
                    }
                }
                let sum = sum.expect("ranks >= 1");
                out = Some(match out {
                    None => sum,
                    Some(o) => o * sum,
                });
            }
            out.unwrap_or_else(|| Array2::zeros((d_t, d_h)))
        }
    };
    LowRankCache {
        proj,
        terms,
        output,
    }
}

/// Low-rank sequence fusion layer: factor sets, optional output bias, ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFusion {
    pub f_h: CpFactorSet,
    pub f_t: CpFactorSet,
    /// `d_t x d_h`, added to the fused output when present.
    pub bias: Option<Array2<f64>>,
    pub ordering: Ordering,
}

impl SequenceFusion {
    pub fn new(f_h: CpFactorSet, f_t: CpFactorSet) -> Result<Self> {
        if f_h.modalities() != f_t.modalities() {
            return Err(invalid(format!(
                "W_h factors cover {} modalities, W_t factors {}",
                f_h.modalities(),
                f_t.modalities()
            )));
        }
        Ok(Self {
            f_h,
            f_t,
            bias: None,
            ordering: Ordering::Exact,
        })
    }

    pub fn with_bias(mut self, bias: Array2<f64>) -> Result<Self> {
        if bias.dim() != (self.f_t.out_dim(), self.f_h.out_dim()) {
            return Err(invalid(format!(
                "bias shape {:?}, expected ({}, {})",
                bias.dim(),
                self.f_t.out_dim(),
                self.f_h.out_dim()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn forward(&self, h: &ModalityBatch) -> Result<Array2<f64>> {
        let mut y = sequence_fusion_lowrank(h, &self.f_h, &self.f_t, self.ordering)?;
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }
}

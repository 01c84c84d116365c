//! Analytic gradients of the adapter and a central-difference oracle.

use ndarray::{s, Array1, Array2, Axis};

use crate::adapter::{forward_cached, head_forward, ResidualPolicy, WanderConfig, WanderParams};
use crate::error::{invalid, Result};
use crate::fusion::{stacked_factors, ModalityBatch, Ordering};

use super::Loss;

/// One gradient array per parameter array, shape-matched to [`WanderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(pub WanderParams);

impl GradientBundle {
    pub fn zeros_like(p: &WanderParams) -> Self {
        let mut g = p.clone();
        for s in g.slices_mut() {
            s.fill(0.0);
        }
        Self(g)
    }

    pub fn params(&self) -> &WanderParams {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.0
            .named_slices()
            .iter()
            .all(|(_, s)| s.iter().all(|&x| x == 0.0))
    }

    /// `self += other`, slice by slice in checkpoint order.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (dst, (_, src)) in self.0.slices_mut().into_iter().zip(other.0.named_slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.0.slices_mut() {
            s.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Norm-wise relative error against `reference` over every parameter at
    /// once: `max|a - b| / max|b|` (absolute error where `b` is all zero).
    /// A per-array ratio would be dominated by finite-difference rounding on
    /// arrays whose gradient is nearly zero.
    pub fn max_rel_error(&self, reference: &GradientBundle) -> f64 {
        let flat = |g: &GradientBundle| -> Vec<f64> {
            g.0.named_slices().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
        };
        crate::tensor::rel_diff(&flat(self), &flat(reference))
    }
}

/// Gradients of `<upstream, wander_forward(h)>` with respect to every
/// adapter parameter. Head gradients are zero.
pub fn backward(
    h: &ModalityBatch,
    p: &WanderParams,
    cfg: &WanderConfig,
    upstream: &Array2<f64>,
) -> Result<GradientBundle> {
    let (d_t, d_h) = (cfg.fusion.d_t, cfg.fusion.d_h);
    if upstream.dim() != (d_t, d_h) {
        return Err(invalid(format!(
            "upstream gradient is {:?}, expected ({d_t}, {d_h})",
            upstream.dim()
        )));
    }
    if upstream.iter().any(|x| !x.is_finite()) {
        return Err(invalid("upstream gradient has non-finite entries"));
    }
    let cache = forward_cached(h, p, cfg)?;
    let mut grads = GradientBundle::zeros_like(p);
    backward_from_cache(h, p, cfg, &cache, upstream, &mut grads.0);
    Ok(grads)
}

pub(crate) fn backward_from_cache(
    h: &ModalityBatch,
    p: &WanderParams,
    cfg: &WanderConfig,
    cache: &crate::adapter::ForwardCache,
    g: &Array2<f64>,
    out: &mut WanderParams,
) {
    let f = &cfg.fusion;
    let (r_t, r_h, d_h) = (f.r_t, f.r_h, f.d_h);
    let n_mod = cfg.modalities();
    let terms = &cache.fusion.terms;
    let block = |a: &Array2<f64>, rh: usize| a.slice(s![.., rh * d_h..(rh + 1) * d_h]).to_owned();

    // d_terms[m][rt]: gradient w.r.t. the d_t x (R_h d_h) term matrix
    let mut d_terms: Vec<Vec<Array2<f64>>> = (0..n_mod)
        .map(|m| (0..r_t).map(|rt| Array2::zeros(terms[m][rt].dim())).collect())
        .collect();
    match f.ordering {
        Ordering::Exact => {
            for rt in 0..r_t {
                for rh in 0..r_h {
                    let qs: Vec<Array2<f64>> = (0..n_mod).map(|m| block(&terms[m][rt], rh)).collect();
                    for (m, others) in leave_one_out_products(&qs, g).into_iter().enumerate() {
                        d_terms[m][rt]
                            .slice_mut(s![.., rh * d_h..(rh + 1) * d_h])
                            .assign(&others);
                    }
                }
            }
        }
        Ordering::Literal => {
            let sums: Vec<Array2<f64>> = (0..n_mod)
                .map(|m| {
                    let mut acc = Array2::zeros(g.dim());
                    for q in &terms[m] {
                        for rh in 0..r_h {
                            acc += &q.slice(s![.., rh * d_h..(rh + 1) * d_h]);
                        }
                    }
                    acc
                })
                .collect();
            for (m, others) in leave_one_out_products(&sums, g).into_iter().enumerate() {
                for rt in 0..r_t {
                    for rh in 0..r_h {
                        d_terms[m][rt]
                            .slice_mut(s![.., rh * d_h..(rh + 1) * d_h])
                            .assign(&others);
                    }
                }
            }
        }
    }

    let mut dz: Vec<Array2<f64>> = cache.z.iter().map(|z| Array2::zeros(z.dim())).collect();
    for m in 0..n_mod {
        let stacked = stacked_factors(&p.f_h, m); // R_h d_h x d
        let mut d_stacked = Array2::<f64>::zeros(stacked.dim());
        for rt in 0..r_t {
            let dq = &d_terms[m][rt];
            // terms = proj . stacked^T
            let d_proj = dq.dot(&stacked);
            d_stacked += &dq.t().dot(&cache.fusion.proj[m][rt]);
            // proj = w_t . z
            let w_t = p.f_t.factor(m, rt);
            *out.f_t.factor_mut(m, rt) += &d_proj.dot(&cache.z[m].t());
            dz[m] += &w_t.t().dot(&d_proj);
        }
        for rh in 0..r_h {
            *out.f_h.factor_mut(m, rh) += &d_stacked.slice(s![rh * d_h..(rh + 1) * d_h, ..]);
        }
    }

    out.fusion_bias += g;
    let d_t = f.d_t;
    match cfg.residual_policy {
        ResidualPolicy::None => {}
        ResidualPolicy::ReferenceModality => {
            let mut top = dz[cfg.reference_modality].slice_mut(s![..d_t, ..]);
            top += g;
        }
        ResidualPolicy::MeanOfModalities => {
            let share = g / n_mod as f64;
            for d in dz.iter_mut() {
                let mut top = d.slice_mut(s![..d_t, ..]);
                top += &share;
            }
        }
    }

    for m in 0..n_mod {
        let act = cfg.nonlinearity;
        let da = &dz[m] * &cache.pre[m].mapv(|x| act.derivative(x));
        out.down[m] += &h.sequence(m).t().dot(&da);
        out.down_bias[m] += &da.sum_axis(Axis(0));
    }
}

/// For each `m`, `g ∘ prod_{m' != m} xs[m']`, via prefix and suffix products.
fn leave_one_out_products(xs: &[Array2<f64>], g: &Array2<f64>) -> Vec<Array2<f64>> {
    let n = xs.len();
    let mut prefix = Vec::with_capacity(n);
    let mut acc = g.clone();
    for x in xs {
        prefix.push(acc.clone());
        acc *= x;
    }
    let mut out = vec![Array2::zeros(g.dim()); n];
    let mut suffix: Option<Array2<f64>> = None;
    for m in (0..n).rev() {
        out[m] = match &suffix {
            None => prefix[m].clone(),
            Some(sfx) => &prefix[m] * sfx,
        };
        suffix = Some(match suffix {
            None => xs[m].clone(),
            Some(sfx) => sfx * &xs[m],
        });
    }
    out
}

/// Per-sample loss and its derivative w.r.t. the logits.
pub(crate) fn loss_and_dlogits(loss: Loss, logits: &Array1<f64>, label: f64) -> (f64, Array1<f64>) {
    match loss {
        Loss::CrossEntropy => {
            let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exp = logits.mapv(|x| (x - max).exp());
            let z = exp.sum();
            let class = label as usize;
            let loss = z.ln() + max - logits[class];
            let mut d = exp / z;
            d[class] -= 1.0;
            (loss, d)
        }
        Loss::Mse => {
            let diff = logits[0] - label;
            let mut d = Array1::zeros(logits.len());
            d[0] = diff;
            (0.5 * diff * diff, d)
        }
    }
}

/// Loss, logits and full gradient (adapter and head) for one labelled sample.
pub fn sample_loss_and_grad(
    h: &ModalityBatch,
    label: f64,
    p: &WanderParams,
    cfg: &WanderConfig,
    loss: Loss,
) -> Result<(f64, Array1<f64>, GradientBundle)> {
    let cache = forward_cached(h, p, cfg)?;
    let logits = head_forward(&cache.output, p)?;
    let (l, dlogits) = loss_and_dlogits(loss, &logits, label);
    let mut grads = GradientBundle::zeros_like(p);
    let flat: Array1<f64> = cache.output.iter().copied().collect();
    let gp = &mut grads.0;
    gp.head
        .indexed_iter_mut()
        .for_each(|((i, j), x)| *x = flat[i] * dlogits[j]);
    gp.head_bias.assign(&dlogits);
    let upstream = p
        .head
        .dot(&dlogits)
        .into_shape_with_order(cache.output.dim())
        .expect("head rows match fused entries");
    backward_from_cache(h, p, cfg, &cache, &upstream, gp);
    Ok((l, logits, grads))
}

/// Loss value only, for finite differences and evaluation.
pub fn sample_loss(h: &ModalityBatch, label: f64, p: &WanderParams, cfg: &WanderConfig, loss: Loss) -> Result<f64> {
    let logits = crate::adapter::logits(h, p, cfg)?;
    Ok(loss_and_dlogits(loss, &logits, label).0)
}

/// Central-difference estimate of `d loss / d p` for every scalar parameter.
pub fn finite_difference_grad(
    loss_fn: impl Fn(&WanderParams) -> f64,
    p: &WanderParams,
    step: f64,
) -> Result<GradientBundle> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = p.clone();
    let mut grads = GradientBundle::zeros_like(p);
    let lens: Vec<usize> = p.named_slices().iter().map(|(_, s)| s.len()).collect();
    for (si, &len) in lens.iter().enumerate() {
        for ei in 0..len {
            let orig = probe.slices_mut()[si][ei];
            probe.slices_mut()[si][ei] = orig + step;
            let up = loss_fn(&probe);
            probe.slices_mut()[si][ei] = orig - step;
            let down = loss_fn(&probe);
            probe.slices_mut()[si][ei] = orig;
            grads.0.slices_mut()[si][ei] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

//! Gradients, optimizers and the frozen-backbone training loop.
//!
//! Only the adapter and the head are trained. The backbone turns raw
//! dataset samples into features once per run and its weights are compared
//! byte-for-byte before and after.

mod backbone;
mod grad;
mod optim;

use std::time::Instant;

use ndarray::{s, Array1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{logits, WanderConfig, WanderParams};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::fusion::ModalityBatch;

pub use backbone::{FrozenBackbone, DEFAULT_GAIN};
pub use grad::{backward, finite_difference_grad, sample_loss, sample_loss_and_grad, GradientBundle};
pub use optim::{step_decay, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Softmax cross-entropy over `n_classes` logits.
    #[default]
    CrossEntropy,
    /// `(logit_0 - y)^2 / 2`; needs a single-output head.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: Loss,
    /// Epochs between learning-rate decays; 0 keeps the rate constant.
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Share of samples held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            loss: Loss::CrossEntropy,
            lr_step: 15,
            lr_gamma: 0.5,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so a run can be checked for leaving parameters alone.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfiguration(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad(format!("lr_gamma must be positive, got {}", self.lr_gamma));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Low-rank sequence fusion over whole sequences.
    Sequence,
    /// Low-rank vector fusion over the first token of each modality.
    FirstTokenVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub trainable_params: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    /// Mean training loss per epoch, measured before each step.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch from the same pre-step logits.
    pub epoch_accuracy: Vec<Option<f64>>,
    pub init_holdout_accuracy: Option<f64>,
    pub final_train_accuracy: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub holdout_loss: Option<f64>,
    pub params_changed: bool,
    pub backbone_unchanged: bool,
    pub train_config: TrainConfig,
    pub wander_config: WanderConfig,
    pub wall_time_ms: Option<f64>,
}

impl TrainReport {
    pub fn redact_timings(&mut self) {
        self.wall_time_ms = None;
    }
}

fn predict_correct(loss: Loss, logits: &Array1<f64>, label: f64, n_classes: Option<usize>) -> Option<bool> {
    let k = n_classes?;
    let pred = match loss {
        Loss::CrossEntropy => logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0,
        Loss::Mse => logits[0].round().clamp(0.0, (k - 1) as f64) as usize,
    };
    Some(pred as f64 == label)
}

/// Mean loss and accuracy of `p` on `(features, labels)`.
pub fn evaluate(
    features: &[ModalityBatch],
    labels: &[f64],
    p: &WanderParams,
    cfg: &WanderConfig,
    loss: Loss,
    n_classes: Option<usize>,
) -> Result<(f64, Option<f64>)> {
    let per: Vec<(f64, Option<bool>)> = features
        .par_iter()
        .zip(labels.par_iter())
        .map(|(h, &y)| {
            let z = logits(h, p, cfg)?;
            let l = grad::loss_and_dlogits(loss, &z, y).0;
            Ok((l, predict_correct(loss, &z, y, n_classes)))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = per.iter().map(|x| x.0).sum::<f64>() / n;
    let acc = n_classes.map(|_| per.iter().filter(|x| x.1 == Some(true)).count() as f64 / n);
    Ok((mean, acc))
}

fn check_labels(ds: &Dataset, cfg: &WanderConfig, loss: Loss) -> Result<()> {
    match (loss, ds.n_classes()) {
        (Loss::CrossEntropy, Some(k)) if k == cfg.n_classes => Ok(()),
        (Loss::CrossEntropy, k) => Err(Error::InvalidConfiguration(format!(
            "cross-entropy head has {} classes, dataset has {k:?}",
            cfg.n_classes
        ))),
        (Loss::Mse, _) if cfg.n_classes == 1 => Ok(()),
        (Loss::Mse, _) => Err(Error::InvalidConfiguration(format!(
            "mse needs a single-output head, got n_classes = {}",
            cfg.n_classes
        ))),
    }
}

/// Deterministic split: a seeded permutation, the first `holdout` indices held out.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let hold = ((n as f64 * fraction).round() as usize).min(n - 1);
    let train = idx.split_off(hold);
    (train, idx)
}

struct Run<'a> {
    variant: Variant,
    features: Vec<ModalityBatch>,
    labels: &'a [f64],
    n_classes: Option<usize>,
    frozen: Vec<bool>,
}

fn run(
    r: Run<'_>,
    p: &mut WanderParams,
    cfg: &WanderConfig,
    tcfg: &TrainConfig,
    backbone: &FrozenBackbone,
    backbone_before: &[u8],
    started: Instant,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let (mut train_idx, hold_idx) = split(r.features.len(), tcfg.holdout_fraction, &mut rng);
    let pick = |idx: &[usize]| -> (Vec<ModalityBatch>, Vec<f64>) {
        (
            idx.iter().map(|&i| r.features[i].clone()).collect(),
            idx.iter().map(|&i| r.labels[i]).collect(),
        )
    };
    let (hold_x, hold_y) = pick(&hold_idx);
    let eval_hold = |p: &WanderParams| -> Result<(Option<f64>, Option<f64>)> {
        if hold_x.is_empty() {
            return Ok((None, None));
        }
        let (l, a) = evaluate(&hold_x, &hold_y, p, cfg, tcfg.loss, r.n_classes)?;
        Ok((Some(l), a))
    };
    let init_holdout_accuracy = eval_hold(p)?.1;
    let p0 = p.clone();
    let mut opt = Optimizer::new(tcfg.optimizer, p);
    let mut epoch_loss = Vec::with_capacity(tcfg.epochs);
    let mut epoch_accuracy = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        train_idx.shuffle(&mut rng);
        let lr = step_decay(tcfg.lr, tcfg.lr_gamma, tcfg.lr_step, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train_idx.chunks(tcfg.batch_size) {
            let per: Vec<(f64, Array1<f64>, GradientBundle)> = batch
                .par_iter()
                .map(|&i| sample_loss_and_grad(&r.features[i], r.labels[i], p, cfg, tcfg.loss))
                .collect::<Result<_>>()?;
            let mut total = GradientBundle::zeros_like(p);
            let mut batch_loss = 0.0;
            for ((l, z, g), &i) in per.iter().zip(batch) {
                batch_loss += l;
                total.accumulate(g);
                if predict_correct(tcfg.loss, z, r.labels[i], r.n_classes) == Some(true) {
                    correct += 1;
                }
            }
            total.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            loss_sum += batch_loss;
            opt.step(p, &total, lr, &r.frozen);
            step += 1;
        }
        let n = train_idx.len() as f64;
        epoch_loss.push(loss_sum / n);
        epoch_accuracy.push(r.n_classes.map(|_| correct as f64 / n));
    }
    if !p.is_finite() {
        return Err(Error::Diverged {
            epoch: tcfg.epochs,
            step,
            loss: f64::NAN,
        });
    }
    train_idx.sort_unstable();
    let (train_x, train_y) = pick(&train_idx);
    let final_train_accuracy = evaluate(&train_x, &train_y, p, cfg, tcfg.loss, r.n_classes)?.1;
    let (holdout_loss, holdout_accuracy) = eval_hold(p)?;
    let backbone_unchanged = backbone.to_bytes() == backbone_before;
    assert!(backbone_unchanged, "backbone weights changed during training");
    Ok(TrainReport {
        variant: r.variant,
        trainable_params: p
            .named_slices()
            .iter()
            .enumerate()
            .filter(|(i, _)| !r.frozen.get(*i).copied().unwrap_or(false))
            .map(|(_, (_, s))| s.len())
            .sum(),
        train_size: train_idx.len(),
        holdout_size: hold_idx.len(),
        epoch_loss,
        epoch_accuracy,
        init_holdout_accuracy,
        final_train_accuracy,
        holdout_accuracy,
        holdout_loss,
        params_changed: *p != p0,
        backbone_unchanged,
        train_config: tcfg.clone(),
        wander_config: cfg.clone(),
        wall_time_ms: Some(started.elapsed().as_secs_f64() * 1e3),
    })
}

fn encode_all(ds: &Dataset, backbone: &FrozenBackbone) -> Result<Vec<ModalityBatch>> {
    ds.samples.par_iter().map(|x| backbone.encode(x)).collect()
}

fn check_common(ds: &Dataset, cfg: &WanderConfig, tcfg: &TrainConfig) -> Result<()> {
    if ds.is_empty() || ds.labels.len() != ds.len() {
        return Err(invalid("dataset must be non-empty with one label per sample"));
    }
    cfg.validate()?;
    tcfg.validate()?;
    check_labels(ds, cfg, tcfg.loss)
}

/// Trains the adapter and head of `p` in place on backbone features of `ds`.
pub fn train(
    ds: &Dataset,
    p: &mut WanderParams,
    cfg: &WanderConfig,
    tcfg: &TrainConfig,
    backbone: &FrozenBackbone,
) -> Result<TrainReport> {
    let started = Instant::now();
    check_common(ds, cfg, tcfg)?;
    let before = backbone.to_bytes();
    let features = encode_all(ds, backbone)?;
    let run_spec = Run {
        variant: Variant::Sequence,
        features,
        labels: &ds.labels,
        n_classes: ds.n_classes(),
        frozen: Vec::new(),
    };
    run(run_spec, p, cfg, tcfg, backbone, &before, started)
}

/// The adapter configuration used by the first-token baseline: every
/// sequence cut to one token, `d_t = R_t = 1`.
pub fn vf_config(cfg: &WanderConfig) -> WanderConfig {
    let mut vf = cfg.clone();
    vf.fusion.lengths = vec![1; cfg.modalities()];
    vf.fusion.d_t = 1;
    vf.fusion.r_t = 1;
    vf
}

/// Fresh parameters for [`vf_config`]: seeded init with every `W_t` factor
/// fixed to `[[1]]`, which turns sequence fusion of one-token sequences into
/// vector fusion.
pub fn vf_params(cfg: &WanderConfig, seed: u64) -> Result<WanderParams> {
    let vf = vf_config(cfg);
    let mut p = WanderParams::init(&vf, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for w in p.f_t.iter_mut() {
        w.fill(1.0);
    }
    Ok(p)
}

/// First-token vector-fusion baseline. `p` must come from [`vf_params`];
/// its `W_t` factors stay frozen.
pub fn train_vf_baseline(
    ds: &Dataset,
    p: &mut WanderParams,
    cfg: &WanderConfig,
    tcfg: &TrainConfig,
    backbone: &FrozenBackbone,
) -> Result<TrainReport> {
    let started = Instant::now();
    let vf = vf_config(cfg);
    check_common(ds, &vf, tcfg)?;
    let before = backbone.to_bytes();
    let features = encode_all(ds, backbone)?
        .into_iter()
        .map(|h| {
            ModalityBatch::new(
                h.into_sequences()
                    .into_iter()
                    .map(|seq| seq.slice(s![..1, ..]).to_owned())
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen = p
        .named_slices()
        .iter()
        .map(|(name, _)| name.starts_with("f_t."))
        .collect();
    let run_spec = Run {
        variant: Variant::FirstTokenVector,
        features,
        labels: &ds.labels,
        n_classes: ds.n_classes(),
        frozen,
    };
    run(run_spec, p, &vf, tcfg, backbone, &before, started)
}

//! Parameter counts, FLOP estimates and timed runs of the three sequence
//! fusion forms.
//!
//! - `SF-OP`: explicit `W_h` and `W_t`, every token tuple's outer product
//!   materialized.
//! - `SF-VF`: low-rank vector fusion per token tuple, explicit `W_t`.
//! - `SF`: both weights low-rank, no tuple enumeration.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fusion::{
    sequence_fusion_lowrank_with, sequence_fusion_oracle_with, sequence_fusion_vf_with, Exec, FusionConfig,
    ModalityBatch, Ordering, DEFAULT_ORACLE_LIMIT,
};
use crate::tensor::{cp_reconstruct, CpFactorSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SF-OP")]
    SfOp,
    #[serde(rename = "SF-VF")]
    SfVf,
    #[serde(rename = "SF")]
    Sf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sf, Method::SfVf, Method::SfOp];

    pub fn name(self) -> &'static str {
        match self {
            Self::SfOp => "SF-OP",
            Self::SfVf => "SF-VF",
            Self::Sf => "SF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SF-OP" | "SFOP" => Ok(Self::SfOp),
            "SF-VF" | "SFVF" => Ok(Self::SfVf),
            "SF" => Ok(Self::Sf),
            _ => Err(invalid(format!("unknown method {s:?}, expected SF, SF-VF or SF-OP"))),
        }
    }
}

fn prod(xs: &[usize]) -> u128 {
    xs.iter().map(|&x| x as u128).product()
}

fn sum(xs: &[usize]) -> u128 {
    xs.iter().map(|&x| x as u128).sum()
}

/// Fusion weight count. Biases are excluded unless `include_biases`, in
/// which case the `d_t x d_h` output bias is added.
pub fn count_params(method: Method, cfg: &FusionConfig, include_biases: bool) -> u128 {
    let (d_h, d_t) = (cfg.d_h as u128, cfg.d_t as u128);
    let (r_h, r_t) = (cfg.r_h as u128, cfg.r_t as u128);
    let w_h_full = d_h * prod(&cfg.dims);
    let w_t_full = d_t * prod(&cfg.lengths);
    let w_h_cp = r_h * d_h * sum(&cfg.dims);
    let w_t_cp = r_t * d_t * sum(&cfg.lengths);
    let weights = match method {
        Method::SfOp => w_h_full + w_t_full,
        Method::SfVf => w_h_cp + w_t_full,
        Method::Sf => w_h_cp + w_t_cp,
    };
    weights + if include_biases { d_t * d_h } else { 0 }
}

/// Floating-point operations (a multiply-add counts as two) of one forward
/// pass, following the loops this crate runs:
///
/// - SF-OP: per tuple, the outer product (`sum_{k>=2} prod_{i<=k} d_i`
///   multiplies) and its contraction with `W_h` (`2 d_h prod d_m`); then the
///   `W_t` contraction (`2 d_t d_h prod l_m`).
/// - SF-VF: per tuple, `R_h` rank terms of `sum_m 2 d_h d_m` plus
///   `(M-1) d_h` Hadamard multiplies, and `(R_h-1) d_h` adds; then `W_t`.
/// - SF (exact): per modality `R_t` projections `2 d_t l_m d_m` and
///   `R_t R_h` products `2 d_t d_m d_h`; `R_t R_h (M-1) d_t d_h` Hadamard
///   multiplies; `(R_t R_h - 1) d_t d_h` adds.
/// - SF (literal ordering): the same projections, then `M (R_t R_h - 1) d_t d_h`
///   adds and `(M-1) d_t d_h` Hadamard multiplies.
pub fn estimate_flops(method: Method, cfg: &FusionConfig) -> u128 {
    let m = cfg.modalities() as u128;
    let (d_h, d_t) = (cfg.d_h as u128, cfg.d_t as u128);
    let (r_h, r_t) = (cfg.r_h as u128, cfg.r_t as u128);
    let tuples = prod(&cfg.lengths);
    let w_t_contract = 2 * d_t * tuples * d_h;
    match method {
        Method::SfOp => {
            let mut outer = 0u128;
            let mut acc = cfg.dims[0] as u128;
            for &d in &cfg.dims[1..] {
                acc *= d as u128;
                outer += acc;
            }
            tuples * (outer + 2 * d_h * prod(&cfg.dims)) + w_t_contract
        }
        Method::SfVf => {
            let per_rank = 2 * d_h * sum(&cfg.dims) + (m - 1) * d_h;
            tuples * (r_h * per_rank + (r_h - 1) * d_h) + w_t_contract
        }
        Method::Sf => {
            let proj: u128 = cfg
                .lengths
                .iter()
                .zip(&cfg.dims)
                .map(|(&l, &d)| r_t * 2 * d_t * l as u128 * d as u128 + r_t * r_h * 2 * d_t * d as u128 * d_h)
                .sum();
            let out = d_t * d_h;
            let combine = match cfg.ordering {
                Ordering::Exact => r_t * r_h * (m - 1) * out + (r_t * r_h - 1) * out,
                Ordering::Literal => m * (r_t * r_h - 1) * out + (m - 1) * out,
            };
            proj + combine
        }
    }
}

/// Upper bound, in bytes, of the `f64` buffers one forward pass keeps alive
/// at once: inputs, weights, intermediates and output.
pub fn analytic_peak_bytes(method: Method, cfg: &FusionConfig) -> u128 {
    let (d_h, d_t) = (cfg.d_h as u128, cfg.d_t as u128);
    let (r_h, r_t) = (cfg.r_h as u128, cfg.r_t as u128);
    let inputs: u128 = cfg.lengths.iter().zip(&cfg.dims).map(|(&l, &d)| (l * d) as u128).sum();
    let out = d_t * d_h;
    let h_t = prod(&cfg.lengths) * d_h;
    let entries = match method {
        // weights + H_t (collected rows, then the packed copy) + one outer product
        Method::SfOp => count_params(method, cfg, false) + 2 * h_t + prod(&cfg.dims) + d_h,
        // weights + H_t twice + one tuple's rank terms
        Method::SfVf => count_params(method, cfg, false) + 2 * h_t + 2 * d_h,
        Method::Sf => {
            let max_d = *cfg.dims.iter().max().unwrap_or(&0) as u128;
            let proj: u128 = cfg.dims.iter().map(|&d| r_t * d_t * d as u128).sum();
            let terms = cfg.modalities() as u128 * r_t * d_t * r_h * d_h;
            // + stacked W_h factors of one modality and r_t partial sums
            count_params(method, cfg, false) + proj + terms + r_h * d_h * max_d + r_t * out
        }
    };
    8 * (inputs + entries + out)
}

/// Global allocator wrapper that tracks live and peak heap bytes. Install
/// it with `#[global_allocator]` to let [`measure`] report measured peaks.
pub struct CountingAllocator;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            ACTIVE.store(true, AtomicOrdering::Relaxed);
            let live = LIVE.fetch_add(layout.size(), AtomicOrdering::Relaxed) + layout.size();
            PEAK.fetch_max(live, AtomicOrdering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), AtomicOrdering::Relaxed);
    }
}

impl CountingAllocator {
    /// True once the allocator has served at least one allocation.
    pub fn installed() -> bool {
        ACTIVE.load(AtomicOrdering::Relaxed)
    }

    pub fn live_bytes() -> usize {
        LIVE.load(AtomicOrdering::Relaxed)
    }

    /// Resets the peak to the current live size and returns that size.
    pub fn reset_peak() -> usize {
        let live = LIVE.load(AtomicOrdering::Relaxed);
        PEAK.store(live, AtomicOrdering::Relaxed);
        live
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(AtomicOrdering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeakSource {
    Analytic,
    /// Heap high-water mark above the pre-run baseline, from [`CountingAllocator`].
    Instrumented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureOptions {
    pub reps: usize,
    pub warmups: usize,
    pub exec: Exec,
    /// Ceiling on materialized `H_t` entries for SF-OP and SF-VF.
    pub limit: u128,
    pub seed: u64,
    /// Use [`CountingAllocator`] figures when it is installed.
    pub instrumented: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            reps: 5,
            warmups: 2,
            exec: Exec::Serial,
            limit: DEFAULT_ORACLE_LIMIT,
            seed: 0,
            instrumented: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub config: FusionConfig,
    pub param_count: u128,
    pub flops_forward: u128,
    /// Median over `repetitions` timed runs; `None` when redacted or skipped.
    pub wall_time_ms: Option<f64>,
    pub peak_alloc_bytes: u128,
    pub peak_source: PeakSource,
    pub repetitions: usize,
    pub warmups: usize,
    pub parallel: bool,
    /// `"ok"`, or the resource-limit message when the run was skipped.
    pub status: String,
}

impl CostReport {
    pub fn redact_timings(&mut self) {
        self.wall_time_ms = None;
    }

    pub const CSV_HEADER: &'static str = "method,M,dims,lengths,d_h,d_t,R_h,R_t,params,flops,ms,bytes";

    /// One CSV row matching [`Self::CSV_HEADER`]; list fields are `x`-joined.
    pub fn csv_row(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            c.modalities(),
            join(&c.dims),
            join(&c.lengths),
            c.d_h,
            c.d_t,
            c.r_h,
            c.r_t,
            self.param_count,
            self.flops_forward,
            self.wall_time_ms.map(|t| format!("{t:.4}")).unwrap_or_default(),
            self.peak_alloc_bytes
        )
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times `reps` forward passes of `method` on seeded random inputs after
/// `warmups` untimed ones. A config over the materialization ceiling yields a
/// report with `status` set and no timing, not an error.
pub fn measure(method: Method, cfg: &FusionConfig, opts: &MeasureOptions) -> Result<CostReport> {
    cfg.validate()?;
    if opts.reps == 0 {
        return Err(invalid("measure needs at least one repetition"));
    }
    let mut report = CostReport {
        method,
        config: cfg.clone(),
        param_count: count_params(method, cfg, false),
        flops_forward: estimate_flops(method, cfg),
        wall_time_ms: None,
        peak_alloc_bytes: analytic_peak_bytes(method, cfg),
        peak_source: PeakSource::Analytic,
        repetitions: opts.reps,
        warmups: opts.warmups,
        parallel: opts.exec == Exec::Parallel,
        status: "ok".into(),
    };
    if method != Method::Sf {
        let requested = prod(&cfg.lengths) * cfg.d_h as u128;
        let weights = if method == Method::SfOp {
            count_params(method, cfg, false)
        } else {
            0
        };
        let worst = requested.max(weights);
        if worst > opts.limit {
            report.status = Error::ResourceLimit {
                what: "materialized entries",
                requested: worst,
                limit: opts.limit,
            }
            .to_string();
            return Ok(report);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = ModalityBatch::new(
        cfg.lengths
            .iter()
            .zip(&cfg.dims)
            .map(|(&l, &d)| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..=1.0)))
            .collect(),
    )?;
    let f_h = CpFactorSet::random_uniform(cfg.r_h, cfg.d_h, &cfg.dims, 0.5, &mut rng)?;
    let f_t = CpFactorSet::random_uniform(cfg.r_t, cfg.d_t, &cfg.lengths, 0.5, &mut rng)?;
    let w_h = (method == Method::SfOp).then(|| cp_reconstruct(&f_h));
    let w_t = (method != Method::Sf).then(|| cp_reconstruct(&f_t).last_mode_first());

    let run = || -> Result<Array2<f64>> {
        match method {
            Method::Sf => sequence_fusion_lowrank_with(&h, &f_h, &f_t, cfg.ordering, opts.exec),
            Method::SfVf => {
                sequence_fusion_vf_with(&h, &f_h, w_t.as_ref().unwrap(), cfg.ordering, opts.limit, opts.exec)
            }
            Method::SfOp => {
                sequence_fusion_oracle_with(&h, w_h.as_ref().unwrap(), w_t.as_ref().unwrap(), opts.limit, opts.exec)
            }
        }
    };
    for _ in 0..opts.warmups {
        std::hint::black_box(run()?);
    }
    let mut times = Vec::with_capacity(opts.reps);
    let mut peak = 0usize;
    for _ in 0..opts.reps {
        let base = CountingAllocator::reset_peak();
        let t0 = Instant::now();
        let out = std::hint::black_box(run()?);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(out);
        peak = peak.max(CountingAllocator::peak_bytes().saturating_sub(base));
    }
    report.wall_time_ms = Some(median(&mut times));
    if opts.instrumented && CountingAllocator::installed() {
        // measured transient bytes plus the resident inputs and weights
        let resident = 8 * (count_params(method, cfg, false)
            + cfg.lengths.iter().zip(&cfg.dims).map(|(&l, &d)| (l * d) as u128).sum::<u128>());
        report.peak_alloc_bytes = peak as u128 + resident;
        report.peak_source = PeakSource::Instrumented;
    }
    Ok(report)
}

//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) and then asserts its criterion.

use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wander::adapter::{logits, Nonlinearity, ResidualPolicy, WanderConfig, WanderParams};
use wander::bench::{count_params, measure, MeasureOptions, Method};
use wander::cli::{train_settings, RunConfig};
use wander::data::generate;
use wander::fusion::{
    sequence_fusion_lowrank, sequence_fusion_oracle, sequence_fusion_vf, FusionConfig, ModalityBatch, Ordering,
};
use wander::tensor::{cp_reconstruct, CpFactorSet};
use wander::training::{
    finite_difference_grad, sample_loss, sample_loss_and_grad, train, train_vf_baseline, vf_params, FrozenBackbone,
    Loss, DEFAULT_GAIN,
};

fn report(id: u32, name: &str, pass: bool, detail: String) -> bool {
    let line = format!(
        "[acceptance {id}] {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // written straight to the handle so it shows without --nocapture
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

fn random_batch(lengths: &[usize], dims: &[usize], rng: &mut ChaCha8Rng) -> ModalityBatch {
    ModalityBatch::new(
        lengths
            .iter()
            .zip(dims)
            .map(|(&l, &d)| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..=1.0)))
            .collect(),
    )
    .unwrap()
}

/// The 100-config sweep shared by the first two criteria: worst SF vs oracle
/// and worst SF-VF vs SF error.
fn equivalence_sweep() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_op, mut worst_vf) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let m = rng.random_range(2..=3);
        let lengths: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4)).collect();
        let dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=5)).collect();
        let (d_h, d_t) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (r_h, r_t) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let h = random_batch(&lengths, &dims, &mut rng);
        let f_h = CpFactorSet::random_uniform(r_h, d_h, &dims, 1.0, &mut rng).unwrap();
        let f_t = CpFactorSet::random_uniform(r_t, d_t, &lengths, 1.0, &mut rng).unwrap();
        let w_t = cp_reconstruct(&f_t).last_mode_first();
        let sf = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap();
        let op = sequence_fusion_oracle(&h, &cp_reconstruct(&f_h), &w_t).unwrap();
        let vf = sequence_fusion_vf(&h, &f_h, &w_t, Ordering::Exact).unwrap();
        worst_op = worst_op.max(max_rel(&sf, &op));
        worst_vf = worst_vf.max(max_rel(&vf, &sf));
    }
    (worst_op, worst_vf)
}

#[test]
fn criterion_1_oracle_equivalence() {
    let t = Instant::now();
    let (err, _) = equivalence_sweep();
    let elapsed = t.elapsed();
    let pass = err < 1e-8 && elapsed < Duration::from_secs(10);
    assert!(report(
        1,
        "low-rank fusion matches the explicit oracle",
        pass,
        format!("100 configs, max rel err {err:.2e} (< 1e-8), {elapsed:.2?} (< 10 s)")
    ));
}

#[test]
fn criterion_2_chain_equivalence() {
    let t = Instant::now();
    let (_, err) = equivalence_sweep();
    let elapsed = t.elapsed();
    let pass = err < 1e-8 && elapsed < Duration::from_secs(30);
    assert!(report(
        2,
        "SF-VF matches SF under shared factors",
        pass,
        format!("100 configs, max rel err {err:.2e} (< 1e-8), {elapsed:.2?} (< 30 s)")
    ));
}

#[test]
fn criterion_3_parameter_counts() {
    let mut cfg = FusionConfig::uniform(3, 10, 768, 768, 10);
    cfg.r_h = 8;
    cfg.r_t = 8;
    let op = count_params(Method::SfOp, &cfg, false);
    let sf = count_params(Method::Sf, &cfg, false);
    // d_h * prod(d_m) + d_t * prod(l_m) and R_h d_h sum(d_m) + R_t d_t sum(l_m)
    let exact = op == 768 * 768u128.pow(3) + 10 * 10u128.pow(3) && sf == 8 * 768 * 2304 + 8 * 10 * 30;
    let pass = exact && (340_000_000_000..=350_000_000_000).contains(&op) && (14_000_000..=14_500_000).contains(&sf);
    assert!(report(
        3,
        "parameter counts at the large-feature config",
        pass,
        format!("SF-OP {op} in [3.4e11, 3.5e11], SF {sf} in [1.40e7, 1.45e7]")
    ));
}

#[test]
fn criterion_4_gradient_check() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let m = rng.random_range(2..=3);
        let r = [1, 2, 4][i % 3];
        let lengths: Vec<usize> = (0..m).map(|_| rng.random_range(1..=3)).collect();
        let dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4)).collect();
        let d = rng.random_range(1..=3);
        let min_l = *lengths.iter().min().unwrap();
        let residual_policy =
            [ResidualPolicy::ReferenceModality, ResidualPolicy::MeanOfModalities, ResidualPolicy::None][i % 3];
        let cfg = WanderConfig {
            fusion: FusionConfig {
                lengths: lengths.clone(),
                dims: dims.clone(),
                // residual paths need d_h = d
                d_h: if residual_policy == ResidualPolicy::None { rng.random_range(1..=3) } else { d },
                d_t: rng.random_range(1..=min_l),
                r_h: r,
                r_t: r,
                ordering: Ordering::Exact,
            },
            down_dim: d,
            nonlinearity: if i % 2 == 0 { Nonlinearity::Gelu } else { Nonlinearity::Tanh },
            residual_policy,
            reference_modality: m - 1,
            n_classes: 2,
        };
        let mut p = WanderParams::zeros(&cfg).unwrap();
        for s in p.slices_mut() {
            s.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
        }
        let h = random_batch(&lengths, &dims, &mut rng);
        // least likely class, so the loss is not saturated
        let z = logits(&h, &p, &cfg).unwrap();
        let label = if z[0] < z[1] { 0.0 } else { 1.0 };
        let (_, _, g) = sample_loss_and_grad(&h, label, &p, &cfg, Loss::CrossEntropy).unwrap();
        let fd = finite_difference_grad(
            |q| sample_loss(&h, label, q, &cfg, Loss::CrossEntropy).unwrap(),
            &p,
            1e-5,
        )
        .unwrap();
        worst = worst.max(g.max_rel_error(&fd));
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(60);
    assert!(report(
        4,
        "analytic gradients match central differences",
        pass,
        format!("20 configs, step 1e-5, max rel err {worst:.2e} (< 1e-5), {elapsed:.2?}")
    ));
}

#[test]
fn criterion_5_cost_ordering() {
    let t = Instant::now();
    let mut cfg = FusionConfig::uniform(3, 8, 32, 32, 8);
    cfg.r_h = 8;
    cfg.r_t = 8;
    let opts = MeasureOptions::default();
    let mut runs = Vec::new();
    let mut pass = true;
    for _ in 0..3 {
        let sf = measure(Method::Sf, &cfg, &opts).unwrap();
        let vf = measure(Method::SfVf, &cfg, &opts).unwrap();
        let op = measure(Method::SfOp, &cfg, &opts).unwrap();
        let (a, b, c) = (sf.wall_time_ms.unwrap(), vf.wall_time_ms.unwrap(), op.wall_time_ms.unwrap());
        pass &= a < b && b < c && sf.peak_alloc_bytes < op.peak_alloc_bytes;
        runs.push(format!(
            "{a:.3}<{b:.3}<{c:.3} ms, {}<{} B",
            sf.peak_alloc_bytes, op.peak_alloc_bytes
        ));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    assert!(report(
        5,
        "SF < SF-VF < SF-OP in median time, SF < SF-OP in peak bytes",
        pass,
        format!("{} ({elapsed:.2?})", runs.join("; "))
    ));
}

/// One run of the multiplicative-interaction comparison at the stated
/// configuration, using the CLI defaults for everything unspecified.
#[derive(Debug, Clone)]
struct InteractionRun {
    sf_acc: f64,
    vf_acc: f64,
    sf_train_acc: f64,
    backbone_unchanged: bool,
    r1_acc: f64,
    r1_params: u128,
    r8_params: u128,
}

fn interaction_run(seed: u64) -> InteractionRun {
    let rc = RunConfig {
        seed: Some(seed),
        lengths: Some(vec![6; 3]),
        dims: Some(vec![16; 3]),
        down_dim: Some(8),
        n_samples: Some(2000),
        ..Default::default()
    };
    let (spec, cfg, tcfg) = train_settings(&rc).unwrap();
    assert_eq!(cfg.fusion.r_h, 8);
    let ds = generate(&spec).unwrap();
    let backbone = FrozenBackbone::new(&spec.dims, DEFAULT_GAIN, seed + 1).unwrap();
    let before = backbone.to_bytes();

    let mut p = WanderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let sf = train(&ds, &mut p, &cfg, &tcfg, &backbone).unwrap();
    let mut q = vf_params(&cfg, seed).unwrap();
    let vf = train_vf_baseline(&ds, &mut q, &cfg, &tcfg, &backbone).unwrap();

    let mut cfg1 = cfg.clone();
    cfg1.fusion.r_h = 1;
    cfg1.fusion.r_t = 1;
    let mut p1 = WanderParams::init(&cfg1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let r1 = train(&ds, &mut p1, &cfg1, &tcfg, &backbone).unwrap();

    InteractionRun {
        sf_acc: sf.holdout_accuracy.unwrap(),
        vf_acc: vf.holdout_accuracy.unwrap(),
        sf_train_acc: sf.final_train_accuracy.unwrap(),
        backbone_unchanged: sf.backbone_unchanged
            && vf.backbone_unchanged
            && r1.backbone_unchanged
            && backbone.to_bytes() == before,
        r1_acc: r1.holdout_accuracy.unwrap(),
        r1_params: count_params(Method::Sf, &cfg1.fusion, false),
        r8_params: count_params(Method::Sf, &cfg.fusion, false),
    }
}

fn interaction_runs() -> &'static (Vec<InteractionRun>, Duration) {
    static RUNS: OnceLock<(Vec<InteractionRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let runs = (0..3).map(interaction_run).collect();
        (runs, t.elapsed())
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_sequence_beats_first_token() {
    let (runs, elapsed) = interaction_runs();
    let sf = mean(runs.iter().map(|r| r.sf_acc));
    let vf = mean(runs.iter().map(|r| r.vf_acc));
    let train_acc = mean(runs.iter().map(|r| r.sf_train_acc));
    let gap = 100.0 * (sf - vf);
    // includes the rank-1 runs used by criterion 8
    let pass = gap >= 5.0 && sf >= 0.85 && *elapsed < Duration::from_secs(300 + 150);
    assert!(report(
        6,
        "sequence fusion beats the first-token baseline",
        pass,
        format!(
            "3 seeds: SF held out {sf:.3} (train {train_acc:.3}), VF {vf:.3}, gap {gap:+.1} points \
             (need >= +5 and SF >= 0.85), {elapsed:.2?}"
        )
    ));
}

#[test]
fn criterion_7_backbone_frozen() {
    let (runs, _) = interaction_runs();
    let pass = runs.iter().all(|r| r.backbone_unchanged);
    assert!(report(
        7,
        "backbone bytes unchanged by training",
        pass,
        format!("{} runs checked byte for byte", runs.len() * 3)
    ));
}

#[test]
fn criterion_8_rank_sweep() {
    let (runs, elapsed) = interaction_runs();
    let r8 = mean(runs.iter().map(|r| r.sf_acc));
    let r1 = mean(runs.iter().map(|r| r.r1_acc));
    let (p1, p8) = (runs[0].r1_params, runs[0].r8_params);
    let pass = r8 >= r1 - 0.01 && p8 == 8 * p1 && *elapsed < Duration::from_secs(600);
    assert!(report(
        8,
        "rank 8 no worse than rank 1, params linear in rank",
        pass,
        format!("held out R=8 {r8:.3} vs R=1 {r1:.3} (3 seeds), params {p8} = 8 x {p1}: {}", p8 == 8 * p1)
    ));
}

fn run_bin(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_wander"))
        .args(args)
        .output()
        .expect("run wander");
    (out.status.code().unwrap_or(-1), out.stdout)
}

#[test]
fn criterion_9_deterministic_reports() {
    let verify = ["verify", "--seed", "5", "--threads", "1", "--redact-timings"];
    let train = [
        "train", "--seed", "5", "--threads", "1", "--redact-timings", "--epochs", "3", "--n-samples", "300",
        "--compare-vf",
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for args in [&verify[..], &train[..]] {
        let (c1, a) = run_bin(args);
        let (c2, b) = run_bin(args);
        let same = c1 == 0 && c2 == 0 && a == b && !a.is_empty();
        pass &= same;
        detail.push(format!("{} {} bytes identical: {same}", args[0], a.len()));
    }
    assert!(report(9, "verify and train reports are byte-identical", pass, detail.join(", ")));
}

//! Property tests over randomly drawn shapes and values. Reference values are
//! computed here by direct index enumeration, independent of the library's
//! contraction code.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wander::adapter::{count_trainable, wander_forward, Nonlinearity, ResidualPolicy, WanderConfig, WanderParams};
use wander::bench::{count_params, Method};
use wander::data::{generate_with_structure, LabelType, SynthSpec, Task};
use wander::fusion::{
    sequence_fusion_lowrank, sequence_fusion_oracle, sequence_fusion_vf, FusionConfig, ModalityBatch, Ordering,
};
use wander::tensor::{cp_reconstruct, hadamard, outer_product, CpFactorSet};

fn batch(lengths: &[usize], dims: &[usize], rng: &mut ChaCha8Rng) -> ModalityBatch {
    ModalityBatch::new(
        lengths
            .iter()
            .zip(dims)
            .map(|(&l, &d)| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..=1.0)))
            .collect(),
    )
    .unwrap()
}

/// Every multi-index of `extents` in row-major order.
fn indices(extents: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &e in extents {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..e).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    out
}

/// Entry `[k_1..k_M, j]` of the tensor the factor set represents.
fn cp_entry(f: &CpFactorSet, k: &[usize], j: usize) -> f64 {
    (0..f.rank())
        .map(|r| k.iter().enumerate().map(|(m, &km)| f.factor(m, r)[[j, km]]).product::<f64>())
        .sum()
}

/// Sequence fusion by summing over every token tuple and feature tuple.
fn brute_force_fusion(h: &ModalityBatch, f_h: &CpFactorSet, f_t: &CpFactorSet) -> Array2<f64> {
    let (d_t, d_h) = (f_t.out_dim(), f_h.out_dim());
    let mut y = Array2::zeros((d_t, d_h));
    for toks in indices(&h.lengths()) {
        for feats in indices(&h.dims()) {
            let x: f64 = toks
                .iter()
                .zip(&feats)
                .enumerate()
                .map(|(m, (&t, &k))| h.sequence(m)[[t, k]])
                .product();
            for i in 0..d_t {
                let wt = cp_entry(f_t, &toks, i);
                for j in 0..d_h {
                    y[[i, j]] += wt * cp_entry(f_h, &feats, j) * x;
                }
            }
        }
    }
    y
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

fn fusion_config() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize, usize, usize, usize, u64)> {
    (1usize..=3)
        .prop_flat_map(|m| {
            (
                prop::collection::vec(1usize..=3, m),
                prop::collection::vec(1usize..=3, m),
                1usize..=3,
                1usize..=3,
                1usize..=3,
                1usize..=3,
                any::<u64>(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lowrank_matches_brute_force((lengths, dims, d_h, d_t, r_h, r_t, seed) in fusion_config()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = batch(&lengths, &dims, &mut rng);
        let f_h = CpFactorSet::random_uniform(r_h, d_h, &dims, 1.0, &mut rng).unwrap();
        let f_t = CpFactorSet::random_uniform(r_t, d_t, &lengths, 1.0, &mut rng).unwrap();
        let want = brute_force_fusion(&h, &f_h, &f_t);
        let sf = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap();
        let w_t = cp_reconstruct(&f_t).last_mode_first();
        let op = sequence_fusion_oracle(&h, &cp_reconstruct(&f_h), &w_t).unwrap();
        let vf = sequence_fusion_vf(&h, &f_h, &w_t, Ordering::Exact).unwrap();
        prop_assert!(max_rel(&sf, &want) < 1e-10);
        prop_assert!(max_rel(&op, &want) < 1e-10);
        prop_assert!(max_rel(&vf, &want) < 1e-10);
    }

    #[test]
    fn fusion_is_multilinear_and_zero_annihilates(
        (lengths, dims, d_h, d_t, r_h, r_t, seed) in fusion_config(),
        alpha in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = batch(&lengths, &dims, &mut rng);
        let f_h = CpFactorSet::random_uniform(r_h, d_h, &dims, 1.0, &mut rng).unwrap();
        let f_t = CpFactorSet::random_uniform(r_t, d_t, &lengths, 1.0, &mut rng).unwrap();
        let m = rng.random_range(0..lengths.len());
        let base = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap();
        h.scale_modality(m, alpha);
        let scaled = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap();
        let scale = base.iter().fold(1.0f64, |a, x| a.max(x.abs() * alpha.abs()));
        for (s, b) in scaled.iter().zip(&base) {
            prop_assert!((s - alpha * b).abs() <= 1e-10 * scale);
        }
        h.scale_modality(m, 0.0);
        prop_assert!(sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap().iter().all(|&x| x == 0.0));
        let w_t = cp_reconstruct(&f_t).last_mode_first();
        prop_assert!(sequence_fusion_vf(&h, &f_h, &w_t, Ordering::Exact).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outer_product_entries(vs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..=4), 1..=3)) {
        let t = outer_product(&vs).unwrap();
        let extents: Vec<usize> = vs.iter().map(|v| v.len()).collect();
        prop_assert_eq!(t.shape(), &extents[..]);
        for idx in indices(&extents) {
            let want: f64 = idx.iter().enumerate().map(|(m, &i)| vs[m][i]).product();
            prop_assert_eq!(t.get(&idx), want);
        }
    }

    #[test]
    fn cp_reconstruct_matches_enumeration_and_is_linear(
        dims in prop::collection::vec(1usize..=3, 1..=3),
        rank in 1usize..=3,
        out in 1usize..=3,
        alpha in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = CpFactorSet::random_uniform(rank, out, &dims, 1.0, &mut rng).unwrap();
        let w = cp_reconstruct(&f);
        for idx in indices(&dims) {
            for j in 0..out {
                let mut full = idx.clone();
                full.push(j);
                prop_assert!((w.get(&full) - cp_entry(&f, &idx, j)).abs() < 1e-12);
            }
        }
        f.scale_modality(0, alpha);
        let scaled = cp_reconstruct(&f);
        for (a, b) in scaled.data().iter().zip(w.data()) {
            prop_assert!((a - alpha * b).abs() < 1e-12);
        }
    }

    #[test]
    fn hadamard_order_free(rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms: Vec<Array2<f64>> =
            (0..3).map(|_| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))).collect();
        let abc = hadamard(&ms).unwrap();
        let cab = hadamard(&[ms[2].clone(), ms[0].clone(), ms[1].clone()]).unwrap();
        let nested = hadamard(&[hadamard(&ms[1..]).unwrap(), ms[0].clone()]).unwrap();
        for ((x, y), z) in abc.iter().zip(&cab).zip(&nested) {
            prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_invariant_to_modality_order(
        (lengths, dims, _, _, r_h, r_t, seed) in fusion_config().prop_filter("two or more", |c| c.0.len() >= 2),
        d in 1usize..=3,
        mean_residual in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = lengths.len();
        let min_l = *lengths.iter().min().unwrap();
        let cfg = WanderConfig {
            fusion: FusionConfig {
                lengths: lengths.clone(),
                dims: dims.clone(),
                d_h: d,
                d_t: rng.random_range(1..=min_l),
                r_h,
                r_t,
                ordering: Ordering::Exact,
            },
            down_dim: d,
            nonlinearity: Nonlinearity::Gelu,
            residual_policy: if mean_residual { ResidualPolicy::MeanOfModalities } else { ResidualPolicy::ReferenceModality },
            reference_modality: 0,
            n_classes: 2,
        };
        let mut p = WanderParams::zeros(&cfg).unwrap();
        for s in p.slices_mut() {
            s.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
        }
        let h = batch(&lengths, &dims, &mut rng);

        // reverse the modality order everywhere
        let perm: Vec<usize> = (0..m).rev().collect();
        let mut cfg2 = cfg.clone();
        cfg2.fusion.lengths = perm.iter().map(|&i| lengths[i]).collect();
        cfg2.fusion.dims = perm.iter().map(|&i| dims[i]).collect();
        cfg2.reference_modality = m - 1;
        let restack = |f: &CpFactorSet| {
            CpFactorSet::new(perm.iter().map(|&i| f.stack(i).to_vec()).collect()).unwrap()
        };
        let p2 = WanderParams {
            down: perm.iter().map(|&i| p.down[i].clone()).collect(),
            down_bias: perm.iter().map(|&i| p.down_bias[i].clone()).collect(),
            f_h: restack(&p.f_h),
            f_t: restack(&p.f_t),
            ..p.clone()
        };
        let h2 = ModalityBatch::new(perm.iter().map(|&i| h.sequence(i).clone()).collect()).unwrap();
        let a = wander_forward(&h, &p, &cfg).unwrap();
        let b = wander_forward(&h2, &p2, &cfg2).unwrap();
        prop_assert!(max_rel(&b, &a) < 1e-10);
    }

    #[test]
    fn trainable_count_formula(
        m in 1usize..=3, l in 1usize..=4, dm in 1usize..=5, d in 1usize..=4,
        r_h in 1usize..=4, r_t in 1usize..=4, n_classes in 1usize..=4,
    ) {
        let d_t = l.min(2);
        let mut fusion = FusionConfig::uniform(m, l, dm, d, d_t);
        fusion.r_h = r_h;
        fusion.r_t = r_t;
        let cfg = WanderConfig {
            fusion,
            down_dim: d,
            nonlinearity: Nonlinearity::Relu,
            residual_policy: ResidualPolicy::ReferenceModality,
            reference_modality: 0,
            n_classes,
        };
        let p = WanderParams::zeros(&cfg).unwrap();
        let want = m * (dm * d + d) + r_h * d * m * d + r_t * d_t * m * l + d_t * d + (d_t * d * n_classes + n_classes);
        prop_assert_eq!(count_trainable(&p), want);
    }

    #[test]
    fn param_counts_match_allocated_entries((lengths, dims, d_h, d_t, r_h, r_t, _) in fusion_config()) {
        let cfg = FusionConfig { lengths: lengths.clone(), dims: dims.clone(), d_h, d_t, r_h, r_t, ordering: Ordering::Exact };
        let f_h = CpFactorSet::zeros(r_h, d_h, &dims).unwrap();
        let f_t = CpFactorSet::zeros(r_t, d_t, &lengths).unwrap();
        let (w_h, w_t) = (cp_reconstruct(&f_h), cp_reconstruct(&f_t));
        let n = |f: &CpFactorSet| f.iter().map(|(_, _, a)| a.len()).sum::<usize>() as u128;
        prop_assert_eq!(count_params(Method::SfOp, &cfg, false), (w_h.len() + w_t.len()) as u128);
        prop_assert_eq!(count_params(Method::SfVf, &cfg, false), n(&f_h) + w_t.len() as u128);
        prop_assert_eq!(count_params(Method::Sf, &cfg, false), n(&f_h) + n(&f_t));
        prop_assert_eq!(count_params(Method::Sf, &cfg, true), n(&f_h) + n(&f_t) + (d_t * d_h) as u128);
    }

    #[test]
    fn first_token_score_ignores_later_tokens(
        lengths in prop::collection::vec(2usize..=4, 1..=3),
        seed in any::<u64>(),
    ) {
        let dims: Vec<usize> = lengths.iter().map(|l| l + 1).collect();
        let spec = SynthSpec {
            lengths: lengths.clone(),
            dims,
            n_samples: 4,
            task: Task::FirstTokenOnly,
            label_type: LabelType::Scalar,
            noise_std: 0.0,
            seed,
        };
        let (ds, hidden) = generate_with_structure(&spec).unwrap();
        for (x, &y) in ds.samples.iter().zip(&ds.labels) {
            let shuffled = ModalityBatch::new(
                x.sequences()
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        // rotate tokens 1.. by one place
                        let rest: Vec<Array1<f64>> = (1..s.nrows()).map(|t| s.row(t).to_owned()).collect();
                        for (k, row) in rest.iter().enumerate() {
                            let dst = 1 + (k + 1) % rest.len();
                            s.row_mut(dst).assign(row);
                        }
                        s
                    })
                    .collect(),
            )
            .unwrap();
            prop_assert_eq!(hidden.score(Task::FirstTokenOnly, &shuffled), y);
        }
    }

    #[test]
    fn binary_labels_are_a_balanced_median_split(n in 2usize..60, seed in any::<u64>(), noise in 0.0f64..0.5) {
        let spec = SynthSpec {
            lengths: vec![2, 3],
            dims: vec![2, 2],
            n_samples: n,
            task: Task::MultiplicativeInteraction,
            label_type: LabelType::Binary,
            noise_std: noise,
            seed,
        };
        let (ds, hidden) = generate_with_structure(&spec).unwrap();
        let ones = ds.labels.iter().filter(|&&y| y == 1.0).count();
        prop_assert!(ones.abs_diff(n - ones) <= 1);
        if noise == 0.0 {
            // every positive outscores every negative, so relabeling any
            // permutation of the samples gives the permuted labels
            let scores: Vec<f64> = ds.samples.iter().map(|x| hidden.score(spec.task, x)).collect();
            let lo = scores.iter().zip(&ds.labels).filter(|(_, &y)| y == 0.0).map(|(s, _)| *s).fold(f64::MIN, f64::max);
            let hi = scores.iter().zip(&ds.labels).filter(|(_, &y)| y == 1.0).map(|(s, _)| *s).fold(f64::MAX, f64::min);
            prop_assert!(lo <= hi);
        }
    }
}

#[test]
fn count_ordering_over_fifty_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut checked = 0;
    while checked < 50 {
        let m = rng.random_range(2..=4);
        let cfg = FusionConfig {
            lengths: (0..m).map(|_| rng.random_range(1..=12)).collect(),
            dims: (0..m).map(|_| rng.random_range(1..=40)).collect(),
            d_h: rng.random_range(1..=16),
            d_t: rng.random_range(1..=8),
            r_h: rng.random_range(1..=8),
            r_t: rng.random_range(1..=8),
            ordering: Ordering::Exact,
        };
        let prod_l: usize = cfg.lengths.iter().product();
        let prod_d: usize = cfg.dims.iter().product();
        let sum_l: usize = cfg.lengths.iter().sum();
        let sum_d: usize = cfg.dims.iter().sum();
        if prod_l <= cfg.r_t * sum_l || prod_d <= cfg.r_h * sum_d {
            continue;
        }
        let sf = count_params(Method::Sf, &cfg, false);
        let vf = count_params(Method::SfVf, &cfg, false);
        let op = count_params(Method::SfOp, &cfg, false);
        assert!(sf < vf && vf < op, "{cfg:?}: {sf} {vf} {op}");
        checked += 1;
    }
}

#[test]
fn orderings_disagree_at_rank_two() {
    let f = |m: usize, r: usize, i: usize, j: usize| 0.3 + 0.1 * (m + 2 * r + i + j) as f64;
    let f_h = CpFactorSet::from_fn(2, 2, &[2, 2], f).unwrap();
    let f_t = CpFactorSet::from_fn(2, 1, &[2, 2], |m, r, i, j| f(m, r, i, j) - 0.5 * r as f64).unwrap();
    let h = ModalityBatch::new(vec![
        Array2::from_shape_vec((2, 2), vec![1.0, -0.5, 0.25, 2.0]).unwrap(),
        Array2::from_shape_vec((2, 2), vec![-1.0, 0.5, 1.5, 0.75]).unwrap(),
    ])
    .unwrap();
    let exact = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Exact).unwrap();
    let literal = sequence_fusion_lowrank(&h, &f_h, &f_t, Ordering::Literal).unwrap();
    let gap = exact.iter().zip(&literal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(gap > 1e-3, "gap {gap}");
}

//! Low-rank sequence fusion against the explicit outer-product oracle, under
//! both summation orderings.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wander::fusion::{sequence_fusion_lowrank, sequence_fusion_oracle, sequence_fusion_vf, ModalityBatch, Ordering};
use wander::tensor::{cp_reconstruct, CpFactorSet};

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 { err } else { err / scale }
}

fn main() -> wander::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (lengths, dims, d_h, d_t, r) = (vec![3, 2, 4], vec![4, 3, 2], 3, 2, 3);

    let h = ModalityBatch::new(
        lengths
            .iter()
            .zip(&dims)
            .map(|(&l, &d)| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..=1.0)))
            .collect(),
    )?;
    let f_h = CpFactorSet::random_uniform(r, d_h, &dims, 1.0, &mut rng)?;
    let f_t = CpFactorSet::random_uniform(r, d_t, &lengths, 1.0, &mut rng)?;

    // the oracle takes W_h as (d_1..d_M, d_h) and W_t as (d_t, l_1..l_M)
    let w_h = cp_reconstruct(&f_h);
    let w_t = cp_reconstruct(&f_t).last_mode_first();
    let oracle = sequence_fusion_oracle(&h, &w_h, &w_t)?;
    println!("W_h entries {}, W_t entries {}", w_h.len(), w_t.len());

    for ordering in [Ordering::Exact, Ordering::Literal] {
        let sf = sequence_fusion_lowrank(&h, &f_h, &f_t, ordering)?;
        let vf = sequence_fusion_vf(&h, &f_h, &w_t, ordering)?;
        println!(
            "{ordering:?}: SF vs oracle {:.3e}, SF-VF vs SF {:.3e}",
            max_rel(&sf, &oracle),
            max_rel(&vf, &sf)
        );
    }
    Ok(())
}

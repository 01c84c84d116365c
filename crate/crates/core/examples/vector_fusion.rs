//! Single-vector fusion: one feature vector per modality, fused through a
//! rank-R factored weight tensor, checked against the materialized tensor.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wander::fusion::{vector_fusion_lowrank, vector_fusion_oracle, Ordering};
use wander::tensor::{cp_reconstruct, outer_product, CpFactorSet};

fn main() -> wander::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [5, 4, 3];
    let d_h = 4;
    let h: Vec<Array1<f64>> = dims
        .iter()
        .map(|&d| Array1::from_shape_fn(d, |_| rng.random_range(-1.0..=1.0)))
        .collect();
    let bias = vec![0.1; d_h];

    let z = outer_product(&h.iter().map(|v| v.to_vec()).collect::<Vec<_>>())?;
    println!("outer product shape {:?} ({} entries)", z.shape(), z.len());

    for rank in [1, 2, 4, 8] {
        let f = CpFactorSet::random_uniform(rank, d_h, &dims, 1.0, &mut rng)?;
        let low = vector_fusion_lowrank(&h, &f, &bias, Ordering::Exact)?;
        let full = vector_fusion_oracle(&h, &cp_reconstruct(&f), &bias)?;
        let err = low.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "rank {rank}: {} factor entries vs {} dense, max |diff| {err:.2e}",
            f.num_params(),
            dims.iter().product::<usize>() * d_h
        );
    }
    Ok(())
}

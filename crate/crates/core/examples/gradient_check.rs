//! Analytic adapter gradients against central finite differences, array by
//! array.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wander::adapter::{Nonlinearity, WanderConfig, WanderParams};
use wander::fusion::{FusionConfig, ModalityBatch};
use wander::tensor::rel_diff;
use wander::training::{finite_difference_grad, sample_loss, sample_loss_and_grad, Loss};

fn main() -> wander::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fusion = FusionConfig::uniform(3, 3, 4, 2, 2);
    fusion.lengths = vec![3, 2, 4];
    fusion.r_h = 2;
    fusion.r_t = 3;
    let cfg = WanderConfig {
        fusion,
        down_dim: 2,
        nonlinearity: Nonlinearity::Gelu,
        residual_policy: Default::default(),
        reference_modality: 1,
        n_classes: 3,
    };
    let mut p = WanderParams::zeros(&cfg)?;
    for s in p.slices_mut() {
        s.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
    }
    let h = ModalityBatch::new(
        cfg.fusion
            .lengths
            .iter()
            .map(|&l| Array2::from_shape_fn((l, 4), |_| rng.random_range(-1.0..=1.0)))
            .collect(),
    )?;
    let label = 2.0;

    let (loss, _, analytic) = sample_loss_and_grad(&h, label, &p, &cfg, Loss::CrossEntropy)?;
    let numeric = finite_difference_grad(
        |q| sample_loss(&h, label, q, &cfg, Loss::CrossEntropy).unwrap_or(f64::NAN),
        &p,
        1e-5,
    )?;
    println!("loss {loss:.6}");
    for ((name, a), (_, n)) in analytic.params().named_slices().into_iter().zip(numeric.params().named_slices()) {
        println!("{name:>14}  {:>3} entries  rel err {:.2e}", a.len(), rel_diff(a, n));
    }
    println!("worst {:.2e}", analytic.max_rel_error(&numeric));
    Ok(())
}

//! Held-out accuracy and parameter count as the fusion rank grows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wander::adapter::{count_trainable, WanderConfig, WanderParams};
use wander::bench::{count_params, Method};
use wander::data::{generate, LabelType, SynthSpec, Task};
use wander::fusion::FusionConfig;
use wander::training::{train, FrozenBackbone, TrainConfig, DEFAULT_GAIN};

fn main() -> wander::Result<()> {
    let seed = 2;
    let spec = SynthSpec {
        lengths: vec![2; 3],
        dims: vec![3; 3],
        n_samples: 2000,
        task: Task::MultiplicativeInteraction,
        label_type: LabelType::Binary,
        noise_std: 0.0,
        seed,
    };
    let ds = generate(&spec)?;
    let backbone = FrozenBackbone::new(&spec.dims, DEFAULT_GAIN, seed + 1)?;
    let tcfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };

    println!("rank  fusion  total  held-out");
    for r in [1, 2, 4, 8] {
        let mut fusion = FusionConfig::uniform(3, 2, 3, 3, 2);
        fusion.r_h = r;
        fusion.r_t = r;
        let cfg = WanderConfig {
            fusion,
            down_dim: 3,
            nonlinearity: Default::default(),
            residual_policy: Default::default(),
            reference_modality: 0,
            n_classes: 2,
        };
        let mut p = WanderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let report = train(&ds, &mut p, &cfg, &tcfg, &backbone)?;
        println!(
            "{r:>4}  {:>6}  {:>5}  {:.3}",
            count_params(Method::Sf, &cfg.fusion, false),
            count_trainable(&p),
            report.holdout_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

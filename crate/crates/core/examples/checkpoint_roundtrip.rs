//! Saves a dataset and trained adapter parameters to disk, reloads both and
//! checks that predictions are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wander::adapter::{logits, WanderConfig, WanderParams};
use wander::data::{generate, load_dataset, save_dataset, LabelType, SynthSpec, Task};
use wander::fusion::FusionConfig;
use wander::training::{train, FrozenBackbone, TrainConfig, DEFAULT_GAIN};

fn main() -> wander::Result<()> {
    let dir = std::env::temp_dir().join(format!("wander-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let spec = SynthSpec {
        lengths: vec![3, 2],
        dims: vec![4, 5],
        n_samples: 200,
        task: Task::SeparableUnimodal,
        label_type: LabelType::KClass(3),
        noise_std: 0.05,
        seed: 5,
    };
    let ds = generate(&spec)?;
    save_dataset(&ds, dir.join("data.dtfc"))?;
    let reloaded = load_dataset(dir.join("data.dtfc"))?;
    println!("dataset round trip equal: {}", reloaded == ds);

    let mut fusion = FusionConfig::uniform(2, 2, 4, 4, 2);
    fusion.lengths = spec.lengths.clone();
    fusion.dims = spec.dims.clone();
    fusion.r_h = 2;
    fusion.r_t = 2;
    let cfg = WanderConfig {
        fusion,
        down_dim: 4,
        nonlinearity: Default::default(),
        residual_policy: Default::default(),
        reference_modality: 0,
        n_classes: 3,
    };
    let backbone = FrozenBackbone::new(&spec.dims, DEFAULT_GAIN, 6)?;
    let mut p = WanderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tcfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let report = train(&ds, &mut p, &cfg, &tcfg, &backbone)?;
    println!("held-out accuracy {:.3}", report.holdout_accuracy.unwrap_or(f64::NAN));

    let path = dir.join("adapter.dtfc");
    p.save(&cfg, &path)?;
    let (cfg2, p2) = WanderParams::load(&path)?;
    let h = backbone.encode(&ds.samples[0])?;
    let same = logits(&h, &p, &cfg)? == logits(&h, &p2, &cfg2)?;
    println!("checkpoint {} bytes, config equal {}, logits identical {same}", std::fs::metadata(&path)?.len(), cfg2 == cfg);

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

//! Exact parameter counts and FLOP estimates for the three fusion forms,
//! at a large feature scale and at rank 1 through 16.

use wander::bench::{count_params, estimate_flops, Method};
use wander::fusion::FusionConfig;

fn main() {
    let mut cfg = FusionConfig::uniform(3, 10, 768, 768, 10);
    cfg.r_h = 8;
    cfg.r_t = 8;
    println!("M=3, d_m=768, l_m=10, d_h=768, d_t=10, R=8");
    for m in Method::ALL {
        println!(
            "  {:>6}: {:>16} params, {:>22} flops",
            m.name(),
            count_params(m, &cfg, false),
            estimate_flops(m, &cfg)
        );
    }
    let ratio = count_params(Method::SfOp, &cfg, false) as f64 / count_params(Method::Sf, &cfg, false) as f64;
    println!("  outer-product form is {ratio:.0}x larger");

    println!("\nrank  SF params  SF flops");
    for r in [1, 2, 4, 8, 16] {
        cfg.r_h = r;
        cfg.r_t = r;
        println!("{r:>4}  {:>9}  {:>8}", count_params(Method::Sf, &cfg, false), estimate_flops(Method::Sf, &cfg));
    }
}

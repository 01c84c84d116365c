//! Median wall time and peak buffer size of SF, SF-VF and SF-OP on a small
//! configuration, printed as CSV.

use wander::bench::{measure, CostReport, CountingAllocator, MeasureOptions, Method};
use wander::fusion::FusionConfig;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() -> wander::Result<()> {
    let mut cfg = FusionConfig::uniform(3, 8, 32, 32, 8);
    cfg.r_h = 8;
    cfg.r_t = 8;
    let opts = MeasureOptions {
        instrumented: true,
        ..MeasureOptions::default()
    };
    println!("{}", CostReport::CSV_HEADER);
    for m in Method::ALL {
        println!("{}", measure(m, &cfg, &opts)?.csv_row());
    }
    Ok(())
}

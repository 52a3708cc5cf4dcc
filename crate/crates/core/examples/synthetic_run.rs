//! Trains on a freshly generated synthetic corpus and prints the test scores.
//!
//! ```text
//! cargo run --release -p infocal-core --example synthetic_run -- hyper.seed=3 hyper.disable_adv=true
//! ```

use std::time::Instant;

use infocal::pipeline::run_synthetic;
use infocal::RunConfig;

fn main() -> infocal::Result<()> {
    let mut cfg = RunConfig::toy();
    for arg in std::env::args().skip(1) {
        if let Some(seed) = arg.strip_prefix("seed=") {
            cfg.set_seed(seed.parse().map_err(|_| infocal::Error::Config(format!("bad seed `{seed}`")))?);
        } else {
            cfg.set(&arg)?;
        }
    }
    let start = Instant::now();
    let run = run_synthetic(&cfg)?;
    let r = run.test.rationale;
    println!(
        "seed {} acc {:.3} P {:.3} R {:.3} F1 {:.3} selected {:.3} mean p {:.3} ({:.1?})",
        cfg.hyper.seed,
        run.test.task.accuracy().unwrap_or(f64::NAN),
        r.precision,
        r.recall,
        r.f1,
        r.selection_pct,
        run.mean_prob,
        start.elapsed()
    );
    Ok(())
}

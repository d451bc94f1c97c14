//! Runs the overfit sanity check and prints the loss curve.
//!
//! `cargo run --release --example overfit -- [adam|adagrad] [lr] [steps]`

use cf2net::nn::OptimizerConfig;
use cf2net::trainer::{overfit_smoke_test, OverfitConfig};

fn main() -> cf2net::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut config = OverfitConfig {
        run_all_steps: true,
        ..OverfitConfig::default()
    };
    if let Some(name) = args.first() {
        let lr: f64 = args
            .get(1)
            .map_or(1e-3, |s| s.parse().expect("learning rate"));
        config.optimizer = match name.as_str() {
            "adagrad" => OptimizerConfig::default().with_learning_rate(lr),
            _ => config.optimizer.with_learning_rate(lr),
        };
    }
    if let Some(steps) = args.get(2) {
        config.max_steps = steps.parse().expect("step count");
    }
    let t = std::time::Instant::now();
    let run = overfit_smoke_test(&config)?;
    let r = &run.report;
    for (i, l) in r.losses.iter().enumerate().step_by(25) {
        println!("step {i:4}: {l:.5}");
    }
    println!(
        "passed {} initial {:.4} final {:.4} ratio {:.4} in {:.1}s",
        r.passed,
        r.initial_loss,
        r.final_loss,
        r.final_loss / r.initial_loss,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

//! Cross-validates the full network on a synthetic corpus and prints the
//! report.
//!
//! `cargo run --release --example benchmark -- [epochs] [folds] [validate_every] [lr] [count]`

use std::time::Instant;

use cf2net::dataset::{generate_synthetic, preprocess_sample};
use cf2net::model::ModelConfig;
use cf2net::nn::OptimizerConfig;
use cf2net::superpixel::SlicParams;
use cf2net::trainer::{cross_validate, TrainConfig};

fn main() -> cf2net::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map_or(d, |s| s.parse().expect("number"));
    let (epochs, folds, every, lr, count) = (
        arg(0, 30.0) as usize,
        arg(1, 2.0) as usize,
        arg(2, 5.0) as usize,
        arg(3, 1e-3),
        arg(4, 200.0) as usize,
    );
    let t = Instant::now();
    let size = 128;
    let sp = SlicParams::default();
    let index = generate_synthetic(count, size, 0)?;
    let samples = index
        .entries
        .iter()
        .map(|e| preprocess_sample(e.id.clone(), &e.load()?, size)?.with_superpixels(&sp))
        .collect::<cf2net::Result<Vec<_>>>()?;
    println!(
        "prepared {} samples in {:.1}s",
        samples.len(),
        t.elapsed().as_secs_f64()
    );
    let config = TrainConfig {
        optimizer: OptimizerConfig::Adam {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        epochs,
        folds,
        validate_every: every,
        model: ModelConfig::desk(16, size),
        superpixel: sp,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let cv = cross_validate(&config, &samples, None)?;
    for f in &cv.folds {
        for r in &f.history.records {
            println!(
                "fold {} epoch {:3}: loss {:.4} val {:?} {:.1}s",
                r.fold, r.epoch, r.loss, r.val_dsc, r.seconds
            );
        }
    }
    print!("{}", cv.report.to_table());
    println!("total {:.1} min", t.elapsed().as_secs_f64() / 60.0);
    Ok(())
}

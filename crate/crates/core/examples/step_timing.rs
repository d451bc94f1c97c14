//! Times one training step (forward + backward) of the network.
//!
//! `cargo run --release --example step_timing -- <width> <size> <batch>`

use std::time::Instant;

use cf2net::model::{Cf2Net, ModelConfig};
use cf2net::nn::{Ctx, Graph, Mode, Tensor};

fn main() -> cf2net::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let (width, size, batch) = (
        args.first().copied().unwrap_or(16),
        args.get(1).copied().unwrap_or(128),
        args.get(2).copied().unwrap_or(4),
    );
    let config = ModelConfig::desk(width, size);
    let (net, store) = Cf2Net::build(&config, 0)?;
    println!("trainable parameters: {}", store.trainable_count());
    let input = Tensor::full([batch, config.input_channels(), size, size], 0.5);
    for round in 0..3 {
        let t0 = Instant::now();
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let mut ctx = Ctx {
            graph: &mut graph,
            store: &store,
            mode: Mode::Train,
        };
        let preds = net.forward(&mut ctx, &x)?.predictions;
        let t1 = Instant::now();
        let mut seeds = vec![(&preds.aux, Tensor::full(preds.aux.shape(), 1.0))];
        if let Some(f) = &preds.fusion {
            seeds.push((f, Tensor::full(f.shape(), 1.0)));
        }
        if let Some(e) = &preds.edge {
            seeds.push((e, Tensor::full(e.shape(), 1.0)));
        }
        let grads = graph.backward(&seeds)?;
        let t2 = Instant::now();
        let eval_t = Instant::now();
        let _ = net.predict(&store, input.clone())?;
        println!(
            "round {round}: forward {:.3}s backward {:.3}s ({} grads) eval-forward {:.3}s",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            grads.params().count(),
            eval_t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

//! Times one forward/backward pass of the desk-scale network on a batch of 16.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rln_core::model::{build_model, ModelConfig};
use rln_core::{Graph, Mode, Tensor};

fn main() -> rln_core::Result<()> {
    let config = ModelConfig::desk();
    let model = build_model::<f32>(&config, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = Tensor::from_fn(&[16, config.input_height, config.input_width, 1], |i| ((i % 97) as f32 / 48.0) - 1.0)?;
    let target = Tensor::full(&[16, 4], 0.5f32)?;
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let x = g.leaf(batch.clone());
        let rec = model.record(&mut g, x, Mode::Train, &mut rng)?;
        let t1 = Instant::now();
        let y = g.leaf(target.clone());
        let loss = g.mse_loss(rec.output, y)?;
        g.backward(loss)?;
        let t2 = Instant::now();
        println!(
            "forward {:.3}s backward {:.3}s loss {}",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            g.value(loss).data()[0]
        );
    }
    Ok(())
}

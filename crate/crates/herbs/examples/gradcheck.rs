//! Finite-difference audit of every submodule of the tiny network.
//!
//! `cargo run --release --example gradcheck -- [samples]`

use herbs::backbone::ImageBatch;
use herbs::gradcheck::{gradcheck_net, GradcheckConfig};
use herbs::net::{HerbsConfig, HerbsNet};
use herbs_tensor::{ChaCha8Rng, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> herbs::Result<()> {
    let samples = std::env::args().nth(1).map_or(20, |s| s.parse().expect("sample count"));
    let net = HerbsNet::new(HerbsConfig::tiny(5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pixels = Tensor::from_fn([2, 3, 32, 32], |_| rng.gen_range(-1.0..1.0));
    let batch = ImageBatch::new(pixels, vec!["a".into(), "b".into()], Some(vec![1, 3]))?;
    let report = gradcheck_net(&net, &batch, GradcheckConfig { samples, ..Default::default() })?;
    for w in &report.weights {
        println!(
            "{:<40} [{:>5}] analytic {:+.8e} numeric {:+.8e} rel {:.1e}",
            w.param, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    print!("{}", report.to_text());
    Ok(())
}

//! Trains each model variant on the same data and seed: backbone only, plus
//! fusion neck, bottom-up heads, both paths, and the full model.
//!
//! `cargo run --release --example ablation_variants -- [seed]`

use herbs::eval::{evaluate, top_k_accuracy, EvalOptions};
use herbs::net::Variant;
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let seed = std::env::args().nth(1).unwrap_or_else(|| "0".into());
    for v in Variant::LADDER {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed)?;
        cfg.set("variant", v.as_str())?;
        let split = cfg.load_data()?;
        let net = cfg.build_net(split.train.num_classes())?;
        let (params, heads) = (net.num_parameters(), net.num_heads());
        let mut trainer = Trainer::new(net, cfg.train)?;
        let start = std::time::Instant::now();
        trainer.fit(&split.train, |_, _| Ok(()))?;
        let aug = cfg.train.augment();
        let test = top_k_accuracy(&evaluate(&trainer.net, &split.test, &aug, EvalOptions::default())?, 1)?;
        let train = top_k_accuracy(&evaluate(&trainer.net, &split.train, &aug, EvalOptions::default())?, 1)?;
        println!(
            "variant {v}: {heads} head(s), {params} parameters, test top-1 {test:.1}, train top-1 {train:.1}, {:.1}s",
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

//! Trains the full model on generated fine-grained data and prints per-epoch
//! losses, then test accuracy of the fused prediction.
//!
//! `cargo run --release --example train_synthetic -- [key=value ...]`

use herbs::data::Phase;
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("overrides look like key=value");
        cfg.set(k, v)?;
    }
    let split = cfg.load_data()?;
    let net = cfg.build_net(split.train.num_classes())?;
    println!("variant {} with {} parameters, {} heads", net.cfg.variant, net.num_parameters(), net.num_heads());
    let mut trainer = Trainer::new(net, cfg.train)?;
    trainer.fit(&split.train, |_, r| {
        println!(
            "epoch {:>3}  T {:>5}  lr {:.4}  herbs {:.4}  m {:.4}  d {:.4}  l {:.4}  r {:.5}  acc {:.3}  {:.1}s",
            r.epoch, r.temperature, r.lr, r.loss_herbs, r.loss_m, r.loss_d, r.loss_l, r.loss_r, r.train_acc, r.seconds
        );
        Ok(())
    })?;

    let aug = cfg.train.augment();
    for (name, set) in [("train", &split.train), ("test", &split.test)] {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut correct = 0;
        for chunk in idx.chunks(32) {
            let batch = set.batch(chunk, Phase::Test, &aug, cfg.train.seed, 0)?;
            let out = trainer.net.predict(&batch)?;
            let labels = batch.labels.as_deref().unwrap_or_default();
            correct += out.bundle.predictions().iter().zip(labels).filter(|(p, l)| p == l).count();
        }
        println!("{name} accuracy {:.3}", correct as f64 / set.len() as f64);
    }
    Ok(())
}

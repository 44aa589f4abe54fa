//! Trains for a few epochs, checkpoints, and resumes to the end of the
//! schedule from the saved file.
//!
//! `cargo run --release --example checkpoint_resume`

use herbs::train::{Checkpoint, RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("epochs", "6")?;
    let split = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
    for _ in 0..3 {
        let r = trainer.run_epoch(&split.train)?;
        println!("epoch {} loss {:.4}", r.epoch, r.loss_herbs);
    }
    let path = std::env::temp_dir().join("herbs_example_checkpoint.bin");
    Checkpoint::capture(&trainer, &cfg, &split.train.class_names).save(&path)?;
    drop(trainer);

    let ckpt = Checkpoint::load(&path)?;
    println!("loaded {} at epoch {}, step {}", path.display(), ckpt.header.epoch, ckpt.header.step);
    let mut trainer = Trainer::resume(ckpt.restore()?, cfg.train, &ckpt)?;
    while !trainer.finished() {
        let r = trainer.run_epoch(&split.train)?;
        println!("epoch {} loss {:.4}", r.epoch, r.loss_herbs);
    }
    std::fs::remove_file(&path)?;
    Ok(())
}

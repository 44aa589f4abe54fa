//! Trains briefly, then writes max-score and target-class heat maps with
//! overlays for the first test images.
//!
//! `cargo run --release --example heatmaps -- [out_dir] [epochs]`

use std::path::PathBuf;

use herbs::eval::{mask_for_input, render_heatmap, save_heatmap, HeatSource};
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/heatmaps".into()));
    let mut cfg = RunConfig::default();
    cfg.set("epochs", &args.next().unwrap_or_else(|| "15".into()))?;
    let split = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
    trainer.fit(&split.train, |_, r| {
        println!("epoch {:>2} loss {:.4}", r.epoch, r.loss_herbs);
        Ok(())
    })?;
    std::fs::create_dir_all(&out)?;
    let aug = cfg.train.augment();
    for sample in split.test.samples.iter().take(6) {
        for source in [HeatSource::MaxScore, HeatSource::TargetClass] {
            let (hm, view) = render_heatmap(&trainer.net, &sample.image, &aug, source)?;
            let [map, overlay] = save_heatmap(&hm, &view, &out, &sample.id)?;
            let line = match &sample.mask {
                Some(m) => {
                    let (inside, outside) =
                        hm.region_means(&mask_for_input(m, sample.image.height, sample.image.width, &aug));
                    format!("patch {inside:.3} elsewhere {outside:.3}")
                }
                None => String::new(),
            };
            println!("{} {} {}", map.display(), overlay.display(), line);
        }
    }
    Ok(())
}

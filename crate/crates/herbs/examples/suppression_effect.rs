//! Trains the same model with and without the dropped-location loss and
//! compares the mean |tanh| of classification-map logits over background
//! pixels image by image.
//!
//! `cargo run --release --example suppression_effect -- [seed]`

use herbs::eval::{evaluate, mask_for_input, render_heatmap, EvalOptions, HeatSource};
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let seed = std::env::args().nth(1).unwrap_or_else(|| "0".into());
    let mut per_image = Vec::new();
    let mut heats = Vec::new();
    for lambda_d in ["0", "5"] {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed)?;
        cfg.set("lambda_d", lambda_d)?;
        let split = cfg.load_data()?;
        let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
        trainer.fit(&split.train, |_, _| Ok(()))?;
        let dump = evaluate(&trainer.net, &split.test, &cfg.train.augment(), EvalOptions::default())?;
        let bg: Vec<f64> = dump.iter().map(|r| r.background_tanh.expect("synthetic images carry masks")).collect();
        let acc = dump.iter().filter(|r| r.fused_pred == r.label).count() as f64 / dump.len() as f64;
        println!(
            "lambda_d = {lambda_d}: mean background |tanh| {:.4}, test accuracy {:.3}",
            bg.iter().sum::<f64>() / bg.len() as f64,
            acc
        );
        per_image.push(bg);
        let aug = cfg.train.augment();
        let mut heat = Vec::new();
        for sample in &split.test.samples {
            let (hm, _) = render_heatmap(&trainer.net, &sample.image, &aug, HeatSource::MaxScore)?;
            let mask =
                mask_for_input(sample.mask.as_ref().expect("mask"), sample.image.height, sample.image.width, &aug);
            let (inside, outside) = hm.region_means(&mask);
            heat.push((inside, outside));
        }
        let n = heat.len() as f64;
        println!(
            "  heat map: inside {:.4} outside {:.4}",
            heat.iter().map(|h| h.0).sum::<f64>() / n,
            heat.iter().map(|h| h.1).sum::<f64>() / n
        );
        heats.push(heat);
    }
    let lower = per_image[0].iter().zip(&per_image[1]).filter(|(off, on)| on < off).count();
    println!("lower with suppression on {lower} of {} test images", per_image[0].len());
    let hl = heats[0].iter().zip(&heats[1]).filter(|(off, on)| on.1 < off.1).count();
    println!("heat-map background lower with suppression on {hl} of {}", heats[0].len());
    Ok(())
}

//! Test accuracy as a function of one hyperparameter.
//!
//! `cargo run --release --example sweep -- [lambda_d|temperature] [epochs]`

use herbs::cli::default_values;
use herbs::eval::{evaluate, plot_series, top_k_accuracy, EvalOptions};
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let mut args = std::env::args().skip(1);
    let param = args.next().unwrap_or_else(|| "lambda_d".into());
    let epochs = args.next().unwrap_or_else(|| "10".into());
    let grid = default_values(&param).expect("lambda_d or temperature");
    let mut base = RunConfig::default();
    base.set("epochs", &epochs)?;
    let split = base.load_data()?;
    let mut points = Vec::new();
    for v in grid {
        let mut cfg = base.clone();
        cfg.set(&param, &v.to_string())?;
        let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
        trainer.fit(&split.train, |_, _| Ok(()))?;
        let dump = evaluate(&trainer.net, &split.test, &cfg.train.augment(), EvalOptions::default())?;
        let top1 = top_k_accuracy(&dump, 1)?;
        println!("{param} = {v:<6} top-1 {top1:.1}");
        points.push((v, top1));
    }
    let path = std::path::PathBuf::from(format!("target/sweep_{}.png", RunConfig::canonical_key(&param)));
    plot_series(&points, RunConfig::canonical_key(&param) == "temperature", &path)?;
    println!("plot written to {}", path.display());
    Ok(())
}

//! Trains the full model, writes the prediction dump and prints the report:
//! per-head accuracy, generic-class precision and false positives, and the
//! false-true rate between the two fusion paths.
//!
//! `cargo run --release --example eval_report -- [dump.jsonl]`

use herbs::eval::{evaluate, write_dump, EvalOptions, EvalReport};
use herbs::train::{RunConfig, Trainer};

fn main() -> herbs::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/predictions.jsonl".into());
    let cfg = RunConfig::default();
    let split = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
    trainer.fit(&split.train, |_, _| Ok(()))?;
    let dump = evaluate(
        &trainer.net,
        &split.test,
        &cfg.train.augment(),
        EvalOptions { selections: true, ..Default::default() },
    )?;
    write_dump(std::path::Path::new(&path), &dump)?;
    // The synthetic groups hold two fine classes each, so report every group.
    let report = EvalReport::build("e", &dump, &split.test.fine_to_generic, &split.test.generic_names, 1)?;
    print!("{}", report.to_text());
    println!("dump written to {path}");
    Ok(())
}

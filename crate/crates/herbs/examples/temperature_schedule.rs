//! Prints the refinement temperature per epoch for a range of initial values.
//!
//! `cargo run --example temperature_schedule -- [epochs]`

use herbs::refinement::{TemperatureMode, TemperatureSchedule};

fn main() -> herbs::Result<()> {
    let epochs: u64 = std::env::args().nth(1).map_or(80, |s| s.parse().expect("epoch count"));
    for mode in [TemperatureMode::Scaled, TemperatureMode::Literal] {
        println!("{} mode", mode.as_str());
        for t in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0] {
            let s = TemperatureSchedule::new(t, mode)?;
            let mut changes = vec![(0, s.at(0))];
            for e in 1..epochs {
                if s.at(e) != s.at(e - 1) {
                    changes.push((e, s.at(e)));
                }
            }
            let steps: Vec<String> = changes.iter().map(|(e, v)| format!("{e}:{v}")).collect();
            println!("  T = {t:<6} interval {:>2}  {}", s.halving_interval(), steps.join(" "));
        }
    }
    Ok(())
}

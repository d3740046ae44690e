//! Writes the bundled two-tone dataset.
//!
//! `cargo run --example make_synthetic -- [PATH] [ROWS] [SEED]`

use adamoge::data::{synthetic_tones, write_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "data/synthetic_two_tone.csv".into());
    let rows = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8000);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(11);
    let table = synthetic_tones(rows, 2, 96, &[3, 17], 10.0, seed)?;
    write_csv(&table, &path)?;
    println!("{path}: {rows} rows, {} variables", table.variables());
    Ok(())
}

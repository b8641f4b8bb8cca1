//! Pre-calculate timestep-aware correction tables for a W3A8 model and print
//! the per-timestep reconstruction coefficients and input bias.
//!
//! ```text
//! cargo run --release --example correction_tables -- [variant]
//! ```

use tacq::harness::pipeline;
use tacq::harness::RunConfig;

fn main() -> tacq::Result<()> {
    let variant = std::env::args().nth(1).unwrap_or_else(|| "tac".into());
    let mut cfg = RunConfig::parse("dataset = gauss2d\ntrain.steps = 2000\n")?;
    cfg.set("correction.variant", &variant)?;
    let trained = pipeline::train_stage(&cfg)?;
    let q = pipeline::quantize_stage(&cfg, &trained.model, &trained.schedule)?;
    match pipeline::correct_stage(&cfg, &trained.model, &q, &trained.schedule)? {
        Some(table) => print!("{}", pipeline::table_summary(&table)),
        None => println!("{variant}: no tables"),
    }
    Ok(())
}

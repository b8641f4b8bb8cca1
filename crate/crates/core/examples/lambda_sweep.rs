//! Energy distance of the fully corrected W3A8 model for λ₁ = 0, 0.1, …, 0.9.
//!
//! ```text
//! cargo run --release --example lambda_sweep -- [n_samples]
//! ```

use tacq::harness::pipeline;
use tacq::harness::RunConfig;

fn main() -> tacq::Result<()> {
    let n = std::env::args().nth(1).unwrap_or_else(|| "2000".into());
    let mut cfg = RunConfig::parse("dataset = gauss2d\n")?;
    cfg.set("sampler.n_samples", &n)?;
    let trained = pipeline::train_stage(&cfg)?;
    let q = pipeline::quantize_stage(&cfg, &trained.model, &trained.schedule)?;
    let rows = pipeline::sweep_lambda(&cfg, &trained.model, &q, &trained.schedule)?;
    print!("{}", pipeline::sweep_csv(&rows));
    Ok(())
}

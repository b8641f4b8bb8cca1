//! Train a full-precision noise model on one of the toy datasets and print
//! its loss curve.
//!
//! ```text
//! cargo run --release --example train -- [gauss2d|rings2d|blobs8x8] [steps]
//! ```

use tacq::harness::pipeline;
use tacq::harness::RunConfig;

fn main() -> tacq::Result<()> {
    let mut args = std::env::args().skip(1);
    let dataset = args.next().unwrap_or_else(|| "gauss2d".into());
    let steps = args.next().unwrap_or_else(|| "2000".into());

    let mut cfg = RunConfig::parse(&format!("dataset = {dataset}\n"))?;
    cfg.set("train.steps", &steps)?;
    cfg.set("train.log_every", "250")?;
    let trained = pipeline::train_stage(&cfg)?;
    println!("{} ({} parameter tensors)", cfg.model_spec().arch, trained.model.params().len());
    print!("{}", pipeline::loss_curve_csv(&trained.loss_curve));
    Ok(())
}

//! Quantize a trained model at several bit widths and report the activation
//! ranges and the relative noise-estimate error at a few timesteps.
//!
//! ```text
//! cargo run --release --example quantize
//! ```

use tacq::correction::rqnsr;
use tacq::harness::pipeline;
use tacq::harness::RunConfig;
use tacq::models::NoiseEstimator;
use tacq::tensors::{Rng, Tensor};

fn main() -> tacq::Result<()> {
    let mut cfg = RunConfig::parse("dataset = gauss2d\ntrain.steps = 2000\n")?;
    let trained = pipeline::train_stage(&cfg)?;
    let schedule = &trained.schedule;
    let x = Tensor::randn(&mut Rng::new(9), &[512, 2, 1, 1]);

    for (w, a) in [(8, 8), (4, 8), (3, 8), (3, 32)] {
        cfg.set("quant.weight_bits", &w.to_string())?;
        cfg.set("quant.act_bits", &a.to_string())?;
        let q = pipeline::quantize_stage(&cfg, &trained.model, schedule)?;
        let mut line = format!("W{w}A{a}  rQNSR");
        for t in [999.0, 500.0, 100.0, 10.0] {
            let tv = vec![t; x.rows()];
            let eps = trained.model.estimate(&x, &tv)?;
            let eps_hat = q.estimate(&x, &tv)?;
            line += &format!("  t={t}: {:.3}", rqnsr(&eps_hat, &eps, 0)?);
        }
        println!("{line}");
    }

    let q = pipeline::quantize_stage(&cfg, &trained.model, schedule)?;
    for (name, (lo, hi)) in trained.model.site_names().iter().zip(q.act_ranges()) {
        println!("{name:<10} [{lo:>9.4}, {hi:>9.4}]");
    }
    Ok(())
}

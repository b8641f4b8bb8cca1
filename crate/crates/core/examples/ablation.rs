//! Train a gauss2d model, quantize it to W3A8 and compare the correction
//! variants against the full-precision reference.
//!
//! ```text
//! cargo run --release --example ablation -- [n_samples] [seed]
//! ```

use std::time::Instant;

use tacq::correction::Variant;
use tacq::harness::pipeline;
use tacq::harness::RunConfig;

fn main() -> tacq::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().map_or(Ok(2000), |s| s.parse()).expect("n_samples must be an integer");
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");

    let mut cfg = RunConfig::parse("dataset = gauss2d\n")?;
    cfg.set("seed", &seed.to_string())?;
    cfg.set("sampler.n_samples", &n.to_string())?;
    let schedule = cfg.schedule()?;

    let start = Instant::now();
    let trained = pipeline::train_stage(&cfg)?;
    println!("trained in {:.1}s, final loss {:.4}", start.elapsed().as_secs_f64(), trained.loss_curve.last().map_or(f64::NAN, |l| l.1));
    let q = pipeline::quantize_stage(&cfg, &trained.model, &schedule)?;

    let start = Instant::now();
    let variants = [Variant::Baseline, Variant::Ibc, Variant::FirstStep, Variant::NerIbc, Variant::Tac, Variant::EstBias, Variant::Eq22];
    let run = pipeline::ablate(&cfg, &trained.model, &q, &schedule, &variants)?;
    println!("ablation over {n} samples in {:.1}s", start.elapsed().as_secs_f64());
    for (v, r) in &run.reports {
        println!("{:<12} {:<48} energy={:.6}", v.to_string(), v.label(), r.energy);
    }
    Ok(())
}

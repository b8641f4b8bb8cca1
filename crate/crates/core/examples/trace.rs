//! Lock-stepped full-precision and W3A8 trajectories: per-step input and
//! estimate discrepancies and the one-step error bound, with and without
//! correction.
//!
//! ```text
//! cargo run --release --example trace -- [chains]
//! ```

use tacq::correction::{paired_trace, Variant};
use tacq::harness::pipeline;
use tacq::harness::RunConfig;
use tacq::metrics::trace_diagnostics;

fn main() -> tacq::Result<()> {
    let chains = std::env::args().nth(1).map_or(200, |s| s.parse().expect("chains must be an integer"));
    let mut cfg = RunConfig::parse("dataset = gauss2d\nsampler.steps = 20\n")?;
    let trained = pipeline::train_stage(&cfg)?;
    let schedule = &trained.schedule;
    let q = pipeline::quantize_stage(&cfg, &trained.model, schedule)?;
    let sampler = cfg.sampler_config(schedule)?;

    for v in [Variant::Baseline, Variant::Tac] {
        cfg.variant = v;
        let table = pipeline::correct_stage(&cfg, &trained.model, &q, schedule)?;
        let tr = paired_trace(&trained.model, &q, schedule, &sampler, table.as_ref(), chains, &cfg.stage_rng("trace"))?;
        let report = trace_diagnostics(&tr)?;
        println!("# {v}: final mean |dx0| = {:.4}, min slack {:.2e}", report.final_mean, report.min_slack());
        print!("{}", report.to_csv());
    }
    Ok(())
}

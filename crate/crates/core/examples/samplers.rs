//! DDIM and DPM-Solver++(2S) on the same full-precision model, scored
//! against fresh data at several step counts.
//!
//! ```text
//! cargo run --release --example samplers
//! ```

use tacq::harness::pipeline;
use tacq::harness::RunConfig;
use tacq::metrics::energy_distance;
use tacq::models::make_toy_dataset;
use tacq::samplers::{sample, Record, SamplerConfig, SamplerKind};
use tacq::tensors::Rng;

fn main() -> tacq::Result<()> {
    let cfg = RunConfig::parse("dataset = gauss2d\n")?;
    let trained = pipeline::train_stage(&cfg)?;
    let schedule = &trained.schedule;
    let data = make_toy_dataset(cfg.dataset, 2000, 12345)?.reshape(&[2000, 2])?;

    for kind in [SamplerKind::Ddim, SamplerKind::DpmSolver2S] {
        for steps in [5, 10, 20, 50] {
            let sampler = SamplerConfig::new(kind, schedule, steps, 0.0)?;
            let run = sample(&trained.model, schedule, &sampler, None, 2000, &Rng::new(1), Record::Nothing)?;
            let e = energy_distance(&run.samples.reshape(&[2000, 2])?, &data)?;
            println!("{kind:<9} M={steps:<3} energy={e:.5}  ({:.2}s)", run.elapsed.as_secs_f64());
        }
    }
    Ok(())
}

//! Record the activations of a W3A8 sampling run and print how the network
//! input distribution drifts across timesteps.
//!
//! ```text
//! cargo run --release --example histograms -- [site]
//! ```

use tacq::harness::pipeline;
use tacq::harness::RunConfig;
use tacq::samplers::Record;

fn main() -> tacq::Result<()> {
    let site = std::env::args().nth(1).unwrap_or_else(|| "input".into());
    let cfg = RunConfig::parse("dataset = gauss2d\ntrain.steps = 2000\nsampler.steps = 10\n")?;
    let trained = pipeline::train_stage(&cfg)?;
    let q = pipeline::quantize_stage(&cfg, &trained.model, &trained.schedule)?;
    let run = pipeline::sample_stage(&cfg, &q, &trained.schedule, None, 500, Record::Activations)?;
    let traj = run.trajectory.expect("recorded");
    print!("{}", pipeline::hist_csv(&traj, &trained.model.site_names(), &site, &[0, 5, 9], 12)?);
    Ok(())
}

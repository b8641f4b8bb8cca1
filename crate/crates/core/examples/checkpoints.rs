//! Write model, quantized model, table and sample checkpoints, read them back
//! and confirm the quantized sampler reproduces the same output.
//!
//! ```text
//! cargo run --release --example checkpoints -- [dir]
//! ```

use std::path::PathBuf;

use tacq::harness::checkpoint::{qmodel_from_container, qmodel_to_container, table_from_container, table_to_container};
use tacq::harness::{pipeline, Container, RunConfig};
use tacq::samplers::Record;

fn main() -> tacq::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "checkpoints".into()));
    std::fs::create_dir_all(&dir)?;
    let cfg = RunConfig::parse("dataset = gauss2d\ntrain.steps = 1000\nsampler.steps = 20\n")?;
    let t = pipeline::train_stage(&cfg)?;
    let q = pipeline::quantize_stage(&cfg, &t.model, &t.schedule)?;
    let table = pipeline::correct_stage(&cfg, &t.model, &q, &t.schedule)?.expect("tac tables");

    qmodel_to_container(&q, &t.schedule).write(&dir.join("qmodel.tacq"))?;
    table_to_container(&table, &t.schedule).write(&dir.join("table.tacq"))?;
    let q2 = qmodel_from_container(&Container::read(&dir.join("qmodel.tacq"))?)?;
    let table2 = table_from_container(&Container::read(&dir.join("table.tacq"))?)?;

    let a = pipeline::sample_stage(&cfg, &q, &t.schedule, Some(&table), 500, Record::Nothing)?.samples;
    let b = pipeline::sample_stage(&cfg, &q2, &t.schedule, Some(&table2), 500, Record::Nothing)?.samples;
    let bytes = std::fs::metadata(dir.join("qmodel.tacq"))?.len() + std::fs::metadata(dir.join("table.tacq"))?.len();
    println!("{bytes} bytes written to {}; reloaded run identical: {}", dir.display(), a == b);
    Ok(())
}

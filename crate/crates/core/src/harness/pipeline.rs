//! Experiment stages: train, quantize, precalculate, sample, evaluate, and
//! the ablation / λ₁ sweep drivers built from them.
//!
//! Each stage draws from its own named stream of the root seed, so any
//! stage can be rerun alone with identical results. The full-precision
//! reference and every quantized run use the same `sample` stream and
//! therefore start from the same `x_T`.

use std::fmt::Write as _;

use crate::correction::{precalculate, CorrectionTable, Variant};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{ablation_summary, energy_distance, AblationTable, DistReport};
use crate::models::{make_toy_dataset, train, NoiseEstimator, NoiseModel};
use crate::quant::QuantizedModel;
use crate::samplers::{sample, Record, SampleRun, Trajectory};

use super::config::RunConfig;

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: NoiseModel,
    pub schedule: NoiseSchedule,
    pub loss_curve: Vec<(usize, f64)>,
}

pub fn train_stage(cfg: &RunConfig) -> Result<Trained> {
    let schedule = cfg.schedule()?;
    let data = make_toy_dataset(cfg.dataset, cfg.data_size, cfg.stage_rng("data").next_u64())?;
    let mut init = cfg.stage_rng("init");
    let model = NoiseModel::new(cfg.model_spec(), &mut init, false)?;
    let out = train(model, &data, &schedule, &cfg.train_config())?;
    Ok(Trained {
        model: out.model,
        schedule,
        loss_curve: out.loss_curve,
    })
}

pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        let _ = writeln!(s, "{step},{loss}");
    }
    s
}

/// Quantize weights and calibrate activation ranges on sampler trajectories.
pub fn quantize_stage(cfg: &RunConfig, model: &NoiseModel, schedule: &NoiseSchedule) -> Result<QuantizedModel> {
    let mut q = QuantizedModel::new(model.clone(), cfg.quant.weight_bits, cfg.quant.act_bits, cfg.quant.scheme)?;
    let sampler = cfg.sampler_config(schedule)?;
    q.calibrate_activations(schedule, &sampler, cfg.quant.n_calib, &cfg.stage_rng("calib"))?;
    Ok(q)
}

/// Correction tables for the configured variant, or `None` for the baseline.
pub fn correct_stage(
    cfg: &RunConfig,
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
) -> Result<Option<CorrectionTable>> {
    tables_for(cfg, cfg.variant, fp, q, schedule)
}

fn tables_for(
    cfg: &RunConfig,
    variant: Variant,
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
) -> Result<Option<CorrectionTable>> {
    if variant == Variant::Baseline {
        return Ok(None);
    }
    let sampler = cfg.sampler_config(schedule)?;
    let ccfg = cfg.correction.for_variant(variant);
    precalculate(fp, q, schedule, &sampler, &ccfg, &cfg.stage_rng("correct")).map(Some)
}

/// Per-point K range and mask coverage, one line per evaluation point.
pub fn table_summary(table: &CorrectionTable) -> String {
    let c = table.k.shape()[1];
    let mut s = String::from("point,t,k_min,k_max,b_max_abs,tau,mask_coverage\n");
    for (p, t) in table.grid.eval_points().iter().enumerate() {
        let k = table.k_row(p);
        let (lo, hi) = k.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let b = table.b_row(p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let _ = writeln!(s, "{p},{t},{lo},{hi},{b},{},{}", table.tau[p], table.mask_coverage[p]);
        debug_assert_eq!(k.len(), c);
    }
    s
}

pub fn sample_stage(
    cfg: &RunConfig,
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    table: Option<&CorrectionTable>,
    n: usize,
    record: Record,
) -> Result<SampleRun> {
    let sampler = cfg.sampler_config(schedule)?;
    sample(model, schedule, &sampler, table, n, &cfg.stage_rng("sample"), record)
}

/// Full-precision reference samples for quality scoring.
pub fn reference_samples(cfg: &RunConfig, fp: &NoiseModel, schedule: &NoiseSchedule) -> Result<SampleRun> {
    sample_stage(cfg, fp, schedule, None, cfg.sampler.n_samples, Record::Nothing)
}

fn flat(x: &crate::tensors::Tensor) -> Result<crate::tensors::Tensor> {
    let n = x.rows();
    let d = x.row_len();
    x.clone().reshape(&[n, d])
}

pub fn evaluate(samples: &crate::tensors::Tensor, reference: &crate::tensors::Tensor) -> Result<DistReport> {
    if samples.shape()[1..] != reference.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "eval",
            left: samples.shape().to_vec(),
            right: reference.shape().to_vec(),
        });
    }
    if !samples.all_finite() || !reference.all_finite() {
        return Err(Error::numeric("non-finite values in the sample sets"));
    }
    DistReport::compute(&flat(samples)?, &flat(reference)?)
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub table: AblationTable,
    pub reports: Vec<(Variant, DistReport)>,
}

impl AblationRun {
    pub fn energy(&self, v: Variant) -> Option<f64> {
        self.reports.iter().find(|(w, _)| *w == v).map(|(_, r)| r.energy)
    }

    /// `variant,row,energy_distance,delta_vs_baseline`, sorted by distance.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,row,energy_distance,delta_vs_baseline\n");
        for r in &self.table.rows {
            let row = r.label.parse::<Variant>().map(|v| v.label()).unwrap_or("");
            let _ = writeln!(s, "{},\"{row}\",{},{}", r.label, r.energy, r.delta);
        }
        s
    }
}

/// Evaluate each variant against a shared full-precision reference.
pub fn ablate(
    cfg: &RunConfig,
    fp: &NoiseModel,
    q: &QuantizedModel,
    schedule: &NoiseSchedule,
    variants: &[Variant],
) -> Result<AblationRun> {
    let reference = reference_samples(cfg, fp, schedule)?.samples;
    let mut reports = Vec::with_capacity(variants.len());
    for &v in variants {
        let table = tables_for(cfg, v, fp, q, schedule).map_err(|e| e.context(format!("variant {v}")))?;
        let run = sample_stage(cfg, q, schedule, table.as_ref(), cfg.sampler.n_samples, Record::Nothing)?;
        reports.push((v, evaluate(&run.samples, &reference)?));
    }
    let named: Vec<(String, DistReport)> = reports.iter().map(|(v, r)| (v.to_string(), r.clone())).collect();
    Ok(AblationRun {
        table: ablation_summary(&named),
        reports,
    })
}

/// `(λ₁, energy distance)` for each configured λ₁, all with the same seeds.
pub fn sweep_lambda(cfg: &RunConfig, fp: &NoiseModel, q: &QuantizedModel, schedule: &NoiseSchedule) -> Result<Vec<(f64, f64)>> {
    let reference = flat(&reference_samples(cfg, fp, schedule)?.samples)?;
    let mut out = Vec::with_capacity(cfg.sweep_lambda1.len());
    for &l1 in &cfg.sweep_lambda1 {
        if !(0.0..1.0).contains(&l1) {
            return Err(Error::invalid(format!("lambda1 = {l1} must lie in [0, 1)")));
        }
        let mut c = cfg.clone();
        c.correction.lambda1 = l1;
        let table = correct_stage(&c, fp, q, schedule)?;
        let run = sample_stage(&c, q, schedule, table.as_ref(), c.sampler.n_samples, Record::Nothing)?;
        out.push((l1, energy_distance(&flat(&run.samples)?, &reference)?));
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("lambda1,energy_distance\n");
    for (l, e) in rows {
        let _ = writeln!(s, "{l},{e}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; a constant input gives a single bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if values.is_empty() {
        return Err(Error::invalid("histogram of an empty record"));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::numeric("histogram of non-finite values"));
    }
    if lo == hi {
        return Ok(vec![Bin {
            lo,
            hi,
            count: values.len(),
        }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

/// Histogram CSV of one activation site at the selected evaluation points
/// (all points when `points` is empty).
pub fn hist_csv(traj: &Trajectory, sites: &[String], site: &str, points: &[usize], bins: usize) -> Result<String> {
    let s = sites
        .iter()
        .position(|n| n == site)
        .or_else(|| site.parse::<usize>().ok().filter(|&i| i < sites.len()))
        .ok_or_else(|| Error::invalid(format!("no activation site `{site}` in the dump (have: {})", sites.join(", "))))?;
    let all: Vec<usize> = (0..traj.activations.len()).collect();
    let points = if points.is_empty() { &all[..] } else { points };
    let mut out = String::from("point,t,site,bin_lo,bin_hi,count\n");
    for &p in points {
        let values = traj
            .activations
            .get(p)
            .and_then(|a| a.get(s))
            .ok_or_else(|| Error::invalid(format!("dump has no activations for point {p}")))?;
        for b in histogram(values, bins).map_err(|e| e.context(format!("point {p}")))? {
            let _ = writeln!(out, "{p},{},{},{},{},{}", traj.times[p], sites[s], b.lo, b.hi, b.count);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts() {
        let h = histogram(&[2.0; 7], 10).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].count, 7);
        let v: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let h = histogram(&v, 8).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 100);
        assert_eq!(h.len(), 8);
        assert!(histogram(&[], 3).is_err());
    }

    #[test]
    fn hist_csv_missing_record() {
        let traj = Trajectory {
            times: vec![5.0],
            inputs: vec![],
            activations: vec![vec![vec![1.0, 2.0]]],
        };
        let names = vec!["input".to_string()];
        assert!(hist_csv(&traj, &names, "input", &[0], 4).is_ok());
        assert!(hist_csv(&traj, &names, "fc9", &[0], 4).is_err());
        assert!(hist_csv(&traj, &names, "input", &[3], 4).is_err());
    }
}

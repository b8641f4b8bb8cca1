//! Step-wise discrepancy diagnostics and two-sample distances.
//!
//! Norms are Euclidean over each flattened sample, then averaged over the
//! batch.

use std::fmt::Write as _;

use crate::correction::{rqnsr, PairedTrace};
use crate::error::{Error, Result};
use crate::tensors::{Rng, Tensor};

/// Number of random directions used by [`sliced_wasserstein`].
pub const SLICED_PROJECTIONS: usize = 128;
const SLICED_SEED: u64 = 0x5eed_5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    /// `‖x̂_t - x_t‖` before input correction.
    pub dx: f64,
    /// `‖x̃_t - x_t‖`, the discrepancy the network actually sees.
    pub dx_corrected: f64,
    /// `‖ε̂_t - ε_t‖` of the raw quantized estimate.
    pub deps_raw: f64,
    /// `‖ε̃_t - ε_t‖` after reconstruction.
    pub deps: f64,
    /// Measured `‖Δx_{t-1}‖`.
    pub dx_next: f64,
    /// `|a| ‖Δx_t‖ + |b| ‖Δε_t‖`, averaged.
    pub bound: f64,
    /// Max elementwise gap between the decomposition and the measured `Δx_{t-1}`.
    pub identity_residual: f64,
    pub rqnsr: Vec<f64>,
}

impl StepDiagnostics {
    pub fn slack(&self) -> f64 {
        self.bound - self.dx_next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub steps: Vec<StepDiagnostics>,
    pub final_mean: f64,
    pub final_std: f64,
    pub final_max: f64,
    pub samples: usize,
}

impl TraceReport {
    pub fn max_identity_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.identity_residual).fold(0.0, f64::max)
    }

    pub fn min_slack(&self) -> f64 {
        self.steps.iter().map(StepDiagnostics::slack).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let channels = self.steps.first().map_or(0, |s| s.rqnsr.len());
        let mut out = String::from("step,t,dx,dx_corrected,deps_raw,deps,dx_next,bound,slack,identity_residual");
        for c in 0..channels {
            let _ = write!(out, ",rqnsr_c{c}");
        }
        out.push('\n');
        for (i, s) in self.steps.iter().enumerate() {
            let _ = write!(
                out,
                "{i},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.dx,
                s.dx_corrected,
                s.deps_raw,
                s.deps,
                s.dx_next,
                s.bound,
                s.slack(),
                s.identity_residual
            );
            for r in &s.rqnsr {
                let _ = write!(out, ",{r}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_kv(&self) -> String {
        format!(
            "samples={}\nsteps={}\nfinal_dx_mean={}\nfinal_dx_std={}\nfinal_dx_max={}\nmax_identity_residual={}\nmin_bound_slack={}\n",
            self.samples,
            self.steps.len(),
            self.final_mean,
            self.final_std,
            self.final_max,
            self.max_identity_residual(),
            self.min_slack()
        )
    }
}

fn row_norms(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-step error decomposition of a lock-stepped trace.
///
/// With shared noise the quantized update minus the full-precision update is
/// `a (x̃_t - x_t) + b (ε̃_t - ε_t)` exactly, so each step reports the measured
/// next discrepancy next to its triangle-inequality bound.
pub fn trace_diagnostics(trace: &PairedTrace) -> Result<TraceReport> {
    if !trace.shares_noise() {
        return Err(Error::invalid("trace lanes used different noise; the decomposition does not apply"));
    }
    let steps = trace.steps();
    if steps == 0 {
        return Err(Error::invalid("empty trace"));
    }
    let channels = trace.x[0].shape()[1];
    let mut out = Vec::with_capacity(steps);
    for p in 0..steps {
        let c = &trace.coefs[p];
        let dx_in = trace.x_tilde[p].sub(&trace.x[p])?;
        let de = trace.eps_tilde[p].sub(&trace.eps[p])?;
        let measured = trace.x_hat_at(p + 1).sub(trace.x_at(p + 1))?;
        let mut residual = 0.0_f64;
        for ((m, x), e) in measured.data().iter().zip(dx_in.data()).zip(de.data()) {
            residual = residual.max((c.x_coef * x + c.eps_coef * e - m).abs());
        }
        let nx = row_norms(&trace.x_tilde[p], &trace.x[p]);
        let ne = row_norms(&trace.eps_tilde[p], &trace.eps[p]);
        let bound: Vec<f64> = nx.iter().zip(&ne).map(|(x, e)| c.x_coef.abs() * x + c.eps_coef.abs() * e).collect();
        out.push(StepDiagnostics {
            t: trace.times[p],
            dx: mean(&row_norms(&trace.x_hat[p], &trace.x[p])),
            dx_corrected: mean(&nx),
            deps_raw: mean(&row_norms(&trace.eps_hat[p], &trace.eps[p])),
            deps: mean(&ne),
            dx_next: mean(&row_norms(trace.x_hat_at(p + 1), trace.x_at(p + 1))),
            bound: mean(&bound),
            identity_residual: residual,
            rqnsr: (0..channels)
                .map(|ch| rqnsr(&trace.eps_hat[p], &trace.eps[p], ch))
                .collect::<Result<_>>()?,
        });
    }
    let fin = row_norms(&trace.final_x_hat, &trace.final_x);
    let m = mean(&fin);
    let var = fin.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / fin.len() as f64;
    Ok(TraceReport {
        steps: out,
        final_mean: m,
        final_std: var.sqrt(),
        final_max: fin.iter().copied().fold(0.0, f64::max),
        samples: fin.len(),
    })
}

fn as_matrix(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.rank() == 0 {
        return Err(Error::invalid(format!("{what}: expected a batch of samples")));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid(format!("{what}: need at least 2 samples, got {n}")));
    }
    Ok((n, x.row_len()))
}

/// Sum over all ordered pairs `(i, j)` of `‖a_i - b_j‖`, accumulated row by row.
fn pair_sum(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.row_len();
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for ra in ad.chunks_exact(d.max(1)) {
        let mut row = 0.0;
        for rb in bd.chunks_exact(d.max(1)) {
            let mut s = 0.0;
            for k in 0..d {
                let t = ra[k] - rb[k];
                s += t * t;
            }
            row += s.sqrt();
        }
        total += row;
    }
    total
}

/// `2 E‖A - B‖ - E‖A - A'‖ - E‖B - B'‖` as a V-statistic over all pairs.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, d) = as_matrix(a, "energy distance")?;
    let (m, d2) = as_matrix(b, "energy distance")?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "energy distance",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ab = pair_sum(a, b) / (n as f64 * m as f64);
    let aa = pair_sum(a, a) / (n as f64 * n as f64);
    let bb = pair_sum(b, b) / (m as f64 * m as f64);
    Ok(2.0 * ab - aa - bb)
}

/// Mean 1-Wasserstein distance of random 1-D projections; needs equal sample counts.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, d) = as_matrix(a, "sliced Wasserstein")?;
    let (m, d2) = as_matrix(b, "sliced Wasserstein")?;
    if d != d2 || n != m {
        return Err(Error::ShapeMismatch {
            op: "sliced Wasserstein",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut rng = Rng::new(SLICED_SEED);
    let mut dir = vec![0.0; d];
    let mut total = 0.0;
    for _ in 0..SLICED_PROJECTIONS {
        rng.fill_normal(&mut dir);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |x: &Tensor| {
            let mut p: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(&dir).map(|(u, w)| u * w).sum()).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(a), project(b));
        total += pa.iter().zip(&pb).map(|(u, v)| (u - v).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / SLICED_PROJECTIONS as f64)
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistReport {
    pub energy: f64,
    /// `mean(samples) - mean(reference)` per flattened coordinate.
    pub mean_gap: Vec<f64>,
    pub std_gap: Vec<f64>,
    pub n_samples: usize,
    pub n_reference: usize,
}

impl DistReport {
    pub fn compute(samples: &Tensor, reference: &Tensor) -> Result<Self> {
        let energy = energy_distance(samples, reference)?;
        let (ms, ss) = column_moments(samples);
        let (mr, sr) = column_moments(reference);
        Ok(Self {
            energy,
            mean_gap: ms.iter().zip(&mr).map(|(a, b)| a - b).collect(),
            std_gap: ss.iter().zip(&sr).map(|(a, b)| a - b).collect(),
            n_samples: samples.rows(),
            n_reference: reference.rows(),
        })
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        format!(
            "energy_distance={}\nn_samples={}\nn_reference={}\nmean_gap={}\nstd_gap={}\n",
            self.energy,
            self.n_samples,
            self.n_reference,
            join(&self.mean_gap),
            join(&self.std_gap)
        )
    }

    /// One row per coordinate: `dim,mean_gap,std_gap`, preceded by a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("dim,mean_gap,std_gap\nenergy,{},{}|{}\n", self.energy, self.n_samples, self.n_reference);
        for (i, (m, s)) in self.mean_gap.iter().zip(&self.std_gap).enumerate() {
            let _ = writeln!(out, "{i},{m},{s}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("dim,mean_gap,std_gap") {
            return Err(Error::format("distance report: bad CSV header"));
        }
        let bad = || Error::format("distance report: malformed CSV");
        let summary: Vec<&str> = lines.next().ok_or_else(bad)?.split(',').collect();
        if summary.len() != 3 || summary[0] != "energy" {
            return Err(bad());
        }
        let (ns, nr) = summary[2].split_once('|').ok_or_else(bad)?;
        let mut report = Self {
            energy: summary[1].parse().map_err(|_| bad())?,
            mean_gap: Vec::new(),
            std_gap: Vec::new(),
            n_samples: ns.parse().map_err(|_| bad())?,
            n_reference: nr.parse().map_err(|_| bad())?,
        };
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad());
            }
            report.mean_gap.push(f[1].parse().map_err(|_| bad())?);
            report.std_gap.push(f[2].parse().map_err(|_| bad())?);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub energy: f64,
    /// `energy - energy(baseline)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,energy_distance,delta_vs_baseline\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.label, r.energy, r.delta);
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!("baseline={}\n", self.baseline);
        for r in &self.rows {
            let _ = writeln!(out, "{}.energy_distance={}\n{}.delta={}", r.label, r.energy, r.label, r.delta);
        }
        out
    }
}

/// Rows sorted by energy distance; the baseline is the run labelled
/// `baseline`, or the first run when none is.
pub fn ablation_summary(runs: &[(String, DistReport)]) -> AblationTable {
    let base = runs
        .iter()
        .find(|(l, _)| l == "baseline")
        .or(runs.first())
        .map(|(l, r)| (l.clone(), r.energy));
    let (baseline, base_e) = base.unwrap_or_default();
    let mut rows: Vec<AblationRow> = runs
        .iter()
        .map(|(l, r)| AblationRow {
            label: l.clone(),
            energy: r.energy,
            delta: r.energy - base_e,
        })
        .collect();
    rows.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    AblationTable { baseline, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::Rng;
    use proptest::prelude::*;

    fn normal(seed: u64, n: usize, shift: f64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::randn(&mut rng, &[n, 1]).map(|v| v + shift)
    }

    fn naive_energy(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for x in a {
            for y in b {
                ab += (x - y).abs();
            }
            for y in a {
                aa += (x - y).abs();
            }
        }
        for x in b {
            for y in b {
                bb += (x - y).abs();
            }
        }
        let (n, m) = (a.len() as f64, b.len() as f64);
        2.0 * ab / (n * m) - aa / (n * n) - bb / (m * m)
    }

    #[test]
    fn energy_of_identical_sets_is_zero() {
        let a = normal(1, 300, 0.0);
        assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn energy_needs_two_samples() {
        let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(energy_distance(&a, &b).is_err());
        let c = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(energy_distance(&normal(0, 5, 0.0), &c).is_err());
    }

    #[test]
    fn energy_unit_shift_gaussians() {
        let a = normal(2, 5000, 0.0);
        let b = normal(3, 5000, 1.0);
        let e = energy_distance(&a, &b).unwrap();
        let naive = naive_energy(a.data(), b.data());
        assert!((e - naive).abs() < 1e-12, "{e} vs {naive}");
        // Population value: 2 E|N(1,2)| - 2 E|N(0,2)|.
        let s = 2f64.sqrt();
        let e_abs_shift = s * (2.0 / std::f64::consts::PI).sqrt() * (-0.25f64).exp() + (1.0 - 2.0 * normal_cdf(-1.0 / s));
        let e_abs_same = s * (2.0 / std::f64::consts::PI).sqrt();
        let population = 2.0 * e_abs_shift - 2.0 * e_abs_same;
        assert!((e - population).abs() < 0.03, "{e} vs {population}");
    }

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 erf approximation (|err| < 1.5e-7).
        let z = x.abs() / 2f64.sqrt();
        let t = 1.0 / (1.0 + 0.3275911 * z);
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-z * z).exp();
        if x >= 0.0 {
            0.5 * (1.0 + erf)
        } else {
            0.5 * (1.0 - erf)
        }
    }

    #[test]
    fn sliced_wasserstein_detects_shift() {
        let a = normal(4, 400, 0.0).reshape(&[200, 2]).unwrap();
        let b = normal(5, 400, 0.0).reshape(&[200, 2]).unwrap();
        let c = normal(5, 400, 3.0).reshape(&[200, 2]).unwrap();
        assert_eq!(sliced_wasserstein(&a, &a).unwrap(), 0.0);
        assert!(sliced_wasserstein(&a, &c).unwrap() > 5.0 * sliced_wasserstein(&a, &b).unwrap());
    }

    #[test]
    fn dist_report_csv_round_trip() {
        let a = normal(6, 60, 0.3).reshape(&[20, 3]).unwrap();
        let b = normal(7, 60, 0.0).reshape(&[20, 3]).unwrap();
        let r = DistReport::compute(&a, &b).unwrap();
        assert_eq!(DistReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(r.to_kv().starts_with("energy_distance="));
        assert!(DistReport::from_csv("nope").is_err());
    }

    #[test]
    fn ablation_rows_and_deltas() {
        let rep = |e: f64| DistReport {
            energy: e,
            mean_gap: vec![],
            std_gap: vec![],
            n_samples: 2,
            n_reference: 2,
        };
        let one = ablation_summary(&[("baseline".into(), rep(0.4))]);
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.rows[0].delta, 0.0);
        let two = ablation_summary(&[("baseline".into(), rep(0.4)), ("tac".into(), rep(0.1))]);
        assert_eq!(two.rows[0].label, "tac");
        assert_eq!(two.row("tac").unwrap().delta, 0.1 - 0.4);
        assert!(two.to_csv().lines().count() == 3);
    }

    fn trace_pair(bits_w: u32, bits_a: u32) -> PairedTrace {
        use crate::diffusion::NoiseSchedule;
        use crate::models::{ModelSpec, NoiseModel};
        use crate::quant::{QuantizedModel, Scheme};
        use crate::samplers::SamplerConfig;
        let s = NoiseSchedule::ddpm_default();
        let fp = NoiseModel::new(ModelSpec::mlp([2, 1, 1]), &mut Rng::new(0), false).unwrap();
        let sampler = SamplerConfig::ddim(&s, 20, 1.0).unwrap();
        let mut q = QuantizedModel::new(fp.clone(), bits_w, bits_a, Scheme::MinmaxSymmetric).unwrap();
        q.calibrate_activations(&s, &sampler, 16, &Rng::new(1)).unwrap();
        crate::correction::paired_trace(&fp, &q, &s, &sampler, None, 6, &Rng::new(2)).unwrap()
    }

    #[test]
    fn identical_lanes_have_no_discrepancy() {
        let r = trace_diagnostics(&trace_pair(32, 32)).unwrap();
        for s in &r.steps {
            assert_eq!((s.dx, s.deps, s.dx_next, s.bound, s.identity_residual), (0.0, 0.0, 0.0, 0.0, 0.0));
        }
        assert_eq!(r.final_max, 0.0);
    }

    #[test]
    fn decomposition_identity_and_bound() {
        let r = trace_diagnostics(&trace_pair(3, 8)).unwrap();
        assert!(r.final_mean > 0.0);
        assert!(r.max_identity_residual() <= 1e-10);
        assert!(r.min_slack() >= -1e-9);
        assert!(r.steps.iter().all(|s| s.rqnsr.iter().all(|v| v.is_finite() && *v >= 0.0)));
        assert_eq!(r.to_csv().lines().count(), 21);
    }

    #[test]
    fn unshared_noise_rejected() {
        let mut t = trace_pair(3, 8);
        t.z_hat[0] = t.z_hat[0].scale(2.0);
        assert!(trace_diagnostics(&t).is_err());
    }

    proptest! {
        #[test]
        fn energy_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 2usize..40, m in 2usize..40, shift in -2.0f64..2.0) {
            let a = normal(seed, n * 2, 0.0).reshape(&[n, 2]).unwrap();
            let b = normal(seed + 1, m * 2, shift).reshape(&[m, 2]).unwrap();
            let e1 = energy_distance(&a, &b).unwrap();
            let e2 = energy_distance(&b, &a).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12);
            prop_assert!(e1 >= -1e-12);
            prop_assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
        }
    }
}

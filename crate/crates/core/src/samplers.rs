//! DDIM and DPM-Solver++(2S) sampling with optional correction tables.
//!
//! Chain `j` of a run draws its initial noise and every injected `z` from
//! `rng.child(j)`, so results do not depend on how chains are batched and
//! paired runs (full precision vs quantized, corrected vs not) share all
//! stochastic inputs.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::correction::CorrectionTable;
use crate::diffusion::{Marginal, NoiseSchedule, TimestepGrid};
use crate::error::{Error, Result};
use crate::models::{ActivationHook, NoHook, NoiseEstimator};
use crate::tensors::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    DpmSolver2S,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver2S => "dpmpp_2s",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "dpmpp_2s" => Ok(SamplerKind::DpmSolver2S),
            other => Err(Error::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM stochasticity; ignored by the ODE solver.
    pub eta: f64,
    pub grid: TimestepGrid,
}

impl SamplerConfig {
    pub fn ddim(schedule: &NoiseSchedule, steps: usize, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("eta = {eta} must be >= 0")));
        }
        Ok(Self {
            kind: SamplerKind::Ddim,
            eta,
            grid: TimestepGrid::ddim(schedule.len(), steps)?,
        })
    }

    pub fn dpmpp_2s(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        Ok(Self {
            kind: SamplerKind::DpmSolver2S,
            eta: 0.0,
            grid: TimestepGrid::dpm(schedule, steps)?,
        })
    }

    pub fn new(kind: SamplerKind, schedule: &NoiseSchedule, steps: usize, eta: f64) -> Result<Self> {
        match kind {
            SamplerKind::Ddim => Self::ddim(schedule, steps, eta),
            SamplerKind::DpmSolver2S => Self::dpmpp_2s(schedule, steps),
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            SamplerKind::Ddim if self.grid.is_two_stage() => {
                Err(Error::invalid("DDIM needs a single-stage grid"))
            }
            SamplerKind::DpmSolver2S if !self.grid.is_two_stage() => {
                Err(Error::invalid("DPM-Solver++(2S) needs interleaved midpoints"))
            }
            _ => Ok(()),
        }
    }
}

/// What a run keeps besides its outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Nothing,
    /// Network input at every evaluation point.
    Inputs,
    /// Inputs plus every activation site.
    Activations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Evaluation times in sampling order.
    pub times: Vec<f64>,
    /// `[n, C, H, W]` network input per evaluation point (after input correction).
    pub inputs: Vec<Tensor>,
    /// `[point][site]` flattened activations; empty unless requested.
    pub activations: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Tensor,
    pub trajectory: Option<Trajectory>,
    pub seed: u64,
    pub elapsed: Duration,
}

/// Standard normal tensor `[n, ...]` whose row `j` comes from `chains[j]`.
pub fn draw_normal(chains: &mut [Rng], shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for (j, rng) in chains.iter_mut().enumerate() {
        rng.fill_normal(t.row_mut(j));
    }
    t
}

/// `x_θ = (x - σ ε) / α`.
pub fn data_prediction(x: &Tensor, eps: &Tensor, m: &Marginal) -> Tensor {
    let mut out = x.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (*o - m.sigma * e) / m.alpha;
    }
    out
}

/// `(σ_to / σ_from) x - α_to (e^{-h} - 1) x0`, `h = λ_to - λ_from`.
pub fn first_order_update(x: &Tensor, x0: &Tensor, from: &Marginal, to: &Marginal) -> Tensor {
    let h = to.lambda - from.lambda;
    let a = to.sigma / from.sigma;
    let b = -to.alpha * (-h).exp_m1();
    let mut out = x.clone();
    for (o, d) in out.data_mut().iter_mut().zip(x0.data()) {
        *o = a * *o + b * d;
    }
    out
}

/// `D = (1 - 1/(2r)) x0_a + (1/(2r)) x0_b`.
pub fn combine_predictions(x0_a: &Tensor, x0_b: &Tensor, r: f64) -> Tensor {
    let wb = 1.0 / (2.0 * r);
    let wa = 1.0 - wb;
    let mut out = x0_a.clone();
    for (o, b) in out.data_mut().iter_mut().zip(x0_b.data()) {
        *o = wa * *o + wb * b;
    }
    out
}

/// `r = (λ_s - λ_prev) / h` with `h = λ_next - λ_prev`; errors on a degenerate step.
pub fn midpoint_ratio(prev: &Marginal, mid: &Marginal, next: &Marginal) -> Result<f64> {
    let h = next.lambda - prev.lambda;
    if h == 0.0 || !h.is_finite() {
        return Err(Error::numeric(format!(
            "degenerate solver step {} -> {} (h = {h})",
            prev.t, next.t
        )));
    }
    Ok((mid.lambda - prev.lambda) / h)
}

struct Recorder {
    mode: Record,
    inputs: Vec<Tensor>,
    activations: Vec<Vec<Vec<f64>>>,
}

struct SiteCollector {
    sites: Vec<Vec<f64>>,
}

impl ActivationHook for SiteCollector {
    fn on_activation(&mut self, site: usize, values: &mut [f64]) {
        if self.sites.len() <= site {
            self.sites.resize(site + 1, Vec::new());
        }
        self.sites[site].extend_from_slice(values);
    }
}

impl Recorder {
    fn new(mode: Record) -> Self {
        Self {
            mode,
            inputs: Vec::new(),
            activations: Vec::new(),
        }
    }

    fn evaluate(&mut self, model: &dyn NoiseEstimator, table: Option<&CorrectionTable>, x: &Tensor, p: usize, t: f64) -> Result<(Tensor, Tensor)> {
        let (x_in, eps_hat) = match table {
            Some(tab) => {
                let x_in = crate::correction::subtract_rows(x, tab.b_row(p));
                let e = self.raw(model, &x_in, t)?;
                let e = crate::correction::subtract_rows(
                    &crate::correction::scale_channels(&e, tab.k_row(p)),
                    tab.eps_bias_row(p),
                );
                (x_in, e)
            }
            None => {
                let e = self.raw(model, x, t)?;
                (x.clone(), e)
            }
        };
        if self.mode != Record::Nothing {
            self.inputs.push(x_in.clone());
        }
        if !eps_hat.all_finite() {
            return Err(Error::numeric(format!("non-finite noise estimate at timestep {t}")));
        }
        Ok((x_in, eps_hat))
    }

    fn raw(&mut self, model: &dyn NoiseEstimator, x: &Tensor, t: f64) -> Result<Tensor> {
        let tv = vec![t; x.rows()];
        if self.mode == Record::Activations {
            let mut c = SiteCollector { sites: Vec::new() };
            let out = model.estimate_observed(x, &tv, &mut c)?;
            self.activations.push(c.sites);
            Ok(out)
        } else {
            model.estimate_observed(x, &tv, &mut NoHook)
        }
    }
}

fn check_table(cfg: &SamplerConfig, model: &dyn NoiseEstimator, table: Option<&CorrectionTable>) -> Result<()> {
    if let Some(t) = table {
        if t.grid != cfg.grid {
            return Err(Error::invalid("correction table grid differs from the sampler grid"));
        }
        if t.io_shape() != model.io_shape() {
            return Err(Error::ShapeMismatch {
                op: "correction table",
                left: model.io_shape().to_vec(),
                right: t.io_shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn ddim_chunk(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    table: Option<&CorrectionTable>,
    chains: &mut [Rng],
    rec: &mut Recorder,
) -> Result<Tensor> {
    let [c, h, w] = model.io_shape();
    let shape = [chains.len(), c, h, w];
    let literal = table.is_some_and(|t| t.config.eq22_literal_placement);
    let mut x = draw_normal(chains, &shape);
    for (i, &t) in cfg.grid.times().iter().enumerate() {
        let (x_in, eps) = rec.evaluate(model, table, &x, i, t)?;
        let coef = crate::correction::step_rule(schedule, cfg, literal, i)?;
        let z = draw_normal(chains, &shape);
        x = coef.apply(&x_in, &eps, &z)?;
    }
    Ok(x)
}

/// One Algorithm-2 step `t_{i} -> t_{i+1}` (0-based `i`) with recording.
fn dpm_step_impl(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    x: &Tensor,
    i: usize,
    grid: &TimestepGrid,
    table: Option<&CorrectionTable>,
    rec: &mut Recorder,
) -> Result<Tensor> {
    let mids = grid
        .mids()
        .ok_or_else(|| Error::invalid("DPM-Solver++(2S) needs interleaved midpoints"))?;
    if i >= grid.steps() {
        return Err(Error::invalid(format!("step {i} out of {}", grid.steps())));
    }
    let (tp, s, tn) = (grid.times()[i], mids[i], grid.times()[i + 1]);
    let (mp, ms, mt) = (schedule.marginal(tp)?, schedule.marginal(s)?, schedule.marginal(tn)?);
    let r = midpoint_ratio(&mp, &ms, &mt)?;
    let (x_in, eps) = rec.evaluate(model, table, x, 2 * i, tp)?;
    let x0_a = data_prediction(&x_in, &eps, &mp);
    let u = first_order_update(&x_in, &x0_a, &mp, &ms);
    let (u_in, eps_u) = rec.evaluate(model, table, &u, 2 * i + 1, s)?;
    let x0_b = data_prediction(&u_in, &eps_u, &ms);
    let d = combine_predictions(&x0_a, &x0_b, r);
    Ok(first_order_update(&x_in, &d, &mp, &mt))
}

/// Single DPM-Solver++(2S) step from `grid.times()[i]` to `grid.times()[i + 1]`.
pub fn dpmpp_2s_step(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    i: usize,
    grid: &TimestepGrid,
    table: Option<&CorrectionTable>,
) -> Result<Tensor> {
    if let Some(t) = table {
        if &t.grid != grid {
            return Err(Error::invalid("correction table grid differs from the solver grid"));
        }
    }
    dpm_step_impl(model, schedule, x_t, i, grid, table, &mut Recorder::new(Record::Nothing))
}

fn dpm_chunk(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    table: Option<&CorrectionTable>,
    chains: &mut [Rng],
    rec: &mut Recorder,
) -> Result<Tensor> {
    let [c, h, w] = model.io_shape();
    let mut x = draw_normal(chains, &[chains.len(), c, h, w]);
    for i in 0..cfg.grid.steps() {
        x = dpm_step_impl(model, schedule, &x, i, &cfg.grid, table, rec)?;
    }
    Ok(x)
}

/// Chains per batch; keeps conv activations to a few tens of MB.
fn chunk_size(io_shape: [usize; 3]) -> usize {
    (4096 / (io_shape[1] * io_shape[2])).max(1)
}

/// Draw `n` samples with either sampler.
pub fn sample(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    table: Option<&CorrectionTable>,
    n: usize,
    rng: &Rng,
    record: Record,
) -> Result<SampleRun> {
    cfg.validate()?;
    check_table(cfg, model, table)?;
    if n == 0 {
        return Err(Error::invalid("number of samples must be >= 1"));
    }
    let start = Instant::now();
    let chunk = chunk_size(model.io_shape());
    let mut outputs = Vec::new();
    let mut traj = (record != Record::Nothing).then(|| Trajectory {
        times: cfg.grid.eval_points(),
        inputs: Vec::new(),
        activations: Vec::new(),
    });
    let mut first = 0;
    while first < n {
        let len = chunk.min(n - first);
        let mut chains: Vec<Rng> = (first..first + len).map(|j| rng.child(j as u64)).collect();
        let mut rec = Recorder::new(record);
        let x = match cfg.kind {
            SamplerKind::Ddim => ddim_chunk(model, schedule, cfg, table, &mut chains, &mut rec)?,
            SamplerKind::DpmSolver2S => dpm_chunk(model, schedule, cfg, table, &mut chains, &mut rec)?,
        };
        if !x.all_finite() {
            return Err(Error::numeric("sampler produced non-finite outputs"));
        }
        outputs.push(x);
        if let Some(tr) = traj.as_mut() {
            if tr.inputs.is_empty() {
                tr.inputs = rec.inputs;
                tr.activations = rec.activations;
            } else {
                for (acc, new) in tr.inputs.iter_mut().zip(rec.inputs) {
                    *acc = Tensor::concat(&[acc, &new])?;
                }
                for (acc, new) in tr.activations.iter_mut().zip(rec.activations) {
                    for (a, v) in acc.iter_mut().zip(new) {
                        a.extend(v);
                    }
                }
            }
        }
        first += len;
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    Ok(SampleRun {
        samples: Tensor::concat(&refs)?,
        trajectory: traj,
        seed: rng.seed(),
        elapsed: start.elapsed(),
    })
}

pub fn sample_ddim(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    table: Option<&CorrectionTable>,
    n: usize,
    rng: &Rng,
) -> Result<SampleRun> {
    if cfg.kind != SamplerKind::Ddim {
        return Err(Error::invalid("sample_ddim called with a non-DDIM config"));
    }
    sample(model, schedule, cfg, table, n, rng, Record::Nothing)
}

pub fn sample_dpmpp(
    model: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    table: Option<&CorrectionTable>,
    n: usize,
    rng: &Rng,
) -> Result<SampleRun> {
    if cfg.kind != SamplerKind::DpmSolver2S {
        return Err(Error::invalid("sample_dpmpp called with a non-DPM config"));
    }
    sample(model, schedule, cfg, table, n, rng, Record::Nothing)
}

//! Timestep-aware correction of a quantized noise estimator.
//!
//! * Noise estimation reconstruction (NER): at every evaluation point the
//!   quantized estimate is rescaled per channel, `ε̃ = K ⊙ ε̂`, with `K` the
//!   closed-form minimizer of a convex MSE + rQNSR + ridge loss.
//! * Input bias correction (IBC): the quantized trajectory is shifted by the
//!   batch-mean input discrepancy `B = mean(x̂ - x)` before each evaluation.
//!
//! Both tables are pre-computed from paired full-precision / quantized
//! trajectories that share their initial noise and every injected `z`.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{
    ddim_coefficients, ddpm_form_coefficients, NoiseSchedule, StepCoefficients, TimestepGrid,
};
use crate::error::{Error, Result};
use crate::models::NoiseEstimator;
use crate::samplers::{self, SamplerConfig, SamplerKind};
use crate::tensors::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionConfig {
    /// Weight of the rQNSR term, in `[0, 1)`.
    pub lambda1: f64,
    /// Ridge weight pulling `K` towards 1, `> 0`.
    pub lambda2: f64,
    /// Mask threshold multiplier on the mean `|ε|`.
    pub k_threshold: f64,
    /// Calibration batch size `S`.
    pub calib_batch: usize,
    /// Pixels with `|ε| <= eps_floor` are left out of the rQNSR statistics.
    pub eps_floor: f64,
    pub apply_ibc: bool,
    pub apply_ner: bool,
    /// Correct only the first solver step.
    pub first_step_only: bool,
    /// Replace the input bias by a bias on the noise estimate, `ε̃ -= mean(K ε̂ - ε)`.
    pub estimation_bias_only: bool,
    /// Step with the DDPM-form coefficients and unscaled `z`, as in the
    /// integrated one-line update, instead of the default split form.
    pub eq22_literal_placement: bool,
    /// Mask on `ε > τ` instead of `|ε| > τ`.
    pub signed_mask: bool,
    /// Compute tables against the uncorrected quantized lane.
    pub decoupled: bool,
    /// Also use the input bias with the DPM-Solver++(2S) sampler.
    pub dpm_ibc: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1e-2,
            k_threshold: 1.0,
            calib_batch: 64,
            eps_floor: 1e-8,
            apply_ibc: true,
            apply_ner: true,
            first_step_only: false,
            estimation_bias_only: false,
            eq22_literal_placement: false,
            signed_mask: false,
            decoupled: false,
            dpm_ibc: false,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda1) {
            return Err(Error::invalid(format!(
                "lambda1 = {} must lie in [0, 1)",
                self.lambda1
            )));
        }
        if !(self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(Error::invalid(format!("lambda2 = {} must be > 0", self.lambda2)));
        }
        if !(self.k_threshold >= 0.0 && self.k_threshold.is_finite()) {
            return Err(Error::invalid("k_threshold must be a finite value >= 0"));
        }
        if self.calib_batch == 0 {
            return Err(Error::invalid("calibration batch must be >= 1"));
        }
        if !(self.eps_floor >= 0.0) {
            return Err(Error::invalid("eps_floor must be >= 0"));
        }
        Ok(())
    }

    /// Configuration for one of the named ablation variants.
    pub fn for_variant(self, v: Variant) -> Self {
        let base = Self {
            apply_ibc: false,
            apply_ner: false,
            first_step_only: false,
            estimation_bias_only: false,
            eq22_literal_placement: false,
            ..self
        };
        match v {
            Variant::Baseline => base,
            Variant::Ibc => Self {
                apply_ibc: true,
                ..base
            },
            Variant::FirstStep => Self {
                apply_ibc: true,
                first_step_only: true,
                ..base
            },
            Variant::NerIbc => Self {
                apply_ibc: true,
                apply_ner: true,
                first_step_only: true,
                ..base
            },
            Variant::Tac => Self {
                apply_ibc: true,
                apply_ner: true,
                ..base
            },
            Variant::EstBias => Self {
                apply_ner: true,
                estimation_bias_only: true,
                ..base
            },
            Variant::Eq22 => Self {
                apply_ibc: true,
                apply_ner: true,
                eq22_literal_placement: true,
                ..base
            },
        }
    }

    fn in_scope(&self, grid: &TimestepGrid, p: usize, by_producer: bool) -> bool {
        if !self.first_step_only {
            return true;
        }
        if by_producer {
            grid.producer_of_point(p) == Some(0)
        } else {
            grid.step_of_point(p) == 0
        }
    }

    fn ner_at(&self, grid: &TimestepGrid, p: usize) -> bool {
        self.apply_ner && self.in_scope(grid, p, false)
    }

    fn ibc_at(&self, grid: &TimestepGrid, p: usize) -> bool {
        self.apply_ibc
            && !self.estimation_bias_only
            && (!grid.is_two_stage() || self.dpm_ibc)
            && self.in_scope(grid, p, true)
    }

    fn est_bias_at(&self, grid: &TimestepGrid, p: usize) -> bool {
        self.estimation_bias_only && self.in_scope(grid, p, false)
    }
}

/// Named correction variants used by the ablation pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Quantized model without correction.
    Baseline,
    /// Input bias correction at every step.
    Ibc,
    /// NER and IBC applied to the first step only.
    NerIbc,
    /// NER and IBC at every step.
    Tac,
    /// Input bias correction on the first step only.
    FirstStep,
    /// NER plus a bias correction of the noise estimate instead of the input.
    EstBias,
    /// Full correction with the integrated one-line update.
    Eq22,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Ibc,
        Variant::NerIbc,
        Variant::Tac,
        Variant::FirstStep,
        Variant::EstBias,
        Variant::Eq22,
    ];

    /// The four rows of the component ablation.
    pub const ABLATION: [Variant; 4] = [Variant::Baseline, Variant::Ibc, Variant::NerIbc, Variant::Tac];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Ibc => "+IBC+ Timestep-Aware",
            Variant::NerIbc => "+NER + IBC",
            Variant::Tac => "+NER + IBC+ Timestep-Aware",
            Variant::FirstStep => "+IBC (first step)",
            Variant::EstBias => "+NER + estimation bias",
            Variant::Eq22 => "+NER + IBC+ Timestep-Aware (integrated update)",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Ibc => "ibc",
            Variant::NerIbc => "ner-ibc",
            Variant::Tac => "tac",
            Variant::FirstStep => "first-step",
            Variant::EstBias => "est-bias",
            Variant::Eq22 => "eq22",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// `[S, C, H, W]` view of a rank-3 or rank-4 tensor.
fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h * w)),
        [s, c, h, w] => Ok((s, c, h * w)),
        _ => Err(Error::invalid(format!(
            "expected a [C, H, W] or [S, C, H, W] tensor, got {:?}",
            x.shape()
        ))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Indices of channel `ch` across the batch.
fn channel_indices(s: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = usize> {
    (0..s).flat_map(move |n| {
        let start = (n * c + ch) * hw;
        start..start + hw
    })
}

/// `sqrt(Σ(ε̂ - ε)² / Σε²)` over one channel (pooled over the batch for rank-4 inputs).
pub fn rqnsr(eps_hat: &Tensor, eps: &Tensor, channel: usize) -> Result<f64> {
    same_shape("rqnsr", eps_hat, eps)?;
    let (s, c, hw) = dims(eps)?;
    if channel >= c {
        return Err(Error::invalid(format!("channel {channel} out of {c}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in channel_indices(s, c, hw, channel) {
        let d = eps_hat.data()[i] - eps.data()[i];
        num += d * d;
        den += eps.data()[i] * eps.data()[i];
    }
    if den == 0.0 {
        return Err(Error::numeric(format!(
            "rQNSR undefined: reference channel {channel} is identically zero"
        )));
    }
    Ok((num / den).sqrt())
}

/// Sufficient statistics of the per-channel reconstruction loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelStats {
    /// Masked pixel count.
    pub n: usize,
    /// `Σε̂²`, `Σε̂ε`, `Σε²` over masked pixels.
    pub p: f64,
    pub q: f64,
    pub r: f64,
    /// The same sums restricted to masked pixels with `|ε| > eps_floor`.
    pub p_rel: f64,
    pub q_rel: f64,
    pub r_rel: f64,
}

impl ChannelStats {
    fn gather(eps_hat: &[f64], eps: &[f64], mask: Option<&[f64]>, idx: impl Iterator<Item = usize>, floor: f64) -> Self {
        let mut st = ChannelStats::default();
        for i in idx {
            if let Some(m) = mask {
                if m[i] == 0.0 {
                    continue;
                }
            }
            let (a, b) = (eps_hat[i], eps[i]);
            st.n += 1;
            st.p += a * a;
            st.q += a * b;
            st.r += b * b;
            if b.abs() > floor {
                st.p_rel += a * a;
                st.q_rel += a * b;
                st.r_rel += b * b;
            }
        }
        st
    }

    /// Quadratic coefficients `(A, B, D)` with `loss(k) = A k² + B k + D`.
    pub fn quadratic(&self, lambda1: f64, lambda2: f64) -> (f64, f64, f64) {
        let n = self.n as f64;
        let mut a = (1.0 - lambda1) * self.p / n + lambda2;
        let mut b = -2.0 * (1.0 - lambda1) * self.q / n - 2.0 * lambda2;
        let mut d = (1.0 - lambda1) * self.r / n + lambda2;
        if self.r_rel > 0.0 {
            a += lambda1 * self.p_rel / self.r_rel;
            b -= 2.0 * lambda1 * self.q_rel / self.r_rel;
            d += lambda1;
        }
        (a, b, d)
    }
}

fn channel_stats(eps_hat: &Tensor, eps: &Tensor, mask: Option<&Tensor>, cfg: &CorrectionConfig) -> Result<Vec<ChannelStats>> {
    same_shape("channel statistics", eps_hat, eps)?;
    if let Some(m) = mask {
        same_shape("channel statistics mask", eps, m)?;
    }
    let (s, c, hw) = dims(eps)?;
    Ok((0..c)
        .map(|ch| {
            ChannelStats::gather(
                eps_hat.data(),
                eps.data(),
                mask.map(|m| m.data()),
                channel_indices(s, c, hw, ch),
                cfg.eps_floor,
            )
        })
        .collect())
}

/// `(1-λ1) mean((kε̂-ε)²) + λ1 rQNSR(kε̂, ε)² + λ2 (k-1)²` over the masked
/// pixels of one channel, pooled over the batch.
pub fn reconstruction_loss(
    k: f64,
    eps_hat: &Tensor,
    eps: &Tensor,
    mask: Option<&Tensor>,
    channel: usize,
    cfg: &CorrectionConfig,
) -> Result<f64> {
    let st = channel_stats(eps_hat, eps, mask, cfg)?;
    let st = st
        .get(channel)
        .ok_or_else(|| Error::invalid(format!("channel {channel} out of {}", st.len())))?;
    if st.n == 0 {
        return Err(Error::invalid(format!("channel {channel} has no masked pixels")));
    }
    let (a, b, d) = st.quadratic(cfg.lambda1, cfg.lambda2);
    Ok(a * k * k + b * k + d)
}

/// Closed-form per-channel minimizer of [`reconstruction_loss`]; channels
/// without masked pixels get `K = 1`.
pub fn solve_k(eps_hat: &Tensor, eps: &Tensor, mask: Option<&Tensor>, cfg: &CorrectionConfig) -> Result<Vec<f64>> {
    if !(cfg.lambda2 > 0.0) {
        return Err(Error::invalid("solve_k needs lambda2 > 0"));
    }
    channel_stats(eps_hat, eps, mask, cfg)?
        .iter()
        .enumerate()
        .map(|(ch, st)| {
            if st.n == 0 {
                return Ok(1.0);
            }
            let (a, b, _) = st.quadratic(cfg.lambda1, cfg.lambda2);
            let k = -b / (2.0 * a);
            if !k.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite reconstruction coefficient on channel {ch} (A = {a}, B = {b})"
                )));
            }
            Ok(k)
        })
        .collect()
}

/// `τ = k_threshold · mean|ε|` over batch, channels and pixels.
pub fn compute_threshold(eps: &Tensor, k_threshold: f64) -> f64 {
    if eps.is_empty() {
        return 0.0;
    }
    k_threshold * eps.data().iter().map(|v| v.abs()).sum::<f64>() / eps.len() as f64
}

pub fn build_mask(eps: &Tensor, tau: f64, signed: bool) -> Tensor {
    eps.map(|v| {
        let kept = if signed { v > tau } else { v.abs() > tau };
        if kept {
            1.0
        } else {
            0.0
        }
    })
}

/// Element-wise batch mean of `x_hat - x`.
pub fn compute_bias(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape("compute_bias", x_hat, x)?;
    if x.rank() == 0 || x.rows() == 0 {
        return Err(Error::invalid("compute_bias needs at least one sample"));
    }
    let s = x.rows();
    let mut out = vec![0.0; x.row_len()];
    for n in 0..s {
        for ((o, a), b) in out.iter_mut().zip(x_hat.row(n)).zip(x.row(n)) {
            *o += a - b;
        }
    }
    for o in &mut out {
        *o /= s as f64;
    }
    Tensor::new(x.shape()[1..].to_vec(), out)
}

/// Subtract a per-element row (broadcast over the batch).
pub fn subtract_rows(x: &Tensor, row: &[f64]) -> Tensor {
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_exact_mut(row.len()) {
        for (v, b) in chunk.iter_mut().zip(row) {
            *v -= b;
        }
    }
    out
}

/// Multiply channel `c` of every sample by `k[c]`.
pub fn scale_channels(x: &Tensor, k: &[f64]) -> Tensor {
    let mut out = x.clone();
    let per_sample = x.row_len();
    let hw = per_sample / k.len();
    for sample in out.data_mut().chunks_exact_mut(per_sample) {
        for (chan, kc) in sample.chunks_exact_mut(hw).zip(k) {
            for v in chan {
                *v *= kc;
            }
        }
    }
    out
}

/// Pre-computed correction tables, one row per evaluation point of `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTable {
    /// `[P, C]`.
    pub k: Tensor,
    /// `[P, C, H, W]`; row `p` is subtracted from the state before evaluation `p`.
    pub b: Tensor,
    /// `[P, C, H, W]`; subtracted from the reconstructed estimate (estimation-bias variant).
    pub eps_bias: Tensor,
    pub tau: Vec<f64>,
    /// Fraction of calibration pixels kept by the mask.
    pub mask_coverage: Vec<f64>,
    pub config: CorrectionConfig,
    pub grid: TimestepGrid,
}

impl CorrectionTable {
    /// `K ≡ 1`, `B ≡ 0`: a table that changes nothing.
    pub fn identity(grid: &TimestepGrid, io_shape: [usize; 3], config: CorrectionConfig) -> Self {
        let p = grid.eval_points().len();
        let [c, h, w] = io_shape;
        Self {
            k: Tensor::full(&[p, c], 1.0),
            b: Tensor::zeros(&[p, c, h, w]),
            eps_bias: Tensor::zeros(&[p, c, h, w]),
            tau: vec![0.0; p],
            mask_coverage: vec![0.0; p],
            config,
            grid: grid.clone(),
        }
    }

    pub fn points(&self) -> usize {
        self.tau.len()
    }

    pub fn io_shape(&self) -> [usize; 3] {
        let s = self.b.shape();
        [s[1], s[2], s[3]]
    }

    pub fn k_row(&self, p: usize) -> &[f64] {
        self.k.row(p)
    }

    pub fn b_row(&self, p: usize) -> &[f64] {
        self.b.row(p)
    }

    pub fn eps_bias_row(&self, p: usize) -> &[f64] {
        self.eps_bias.row(p)
    }

    /// Index of the evaluation point at time `t`.
    pub fn point_of(&self, t: f64) -> Result<usize> {
        self.grid
            .eval_points()
            .iter()
            .position(|&v| v == t)
            .ok_or_else(|| Error::invalid(format!("timestep {t} is not on the table's grid")))
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.grid.eval_points().len();
        if self.k.rank() != 2
            || self.k.rows() != p
            || self.b.rank() != 4
            || self.b.rows() != p
            || self.eps_bias.shape() != self.b.shape()
            || self.tau.len() != p
            || self.mask_coverage.len() != p
            || self.k.shape()[1] != self.b.shape()[1]
        {
            return Err(Error::format("correction table arrays do not match its grid"));
        }
        if !self.k.all_finite() || !self.b.all_finite() || !self.eps_bias.all_finite() {
            return Err(Error::numeric("correction table contains non-finite entries"));
        }
        Ok(())
    }

    /// Apply this table's input correction, estimate, and reconstruct at point `p`.
    pub(crate) fn corrected_at(&self, model: &dyn NoiseEstimator, x: &Tensor, p: usize, t: f64) -> Result<(Tensor, Tensor)> {
        let x_in = subtract_rows(x, self.b_row(p));
        let eps_hat = model.estimate(&x_in, &vec![t; x.rows()])?;
        let eps = subtract_rows(&scale_channels(&eps_hat, self.k_row(p)), self.eps_bias_row(p));
        Ok((x_in, eps))
    }
}

/// `ε̃ = K_t ⊙ ε̂(x̂_t - B_t, t)` (minus the estimate bias when that variant is active).
pub fn corrected_eps(qmodel: &dyn NoiseEstimator, table: &CorrectionTable, x_hat: &Tensor, t: f64) -> Result<Tensor> {
    let p = table.point_of(t)?;
    Ok(table.corrected_at(qmodel, x_hat, p, t)?.1)
}

/// Lock-stepped full-precision and quantized DDIM trajectories.
///
/// Entry `p` refers to evaluation point `p`; `x_hat` is the quantized state
/// before input correction, `x_tilde` the corrected model input, `eps_tilde`
/// the reconstructed estimate actually used by the step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrace {
    pub times: Vec<f64>,
    pub coefs: Vec<StepCoefficients>,
    pub x: Vec<Tensor>,
    pub x_hat: Vec<Tensor>,
    pub x_tilde: Vec<Tensor>,
    pub eps: Vec<Tensor>,
    pub eps_hat: Vec<Tensor>,
    pub eps_tilde: Vec<Tensor>,
    /// Noise consumed by the full-precision lane at each step.
    pub z: Vec<Tensor>,
    /// Noise consumed by the quantized lane at each step.
    pub z_hat: Vec<Tensor>,
    pub final_x: Tensor,
    pub final_x_hat: Tensor,
}

impl PairedTrace {
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    pub fn shares_noise(&self) -> bool {
        self.z == self.z_hat
    }

    /// Quantized state at point `p`, or the final output for `p == steps()`.
    pub fn x_hat_at(&self, p: usize) -> &Tensor {
        self.x_hat.get(p).unwrap_or(&self.final_x_hat)
    }

    pub fn x_at(&self, p: usize) -> &Tensor {
        self.x.get(p).unwrap_or(&self.final_x)
    }
}

enum Tables<'a> {
    Build(&'a CorrectionConfig),
    Apply(Option<&'a CorrectionTable>),
}

/// Step rule shared by both lanes.
pub(crate) fn step_rule(schedule: &NoiseSchedule, sampler: &SamplerConfig, literal: bool, i: usize) -> Result<StepCoefficients> {
    let grid = &sampler.grid;
    let t = grid.times()[i] as usize;
    let prev = grid.ddim_prev(i);
    if literal {
        let mut c = ddpm_form_coefficients(schedule, t, prev, sampler.eta)?;
        c.noise = if prev.is_some() { sampler.eta } else { 0.0 };
        Ok(c)
    } else {
        ddim_coefficients(schedule, t, prev, sampler.eta)
    }
}

struct Recorded {
    k: Vec<f64>,
    b: Vec<f64>,
    eps_bias: Vec<f64>,
    tau: f64,
    coverage: f64,
}

fn build_point(
    cfg: &CorrectionConfig,
    grid: &TimestepGrid,
    p: usize,
    eps_hat: &Tensor,
    eps: &Tensor,
    c: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    if !cfg.ner_at(grid, p) {
        return Ok((vec![1.0; c], 0.0, 0.0));
    }
    let tau = compute_threshold(eps, cfg.k_threshold);
    let mask = build_mask(eps, tau, cfg.signed_mask);
    let coverage = mask.sum() / mask.len() as f64;
    let k = solve_k(eps_hat, eps, Some(&mask), cfg)?;
    Ok((k, tau, coverage))
}

fn mean_discrepancy_or_zero(enabled: bool, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if enabled {
        Ok(compute_bias(a, b)?.into_data())
    } else {
        Ok(vec![0.0; a.row_len()])
    }
}

/// Shared core of calibration and traced evaluation for single-stage samplers.
fn paired_ddim(
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    tables: Tables<'_>,
    n: usize,
    rng: &Rng,
    keep_trace: bool,
) -> Result<(Vec<Recorded>, Option<PairedTrace>)> {
    let grid = &sampler.grid;
    let [c, h, w] = fp.io_shape();
    let shape = [n, c, h, w];
    let mut chains: Vec<Rng> = (0..n as u64).map(|j| rng.child(j)).collect();
    let mut x = samplers::draw_normal(&mut chains, &shape);
    let mut x_hat = x.clone();
    let literal = match &tables {
        Tables::Build(cfg) => cfg.eq22_literal_placement,
        Tables::Apply(t) => t.is_some_and(|t| t.config.eq22_literal_placement),
    };
    let mut rows = Vec::new();
    let mut trace = keep_trace.then(|| PairedTrace {
        times: grid.times().to_vec(),
        coefs: Vec::new(),
        x: Vec::new(),
        x_hat: Vec::new(),
        x_tilde: Vec::new(),
        eps: Vec::new(),
        eps_hat: Vec::new(),
        eps_tilde: Vec::new(),
        z: Vec::new(),
        z_hat: Vec::new(),
        final_x: Tensor::zeros(&[0]),
        final_x_hat: Tensor::zeros(&[0]),
    });
    for (p, &t) in grid.times().iter().enumerate() {
        let ctx = |e: Error| e.context(format!("timestep {t}"));
        let tv = vec![t; n];
        let decoupled = matches!(&tables, Tables::Build(cfg) if cfg.decoupled);
        let b = match &tables {
            Tables::Build(cfg) => mean_discrepancy_or_zero(cfg.ibc_at(grid, p), &x_hat, &x).map_err(ctx)?,
            Tables::Apply(Some(tab)) => tab.b_row(p).to_vec(),
            Tables::Apply(None) => vec![0.0; x.row_len()],
        };
        let x_tilde = subtract_rows(&x_hat, &b);
        let model_in = if decoupled { &x_hat } else { &x_tilde };
        let eps = fp.estimate(&x, &tv).map_err(ctx)?;
        let eps_hat = q.estimate(model_in, &tv).map_err(ctx)?;
        let rec = match &tables {
            Tables::Build(cfg) => {
                let (k, tau, coverage) = build_point(cfg, grid, p, &eps_hat, &eps, c).map_err(ctx)?;
                let scaled = scale_channels(&eps_hat, &k);
                let eps_bias = mean_discrepancy_or_zero(cfg.est_bias_at(grid, p), &scaled, &eps).map_err(ctx)?;
                Recorded {
                    k,
                    b,
                    eps_bias,
                    tau,
                    coverage,
                }
            }
            Tables::Apply(Some(tab)) => Recorded {
                k: tab.k_row(p).to_vec(),
                b,
                eps_bias: tab.eps_bias_row(p).to_vec(),
                tau: tab.tau[p],
                coverage: tab.mask_coverage[p],
            },
            Tables::Apply(None) => Recorded {
                k: vec![1.0; c],
                b,
                eps_bias: vec![0.0; x.row_len()],
                tau: 0.0,
                coverage: 0.0,
            },
        };
        let eps_tilde = if decoupled {
            eps_hat.clone()
        } else {
            subtract_rows(&scale_channels(&eps_hat, &rec.k), &rec.eps_bias)
        };
        let coef = step_rule(schedule, sampler, literal, p)?;
        let z = samplers::draw_normal(&mut chains, &shape);
        let x_next = coef.apply(&x, &eps, &z)?;
        let x_hat_next = coef.apply(model_in, &eps_tilde, &z)?;
        if !x_hat_next.all_finite() || !x_next.all_finite() {
            return Err(Error::numeric(format!("non-finite state after timestep {t}")));
        }
        if let Some(tr) = trace.as_mut() {
            tr.coefs.push(coef);
            tr.x.push(x.clone());
            tr.x_hat.push(x_hat.clone());
            tr.x_tilde.push(model_in.clone());
            tr.eps.push(eps);
            tr.eps_hat.push(eps_hat);
            tr.eps_tilde.push(eps_tilde);
            tr.z_hat.push(z.clone());
            tr.z.push(z);
        }
        x = x_next;
        x_hat = x_hat_next;
        rows.push(rec);
    }
    if let Some(tr) = trace.as_mut() {
        tr.final_x = x;
        tr.final_x_hat = x_hat;
    }
    Ok((rows, trace))
}

/// Calibration core for the two-stage DPM-Solver++(2S) grid.
fn paired_dpm(
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cfg: &CorrectionConfig,
    n: usize,
    rng: &Rng,
) -> Result<Vec<Recorded>> {
    let grid = &sampler.grid;
    let [c, h, w] = fp.io_shape();
    let mut chains: Vec<Rng> = (0..n as u64).map(|j| rng.child(j)).collect();
    let mut x = samplers::draw_normal(&mut chains, &[n, c, h, w]);
    let mut x_hat = x.clone();
    let mids = grid.mids().expect("two-stage grid");
    let mut rows = Vec::new();

    // One evaluation point on both lanes; returns (corrected quantized input, x0, x0_hat).
    let eval = |p: usize, t: f64, x: &Tensor, x_hat: &Tensor, rows: &mut Vec<Recorded>| -> Result<(Tensor, Tensor, Tensor)> {
        let ctx = |e: Error| e.context(format!("timestep {t}"));
        let m = schedule.marginal(t)?;
        let tv = vec![t; n];
        let b = mean_discrepancy_or_zero(cfg.ibc_at(grid, p), x_hat, x).map_err(ctx)?;
        let x_tilde = subtract_rows(x_hat, &b);
        let model_in = if cfg.decoupled { x_hat.clone() } else { x_tilde };
        let eps = fp.estimate(x, &tv).map_err(ctx)?;
        let eps_hat = q.estimate(&model_in, &tv).map_err(ctx)?;
        let (k, tau, coverage) = build_point(cfg, grid, p, &eps_hat, &eps, c).map_err(ctx)?;
        let scaled = scale_channels(&eps_hat, &k);
        let eps_bias = mean_discrepancy_or_zero(cfg.est_bias_at(grid, p), &scaled, &eps).map_err(ctx)?;
        let eps_tilde = if cfg.decoupled {
            eps_hat
        } else {
            subtract_rows(&scaled, &eps_bias)
        };
        let x0 = samplers::data_prediction(x, &eps, &m);
        let x0_hat = samplers::data_prediction(&model_in, &eps_tilde, &m);
        rows.push(Recorded {
            k,
            b,
            eps_bias,
            tau,
            coverage,
        });
        Ok((model_in, x0, x0_hat))
    };

    for i in 0..grid.steps() {
        let (t_prev, s, t_next) = (grid.times()[i], mids[i], grid.times()[i + 1]);
        let (mp, ms, mt) = (schedule.marginal(t_prev)?, schedule.marginal(s)?, schedule.marginal(t_next)?);
        let r = samplers::midpoint_ratio(&mp, &ms, &mt)?;
        let (xin, x0a, x0a_hat) = eval(2 * i, t_prev, &x, &x_hat, &mut rows)?;
        let u = samplers::first_order_update(&x, &x0a, &mp, &ms);
        let u_hat = samplers::first_order_update(&xin, &x0a_hat, &mp, &ms);
        let (_, x0b, x0b_hat) = eval(2 * i + 1, s, &u, &u_hat, &mut rows)?;
        let d = samplers::combine_predictions(&x0a, &x0b, r);
        let d_hat = samplers::combine_predictions(&x0a_hat, &x0b_hat, r);
        x = samplers::first_order_update(&x, &d, &mp, &mt);
        x_hat = samplers::first_order_update(&xin, &d_hat, &mp, &mt);
        if !x.all_finite() || !x_hat.all_finite() {
            return Err(Error::numeric(format!("non-finite state after step {i}")));
        }
    }
    Ok(rows)
}

fn assemble(rows: Vec<Recorded>, cfg: &CorrectionConfig, grid: &TimestepGrid, io_shape: [usize; 3]) -> Result<CorrectionTable> {
    let p = rows.len();
    let [c, h, w] = io_shape;
    let mut k = Vec::with_capacity(p * c);
    let mut b = Vec::with_capacity(p * c * h * w);
    let mut eb = Vec::with_capacity(p * c * h * w);
    let mut tau = Vec::with_capacity(p);
    let mut cov = Vec::with_capacity(p);
    for r in rows {
        k.extend(r.k);
        b.extend(r.b);
        eb.extend(r.eps_bias);
        tau.push(r.tau);
        cov.push(r.coverage);
    }
    let table = CorrectionTable {
        k: Tensor::new(vec![p, c], k)?,
        b: Tensor::new(vec![p, c, h, w], b)?,
        eps_bias: Tensor::new(vec![p, c, h, w], eb)?,
        tau,
        mask_coverage: cov,
        config: *cfg,
        grid: grid.clone(),
    };
    table.validate()?;
    Ok(table)
}

fn check_pair(fp: &dyn NoiseEstimator, q: &dyn NoiseEstimator) -> Result<()> {
    if fp.io_shape() != q.io_shape() {
        return Err(Error::ShapeMismatch {
            op: "paired trajectories",
            left: fp.io_shape().to_vec(),
            right: q.io_shape().to_vec(),
        });
    }
    Ok(())
}

/// Build the correction tables from `cfg.calib_batch` paired trajectories.
pub fn precalculate(
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cfg: &CorrectionConfig,
    rng: &Rng,
) -> Result<CorrectionTable> {
    Ok(precalculate_traced(fp, q, schedule, sampler, cfg, rng, false)?.0)
}

/// [`precalculate`], optionally keeping the calibration trace (single-stage samplers only).
pub fn precalculate_traced(
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cfg: &CorrectionConfig,
    rng: &Rng,
    keep_trace: bool,
) -> Result<(CorrectionTable, Option<PairedTrace>)> {
    cfg.validate()?;
    check_pair(fp, q)?;
    let n = cfg.calib_batch;
    match sampler.kind {
        SamplerKind::Ddim => {
            let (rows, trace) = paired_ddim(fp, q, schedule, sampler, Tables::Build(cfg), n, rng, keep_trace)?;
            Ok((assemble(rows, cfg, &sampler.grid, fp.io_shape())?, trace))
        }
        SamplerKind::DpmSolver2S => {
            if keep_trace {
                return Err(Error::invalid("paired traces are only recorded for the DDIM sampler"));
            }
            let rows = paired_dpm(fp, q, schedule, sampler, cfg, n, rng)?;
            Ok((assemble(rows, cfg, &sampler.grid, fp.io_shape())?, None))
        }
    }
}

/// Run `n` paired DDIM trajectories, the quantized lane corrected by `table` if given.
pub fn paired_trace(
    fp: &dyn NoiseEstimator,
    q: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    table: Option<&CorrectionTable>,
    n: usize,
    rng: &Rng,
) -> Result<PairedTrace> {
    check_pair(fp, q)?;
    if sampler.kind != SamplerKind::Ddim {
        return Err(Error::invalid("paired traces are only recorded for the DDIM sampler"));
    }
    if n == 0 {
        return Err(Error::invalid("paired trace needs at least one chain"));
    }
    if let Some(t) = table {
        if t.grid != sampler.grid {
            return Err(Error::invalid("correction table grid differs from the sampler grid"));
        }
    }
    let (_, trace) = paired_ddim(fp, q, schedule, sampler, Tables::Apply(table), n, rng, true)?;
    Ok(trace.expect("trace requested"))
}

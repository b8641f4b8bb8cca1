//! Variance-preserving noise schedules, the forward noising process and the
//! reverse-step primitives the samplers and calibration build on.

use crate::error::{Error, Result};
use crate::tensors::Tensor;

/// Per-timestep constants of a discrete variance-preserving diffusion.
///
/// Besides the discrete arrays the schedule exposes a continuous extension
/// (log ᾱ interpolated linearly between integer timesteps) so that solvers
/// working in half-log-SNR time can evaluate intermediate points.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    log_alpha_bar: Vec<f64>,
    lambda: Vec<f64>,
}

/// Marginal coefficients at a (possibly fractional) timestep:
/// `x_t = alpha * x_0 + sigma * eps`, `lambda = ln(alpha / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
}

fn half_log_snr(alpha_bar: f64) -> f64 {
    (alpha_bar.sqrt() / (1.0 - alpha_bar).sqrt()).ln()
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let n = (steps - 1) as f64;
        let beta = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * (i as f64 / n))
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::invalid("schedule needs at least two betas"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.last().copied().unwrap_or(0.0) <= 0.0 {
            return Err(Error::numeric("cumulative alpha underflowed to zero"));
        }
        let log_alpha_bar = alpha_bar.iter().map(|a| a.ln()).collect();
        let lambda = alpha_bar.iter().map(|&a| half_log_snr(a)).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            log_alpha_bar,
            lambda,
        })
    }

    /// The conventional DDPM schedule: T = 1000, beta linear in [1e-4, 0.02].
    pub fn ddpm_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Number of diffusion timesteps T.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.len() - 1
            )));
        }
        Ok(())
    }

    /// DDPM ancestral standard deviation at step `t -> t-1`, scaled by `eta`.
    pub fn sigma(&self, t: usize, eta: f64) -> f64 {
        let prev = if t == 0 { 1.0 } else { self.alpha_bar[t - 1] };
        eta * ((1.0 - prev) / (1.0 - self.alpha_bar[t]) * self.beta[t]).sqrt()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let max = (self.len() - 1) as f64;
        if !(0.0..=max).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, {max}]")));
        }
        Ok(())
    }

    /// ᾱ at a fractional timestep. Integer timesteps return the table entry exactly.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let k = t.floor() as usize;
        let frac = t - k as f64;
        if frac == 0.0 {
            return Ok(self.alpha_bar[k]);
        }
        let la = self.log_alpha_bar[k] + frac * (self.log_alpha_bar[k + 1] - self.log_alpha_bar[k]);
        Ok(la.exp())
    }

    pub fn marginal(&self, t: f64) -> Result<Marginal> {
        let ab = self.alpha_bar_at(t)?;
        Ok(Marginal {
            t,
            alpha: ab.sqrt(),
            sigma: (1.0 - ab).sqrt(),
            lambda: half_log_snr(ab),
        })
    }

    /// Inverse of the continuous half-log-SNR map.
    pub fn time_at_lambda(&self, lambda: f64) -> Result<f64> {
        let hi = self.lambda[0];
        let lo = self.lambda[self.len() - 1];
        if !(lo..=hi).contains(&lambda) {
            return Err(Error::invalid(format!(
                "lambda {lambda} outside schedule range [{lo}, {hi}]"
            )));
        }
        // lambda decreases in t; find k with lambda[k] >= target > lambda[k+1].
        let k = self.lambda.partition_point(|&l| l >= lambda);
        if k == 0 {
            return Ok(0.0);
        }
        let k = k - 1;
        if k + 1 >= self.len() || self.lambda[k] == lambda {
            return Ok(k as f64);
        }
        // ᾱ = sigmoid(2λ)
        let target = -(-2.0 * lambda).exp().ln_1p();
        let frac = (target - self.log_alpha_bar[k]) / (self.log_alpha_bar[k + 1] - self.log_alpha_bar[k]);
        Ok(k as f64 + frac.clamp(0.0, 1.0))
    }
}

/// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            left: x0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Affine reverse update `x_prev = x * x_coef + eps * eps_coef + z * noise`.
///
/// Every reverse step used here has this form, which is what makes the
/// paired-trajectory error decomposition exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub noise: f64,
}

impl StepCoefficients {
    pub fn apply(&self, x: &Tensor, eps: &Tensor, z: &Tensor) -> Result<Tensor> {
        if x.shape() != eps.shape() || x.shape() != z.shape() {
            return Err(Error::ShapeMismatch {
                op: "reverse step",
                left: x.shape().to_vec(),
                right: if x.shape() != eps.shape() {
                    eps.shape().to_vec()
                } else {
                    z.shape().to_vec()
                },
            });
        }
        let (a, b, s) = (self.x_coef, self.eps_coef, self.noise);
        let data = if s == 0.0 {
            x.data()
                .iter()
                .zip(eps.data())
                .map(|(x, e)| a * x + b * e)
                .collect()
        } else {
            x.data()
                .iter()
                .zip(eps.data())
                .zip(z.data())
                .map(|((x, e), z)| a * x + b * e + s * z)
                .collect()
        };
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// DDIM update from integer timestep `t` to `prev` (`None` = the clean sample).
///
/// `eta = 0` is the deterministic sampler; `eta = 1` coincides with DDPM
/// ancestral sampling over the same subsequence.
pub fn ddim_coefficients(
    schedule: &NoiseSchedule,
    t: usize,
    prev: Option<usize>,
    eta: f64,
) -> Result<StepCoefficients> {
    schedule.check_t(t)?;
    let ab_t = schedule.alpha_bar[t];
    let ab_p = match prev {
        Some(p) => {
            schedule.check_t(p)?;
            if p >= t {
                return Err(Error::invalid(format!("step {t} -> {p} is not a reverse step")));
            }
            schedule.alpha_bar[p]
        }
        None => 1.0,
    };
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    Ok(StepCoefficients {
        x_coef: (ab_p / ab_t).sqrt(),
        eps_coef: dir - (ab_p * (1.0 - ab_t) / ab_t).sqrt(),
        noise: sigma,
    })
}

/// The DDPM mean form `(1/sqrt(a))(x - b/sqrt(1 - ab) eps)` over the
/// subsequence step `t -> prev`, with effective `a = ab_t / ab_prev`.
pub fn ddpm_form_coefficients(
    schedule: &NoiseSchedule,
    t: usize,
    prev: Option<usize>,
    eta: f64,
) -> Result<StepCoefficients> {
    schedule.check_t(t)?;
    let ab_t = schedule.alpha_bar[t];
    let ab_p = match prev {
        Some(p) => {
            schedule.check_t(p)?;
            schedule.alpha_bar[p]
        }
        None => 1.0,
    };
    let alpha = ab_t / ab_p;
    let beta = 1.0 - alpha;
    Ok(StepCoefficients {
        x_coef: 1.0 / alpha.sqrt(),
        eps_coef: -beta / (alpha.sqrt() * (1.0 - ab_t).sqrt()),
        noise: eta * ((1.0 - ab_p) / (1.0 - ab_t) * beta).sqrt(),
    })
}

/// Single DDPM reverse step `t -> t-1`:
/// `(1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - ᾱ_t) eps_hat) + sigma_t z`.
///
/// `z` is always supplied by the caller so paired runs can share it.
pub fn ddpm_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    eta: f64,
    z: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let coef = StepCoefficients {
        x_coef: 1.0 / schedule.alpha[t].sqrt(),
        eps_coef: -schedule.beta[t] / (schedule.alpha[t].sqrt() * (1.0 - schedule.alpha_bar[t]).sqrt()),
        noise: schedule.sigma(t, eta),
    };
    coef.apply(x_t, eps_hat, z)
}

/// Ordered timesteps `t_0 > t_1 > ...` visited by a sampler, plus the
/// intermediate points `s_i` for two-stage solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid {
    times: Vec<f64>,
    mids: Option<Vec<f64>>,
}

impl TimestepGrid {
    /// `steps` timesteps at a uniform stride over `[0, T-1]`, including 0.
    /// The last step maps `t = 0` to the clean sample.
    pub fn ddim(schedule_len: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > schedule_len {
            return Err(Error::invalid(format!(
                "need 1 <= steps <= {schedule_len}, got {steps}"
            )));
        }
        let stride = schedule_len / steps;
        let times = (0..steps).rev().map(|i| (i * stride) as f64).collect();
        Self::from_parts(times, None, schedule_len)
    }

    /// `steps + 1` integer timesteps uniform over `[T-1, 0]` with λ-midpoints between them.
    pub fn dpm(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        let last = schedule.len() - 1;
        if steps == 0 || steps > last {
            return Err(Error::invalid(format!("need 1 <= steps <= {last}, got {steps}")));
        }
        let times: Vec<f64> = (0..=steps)
            .map(|i| ((last * (steps - i)) as f64 / steps as f64).round())
            .collect();
        let mut mids = Vec::with_capacity(steps);
        for w in times.windows(2) {
            let la = schedule.marginal(w[0])?.lambda;
            let lb = schedule.marginal(w[1])?.lambda;
            mids.push(schedule.time_at_lambda(0.5 * (la + lb))?);
        }
        Self::from_parts(times, Some(mids), schedule.len())
    }

    pub fn from_parts(times: Vec<f64>, mids: Option<Vec<f64>>, schedule_len: usize) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("empty timestep grid"));
        }
        let max = (schedule_len - 1) as f64;
        if times.iter().any(|t| !(0.0..=max).contains(t)) {
            return Err(Error::invalid(format!("grid times must lie in [0, {max}]")));
        }
        if times.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("grid times must be strictly decreasing"));
        }
        if let Some(m) = &mids {
            if m.len() + 1 != times.len() {
                return Err(Error::invalid("two-stage grid needs one midpoint per step"));
            }
            for (i, s) in m.iter().enumerate() {
                if !(times[i] > *s && *s > times[i + 1]) {
                    return Err(Error::invalid(format!(
                        "midpoint {s} does not interleave ({}, {})",
                        times[i],
                        times[i + 1]
                    )));
                }
            }
        }
        Ok(Self { times, mids })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mids(&self) -> Option<&[f64]> {
        self.mids.as_deref()
    }

    pub fn is_two_stage(&self) -> bool {
        self.mids.is_some()
    }

    /// Number of solver steps.
    pub fn steps(&self) -> usize {
        if self.is_two_stage() {
            self.times.len() - 1
        } else {
            self.times.len()
        }
    }

    /// Timesteps at which the noise model is evaluated, in sampling order.
    pub fn eval_points(&self) -> Vec<f64> {
        match &self.mids {
            None => self.times.clone(),
            Some(m) => m
                .iter()
                .enumerate()
                .flat_map(|(i, s)| [self.times[i], *s])
                .collect(),
        }
    }

    /// Solver step that consumes evaluation point `p`.
    pub fn step_of_point(&self, p: usize) -> usize {
        if self.is_two_stage() {
            p / 2
        } else {
            p
        }
    }

    /// Solver step whose update produced the state evaluated at point `p`
    /// (`None` for the initial noise).
    pub fn producer_of_point(&self, p: usize) -> Option<usize> {
        if self.is_two_stage() {
            if p % 2 == 1 {
                Some(p / 2)
            } else {
                (p / 2).checked_sub(1)
            }
        } else {
            p.checked_sub(1)
        }
    }

    /// Integer target of DDIM step `i` (`None` = clean sample).
    pub fn ddim_prev(&self, i: usize) -> Option<usize> {
        self.times.get(i + 1).map(|&t| t as usize)
    }
}

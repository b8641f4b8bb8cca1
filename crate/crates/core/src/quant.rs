//! Simulated post-training quantization.
//!
//! A value is quantized as `q = clip(round(x / s) - z, q_min, q_max)` and
//! dequantized as `s * (q + z)`. Rounding is half away from zero. Weights use
//! symmetric per-tensor min/max calibration, activations asymmetric per-tensor
//! ranges observed while running the full-precision sampler.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::{ActivationHook, NoiseEstimator, NoiseModel};
use crate::samplers::{self, Record, SamplerConfig};
use crate::tensors::{Rng, Tensor};

/// Smallest scale ever produced by calibration.
pub const SCALE_FLOOR: f64 = 1e-8;
/// Width added to a degenerate (constant) activation range.
pub const RANGE_WIDEN: f64 = 1e-8;
/// Bit width that disables quantization.
pub const PASS_THROUGH_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub q_min: i64,
    pub q_max: i64,
    pub bits: u32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i64, q_min: i64, q_max: i64, bits: u32) -> Result<Self> {
        let p = Self {
            scale,
            zero_point,
            q_min,
            q_max,
            bits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::invalid(format!("unsupported bit width {}", self.bits)));
        }
        if self.q_min >= self.q_max || self.q_max - self.q_min != (1i64 << self.bits) - 1 {
            return Err(Error::invalid(format!(
                "integer range [{}, {}] does not match {} bits",
                self.q_min, self.q_max, self.bits
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Signed grid `[-2^(b-1), 2^(b-1) - 1]`, zero point 0, `s = max|x| / q_max`.
    pub fn symmetric(bits: u32, max_abs: f64) -> Result<Self> {
        check_bits(bits)?;
        let q_max = (1i64 << (bits - 1)) - 1;
        let q_min = -(1i64 << (bits - 1));
        let scale = (max_abs / q_max.max(1) as f64).max(SCALE_FLOOR);
        Self::new(scale, 0, q_min, q_max, bits)
    }

    /// Unsigned grid `[0, 2^b - 1]` whose first level sits at `lo` (rounded to the grid).
    pub fn asymmetric(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("invalid range [{lo}, {hi}]")));
        }
        let hi = if hi == lo { lo + RANGE_WIDEN } else { hi };
        let q_min = 0;
        let q_max = (1i64 << bits) - 1;
        let scale = ((hi - lo) / (q_max - q_min) as f64).max(SCALE_FLOOR);
        let zero_point = (lo / scale).round() as i64 - q_min;
        Self::new(scale, zero_point, q_min, q_max, bits)
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> f64 {
        let q = ((x / self.scale).round() - self.zero_point as f64)
            .clamp(self.q_min as f64, self.q_max as f64);
        self.scale * (q + self.zero_point as f64)
    }

    /// Dequantized clip bounds.
    pub fn bounds(&self) -> (f64, f64) {
        (
            self.scale * (self.q_min + self.zero_point) as f64,
            self.scale * (self.q_max + self.zero_point) as f64,
        )
    }

    pub fn quantize_slice(&self, values: &mut [f64]) {
        for v in values {
            *v = self.quantize_value(*v);
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!(
            "bit width {bits} not supported (2..=16, or 32 for pass-through)"
        )));
    }
    Ok(())
}

fn check_config_bits(bits: u32) -> Result<()> {
    if bits == PASS_THROUGH_BITS {
        Ok(())
    } else {
        check_bits(bits)
    }
}

/// Fake-quantize (quantize, then dequantize) every element.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Tensor {
    x.map(|v| p.quantize_value(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    MinmaxSymmetric,
    MinmaxAsymmetric,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::MinmaxSymmetric => "minmax_symmetric",
            Scheme::MinmaxAsymmetric => "minmax_asymmetric",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax_symmetric" => Ok(Scheme::MinmaxSymmetric),
            "minmax_asymmetric" => Ok(Scheme::MinmaxAsymmetric),
            other => Err(Error::invalid(format!("unknown quantization scheme `{other}`"))),
        }
    }
}

fn minmax(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn calibrate_tensor(values: &[f64], scheme: Scheme, bits: u32) -> Result<QuantParams> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("cannot calibrate a tensor with non-finite values"));
    }
    match scheme {
        Scheme::MinmaxSymmetric => {
            QuantParams::symmetric(bits, values.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        }
        Scheme::MinmaxAsymmetric => {
            let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { minmax(values) };
            QuantParams::asymmetric(bits, lo, hi)
        }
    }
}

/// Per-parameter weight quantizers; biases (and the 32-bit mode) get `None`.
pub fn calibrate_weights(model: &NoiseModel, scheme: Scheme, bits: u32) -> Result<Vec<Option<QuantParams>>> {
    check_config_bits(bits)?;
    model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if bits == PASS_THROUGH_BITS || !model.is_weight(i) {
                return Ok(None);
            }
            calibrate_tensor(p.data(), scheme, bits)
                .map(Some)
                .map_err(|e| e.context(&model.param_names()[i]))
        })
        .collect()
}

/// `ε̂_θ`: a noise model with fake-quantized weights and activations.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    base: NoiseModel,
    weight_bits: u32,
    act_bits: u32,
    weight_scheme: Scheme,
    weight_qparams: Vec<Option<QuantParams>>,
    qweights: Vec<Tensor>,
    act_ranges: Vec<(f64, f64)>,
    act_qparams: Vec<Option<QuantParams>>,
    calibrated: bool,
}

/// Records per-site min/max.
struct RangeObserver<'a> {
    ranges: &'a mut [(f64, f64)],
}

impl ActivationHook for RangeObserver<'_> {
    fn on_activation(&mut self, site: usize, values: &mut [f64]) {
        let (lo, hi) = minmax(values);
        let r = &mut self.ranges[site];
        r.0 = r.0.min(lo);
        r.1 = r.1.max(hi);
    }
}

/// Fake-quantizes each site, then forwards to an optional observer.
struct QuantHook<'a> {
    params: &'a [Option<QuantParams>],
    inner: &'a mut dyn ActivationHook,
}

impl ActivationHook for QuantHook<'_> {
    fn on_activation(&mut self, site: usize, values: &mut [f64]) {
        if let Some(p) = &self.params[site] {
            p.quantize_slice(values);
        }
        self.inner.on_activation(site, values);
    }
}

impl QuantizedModel {
    /// Quantize the weights of `base`. Activations still need [`Self::calibrate_activations`].
    pub fn new(base: NoiseModel, weight_bits: u32, act_bits: u32, weight_scheme: Scheme) -> Result<Self> {
        check_config_bits(act_bits)?;
        let weight_qparams = calibrate_weights(&base, weight_scheme, weight_bits)?;
        let qweights = base
            .params()
            .iter()
            .zip(&weight_qparams)
            .map(|(p, q)| match q {
                Some(q) => quantize(p, q),
                None => p.clone(),
            })
            .collect();
        let sites = base.num_sites();
        Ok(Self {
            base,
            weight_bits,
            act_bits,
            weight_scheme,
            weight_qparams,
            qweights,
            act_ranges: vec![(f64::INFINITY, f64::NEG_INFINITY); sites],
            act_qparams: vec![None; sites],
            calibrated: false,
        })
    }

    /// Restore a calibrated model from its recorded activation ranges.
    pub fn from_ranges(
        base: NoiseModel,
        weight_bits: u32,
        act_bits: u32,
        weight_scheme: Scheme,
        act_ranges: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let mut q = Self::new(base, weight_bits, act_bits, weight_scheme)?;
        if act_ranges.len() != q.act_ranges.len() {
            return Err(Error::format(format!(
                "expected {} activation ranges, found {}",
                q.act_ranges.len(),
                act_ranges.len()
            )));
        }
        q.set_ranges(act_ranges)?;
        Ok(q)
    }

    fn set_ranges(&mut self, ranges: Vec<(f64, f64)>) -> Result<()> {
        self.act_qparams = ranges
            .iter()
            .enumerate()
            .map(|(site, &(lo, hi))| {
                if self.act_bits == PASS_THROUGH_BITS {
                    Ok(None)
                } else {
                    QuantParams::asymmetric(self.act_bits, lo, hi)
                        .map(Some)
                        .map_err(|e| e.context(format!("activation site {site}")))
                }
            })
            .collect::<Result<_>>()?;
        self.act_ranges = ranges;
        self.calibrated = true;
        Ok(())
    }

    pub fn base(&self) -> &NoiseModel {
        &self.base
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn act_bits(&self) -> u32 {
        self.act_bits
    }

    pub fn weight_scheme(&self) -> Scheme {
        self.weight_scheme
    }

    pub fn weight_qparams(&self) -> &[Option<QuantParams>] {
        &self.weight_qparams
    }

    pub fn act_qparams(&self) -> &[Option<QuantParams>] {
        &self.act_qparams
    }

    pub fn act_ranges(&self) -> &[(f64, f64)] {
        &self.act_ranges
    }

    /// Fake-quantized parameters (biases are kept in full precision).
    pub fn quantized_params(&self) -> &[Tensor] {
        &self.qweights
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    /// Record activation ranges from `n_calib` network evaluations spread
    /// uniformly over the sampler's evaluation points.
    ///
    /// Chain `j` of the full-precision sampler contributes the input it sees at
    /// point `floor(frac(j * phi) * P)`. The selection of chain `j` does not
    /// depend on `n_calib`, so a larger calibration set never shrinks a range.
    /// The observed network is the weight-quantized one with unquantized
    /// activations.
    pub fn calibrate_activations(
        &mut self,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        n_calib: usize,
        rng: &Rng,
    ) -> Result<()> {
        if n_calib == 0 {
            return Err(Error::invalid("n_calib must be >= 1"));
        }
        let run = samplers::sample(&self.base, schedule, sampler, None, n_calib, rng, Record::Inputs)?;
        let traj = run.trajectory.expect("inputs were recorded");
        let points = traj.times.len();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); points];
        for j in 0..n_calib {
            let frac = (j as f64 * golden).fract();
            by_point[((frac * points as f64) as usize).min(points - 1)].push(j);
        }
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); self.act_ranges.len()];
        for (p, chains) in by_point.iter().enumerate() {
            if chains.is_empty() {
                continue;
            }
            let rows: Vec<Tensor> = chains.iter().map(|&j| traj.inputs[p].index_axis0(j)).collect();
            let x = Tensor::stack(&rows)?;
            let t = vec![traj.times[p]; chains.len()];
            let mut obs = RangeObserver { ranges: &mut ranges };
            self.base.forward_with(&self.qweights, &x, &t, &mut obs)?;
        }
        if ranges.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite())) {
            return Err(Error::numeric("activation calibration observed non-finite values"));
        }
        self.set_ranges(ranges)
    }

    pub fn quantized_forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.quantized_forward_observed(x, t, &mut crate::models::NoHook)
    }

    /// Quantized forward pass; `hook` sees each site after fake quantization.
    pub fn quantized_forward_observed(
        &self,
        x: &Tensor,
        t: &[f64],
        hook: &mut dyn ActivationHook,
    ) -> Result<Tensor> {
        if !self.calibrated {
            return Err(Error::invalid(
                "quantized model is not calibrated; run activation calibration first",
            ));
        }
        let mut q = QuantHook {
            params: &self.act_qparams,
            inner: hook,
        };
        self.base.forward_with(&self.qweights, x, t, &mut q)
    }
}

impl NoiseEstimator for QuantizedModel {
    fn io_shape(&self) -> [usize; 3] {
        self.base.spec().io_shape
    }

    fn num_sites(&self) -> usize {
        self.base.num_sites()
    }

    fn estimate_observed(&self, x: &Tensor, t: &[f64], hook: &mut dyn ActivationHook) -> Result<Tensor> {
        self.quantized_forward_observed(x, t, hook)
    }
}

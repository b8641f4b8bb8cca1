//! Tiny noise-estimation networks `eps_theta(x_t, t)` with hand-written
//! backpropagation, trained on the simplified DDPM objective.
//!
//! Two architectures are provided:
//!
//! * `Mlp`: `concat(flatten(x), temb(t))` followed by SiLU hidden layers and a
//!   linear output layer.
//! * `Conv`: 3x3 conv (+ per-channel time embedding) -> SiLU -> 3x3 conv ->
//!   SiLU -> 3x3 output conv, all with zero padding.
//!
//! Every weight tensor is stored as `[fan_in, fan_out]` so that a layer is a
//! single `input * W + b` product on a row-major activation matrix. Conv layers
//! operate on NHWC matrices obtained through im2col.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensors::{gemm, Rng, Tensor};

/// Anything that maps `(x_t, t)` to a noise estimate of the same shape.
pub trait NoiseEstimator: Sync {
    /// `(C, H, W)` of a single sample.
    fn io_shape(&self) -> [usize; 3];

    /// Number of activation sites reported to hooks.
    fn num_sites(&self) -> usize;

    /// Like [`Self::estimate`], with `hook` observing every activation site.
    fn estimate_observed(&self, x: &Tensor, t: &[f64], hook: &mut dyn ActivationHook) -> Result<Tensor>;

    /// `x` is `[B, C, H, W]`, `t` holds one (possibly fractional) timestep per sample.
    fn estimate(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.estimate_observed(x, t, &mut NoHook)
    }
}

/// Observer/rewriter for the values flowing through each activation site.
///
/// Sites are numbered in forward order; see [`NoiseModel::site_names`].
pub trait ActivationHook {
    fn on_activation(&mut self, site: usize, values: &mut [f64]);
}

/// Hook that leaves every activation untouched.
pub struct NoHook;

impl ActivationHook for NoHook {
    #[inline]
    fn on_activation(&mut self, _site: usize, _values: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Conv,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Conv => "conv",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv" => Ok(Arch::Conv),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Shape hyperparameters of a [`NoiseModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `(C, H, W)`.
    pub io_shape: [usize; 3],
    pub time_embed_dim: usize,
    /// Hidden width (MLP) or channel width (conv).
    pub width: usize,
    /// Number of hidden layers; MLP only.
    pub hidden_layers: usize,
}

impl ModelSpec {
    pub fn mlp(io_shape: [usize; 3]) -> Self {
        Self {
            arch: Arch::Mlp,
            io_shape,
            time_embed_dim: 32,
            width: 128,
            hidden_layers: 3,
        }
    }

    pub fn conv(io_shape: [usize; 3]) -> Self {
        Self {
            arch: Arch::Conv,
            io_shape,
            time_embed_dim: 32,
            width: 32,
            hidden_layers: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.io_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("io_shape dimensions must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be positive and even"));
        }
        if self.width == 0 {
            return Err(Error::invalid("width must be positive"));
        }
        if self.arch == Arch::Mlp && self.hidden_layers == 0 {
            return Err(Error::invalid("mlp needs at least one hidden layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Sinusoidal features `[sin(t w_k)..., cos(t w_k)...]`, `w_k = 10000^(-k/half)`.
pub fn time_embedding(t: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * w).sin();
        out[half + k] = (t * w).cos();
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// 3x3 zero-padded patches of an NHWC activation matrix `[B*H*W, C]`,
/// columns ordered `(ky, kx, c)`.
fn im2col(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; b * h * w * k];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((n * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut x = vec![0.0; b * h * w * c];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for i in 0..c {
                            x[dst + i] += cols[src + i];
                        }
                    }
                }
            }
        }
    }
    x
}

fn nchw_to_nhwc(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                out[(n * hw + p) * c + ch] = x[(n * c + ch) * hw + p];
            }
        }
    }
    out
}

fn nhwc_to_nchw(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                out[(n * c + ch) * hw + p] = x[(n * hw + p) * c + ch];
            }
        }
    }
    out
}

/// Intermediate values kept for the backward pass.
enum Cache {
    Mlp {
        /// Input of every linear layer.
        inputs: Vec<Vec<f64>>,
        /// Pre-activation output of every hidden layer.
        pres: Vec<Vec<f64>>,
    },
    Conv {
        emb: Vec<f64>,
        cols1: Vec<f64>,
        pre1: Vec<f64>,
        cols2: Vec<f64>,
        pre2: Vec<f64>,
        cols3: Vec<f64>,
    },
}

impl NoiseModel {
    /// Randomly initialized model. With `zero_output` the final layer starts at zero.
    pub fn new(spec: ModelSpec, rng: &mut Rng, zero_output: bool) -> Result<Self> {
        spec.validate()?;
        let [c, h, w] = spec.io_shape;
        let mut layers: Vec<(String, usize, usize)> = Vec::new();
        match spec.arch {
            Arch::Mlp => {
                let mut fan_in = c * h * w + spec.time_embed_dim;
                for l in 0..spec.hidden_layers {
                    layers.push((format!("fc{l}"), fan_in, spec.width));
                    fan_in = spec.width;
                }
                layers.push(("out".into(), fan_in, c * h * w));
            }
            Arch::Conv => {
                layers.push(("conv1".into(), 9 * c, spec.width));
                layers.push(("temb".into(), spec.time_embed_dim, spec.width));
                layers.push(("conv2".into(), 9 * spec.width, spec.width));
                layers.push(("out".into(), 9 * spec.width, c));
            }
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        let last = layers.len() - 1;
        for (i, (name, fan_in, fan_out)) in layers.into_iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            let weight = if zero_output && i == last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                Tensor::randn(rng, &[fan_in, fan_out]).scale(std)
            };
            names.push(format!("{name}.weight"));
            params.push(weight);
            names.push(format!("{name}.bias"));
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { spec, names, params })
    }

    /// Rebuild a model from stored parameters (checkpoint restore).
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::new(spec, &mut Rng::new(0), true)?;
        if params.len() != template.params.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    left: t.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            spec,
            names: template.names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Whether parameter `i` is a weight matrix (as opposed to a bias).
    pub fn is_weight(&self, i: usize) -> bool {
        self.names[i].ends_with(".weight")
    }

    pub fn num_sites(&self) -> usize {
        self.site_names().len()
    }

    /// Activation sites: the input of every layer, then the network output.
    pub fn site_names(&self) -> Vec<String> {
        match self.spec.arch {
            Arch::Mlp => {
                let mut v = vec!["input".to_string()];
                v.extend((1..self.spec.hidden_layers).map(|l| format!("fc{l}.in")));
                v.push("out.in".into());
                v.push("output".into());
                v
            }
            Arch::Conv => ["input", "temb.in", "conv2.in", "out.in", "output"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_with(&self.params, x, t, &mut NoHook)
    }

    /// Forward pass with substitute parameters (e.g. fake-quantized weights)
    /// and a hook applied at every activation site.
    pub fn forward_with(
        &self,
        params: &[Tensor],
        x: &Tensor,
        t: &[f64],
        hook: &mut dyn ActivationHook,
    ) -> Result<Tensor> {
        Ok(self.run(params, x, t, hook, false)?.0)
    }

    fn check_input(&self, x: &Tensor, t: &[f64]) -> Result<usize> {
        let [c, h, w] = self.spec.io_shape;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                left: vec![x.shape().first().copied().unwrap_or(0), c, h, w],
                right: x.shape().to_vec(),
            });
        }
        let b = x.shape()[0];
        if t.len() != b {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {b}",
                t.len()
            )));
        }
        Ok(b)
    }

    fn run(
        &self,
        params: &[Tensor],
        x: &Tensor,
        t: &[f64],
        hook: &mut dyn ActivationHook,
        keep: bool,
    ) -> Result<(Tensor, Option<Cache>)> {
        let b = self.check_input(x, t)?;
        match self.spec.arch {
            Arch::Mlp => self.run_mlp(params, x, t, b, hook, keep),
            Arch::Conv => self.run_conv(params, x, t, b, hook, keep),
        }
    }

    fn run_mlp(
        &self,
        params: &[Tensor],
        x: &Tensor,
        t: &[f64],
        b: usize,
        hook: &mut dyn ActivationHook,
        keep: bool,
    ) -> Result<(Tensor, Option<Cache>)> {
        let d = x.row_len();
        let e = self.spec.time_embed_dim;
        let d_in = d + e;
        let mut h = vec![0.0; b * d_in];
        for n in 0..b {
            let row = &mut h[n * d_in..(n + 1) * d_in];
            row[..d].copy_from_slice(x.row(n));
            time_embedding(t[n], e, &mut row[d..]);
        }
        hook.on_activation(0, &mut h);
        let layers = params.len() / 2;
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut fan_in = d_in;
        for l in 0..layers {
            let wt = &params[2 * l];
            let bias = &params[2 * l + 1];
            let fan_out = wt.shape()[1];
            let mut pre = vec![0.0; b * fan_out];
            gemm(b, fan_in, fan_out, &h, false, wt.data(), false, &mut pre, false);
            add_bias(&mut pre, bias.data());
            if l + 1 == layers {
                hook.on_activation(l + 1, &mut pre);
                if keep {
                    inputs.push(h);
                }
                let out = Tensor::new(x.shape().to_vec(), pre)?;
                let cache = keep.then_some(Cache::Mlp { inputs, pres });
                return Ok((out, cache));
            }
            let mut next: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
            hook.on_activation(l + 1, &mut next);
            if keep {
                inputs.push(std::mem::replace(&mut h, next));
                pres.push(pre);
            } else {
                h = next;
            }
            fan_in = fan_out;
        }
        unreachable!("mlp has at least one layer")
    }

    fn run_conv(
        &self,
        params: &[Tensor],
        x: &Tensor,
        t: &[f64],
        b: usize,
        hook: &mut dyn ActivationHook,
        keep: bool,
    ) -> Result<(Tensor, Option<Cache>)> {
        let [c, h, w] = self.spec.io_shape;
        let hw = h * w;
        let rows = b * hw;
        let width = self.spec.width;
        let e = self.spec.time_embed_dim;
        let [w1, b1, wt, bt, w2, b2, w3, b3] = params else {
            return Err(Error::invalid("conv model expects 8 parameter tensors"));
        };

        let mut xin = nchw_to_nhwc(x.data(), b, c, hw);
        hook.on_activation(0, &mut xin);
        let mut emb = vec![0.0; b * e];
        for n in 0..b {
            time_embedding(t[n], e, &mut emb[n * e..(n + 1) * e]);
        }
        hook.on_activation(1, &mut emb);

        let cols1 = im2col(&xin, b, h, w, c);
        let mut pre1 = vec![0.0; rows * width];
        gemm(rows, 9 * c, width, &cols1, false, w1.data(), false, &mut pre1, false);
        add_bias(&mut pre1, b1.data());
        let mut tproj = vec![0.0; b * width];
        gemm(b, e, width, &emb, false, wt.data(), false, &mut tproj, false);
        add_bias(&mut tproj, bt.data());
        for (r, row) in pre1.chunks_exact_mut(width).enumerate() {
            let tp = &tproj[(r / hw) * width..(r / hw + 1) * width];
            for (o, v) in row.iter_mut().zip(tp) {
                *o += v;
            }
        }
        let mut a1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        hook.on_activation(2, &mut a1);

        let cols2 = im2col(&a1, b, h, w, width);
        let mut pre2 = vec![0.0; rows * width];
        gemm(rows, 9 * width, width, &cols2, false, w2.data(), false, &mut pre2, false);
        add_bias(&mut pre2, b2.data());
        let mut a2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
        hook.on_activation(3, &mut a2);

        let cols3 = im2col(&a2, b, h, w, width);
        let mut out = vec![0.0; rows * c];
        gemm(rows, 9 * width, c, &cols3, false, w3.data(), false, &mut out, false);
        add_bias(&mut out, b3.data());
        hook.on_activation(4, &mut out);

        let out = Tensor::new(x.shape().to_vec(), nhwc_to_nchw(&out, b, c, hw))?;
        let cache = keep.then_some(Cache::Conv {
            emb,
            cols1,
            pre1,
            cols2,
            pre2,
            cols3,
        });
        Ok((out, cache))
    }

    /// Parameter gradients given `d loss / d output`.
    fn backward(&self, cache: Cache, dout: &Tensor) -> Vec<Tensor> {
        let b = dout.shape()[0];
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        match cache {
            Cache::Mlp { inputs, pres } => {
                let layers = self.params.len() / 2;
                let mut delta = dout.data().to_vec();
                for l in (0..layers).rev() {
                    let wt = &self.params[2 * l];
                    let (fan_in, fan_out) = (wt.shape()[0], wt.shape()[1]);
                    gemm(
                        fan_in,
                        b,
                        fan_out,
                        &inputs[l],
                        true,
                        &delta,
                        false,
                        grads[2 * l].data_mut(),
                        false,
                    );
                    column_sums(&delta, fan_out, grads[2 * l + 1].data_mut());
                    if l == 0 {
                        break;
                    }
                    let mut dh = vec![0.0; b * fan_in];
                    gemm(b, fan_out, fan_in, &delta, false, wt.data(), true, &mut dh, false);
                    for (g, p) in dh.iter_mut().zip(&pres[l - 1]) {
                        *g *= silu_grad(*p);
                    }
                    delta = dh;
                }
            }
            Cache::Conv {
                emb,
                cols1,
                pre1,
                cols2,
                pre2,
                cols3,
            } => {
                let [c, h, w] = self.spec.io_shape;
                let hw = h * w;
                let rows = b * hw;
                let width = self.spec.width;
                let e = self.spec.time_embed_dim;
                let d3 = nchw_to_nhwc(dout.data(), b, c, hw);
                gemm(9 * width, rows, c, &cols3, true, &d3, false, grads[6].data_mut(), false);
                column_sums(&d3, c, grads[7].data_mut());
                let mut dcols3 = vec![0.0; rows * 9 * width];
                gemm(rows, c, 9 * width, &d3, false, self.params[6].data(), true, &mut dcols3, false);
                let mut d2 = col2im(&dcols3, b, h, w, width);
                for (g, p) in d2.iter_mut().zip(&pre2) {
                    *g *= silu_grad(*p);
                }
                gemm(9 * width, rows, width, &cols2, true, &d2, false, grads[4].data_mut(), false);
                column_sums(&d2, width, grads[5].data_mut());
                let mut dcols2 = vec![0.0; rows * 9 * width];
                gemm(rows, width, 9 * width, &d2, false, self.params[4].data(), true, &mut dcols2, false);
                let mut d1 = col2im(&dcols2, b, h, w, width);
                for (g, p) in d1.iter_mut().zip(&pre1) {
                    *g *= silu_grad(*p);
                }
                gemm(9 * c, rows, width, &cols1, true, &d1, false, grads[0].data_mut(), false);
                column_sums(&d1, width, grads[1].data_mut());
                let mut dt = vec![0.0; b * width];
                for (r, row) in d1.chunks_exact(width).enumerate() {
                    let n = r / hw;
                    for (o, v) in dt[n * width..(n + 1) * width].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                gemm(e, b, width, &emb, true, &dt, false, grads[2].data_mut(), false);
                column_sums(&dt, width, grads[3].data_mut());
            }
        }
        grads
    }
}

impl NoiseEstimator for NoiseModel {
    fn io_shape(&self) -> [usize; 3] {
        self.spec.io_shape
    }

    fn num_sites(&self) -> usize {
        NoiseModel::num_sites(self)
    }

    fn estimate_observed(&self, x: &Tensor, t: &[f64], hook: &mut dyn ActivationHook) -> Result<Tensor> {
        self.forward_with(&self.params, x, t, hook)
    }
}

/// Simplified objective `mean((eps - eps_theta(sqrt(ab) x0 + sqrt(1-ab) eps, t))^2)`
/// and its gradient for every parameter tensor.
pub fn loss_and_grads(
    model: &NoiseModel,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_and_grads",
            left: x0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let b = x0.rows();
    if t.len() != b {
        return Err(Error::invalid(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let n = x0.row_len();
    let mut xt = Tensor::zeros(x0.shape());
    for i in 0..b {
        let ti = t[i];
        if ti >= schedule.len() {
            return Err(Error::invalid(format!("timestep {ti} outside schedule")));
        }
        let ab = schedule.alpha_bars()[ti];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, x), e) in xt.row_mut(i).iter_mut().zip(x0.row(i)).zip(eps.row(i)) {
            *o = a * x + s * e;
        }
    }
    let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let (out, cache) = model.run(&model.params, &xt, &tf, &mut NoHook, true)?;
    let count = (b * n) as f64;
    let mut loss = 0.0;
    let mut dout = Tensor::zeros(out.shape());
    for ((d, o), e) in dout.data_mut().iter_mut().zip(out.data()).zip(eps.data()) {
        let r = o - e;
        loss += r * r;
        *d = 2.0 * r / count;
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite training loss (batch {b}, t range {:?}..{:?})",
            t.iter().min(),
            t.iter().max()
        )));
    }
    let grads = model.backward(cache.expect("cache requested"), &dout);
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Loss-curve window length in steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("train.steps must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("train.batch must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train.lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam moment decay rates must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("train.log_every must be >= 1"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NoiseModel,
    /// `(last step of window, mean loss over window)`.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Train on the simplified objective with uniformly drawn timesteps.
pub fn train(
    mut model: NoiseModel,
    dataset: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.rank() != 4 || dataset.rows() == 0 {
        return Err(Error::invalid("dataset must be a nonempty [N, C, H, W] tensor"));
    }
    let [c, h, w] = model.spec.io_shape;
    if dataset.shape()[1..] != [c, h, w] {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![dataset.rows(), c, h, w],
            right: dataset.shape().to_vec(),
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg);
    let n = dataset.row_len();
    let mut x0 = Tensor::zeros(&[cfg.batch, c, h, w]);
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.steps {
        for i in 0..cfg.batch {
            let idx = rng.below(dataset.rows() as u64) as usize;
            x0.data_mut()[i * n..(i + 1) * n].copy_from_slice(dataset.row(idx));
        }
        let t: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.below(schedule.len() as u64) as usize)
            .collect();
        let eps = Tensor::randn(&mut rng, x0.shape());
        let (loss, grads) = loss_and_grads(&model, &x0, &t, &eps, schedule)
            .map_err(|e| e.context(format!("training step {step}")))?;
        if loss > 1e6 {
            return Err(Error::numeric(format!("training diverged at step {step}: loss {loss}")));
        }
        opt.step(&mut model.params, &grads);
        window += loss;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let len = (step % cfg.log_every + 1) as f64;
            curve.push((step + 1, window / len));
            window = 0.0;
        }
    }
    if model.params.iter().any(|p| !p.all_finite()) {
        return Err(Error::numeric("non-finite parameters after training"));
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Four-component 2-D Gaussian mixture with means at (±1, ±1).
    Gauss2d,
    /// Two concentric noisy rings of radius 0.5 and 1.
    Rings2d,
    /// 8x8 single-channel images with one soft blob each, values in [-1, 1].
    Blobs8x8,
}

impl DatasetKind {
    pub fn io_shape(&self) -> [usize; 3] {
        match self {
            DatasetKind::Gauss2d | DatasetKind::Rings2d => [2, 1, 1],
            DatasetKind::Blobs8x8 => [1, 8, 8],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gauss2d => "gauss2d",
            DatasetKind::Rings2d => "rings2d",
            DatasetKind::Blobs8x8 => "blobs8x8",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss2d" => Ok(DatasetKind::Gauss2d),
            "rings2d" => Ok(DatasetKind::Rings2d),
            "blobs8x8" => Ok(DatasetKind::Blobs8x8),
            other => Err(Error::invalid(format!("unknown dataset `{other}`"))),
        }
    }
}

pub const GAUSS2D_STD: f64 = 0.15;

pub fn make_toy_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let mut rng = Rng::new(seed);
    let [c, h, w] = kind.io_shape();
    let mut data = Vec::with_capacity(n * c * h * w);
    match kind {
        DatasetKind::Gauss2d => {
            for _ in 0..n {
                let k = rng.below(4);
                let mx = if k & 1 == 0 { 1.0 } else { -1.0 };
                let my = if k & 2 == 0 { 1.0 } else { -1.0 };
                data.push(mx + GAUSS2D_STD * rng.normal());
                data.push(my + GAUSS2D_STD * rng.normal());
            }
        }
        DatasetKind::Rings2d => {
            for _ in 0..n {
                let r = if rng.below(2) == 0 { 0.5 } else { 1.0 };
                let theta = 2.0 * std::f64::consts::PI * rng.uniform();
                let rr = r + 0.05 * rng.normal();
                data.push(rr * theta.cos());
                data.push(rr * theta.sin());
            }
        }
        DatasetKind::Blobs8x8 => {
            for _ in 0..n {
                let cy = 1.5 + 4.0 * rng.uniform();
                let cx = 1.5 + 4.0 * rng.uniform();
                let radius = 0.8 + 0.8 * rng.uniform();
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let v = 2.0 * (-d2 / (2.0 * radius * radius)).exp() - 1.0;
                        data.push(v.clamp(-1.0, 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

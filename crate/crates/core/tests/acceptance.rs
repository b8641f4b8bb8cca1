//! Acceptance criteria, one printed PASS/FAIL line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report.

use std::sync::OnceLock;
use std::time::Instant;

use tacq::correction::{
    build_mask, compute_threshold, paired_trace, precalculate_traced, solve_k, CorrectionConfig, CorrectionTable, Variant,
};
use tacq::diffusion::{NoiseSchedule, TimestepGrid};
use tacq::harness::checkpoint::{
    model_from_container, model_to_container, qmodel_from_container, qmodel_to_container, samples_from_container,
    samples_to_container, table_from_container, table_to_container,
};
use tacq::harness::pipeline::{self, Trained};
use tacq::harness::{Container, RunConfig};
use tacq::metrics::trace_diagnostics;
use tacq::models::{loss_and_grads, ActivationHook, ModelSpec, NoiseEstimator, NoiseModel};
use tacq::quant::{QuantParams, QuantizedModel, Scheme};
use tacq::samplers::{data_prediction, dpmpp_2s_step, first_order_update, sample, Record, SamplerConfig};
use tacq::tensors::{Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn default_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse("dataset = gauss2d\n").unwrap();
    cfg.set("seed", &seed.to_string()).unwrap();
    cfg
}

/// Default gauss2d models per seed, trained once and shared by criteria 4, 5 and 7.
fn trained(seed: u64) -> &'static Trained {
    static MODELS: [OnceLock<Trained>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    MODELS[seed as usize].get_or_init(|| pipeline::train_stage(&default_cfg(seed)).expect("training"))
}

fn w3a8(seed: u64) -> QuantizedModel {
    let cfg = default_cfg(seed);
    let t = trained(seed);
    pipeline::quantize_stage(&cfg, &t.model, &t.schedule).expect("quantize")
}

// ---------------------------------------------------------------- NER oracles

/// Loss difference `L(k1) - L(k2)` evaluated pixel by pixel; factored so that
/// the comparison stays exact near the flat bottom of the parabola.
fn loss_diff(eh: &[f64], e: &[f64], l1: f64, l2: f64, floor: f64, k1: f64, k2: f64) -> f64 {
    let n = eh.len() as f64;
    let r_rel: f64 = e.iter().filter(|v| v.abs() > floor).map(|v| v * v).sum();
    let (mut mse, mut rel) = (0.0, 0.0);
    for (a, b) in eh.iter().zip(e) {
        // (k1 a - b)² - (k2 a - b)²
        let d = (k1 - k2) * a * ((k1 + k2) * a - 2.0 * b);
        mse += d;
        if b.abs() > floor {
            rel += d;
        }
    }
    let rel = if r_rel > 0.0 { l1 * rel / r_rel } else { 0.0 };
    (1.0 - l1) * mse / n + rel + l2 * (k1 - k2) * (k1 + k2 - 2.0)
}

fn golden_section(f: impl Fn(f64, f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-13 * hi.abs().max(lo.abs()).max(1.0) {
        let c = hi - g * (hi - lo);
        let d = lo + g * (hi - lo);
        if f(c, d) < 0.0 {
            hi = d;
        } else {
            lo = c;
        }
    }
    0.5 * (lo + hi)
}

/// Masked pixels of channel `ch`, pooled over the batch.
fn channel_pixels(eh: &Tensor, e: &Tensor, mask: &Tensor, ch: usize) -> (Vec<f64>, Vec<f64>) {
    let s = e.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for n in 0..s[0] {
        for i in 0..hw {
            let idx = (n * c + ch) * hw + i;
            if mask.data()[idx] != 0.0 {
                a.push(eh.data()[idx]);
                b.push(e.data()[idx]);
            }
        }
    }
    (a, b)
}

struct Instance {
    eh: Tensor,
    e: Tensor,
    mask: Tensor,
    cfg: CorrectionConfig,
}

fn ner_instances() -> Vec<Instance> {
    let mut out = Vec::with_capacity(200);
    let mut rng = Rng::new(0xC1);
    for i in 0..200usize {
        let s = [1, 4][i % 2];
        let c = [1, 3][(i / 2) % 2];
        let hw = [1, 8][(i / 4) % 2];
        let lambda1 = ((i / 8) % 10) as f64 / 10.0;
        let lambda2 = [1e-4, 1e-2][(i / 80) % 2];
        let k_threshold = [0.0, 1.0][(i / 160) % 2];
        let e = Tensor::randn(&mut rng, &[s, c, hw, hw]);
        let gain = 0.5 + 1.5 * rng.uniform();
        let noise = 0.5 * rng.uniform();
        let eh = e.scale(gain).add(&Tensor::randn(&mut rng, &[s, c, hw, hw]).scale(noise)).unwrap();
        let cfg = CorrectionConfig {
            lambda1,
            lambda2,
            k_threshold,
            ..Default::default()
        };
        let mask = build_mask(&e, compute_threshold(&e, k_threshold), false);
        out.push(Instance { eh, e, mask, cfg });
    }
    out
}

fn c1_closed_form() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut channels, mut empty) = (0.0f64, 0, 0);
    for (i, inst) in ner_instances().iter().enumerate() {
        let k = ok(solve_k(&inst.eh, &inst.e, Some(&inst.mask), &inst.cfg))?;
        for (ch, &kc) in k.iter().enumerate() {
            let (a, b) = channel_pixels(&inst.eh, &inst.e, &inst.mask, ch);
            if a.is_empty() {
                ensure!(kc == 1.0, "instance {i} ch {ch}: empty mask should give K = 1, got {kc}");
                empty += 1;
                continue;
            }
            let (l1, l2, fl) = (inst.cfg.lambda1, inst.cfg.lambda2, inst.cfg.eps_floor);
            let oracle = golden_section(|x, y| loss_diff(&a, &b, l1, l2, fl, x, y), -10.0, 100.0);
            worst = worst.max((kc - oracle).abs());
            channels += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-8, "max |K - golden| = {worst:.3e} over {channels} channels");
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!(
        "200 instances, {channels} channels (+{empty} empty), max |K - golden| = {worst:.2e}, {secs:.2} s"
    ))
}

fn c2_convexity() -> Outcome {
    let h = 1e-3;
    let mut min_curv = f64::INFINITY;
    for (i, inst) in ner_instances().iter().enumerate() {
        let k = ok(solve_k(&inst.eh, &inst.e, Some(&inst.mask), &inst.cfg))?;
        for (ch, &kc) in k.iter().enumerate() {
            let (a, b) = channel_pixels(&inst.eh, &inst.e, &inst.mask, ch);
            if a.is_empty() {
                continue;
            }
            let (l1, l2, fl) = (inst.cfg.lambda1, inst.cfg.lambda2, inst.cfg.eps_floor);
            let d2 = loss_diff(&a, &b, l1, l2, fl, kc + h, kc) - loss_diff(&a, &b, l1, l2, fl, kc, kc - h);
            ensure!(d2 > 0.0, "instance {i} ch {ch}: second difference {d2:e}");
            min_curv = min_curv.min(d2 / (h * h));
        }
    }
    Ok(format!("second difference > 0 everywhere, min curvature {min_curv:.3e}"))
}

fn c3_identities() -> Outcome {
    let mut rng = Rng::new(0xC3);
    let e = Tensor::randn(&mut rng, &[4, 3, 8, 8]);
    for l1 in [0.0, 0.3, 0.9] {
        for kt in [0.0, 1.0, 2.0] {
            let cfg = CorrectionConfig {
                lambda1: l1,
                k_threshold: kt,
                ..Default::default()
            };
            let mask = build_mask(&e, compute_threshold(&e, kt), false);
            let k = ok(solve_k(&e, &e, Some(&mask), &cfg))?;
            ensure!(k.iter().all(|&v| v == 1.0), "ε̂ = ε gave K = {k:?} (λ1 {l1}, k_threshold {kt})");
        }
    }
    let mut worst = 0.0f64;
    for c in [0.5, 2.0, 5.0] {
        let cfg = CorrectionConfig {
            lambda2: 1e-12,
            ..Default::default()
        };
        let mask = build_mask(&e, compute_threshold(&e, cfg.k_threshold), false);
        for kc in ok(solve_k(&e.scale(c), &e, Some(&mask), &cfg))? {
            worst = worst.max((kc - 1.0 / c).abs());
        }
    }
    ensure!(worst < 1e-6, "max |K - 1/c| = {worst:e}");
    Ok(format!("K ≡ 1 exactly; max |K - 1/c| = {worst:.2e}"))
}

fn c4_ibc_exactness() -> Outcome {
    let cfg = default_cfg(0);
    let t = trained(0);
    let q = w3a8(0);
    let sampler = ok(cfg.sampler_config(&t.schedule))?;
    let mut ccfg = cfg.correction();
    ccfg.calib_batch = 64;
    let (_, trace) = ok(precalculate_traced(&t.model, &q, &t.schedule, &sampler, &ccfg, &cfg.stage_rng("correct"), true))?;
    let trace = trace.expect("trace");
    let mut worst = 0.0f64;
    let mut raw = 0.0f64;
    for p in 0..trace.steps() {
        let n = trace.x[p].rows();
        let d = trace.x[p].row_len();
        for j in 0..d {
            let mut post = 0.0;
            let mut pre = 0.0;
            for s in 0..n {
                post += trace.x_tilde[p].row(s)[j] - trace.x[p].row(s)[j];
                pre += trace.x_hat[p].row(s)[j] - trace.x[p].row(s)[j];
            }
            worst = worst.max((post / n as f64).abs());
            raw = raw.max((pre / n as f64).abs());
        }
    }
    ensure!(worst <= 1e-12, "max post-correction batch-mean discrepancy {worst:e}");
    Ok(format!(
        "{} steps, 64 chains: max |mean(x̃ - x)| = {worst:.2e} (before correction {raw:.2e})",
        trace.steps()
    ))
}

fn c5_decomposition() -> Outcome {
    let cfg = default_cfg(0);
    let t = trained(0);
    let q = w3a8(0);
    let sampler = ok(cfg.sampler_config(&t.schedule))?;
    let mut lines = Vec::new();
    for v in [Variant::Baseline, Variant::Tac] {
        let mut c = cfg.clone();
        c.variant = v;
        let table = ok(pipeline::correct_stage(&c, &t.model, &q, &t.schedule))?;
        let tr = ok(paired_trace(&t.model, &q, &t.schedule, &sampler, table.as_ref(), 10, &cfg.stage_rng("trace")))?;
        ensure!(tr.shares_noise(), "lanes do not share z");
        let r = ok(trace_diagnostics(&tr))?;
        let (res, slack) = (r.max_identity_residual(), r.min_slack());
        ensure!(res <= 1e-10, "{v}: identity residual {res:e}");
        ensure!(slack >= -1e-9, "{v}: bound slack {slack:e}");
        lines.push(format!("{v}: residual {res:.1e}, min slack {slack:.2e}"));
    }
    Ok(lines.join("; "))
}

fn gradient_check(model: &mut NoiseModel, rng: &mut Rng) -> Result<(f64, usize), String> {
    let schedule = NoiseSchedule::ddpm_default();
    let [c, h, w] = model.spec().io_shape;
    let x0 = Tensor::randn(rng, &[3, c, h, w]);
    let eps = Tensor::randn(rng, &[3, c, h, w]);
    let t = [17usize, 420, 903];
    let (_, grads) = ok(loss_and_grads(model, &x0, &t, &eps, &schedule))?;
    let (mut worst, mut checked) = (0.0f64, 0);
    for p in 0..model.params().len() {
        for _ in 0..10 {
            let idx = rng.below(model.params()[p].len() as u64) as usize;
            let orig = model.params()[p].data()[idx];
            let d = 1e-5 * orig.abs().max(1.0);
            model.params_mut()[p].data_mut()[idx] = orig + d;
            let (lp, _) = ok(loss_and_grads(model, &x0, &t, &eps, &schedule))?;
            model.params_mut()[p].data_mut()[idx] = orig - d;
            let (lm, _) = ok(loss_and_grads(model, &x0, &t, &eps, &schedule))?;
            model.params_mut()[p].data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * d);
            let an = grads[p].data()[idx];
            let scale = fd.abs().max(an.abs());
            let rel = if scale == 0.0 { 0.0 } else { (fd - an).abs() / scale };
            ensure!(
                rel <= 1e-4,
                "{}[{idx}]: analytic {an:e} vs finite difference {fd:e} (rel {rel:e})",
                model.param_names()[p]
            );
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn c6_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(0xC6);
    let mut mlp = ok(NoiseModel::new(ModelSpec::mlp([2, 1, 1]), &mut rng, false))?;
    let (wm, nm) = gradient_check(&mut mlp, &mut rng)?;
    let mut conv = ok(NoiseModel::new(ModelSpec::conv([1, 8, 8]), &mut rng, false))?;
    let (wc, nc) = gradient_check(&mut conv, &mut rng)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!(
        "mlp {nm} coords max rel {wm:.1e}; conv {nc} coords max rel {wc:.1e}; {secs:.1} s"
    ))
}

/// Energy distances of the ablation rows at 10⁴ samples as
/// (seed, baseline, first-step NER+IBC, full).
// TODO: freeze these from the first run on which the ordering checks pass.
const C7_FROZEN: Option<[(u64, f64, f64, f64); 3]> = None;
const C7_BAND: f64 = 1e-9;

fn c7_ablation() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let cfg = default_cfg(seed);
        let t = trained(seed);
        let q = w3a8(seed);
        let run = ok(pipeline::ablate(&cfg, &t.model, &q, &t.schedule, &Variant::ABLATION))?;
        let e = |v| run.energy(v).expect("variant evaluated");
        rows.push((seed, e(Variant::Baseline), e(Variant::Ibc), e(Variant::NerIbc), e(Variant::Tac)));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = String::new();
    for (seed, base, ibc, first, full) in &rows {
        detail += &format!("\n      seed {seed}: baseline {base:.5}  ibc {ibc:.5}  ner-ibc {first:.5}  tac {full:.5}");
    }
    let mean = |f: fn(&(u64, f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (mb, mf, mt) = (mean(|r| r.1), mean(|r| r.3), mean(|r| r.4));
    detail += &format!("\n      mean: baseline {mb:.5}  ner-ibc {mf:.5}  tac {mt:.5}; {secs:.0} s");
    let mut failures = Vec::new();
    for (seed, base, _, _, full) in &rows {
        if full > base {
            failures.push(format!("seed {seed}: tac {full:.5} > baseline {base:.5}"));
        }
    }
    if mt > 1.05 * mf {
        failures.push(format!("mean tac {mt:.5} > 1.05 × mean first-step {mf:.5}"));
    }
    if mf > 1.05 * mb {
        failures.push(format!("mean first-step {mf:.5} > 1.05 × mean baseline {mb:.5}"));
    }
    if secs >= 600.0 {
        failures.push(format!("took {secs:.0} s"));
    }
    if let Some(frozen) = C7_FROZEN {
        for ((seed, b, f, t), r) in frozen.iter().zip(&rows) {
            for (name, want, got) in [("baseline", b, r.1), ("ner-ibc", f, r.3), ("tac", t, r.4)] {
                if (want - got).abs() > C7_BAND * want.abs().max(1.0) {
                    failures.push(format!("seed {seed} {name}: {got} outside frozen band around {want}"));
                }
            }
        }
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}{detail}", failures.join("; ")))
    }
}

/// `ε(x, t) = c x` on a scalar state.
struct Linear(f64);

impl NoiseEstimator for Linear {
    fn io_shape(&self) -> [usize; 3] {
        [1, 1, 1]
    }

    fn num_sites(&self) -> usize {
        0
    }

    fn estimate_observed(&self, x: &Tensor, _t: &[f64], _hook: &mut dyn ActivationHook) -> tacq::Result<Tensor> {
        Ok(x.scale(self.0))
    }
}

fn c8_order() -> Outcome {
    let start = Instant::now();
    let schedule = NoiseSchedule::ddpm_default();
    let model = Linear(0.5);
    let x_t = Tensor::randn(&mut Rng::new(0xC8), &[64, 1, 1, 1]);
    let t_max = (schedule.len() - 1) as f64;

    // First-order reference on a fine uniform time grid with the same endpoints.
    let fine = 10_000;
    let mut reference = x_t.clone();
    for k in 0..fine {
        let t0 = t_max * (fine - k) as f64 / fine as f64;
        let t1 = t_max * (fine - k - 1) as f64 / fine as f64;
        let (m0, m1) = (ok(schedule.marginal(t0))?, ok(schedule.marginal(t1))?);
        let eps = ok(model.estimate(&reference, &vec![t0; reference.rows()]))?;
        let x0 = data_prediction(&reference, &eps, &m0);
        reference = first_order_update(&reference, &x0, &m0, &m1);
    }

    let mut points = Vec::new();
    for m in [5usize, 10, 20, 40] {
        let grid = ok(TimestepGrid::dpm(&schedule, m))?;
        ensure!(grid.times()[0] == t_max && grid.times()[m] == 0.0, "grid endpoints differ from the reference");
        let mut x = x_t.clone();
        for i in 0..m {
            x = ok(dpmpp_2s_step(&model, &schedule, &x, i, &grid, None))?;
        }
        let d = ok(x.sub(&reference))?;
        let rms = (d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        points.push(((m as f64).ln(), rms.ln(), rms));
    }
    let n = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    let errs: Vec<String> = points.iter().map(|p| format!("{:.2e}", p.2)).collect();
    ensure!(slope <= -1.8, "slope {slope:.3} (errors {errs:?})");
    ensure!(secs < 5.0, "took {secs:.1} s");
    Ok(format!("slope {slope:.3}, errors at M = 5/10/20/40: {}; {secs:.2} s", errs.join(" ")))
}

fn c9_transparency() -> Outcome {
    let mut rng = Rng::new(0xC9);
    let schedule = NoiseSchedule::ddpm_default();
    let model = ok(NoiseModel::new(ModelSpec::mlp([2, 1, 1]), &mut rng, false))?;
    let mut q = ok(QuantizedModel::new(model.clone(), 3, 8, Scheme::MinmaxSymmetric))?;
    let calib = ok(SamplerConfig::ddim(&schedule, 20, 0.0))?;
    ok(q.calibrate_activations(&schedule, &calib, 32, &Rng::new(1)))?;
    let mut checked = 0;
    for sampler in [
        ok(SamplerConfig::ddim(&schedule, 25, 0.0))?,
        ok(SamplerConfig::ddim(&schedule, 25, 1.0))?,
        ok(SamplerConfig::dpmpp_2s(&schedule, 15))?,
    ] {
        let table = CorrectionTable::identity(&sampler.grid, [2, 1, 1], CorrectionConfig::default());
        for net in [&model as &dyn NoiseEstimator, &q] {
            let rng = Rng::new(77);
            let plain = ok(sample(net, &schedule, &sampler, None, 300, &rng, Record::Nothing))?.samples;
            let ident = ok(sample(net, &schedule, &sampler, Some(&table), 300, &rng, Record::Nothing))?.samples;
            let same = plain.data().iter().zip(ident.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "{} with η = {}: identity table changed the output", sampler.kind, sampler.eta);
            checked += 1;
        }
    }
    Ok(format!("{checked} sampler/model pairs bit-identical"))
}

fn roundtrip(c: &Container, dir: &std::path::Path, name: &str) -> Result<Container, String> {
    let path = dir.join(name);
    ok(c.write(&path))?;
    let back = ok(Container::read(&path))?;
    ensure!(back.to_bytes() == c.to_bytes(), "{name}: bytes changed on reread");
    Ok(back)
}

fn c10_persistence() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let mut rng = Rng::new(0xCA);
    let schedule = NoiseSchedule::ddpm_default();
    let model = ok(NoiseModel::new(ModelSpec::mlp([2, 1, 1]), &mut rng, false))?;
    let back = ok(model_from_container(&roundtrip(&model_to_container(&model, &schedule), dir.path(), "m")?))?;
    ensure!(back.params() == model.params() && back.spec() == model.spec(), "model differs after round trip");

    let mut q = ok(QuantizedModel::new(model.clone(), 3, 8, Scheme::MinmaxSymmetric))?;
    let sampler = ok(SamplerConfig::ddim(&schedule, 20, 0.0))?;
    ok(q.calibrate_activations(&schedule, &sampler, 32, &Rng::new(3)))?;
    let qc = qmodel_to_container(&q, &schedule);
    let qb = ok(qmodel_from_container(&roundtrip(&qc, dir.path(), "q")?))?;
    ensure!(
        qb.act_ranges() == q.act_ranges() && qb.quantized_params() == q.quantized_params(),
        "quantized model differs after round trip"
    );
    let x = Tensor::randn(&mut rng, &[5, 2, 1, 1]);
    let t = [999.0, 500.0, 250.0, 10.0, 0.0];
    let (ya, yb) = (ok(q.estimate(&x, &t))?, ok(qb.estimate(&x, &t))?);
    ensure!(ya == yb, "quantized outputs differ after round trip");

    let ccfg = CorrectionConfig {
        calib_batch: 16,
        ..Default::default()
    };
    let table = ok(tacq::correction::precalculate(&model, &q, &schedule, &sampler, &ccfg, &Rng::new(4)))?;
    let tb = ok(table_from_container(&roundtrip(&table_to_container(&table, &schedule), dir.path(), "t")?))?;
    ensure!(tb == table, "table differs after round trip");

    let samples = Tensor::randn(&mut rng, &[50, 2, 1, 1]);
    let sc = samples_to_container(&samples, 42, "tac", &schedule);
    let (sb, seed, label) = ok(samples_from_container(&roundtrip(&sc, dir.path(), "s")?))?;
    ensure!(sb == samples && seed == 42 && label == "tac", "samples differ after round trip");

    let bytes = qc.to_bytes();
    let mut rejected = 0;
    for (what, pos, val) in [("magic", 0usize, b'X'), ("version", 4, 99u8), ("kind", 5, 77u8)] {
        let mut bad = bytes.clone();
        bad[pos] = val;
        ensure!(Container::from_bytes(&bad).is_err(), "corrupted {what} accepted");
        rejected += 1;
    }
    ensure!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err(), "truncated file accepted");
    let mut long = bytes.clone();
    long.push(0);
    ensure!(Container::from_bytes(&long).is_err(), "trailing bytes accepted");
    ensure!(model_from_container(&qc).is_err(), "qmodel container loaded as a model");
    Ok(format!("4 kinds round-trip bit-exactly; {} corruptions rejected", rejected + 3))
}

fn c11_quantizer() -> Outcome {
    let p = ok(QuantParams::new(2.0 / 255.0, 0, -128, 127, 8))?;
    ensure!(p.quantize_value(0.0) == 0.0, "0 does not map to 0");
    ensure!(p.quantize_value(0.5) == 64.0 * (2.0 / 255.0), "0.5 -> {}", p.quantize_value(0.5));
    ensure!((p.quantize_value(0.5) - 0.50196).abs() < 1e-5, "0.5 -> {}", p.quantize_value(0.5));
    ensure!(p.quantize_value(10.0) == 127.0 * (2.0 / 255.0), "10 -> {}", p.quantize_value(10.0));

    let mut rng = Rng::new(0xCB);
    let mut cases = 0;
    for _ in 0..400 {
        let bits = 2 + rng.below(15) as u32;
        let lo = -5.0 * rng.uniform();
        let hi = lo + 1e-3 + 10.0 * rng.uniform();
        let qp = if rng.uniform() < 0.5 {
            ok(QuantParams::symmetric(bits, hi.abs().max(lo.abs())))?
        } else {
            ok(QuantParams::asymmetric(bits, lo, hi))?
        };
        let (blo, bhi) = qp.bounds();
        let mut xs: Vec<f64> = (0..64).map(|_| lo - 2.0 + (hi - lo + 4.0) * rng.uniform()).collect();
        xs.sort_by(f64::total_cmp);
        let mut prev = f64::NEG_INFINITY;
        for &x in &xs {
            let y = qp.quantize_value(x);
            ensure!(qp.quantize_value(y) == y, "not idempotent at {x} ({qp:?})");
            ensure!(y >= prev, "not monotone at {x} ({qp:?})");
            if x >= blo && x <= bhi {
                ensure!((y - x).abs() <= qp.scale / 2.0 * (1.0 + 1e-12), "{x} -> {y} is more than half a step away");
            }
            prev = y;
            cases += 1;
        }
    }
    Ok(format!("worked examples exact; {cases} random values idempotent, monotone, within s/2"))
}

fn c12_sweep() -> Outcome {
    let text = "dataset = gauss2d\ndata.size = 2048\ntrain.steps = 300\nquant.n_calib = 64\n\
                correction.calib_batch = 32\nsampler.steps = 20\nsampler.n_samples = 400\n";
    let run = |cfg: &RunConfig| -> Result<Vec<(f64, f64)>, String> {
        let t = ok(pipeline::train_stage(cfg))?;
        let q = ok(pipeline::quantize_stage(cfg, &t.model, &t.schedule))?;
        ok(pipeline::sweep_lambda(cfg, &t.model, &q, &t.schedule))
    };
    let cfg = ok(RunConfig::parse(text))?;
    let rows = run(&cfg)?;
    let want: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    ensure!(rows.iter().map(|r| r.0).collect::<Vec<_>>() == want, "sweep values {rows:?}");
    let csv = pipeline::sweep_csv(&rows);
    ensure!(pipeline::sweep_csv(&run(&cfg)?) == csv, "rerun CSV differs");
    for (i, line) in csv.lines().skip(1).enumerate() {
        let mut single = cfg.clone();
        ok(single.set("sweep.lambda1", &format!("{}", want[i])))?;
        let again = pipeline::sweep_csv(&run(&single)?);
        ensure!(again.lines().nth(1) == Some(line), "λ1 = {}: {again:?} vs {line:?}", want[i]);
    }
    Ok(format!("10 rows, byte-identical on rerun and per λ1; energy range {:.4}..{:.4}",
        rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max)))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("closed-form optimality", c1_closed_form),
        ("convexity", c2_convexity),
        ("trivial-correction identities", c3_identities),
        ("input bias exactness", c4_ibc_exactness),
        ("decomposition identity and bound", c5_decomposition),
        ("gradient correctness", c6_gradients),
        ("end-to-end ablation", c7_ablation),
        ("DPM-Solver++(2S) order", c8_order),
        ("identity-correction transparency", c9_transparency),
        ("persistence", c10_persistence),
        ("quantizer algebra", c11_quantizer),
        ("lambda1 sweep", c12_sweep),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS  {:>2} {name} ({secs:.1} s): {d}", i + 1),
            Err(d) => {
                println!("FAIL  {:>2} {name} ({secs:.1} s): {d}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

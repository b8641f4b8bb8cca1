//! Convergence order of DPM-Solver++(2S) on the linear estimator `ε = c x`,
//! measured against a fine first-order solution.
//!
//! ```text
//! cargo run --release --example order_check -- [c]
//! ```

use tacq::diffusion::{NoiseSchedule, TimestepGrid};
use tacq::models::{ActivationHook, NoiseEstimator};
use tacq::samplers::{data_prediction, dpmpp_2s_step, first_order_update};
use tacq::tensors::{Rng, Tensor};

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

fn main() -> tacq::Result<()> {
    let c = std::env::args().nth(1).map_or(0.5, |s| s.parse().expect("c must be a number"));
    let model = Linear(c);
    let schedule = NoiseSchedule::ddpm_default();
    let t_max = (schedule.len() - 1) as f64;
    let x_t = Tensor::randn(&mut Rng::new(0), &[32, 1, 1, 1]);

    let fine = 10_000;
    let mut reference = x_t.clone();
    for k in 0..fine {
        let (t0, t1) = (t_max * (fine - k) as f64 / fine as f64, t_max * (fine - k - 1) as f64 / fine as f64);
        let (m0, m1) = (schedule.marginal(t0)?, schedule.marginal(t1)?);
        let eps = model.estimate(&reference, &vec![t0; reference.rows()])?;
        reference = first_order_update(&reference, &data_prediction(&reference, &eps, &m0), &m0, &m1);
    }

    let mut prev: Option<f64> = None;
    for m in [5, 10, 20, 40, 80] {
        let grid = TimestepGrid::dpm(&schedule, m)?;
        let mut x = x_t.clone();
        for i in 0..m {
            x = dpmpp_2s_step(&model, &schedule, &x, i, &grid, None)?;
        }
        let err = x.sub(&reference)?.max_abs();
        let ratio = prev.map_or(String::new(), |p| format!("  ratio {:.2}", p / err));
        println!("M={m:<3} max error {err:.3e}{ratio}");
        prev = Some(err);
    }
    Ok(())
}

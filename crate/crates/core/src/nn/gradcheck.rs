use rand::seq::index::sample;
use rand::Rng;

use super::{Mode, Network, ParameterSet, Result, Tensor};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter coordinate with the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or pooling kink.
    pub skipped_kinks: usize,
}

/// Loss used by [`grad_check`]: returns the loss and its gradient with
/// respect to the network output.
pub trait LossFn: Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {}
impl<F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>)> LossFn for F {}

/// Check every trainable tensor of `params` on up to `coords_per_tensor`
/// sampled coordinates. The whole computation runs in `f64`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<G: Rng + ?Sized>(
    net: &Network,
    params: &ParameterSet<f32>,
    input: &Tensor<f32>,
    mode: Mode,
    loss: impl LossFn,
    coords_per_tensor: usize,
    step: f64,
    rng: &mut G,
) -> Result<GradCheckReport> {
    let base = params.cast::<f64>();
    let x = input.cast::<f64>();
    let (y, tape) = net.forward(&base, &x, mode)?;
    let (_, dy) = loss(&y);
    let grads = net.backward(&base, &tape, &dy, false)?;
    let signature = tape.kink_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let names: Vec<String> = base.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = base.tensor(&name)?.len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, coords_per_tensor).into_vec()
        };
        let analytic = grads.get(&name).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; n]);
        for idx in coords {
            let eval = |delta: f64| -> Result<(f64, u64)> {
                let mut p = base.clone();
                p.get_mut(&name).expect("present").tensor.data[idx] += delta;
                let (y, tape) = net.forward(&p, &x, mode)?;
                Ok((loss(&y).0, tape.kink_signature()))
            };
            let (lp, sp) = eval(step)?;
            let (lm, sm) = eval(-step)?;
            if sp != signature || sm != signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Squared-error loss `0.5 * sum((y - target)^2)` for tests and checks.
pub fn half_squared_error(target: Tensor<f64>) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {
    move |y: &Tensor<f64>| {
        let mut g = y.clone();
        let mut l = 0.0;
        for (gv, &t) in g.data.iter_mut().zip(&target.data) {
            let d = *gv - t;
            l += 0.5 * d * d;
            *gv = d;
        }
        (l, g)
    }
}

//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::graph::{Graph, Var};
use crate::network::{Mode, Network};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Deviations below this magnitude are compared absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-6;

/// One-sided slopes that disagree by more than this (relative) mean the probe
/// straddled a kink such as ReLU at zero; central differences are meaningless there.
const KINK_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct InputDeviation {
    pub index: usize,
    pub numel: usize,
    pub max_relative: f64,
    pub max_absolute: f64,
    /// Elements excluded because the probe crossed a non-differentiable point.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputDeviation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|d| d.max_relative <= self.tolerance)
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|d| d.kinks).sum()
    }

    pub fn max_relative(&self) -> f64 {
        self.inputs
            .iter()
            .map(|d| d.max_relative)
            .fold(0.0, f64::max)
    }
}

pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares gradients of the scalar built by `f` against central differences
/// with respect to every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let center = g.value(out).item();
    let grads = g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut kinks = 0;
        for k in 0..inputs[i].numel() {
            let a = analytic.data()[k];
            let mut best: Option<(f64, f64)> = None;
            let mut kinked = false;
            // a probe that clips a kink only on one side is not always caught by
            // the slope comparison; a genuine mismatch persists at the finer step
            for h in [step, step / 10.0] {
                let orig = inputs[i].data()[k];
                work[i].data_mut()[k] = orig + h;
                let up = eval(&work)?;
                work[i].data_mut()[k] = orig - h;
                let down = eval(&work)?;
                work[i].data_mut()[k] = orig;
                let forward = (up - center) / h;
                let backward = (center - down) / h;
                if relative_deviation(forward, backward) > KINK_THRESHOLD {
                    kinked = true;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let dev = (relative_deviation(a, numeric), (a - numeric).abs());
                if best.is_none_or(|b| dev.0 < b.0) {
                    best = Some(dev);
                }
                if dev.0 <= tolerance {
                    break;
                }
            }
            match best {
                Some((rel, abs)) => {
                    max_rel = max_rel.max(rel);
                    max_abs = max_abs.max(abs);
                }
                None if kinked => kinks += 1,
                None => {}
            }
        }
        report.push(InputDeviation {
            index: i,
            numel: inputs[i].numel(),
            max_relative: max_rel,
            max_absolute: max_abs,
            kinks,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        inputs: report,
    })
}

/// Checks every parameter gradient of `net` on `input`.
///
/// The scalar probed is `Σ out ⊙ C` with a fixed pseudo-random `C`, so every
/// output unit contributes. The network is cloned; running statistics of the
/// caller's copy are untouched.
pub fn finite_diff_check(
    net: &Network,
    input: &Tensor,
    mode: Mode,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let out_cols = net.output_dim();
    let weights: Vec<f64> = (0..input.rows() * out_cols)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let weights = Tensor::matrix(input.rows(), out_cols, weights)?;

    let template = net.clone();
    let f = move |g: &mut Graph, vars: &[Var]| -> Result<Var, AutodiffError> {
        let mut local = template.clone();
        for (p, v) in local.params_mut().iter_mut().zip(vars) {
            *p = g.value(*v).clone();
        }
        let bound = crate::network::Bound::from_vars(vars.to_vec());
        let x = g.constant(input.clone());
        let out = local.forward(g, &bound, x, mode)?;
        let c = g.constant(weights.clone());
        let weighted = g.mul(out, c)?;
        Ok(g.sum(weighted))
    };
    check_gradients(net.params(), f, DEFAULT_STEP, tolerance)
}

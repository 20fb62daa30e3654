//! Central finite-difference gradient checker.
//!
//! The checker only ever calls the forward pass; analytic gradients come
//! from one [`Graph::backward`] call and are compared entry-by-entry with
//! `(L(θ+h) − L(θ−h)) / 2h` on a random subset of coordinates.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance on smooth coordinates.
    pub tolerance: f64,
    /// Relative tolerance against a one-sided difference when the central
    /// difference straddles a kink (ReLU, LeakyReLU, ELU, max-pool).
    pub kink_tolerance: f64,
    /// Whether the function contains piecewise-linear pieces at all.
    pub piecewise: bool,
    /// Coordinates sampled per parameter tensor (all when the tensor is smaller).
    pub per_tensor: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            kink_tolerance: 1e-2,
            piecewise: false,
            per_tensor: 12,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn piecewise() -> Self {
        Self {
            piecewise: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates accepted against a one-sided difference.
    pub near_kink: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks d`loss`/dθ for every tensor in `params`.
///
/// `loss` builds a fresh graph from the given parameters and returns the
/// scalar loss node.
pub fn check<F, R>(
    params: &ParamSet<f64>,
    mut loss: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut analytic = params.detached();
    let mut g = Graph::new();
    let out = loss(&mut g, &analytic)?;
    g.backward(out, &mut analytic)?;

    let mut eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        g.value(out).item()
    };
    let base = eval(params)?;

    let mut report = GradCheckReport::default();
    let mut probe = params.detached();
    for t in 0..params.len() {
        let len = params.tensor_at(t).len();
        let picks: Vec<usize> = if len <= cfg.per_tensor {
            (0..len).collect()
        } else {
            sample(rng, len, cfg.per_tensor).into_vec()
        };
        let grad = analytic.tensor_at(t).grad().map(<[f64]>::to_vec);
        for i in picks {
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let x0 = params.tensor_at(t).data()[i];
            probe.tensor_at_mut(t).data_mut()[i] = x0 + cfg.step;
            let up = eval(&probe)?;
            probe.tensor_at_mut(t).data_mut()[i] = x0 - cfg.step;
            let down = eval(&probe)?;
            probe.tensor_at_mut(t).data_mut()[i] = x0;

            let central = (up - down) / (2.0 * cfg.step);
            let rel = relative_error(a, central, cfg.floor);
            report.checked += 1;
            if rel < cfg.tolerance {
                report.max_rel_err = report.max_rel_err.max(rel);
                continue;
            }
            if cfg.piecewise {
                let fwd = (up - base) / cfg.step;
                let bwd = (base - down) / cfg.step;
                let one_sided = relative_error(a, fwd, cfg.floor).min(relative_error(a, bwd, cfg.floor));
                if one_sided < cfg.kink_tolerance {
                    report.near_kink += 1;
                    continue;
                }
            }
            report.max_rel_err = report.max_rel_err.max(rel);
            report.failures.push(format!(
                "{}[{i}]: analytic {a:.6e} vs numeric {central:.6e} (rel {rel:.2e})",
                params.name_at(t)
            ));
        }
    }
    Ok(report)
}

/// Like [`check`], but turns a failed report into an error.
pub fn assert_gradients<F, R>(
    params: &ParamSet<f64>,
    loss: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let report = check(params, loss, cfg, rng)?;
    if !report.passed() {
        return Err(Error::contract(format!(
            "gradient check failed on {} of {} coordinates: {}",
            report.failures.len(),
            report.checked,
            report.failures.join("; ")
        )));
    }
    Ok(report)
}

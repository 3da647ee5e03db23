use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to roundoff do not produce spurious failures.
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (evenly strided).
    pub max_probes: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_probes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst coordinate.
    pub worst_parameter: String,
    pub passed: bool,
    pub probes: usize,
    /// Probes excluded because the objective has a kink within `eps` of the
    /// point (ReLU and friends); see `grad_check`.
    pub nonsmooth: usize,
}

/// Compares autodiff gradients of the scalar `f` with central finite
/// differences for every parameter in `params`.
///
/// A probe that misses the tolerance is re-examined with its one-sided
/// slopes. When a piecewise-linear kink lies inside `[x - eps, x + eps]` the
/// two slopes differ by at least twice the central-difference error, while a
/// wrong analytic gradient leaves them in agreement. Such probes are counted
/// in `nonsmooth` and left out of `max_rel_err`.
pub fn grad_check<F>(params: &ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Bound<'g, '_>) -> Result<Var<'g>>,
{
    if !(1e-6..=1e-4).contains(&cfg.eps) {
        return Err(Error::numerics("grad_check", format!("eps {} outside [1e-6, 1e-4]", cfg.eps)));
    }
    let analytic = {
        let g = Graph::new();
        let bound = Bound::trainable(&g, params);
        let loss = f(&bound)?;
        check_loss(loss)?;
        let grads = g.backward(loss)?;
        bound.gradients(&grads)
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let bound = Bound::frozen(&g, p);
        let loss = f(&bound)?;
        check_loss(loss)
    };

    let base = eval(params)?;
    let mut probe = params.clone();
    let mut nonsmooth = 0;
    let mut worst = (0.0f64, String::new());
    let mut probes = 0;
    for (name, t) in params.iter() {
        let n = t.len();
        let stride = match cfg.max_probes {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        let grad = analytic.get(name).expect("gradient for every parameter");
        for i in (0..n).step_by(stride) {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + cfg.eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - cfg.eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            probes += 1;
            if rel > cfg.tolerance {
                let right = (up - base) / cfg.eps;
                let left = (base - down) / cfg.eps;
                if (right - left).abs() >= (a - numeric).abs() {
                    nonsmooth += 1;
                    continue;
                }
            }
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{name}[{i}]"));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_parameter: worst.1,
        passed: worst.0 <= cfg.tolerance,
        probes,
        nonsmooth,
    })
}

fn check_loss(loss: Var<'_>) -> Result<f64> {
    let v = loss.value();
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("loss shape {:?}", v.shape())));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::numerics("grad_check", format!("objective evaluated to {x}")));
    }
    Ok(x)
}

use super::graph::{Graph, Var};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `mu + exp(logvar / 2) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
/// Differentiable in `mu` and `logvar`.
pub fn reparam_sample<'g>(mu: Var<'g>, logvar: Var<'g>, rng: &mut RngStream) -> Result<Var<'g>> {
    let shape = mu.shape();
    if shape != logvar.shape() {
        return Err(Error::shape(
            "reparam_sample",
            format!("mu {:?} vs logvar {:?}", shape, logvar.shape()),
        ));
    }
    let n: usize = shape.iter().product();
    let eps = mu.graph().constant(Tensor::new(&shape, rng.normals(n))?);
    mu.add(logvar.scale(0.5)?.exp()?.mul(eps)?)
}

/// `½ Σ (μ² + exp(logvar) − logvar − 1)` over all elements.
pub fn gaussian_kl<'g>(mu: Var<'g>, logvar: Var<'g>) -> Result<Var<'g>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "gaussian_kl",
            format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    mu.square()?
        .add(logvar.exp()?)?
        .sub(logvar)?
        .add_scalar(-1.0)?
        .sum()?
        .scale(0.5)
}

/// Value-level [`reparam_sample`] for plain vectors.
pub fn reparam_sample_vec(mu: &[f64], logvar: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.is_empty() {
        return Err(Error::shape("reparam_sample", format!("{} vs {}", mu.len(), logvar.len())));
    }
    let g = Graph::new();
    let m = g.constant(Tensor::from_vec(mu.to_vec()));
    let l = g.constant(Tensor::from_vec(logvar.to_vec()));
    Ok(reparam_sample(m, l, rng)?.value().data().to_vec())
}

/// Value-level [`gaussian_kl`] for plain vectors.
pub fn gaussian_kl_vec(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() || mu.is_empty() {
        return Err(Error::shape("gaussian_kl", format!("{} vs {}", mu.len(), logvar.len())));
    }
    let g = Graph::new();
    let m = g.constant(Tensor::from_vec(mu.to_vec()));
    let l = g.constant(Tensor::from_vec(logvar.to_vec()));
    Ok(gaussian_kl(m, l)?.item())
}

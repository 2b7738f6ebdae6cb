//! Gamma and Beta sampling and the differentiable Beta log-density.
//!
//! Masks are sampled element-wise and independently from `Beta(α, β)`; all
//! spatial correlation comes later, from upsampling and blurring. The
//! gradient estimator is score-function only, so samples are constants to
//! the graph and nothing flows back through the sampler.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::special::ln_gamma;
use crate::tensor::{Graph, Tensor, Var};

/// Samples are clamped to `[EPS, 1 − EPS]` so their log-density stays finite.
pub const EPS: f64 = 1e-6;

/// One draw from `Gamma(k, 1)` (Marsaglia–Tsang; boosted for `k < 1`).
pub fn gamma_sample(k: f64, rng: &mut Rng) -> Result<f64> {
    check_shape_param(k)?;
    Ok(ln_gamma_sample(k, rng).exp())
}

/// Log of a `Gamma(k, 1)` draw. Working in log space keeps tiny shapes,
/// where `U^{1/k}` underflows, usable for Beta ratios.
pub fn ln_gamma_sample(k: f64, rng: &mut Rng) -> f64 {
    if k < 1.0 {
        // Gamma(k) = Gamma(k + 1) · U^{1/k}
        let boost = rng.uniform_open().ln() / k;
        return marsaglia_tsang_ln(k + 1.0, rng) + boost;
    }
    marsaglia_tsang_ln(k, rng)
}

fn marsaglia_tsang_ln(k: f64, rng: &mut Rng) -> f64 {
    let d = k - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

fn check_shape_param(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("gamma shape must be positive and finite, got {k}")))
    }
}

/// One draw from `Beta(a, b)` as `X / (X + Y)`, `X ~ Gamma(a)`, `Y ~ Gamma(b)`, clamped.
pub fn beta_scalar(a: f64, b: f64, rng: &mut Rng) -> f64 {
    let lx = ln_gamma_sample(a, rng);
    let ly = ln_gamma_sample(b, rng);
    let v = if lx >= ly {
        1.0 / (1.0 + (ly - lx).exp())
    } else {
        let e = (lx - ly).exp();
        e / (1.0 + e)
    };
    v.clamp(EPS, 1.0 - EPS)
}

/// Element-wise Beta shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaParams {
    alpha: Tensor,
    beta: Tensor,
}

impl BetaParams {
    pub fn new(alpha: Tensor, beta: Tensor) -> Result<Self> {
        if alpha.shape() != beta.shape() {
            return Err(Error::Shape(format!(
                "alpha {:?} and beta {:?} differ in shape",
                alpha.shape(),
                beta.shape()
            )));
        }
        for &v in alpha.data().iter().chain(beta.data()) {
            check_shape_param(v)?;
        }
        Ok(BetaParams { alpha, beta })
    }

    pub fn uniform(shape: &[usize]) -> Self {
        BetaParams {
            alpha: Tensor::ones(shape),
            beta: Tensor::ones(shape),
        }
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }
}

/// Independent per-element draws in `[EPS, 1 − EPS]`.
pub fn beta_sample(params: &BetaParams, rng: &mut Rng) -> Tensor {
    let data = params
        .alpha
        .data()
        .iter()
        .zip(params.beta.data())
        .map(|(&a, &b)| beta_scalar(a, b, rng))
        .collect();
    Tensor::new(params.alpha.shape().to_vec(), data).expect("shape copied from params")
}

fn check_unit_interval(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(v) => Err(Error::Domain(format!("Beta support is (0,1), got {v}"))),
        None => Ok(()),
    }
}

/// Differentiable element-wise `log f(x; α, β)`.
///
/// `x` enters as a constant: the sample is an action, not a function of the
/// parameters. Gradients reach `alpha` and `beta` through `lgamma`.
pub fn beta_log_prob(g: &Graph, x: &Tensor, alpha: Var, beta: Var) -> Result<Var> {
    check_unit_interval(x)?;
    if g.shape(alpha) != x.shape() || g.shape(beta) != x.shape() {
        return Err(Error::Shape(format!(
            "beta_log_prob: sample {:?} vs alpha {:?} / beta {:?}",
            x.shape(),
            g.shape(alpha),
            g.shape(beta)
        )));
    }
    let log_x = g.constant(x.map(f64::ln));
    let log_1mx = g.constant(x.map(|v| (-v).ln_1p()));
    let total = g.add(alpha, beta)?;
    let norm = g.sub(g.lgamma(total)?, g.lgamma(alpha)?)?;
    let norm = g.sub(norm, g.lgamma(beta)?)?;
    let a_term = g.mul(g.add_scalar(alpha, -1.0), log_x)?;
    let b_term = g.mul(g.add_scalar(beta, -1.0), log_1mx)?;
    g.add(g.add(norm, a_term)?, b_term)
}

/// Value-only `log f(x; α, β)`.
pub fn beta_log_prob_values(x: &Tensor, params: &BetaParams) -> Result<Tensor> {
    check_unit_interval(x)?;
    if x.shape() != params.alpha.shape() {
        return Err(Error::Shape(format!(
            "sample {:?} vs params {:?}",
            x.shape(),
            params.alpha.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(params.alpha.data().iter().zip(params.beta.data()))
        .map(|(&v, (&a, &b))| beta_ln_pdf(v, a, b))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Scalar Beta log-density.
pub fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
}

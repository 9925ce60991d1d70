//! Mean-field variational family over the latent vector.
//!
//! Each coordinate gets an independent factor chosen by its domain: a
//! Gaussian on the real line, a Gamma on the positive half-line. Factors
//! are parameterized by constrained mean and standard deviation; the
//! optimizer works on a flat unconstrained vector where every positive
//! quantity (Gaussian sd, Gamma mean and sd) passes through softplus.
//! Scores, i.e. gradients of log q with respect to that unconstrained
//! vector, are closed-form.
//!
//! Importance-sampled gradient variants draw from an overdispersed
//! version of each factor: the Gaussian keeps its mean with sd scaled by
//! sqrt(tau), the Gamma flattens its natural parameters by tau so that
//! tau = 1 reproduces the factor exactly, down to the bit pattern of the
//! draws.

use rand::Rng;
use rand_distr::Distribution;

use crate::model::{Domain, LatentLayout};
use crate::special::{digamma, ln_gamma, normal_logpdf, softplus, softplus_grad, softplus_inv};
use crate::{Error, Result};

/// Distribution family of one variational factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Gaussian,
    Gamma,
}

/// One factor per coordinate, matched to the coordinate's domain.
pub fn kinds_for_layout(layout: &LatentLayout) -> Vec<FactorKind> {
    (0..layout.dim())
        .map(|j| match layout.domain(j) {
            Domain::Real => FactorKind::Gaussian,
            Domain::Positive => FactorKind::Gamma,
        })
        .collect()
}

/// Prior on one latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum PriorSpec {
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd > 0.0 && sd.is_finite()) {
                    return Err(Error::domain(format!("bad normal prior ({mean}, {sd})")));
                }
            }
            PriorSpec::Gamma { shape, rate } => {
                if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
                    return Err(Error::domain(format!("bad gamma prior ({shape}, {rate})")));
                }
            }
        }
        Ok(())
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { mean, sd } => normal_logpdf(x, mean, sd),
            PriorSpec::Gamma { shape, rate } => gamma_logpdf(x, shape, rate),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            PriorSpec::Normal { mean, .. } => mean,
            PriorSpec::Gamma { shape, rate } => shape / rate,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            PriorSpec::Normal { sd, .. } => sd,
            PriorSpec::Gamma { shape, rate } => shape.sqrt() / rate,
        }
    }

    pub fn matches(&self, kind: FactorKind) -> bool {
        matches!(
            (self, kind),
            (PriorSpec::Normal { .. }, FactorKind::Gaussian)
                | (PriorSpec::Gamma { .. }, FactorKind::Gamma)
        )
    }
}

/// How the starting variational parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    PriorMatch,
    PriorSample,
}

/// Starting parameters under the given mode.
pub fn init_params<R: Rng + ?Sized>(
    mode: InitMode,
    kinds: Vec<FactorKind>,
    priors: &[PriorSpec],
    rng: &mut R,
) -> Result<VariationalParams> {
    match mode {
        InitMode::PriorMatch => VariationalParams::prior_match(kinds, priors),
        InitMode::PriorSample => VariationalParams::prior_sample(kinds, priors, rng),
    }
}

/// Joint log-prior under independent coordinate priors.
pub fn log_prior(priors: &[PriorSpec], phi: &[f64]) -> f64 {
    priors
        .iter()
        .zip(phi)
        .map(|(p, &x)| p.log_density(x))
        .sum()
}

fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Mean-field parameters: one (mean, sd) pair per coordinate, stored as a
/// flat unconstrained vector of length 2 * dim. Entry 2j is the location
/// parameter of coordinate j, entry 2j + 1 its scale; positive quantities
/// live under softplus.
#[derive(Debug, Clone)]
pub struct VariationalParams {
    kinds: Vec<FactorKind>,
    lambda: Vec<f64>,
}

impl VariationalParams {
    /// Builds the parameter vector from constrained means and sds.
    pub fn from_moments(kinds: Vec<FactorKind>, means: &[f64], sds: &[f64]) -> Result<Self> {
        if means.len() != kinds.len() || sds.len() != kinds.len() {
            return Err(Error::domain("means/sds length must match factor count"));
        }
        let mut lambda = Vec::with_capacity(2 * kinds.len());
        for (j, &kind) in kinds.iter().enumerate() {
            let (m, s) = (means[j], sds[j]);
            if !m.is_finite() || !(s > 0.0 && s.is_finite()) {
                return Err(Error::domain(format!("bad factor moments ({m}, {s}) at coordinate {j}")));
            }
            match kind {
                FactorKind::Gaussian => lambda.push(m),
                FactorKind::Gamma => {
                    if m <= 0.0 {
                        return Err(Error::domain(format!(
                            "gamma factor at coordinate {j} needs a positive mean, got {m}"
                        )));
                    }
                    lambda.push(softplus_inv(m));
                }
            }
            lambda.push(softplus_inv(s));
        }
        Ok(Self { kinds, lambda })
    }

    /// Each factor takes its prior's mean and sd.
    pub fn prior_match(kinds: Vec<FactorKind>, priors: &[PriorSpec]) -> Result<Self> {
        check_prior_kinds(&kinds, priors)?;
        let means: Vec<f64> = priors.iter().map(|p| p.mean()).collect();
        let sds: Vec<f64> = priors.iter().map(|p| p.sd()).collect();
        Self::from_moments(kinds, &means, &sds)
    }

    /// Factor means drawn from the priors, sds kept at the prior sds.
    pub fn prior_sample<R: Rng + ?Sized>(
        kinds: Vec<FactorKind>,
        priors: &[PriorSpec],
        rng: &mut R,
    ) -> Result<Self> {
        check_prior_kinds(&kinds, priors)?;
        let mut means = Vec::with_capacity(priors.len());
        for p in priors {
            let m = match *p {
                PriorSpec::Normal { mean, sd } => {
                    rand_distr::Normal::new(mean, sd).map_err(bad_dist)?.sample(rng)
                }
                PriorSpec::Gamma { shape, rate } => {
                    rand_distr::Gamma::new(shape, 1.0 / rate).map_err(bad_dist)?.sample(rng)
                }
            };
            means.push(m);
        }
        let sds: Vec<f64> = priors.iter().map(|p| p.sd()).collect();
        Self::from_moments(kinds, &means, &sds)
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[FactorKind] {
        &self.kinds
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn lambda_mut(&mut self) -> &mut [f64] {
        &mut self.lambda
    }

    /// Constrained mean of coordinate j.
    pub fn mean(&self, j: usize) -> f64 {
        match self.kinds[j] {
            FactorKind::Gaussian => self.lambda[2 * j],
            FactorKind::Gamma => softplus(self.lambda[2 * j]),
        }
    }

    /// Constrained sd of coordinate j.
    pub fn sd(&self, j: usize) -> f64 {
        softplus(self.lambda[2 * j + 1])
    }

    /// Mean and sd of the sampling distribution for coordinate j at
    /// overdispersion tau. tau = 1 returns the factor's own moments; the
    /// Gamma case widens through its natural parameters so the result is
    /// a valid Gamma for every tau >= 1.
    pub fn overdispersed_moments(&self, j: usize, tau: f64) -> (f64, f64) {
        let (m, s) = (self.mean(j), self.sd(j));
        if tau == 1.0 {
            return (m, s);
        }
        match self.kinds[j] {
            FactorKind::Gaussian => (m, s * tau.sqrt()),
            FactorKind::Gamma => {
                let (a, b) = gamma_natural(m, s);
                let (ar, br) = ((a - 1.0) / tau + 1.0, b / tau);
                (ar / br, ar.sqrt() / br)
            }
        }
    }

    /// Draws one latent vector from the overdispersed proposal, one entry
    /// per coordinate in layout order. tau = 1 is the plain variational
    /// draw and consumes the random stream identically.
    pub fn sample_overdispersed<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(tau >= 1.0 && tau.is_finite()) {
            return Err(Error::domain(format!("overdispersion tau = {tau} must be >= 1")));
        }
        let mut phi = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let (m, s) = self.overdispersed_moments(j, tau);
            let x = match self.kinds[j] {
                FactorKind::Gaussian => {
                    rand_distr::Normal::new(m, s).map_err(bad_dist)?.sample(rng)
                }
                FactorKind::Gamma => {
                    let (a, b) = gamma_natural(m, s);
                    rand_distr::Gamma::new(a, 1.0 / b).map_err(bad_dist)?.sample(rng)
                }
            };
            phi.push(x);
        }
        Ok(phi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.sample_overdispersed(1.0, rng)
    }

    /// Log-density of coordinate j's factor at x.
    pub fn log_q(&self, j: usize, x: f64) -> f64 {
        let (m, s) = (self.mean(j), self.sd(j));
        match self.kinds[j] {
            FactorKind::Gaussian => normal_logpdf(x, m, s),
            FactorKind::Gamma => {
                let (a, b) = gamma_natural(m, s);
                gamma_logpdf(x, a, b)
            }
        }
    }

    /// Log-density of the overdispersed proposal for coordinate j at x.
    pub fn log_r(&self, j: usize, x: f64, tau: f64) -> f64 {
        let (m, s) = self.overdispersed_moments(j, tau);
        match self.kinds[j] {
            FactorKind::Gaussian => normal_logpdf(x, m, s),
            FactorKind::Gamma => {
                let (a, b) = gamma_natural(m, s);
                gamma_logpdf(x, a, b)
            }
        }
    }

    /// Gradient of log q_j(x) with respect to the two unconstrained
    /// parameters of coordinate j.
    pub fn score(&self, j: usize, x: f64) -> (f64, f64) {
        let (m, s) = (self.mean(j), self.sd(j));
        match self.kinds[j] {
            FactorKind::Gaussian => {
                let z = x - m;
                let d_mean = z / (s * s);
                let d_sd = (z * z - s * s) / (s * s * s);
                (d_mean, d_sd * softplus_grad(s))
            }
            FactorKind::Gamma => {
                let (a, b) = gamma_natural(m, s);
                let d_alpha = b.ln() - digamma(a) + x.ln();
                let d_beta = a / b - x;
                let s2 = s * s;
                let d_mean = (2.0 * m / s2) * d_alpha + d_beta / s2;
                let d_sd = (-2.0 * m * m / (s2 * s)) * d_alpha + (-2.0 * m / (s2 * s)) * d_beta;
                (d_mean * softplus_grad(m), d_sd * softplus_grad(s))
            }
        }
    }
}

/// Shape and rate of the Gamma with the given mean and sd.
fn gamma_natural(mean: f64, sd: f64) -> (f64, f64) {
    let v = sd * sd;
    (mean * mean / v, mean / v)
}

fn check_prior_kinds(kinds: &[FactorKind], priors: &[PriorSpec]) -> Result<()> {
    if priors.len() != kinds.len() {
        return Err(Error::domain(format!(
            "{} priors for {} coordinates",
            priors.len(),
            kinds.len()
        )));
    }
    for (j, (p, &k)) in priors.iter().zip(kinds).enumerate() {
        p.validate()?;
        if !p.matches(k) {
            return Err(Error::domain(format!(
                "prior family at coordinate {j} does not match its {k:?} factor"
            )));
        }
    }
    Ok(())
}

fn bad_dist<E: std::fmt::Display>(e: E) -> Error {
    Error::numerical(format!("cannot construct sampling distribution: {e}"), None)
}

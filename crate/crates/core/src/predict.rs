//! Calibrated prediction of the true process at new inputs.
//!
//! For a fixed latent vector the predictor is the usual Gaussian
//! conditional mean: assemble the joint covariance of the stacked data
//! once, factor it, and every new input costs one kernel row. The
//! posterior predictive averages that conditional mean over draws of the
//! latent vector, taken either from a fitted variational distribution or
//! from a Markov chain.

use std::io::Write as IoWrite;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::cholesky_with_retry;
use crate::model::{CachedKoh, KohModel};
use crate::variational::VariationalParams;
use crate::{Error, Result};

/// Conditional-mean predictor at one latent vector.
pub struct Predictor<'a> {
    model: &'a KohModel,
    phi: Vec<f64>,
    alpha: DVector<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(cached: &CachedKoh<'a>, phi: &[f64]) -> Result<Self> {
        let model = cached.model();
        let moments = cached.assemble(phi);
        let chol: Cholesky<f64, Dyn> =
            cholesky_with_retry(moments.cov, model.base_jitter(phi), "prediction")?;
        let data = DVector::from_row_slice(&model.dataset().values());
        let alpha = chol.solve(&(data - moments.mean));
        Ok(Self { model, phi: phi.to_vec(), alpha })
    }

    /// Expected true process at a new input: simulator plus discrepancy,
    /// conditioned on all observations and runs.
    pub fn predict(&self, xstar: &[f64]) -> Result<f64> {
        let ds = self.model.dataset();
        if xstar.len() != ds.d_x() {
            return Err(Error::domain(format!(
                "prediction input has {} coordinates, expected {}",
                xstar.len(),
                ds.d_x()
            )));
        }
        let lay = self.model.layout();
        let theta = lay.theta(&self.phi);
        let mut acc = 0.0;
        for i in 0..ds.n() {
            let t_i = ds.t(i).unwrap_or(theta);
            let mut k = self.model.kernel_f(&self.phi, xstar, theta, ds.x(i), t_i);
            if ds.is_observation(i) {
                k += self.model.kernel_delta(&self.phi, xstar, ds.x(i));
            }
            acc += k * self.alpha[i];
        }
        let prior_mean = self.model.spec().f_mean.eval(xstar, theta) + self.model.spec().delta_mean;
        Ok(prior_mean + acc)
    }
}

/// Where the latent draws for the posterior predictive come from.
pub enum PhiSource<'a> {
    /// Sample `draws` latent vectors from a fitted mean-field family.
    Variational { params: &'a VariationalParams, draws: usize, seed: u64 },
    /// Use the given latent vectors, e.g. thinned chain states.
    Chain(&'a [Vec<f64>]),
    /// A single fixed latent vector.
    Fixed(&'a [f64]),
}

const DRAW_CAP: usize = 100;

/// Posterior-predictive mean of the true process at each input, averaging
/// the conditional-mean predictor over latent draws. Variational draws
/// whose covariance cannot be factored are redrawn, up to a cap.
pub fn posterior_mean_predictions(
    model: &KohModel,
    source: PhiSource,
    xstars: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let cached = CachedKoh::new(model);
    let mut acc = vec![0.0; xstars.len()];
    let add_phi = |phi: &[f64], acc: &mut Vec<f64>| -> Result<()> {
        let p = Predictor::new(&cached, phi)?;
        for (a, x) in acc.iter_mut().zip(xstars) {
            *a += p.predict(x)?;
        }
        Ok(())
    };
    let used = match source {
        PhiSource::Fixed(phi) => {
            add_phi(phi, &mut acc)?;
            1
        }
        PhiSource::Chain(draws) => {
            if draws.is_empty() {
                return Err(Error::domain("no latent draws supplied"));
            }
            for phi in draws {
                add_phi(phi, &mut acc)?;
            }
            draws.len()
        }
        PhiSource::Variational { params, draws, seed } => {
            if draws == 0 {
                return Err(Error::domain("need at least one latent draw"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..draws {
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    let phi = params.sample(&mut rng)?;
                    match add_phi(&phi, &mut acc) {
                        Ok(()) => break,
                        Err(_) if attempt < DRAW_CAP => continue,
                        Err(e) => return Err(e),
                    }
                }
            }
            draws
        }
    };
    for a in &mut acc {
        *a /= used as f64;
    }
    Ok(acc)
}

/// Mean squared error of predictions against reference values.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::domain("prediction and truth lengths must match and be nonzero"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    Ok(mse(pred, truth)?.sqrt())
}

/// Writes inputs, reference values, predictions, and residuals as CSV.
pub fn write_predictions_csv<W: IoWrite>(
    out: &mut W,
    xstars: &[Vec<f64>],
    truth: &[f64],
    pred: &[f64],
) -> Result<()> {
    if xstars.len() != truth.len() || truth.len() != pred.len() {
        return Err(Error::domain("inputs, truth, and predictions must have equal length"));
    }
    let d_x = xstars.first().map_or(0, |x| x.len());
    let mut header = String::new();
    for d in 1..=d_x {
        header.push_str(&format!("x{d},"));
    }
    header.push_str("y_true,y_pred,residual");
    writeln!(out, "{header}")?;
    for ((x, t), p) in xstars.iter().zip(truth).zip(pred) {
        let mut line = String::new();
        for v in x {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{t},{p},{}", t - p));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

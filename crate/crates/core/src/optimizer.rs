//! Stochastic gradient ascent on the mean-field evidence bound.
//!
//! Every iteration draws one conditioned pair uniformly from the truncated
//! vine, so a gradient step costs a handful of small Cholesky solves
//! instead of one factorization of the full n x n covariance. Four
//! score-function estimators of increasing refinement share that skeleton:
//!
//! * `Plain` multiplies each score by the whole sampled objective.
//! * `Rb` keeps, per coordinate, only the parts of the pair term whose
//!   distribution actually depends on that coordinate.
//! * `RbCv` subtracts a per-component control-variate coefficient fitted
//!   on a fresh batch of draws.
//! * `RbCvIs` additionally samples from an overdispersed proposal and
//!   reweights, which keeps the estimator alive when the variational sds
//!   have shrunk far below the scale the objective varies on.
//!
//! Steps follow AdaGrad; convergence is declared when a trailing window
//! of maximal parameter movements stays below a threshold.

use std::collections::VecDeque;
use std::io::Write as IoWrite;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::KohModel;
use crate::variational::{PriorSpec, VariationalParams};
use crate::vine::{self, decode_pair, pair_count, pair_term_parts, PairIndex, VineKind};
use crate::{Error, Result};

/// Which gradient estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum EstimatorVariant {
    Plain,
    Rb,
    RbCv { cv_samples: usize },
    RbCvIs { cv_samples: usize, tau: f64 },
}

impl EstimatorVariant {
    /// Proposal overdispersion and control-variate batch size, with the
    /// plain-proposal variants expressed as tau = 1.
    fn sampling_plan(&self) -> (f64, usize) {
        match *self {
            EstimatorVariant::Plain | EstimatorVariant::Rb => (1.0, 0),
            EstimatorVariant::RbCv { cv_samples } => (1.0, cv_samples),
            EstimatorVariant::RbCvIs { cv_samples, tau } => (tau, cv_samples),
        }
    }

    fn validate(&self) -> Result<()> {
        let (tau, cv) = self.sampling_plan();
        if !(tau >= 1.0 && tau.is_finite()) {
            return Err(Error::domain(format!("tau = {tau} must be finite and >= 1")));
        }
        match self {
            EstimatorVariant::RbCv { .. } | EstimatorVariant::RbCvIs { .. } if cv < 2 => {
                Err(Error::domain("control variate needs at least 2 fitting draws"))
            }
            _ => Ok(()),
        }
    }
}

/// Counters surfaced alongside a calibration run. None of them signals
/// failure on its own; they exist so a suspicious fit can be traced to
/// clamped tails, dead control variates, or rejected draws.
#[derive(Debug, Default, Clone, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Draws thrown away because the pair term came back non-finite.
    pub resampled_draws: u64,
    /// Components whose control-variate fit had zero score variance.
    pub cv_disabled: u64,
    /// Unit-interval and correlation clamps during pair evaluations.
    pub clamp_events: u64,
}

/// One estimated ascent direction on the unconstrained parameter vector.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub pair_rank: usize,
}

struct Draw {
    /// Sum of pair-term parts whose law depends on each coordinate.
    p_tilde: Vec<f64>,
    /// Per-coordinate log q minus log prior at the drawn point.
    lr: Vec<f64>,
    /// Blanket importance weight per coordinate; exactly 1 at tau = 1.
    wj: Vec<f64>,
    /// Score of every unconstrained component at the drawn point.
    score: Vec<f64>,
    full: f64,
    lr_total: f64,
}

const RESAMPLE_CAP: usize = 100;

fn collect_draws<R: Rng + ?Sized>(
    model: &KohModel,
    priors: &[PriorSpec],
    params: &VariationalParams,
    kind: VineKind,
    level: usize,
    pair: &PairIndex,
    masks: &[Vec<bool>; 3],
    blankets: &[Vec<usize>],
    tau: f64,
    count: usize,
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<Vec<Draw>> {
    let dim = params.dim();

    // A draw is unusable when the pair term errors or any derived
    // quantity is non-finite, e.g. a tiny-shape Gamma draw underflowing
    // to zero and sending its own log-score to infinity. Such draws are
    // rejected and redrawn, up to a cap, with the count surfaced.
    let try_draw = |rng: &mut R| -> Result<Option<Draw>> {
        let phi = params.sample_overdispersed(tau, rng)?;
        let parts = match pair_term_parts(model, &phi, kind, level, pair) {
            Ok(p) if p.total().is_finite() => p,
            _ => return Ok(None),
        };
        let part_values = [parts.copula, parts.margin_first, parts.margin_second];
        let mut p_tilde = vec![0.0; dim];
        let mut lr = vec![0.0; dim];
        let mut w_coord = vec![0.0; dim];
        let mut score = vec![0.0; 2 * dim];
        for j in 0..dim {
            for (mask, value) in masks.iter().zip(part_values) {
                if mask[j] {
                    p_tilde[j] += value;
                }
            }
            let lq = params.log_q(j, phi[j]);
            lr[j] = lq - priors[j].log_density(phi[j]);
            w_coord[j] = (lq - params.log_r(j, phi[j], tau)).exp();
            let (s0, s1) = params.score(j, phi[j]);
            score[2 * j] = s0;
            score[2 * j + 1] = s1;
            if !(lr[j].is_finite() && w_coord[j].is_finite() && s0.is_finite() && s1.is_finite()) {
                return Ok(None);
            }
        }
        let wj: Vec<f64> = blankets
            .iter()
            .map(|b| b.iter().map(|&k| w_coord[k]).product())
            .collect();
        Ok(Some(Draw {
            full: parts.total(),
            lr_total: lr.iter().sum(),
            p_tilde,
            lr,
            wj,
            score,
        }))
    };

    let mut draws = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempt = 0;
        let draw = loop {
            attempt += 1;
            if let Some(d) = try_draw(rng)? {
                break d;
            }
            if attempt >= RESAMPLE_CAP {
                return Err(Error::numerical(
                    format!("no usable draw in {RESAMPLE_CAP} attempts"),
                    None,
                ));
            }
            diag.resampled_draws += 1;
        };
        draws.push(draw);
    }
    Ok(draws)
}

/// Appearance mask of each pair-term part over the latent coordinates,
/// in the order copula, first margin, second margin.
fn part_masks(model: &KohModel, pair: &PairIndex) -> [Vec<bool>; 3] {
    let dim = model.layout().dim();
    let rows: Vec<usize> = [pair.first, pair.second]
        .iter()
        .copied()
        .chain(pair.conditioning.iter().copied())
        .collect();
    let o = model.count_obs(&rows);
    let r = rows.len() - o;
    let mask_for = |obs: usize, runs: usize| -> Vec<bool> {
        (0..dim).map(|j| model.coordinate_appears(j, obs, runs)).collect()
    };
    let single = |row: usize| -> Vec<bool> {
        if model.dataset().is_observation(row) {
            mask_for(1, 0)
        } else {
            mask_for(0, 1)
        }
    };
    [mask_for(o, r), single(pair.first), single(pair.second)]
}

/// Markov blanket of each coordinate under the masks: itself plus every
/// coordinate of every part it appears in. The importance weight of a
/// coordinate's estimator is the product of per-coordinate weights over
/// this set.
fn blankets(dim: usize, masks: &[Vec<bool>; 3]) -> Vec<Vec<usize>> {
    (0..dim)
        .map(|j| {
            let mut in_blanket = vec![false; dim];
            in_blanket[j] = true;
            for mask in masks {
                if mask[j] {
                    for (k, flag) in in_blanket.iter_mut().enumerate() {
                        *flag |= mask[k];
                    }
                }
            }
            (0..dim).filter(|&k| in_blanket[k]).collect()
        })
        .collect()
}

/// Gradient estimate at a fixed conditioned pair. Draw order is the main
/// batch first, then the control-variate batch, so runs with the same
/// seed and different variants stay comparable.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient_for_pair<R: Rng + ?Sized>(
    model: &KohModel,
    priors: &[PriorSpec],
    params: &VariationalParams,
    kind: VineKind,
    level: usize,
    variant: &EstimatorVariant,
    samples: usize,
    pair_rank: usize,
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<GradientEstimate> {
    variant.validate()?;
    if samples == 0 {
        return Err(Error::domain("need at least one gradient sample"));
    }
    let n = model.dataset().n();
    let dim = params.dim();
    let np = pair_count(n, level)? as f64;
    let pair = decode_pair(kind, n, level, pair_rank)?;
    let masks = part_masks(model, &pair);
    let blankets = blankets(dim, &masks);
    let (tau, cv_samples) = variant.sampling_plan();

    let clamp_before = vine::clamp_event_count();
    let main = collect_draws(
        model, priors, params, kind, level, &pair, &masks, &blankets, tau, samples, rng, diag,
    )?;
    let cv = collect_draws(
        model, priors, params, kind, level, &pair, &masks, &blankets, tau, cv_samples, rng, diag,
    )?;
    diag.clamp_events += vine::clamp_event_count().saturating_sub(clamp_before);

    let mut grad = vec![0.0; 2 * dim];
    match variant {
        EstimatorVariant::Plain => {
            for d in &main {
                let target = np * d.full - d.lr_total;
                for (g, s) in grad.iter_mut().zip(&d.score) {
                    *g += s * target;
                }
            }
        }
        EstimatorVariant::Rb => {
            for d in &main {
                for c in 0..2 * dim {
                    let j = c / 2;
                    grad[c] += d.score[c] * (np * d.p_tilde[j] - d.lr[j]);
                }
            }
        }
        EstimatorVariant::RbCv { .. } | EstimatorVariant::RbCvIs { .. } => {
            let mut coeff = vec![0.0; 2 * dim];
            let scv = cv.len() as f64;
            for (c, a) in coeff.iter_mut().enumerate() {
                let j = c / 2;
                let (mut mx, mut mp) = (0.0, 0.0);
                for d in &cv {
                    mx += d.wj[j] * d.score[c] * (np * d.p_tilde[j] - d.lr[j]);
                    mp += d.wj[j] * d.score[c];
                }
                mx /= scv;
                mp /= scv;
                let (mut cov, mut var) = (0.0, 0.0);
                for d in &cv {
                    let psi = d.wj[j] * d.score[c];
                    let xi = psi * (np * d.p_tilde[j] - d.lr[j]);
                    cov += (xi - mx) * (psi - mp);
                    var += (psi - mp) * (psi - mp);
                }
                if var < 1e-300 {
                    diag.cv_disabled += 1;
                } else {
                    *a = cov / var;
                }
            }
            for d in &main {
                for c in 0..2 * dim {
                    let j = c / 2;
                    grad[c] += d.wj[j] * d.score[c] * (np * d.p_tilde[j] - d.lr[j] - coeff[c]);
                }
            }
        }
    }
    let scale = 1.0 / samples as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok(GradientEstimate { grad, pair_rank })
}

/// Gradient estimate at a uniformly drawn pair.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient<R: Rng + ?Sized>(
    model: &KohModel,
    priors: &[PriorSpec],
    params: &VariationalParams,
    kind: VineKind,
    level: usize,
    variant: &EstimatorVariant,
    samples: usize,
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<GradientEstimate> {
    let np = pair_count(model.dataset().n(), level)?;
    let pair_rank = rng.random_range(0..np);
    estimate_gradient_for_pair(
        model, priors, params, kind, level, variant, samples, pair_rank, rng, diag,
    )
}

/// Per-component AdaGrad step sizes: accumulate squared gradients, scale
/// the learning rate by the accumulated root.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    g2: Vec<f64>,
    eta: f64,
    eps: f64,
}

impl AdaGradState {
    pub fn new(components: usize, eta: f64, eps: f64) -> Self {
        Self { g2: vec![0.0; components], eta, eps }
    }

    /// Ascent update in place; returns the largest absolute movement.
    pub fn step(&mut self, lambda: &mut [f64], grad: &[f64]) -> f64 {
        let mut max_delta = 0.0_f64;
        for c in 0..lambda.len() {
            self.g2[c] += grad[c] * grad[c];
            let delta = self.eta / (self.g2[c] + self.eps).sqrt() * grad[c];
            lambda[c] += delta;
            max_delta = max_delta.max(delta.abs());
        }
        max_delta
    }
}

/// Settings for one calibration run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub kind: VineKind,
    pub level: usize,
    pub variant: EstimatorVariant,
    pub samples: usize,
    pub eta: f64,
    pub eps_div: f64,
    pub max_iters: usize,
    pub conv_eps: f64,
    pub conv_window: usize,
    pub seed: u64,
    pub trace_stride: usize,
}

impl RunConfig {
    pub fn new(kind: VineKind, level: usize, variant: EstimatorVariant) -> Self {
        Self {
            kind,
            level,
            variant,
            samples: 50,
            eta: 1.0,
            eps_div: 1e-6,
            max_iters: 5000,
            conv_eps: 1e-4,
            conv_window: 50,
            seed: 0,
            trace_stride: 1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.variant.validate()?;
        if self.level < 1 || self.level > n - 1 {
            return Err(Error::domain(format!(
                "truncation level {} outside 1..={} for n = {n}",
                self.level,
                n - 1
            )));
        }
        if self.samples == 0 || self.max_iters == 0 || self.conv_window == 0 || self.trace_stride == 0 {
            return Err(Error::domain("samples, max_iters, conv_window, trace_stride must be positive"));
        }
        if !(self.eta > 0.0) || !(self.eps_div >= 0.0) || !(self.conv_eps > 0.0) {
            return Err(Error::domain("eta, eps_div, conv_eps must be positive"));
        }
        Ok(())
    }
}

/// One recorded point of the optimization path, in constrained units.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub params: VariationalParams,
    pub iterations: usize,
    pub converged: bool,
    pub wall_seconds: f64,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Diagnostics,
}

/// Runs stochastic gradient ascent from `init` until the trailing-window
/// movement criterion fires or the iteration budget runs out.
pub fn run_calibration(
    model: &KohModel,
    priors: &[PriorSpec],
    init: VariationalParams,
    cfg: &RunConfig,
) -> Result<CalibrationResult> {
    cfg.validate(model.dataset().n())?;
    if priors.len() != init.dim() || init.dim() != model.layout().dim() {
        return Err(Error::domain("model, priors, and parameters disagree on dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut ada = AdaGradState::new(params.lambda().len(), cfg.eta, cfg.eps_div);
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.conv_window);
    let mut diag = Diagnostics::default();
    let mut trace = Vec::new();
    let start = Instant::now();
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=cfg.max_iters {
        iterations = t;
        let est = estimate_gradient(
            model,
            priors,
            &params,
            cfg.kind,
            cfg.level,
            &cfg.variant,
            cfg.samples,
            &mut rng,
            &mut diag,
        )?;
        if est.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("non-finite gradient at lambda = {:?}", params.lambda()),
            });
        }
        let max_delta = ada.step(params.lambda_mut(), &est.grad);
        if params.lambda().iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("parameters left the finite range, gradient = {:?}", est.grad),
            });
        }

        if window.len() == cfg.conv_window {
            window.pop_front();
        }
        window.push_back(max_delta);
        if window.len() == cfg.conv_window {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            converged = mean < cfg.conv_eps;
        }

        let due = t % cfg.trace_stride == 0 || t == 1 || t == cfg.max_iters || converged;
        if due && trace.last().map(|r: &TraceRow| r.iteration) != Some(t) {
            let dim = params.dim();
            trace.push(TraceRow {
                iteration: t,
                wall_seconds: start.elapsed().as_secs_f64(),
                means: (0..dim).map(|j| params.mean(j)).collect(),
                sds: (0..dim).map(|j| params.sd(j)).collect(),
                grad_norm: est.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            });
        }
        if converged {
            break;
        }
    }

    Ok(CalibrationResult {
        params,
        iterations,
        converged,
        wall_seconds: start.elapsed().as_secs_f64(),
        trace,
        diagnostics: diag,
    })
}

/// Outcome of the truncation-level search.
#[derive(Debug, Clone)]
pub struct LevelDecision {
    pub level: usize,
    pub hit_max: bool,
    /// Parameter movement between successive levels, entry k comparing
    /// level k + 1 against level k + 2.
    pub deltas: Vec<f64>,
    pub result: CalibrationResult,
}

/// Picks the smallest truncation level whose fit no longer moves when one
/// more tree is added: runs levels l and l + 1 from the same seed and
/// accepts l once the largest mean shift, in units of the level-l
/// posterior sd, drops below `tol`.
pub fn select_truncation_level(
    model: &KohModel,
    priors: &[PriorSpec],
    init: &VariationalParams,
    cfg: &RunConfig,
    max_level: usize,
    tol: f64,
) -> Result<LevelDecision> {
    let n = model.dataset().n();
    if max_level < 1 || max_level > n - 1 {
        return Err(Error::domain(format!(
            "max truncation level {max_level} outside 1..={}",
            n - 1
        )));
    }
    let run_at = |level: usize| -> Result<CalibrationResult> {
        let mut c = cfg.clone();
        c.level = level;
        run_calibration(model, priors, init.clone(), &c)
    };

    let mut deltas = Vec::new();
    let mut current = run_at(1)?;
    for level in 1..max_level {
        let next = run_at(level + 1)?;
        let dim = current.params.dim();
        let delta = (0..dim)
            .map(|j| {
                (next.params.mean(j) - current.params.mean(j)).abs() / current.params.sd(j)
            })
            .fold(0.0_f64, f64::max);
        deltas.push(delta);
        if delta < tol || tol.is_infinite() {
            return Ok(LevelDecision { level, hit_max: false, deltas, result: current });
        }
        current = next;
    }
    Ok(LevelDecision {
        level: max_level,
        hit_max: max_level > 1,
        deltas,
        result: current,
    })
}

/// Writes the optimization path as CSV: iteration, elapsed seconds, the
/// constrained mean and sd of every coordinate, and the gradient norm.
pub fn write_trace_csv<W: IoWrite>(out: &mut W, names: &[String], trace: &[TraceRow]) -> Result<()> {
    let mut header = String::from("iteration,wall_seconds");
    for n in names {
        header.push_str(",mean_");
        header.push_str(n);
    }
    for n in names {
        header.push_str(",sd_");
        header.push_str(n);
    }
    header.push_str(",grad_norm");
    writeln!(out, "{header}")?;
    for row in trace {
        let mut line = format!("{},{}", row.iteration, row.wall_seconds);
        for v in row.means.iter().chain(&row.sds) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        line.push(',');
        line.push_str(&format!("{}", row.grad_norm));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, ModelRun, Observation};
    use crate::model::{FMean, GpSpec, Grouping};
    use crate::variational::{kinds_for_layout, FactorKind};

    #[test]
    fn adagrad_first_step_unit_example() {
        let mut ada = AdaGradState::new(2, 1.0, 0.0);
        let mut lambda = vec![0.0, 0.0];
        let max_delta = ada.step(&mut lambda, &[1.0, 2.0]);
        assert_eq!(lambda, vec![1.0, 1.0]);
        assert_eq!(max_delta, 1.0);
        // second step shares the accumulator
        let d2 = ada.step(&mut lambda, &[1.0, 0.0]);
        assert!((lambda[0] - (1.0 + 1.0 / 2.0_f64.sqrt())).abs() < 1e-15);
        assert_eq!(lambda[1], 1.0);
        assert!((d2 - 1.0 / 2.0_f64.sqrt()).abs() < 1e-15);
    }

    fn toy_model(n_obs: usize, n_runs: usize, seed: u64) -> KohModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<Observation> = (0..n_obs)
            .map(|_| Observation {
                x: vec![rng.random_range(0.0..3.0)],
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        let runs: Vec<ModelRun> = (0..n_runs)
            .map(|_| ModelRun {
                x: vec![rng.random_range(0.0..3.0)],
                t: vec![rng.random_range(0.0..1.0)],
                z: rng.random_range(-1.0..1.0),
            })
            .collect();
        let spec = GpSpec::new(FMean::Zero, 0.0, Grouping::Shared, Grouping::Shared);
        KohModel::new(Dataset::new(obs, runs).unwrap(), spec).unwrap()
    }

    fn toy_priors(model: &KohModel) -> Vec<PriorSpec> {
        (0..model.layout().dim())
            .map(|j| match model.layout().domain(j) {
                crate::model::Domain::Real => PriorSpec::Normal { mean: 0.5, sd: 0.3 },
                crate::model::Domain::Positive => PriorSpec::Gamma { shape: 4.0, rate: 4.0 },
            })
            .collect()
    }

    fn toy_params(model: &KohModel) -> VariationalParams {
        let kinds = kinds_for_layout(model.layout());
        VariationalParams::prior_match(kinds, &toy_priors(model)).unwrap()
    }

    #[test]
    fn control_variate_variant_at_unit_tau_is_bitwise_reducible() {
        let model = toy_model(3, 2, 11);
        let priors = toy_priors(&model);
        let params = toy_params(&model);
        let a = EstimatorVariant::RbCv { cv_samples: 10 };
        let b = EstimatorVariant::RbCvIs { cv_samples: 10, tau: 1.0 };
        for seed in 0..20 {
            let mut d1 = Diagnostics::default();
            let mut d2 = Diagnostics::default();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let g1 = estimate_gradient(&model, &priors, &params, VineKind::D, 2, &a, 5, &mut r1, &mut d1)
                .unwrap();
            let g2 = estimate_gradient(&model, &priors, &params, VineKind::D, 2, &b, 5, &mut r2, &mut d2)
                .unwrap();
            assert_eq!(g1.pair_rank, g2.pair_rank);
            for (x, y) in g1.grad.iter().zip(&g2.grad) {
                assert_eq!(x.to_bits(), y.to_bits(), "seed {seed}");
            }
        }
    }

    #[test]
    fn estimators_agree_in_expectation() {
        // every variant estimates the same bound gradient; compare
        // per-component means over many single-sample replications
        let model = toy_model(3, 2, 5);
        let priors = toy_priors(&model);
        let params = toy_params(&model);
        let variants = [
            EstimatorVariant::Plain,
            EstimatorVariant::Rb,
            EstimatorVariant::RbCv { cv_samples: 10 },
            EstimatorVariant::RbCvIs { cv_samples: 10, tau: 1.5 },
        ];
        let reps = 6000;
        let dim2 = params.lambda().len();
        let mut means = vec![vec![0.0; dim2]; variants.len()];
        let mut vars = vec![vec![0.0; dim2]; variants.len()];
        for (v, variant) in variants.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + v as u64);
            let mut diag = Diagnostics::default();
            for _ in 0..reps {
                let g = estimate_gradient(
                    &model, &priors, &params, VineKind::D, 2, variant, 1, &mut rng, &mut diag,
                )
                .unwrap();
                for c in 0..dim2 {
                    means[v][c] += g.grad[c];
                    vars[v][c] += g.grad[c] * g.grad[c];
                }
            }
            for c in 0..dim2 {
                means[v][c] /= reps as f64;
                vars[v][c] = vars[v][c] / reps as f64 - means[v][c] * means[v][c];
            }
        }
        for v in 1..variants.len() {
            for c in 0..dim2 {
                let se = ((vars[0][c] + vars[v][c]) / reps as f64).sqrt();
                let gap = (means[v][c] - means[0][c]).abs();
                assert!(
                    gap < 5.0 * se + 1e-9,
                    "variant {v} component {c}: gap {gap} vs se {se}"
                );
            }
        }
    }

    #[test]
    fn refinements_do_not_inflate_variance() {
        let model = toy_model(3, 2, 7);
        let priors = toy_priors(&model);
        let params = toy_params(&model);
        let reps = 3000;
        let dim2 = params.lambda().len();
        let mut total_var = Vec::new();
        for (v, variant) in [
            EstimatorVariant::Plain,
            EstimatorVariant::Rb,
            EstimatorVariant::RbCv { cv_samples: 10 },
        ]
        .iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(33 + v as u64);
            let mut diag = Diagnostics::default();
            let mut sum = vec![0.0; dim2];
            let mut sq = vec![0.0; dim2];
            for _ in 0..reps {
                let g = estimate_gradient(
                    &model, &priors, &params, VineKind::D, 2, variant, 1, &mut rng, &mut diag,
                )
                .unwrap();
                for c in 0..dim2 {
                    sum[c] += g.grad[c];
                    sq[c] += g.grad[c] * g.grad[c];
                }
            }
            let tv: f64 = (0..dim2)
                .map(|c| sq[c] / reps as f64 - (sum[c] / reps as f64).powi(2))
                .sum();
            total_var.push(tv);
        }
        assert!(
            total_var[1] < total_var[0] * 1.05,
            "rb {} vs plain {}",
            total_var[1],
            total_var[0]
        );
        assert!(
            total_var[2] < total_var[1] * 1.05,
            "rbcv {} vs rb {}",
            total_var[2],
            total_var[1]
        );
    }

    #[test]
    fn calibration_runs_and_traces() {
        let model = toy_model(4, 3, 2);
        let priors = toy_priors(&model);
        let init = toy_params(&model);
        let mut cfg = RunConfig::new(VineKind::D, 2, EstimatorVariant::Rb);
        cfg.max_iters = 60;
        cfg.samples = 5;
        cfg.seed = 9;
        cfg.trace_stride = 10;
        let out = run_calibration(&model, &priors, init, &cfg).unwrap();
        assert_eq!(out.iterations, 60);
        assert!(!out.converged);
        assert!(out.trace.first().unwrap().iteration == 1);
        assert!(out.trace.last().unwrap().iteration == 60);
        assert!(out.trace.iter().all(|r| r.grad_norm.is_finite()));
        assert!(out.params.lambda().iter().all(|l| l.is_finite()));
        for j in 0..out.params.dim() {
            if out.params.kinds()[j] == FactorKind::Gamma {
                assert!(out.params.mean(j) > 0.0);
            }
            assert!(out.params.sd(j) > 0.0);
        }
    }

    #[test]
    fn calibration_is_reproducible_by_seed() {
        let model = toy_model(4, 3, 21);
        let priors = toy_priors(&model);
        let mut cfg = RunConfig::new(VineKind::C, 2, EstimatorVariant::RbCv { cv_samples: 5 });
        cfg.max_iters = 30;
        cfg.samples = 4;
        cfg.seed = 77;
        let a = run_calibration(&model, &priors, toy_params(&model), &cfg).unwrap();
        let b = run_calibration(&model, &priors, toy_params(&model), &cfg).unwrap();
        assert_eq!(a.iterations, b.iterations);
        for (x, y) in a.params.lambda().iter().zip(b.params.lambda()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.iteration, rb.iteration);
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
            for (x, y) in ra.means.iter().zip(&rb.means) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn convergence_window_fires_on_still_parameters() {
        let model = toy_model(3, 2, 4);
        let priors = toy_priors(&model);
        let mut cfg = RunConfig::new(VineKind::D, 1, EstimatorVariant::Rb);
        // learning rate so small that movement stays below the threshold
        cfg.eta = 1e-9;
        cfg.conv_eps = 1e-4;
        cfg.conv_window = 10;
        cfg.max_iters = 500;
        cfg.samples = 2;
        let out = run_calibration(&model, &priors, toy_params(&model), &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 10);
    }

    #[test]
    fn infinite_tolerance_selects_the_first_level() {
        let model = toy_model(3, 2, 8);
        let priors = toy_priors(&model);
        let mut cfg = RunConfig::new(VineKind::D, 1, EstimatorVariant::Rb);
        cfg.max_iters = 20;
        cfg.samples = 2;
        cfg.eta = 0.1;
        let init = toy_params(&model);
        let pick = select_truncation_level(&model, &priors, &init, &cfg, 3, f64::INFINITY).unwrap();
        assert_eq!(pick.level, 1);
        assert!(!pick.hit_max);
        assert_eq!(pick.deltas.len(), 1);
    }

    #[test]
    fn exhausting_levels_sets_the_flag() {
        let model = toy_model(3, 2, 8);
        let priors = toy_priors(&model);
        let mut cfg = RunConfig::new(VineKind::D, 1, EstimatorVariant::Rb);
        cfg.max_iters = 20;
        cfg.samples = 2;
        cfg.eta = 0.1;
        let init = toy_params(&model);
        let pick = select_truncation_level(&model, &priors, &init, &cfg, 3, 0.0).unwrap();
        assert_eq!(pick.level, 3);
        assert!(pick.hit_max);
        assert_eq!(pick.deltas.len(), 2);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            iteration: 1,
            wall_seconds: 0.5,
            means: vec![1.0, 2.0],
            sds: vec![0.1, 0.2],
            grad_norm: 3.0,
        }];
        let names = vec!["theta1".to_string(), "sigma".to_string()];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &names, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,wall_seconds,mean_theta1,mean_sigma,sd_theta1,sd_sigma,grad_norm"
        );
        assert_eq!(lines.next().unwrap(), "1,0.5,1,2,0.1,0.2,3");
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let model = toy_model(3, 2, 1);
        let n = model.dataset().n();
        let mut cfg = RunConfig::new(VineKind::D, 99, EstimatorVariant::Plain);
        assert!(cfg.validate(n).is_err());
        cfg.level = 2;
        cfg.eta = 0.0;
        assert!(cfg.validate(n).is_err());
        cfg.eta = 1.0;
        assert!(cfg.validate(n).is_ok());
        let bad = EstimatorVariant::RbCv { cv_samples: 1 };
        assert!(bad.validate().is_err());
        let bad = EstimatorVariant::RbCvIs { cv_samples: 5, tau: 0.5 };
        assert!(bad.validate().is_err());
    }
}

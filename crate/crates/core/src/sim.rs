//! Synthetic calibration study with a known ground truth.
//!
//! The generator draws one realization of the full generative story: a
//! simulator surface with mean theta1 cos(x1) + theta2 sin(x2), a biased
//! discrepancy surface, and noisy field observations on a grid, together
//! with run outputs on crossed input/parameter grids and a held-out set
//! of noiseless true-process values for scoring predictions.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, ModelRun, Observation};
use crate::linalg::cholesky_with_retry;
use crate::model::{BasisFn, FMean, GpSpec, Grouping, KohModel};
use crate::variational::PriorSpec;
use crate::{Error, Result};

/// Input box of the field observations and runs.
pub const X_RANGE: (f64, f64) = (0.0, 3.0);
/// Calibration-parameter box of the runs.
pub const T_RANGE: (f64, f64) = (0.0, 1.0);

/// Ground-truth generative constants.
pub const THETA_TRUE: [f64; 2] = [0.39, 0.60];
pub const ETA_F_TRUE: f64 = 1.0 / 30.0;
pub const LS_X_TRUE: f64 = 1.0;
pub const LS_T_TRUE: f64 = 1.0;
pub const ETA_D_TRUE: f64 = 1.0 / 30.0;
pub const LS_D_TRUE: f64 = 0.5;
pub const DELTA_MEAN: f64 = 0.15;
pub const SIGMA_TRUE: f64 = 0.1;

/// Scenario shape: grid sides, held-out count, seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimulationScenario {
    pub obs_side: usize,
    pub run_side: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self { obs_side: 12, run_side: 9, n_test: 50, seed: 0 }
    }
}

/// One simulated problem instance.
pub struct SimulatedData {
    pub dataset: Dataset,
    pub test_x: Vec<Vec<f64>>,
    pub test_truth: Vec<f64>,
    pub truth: TruthRecord,
}

/// Serializable record of what generated a dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TruthRecord {
    pub names: Vec<String>,
    pub phi_true: Vec<f64>,
    pub scenario: SimulationScenario,
}

/// Model structure the scenario is generated from and fitted with.
pub fn gp_spec() -> GpSpec {
    GpSpec::new(
        FMean::ThetaBasis(vec![BasisFn::Cos(0), BasisFn::Sin(1)]),
        DELTA_MEAN,
        Grouping::Shared,
        Grouping::Shared,
    )
}

/// The generative latent vector in layout order.
pub fn true_phi() -> Vec<f64> {
    vec![
        THETA_TRUE[0],
        THETA_TRUE[1],
        ETA_F_TRUE,
        LS_X_TRUE,
        LS_T_TRUE,
        ETA_D_TRUE,
        LS_D_TRUE,
        SIGMA_TRUE,
    ]
}

/// Priors used when fitting scenario data: centered near the generative
/// scales with sds loose enough that the data does the work.
pub fn default_priors() -> Vec<PriorSpec> {
    vec![
        PriorSpec::Normal { mean: 0.5, sd: 0.3 },
        PriorSpec::Normal { mean: 0.5, sd: 0.3 },
        PriorSpec::Gamma { shape: 2.0, rate: 60.0 },
        PriorSpec::Gamma { shape: 10.0, rate: 10.0 },
        PriorSpec::Gamma { shape: 10.0, rate: 10.0 },
        PriorSpec::Gamma { shape: 2.0, rate: 60.0 },
        PriorSpec::Gamma { shape: 10.0, rate: 20.0 },
        PriorSpec::Gamma { shape: 2.0, rate: 20.0 },
    ]
}

/// Square grid with `side` points per axis, endpoints included.
fn square_grid(side: usize, range: (f64, f64)) -> Result<Vec<Vec<f64>>> {
    if side < 2 {
        return Err(Error::domain("grids need at least two points per side"));
    }
    let step = (range.1 - range.0) / (side - 1) as f64;
    let mut pts = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            pts.push(vec![range.0 + i as f64 * step, range.0 + j as f64 * step]);
        }
    }
    Ok(pts)
}

/// Draws one problem instance. Observation and test rows carry the true
/// process (simulator at the true parameters plus discrepancy), run rows
/// carry the simulator at their own grid parameters; all of it is one
/// joint Gaussian draw, with measurement noise added to observations only.
pub fn simulate(scenario: &SimulationScenario) -> Result<SimulatedData> {
    if scenario.n_test == 0 {
        return Err(Error::domain("scenario needs at least one held-out point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let obs_x = square_grid(scenario.obs_side, X_RANGE)?;
    let run_x = square_grid(scenario.run_side, X_RANGE)?;
    let mut run_t = square_grid(scenario.run_side, T_RANGE)?;
    run_t.shuffle(&mut rng);
    let test_x: Vec<Vec<f64>> = (0..scenario.n_test)
        .map(|_| {
            vec![
                rng.random_range(X_RANGE.0..X_RANGE.1),
                rng.random_range(X_RANGE.0..X_RANGE.1),
            ]
        })
        .collect();

    // scratch model over placeholder values; only its kernels and layout
    // are used to assemble the generative covariance
    let scratch_obs: Vec<Observation> = obs_x
        .iter()
        .map(|x| Observation { x: x.clone(), y: 0.0 })
        .collect();
    let scratch_runs: Vec<ModelRun> = run_x
        .iter()
        .zip(&run_t)
        .map(|(x, t)| ModelRun { x: x.clone(), t: t.clone(), z: 0.0 })
        .collect();
    let scratch = KohModel::new(Dataset::new(scratch_obs, scratch_runs)?, gp_spec())?;
    let phi = true_phi();
    let theta = &phi[..2];
    let f_mean = &gp_spec().f_mean;

    let m1 = obs_x.len();
    let m2 = run_x.len();
    let total = m1 + m2 + scenario.n_test;
    // row -> (x, t, true process flag); true-process rows get the
    // discrepancy kernel and the simulator evaluated at theta
    let row: Vec<(&Vec<f64>, &[f64], bool)> = obs_x
        .iter()
        .map(|x| (x, theta, true))
        .chain(run_x.iter().zip(&run_t).map(|(x, t)| (x, t.as_slice(), false)))
        .chain(test_x.iter().map(|x| (x, theta, true)))
        .collect();

    let mean = DVector::from_iterator(
        total,
        row.iter().map(|(x, t, zeta)| {
            f_mean.eval(x, t) + if *zeta { DELTA_MEAN } else { 0.0 }
        }),
    );
    let mut cov = DMatrix::zeros(total, total);
    for a in 0..total {
        for b in a..total {
            let (xa, ta, za) = row[a];
            let (xb, tb, zb) = row[b];
            let mut k = scratch.kernel_f(&phi, xa, ta, xb, tb);
            if za && zb {
                k += scratch.kernel_delta(&phi, xa, xb);
            }
            cov[(a, b)] = k;
            cov[(b, a)] = k;
        }
    }
    let chol = cholesky_with_retry(cov, 1e-8 * ETA_F_TRUE, "scenario draw")?;
    let z = DVector::from_iterator(total, (0..total).map(|_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    }));
    let draw = mean + chol.l() * z;

    let obs: Vec<Observation> = obs_x
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            Observation { x: x.clone(), y: draw[i] + SIGMA_TRUE * noise }
        })
        .collect();
    let runs: Vec<ModelRun> = run_x
        .iter()
        .zip(&run_t)
        .enumerate()
        .map(|(i, (x, t))| ModelRun { x: x.clone(), t: t.clone(), z: draw[m1 + i] })
        .collect();
    let test_truth: Vec<f64> = (0..scenario.n_test).map(|i| draw[m1 + m2 + i]).collect();

    Ok(SimulatedData {
        dataset: Dataset::new(obs, runs)?,
        test_x,
        test_truth,
        truth: TruthRecord {
            names: scratch.layout().names(),
            phi_true: phi,
            scenario: scenario.clone(),
        },
    })
}

//! The calibration model: observations are emulator-plus-discrepancy GP
//! draws, runs are emulator draws, and the two share one squared-exponential
//! emulator kernel over (x, t).
//!
//! Stacked as d = (y, z), the data are multivariate normal with mean M(phi)
//! and covariance K(phi), where phi collects the calibration parameters
//! theta, the kernel amplitudes and lengthscales of both processes, and the
//! observation noise sd. Everything downstream (vine pair terms, the MH
//! sampler, prediction) asks this module for entries or sub-blocks of
//! (M, K); only the full-likelihood and prediction paths ever assemble the
//! complete matrix.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::linalg;
use crate::special::normal_logpdf;
use crate::{Error, Result};

/// One term of the emulator mean basis, evaluated on the controllable input.
/// The Drop* terms are the semi-empirical binding-energy basis over inputs
/// (Z, N); pairing each with its coefficient makes the mean linear in the
/// calibration parameters, so the emulator GP models deviations from the
/// formula rather than the raw energies.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BasisFn {
    /// Constant 1.
    One,
    /// cos of the given x component.
    Cos(usize),
    /// sin of the given x component.
    Sin(usize),
    /// Mass number A = Z + N.
    DropVolume,
    /// -A^(2/3).
    DropSurface,
    /// -(N - Z)^2 / A.
    DropSymmetry,
    /// -Z(Z - 1) / A^(1/3).
    DropCoulomb,
}

impl BasisFn {
    fn eval(&self, x: &[f64]) -> f64 {
        let a = || x[0] + x[1];
        match *self {
            BasisFn::One => 1.0,
            BasisFn::Cos(d) => x[d].cos(),
            BasisFn::Sin(d) => x[d].sin(),
            BasisFn::DropVolume => a(),
            BasisFn::DropSurface => -a().powf(2.0 / 3.0),
            BasisFn::DropSymmetry => -(x[1] - x[0]).powi(2) / a(),
            BasisFn::DropCoulomb => -x[0] * (x[0] - 1.0) / a().cbrt(),
        }
    }
}

/// Emulator mean: zero, or a calibration-parameter-weighted basis
/// m_f(x, t) = sum_k t_k b_k(x).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FMean {
    Zero,
    ThetaBasis(Vec<BasisFn>),
}

impl FMean {
    pub fn eval(&self, x: &[f64], t: &[f64]) -> f64 {
        match self {
            FMean::Zero => 0.0,
            FMean::ThetaBasis(basis) => {
                basis.iter().zip(t).map(|(b, tk)| tk * b.eval(x)).sum()
            }
        }
    }

    pub fn uses_theta(&self) -> bool {
        matches!(self, FMean::ThetaBasis(_))
    }
}

/// How kernel lengthscales are shared across input dimensions: one scale per
/// block (all x dims / all t dims) or one per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Grouping {
    Shared,
    PerDim,
}

/// Structural description of the two GPs; the numerical values of
/// amplitudes/lengthscales live in phi.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpSpec {
    pub f_mean: FMean,
    /// Constant discrepancy mean added to observation rows.
    pub delta_mean: f64,
    pub f_grouping: Grouping,
    pub delta_grouping: Grouping,
    /// Run-block diagonal nugget, relative to the emulator amplitude.
    pub run_jitter_rel: f64,
}

impl GpSpec {
    pub fn new(f_mean: FMean, delta_mean: f64, f_grouping: Grouping, delta_grouping: Grouping) -> Self {
        GpSpec {
            f_mean,
            delta_mean,
            f_grouping,
            delta_grouping,
            run_jitter_rel: 1e-8,
        }
    }
}

/// Kind of a latent coordinate, used to pick variational families, priors
/// and unconstrained transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Real,
    Positive,
}

/// Flat layout of phi: theta.., eta_f, ls_f.., eta_d, ls_d.., sigma.
/// Lengthscale slots are x-type first, then t-type.
#[derive(Debug, Clone)]
pub struct LatentLayout {
    pub d_x: usize,
    pub d_theta: usize,
    f_x_slots: Vec<Vec<usize>>,
    f_t_slots: Vec<Vec<usize>>,
    d_slots: Vec<Vec<usize>>,
}

impl LatentLayout {
    pub fn new(d_x: usize, d_theta: usize, spec: &GpSpec) -> Self {
        let all_x: Vec<usize> = (0..d_x).collect();
        let all_t: Vec<usize> = (0..d_theta).collect();
        let (f_x_slots, f_t_slots) = match spec.f_grouping {
            Grouping::Shared => {
                let t: Vec<Vec<usize>> = if d_theta == 0 { vec![] } else { vec![all_t.clone()] };
                (vec![all_x.clone()], t)
            }
            Grouping::PerDim => (
                all_x.iter().map(|&d| vec![d]).collect(),
                all_t.iter().map(|&d| vec![d]).collect(),
            ),
        };
        let d_slots = match spec.delta_grouping {
            Grouping::Shared => vec![all_x],
            Grouping::PerDim => (0..d_x).map(|d| vec![d]).collect(),
        };
        LatentLayout { d_x, d_theta, f_x_slots, f_t_slots, d_slots }
    }

    pub fn n_f_slots(&self) -> usize {
        self.f_x_slots.len() + self.f_t_slots.len()
    }

    pub fn n_delta_slots(&self) -> usize {
        self.d_slots.len()
    }

    /// Total number of latent coordinates.
    pub fn dim(&self) -> usize {
        self.d_theta + 1 + self.n_f_slots() + 1 + self.n_delta_slots() + 1
    }

    pub fn idx_eta_f(&self) -> usize {
        self.d_theta
    }

    pub fn idx_ls_f(&self, slot: usize) -> usize {
        self.d_theta + 1 + slot
    }

    pub fn idx_eta_delta(&self) -> usize {
        self.d_theta + 1 + self.n_f_slots()
    }

    pub fn idx_ls_delta(&self, slot: usize) -> usize {
        self.idx_eta_delta() + 1 + slot
    }

    pub fn idx_sigma(&self) -> usize {
        self.dim() - 1
    }

    pub fn theta<'a>(&self, phi: &'a [f64]) -> &'a [f64] {
        &phi[..self.d_theta]
    }

    pub fn eta_f(&self, phi: &[f64]) -> f64 {
        phi[self.idx_eta_f()]
    }

    pub fn ls_f<'a>(&self, phi: &'a [f64]) -> &'a [f64] {
        &phi[self.idx_ls_f(0)..self.idx_ls_f(0) + self.n_f_slots()]
    }

    pub fn eta_delta(&self, phi: &[f64]) -> f64 {
        phi[self.idx_eta_delta()]
    }

    pub fn ls_delta<'a>(&self, phi: &'a [f64]) -> &'a [f64] {
        &phi[self.idx_ls_delta(0)..self.idx_ls_delta(0) + self.n_delta_slots()]
    }

    pub fn sigma(&self, phi: &[f64]) -> f64 {
        phi[self.idx_sigma()]
    }

    pub fn domain(&self, j: usize) -> Domain {
        if j < self.d_theta {
            Domain::Real
        } else {
            Domain::Positive
        }
    }

    /// Human-readable coordinate name used in traces, summaries and configs.
    pub fn name(&self, j: usize) -> String {
        if j < self.d_theta {
            return format!("theta{}", j + 1);
        }
        if j == self.idx_eta_f() {
            return "eta_f".into();
        }
        let nfx = self.f_x_slots.len();
        if j < self.idx_ls_f(0) + self.n_f_slots() {
            let s = j - self.idx_ls_f(0);
            return if s < nfx {
                if nfx == 1 && self.f_x_slots[0].len() > 1 {
                    "ls_f_x".into()
                } else if self.f_x_slots[s].len() == 1 && matches!(self.f_x_slots[s][..], [_]) && nfx > 1 {
                    format!("ls_f_x{}", self.f_x_slots[s][0] + 1)
                } else {
                    "ls_f_x".into()
                }
            } else {
                let ts = s - nfx;
                if self.f_t_slots.len() == 1 && self.f_t_slots[0].len() > 1 {
                    "ls_f_t".into()
                } else if self.f_t_slots.len() > 1 {
                    format!("ls_f_t{}", self.f_t_slots[ts][0] + 1)
                } else {
                    "ls_f_t".into()
                }
            };
        }
        if j == self.idx_eta_delta() {
            return "eta_d".into();
        }
        if j < self.idx_ls_delta(0) + self.n_delta_slots() {
            let s = j - self.idx_ls_delta(0);
            return if self.d_slots.len() == 1 {
                "ls_d".into()
            } else {
                format!("ls_d_x{}", self.d_slots[s][0] + 1)
            };
        }
        "sigma".into()
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|j| self.name(j)).collect()
    }
}

/// Assembled joint moments of the stacked data vector.
#[derive(Debug, Clone)]
pub struct JointMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Unconditional mean and sd of a single stacked component.
pub fn marginal_univariate(moments: &JointMoments, i: usize) -> (f64, f64) {
    (moments.mean[i], moments.cov[(i, i)].sqrt())
}

/// Dataset + GP structure, with entry-wise access to the joint moments.
#[derive(Debug, Clone)]
pub struct KohModel {
    dataset: Dataset,
    spec: GpSpec,
    layout: LatentLayout,
}

impl KohModel {
    pub fn new(dataset: Dataset, spec: GpSpec) -> Result<Self> {
        let d_theta = match &spec.f_mean {
            FMean::ThetaBasis(b) => {
                if dataset.n_runs() > 0 && b.len() != dataset.d_t() {
                    return Err(Error::config(format!(
                        "mean basis has {} terms but runs carry {} calibration inputs",
                        b.len(),
                        dataset.d_t()
                    )));
                }
                for f in b {
                    let d = match *f {
                        BasisFn::One => 0,
                        BasisFn::Cos(d) | BasisFn::Sin(d) => d + 1,
                        BasisFn::DropVolume
                        | BasisFn::DropSurface
                        | BasisFn::DropSymmetry
                        | BasisFn::DropCoulomb => 2,
                    };
                    if d > dataset.d_x() {
                        return Err(Error::config(format!(
                            "mean basis references x{} but inputs have {} dims",
                            d,
                            dataset.d_x()
                        )));
                    }
                }
                b.len()
            }
            FMean::Zero => dataset.d_t(),
        };
        if !(spec.run_jitter_rel >= 0.0) {
            return Err(Error::config("run jitter must be non-negative"));
        }
        let layout = LatentLayout::new(dataset.d_x(), d_theta, &spec);
        Ok(KohModel { dataset, spec, layout })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn spec(&self) -> &GpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    /// Emulator calibration input of a row: theta for observations, the
    /// recorded setting for runs.
    fn t_of_row<'s>(&'s self, phi: &'s [f64], row: usize) -> &'s [f64] {
        match self.dataset.t(row) {
            Some(t) => t,
            None => self.layout.theta(phi),
        }
    }

    /// Squared-exponential emulator kernel between two explicit points.
    pub fn kernel_f(&self, phi: &[f64], xa: &[f64], ta: &[f64], xb: &[f64], tb: &[f64]) -> f64 {
        let ls = self.layout.ls_f(phi);
        let mut s = 0.0;
        for (si, dims) in self.layout.f_x_slots.iter().enumerate() {
            let mut d2 = 0.0;
            for &d in dims {
                let dd = xa[d] - xb[d];
                d2 += dd * dd;
            }
            s += d2 / (ls[si] * ls[si]);
        }
        let off = self.layout.f_x_slots.len();
        for (si, dims) in self.layout.f_t_slots.iter().enumerate() {
            let mut d2 = 0.0;
            for &d in dims {
                let dd = ta[d] - tb[d];
                d2 += dd * dd;
            }
            s += d2 / (ls[off + si] * ls[off + si]);
        }
        self.layout.eta_f(phi) * (-0.5 * s).exp()
    }

    /// Squared-exponential discrepancy kernel between two inputs.
    pub fn kernel_delta(&self, phi: &[f64], xa: &[f64], xb: &[f64]) -> f64 {
        let ls = self.layout.ls_delta(phi);
        let mut s = 0.0;
        for (si, dims) in self.layout.d_slots.iter().enumerate() {
            let mut d2 = 0.0;
            for &d in dims {
                let dd = xa[d] - xb[d];
                d2 += dd * dd;
            }
            s += d2 / (ls[si] * ls[si]);
        }
        self.layout.eta_delta(phi) * (-0.5 * s).exp()
    }

    /// Mean of stacked component `row`.
    pub fn mean_entry(&self, phi: &[f64], row: usize) -> f64 {
        let m = self.spec.f_mean.eval(self.dataset.x(row), self.t_of_row(phi, row));
        if self.dataset.is_observation(row) {
            m + self.spec.delta_mean
        } else {
            m
        }
    }

    /// Covariance of stacked components `a` and `b`.
    pub fn cov_entry(&self, phi: &[f64], a: usize, b: usize) -> f64 {
        let mut k = self.kernel_f(
            phi,
            self.dataset.x(a),
            self.t_of_row(phi, a),
            self.dataset.x(b),
            self.t_of_row(phi, b),
        );
        let a_obs = self.dataset.is_observation(a);
        let b_obs = self.dataset.is_observation(b);
        if a_obs && b_obs {
            k += self.kernel_delta(phi, self.dataset.x(a), self.dataset.x(b));
            if a == b {
                let s = self.layout.sigma(phi);
                k += s * s;
            }
        } else if a == b {
            k += self.spec.run_jitter_rel * self.layout.eta_f(phi);
        }
        k
    }

    /// Mean vector and covariance over an arbitrary index subset, in the
    /// order given. This is the O(|idx|^2) path the vine pair terms use;
    /// it never touches rows outside `idx`.
    pub fn moments_subset(&self, phi: &[f64], idx: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let m = idx.len();
        let mean = DVector::from_iterator(m, idx.iter().map(|&i| self.mean_entry(phi, i)));
        let mut cov = DMatrix::zeros(m, m);
        for p in 0..m {
            for q in p..m {
                let v = self.cov_entry(phi, idx[p], idx[q]);
                cov[(p, q)] = v;
                cov[(q, p)] = v;
            }
        }
        (mean, cov)
    }

    /// Full (M, K). The upper triangle is computed once and mirrored, so the
    /// result is exactly symmetric.
    pub fn assemble(&self, phi: &[f64]) -> JointMoments {
        let n = self.dataset.n();
        let mean = DVector::from_iterator(n, (0..n).map(|i| self.mean_entry(phi, i)));
        let mut cov = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let v = self.cov_entry(phi, a, b);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        JointMoments { mean, cov }
    }

    /// Diagonal jitter scale used by factorization retries.
    pub fn base_jitter(&self, phi: &[f64]) -> f64 {
        self.spec.run_jitter_rel.max(1e-10) * self.layout.eta_f(phi).abs()
    }

    /// Exact joint Gaussian log-likelihood of the stacked data.
    pub fn log_likelihood(&self, phi: &[f64]) -> Result<f64> {
        let moments = self.assemble(phi);
        let d = self.dataset.values();
        let mean: Vec<f64> = moments.mean.iter().copied().collect();
        linalg::mvn_logpdf(&d, &mean, moments.cov, self.base_jitter(phi), "joint likelihood")
            .map_err(|e| attach_phi(e, phi))
    }

    /// Log-density of a single stacked component under its unconditional
    /// Gaussian marginal.
    pub fn marginal_logpdf(&self, phi: &[f64], row: usize) -> f64 {
        let mu = self.mean_entry(phi, row);
        let var = self.cov_entry(phi, row, row);
        normal_logpdf(self.dataset.value(row), mu, var.sqrt())
    }

    /// Does latent coordinate `j` influence the joint density of a row
    /// subset containing `o` observations and `r` runs? Used by the
    /// Rao-Blackwellized estimators to drop pair-term components whose
    /// gradient contribution is structurally zero.
    pub fn coordinate_appears(&self, j: usize, o: usize, r: usize) -> bool {
        let lay = &self.layout;
        let size = o + r;
        if j < lay.d_theta {
            return o >= 1 && (self.spec.f_mean.uses_theta() || r >= 1);
        }
        if j == lay.idx_eta_f() {
            return true;
        }
        let ls0 = lay.idx_ls_f(0);
        if j >= ls0 && j < ls0 + lay.n_f_slots() {
            let is_x_slot = j - ls0 < lay.f_x_slots.len();
            return if is_x_slot { size >= 2 } else { size >= 2 && r >= 1 };
        }
        if j == lay.idx_eta_delta() {
            return o >= 1;
        }
        let lsd0 = lay.idx_ls_delta(0);
        if j >= lsd0 && j < lsd0 + lay.n_delta_slots() {
            return o >= 2;
        }
        // sigma
        o >= 1
    }

    /// Count of observation rows among `idx`.
    pub fn count_obs(&self, idx: &[usize]) -> usize {
        idx.iter().filter(|&&i| self.dataset.is_observation(i)).count()
    }
}

fn attach_phi(e: Error, phi: &[f64]) -> Error {
    match e {
        Error::Numerical { what, phi: None } => Error::Numerical { what, phi: Some(phi.to_vec()) },
        other => other,
    }
}

/// Precomputed squared-distance structure for repeated full assemblies
/// (the MH chain and multi-draw prediction). Lengthscale-free distances are
/// phi-independent; only the theta-to-run distances change per phi.
pub struct CachedKoh<'a> {
    model: &'a KohModel,
    /// Per f x-type slot: n x n squared distances.
    fx: Vec<DMatrix<f64>>,
    /// Per f t-type slot: m2 x m2 squared distances between run settings.
    ft_rr: Vec<DMatrix<f64>>,
    /// Per delta slot: m1 x m1 squared distances.
    dxx: Vec<DMatrix<f64>>,
}

impl<'a> CachedKoh<'a> {
    pub fn new(model: &'a KohModel) -> Self {
        let ds = model.dataset();
        let lay = model.layout();
        let n = ds.n();
        let m1 = ds.n_obs();
        let m2 = ds.n_runs();
        let sqdist = |dims: &[usize], pa: &[f64], pb: &[f64]| -> f64 {
            dims.iter()
                .map(|&d| {
                    let dd = pa[d] - pb[d];
                    dd * dd
                })
                .sum()
        };
        let fx = lay
            .f_x_slots
            .iter()
            .map(|dims| {
                DMatrix::from_fn(n, n, |a, b| sqdist(dims, ds.x(a), ds.x(b)))
            })
            .collect();
        let ft_rr = lay
            .f_t_slots
            .iter()
            .map(|dims| {
                DMatrix::from_fn(m2, m2, |a, b| {
                    sqdist(dims, ds.t(m1 + a).unwrap(), ds.t(m1 + b).unwrap())
                })
            })
            .collect();
        let dxx = lay
            .d_slots
            .iter()
            .map(|dims| DMatrix::from_fn(m1, m1, |a, b| sqdist(dims, ds.x(a), ds.x(b))))
            .collect();
        CachedKoh { model, fx, ft_rr, dxx }
    }

    pub fn model(&self) -> &'a KohModel {
        self.model
    }

    pub fn assemble(&self, phi: &[f64]) -> JointMoments {
        let model = self.model;
        let ds = model.dataset();
        let lay = model.layout();
        let n = ds.n();
        let m1 = ds.n_obs();
        let eta_f = lay.eta_f(phi);
        let eta_d = lay.eta_delta(phi);
        let sigma2 = lay.sigma(phi) * lay.sigma(phi);
        let jitter = model.spec().run_jitter_rel * eta_f;
        let theta = lay.theta(phi);

        let inv_f: Vec<f64> = lay.ls_f(phi).iter().map(|l| 1.0 / (l * l)).collect();
        let inv_d: Vec<f64> = lay.ls_delta(phi).iter().map(|l| 1.0 / (l * l)).collect();
        let nfx = lay.f_x_slots.len();

        // theta-to-run squared distances per t-slot, shared by every
        // observation row
        let tv: Vec<Vec<f64>> = lay
            .f_t_slots
            .iter()
            .map(|dims| {
                (0..ds.n_runs())
                    .map(|r| {
                        let t = ds.t(m1 + r).unwrap();
                        dims.iter()
                            .map(|&d| {
                                let dd = theta[d] - t[d];
                                dd * dd
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();

        let mean = DVector::from_iterator(n, (0..n).map(|i| model.mean_entry(phi, i)));
        let mut cov = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let mut s = 0.0;
                for (si, m) in self.fx.iter().enumerate() {
                    s += m[(a, b)] * inv_f[si];
                }
                let a_obs = a < m1;
                let b_obs = b < m1;
                for (si, rr) in self.ft_rr.iter().enumerate() {
                    let d2 = match (a_obs, b_obs) {
                        (true, true) => 0.0,
                        (true, false) => tv[si][b - m1],
                        (false, true) => tv[si][a - m1],
                        (false, false) => rr[(a - m1, b - m1)],
                    };
                    s += d2 * inv_f[nfx + si];
                }
                let mut k = eta_f * (-0.5 * s).exp();
                if a_obs && b_obs {
                    let mut sd = 0.0;
                    for (si, m) in self.dxx.iter().enumerate() {
                        sd += m[(a, b)] * inv_d[si];
                    }
                    k += eta_d * (-0.5 * sd).exp();
                    if a == b {
                        k += sigma2;
                    }
                } else if a == b {
                    k += jitter;
                }
                cov[(a, b)] = k;
                cov[(b, a)] = k;
            }
        }
        JointMoments { mean, cov }
    }

    pub fn log_likelihood(&self, phi: &[f64]) -> Result<f64> {
        let moments = self.assemble(phi);
        let ds = self.model.dataset();
        let d = ds.values();
        let mean: Vec<f64> = moments.mean.iter().copied().collect();
        linalg::mvn_logpdf(
            &d,
            &mean,
            moments.cov,
            self.model.base_jitter(phi),
            "joint likelihood",
        )
        .map_err(|e| attach_phi(e, phi))
    }
}

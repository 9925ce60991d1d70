//! Vine-copula decomposition of the joint Gaussian likelihood.
//!
//! A regular vine rewrites an n-dimensional log-density as a sum of
//! bivariate copula terms, one per conditioned pair, plus reweighted
//! univariate marginals. Two array structures are supported: the path
//! ("d") vine pairs neighbours at increasing distance, the star ("c")
//! vine pairs a root coordinate with everything else. Truncating at level
//! `l` keeps only pairs whose conditioning set has fewer than `l` members
//! and reweights the marginals so every coordinate is still reconstructed
//! exactly once; the result is a sum of `l(2n-l-1)/2` terms, each touching
//! at most `l + 1` data rows, which is what makes single-term stochastic
//! gradients cheap.
//!
//! All indices here are 0-based row positions into the stacked data
//! vector; size-l conditioning sets mean trees 1..=l of the vine.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::linalg::cholesky_with_retry;
use crate::model::{JointMoments, KohModel};
use crate::special::{normal_cdf, normal_logpdf, normal_quantile};
use crate::{Error, Result};

/// Array structure of the vine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VineKind {
    /// Path structure: tree j pairs (i, i+j) given the coordinates between.
    D,
    /// Star structure: tree j pairs (j, j+i) given coordinates before j.
    C,
}

/// One conditioned pair: the copula couples `first` and `second` given the
/// rows in `conditioning`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    pub first: usize,
    pub second: usize,
    pub conditioning: Vec<usize>,
}

/// Number of pair terms in a level-l truncation of an n-dimensional vine.
pub fn pair_count(n: usize, l: usize) -> Result<usize> {
    check_level(n, l)?;
    Ok(l * (2 * n - l - 1) / 2)
}

fn check_level(n: usize, l: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::domain(format!("vine needs n >= 2, got {n}")));
    }
    if l < 1 || l > n - 1 {
        return Err(Error::domain(format!(
            "truncation level {l} outside 1..={} for n = {n}",
            n - 1
        )));
    }
    Ok(())
}

/// Maps a rank in 0..pair_count(n, l) to its pair, tree-major: all tree-1
/// pairs in increasing position, then tree 2, and so on. The inverse of
/// this enumeration is what makes a uniform rank draw a uniform pair draw.
pub fn decode_pair(kind: VineKind, n: usize, l: usize, rank: usize) -> Result<PairIndex> {
    let total = pair_count(n, l)?;
    if rank >= total {
        return Err(Error::domain(format!("pair rank {rank} outside 0..{total}")));
    }
    let mut j = 1;
    let mut r = rank;
    while r >= n - j {
        r -= n - j;
        j += 1;
    }
    // r is now the 0-based offset within tree j
    Ok(match kind {
        VineKind::D => PairIndex {
            first: r,
            second: r + j,
            conditioning: (r + 1..r + j).collect(),
        },
        VineKind::C => PairIndex {
            first: j - 1,
            second: j + r,
            conditioning: (0..j - 1).collect(),
        },
    })
}

/// Margin reconstruction weight of 0-based coordinate `m` in a level-l
/// d-vine: the number of retained pairs containing it. Each pair term
/// carries 1/weight of each endpoint's marginal, so summed over all pairs
/// every marginal appears exactly once.
pub fn margin_weight_d(m: usize, n: usize, l: usize) -> Result<f64> {
    check_level(n, l)?;
    if m >= n {
        return Err(Error::domain(format!("margin {m} outside 0..{n}")));
    }
    let m1 = (m + 1) as i64; // the counting argument is 1-based
    let (n, l) = (n as i64, l as i64);
    let mut w = 2 * l;
    if m1 <= l {
        w -= l + 1 - m1;
    }
    if m1 > n - l {
        w -= l - n + m1;
    }
    Ok(w as f64)
}

/// Margin weights (first, second) for a level-l c-vine pair. The root
/// coordinate of every tree touches all n-1 others; a leaf coordinate is
/// touched once per tree it survives into.
pub fn margin_weights_c(pair: &PairIndex, n: usize, l: usize) -> Result<(f64, f64)> {
    check_level(n, l)?;
    let second1 = (pair.second + 1) as i64;
    let (n, l) = (n as i64, l as i64);
    let w_first = (n - 1) as f64;
    let w_second = (if second1 <= l { n - 1 - l } else { 0 } + l) as f64;
    Ok((w_first, w_second))
}

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many times an extreme uniform or correlation was pulled back into
/// the open interval since the last reset. A nonzero count flags that some
/// conditional CDFs underflowed, not that anything failed.
pub fn clamp_event_count() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_clamp_event_count() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

const UNIT_EPS: f64 = 1e-12;

/// Pulls a probability into [1e-12, 1 - 1e-12], counting the event.
/// Conditional CDFs of far-out residuals underflow to exactly 0 or 1 in
/// f64; the quantile of a clamped value stays finite (~ +-7.03) and the
/// diagnostic counter records that it happened.
fn clamp_unit(u: f64) -> f64 {
    if u < UNIT_EPS {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        UNIT_EPS
    } else if u > 1.0 - UNIT_EPS {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        1.0 - UNIT_EPS
    } else {
        u
    }
}

fn clamp_rho(rho: f64) -> f64 {
    if rho.abs() > 1.0 - UNIT_EPS {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        (1.0 - UNIT_EPS).copysign(rho)
    } else {
        rho
    }
}

fn check_unit(u: f64, name: &str) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("{name} = {u} outside the open unit interval")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::domain(format!("correlation {rho} outside (-1, 1)")));
    }
    Ok(())
}

/// Log-density of the bivariate Gaussian copula with correlation `rho` at
/// uniforms (u_i, u_j).
pub fn gauss_copula_logdensity(u_i: f64, u_j: f64, rho: f64) -> Result<f64> {
    check_unit(u_i, "u_i")?;
    check_unit(u_j, "u_j")?;
    check_rho(rho)?;
    Ok(gauss_copula_logdensity_clamped(u_i, u_j, rho))
}

fn gauss_copula_logdensity_clamped(u_i: f64, u_j: f64, rho: f64) -> f64 {
    let wi = normal_quantile(clamp_unit(u_i));
    let wj = normal_quantile(clamp_unit(u_j));
    let r2 = rho * rho;
    let om = 1.0 - r2;
    -0.5 * om.ln() - (r2 * (wi * wi + wj * wj) - 2.0 * rho * wi * wj) / (2.0 * om)
}

/// Conditional distribution function of the Gaussian pair copula,
/// h(u_i | u_j; rho) = P(U_i <= u_i | U_j = u_j).
pub fn h_function(u_i: f64, u_j: f64, rho: f64) -> Result<f64> {
    check_unit(u_i, "u_i")?;
    check_unit(u_j, "u_j")?;
    check_rho(rho)?;
    let wi = normal_quantile(clamp_unit(u_i));
    let wj = normal_quantile(clamp_unit(u_j));
    Ok(normal_cdf((wi - rho * wj) / (1.0 - rho * rho).sqrt()))
}

/// Conditional mean/variance structure of two targets given the rest.
/// Input layout: position 0 and 1 are the targets, positions 2.. carry the
/// conditioning values in `data[2..]`.
struct PairConditional {
    mean_f: f64,
    mean_s: f64,
    var_f: f64,
    var_s: f64,
    cov_fs: f64,
}

fn condition_pair(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    data: &[f64],
    jitter: f64,
) -> Result<PairConditional> {
    let m = mu.len();
    if m == 2 {
        return Ok(PairConditional {
            mean_f: mu[0],
            mean_s: mu[1],
            var_f: cov[(0, 0)],
            var_s: cov[(1, 1)],
            cov_fs: cov[(0, 1)],
        });
    }
    let nb = m - 2;
    let kbb = cov.view((2, 2), (nb, nb)).into_owned();
    let chol = cholesky_with_retry(kbb, jitter, "pair conditioning")?;

    let mut resid = DVector::from_iterator(nb, (2..m).map(|p| data[p] - mu[p]));
    chol.solve_mut(&mut resid);
    let kf = cov.view((0, 2), (1, nb)).transpose().into_owned();
    let ks = cov.view((1, 2), (1, nb)).transpose().into_owned();
    let mean_f = mu[0] + kf.dot(&resid);
    let mean_s = mu[1] + ks.dot(&resid);

    let mut sf = kf.clone();
    chol.solve_mut(&mut sf);
    let mut ss = ks.clone();
    chol.solve_mut(&mut ss);
    Ok(PairConditional {
        mean_f,
        mean_s,
        var_f: cov[(0, 0)] - kf.dot(&sf),
        var_s: cov[(1, 1)] - ks.dot(&ss),
        cov_fs: cov[(0, 1)] - kf.dot(&ss),
    })
}

/// P(component `target` <= its observed value | components `given` pinned
/// at theirs), under the assembled joint moments.
pub fn gaussian_conditional_cdf(
    target: usize,
    given: &[usize],
    values: &[f64],
    moments: &JointMoments,
) -> Result<f64> {
    let n = moments.mean.len();
    for &i in std::iter::once(&target).chain(given) {
        if i >= n {
            return Err(Error::domain(format!("index {i} outside 0..{n}")));
        }
    }
    if given.contains(&target) {
        return Err(Error::domain("target cannot be conditioned on itself"));
    }
    // reuse the pair path with a dummy second target
    let idx: Vec<usize> = [target, target].iter().copied().chain(given.iter().copied()).collect();
    let m = idx.len();
    let mu = DVector::from_iterator(m, idx.iter().map(|&i| moments.mean[i]));
    let cov = DMatrix::from_fn(m, m, |p, q| moments.cov[(idx[p], idx[q])]);
    let data: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    let diag_mean = (2..m).map(|p| cov[(p, p)]).sum::<f64>() / (m - 2).max(1) as f64;
    let c = condition_pair(&mu, &cov, &data, 1e-8 * diag_mean.max(1e-12))?;
    if !(c.var_f > 0.0) {
        return Err(Error::numerical("non-positive conditional variance", None));
    }
    Ok(normal_cdf((values[target] - c.mean_f) / c.var_f.sqrt()))
}

/// Partial correlation of components i and j given the set `cond`, from the
/// precision matrix of the corresponding sub-covariance.
pub fn partial_correlation(i: usize, j: usize, cond: &[usize], cov: &DMatrix<f64>) -> Result<f64> {
    if i == j || cond.contains(&i) || cond.contains(&j) {
        return Err(Error::domain("partial correlation needs distinct indices"));
    }
    let idx: Vec<usize> = [i, j].iter().copied().chain(cond.iter().copied()).collect();
    let m = idx.len();
    let sub = DMatrix::from_fn(m, m, |p, q| cov[(idx[p], idx[q])]);
    let diag_mean = sub.diagonal().sum() / m as f64;
    let chol = cholesky_with_retry(sub, 1e-8 * diag_mean.max(1e-12), "partial correlation")?;
    let prec = chol.inverse();
    let denom = (prec[(0, 0)] * prec[(1, 1)]).sqrt();
    Ok(-prec[(0, 1)] / denom)
}

/// The two weighted marginal pieces and the copula piece of one pair term.
#[derive(Debug, Clone, Copy)]
pub struct PairParts {
    pub copula: f64,
    pub margin_first: f64,
    pub margin_second: f64,
}

impl PairParts {
    pub fn total(&self) -> f64 {
        self.copula + self.margin_first + self.margin_second
    }
}

/// Evaluates one pair term of the level-l vine decomposition: the
/// conditional Gaussian copula of the pair given its conditioning rows,
/// plus both endpoint marginals scaled by their reconstruction weights.
/// Touches only the |D| + 2 rows of the pair, never the full matrix.
pub fn pair_term_parts(
    model: &KohModel,
    phi: &[f64],
    kind: VineKind,
    level: usize,
    pair: &PairIndex,
) -> Result<PairParts> {
    let ds = model.dataset();
    let n = ds.n();
    check_level(n, level)?;

    let idx: Vec<usize> = [pair.first, pair.second]
        .iter()
        .copied()
        .chain(pair.conditioning.iter().copied())
        .collect();
    let (mu, cov) = model.moments_subset(phi, &idx);
    let data: Vec<f64> = idx.iter().map(|&i| ds.value(i)).collect();

    let c = condition_pair(&mu, &cov, &data, model.base_jitter(phi))?;
    if !(c.var_f > 0.0 && c.var_s > 0.0) {
        return Err(Error::numerical(
            "non-positive conditional variance in pair term",
            Some(phi),
        ));
    }
    let rho = clamp_rho(c.cov_fs / (c.var_f * c.var_s).sqrt());
    let u_f = clamp_unit(normal_cdf((data[0] - c.mean_f) / c.var_f.sqrt()));
    let u_s = clamp_unit(normal_cdf((data[1] - c.mean_s) / c.var_s.sqrt()));
    let copula = gauss_copula_logdensity_clamped(u_f, u_s, rho);

    let (w_f, w_s) = match kind {
        VineKind::D => (
            margin_weight_d(pair.first, n, level)?,
            margin_weight_d(pair.second, n, level)?,
        ),
        VineKind::C => margin_weights_c(pair, n, level)?,
    };
    let lp_f = normal_logpdf(data[0], mu[0], cov[(0, 0)].sqrt());
    let lp_s = normal_logpdf(data[1], mu[1], cov[(1, 1)].sqrt());
    Ok(PairParts {
        copula,
        margin_first: lp_f / w_f,
        margin_second: lp_s / w_s,
    })
}

/// Sum of all level-l pair terms: the truncated-vine approximation of the
/// joint log-likelihood, exact at l = n - 1.
pub fn vine_loglik(model: &KohModel, phi: &[f64], kind: VineKind, level: usize) -> Result<f64> {
    let n = model.dataset().n();
    let total = pair_count(n, level)?;
    let mut acc = 0.0;
    for rank in 0..total {
        let pair = decode_pair(kind, n, level, rank)?;
        acc += pair_term_parts(model, phi, kind, level, &pair)?.total();
    }
    Ok(acc)
}

/// Untruncated vine log-likelihood, equal to the exact joint Gaussian
/// log-density. Cost grows as n^5, so it is gated to small n; it exists to
/// validate the decomposition, not to fit anything.
pub fn full_vine_loglik(model: &KohModel, phi: &[f64], kind: VineKind) -> Result<f64> {
    const MAX_EXACT_N: usize = 64;
    let n = model.dataset().n();
    if n > MAX_EXACT_N {
        return Err(Error::domain(format!(
            "untruncated vine evaluation is O(n^5); n = {n} exceeds the {MAX_EXACT_N} guard"
        )));
    }
    vine_loglik(model, phi, kind, n - 1)
}

/// Distribution of the conditioning-set size of a uniformly drawn pair:
/// the pmf over sizes 0..l and its expectation. The expectation stays
/// below l - 1 and approaches (l - 1) * 3n / (3 * 2n) -> small even for
/// huge n, which is why the per-draw cost is effectively O(l^3).
pub fn conditioning_cardinality(n: usize, l: usize) -> Result<(Vec<f64>, f64)> {
    let total = pair_count(n, l)? as f64;
    let pmf: Vec<f64> = (0..l).map(|i| (n - i - 1) as f64 / total).collect();
    let (nf, lf) = (n as f64, l as f64);
    let expect = (lf - 1.0) * (3.0 * nf - 2.0 * lf - 2.0) / (3.0 * (2.0 * nf - lf - 1.0));
    Ok((pmf, expect))
}

//! Space-filling input designs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

/// Latin hypercube sample: `count` points in the box given by per-dimension
/// bounds, one point per stratum in every dimension, jittered within its
/// stratum.
pub fn latin_hypercube<R: Rng + ?Sized>(
    count: usize,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 || bounds.is_empty() {
        return Err(Error::domain("need a positive point count and at least one dimension"));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::domain(format!("bad bounds ({lo}, {hi})")));
        }
    }
    let mut points = vec![vec![0.0; bounds.len()]; count];
    let mut strata: Vec<usize> = (0..count).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(rng);
        let width = (hi - lo) / count as f64;
        for (p, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            p[d] = lo + (s as f64 + u) * width;
        }
    }
    Ok(points)
}

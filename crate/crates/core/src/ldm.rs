//! Semi-empirical nuclear binding energies: the four-term liquid drop
//! formula, its least-squares fit, and construction of a calibration
//! dataset that pairs measured binding energies with formula evaluations
//! over a space-filling sweep of the coefficients.

use std::io::{BufRead, Write as IoWrite};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, ModelRun, Observation};
use crate::design::latin_hypercube;
use crate::model::{BasisFn, FMean, GpSpec, Grouping};
use crate::variational::PriorSpec;
use crate::{Error, Result};

/// One measured nuclide: proton count, neutron count, binding energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuclideRecord {
    pub z: u32,
    pub n: u32,
    pub y: f64,
}

/// Coefficient names in model order: volume, surface, symmetry, Coulomb.
pub const COEFF_NAMES: [&str; 4] = ["a_vol", "a_surf", "a_sym", "a_c"];

/// Coefficient sweep box for the run design.
pub const COEFF_BOUNDS: [(f64, f64); 4] = [
    (15.008, 15.829),
    (15.628, 18.193),
    (21.435, 23.505),
    (0.665, 0.72),
];

/// Central coefficient values used for synthetic data.
pub const COEFF_CENTER: [f64; 4] = [15.42, 16.91, 22.47, 0.69];

/// The four regressors of the drop formula, signs folded in so that the
/// binding energy is their dot product with the coefficients.
fn drop_basis(z: u32, n: u32) -> [f64; 4] {
    let zf = z as f64;
    let nf = n as f64;
    let a = zf + nf;
    [
        a,
        -a.powf(2.0 / 3.0),
        -(nf - zf) * (nf - zf) / a,
        -zf * (zf - 1.0) / a.cbrt(),
    ]
}

/// Liquid drop binding energy at the given coefficients.
pub fn ldm_binding_energy(z: u32, n: u32, coeffs: &[f64; 4]) -> f64 {
    drop_basis(z, n)
        .iter()
        .zip(coeffs)
        .map(|(b, c)| b * c)
        .sum()
}

fn check_record(r: &NuclideRecord) -> Result<()> {
    if r.z == 0 || r.n == 0 {
        return Err(Error::domain(format!("nuclide ({}, {}) needs Z >= 1 and N >= 1", r.z, r.n)));
    }
    if !r.y.is_finite() {
        return Err(Error::domain(format!("binding energy {} for ({}, {})", r.y, r.z, r.n)));
    }
    Ok(())
}

/// Ordinary least squares over the four drop terms.
#[derive(Debug, Clone)]
pub struct LsFit {
    pub coeffs: [f64; 4],
    pub ses: [f64; 4],
    pub rmse: f64,
}

/// Fits the drop formula by least squares and reports coefficient
/// standard errors from the usual unbiased residual variance.
pub fn ls_fit(records: &[NuclideRecord]) -> Result<LsFit> {
    let m = records.len();
    if m < 5 {
        return Err(Error::domain(format!(
            "need at least 5 records to fit 4 coefficients with error bars, got {m}"
        )));
    }
    for r in records {
        check_record(r)?;
    }
    let x = DMatrix::from_fn(m, 4, |i, j| drop_basis(records[i].z, records[i].n)[j]);
    let y = DVector::from_iterator(m, records.iter().map(|r| r.y));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = match xtx.clone().cholesky() {
        Some(c) => c,
        None => return Err(collinearity_report(&x)),
    };
    let beta = chol.solve(&xty);
    let resid = &y - &x * &beta;
    let rss: f64 = resid.dot(&resid);
    let sigma2 = rss / (m - 4) as f64;
    let xtx_inv = chol.inverse();
    let mut coeffs = [0.0; 4];
    let mut ses = [0.0; 4];
    for j in 0..4 {
        coeffs[j] = beta[j];
        ses[j] = (sigma2 * xtx_inv[(j, j)]).max(0.0).sqrt();
    }
    Ok(LsFit { coeffs, ses, rmse: (rss / m as f64).sqrt() })
}

fn collinearity_report(x: &DMatrix<f64>) -> Error {
    let m = x.nrows() as f64;
    let mut guilty = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            let ca = x.column(a);
            let cb = x.column(b);
            let ma = ca.sum() / m;
            let mb = cb.sum() / m;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for i in 0..x.nrows() {
                cov += (ca[i] - ma) * (cb[i] - mb);
                va += (ca[i] - ma) * (ca[i] - ma);
                vb += (cb[i] - mb) * (cb[i] - mb);
            }
            let denom = (va * vb).sqrt();
            let r = if denom > 0.0 { cov / denom } else { 1.0 };
            if r.abs() > 0.999 {
                guilty.push(format!("{}~{}", COEFF_NAMES[a], COEFF_NAMES[b]));
            }
        }
    }
    let detail = if guilty.is_empty() {
        "design matrix is rank deficient".to_string()
    } else {
        format!("design matrix is rank deficient; near-collinear terms: {}", guilty.join(", "))
    };
    Error::domain(detail)
}

/// Reads nuclide records from CSV with header Z,N,y.
pub fn read_nuclide_csv<R: BufRead>(reader: R, path: &str) -> Result<Vec<NuclideRecord>> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".to_string()))?;
    let header = header?;
    if header.trim_end() != "Z,N,y" {
        return Err(err(1, format!("expected header 'Z,N,y', got '{header}'")));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 3 {
            return Err(err(lineno, format!("{} fields, expected 3", fields.len())));
        }
        let z: u32 = fields[0].parse().map_err(|e| err(lineno, format!("bad Z: {e}")))?;
        let n: u32 = fields[1].parse().map_err(|e| err(lineno, format!("bad N: {e}")))?;
        let y: f64 = fields[2].parse().map_err(|e| err(lineno, format!("bad y: {e}")))?;
        let rec = NuclideRecord { z, n, y };
        check_record(&rec).map_err(|e| err(lineno, e.to_string()))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(err(2, "no records".to_string()));
    }
    Ok(out)
}

pub fn write_nuclide_csv<W: IoWrite>(out: &mut W, records: &[NuclideRecord]) -> Result<()> {
    writeln!(out, "Z,N,y")?;
    for r in records {
        writeln!(out, "{},{},{}", r.z, r.n, r.y)?;
    }
    Ok(())
}

/// Calibration dataset: the measured nuclides as observations, plus runs
/// that evaluate the drop formula over a Latin hypercube coefficient
/// sweep. Run inputs come from duplicating the record list until it
/// covers the run count and shuffling the whole expanded list, so every
/// nuclide appears a near-equal number of times in random order.
pub fn build_ldm_dataset(records: &[NuclideRecord], n_runs: usize, seed: u64) -> Result<Dataset> {
    if records.is_empty() || n_runs == 0 {
        return Err(Error::domain("need records and a positive run count"));
    }
    for r in records {
        check_record(r)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas = latin_hypercube(n_runs, &COEFF_BOUNDS, &mut rng)?;
    let copies = n_runs.div_ceil(records.len());
    let mut order: Vec<usize> = (0..records.len() * copies)
        .map(|i| i % records.len())
        .collect();
    order.shuffle(&mut rng);
    order.truncate(n_runs);

    let obs: Vec<Observation> = records
        .iter()
        .map(|r| Observation { x: vec![r.z as f64, r.n as f64], y: r.y })
        .collect();
    let runs: Vec<ModelRun> = thetas
        .into_iter()
        .zip(&order)
        .map(|(t, &idx)| {
            let r = &records[idx];
            let coeffs = [t[0], t[1], t[2], t[3]];
            ModelRun {
                x: vec![r.z as f64, r.n as f64],
                z: ldm_binding_energy(r.z, r.n, &coeffs),
                t,
            }
        })
        .collect();
    Dataset::new(obs, runs)
}

/// Model structure for the binding-energy calibration: the emulator mean
/// is the drop formula itself (linear in the four coefficients), so the
/// GP carries only deviations from it, and every input and coefficient
/// direction gets its own lengthscale.
pub fn ldm_spec() -> GpSpec {
    GpSpec::new(
        FMean::ThetaBasis(vec![
            BasisFn::DropVolume,
            BasisFn::DropSurface,
            BasisFn::DropSymmetry,
            BasisFn::DropCoulomb,
        ]),
        0.0,
        Grouping::PerDim,
        Grouping::PerDim,
    )
}

/// Priors for the 15 latent coordinates: informative normals on the four
/// coefficients, concentrated scales elsewhere.
pub fn ldm_priors() -> Vec<PriorSpec> {
    let mut p = vec![
        PriorSpec::Normal { mean: 15.42, sd: 0.2025 },
        PriorSpec::Normal { mean: 16.91, sd: 0.645 },
        PriorSpec::Normal { mean: 22.47, sd: 0.525 },
        PriorSpec::Normal { mean: 0.69, sd: 0.015 },
        PriorSpec::Gamma { shape: 110.0, rate: 10.0 },
    ];
    for _ in 0..6 {
        p.push(PriorSpec::Gamma { shape: 10.0, rate: 1.0 });
    }
    p.push(PriorSpec::Gamma { shape: 10.0, rate: 1.0 });
    p.push(PriorSpec::Gamma { shape: 10.0, rate: 1.0 });
    p.push(PriorSpec::Gamma { shape: 10.0, rate: 1.0 });
    p.push(PriorSpec::Gamma { shape: 2.0, rate: 1.0 });
    p
}

/// Synthetic measured nuclides: the drop formula at the central
/// coefficients plus a smooth structured residual and noise. The residual
/// wavelengths sit at the correlation length the discrepancy priors favor,
/// so the GP term can absorb it; a pure least-squares fit cannot.
pub fn synthetic_records(count: usize, seed: u64) -> Vec<NuclideRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = rng.random_range(10u32..=90);
            let n = rng.random_range(z..=z + z / 2 + 8);
            let zf = z as f64;
            let nf = n as f64;
            let structured = 3.0 * (zf / 9.0).sin() + 2.0 * (nf / 12.0).cos();
            let noise: f64 = StandardNormal.sample(&mut rng);
            NuclideRecord {
                z,
                n,
                y: ldm_binding_energy(z, n, &COEFF_CENTER) + structured + 1.5 * noise,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KohModel;

    #[test]
    fn binding_energy_reference_values() {
        let cases: [(u32, u32, f64); 4] = [
            (28, 34, 546.3018983079683222),
            (1, 1, 3.9970482112177468819),
            (50, 70, 1021.3677745688541111),
            (82, 126, 1631.0818500435707727),
        ];
        for (z, n, want) in cases {
            let got = ldm_binding_energy(z, n, &COEFF_CENTER);
            assert!(
                (got - want).abs() < 1e-10 * want.abs(),
                "E({z},{n}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn lightest_bound_case_has_no_asymmetry_or_coulomb() {
        let got = ldm_binding_energy(1, 1, &COEFF_CENTER);
        let want = 2.0 * COEFF_CENTER[0] - COEFF_CENTER[1] * 2.0_f64.powf(2.0 / 3.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn emulator_mean_basis_is_the_formula() {
        let spec = ldm_spec();
        let basis = match &spec.f_mean {
            FMean::ThetaBasis(b) => b.clone(),
            FMean::Zero => panic!("mean must carry the formula"),
        };
        let mean = FMean::ThetaBasis(basis);
        for &(z, n) in &[(1u32, 1u32), (8, 8), (28, 34), (50, 70), (82, 126)] {
            let x = [z as f64, n as f64];
            let got = mean.eval(&x, &COEFF_CENTER);
            let want = ldm_binding_energy(z, n, &COEFF_CENTER);
            assert_eq!(got.to_bits(), want.to_bits(), "({z},{n})");
        }
    }

    #[test]
    fn ls_recovers_exact_coefficients() {
        let truth = [15.3, 16.5, 22.0, 0.7];
        let records: Vec<NuclideRecord> = (0..40)
            .map(|i| {
                let z = 10 + 2 * i;
                let n = z + i;
                NuclideRecord { z, n, y: ldm_binding_energy(z, n, &truth) }
            })
            .collect();
        let fit = ls_fit(&records).unwrap();
        for j in 0..4 {
            assert!(
                (fit.coeffs[j] - truth[j]).abs() < 1e-7,
                "coefficient {j}: {} vs {}",
                fit.coeffs[j],
                truth[j]
            );
        }
        assert!(fit.rmse < 1e-7);
    }

    #[test]
    fn duplicating_records_shrinks_errors_by_the_exact_ratio() {
        let records = synthetic_records(30, 9);
        let fit1 = ls_fit(&records).unwrap();
        let doubled: Vec<NuclideRecord> =
            records.iter().chain(records.iter()).copied().collect();
        let fit2 = ls_fit(&doubled).unwrap();
        let m = records.len() as f64;
        let want = ((m - 4.0) / (2.0 * m - 4.0)).sqrt();
        for j in 0..4 {
            assert!(
                (fit2.coeffs[j] - fit1.coeffs[j]).abs() < 1e-8,
                "coefficients moved at {j}"
            );
            let ratio = fit2.ses[j] / fit1.ses[j];
            assert!((ratio - want).abs() < 1e-10, "se ratio {ratio} vs {want}");
        }
        assert!((fit2.rmse - fit1.rmse).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_names_collinear_terms() {
        // a single nuclide repeated gives identical design rows
        let records = vec![NuclideRecord { z: 28, n: 34, y: 540.0 }; 10];
        let err = ls_fit(&records).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank deficient"), "{msg}");
        assert!(msg.contains("a_vol~a_surf"), "{msg}");
    }

    #[test]
    fn too_few_records_is_an_error() {
        let records = synthetic_records(4, 0);
        assert!(ls_fit(&records).is_err());
    }

    #[test]
    fn nuclide_csv_roundtrip_and_errors() {
        let records = synthetic_records(12, 3);
        let mut buf = Vec::new();
        write_nuclide_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("Z,N,y\n"));
        let back = read_nuclide_csv(std::io::BufReader::new(&buf[..]), "mem").unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            assert_eq!((a.z, a.n), (b.z, b.n));
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }

        let bad = b"Z,N,y\n28,34,not_a_number\n";
        let err = read_nuclide_csv(std::io::BufReader::new(&bad[..]), "f.csv").unwrap_err();
        assert!(err.to_string().contains("f.csv:2"), "{err}");

        let bad = b"A,B,c\n1,1,1\n";
        assert!(read_nuclide_csv(std::io::BufReader::new(&bad[..]), "f.csv").is_err());
    }

    #[test]
    fn built_dataset_pairs_formula_runs_with_measured_nuclides() {
        let records = synthetic_records(25, 7);
        let ds = build_ldm_dataset(&records, 60, 1).unwrap();
        assert_eq!(ds.n_obs(), 25);
        assert_eq!(ds.n_runs(), 60);
        assert_eq!(ds.d_x(), 2);
        assert_eq!(ds.d_t(), 4);
        let known: std::collections::HashSet<(u64, u64)> = records
            .iter()
            .map(|r| (r.z as u64, r.n as u64))
            .collect();
        let mut uses: std::collections::HashMap<(u64, u64), usize> = Default::default();
        for i in 0..ds.n_runs() {
            let row = ds.n_obs() + i;
            let x = ds.x(row);
            let t = ds.t(row).unwrap();
            assert!(known.contains(&(x[0] as u64, x[1] as u64)));
            *uses.entry((x[0] as u64, x[1] as u64)).or_default() += 1;
            for (d, &(lo, hi)) in COEFF_BOUNDS.iter().enumerate() {
                assert!(t[d] > lo && t[d] < hi, "coefficient {d} = {} escaped", t[d]);
            }
            let coeffs = [t[0], t[1], t[2], t[3]];
            let want = ldm_binding_energy(x[0] as u32, x[1] as u32, &coeffs);
            assert_eq!(ds.value(row).to_bits(), want.to_bits());
        }
        let copies = 60usize.div_ceil(records.len());
        assert!(uses.values().all(|&c| c <= copies), "a nuclide was over-duplicated");
    }

    #[test]
    fn layout_has_fifteen_coordinates_matching_the_priors() {
        let records = synthetic_records(10, 2);
        let ds = build_ldm_dataset(&records, 20, 0).unwrap();
        let model = KohModel::new(ds, ldm_spec()).unwrap();
        assert_eq!(model.layout().dim(), 15);
        let priors = ldm_priors();
        assert_eq!(priors.len(), 15);
        for (j, p) in priors.iter().enumerate() {
            let ok = match model.layout().domain(j) {
                crate::model::Domain::Real => matches!(p, PriorSpec::Normal { .. }),
                crate::model::Domain::Positive => matches!(p, PriorSpec::Gamma { .. }),
            };
            assert!(ok, "coordinate {j} ({})", model.layout().name(j));
        }
        assert_eq!(model.layout().names()[..4].to_vec(), vec!["theta1", "theta2", "theta3", "theta4"]);
    }
}

//! Calibration datasets: field observations paired with simulator runs,
//! plus the CSV formats the command-line harness reads and writes.
//!
//! Observation files carry a `x1,..,xd,y` header; run files carry
//! `x1,..,xd,t1,..,tk,z`. Parsing is strict: the header must match the
//! expected shape exactly and every cell must be a finite float, with
//! errors reported by 1-based line number.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// A field measurement y at controllable input x.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

/// A simulator evaluation z at input x and calibration setting t.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub z: f64,
}

/// Joint dataset ordered observations-first, the row convention every other
/// module relies on: row i < m1 is an observation, row i >= m1 a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    obs: Vec<Observation>,
    runs: Vec<ModelRun>,
    d_x: usize,
    d_t: usize,
}

impl Dataset {
    pub fn new(obs: Vec<Observation>, runs: Vec<ModelRun>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::domain("dataset needs at least one observation"));
        }
        let d_x = obs[0].x.len();
        if d_x == 0 {
            return Err(Error::domain("observations need at least one input"));
        }
        let d_t = runs.first().map_or(0, |r| r.t.len());
        for (i, o) in obs.iter().enumerate() {
            if o.x.len() != d_x {
                return Err(Error::domain(format!(
                    "observation {i} has {} inputs, expected {d_x}",
                    o.x.len()
                )));
            }
            if !o.y.is_finite() || o.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("observation {i} has non-finite values")));
            }
        }
        for (i, r) in runs.iter().enumerate() {
            if r.x.len() != d_x || r.t.len() != d_t {
                return Err(Error::domain(format!(
                    "run {i} has shape ({}, {}), expected ({d_x}, {d_t})",
                    r.x.len(),
                    r.t.len()
                )));
            }
            if !r.z.is_finite()
                || r.x.iter().any(|v| !v.is_finite())
                || r.t.iter().any(|v| !v.is_finite())
            {
                return Err(Error::domain(format!("run {i} has non-finite values")));
            }
        }
        if !runs.is_empty() && d_t == 0 {
            return Err(Error::domain("runs need at least one calibration input"));
        }
        Ok(Dataset { obs, runs, d_x, d_t })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn runs(&self) -> &[ModelRun] {
        &self.runs
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// Total stacked length m1 + m2.
    pub fn n(&self) -> usize {
        self.obs.len() + self.runs.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn is_observation(&self, row: usize) -> bool {
        row < self.obs.len()
    }

    /// Measured value of the stacked data vector at `row`.
    pub fn value(&self, row: usize) -> f64 {
        if row < self.obs.len() {
            self.obs[row].y
        } else {
            self.runs[row - self.obs.len()].z
        }
    }

    /// Controllable input of the row.
    pub fn x(&self, row: usize) -> &[f64] {
        if row < self.obs.len() {
            &self.obs[row].x
        } else {
            &self.runs[row - self.obs.len()].x
        }
    }

    /// Calibration input of a run row; None for observation rows, whose
    /// calibration input is the latent theta itself.
    pub fn t(&self, row: usize) -> Option<&[f64]> {
        if row < self.obs.len() {
            None
        } else {
            Some(&self.runs[row - self.obs.len()].t)
        }
    }

    /// The full stacked data vector d = (y, z).
    pub fn values(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.value(i)).collect()
    }
}

fn parse_cell(path: &str, line: usize, cell: &str, col: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("column {col}: cannot parse {cell:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("column {col}: non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

fn split_header(header: &str) -> Vec<String> {
    header.trim().split(',').map(|s| s.trim().to_string()).collect()
}

fn expect_header(path: &str, got: &[String], want: &[String]) -> Result<()> {
    if got != want {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header {:?}, expected {:?}", got.join(","), want.join(",")),
        });
    }
    Ok(())
}

fn numbered_header(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

/// Reads an observation CSV (`x1,..,xd,y`), inferring d from the header.
pub fn read_observations_csv(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines();
    let header = split_header(lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?);
    if header.len() < 2 || header.last().map(String::as_str) != Some("y") {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("header {:?}, expected x1,..,xd,y", header.join(",")),
        });
    }
    let d = header.len() - 1;
    let mut want = numbered_header("x", d);
    want.push("y".into());
    expect_header(&pstr, &header, &want)?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno,
                msg: format!("{} cells, expected {}", cells.len(), d + 1),
            });
        }
        let x = (0..d)
            .map(|k| parse_cell(&pstr, lineno, cells[k], &want[k]))
            .collect::<Result<Vec<_>>>()?;
        let y = parse_cell(&pstr, lineno, cells[d], "y")?;
        out.push(Observation { x, y });
    }
    Ok(out)
}

/// Reads a run CSV (`x1,..,xd,t1,..,tk,z`). The split between x and t
/// columns is read off the header names.
pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<ModelRun>> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines();
    let header = split_header(lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?);
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let k = header.iter().skip(d).take_while(|h| h.starts_with('t')).count();
    if d == 0 || k == 0 || header.len() != d + k + 1 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("header {:?}, expected x1,..,xd,t1,..,tk,z", header.join(",")),
        });
    }
    let mut want = numbered_header("x", d);
    want.extend(numbered_header("t", k));
    want.push("z".into());
    expect_header(&pstr, &header, &want)?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + k + 1 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno,
                msg: format!("{} cells, expected {}", cells.len(), d + k + 1),
            });
        }
        let x = (0..d)
            .map(|c| parse_cell(&pstr, lineno, cells[c], &want[c]))
            .collect::<Result<Vec<_>>>()?;
        let t = (d..d + k)
            .map(|c| parse_cell(&pstr, lineno, cells[c], &want[c]))
            .collect::<Result<Vec<_>>>()?;
        let z = parse_cell(&pstr, lineno, cells[d + k], "z")?;
        out.push(ModelRun { x, t, z });
    }
    Ok(out)
}

/// Shortest round-trip float formatting, so emitted CSVs re-ingest losslessly.
fn push_float(buf: &mut String, v: f64) {
    write!(buf, "{v}").expect("write to String");
}

pub fn write_observations_csv(path: impl AsRef<Path>, obs: &[Observation]) -> Result<()> {
    let d = obs.first().map_or(1, |o| o.x.len());
    let mut buf = String::new();
    for i in 1..=d {
        write!(buf, "x{i},").expect("write to String");
    }
    buf.push_str("y\n");
    for o in obs {
        for v in &o.x {
            push_float(&mut buf, *v);
            buf.push(',');
        }
        push_float(&mut buf, o.y);
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_runs_csv(path: impl AsRef<Path>, runs: &[ModelRun]) -> Result<()> {
    let (d, k) = runs.first().map_or((1, 1), |r| (r.x.len(), r.t.len()));
    let mut buf = String::new();
    for i in 1..=d {
        write!(buf, "x{i},").expect("write to String");
    }
    for i in 1..=k {
        write!(buf, "t{i},").expect("write to String");
    }
    buf.push_str("z\n");
    for r in runs {
        for v in r.x.iter().chain(&r.t) {
            push_float(&mut buf, *v);
            buf.push(',');
        }
        push_float(&mut buf, r.z);
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(x: &[f64], y: f64) -> Observation {
        Observation { x: x.to_vec(), y }
    }

    #[test]
    fn stacked_indexing_is_observations_first() {
        let ds = Dataset::new(
            vec![obs(&[0.0, 1.0], 2.0), obs(&[3.0, 4.0], 5.0)],
            vec![ModelRun { x: vec![6.0, 7.0], t: vec![0.5], z: 8.0 }],
        )
        .unwrap();
        assert_eq!(ds.n(), 3);
        assert!(ds.is_observation(1));
        assert!(!ds.is_observation(2));
        assert_eq!(ds.value(1), 5.0);
        assert_eq!(ds.value(2), 8.0);
        assert_eq!(ds.x(2), &[6.0, 7.0]);
        assert_eq!(ds.t(2).unwrap(), &[0.5]);
        assert!(ds.t(0).is_none());
        assert_eq!(ds.values(), vec![2.0, 5.0, 8.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = Dataset::new(vec![obs(&[0.0, 1.0], 2.0), obs(&[3.0], 5.0)], vec![]).unwrap_err();
        assert!(err.to_string().contains("observation 1"));
    }

    #[test]
    fn csv_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let rows = vec![
            obs(&[0.1 + 0.2, 1.0 / 3.0], std::f64::consts::PI),
            obs(&[-1e-17, 2.5e300], -0.0),
        ];
        write_observations_csv(&p, &rows).unwrap();
        let back = read_observations_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.x, b.x);
            assert!(a.y == b.y || (a.y == 0.0 && b.y == 0.0));
        }
    }

    #[test]
    fn runs_csv_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        let rows = vec![ModelRun { x: vec![1.5, -2.0], t: vec![0.25, 0.75, 0.5], z: 42.0 }];
        write_runs_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x1,x2,t1,t2,t3,z\n"));
        assert_eq!(read_runs_csv(&p).unwrap(), rows);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x1,y\n1.0,2.0\noops,3.0\n").unwrap();
        let err = read_observations_csv(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "missing line number: {msg}");
        assert!(msg.contains("oops"));

        std::fs::write(&p, "x1,z\n").unwrap();
        let err = read_observations_csv(&p).unwrap_err();
        assert!(err.to_string().contains(":1:"));
    }

    #[test]
    fn wrong_cell_count_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.csv");
        std::fs::write(&p, "x1,x2,y\n1.0,2.0\n").unwrap();
        let err = read_observations_csv(&p).unwrap_err();
        assert!(err.to_string().contains("2 cells, expected 3"));
    }
}

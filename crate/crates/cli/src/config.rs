//! Flat key=value configuration files, merged under command-line flags.
//!
//! Files hold one `key = value` pair per line, with `#` starting a
//! comment. Unknown keys are rejected outright so a typo cannot silently
//! fall back to a default. Prior overrides use `prior.<coordinate>` keys
//! with `normal(mean, sd)` or `gamma(shape, rate)` values.

use std::collections::BTreeMap;
use std::path::Path;

use vinecal::variational::{InitMode, PriorSpec};
use vinecal::vine::VineKind;
use vinecal::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    "preset",
    "vine",
    "trunc",
    "trunc_max",
    "trunc_tol",
    "variant",
    "samples",
    "cv_samples",
    "tau",
    "eta",
    "eps_div",
    "max_iters",
    "conv_eps",
    "conv_window",
    "seed",
    "trace_stride",
    "init",
    "delta_mean",
    "f_grouping",
    "delta_grouping",
    "mh_iterations",
    "mh_burn_in",
    "mh_thin",
    "mh_init_scale",
    "pred_draws",
];

/// Parsed file contents: raw strings keyed by name.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !(KNOWN_KEYS.contains(&key.as_str()) || key.starts_with("prior.")) {
                return Err(Error::config(format!(
                    "unknown configuration key '{key}' at {path}:{lineno}"
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!(
                    "duplicate configuration key '{key}' at {path}:{lineno}"
                )));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("bad value '{raw}' for '{key}': {e}"))),
        }
    }

    /// Prior overrides keyed by coordinate name.
    pub fn prior_overrides(&self) -> Result<Vec<(String, PriorSpec)>> {
        let mut out = Vec::new();
        for (key, value) in &self.map {
            if let Some(name) = key.strip_prefix("prior.") {
                out.push((name.to_string(), parse_prior(value, key)?));
            }
        }
        Ok(out)
    }
}

/// `normal(mean, sd)` or `gamma(shape, rate)`.
pub fn parse_prior(text: &str, context: &str) -> Result<PriorSpec> {
    let bad = || Error::config(format!("bad prior '{text}' for '{context}': expected normal(mean, sd) or gamma(shape, rate)"));
    let text = text.trim();
    let (family, rest) = text.split_once('(').ok_or_else(bad)?;
    let args = rest.strip_suffix(')').ok_or_else(bad)?;
    let parts: Vec<&str> = args.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let prior = match family.trim() {
        "normal" => PriorSpec::Normal { mean: a, sd: b },
        "gamma" => PriorSpec::Gamma { shape: a, rate: b },
        _ => return Err(bad()),
    };
    prior.validate()?;
    Ok(prior)
}

pub fn parse_vine(text: &str) -> Result<VineKind> {
    match text {
        "d" => Ok(VineKind::D),
        "c" => Ok(VineKind::C),
        other => Err(Error::config(format!("bad vine '{other}': expected 'd' or 'c'"))),
    }
}

pub fn parse_init(text: &str) -> Result<InitMode> {
    match text {
        "prior_match" => Ok(InitMode::PriorMatch),
        "prior_sample" => Ok(InitMode::PriorSample),
        other => Err(Error::config(format!(
            "bad init '{other}': expected 'prior_match' or 'prior_sample'"
        ))),
    }
}

/// Truncation choice: a fixed level or data-driven selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncChoice {
    Level(usize),
    Auto,
}

pub fn parse_trunc(text: &str) -> std::result::Result<TruncChoice, String> {
    if text == "auto" {
        return Ok(TruncChoice::Auto);
    }
    match text.parse::<usize>() {
        Ok(0) => Err("truncation level must be at least 1".to_string()),
        Ok(l) => Ok(TruncChoice::Level(l)),
        Err(_) => Err(format!("expected a positive level or 'auto', got '{text}'")),
    }
}

//! Resolution of run settings from built-in defaults, a `key=value` file and
//! command-line flags, in increasing order of precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Resolved settings for one command. Keys use underscores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses a `key=value` file. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: expected key=value, got '{line}'", idx + 1),
            });
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::Parse { path: path.to_path_buf(), message: format!("line {}: empty key", idx + 1) });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    /// Layers `defaults`, then `SQR_THREADS`, then the config file, then
    /// `flags`. Keys outside `known` are rejected.
    pub fn resolve(
        known: &[&str],
        defaults: &[(&str, &str)],
        config: Option<&Path>,
        flags: &[(&'static str, Option<&String>)],
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, v) in defaults {
            values.insert(k.to_string(), v.to_string());
        }
        if known.contains(&"threads") {
            if let Ok(v) = std::env::var("SQR_THREADS") {
                values.insert("threads".into(), v);
            }
        }
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
            for (k, v) in parse_config(&text, path)? {
                if !known.contains(&k.as_str()) {
                    return Err(CliError::Parse { path: path.to_path_buf(), message: format!("unknown key '{k}'") });
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Settings { values })
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| CliError::Input(format!("missing required setting '{key}'")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        parse_f64(key, self.require(key)?)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Input(format!("'{key}' must be a nonnegative integer, got '{v}'")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Input(format!("'{key}' must be a nonnegative integer, got '{v}'")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(CliError::Input(format!("'{key}' must be true or false, got '{v}'"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.require(key)?.split(',').map(|v| parse_f64(key, v.trim())).collect()
    }

    /// Worker cap from `threads` (or `SQR_THREADS`), at least one.
    pub fn threads(&self) -> Result<usize> {
        match self.get("threads") {
            None => Ok(1),
            Some(_) => {
                let t = self.usize("threads")?;
                if t == 0 {
                    return Err(CliError::Input("'threads' must be at least 1".into()));
                }
                Ok(t)
            }
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| CliError::Input(format!("'{key}' must be a number, got '{v}'")))?;
    if !x.is_finite() {
        return Err(CliError::Input(format!("'{key}' must be finite, got '{v}'")));
    }
    Ok(x)
}

/// Parses a tau grid: `default` (0.01, ..., 0.99), `start:stop:step`, or a
/// comma-separated list.
pub fn parse_tau_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let taus = if spec == "default" {
        sqr_core::sqr::default_tau_grid()
    } else if let [a, b, h] = spec.split(':').collect::<Vec<_>>()[..] {
        let (a, b, h) = (parse_f64("taus", a)?, parse_f64("taus", b)?, parse_f64("taus", h)?);
        if !(h > 0.0) || b < a {
            return Err(CliError::Input(format!("bad tau range '{spec}'")));
        }
        let count = ((b - a) / h + 1e-9).floor() as usize + 1;
        (0..count).map(|k| ((a + k as f64 * h) * 1e12).round() / 1e12).collect()
    } else {
        spec.split(',').map(|v| parse_f64("taus", v.trim())).collect::<Result<Vec<_>>>()?
    };
    if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(CliError::Input(format!("tau values must lie in (0, 1): '{spec}'")));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Input(format!("tau grid must be strictly increasing: '{spec}'")));
    }
    Ok(taus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let cfg = parse_config("# run\ntau = 0.25\n\nn-samples=10\n", Path::new("c")).unwrap();
        assert_eq!(cfg, vec![("tau".into(), "0.25".into()), ("n_samples".into(), "10".into())]);
        let err = parse_config("tau 0.5", Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "tau=0.3\nlambda=2\n").unwrap();
        let flag = "0.7".to_string();
        let s = Settings::resolve(
            &["tau", "lambda", "sigma"],
            &[("tau", "0.5"), ("lambda", "1"), ("sigma", "0.2")],
            Some(&path),
            &[("tau", Some(&flag)), ("lambda", None)],
        )
        .unwrap();
        assert_eq!(s.f64("tau").unwrap(), 0.7);
        assert_eq!(s.f64("lambda").unwrap(), 2.0);
        assert_eq!(s.f64("sigma").unwrap(), 0.2);
        std::fs::write(&path, "bogus=1\n").unwrap();
        assert!(Settings::resolve(&["tau"], &[], Some(&path), &[]).is_err());
    }

    #[test]
    fn tau_grids() {
        assert_eq!(parse_tau_grid("default").unwrap().len(), 99);
        assert_eq!(parse_tau_grid("0.1:0.9:0.2").unwrap(), vec![0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(parse_tau_grid("0.25,0.75").unwrap(), vec![0.25, 0.75]);
        assert!(parse_tau_grid("0.5,0.2").is_err());
        assert!(parse_tau_grid("0,0.5").is_err());
    }
}

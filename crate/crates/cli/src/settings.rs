//! Merges command-line flags with a `key = value` config file.
//!
//! A flag given on the command line always wins; otherwise the config value
//! is used, then the built-in default.

use std::path::Path;
use std::str::FromStr;

use dsgcqr::config::KeyValues;
use dsgcqr::{Error, Result};

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "scenario.n",
    "scenario.p",
    "scenario.m",
    "scenario.tau",
    "scenario.error_kind",
    "scenario.innovation",
    "scenario.covariance",
    "scenario.rho",
    "scenario.seed",
    "topology.kind",
    "topology.pi_w",
    "topology.seed",
    "topology.edge_list",
    "fit.eta",
    "fit.kappa0",
    "fit.max_iter",
    "fit.tol",
    "fit.h",
    "fit.h_mult",
    "fit.kernel",
    "fit.seed",
    "privacy.eps_bar",
    "privacy.epsilon",
    "privacy.delta",
    "privacy.sensitivity",
    "infer.mode",
    "infer.level",
    "infer.h",
    "infer.h_mult",
    "experiment.kind",
    "experiment.replications",
    "experiment.methods",
    "experiment.train_frac",
    "experiment.seed",
    "experiment.central_eta",
    "experiment.targets",
    "constants.a_l",
    "constants.a_u",
    "constants.f_bar",
    "constants.sigma_u",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: KeyValues,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file = KeyValues::parse(text)?;
        file.check_known(KNOWN_KEYS)?;
        Ok(Settings { file })
    }

    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key),
        }
    }

    /// Comma-separated list; the flag replaces the config value entirely.
    pub fn pick_list<T: FromStr>(&self, flag: Option<Vec<T>>, key: &str) -> Result<Option<Vec<T>>> {
        if flag.is_some() {
            return Ok(flag);
        }
        let Some(e) = self.file.entry(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|v| {
                v.trim().parse().map_err(|_| Error::Parse {
                    line: e.line,
                    message: format!("invalid entry '{}' in '{key}'", v.trim()),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}
